//! Differentiable building blocks on top of candle tensors.
//!
//! Convolution is implemented as an explicit im2col/col2im pair followed by a single
//! matrix multiply, which keeps both the forward and the backward pass on the gemm path.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn out_h(&self) -> usize {
        self.out_side(self.height)
    }

    fn out_w(&self) -> usize {
        self.out_side(self.width)
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    /// Visits every (column-matrix index, image index) pair that lies inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let ncols = self.cols();
        let k = self.kernel;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for n in 0..self.batch {
                        let img_base = (n * self.channels + c) * self.height;
                        let col_base = row * ncols + n * oh * ow;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let src_row = (img_base + iy as usize) * self.width;
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                f(col_base + oy * ow + ox, src_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous_slice<'a, T: candle_core::WithDType>(
    storage: &'a [T],
    layout: &Layout,
) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&storage[start..end]),
        None => candle_core::bail!("im2col/col2im expect contiguous inputs"),
    }
}

/// Unfolds `(N, C, H, W)` into a `(C*k*k, N*Ho*Wo)` patch matrix.
struct Im2Col(ConvGeom);

/// Inverse scatter of [`Im2Col`]: sums patch entries back into `(N, C, H, W)`.
struct Col2Im(ConvGeom);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.rows(), g.cols()));
        fn run<T: candle_core::WithDType>(g: &ConvGeom, src: &[T]) -> Vec<T> {
            let mut out = vec![T::zero(); g.rows() * g.cols()];
            g.for_each_tap(|dst, s| out[dst] = src[s]);
            out
        }
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(run(&g, contiguous_slice(s, layout)?)),
            CpuStorage::F64(s) => CpuStorage::F64(run(&g, contiguous_slice(s, layout)?)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.batch, g.channels, g.height, g.width));
        fn run<T: candle_core::WithDType>(g: &ConvGeom, src: &[T]) -> Vec<T> {
            let mut out = vec![T::zero(); g.batch * g.channels * g.height * g.width];
            g.for_each_tap(|col, dst| out[dst] += src[col]);
            out
        }
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(run(&g, contiguous_slice(s, layout)?)),
            CpuStorage::F64(s) => CpuStorage::F64(run(&g, contiguous_slice(s, layout)?)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2-D cross-correlation with square kernels: `x` is `(N, Cin, H, W)`, `weight` is
/// `(Cout, Cin, k, k)`, `bias` is `(Cout)`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (cout, cin, kh, kw) = weight.dims4()?;
    if cin != c || kh != kw {
        return Err(Error::shape(format!(
            "conv2d input {:?} incompatible with kernel {:?}",
            x.dims(),
            weight.dims()
        )));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(format!("conv2d kernel {kh} larger than padded input {h}x{w}")));
    }
    let geom = ConvGeom {
        batch: n,
        channels: c,
        height: h,
        width: w,
        kernel: kh,
        stride,
        padding,
    };
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let cols = x.contiguous()?.apply_op1(Im2Col(geom))?;
    let out = weight
        .reshape((cout, geom.rows()))?
        .matmul(&cols)?
        .reshape((cout, n, oh, ow))?
        .transpose(0, 1)?;
    let out = match bias {
        Some(b) => out.broadcast_add(&b.reshape((1, cout, 1, 1))?)?,
        None => out,
    };
    Ok(out.contiguous()?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Logistic sigmoid written through `tanh` so neither pass overflows for large inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Max-shifted softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Max-shifted `log(sum(exp(x)))` over the last dimension (dimension removed).
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok((s + max)?.squeeze(D::Minus1)?)
}

/// Affine map over the last dimension: `weight` is `(out, in)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let din = *dims.last().ok_or_else(|| Error::shape("linear on a scalar"))?;
    let (dout, win) = weight.dims2()?;
    if win != din {
        return Err(Error::shape(format!("linear weight {:?} vs input {:?}", weight.dims(), dims)));
    }
    let rows = x.elem_count() / din.max(1);
    let y = x.reshape((rows, din))?.matmul(&weight.t()?)?;
    let y = match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = dout;
    Ok(y.reshape(out_dims)?)
}

/// Layer normalization over the last dimension with learned gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gain)?.broadcast_add(bias)?)
}

/// Nearest-neighbour 2x upsampling of `(N, C, H, W)`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// 2x2 average pooling of `(N, C, H, W)`.
pub fn downsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h / 2, 2, w / 2, 2))?
        .mean(5)?
        .mean(3)?)
}

/// Global average pooling `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h * w))?.mean(2)?)
}

/// Mean over every element, returned as `f64`.
pub fn mean_scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?)
}

pub fn to_f64_vec(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded_rng};
    use crate::testutil::conv_oracle;
    use candle_core::Device;

    #[test]
    fn conv_matches_direct_loops() {
        let dev = Device::Cpu;
        let mut rng = seeded_rng(1, "conv");
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (2, 1, 4)] {
            let x = normal_tensor(&mut rng, (2, 3, 6, 6), 1.0, DType::F64, &dev).unwrap();
            let wt = normal_tensor(&mut rng, (4, 3, k, k), 1.0, DType::F64, &dev).unwrap();
            let got = to_f64_vec(&conv2d(&x, &wt, None, stride, pad).unwrap()).unwrap();
            let want = conv_oracle(
                &to_f64_vec(&x).unwrap(),
                (2, 3, 6, 6),
                &to_f64_vec(&wt).unwrap(),
                (4, k),
                stride,
                pad,
            );
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad} k {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_f32_agrees_with_f64() {
        let dev = Device::Cpu;
        let mut rng = seeded_rng(2, "conv32");
        let x = normal_tensor(&mut rng, (1, 2, 5, 5), 1.0, DType::F64, &dev).unwrap();
        let wt = normal_tensor(&mut rng, (3, 2, 3, 3), 1.0, DType::F64, &dev).unwrap();
        let a = to_f64_vec(&conv2d(&x, &wt, None, 1, 1).unwrap()).unwrap();
        let b = conv2d(
            &x.to_dtype(DType::F32).unwrap(),
            &wt.to_dtype(DType::F32).unwrap(),
            None,
            1,
            1,
        )
        .unwrap();
        for (p, q) in a.iter().zip(to_f64_vec(&b).unwrap()) {
            assert!((p - q).abs() < 1e-4);
        }
    }

    #[test]
    fn upsample_and_downsample() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f64, 4.0, &dev).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let up = upsample2x(&x).unwrap();
        assert_eq!(
            to_f64_vec(&up).unwrap(),
            vec![0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]
        );
        let down = downsample2x(&up).unwrap();
        assert_eq!(to_f64_vec(&down).unwrap(), vec![0., 1., 2., 3.]);
    }

    #[test]
    fn sigmoid_is_stable() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[-1000f64, 0.0, 1.0, 1000.0], &dev).unwrap();
        let y = to_f64_vec(&sigmoid(&x).unwrap()).unwrap();
        assert_eq!(y[0], 0.0);
        assert_eq!(y[1], 0.5);
        assert!((y[2] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
        assert_eq!(y[3], 1.0);
    }

    #[test]
    fn logsumexp_handles_large_values() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[1000f64, 1000.0], [0.0, 0.0]], &dev).unwrap();
        let y = to_f64_vec(&logsumexp_last(&x).unwrap()).unwrap();
        assert!((y[0] - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert!((y[1] - 2f64.ln()).abs() < 1e-15);
    }
}
