//! Brute-force reference implementations for unit tests.

/// Direct seven-loop cross-correlation over `(n, c, h, w)` input and `(co, c, k, k)` kernel.
pub fn conv_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (co, k_side): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - k_side) / stride + 1;
    let ow = (w + 2 * pad - k_side) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..c {
                        for ky in 0..k_side {
                            for kx in 0..k_side {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + i) * h + iy as usize) * w + ix as usize]
                                    * k[((o * c + i) * k_side + ky) * k_side + kx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}
