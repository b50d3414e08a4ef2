//! Multi-scale patch critic and the hinge adversarial objectives.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::ops::{self, leaky_relu};
use crate::params::{Conv, ParamInit};
use crate::{Error, Result};

pub const SCALES: usize = 2;
const WIDTHS: [usize; 3] = [16, 32, 64];

/// Four stride-2 convolutions ending in a one-channel patch score map.
#[derive(Debug, Clone)]
pub struct CriticScale {
    pub convs: Vec<Conv>,
}

impl CriticScale {
    fn new(init: &mut ParamInit, name: &str) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in WIDTHS.iter().chain(std::iter::once(&1)).enumerate() {
            convs.push(init.conv(&format!("{name}/conv{i}"), cin, cout, 3, 2, true)?);
            cin = cout;
        }
        Ok(Self { convs })
    }

    /// Patch scores `(N, 1, h, w)`.
    pub fn patch_scores(&self, img: &Tensor) -> Result<Tensor> {
        let mut x = img.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i < last {
                x = leaky_relu(&x, 0.2)?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct Critic {
    pub scales: Vec<CriticScale>,
    image_size: usize,
}

impl Critic {
    pub fn new(init: &mut ParamInit, cfg: &ModelConfig) -> Result<Self> {
        let scales = (0..SCALES)
            .map(|s| CriticScale::new(init, &format!("scale{s}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scales,
            image_size: cfg.image_size,
        })
    }

    /// Per-sample realism score `(N)`: mean over scales of the mean patch score. Scale `s`
    /// sees the image average-pooled `s` times.
    pub fn scores(&self, img: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = img.dims4()?;
        if (c, h, w) != (3, self.image_size, self.image_size) {
            return Err(Error::shape(format!(
                "critic expects 3x{0}x{0} images, got {c}x{h}x{w}",
                self.image_size
            )));
        }
        let mut x = img.clone();
        let mut total: Option<Tensor> = None;
        for (s, scale) in self.scales.iter().enumerate() {
            if s > 0 {
                x = ops::downsample2x(&x)?;
            }
            let patch = scale.patch_scores(&x)?;
            let mean = patch.reshape((n, ()))?.mean(1)?;
            total = Some(match total {
                Some(t) => (t + mean)?,
                None => mean,
            });
        }
        Ok((total.expect("critic has at least one scale") / self.scales.len() as f64)?)
    }
}

/// Generator hinge objective: the negated mean fake score.
pub fn adv_loss_g(fake_scores: &Tensor) -> Result<Tensor> {
    Ok(fake_scores.mean_all()?.neg()?)
}

/// Critic hinge objective `mean(max(0, 1 - real)) + mean(max(0, 1 + fake))`.
pub fn adv_loss_v(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    let real = real_scores.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let fake = fake_scores.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok((real + fake)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::to_f64_vec;
    use crate::params::ParamStore;
    use crate::rng::{normal_tensor, seeded_rng};
    use crate::testutil::conv_oracle;
    use candle_core::{DType, Device};

    fn scalar(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn val(t: Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn generator_objective() {
        assert_eq!(val(adv_loss_g(&scalar(&[0.0])).unwrap()), 0.0);
        assert_eq!(val(adv_loss_g(&scalar(&[2.5])).unwrap()), -2.5);
        assert_eq!(val(adv_loss_g(&scalar(&[1.0, -1.0])).unwrap()), 0.0);
    }

    #[test]
    fn critic_objective() {
        assert_eq!(val(adv_loss_v(&scalar(&[1.0]), &scalar(&[-1.0])).unwrap()), 0.0);
        assert_eq!(val(adv_loss_v(&scalar(&[0.0]), &scalar(&[0.0])).unwrap()), 2.0);
        assert_eq!(val(adv_loss_v(&scalar(&[2.0]), &scalar(&[-3.0])).unwrap()), 0.0);
    }

    fn critic(seed: u64) -> Critic {
        let mut store = ParamStore::new(DType::F64);
        Critic::new(&mut ParamInit::new(&mut store, "critic", seed), &ModelConfig::toy()).unwrap()
    }

    #[test]
    fn zero_weights_score_zero() {
        let mut c = critic(0);
        for scale in &mut c.scales {
            for conv in &mut scale.convs {
                conv.weight = conv.weight.zeros_like().unwrap();
            }
        }
        let img = normal_tensor(&mut seeded_rng(0, "img"), (2, 3, 16, 16), 0.5, DType::F64, &Device::Cpu).unwrap();
        assert!(to_f64_vec(&c.scores(&img).unwrap()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_direct_convolution() {
        let c = critic(4);
        let img = normal_tensor(&mut seeded_rng(1, "img"), (1, 3, 16, 16), 0.5, DType::F64, &Device::Cpu).unwrap();
        let got = to_f64_vec(&c.scores(&img).unwrap()).unwrap()[0];

        let mut x = to_f64_vec(&img).unwrap();
        let mut side = 16;
        let mut total = 0.0;
        for (s, scale) in c.scales.iter().enumerate() {
            if s > 0 {
                let half = side / 2;
                let mut pooled = vec![0.0; 3 * half * half];
                for ch in 0..3 {
                    for y in 0..half {
                        for xx in 0..half {
                            let at = |dy: usize, dx: usize| x[(ch * side + 2 * y + dy) * side + 2 * xx + dx];
                            pooled[(ch * half + y) * half + xx] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
                        }
                    }
                }
                x = pooled;
                side = half;
            }
            let mut feat = x.clone();
            let mut fside = side;
            let mut cin = 3;
            for (i, conv) in scale.convs.iter().enumerate() {
                let cout = conv.out_channels();
                let out_side = (fside + 2 - 3) / 2 + 1;
                let mut y = conv_oracle(&feat, (1, cin, fside, fside), &to_f64_vec(&conv.weight).unwrap(), (cout, 3), 2, 1);
                let b = to_f64_vec(conv.bias.as_ref().unwrap()).unwrap();
                for (j, v) in y.iter_mut().enumerate() {
                    *v += b[j / (out_side * out_side)];
                    if i + 1 < scale.convs.len() && *v < 0.0 {
                        *v *= 0.2;
                    }
                }
                feat = y;
                fside = out_side;
                cin = cout;
            }
            total += feat.iter().sum::<f64>() / feat.len() as f64;
        }
        let want = total / c.scales.len() as f64;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn deterministic_scores() {
        let c = critic(2);
        let img = normal_tensor(&mut seeded_rng(3, "img"), (2, 3, 16, 16), 0.5, DType::F64, &Device::Cpu).unwrap();
        let a = to_f64_vec(&c.scores(&img).unwrap()).unwrap();
        let b = to_f64_vec(&c.scores(&img).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_size() {
        let c = critic(0);
        let img = Tensor::zeros((1, 3, 8, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(c.scores(&img), Err(Error::Shape(_))));
    }
}
