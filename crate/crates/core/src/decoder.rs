//! Style decoder: a learned 4x4 constant is grown to full resolution by style blocks. Every
//! conv layer adds per-pixel noise and is modulated by one style element through AdaIN;
//! target pyramid features are added back after the block of matching resolution.

use candle_core::{Tensor, D};

use crate::config::ModelConfig;
use crate::ops::{self, leaky_relu};
use crate::params::{Conv, ParamInit};
use crate::rng::{normal_tensor, Stream};
use crate::types::{FeaturePyramid, StyleCode};
use crate::{Error, Result};

pub const ADAIN_EPS: f64 = 1e-5;
const NOISE_INIT: f64 = 0.05;
// Keeps the square-root derivative finite on perfectly flat channels.
const VAR_FLOOR: f64 = 1e-12;

/// Learned affine map `T` from a style element to `[gamma, beta]`.
#[derive(Debug, Clone)]
pub struct StyleAffine {
    /// `(2C, D)`; rows `0..C` produce gamma, rows `C..2C` produce beta.
    pub weight: Tensor,
    /// `(2C)`, initialized to ones for gamma and zeros for beta.
    pub bias: Tensor,
}

impl StyleAffine {
    pub fn new(init: &mut ParamInit, name: &str, style_dim: usize, channels: usize) -> Result<Self> {
        let weight = init.normal(
            &format!("{name}/weight"),
            (2 * channels, style_dim),
            0.5 / (style_dim as f64).sqrt(),
        )?;
        let mut b = vec![1.0; channels];
        b.extend(std::iter::repeat_n(0.0, channels));
        let bias = init.values(&format!("{name}/bias"), 2 * channels, b)?;
        Ok(Self { weight, bias })
    }

    pub fn channels(&self) -> usize {
        self.weight.dims()[0] / 2
    }
}

/// `[gamma, beta] = T w`, each `(N, C)`.
pub fn style_to_affine(w: &Tensor, affine: &StyleAffine) -> Result<(Tensor, Tensor)> {
    let c = affine.channels();
    let d = affine.weight.dims()[1];
    if w.dims().last() != Some(&d) {
        return Err(Error::shape(format!(
            "style element {:?} does not match affine input width {d}",
            w.dims()
        )));
    }
    let gb = ops::linear(w, &affine.weight, Some(&affine.bias))?;
    let last = gb.rank() - 1;
    Ok((gb.narrow(last, 0, c)?, gb.narrow(last, c, c)?))
}

fn instance_stats(x: &Tensor, detach_std: bool) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
    let std = (var + VAR_FLOOR)?.sqrt()?;
    let std = if detach_std { std.detach() } else { std };
    Ok((mean.reshape((n, c, 1, 1))?, std.reshape((n, c, 1, 1))?))
}

fn modulate(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64, detach_std: bool) -> Result<Tensor> {
    let (n, c, _, _) = x.dims4()?;
    if gamma.dims() != [n, c] || beta.dims() != [n, c] {
        return Err(Error::shape(format!(
            "AdaIN on {:?} with gamma {:?} and beta {:?}",
            x.dims(),
            gamma.dims(),
            beta.dims()
        )));
    }
    let (mean, std) = instance_stats(x, detach_std)?;
    let normed = x.broadcast_sub(&mean)?.broadcast_div(&(std + eps)?)?;
    Ok(normed
        .broadcast_mul(&gamma.reshape((n, c, 1, 1))?)?
        .broadcast_add(&beta.reshape((n, c, 1, 1))?)?)
}

/// `(x - mean) / (std + eps) * gamma + beta` per sample and channel, using the population
/// standard deviation over spatial positions.
pub fn adain_with(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    modulate(x, gamma, beta, eps, false)
}

/// Deliberately wrong AdaIN whose backward pass ignores the standard deviation. Exists only
/// so the self-check can prove it detects a broken gradient.
#[doc(hidden)]
pub fn adain_with_detached_std(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    modulate(x, gamma, beta, eps, true)
}

/// AdaIN driven by style element `w` (`(N, D)`) through the affine map `T`.
pub fn adain(x: &Tensor, w: &Tensor, affine: &StyleAffine) -> Result<Tensor> {
    let c = x.dims4()?.1;
    if c != affine.channels() {
        return Err(Error::shape(format!(
            "AdaIN affine produces {} channels, features have {c}",
            affine.channels()
        )));
    }
    let (gamma, beta) = style_to_affine(w, affine)?;
    adain_with(x, &gamma, &beta, ADAIN_EPS)
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub conv: Conv,
    /// Per-channel noise strength `(C)`.
    pub noise_scale: Tensor,
    pub affine: StyleAffine,
    pub style_index: usize,
}

#[derive(Debug, Clone)]
pub struct Shortcut {
    pub level: usize,
    pub proj: Conv,
    /// Scalar gate `(1)`, initialized open.
    pub gate: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub side: usize,
    pub layers: Vec<DecoderLayer>,
    pub shortcut: Option<Shortcut>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: ModelConfig,
    pub constant: Tensor,
    pub blocks: Vec<DecoderBlock>,
    pub to_rgb: Conv,
}

impl Decoder {
    pub fn new(init: &mut ParamInit, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.channels_at(4);
        let constant = init.normal("const", (1, c0, 4, 4), 1.0)?;
        let mut cin = c0;
        let mut blocks = Vec::with_capacity(cfg.decoder_blocks);
        for b in 0..cfg.decoder_blocks {
            let side = cfg.block_side(b);
            let cout = cfg.channels_at(side);
            let mut layers = Vec::new();
            for (j, style_index) in cfg.block_styles(b).enumerate() {
                let name = format!("block{b}/layer{j}");
                layers.push(DecoderLayer {
                    conv: init.conv(&format!("{name}/conv"), cin, cout, 3, 1, true)?,
                    noise_scale: init.constant(&format!("{name}/noise_scale"), cout, NOISE_INIT)?,
                    affine: StyleAffine::new(init, &format!("{name}/affine"), cfg.style_dim, cout)?,
                    style_index,
                });
                cin = cout;
            }
            let shortcut = match (0..cfg.pyramid_levels).find(|&p| cfg.pyramid_side(p) == side) {
                Some(level) => Some(Shortcut {
                    level,
                    proj: init.conv(&format!("block{b}/shortcut"), cfg.pyramid_channels(), cout, 1, 1, true)?,
                    gate: init.constant(&format!("block{b}/gate"), 1, 1.0)?,
                }),
                None => None,
            };
            blocks.push(DecoderBlock {
                side,
                layers,
                shortcut,
            });
        }
        let to_rgb = init.conv("to_rgb", cin, 3, 1, 1, true)?;
        Ok(Self {
            cfg: *cfg,
            constant,
            blocks,
            to_rgb,
        })
    }

    /// Synthesizes `(N, 3, S, S)` images in `[-1, 1]` from blended codes and target features.
    pub fn decode(&self, code: &StyleCode, pyramid: &FeaturePyramid, noise: &mut Stream) -> Result<Tensor> {
        code.check(&self.cfg)?;
        pyramid.check(&self.cfg)?;
        let w = code.tensor();
        let n = w.dims3()?.0;
        let (_, c0, _, _) = self.constant.dims4()?;
        let mut x = self.constant.broadcast_as((n, c0, 4, 4))?.contiguous()?;
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                x = ops::upsample2x(&x)?;
            }
            for layer in &block.layers {
                x = layer.conv.forward(&x)?;
                let c = layer.conv.out_channels();
                let z = normal_tensor(noise, (n, 1, block.side, block.side), 1.0, x.dtype(), x.device())?;
                let scale = layer.noise_scale.reshape((1, c, 1, 1))?;
                x = (x.broadcast_add(&z.broadcast_mul(&scale)?))?;
                x = leaky_relu(&x, 0.2)?;
                let style = w.narrow(1, layer.style_index, 1)?.squeeze(1)?;
                x = adain(&x, &style, &layer.affine)?;
            }
            if let Some(sc) = &block.shortcut {
                let feat = sc.proj.forward(&pyramid.levels[sc.level])?;
                x = (x + feat.broadcast_mul(&sc.gate)?)?;
            }
        }
        Ok(self.to_rgb.forward(&x)?.tanh()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::to_f64_vec;
    use crate::params::ParamStore;
    use crate::rng::seeded_rng;
    use candle_core::{DType, Device};

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn adain_two_cells() {
        let x = t(&[1.0, 3.0], &[1, 1, 1, 2]);
        let y = adain_with(&x, &t(&[2.0], &[1, 1]), &t(&[1.0], &[1, 1]), 0.0).unwrap();
        let y = to_f64_vec(&y).unwrap();
        assert!((y[0] + 1.0).abs() < 1e-9 && (y[1] - 3.0).abs() < 1e-9, "{y:?}");
    }

    #[test]
    fn adain_zero_gamma_is_beta() {
        let x = normal_tensor(&mut seeded_rng(1, "x"), (2, 3, 4, 4), 2.0, DType::F64, &Device::Cpu).unwrap();
        let beta = t(&[0.5, -1.0, 2.0, 0.0, 3.0, -0.25], &[2, 3]);
        let y = adain_with(&x, &Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap(), &beta, ADAIN_EPS).unwrap();
        let b = to_f64_vec(&beta).unwrap();
        for (i, v) in to_f64_vec(&y).unwrap().iter().enumerate() {
            assert_eq!(*v, b[i / 16]);
        }
    }

    #[test]
    fn adain_unit_affine_on_standardized_input() {
        let x = t(&[-1.0, 1.0, -1.0, 1.0], &[1, 1, 2, 2]);
        let y = adain_with(&x, &t(&[1.0], &[1, 1]), &t(&[0.0], &[1, 1]), ADAIN_EPS).unwrap();
        for (a, b) in to_f64_vec(&x).unwrap().iter().zip(to_f64_vec(&y).unwrap()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn affine_matches_matvec() {
        let mut store = ParamStore::new(DType::F64);
        let affine = StyleAffine::new(&mut ParamInit::new(&mut store, "t", 5), "a", 3, 2).unwrap();
        let w = t(&[0.3, -1.2, 2.0], &[1, 3]);
        let (g, b) = style_to_affine(&w, &affine).unwrap();
        let wt = to_f64_vec(&affine.weight).unwrap();
        let bias = to_f64_vec(&affine.bias).unwrap();
        let x = [0.3, -1.2, 2.0];
        let want: Vec<f64> = (0..4).map(|r| bias[r] + (0..3).map(|k| wt[r * 3 + k] * x[k]).sum::<f64>()).collect();
        let got = [to_f64_vec(&g).unwrap(), to_f64_vec(&b).unwrap()].concat();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }

        let zero = StyleAffine {
            weight: affine.weight.zeros_like().unwrap(),
            bias: affine.bias.clone(),
        };
        let (g, b) = style_to_affine(&w, &zero).unwrap();
        assert_eq!(to_f64_vec(&g).unwrap(), vec![1.0, 1.0]);
        assert_eq!(to_f64_vec(&b).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn affine_rejects_width_mismatch() {
        let mut store = ParamStore::new(DType::F64);
        let affine = StyleAffine::new(&mut ParamInit::new(&mut store, "t", 5), "a", 3, 2).unwrap();
        assert!(style_to_affine(&t(&[1.0, 2.0], &[1, 2]), &affine).is_err());
    }

    struct Fixture {
        cfg: ModelConfig,
        decoder: Decoder,
        code: StyleCode,
        pyramid: FeaturePyramid,
    }

    fn fixture(cfg: ModelConfig) -> Fixture {
        let mut store = ParamStore::new(DType::F64);
        let decoder = Decoder::new(&mut ParamInit::new(&mut store, "decoder", 2), &cfg).unwrap();
        let mut rng = seeded_rng(3, "inputs");
        let code = StyleCode(
            normal_tensor(&mut rng, (2, cfg.style_count, cfg.style_dim), 1.0, DType::F64, &Device::Cpu).unwrap(),
        );
        let levels = (0..cfg.pyramid_levels)
            .map(|p| {
                let s = cfg.pyramid_side(p);
                normal_tensor(&mut rng, (2, cfg.pyramid_channels(), s, s), 1.0, DType::F64, &Device::Cpu).unwrap()
            })
            .collect();
        Fixture {
            cfg,
            decoder,
            code,
            pyramid: FeaturePyramid { levels },
        }
    }

    fn run(f: &Fixture, pyramid: &FeaturePyramid, seed: u64) -> Vec<f64> {
        let y = f.decoder.decode(&f.code, pyramid, &mut seeded_rng(seed, "noise")).unwrap();
        to_f64_vec(&y).unwrap()
    }

    #[test]
    fn deterministic_for_fixed_noise() {
        let f = fixture(ModelConfig::toy());
        assert_eq!(run(&f, &f.pyramid, 9), run(&f, &f.pyramid, 9));
        assert_ne!(run(&f, &f.pyramid, 9), run(&f, &f.pyramid, 10));
    }

    #[test]
    fn zero_noise_scale_removes_noise() {
        let mut f = fixture(ModelConfig::toy());
        for block in &mut f.decoder.blocks {
            for layer in &mut block.layers {
                layer.noise_scale = layer.noise_scale.zeros_like().unwrap();
            }
        }
        assert_eq!(run(&f, &f.pyramid, 1), run(&f, &f.pyramid, 2));
    }

    #[test]
    fn closed_gates_ignore_pyramid() {
        let mut f = fixture(ModelConfig::toy());
        let mut gated = 0;
        for block in &mut f.decoder.blocks {
            if let Some(sc) = &mut block.shortcut {
                sc.gate = sc.gate.zeros_like().unwrap();
                gated += 1;
            }
        }
        assert!(gated > 0);
        let other = FeaturePyramid {
            levels: f.pyramid.levels.iter().map(|l| (l * 3.0).unwrap()).collect(),
        };
        assert_eq!(run(&f, &f.pyramid, 4), run(&f, &other, 4));
    }

    #[test]
    fn open_gates_use_pyramid() {
        let f = fixture(ModelConfig::toy());
        let other = FeaturePyramid {
            levels: f.pyramid.levels.iter().map(|l| (l * 3.0).unwrap()).collect(),
        };
        assert_ne!(run(&f, &f.pyramid, 4), run(&f, &other, 4));
    }

    #[test]
    fn desk_output_shape_and_range() {
        let f = fixture(ModelConfig::desk());
        let y = f.decoder.decode(&f.code, &f.pyramid, &mut seeded_rng(0, "noise")).unwrap();
        let s = f.cfg.image_size;
        assert_eq!(y.dims(), [2, 3, s, s]);
        assert!(to_f64_vec(&y).unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_wrong_code_shape() {
        let f = fixture(ModelConfig::toy());
        let bad = StyleCode(Tensor::zeros((2, f.cfg.style_count + 1, f.cfg.style_dim), DType::F64, &Device::Cpu).unwrap());
        assert!(f.decoder.decode(&bad, &f.pyramid, &mut seeded_rng(0, "n")).is_err());
    }
}
