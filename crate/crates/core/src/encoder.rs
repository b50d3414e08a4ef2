//! Facial attributes encoder: squeeze-excitation residual backbone, top-down feature pyramid
//! and one style head per style element.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::ops::{self, leaky_relu, sigmoid};
use crate::params::{Conv, Linear, ParamInit};
use crate::types::{FeaturePyramid, StyleCode};
use crate::{Error, Result};

const SLOPE: f64 = 0.2;

/// Channel gate: global average pool, bottleneck, ReLU, expand, sigmoid.
#[derive(Debug, Clone)]
pub struct SeGate {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl SeGate {
    pub fn new(init: &mut ParamInit, name: &str, channels: usize) -> Result<Self> {
        let hidden = (channels / 4).max(2);
        Ok(Self {
            squeeze: init.linear(&format!("{name}/squeeze"), channels, hidden, true)?,
            excite: init.linear(&format!("{name}/excite"), hidden, channels, true)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.excite.weight.dims()[0]
    }

    /// Per-channel gates in `(0, 1)`, shape `(N, C)`.
    pub fn gates(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = ops::global_avg_pool(x)?;
        let hidden = self.squeeze.forward(&pooled)?.relu()?;
        sigmoid(&self.excite.forward(&hidden)?)
    }
}

/// Rescales `x` channel-wise by the gates computed from `x` itself.
pub fn se_block(x: &Tensor, gate: &SeGate) -> Result<Tensor> {
    let (n, c, _, _) = x.dims4()?;
    if c != gate.channels() {
        return Err(Error::shape(format!(
            "squeeze-excitation gate for {} channels applied to {c}",
            gate.channels()
        )));
    }
    let g = gate.gates(x)?.reshape((n, c, 1, 1))?;
    Ok(x.broadcast_mul(&g)?)
}

#[derive(Debug, Clone)]
pub struct SeResBlock {
    conv1: Conv,
    conv2: Conv,
    gate: SeGate,
    shortcut: Option<Conv>,
}

impl SeResBlock {
    fn new(init: &mut ParamInit, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let shortcut = if cin != cout || stride != 1 {
            Some(init.conv(&format!("{name}/shortcut"), cin, cout, 1, stride, false)?)
        } else {
            None
        };
        Ok(Self {
            conv1: init.conv(&format!("{name}/conv1"), cin, cout, 3, stride, true)?,
            conv2: init.conv(&format!("{name}/conv2"), cout, cout, 3, 1, true)?,
            gate: SeGate::new(init, &format!("{name}/se"), cout)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.conv1.forward(x)?, SLOPE)?;
        let h = se_block(&self.conv2.forward(&h)?, &self.gate)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        leaky_relu(&(h + skip)?, SLOPE)
    }
}

/// Stride-2 conv stack down to 1x1 followed by a projection to one style element.
#[derive(Debug, Clone)]
pub struct StyleHead {
    pub convs: Vec<Conv>,
    pub fc: Linear,
    pub input_side: usize,
}

impl StyleHead {
    pub fn new(init: &mut ParamInit, name: &str, channels: usize, side: usize, style_dim: usize) -> Result<Self> {
        let depth = conv_depth(side);
        let convs = (0..depth)
            .map(|i| init.conv(&format!("{name}/conv{i}"), channels, channels, 3, 2, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            fc: init.linear(&format!("{name}/fc"), channels, style_dim, true)?,
            input_side: side,
        })
    }
}

/// Number of stride-2 convolutions that reduce `side` to 1.
pub fn conv_depth(side: usize) -> usize {
    side.next_power_of_two().trailing_zeros() as usize
}

/// Maps a pyramid level `(N, C, s, s)` to style elements `(N, D)`.
pub fn style_head(feat: &Tensor, head: &StyleHead) -> Result<Tensor> {
    let (n, c, h, w) = feat.dims4()?;
    if h != head.input_side || w != head.input_side {
        return Err(Error::shape(format!(
            "style head expects {0}x{0} features, got {h}x{w}",
            head.input_side
        )));
    }
    let mut x = feat.clone();
    for conv in &head.convs {
        x = leaky_relu(&conv.forward(&x)?, SLOPE)?;
    }
    head.fc.forward(&x.reshape((n, c))?)
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: ModelConfig,
    stem: Conv,
    stages: Vec<Vec<SeResBlock>>,
    /// 1x1 projections into the pyramid, coarsest level first.
    laterals: Vec<Conv>,
    /// One head per style element, in style-element order.
    heads: Vec<StyleHead>,
}

impl Encoder {
    pub const BLOCKS_PER_STAGE: usize = 2;

    pub fn new(init: &mut ParamInit, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.image_size;
        let stem_ch = cfg.channels_at(s / 2);
        let stem = init.conv("stem", 3, stem_ch, 3, 2, true)?;
        let mut stages = Vec::new();
        let mut cin = stem_ch;
        // One stage per pyramid level plus a leading full-width stage.
        for stage in 0..=cfg.pyramid_levels {
            let side = s >> (stage + 1);
            let cout = cfg.channels_at(side);
            let mut blocks = Vec::new();
            for b in 0..Self::BLOCKS_PER_STAGE {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(SeResBlock::new(
                    init,
                    &format!("stage{stage}/block{b}"),
                    cin,
                    cout,
                    stride,
                )?);
                cin = cout;
            }
            stages.push(blocks);
        }
        let pyr = cfg.pyramid_channels();
        let laterals = (0..cfg.pyramid_levels)
            .map(|p| {
                let stage = cfg.pyramid_levels - p;
                let ch = cfg.channels_at(s >> (stage + 1));
                init.conv(&format!("lateral{p}"), ch, pyr, 1, 1, true)
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = (0..cfg.style_count)
            .map(|i| {
                let level = i / cfg.styles_per_level();
                StyleHead::new(init, &format!("head{i}"), pyr, cfg.pyramid_side(level), cfg.style_dim)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: *cfg,
            stem,
            stages,
            laterals,
            heads,
        })
    }

    pub fn heads(&self) -> &[StyleHead] {
        &self.heads
    }

    /// Backbone and top-down pyramid only.
    pub fn pyramid(&self, img: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = img.dims4()?;
        let s = self.cfg.image_size;
        if (c, h, w) != (3, s, s) {
            return Err(Error::shape(format!(
                "encoder expects 3x{s}x{s} images, got {c}x{h}x{w}"
            )));
        }
        let mut x = leaky_relu(&self.stem.forward(img)?, SLOPE)?;
        let mut taps = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(&x)?;
            }
            if i > 0 {
                taps.push(x.clone());
            }
        }
        // taps run fine to coarse; the pyramid runs coarse to fine.
        let mut levels: Vec<Tensor> = Vec::with_capacity(taps.len());
        for (p, tap) in taps.iter().rev().enumerate() {
            let lateral = self.laterals[p].forward(tap)?;
            let level = match levels.last() {
                Some(coarser) => (lateral + ops::upsample2x(coarser)?)?,
                None => lateral,
            };
            levels.push(level);
        }
        Ok(FeaturePyramid { levels })
    }

    /// Encodes a batch `(N, 3, S, S)` into style codes and the feature pyramid.
    pub fn encode(&self, img: &Tensor) -> Result<(StyleCode, FeaturePyramid)> {
        let pyramid = self.pyramid(img)?;
        let per_level = self.cfg.styles_per_level();
        let elements = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, head)| style_head(&pyramid.levels[i / per_level], head))
            .collect::<Result<Vec<_>>>()?;
        let code = Tensor::stack(&elements, 1)?;
        Ok((StyleCode(code), pyramid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::to_f64_vec;
    use crate::params::ParamStore;
    use crate::rng::{normal_tensor, seeded_rng};
    use crate::testutil::conv_oracle;
    use candle_core::{DType, Device};

    fn gate_with(channels: usize, excite_bias: f64) -> SeGate {
        let mut store = ParamStore::new(DType::F64);
        let mut init = ParamInit::new(&mut store, "t", 0);
        let mut gate = SeGate::new(&mut init, "se", channels).unwrap();
        gate.excite.weight = gate.excite.weight.zeros_like().unwrap();
        gate.excite.bias = Some((gate.excite.bias.unwrap().ones_like().unwrap() * excite_bias).unwrap());
        gate
    }

    #[test]
    fn se_saturated_gate_is_identity() {
        let x = normal_tensor(&mut seeded_rng(0, "x"), (2, 4, 3, 3), 1.0, DType::F64, &Device::Cpu).unwrap();
        let y = se_block(&x, &gate_with(4, 60.0)).unwrap();
        for (a, b) in to_f64_vec(&x).unwrap().iter().zip(to_f64_vec(&y).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn se_half_gate_halves() {
        let x = Tensor::new(&[1.0f64, -3.0, 0.5], &Device::Cpu).unwrap().reshape((1, 3, 1, 1)).unwrap();
        let y = se_block(&x, &gate_with(3, 0.0)).unwrap();
        assert_eq!(to_f64_vec(&y).unwrap(), vec![0.5, -1.5, 0.25]);
    }

    #[test]
    fn se_zero_input() {
        let mut store = ParamStore::new(DType::F64);
        let gate = SeGate::new(&mut ParamInit::new(&mut store, "t", 3), "se", 4).unwrap();
        let x = Tensor::zeros((1, 4, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(to_f64_vec(&se_block(&x, &gate).unwrap()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_gates_strictly_inside_unit_interval() {
        let mut store = ParamStore::new(DType::F64);
        let gate = SeGate::new(&mut ParamInit::new(&mut store, "t", 4), "se", 8).unwrap();
        let x = normal_tensor(&mut seeded_rng(1, "x"), (3, 8, 4, 4), 3.0, DType::F64, &Device::Cpu).unwrap();
        for g in to_f64_vec(&gate.gates(&x).unwrap()).unwrap() {
            assert!(g > 0.0 && g < 1.0);
        }
    }

    #[test]
    fn se_channel_mismatch() {
        let x = Tensor::zeros((1, 5, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(se_block(&x, &gate_with(4, 0.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_depth_reaches_one() {
        assert_eq!(conv_depth(1), 0);
        assert_eq!(conv_depth(4), 2);
        assert_eq!(conv_depth(16), 4);
    }

    fn head(side: usize, dim: usize, seed: u64) -> StyleHead {
        let mut store = ParamStore::new(DType::F64);
        StyleHead::new(&mut ParamInit::new(&mut store, "h", seed), "head", 3, side, dim).unwrap()
    }

    #[test]
    fn style_head_zero_in_zero_out() {
        let h = head(4, 64, 0);
        let x = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let y = style_head(&x, &h).unwrap();
        assert_eq!(y.dims(), &[1, 64]);
        assert!(to_f64_vec(&y).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn style_head_matches_direct_convolution() {
        let h = head(4, 5, 9);
        let x = normal_tensor(&mut seeded_rng(2, "feat"), (1, 3, 4, 4), 1.0, DType::F64, &Device::Cpu).unwrap();
        let got = to_f64_vec(&style_head(&x, &h).unwrap()).unwrap();

        let mut feat = to_f64_vec(&x).unwrap();
        let mut side = 4;
        for conv in &h.convs {
            let out_side = side / 2;
            let mut y = conv_oracle(&feat, (1, 3, side, side), &to_f64_vec(&conv.weight).unwrap(), (3, 3), 2, 1);
            let bias = to_f64_vec(conv.bias.as_ref().unwrap()).unwrap();
            for (i, v) in y.iter_mut().enumerate() {
                *v += bias[i / (out_side * out_side)];
                if *v < 0.0 {
                    *v *= 0.2;
                }
            }
            feat = y;
            side = out_side;
        }
        let w = to_f64_vec(&h.fc.weight).unwrap();
        let b = to_f64_vec(h.fc.bias.as_ref().unwrap()).unwrap();
        for o in 0..5 {
            let want: f64 = b[o] + (0..3).map(|i| w[o * 3 + i] * feat[i]).sum::<f64>();
            assert!((got[o] - want).abs() < 1e-12, "{o}: {} vs {want}", got[o]);
        }
    }

    #[test]
    fn style_head_rejects_wrong_level() {
        let h = head(4, 5, 0);
        let x = Tensor::zeros((1, 3, 8, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(style_head(&x, &h), Err(Error::Shape(_))));
    }
}
