//! Perception functions used by the identity and landmark objectives.
//!
//! Both are small convolutional networks with frozen, seeded random weights standing in for
//! pretrained face-recognition and landmark models. They are differentiable with respect to
//! the input image and are never updated by the optimizer.

use candle_core::{Tensor, D};

use crate::config::ModelConfig;
use crate::ops::{self, leaky_relu, softmax_last};
use crate::params::{Conv, Linear, ParamInit};
use crate::types::{IdEmbedding, LandmarkSet};
use crate::{Error, Result};

const ID_WIDTHS: [usize; 3] = [16, 32, 64];
const LM_WIDTHS: [usize; 2] = [16, 32];
const NORM_FLOOR: f64 = 1e-24;

fn check_image(img: &Tensor, side: usize) -> Result<()> {
    let (_, c, h, w) = img.dims4()?;
    if (c, h, w) != (3, side, side) {
        return Err(Error::shape(format!(
            "extractor expects 3x{side}x{side} images, got {c}x{h}x{w}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct IdExtractor {
    pub convs: Vec<Conv>,
    pub proj: Linear,
    image_size: usize,
}

impl IdExtractor {
    pub fn new(init: &mut ParamInit, cfg: &ModelConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in ID_WIDTHS.iter().enumerate() {
            convs.push(init.conv(&format!("id/conv{i}"), cin, cout, 3, 2, true)?);
            cin = cout;
        }
        Ok(Self {
            convs,
            proj: init.linear("id/proj", cin, cfg.id_dim, true)?,
            image_size: cfg.image_size,
        })
    }

    /// Embedding before unit normalization, `(N, E)`.
    pub fn raw(&self, img: &Tensor) -> Result<Tensor> {
        check_image(img, self.image_size)?;
        let mut x = img.clone();
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, 0.2)?;
        }
        self.proj.forward(&ops::global_avg_pool(&x)?)
    }
}

/// Unit-norm identity embedding of each image in the batch.
pub fn extract_id(img: &Tensor, ex: &IdExtractor) -> Result<IdEmbedding> {
    let raw = ex.raw(img)?;
    let norm = (raw.sqr()?.sum_keepdim(D::Minus1)? + NORM_FLOOR)?.sqrt()?;
    Ok(IdEmbedding(raw.broadcast_div(&norm)?))
}

#[derive(Debug, Clone)]
pub struct LandmarkExtractor {
    pub convs: Vec<Conv>,
    pub heatmap: Conv,
    image_size: usize,
}

impl LandmarkExtractor {
    pub fn new(init: &mut ParamInit, cfg: &ModelConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in LM_WIDTHS.iter().enumerate() {
            convs.push(init.conv(&format!("lm/conv{i}"), cin, cout, 3, 2, true)?);
            cin = cout;
        }
        Ok(Self {
            convs,
            heatmap: init.conv("lm/heatmap", cin, cfg.landmark_count, 1, 1, true)?,
            image_size: cfg.image_size,
        })
    }

    /// One heatmap per landmark, `(N, K, S/4, S/4)`.
    pub fn heatmaps(&self, img: &Tensor) -> Result<Tensor> {
        check_image(img, self.image_size)?;
        let mut x = img.clone();
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, 0.2)?;
        }
        self.heatmap.forward(&x)
    }
}

/// Spatial soft-argmax with unit temperature: the expected pixel-centre coordinate under the
/// softmax of each heatmap. Returns `(N, K, 2)` as `(x, y)` in `(0, 1)`.
pub fn soft_argmax(heatmaps: &Tensor) -> Result<Tensor> {
    let (n, k, h, w) = heatmaps.dims4()?;
    let probs = softmax_last(&heatmaps.reshape((n, k, h * w))?)?.reshape((n, k, h, w))?;
    let dtype = heatmaps.dtype();
    let dev = heatmaps.device();
    let xs: Vec<f64> = (0..w).map(|c| (c as f64 + 0.5) / w as f64).collect();
    let ys: Vec<f64> = (0..h).map(|r| (r as f64 + 0.5) / h as f64).collect();
    let xs = Tensor::from_vec(xs, (1, 1, 1, w), dev)?.to_dtype(dtype)?;
    let ys = Tensor::from_vec(ys, (1, 1, h, 1), dev)?.to_dtype(dtype)?;
    let px = probs.broadcast_mul(&xs)?.sum((2, 3))?;
    let py = probs.broadcast_mul(&ys)?.sum((2, 3))?;
    Ok(Tensor::stack(&[px, py], 2)?)
}

pub fn extract_landmarks(img: &Tensor, ex: &LandmarkExtractor) -> Result<LandmarkSet> {
    Ok(LandmarkSet(soft_argmax(&ex.heatmaps(img)?)?))
}
