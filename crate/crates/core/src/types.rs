//! Domain value types. Network-facing types carry a leading batch dimension.

use candle_core::{DType, Device, Tensor};

use crate::config::ModelConfig;
use crate::ops::to_f64_vec;
use crate::{Error, Result};

/// A single RGB image, `(3, S, S)` with values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Image(Tensor);

impl Image {
    pub const CHANNELS: usize = 3;

    /// Validates shape, finiteness and range.
    pub fn new(data: Tensor) -> Result<Self> {
        let (c, h, w) = data.dims3()?;
        if c != Self::CHANNELS || h != w {
            return Err(Error::shape(format!("image must be 3xSxS, got {:?}", data.dims())));
        }
        let values = to_f64_vec(&data)?;
        if let Some(v) = values.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "image value {v} outside [-1, 1]"
            )));
        }
        Ok(Self(data))
    }

    /// Builds an image from interleaved 8-bit RGB rows.
    pub fn from_rgb8(side: usize, rgb: &[u8], dtype: DType) -> Result<Self> {
        if rgb.len() != side * side * 3 {
            return Err(Error::shape(format!(
                "expected {} bytes for a {side}x{side} RGB image, got {}",
                side * side * 3,
                rgb.len()
            )));
        }
        let planar: Vec<f32> = (0..3)
            .flat_map(|c| rgb.iter().skip(c).step_by(3).map(|&v| v as f32 / 127.5 - 1.0))
            .collect();
        let t = Tensor::from_vec(planar, (3, side, side), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self(t))
    }

    /// Interleaved 8-bit RGB, mapping `[-1, 1]` affinely onto `[0, 255]`.
    pub fn to_rgb8(&self) -> Result<Vec<u8>> {
        let (_, h, w) = self.0.dims3()?;
        let planar = to_f64_vec(&self.0)?;
        let plane = h * w;
        let mut out = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            for c in 0..3 {
                let v = ((planar[c * plane + p] + 1.0) * 127.5).round().clamp(0.0, 255.0);
                out.push(v as u8);
            }
        }
        Ok(out)
    }

    pub fn side(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Stacks images into an `(N, 3, S, S)` batch.
    pub fn batch(images: &[Image]) -> Result<Tensor> {
        let ts: Vec<&Tensor> = images.iter().map(|i| &i.0).collect();
        Ok(Tensor::stack(&ts, 0)?)
    }

    /// Splits an `(N, 3, S, S)` batch back into images, clamping into range.
    pub fn unbatch(batch: &Tensor) -> Result<Vec<Image>> {
        let n = batch.dims4()?.0;
        (0..n)
            .map(|i| Ok(Image(batch.get(i)?.clamp(-1.0, 1.0)?.detach())))
            .collect()
    }
}

/// Style codes `(N, L, D)`; row `i` of each sample is style element `w_i`.
#[derive(Debug, Clone)]
pub struct StyleCode(pub Tensor);

impl StyleCode {
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let (_, l, d) = self.0.dims3()?;
        if (l, d) != (cfg.style_count, cfg.style_dim) {
            return Err(Error::shape(format!(
                "style code is {l}x{d}, config expects {}x{}",
                cfg.style_count, cfg.style_dim
            )));
        }
        Ok(())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Encoder feature maps, coarsest level first; each level is `(N, C, s, s)` and sides double
/// from one level to the next.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.levels.len() != cfg.pyramid_levels {
            return Err(Error::shape(format!(
                "pyramid has {} levels, config expects {}",
                self.levels.len(),
                cfg.pyramid_levels
            )));
        }
        for (p, level) in self.levels.iter().enumerate() {
            let (_, _, h, w) = level.dims4()?;
            let side = cfg.pyramid_side(p);
            if (h, w) != (side, side) {
                return Err(Error::shape(format!("pyramid level {p} is {h}x{w}, expected {side}x{side}")));
            }
        }
        Ok(())
    }

    /// Level whose spatial side equals `side`, if any.
    pub fn at_side(&self, side: usize) -> Option<(usize, &Tensor)> {
        self.levels
            .iter()
            .enumerate()
            .find(|(_, t)| t.dims().get(2) == Some(&side))
    }
}

/// Unit-norm identity embeddings `(N, E)`.
#[derive(Debug, Clone)]
pub struct IdEmbedding(pub Tensor);

impl IdEmbedding {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Landmarks `(N, K, 2)` as `(x, y)` in normalized `[0, 1]` image coordinates.
#[derive(Debug, Clone)]
pub struct LandmarkSet(pub Tensor);

impl LandmarkSet {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip() {
        let rgb: Vec<u8> = (0..4 * 4 * 3).map(|i| (i * 5) as u8).collect();
        let img = Image::from_rgb8(4, &rgb, DType::F32).unwrap();
        assert_eq!(img.to_rgb8().unwrap(), rgb);
    }

    #[test]
    fn rejects_out_of_range_and_nonsquare() {
        let dev = Device::Cpu;
        let t = (Tensor::ones((3, 4, 4), DType::F32, &dev).unwrap() * 1.5).unwrap();
        assert!(Image::new(t).is_err());
        let t = Tensor::zeros((3, 4, 5), DType::F32, &dev).unwrap();
        assert!(Image::new(t).is_err());
        let t = Tensor::zeros((1, 4, 4), DType::F32, &dev).unwrap();
        assert!(Image::new(t).is_err());
    }
}
