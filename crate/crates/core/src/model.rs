//! The full generator with its critic and frozen perception networks.

use candle_core::{DType, Tensor};

use crate::config::ModelConfig;
use crate::critic::Critic;
use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::extractors::{IdExtractor, LandmarkExtractor};
use crate::params::{ParamGroup, ParamInit, ParamStore};
use crate::rng::Stream;
use crate::sbm::{BlendWeights, Sbm};
use crate::Result;

#[derive(Debug, Clone)]
pub struct FaceSwapModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub sbm: Sbm,
    pub decoder: Decoder,
    pub critic: Critic,
    pub id: IdExtractor,
    pub lm: LandmarkExtractor,
}

/// One generator pass.
#[derive(Debug, Clone)]
pub struct Generated {
    pub image: Tensor,
    pub weights: BlendWeights,
}

impl FaceSwapModel {
    /// Builds every network with weights drawn from `cfg.seed`.
    pub fn new(cfg: &ModelConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let seed = cfg.seed;
        let encoder = Encoder::new(&mut ParamInit::new(&mut store, ParamGroup::Encoder.prefix(), seed), cfg)?;
        let sbm = Sbm::new(&mut ParamInit::new(&mut store, ParamGroup::Sbm.prefix(), seed), cfg)?;
        let decoder = Decoder::new(&mut ParamInit::new(&mut store, ParamGroup::Decoder.prefix(), seed), cfg)?;
        let critic = Critic::new(&mut ParamInit::new(&mut store, ParamGroup::Critic.prefix(), seed), cfg)?;
        let mut frozen = ParamInit::frozen(&mut store, ParamGroup::Frozen.prefix(), seed);
        let id = IdExtractor::new(&mut frozen, cfg)?;
        let lm = LandmarkExtractor::new(&mut frozen, cfg)?;
        Ok(Self {
            cfg: *cfg,
            store,
            encoder,
            sbm,
            decoder,
            critic,
            id,
            lm,
        })
    }

    /// `G(source, target)`: encode both, blend the codes and decode with the target pyramid.
    pub fn generate(&self, source: &Tensor, target: &Tensor, noise: &mut Stream) -> Result<Generated> {
        let (w_s, _) = self.encoder.encode(source)?;
        let (w_t, pyramid) = self.encoder.encode(target)?;
        let (code, weights) = self.sbm.blend(&w_s, &w_t)?;
        let image = self.decoder.decode(&code, &pyramid, noise)?;
        Ok(Generated { image, weights })
    }

    pub fn swap(&self, source: &Tensor, target: &Tensor, noise: &mut Stream) -> Result<Tensor> {
        Ok(self.generate(source, target, noise)?.image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use candle_core::Device;

    #[test]
    fn parameters_are_grouped_and_deterministic() {
        let cfg = ModelConfig::toy();
        let a = FaceSwapModel::new(&cfg, DType::F32).unwrap();
        let b = FaceSwapModel::new(&cfg, DType::F32).unwrap();
        for group in ParamGroup::ALL {
            assert!(a.store.group(group).count() > 0, "{group:?}");
        }
        assert!(a.store.iter().all(|(n, _)| ParamGroup::of(n).is_some()));
        let (sa, sb) = (a.store.snapshot().unwrap(), b.store.snapshot().unwrap());
        for (name, t) in &sa {
            let d = (t - &sb[name]).unwrap().abs().unwrap().max_all().unwrap();
            assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0, "{name}");
        }
    }

    #[test]
    fn swap_shape_and_range() {
        let cfg = ModelConfig::toy();
        let m = FaceSwapModel::new(&cfg, DType::F32).unwrap();
        let x = Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let out = m.swap(&x, &x, &mut seeded_rng(0, "noise")).unwrap();
        assert_eq!(out.dims(), &[2, 3, 16, 16]);
        let max = out.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(max <= 1.0);
    }
}
