//! Named parameter storage and the small layer types every network is built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::ops;
use crate::rng::{normal_tensor, seeded_rng, Stream};
use crate::{Error, Result};

/// Parameter groups used by the freeze schedule. Group membership is the first path segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Sbm,
    Decoder,
    Critic,
    Frozen,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Encoder,
        ParamGroup::Sbm,
        ParamGroup::Decoder,
        ParamGroup::Critic,
        ParamGroup::Frozen,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Sbm => "sbm",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Critic => "critic",
            ParamGroup::Frozen => "frozen",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        let head = name.split('/').next()?;
        Self::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

/// Every trainable and frozen tensor of a model, keyed by its checkpoint name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn insert(&mut self, name: String, var: Var) -> Result<()> {
        if self.vars.contains_key(&name) {
            return Err(Error::DuplicateTensor(name));
        }
        self.vars.insert(name, var);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = (&String, &Var)> {
        self.vars
            .iter()
            .filter(move |(name, _)| ParamGroup::of(name) == Some(group))
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every tensor, suitable for checkpointing or comparisons.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites every parameter from `values`. All names must be present with matching
    /// shapes; extra entries are ignored so archives may carry optimizer state.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = values
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if src.dims() != var.dims() {
                return Err(Error::shape(format!(
                    "parameter {name}: stored {:?}, model {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Creates parameters under one name prefix, drawing initial values from a labelled stream.
pub struct ParamInit<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    rng: Stream,
    frozen: bool,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, prefix: &str, seed: u64) -> Self {
        Self {
            store,
            prefix: prefix.to_string(),
            rng: seeded_rng(seed, &format!("init/{prefix}")),
            frozen: false,
        }
    }

    /// Like [`ParamInit::new`], but the returned tensors never record gradients. They still
    /// share storage with the stored variables, so loading a checkpoint updates them.
    pub fn frozen(store: &'a mut ParamStore, prefix: &str, seed: u64) -> Self {
        Self {
            frozen: true,
            ..Self::new(store, prefix, seed)
        }
    }

    fn register(&mut self, name: &str, value: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&value.to_dtype(self.store.dtype)?)?;
        let tensor = if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        };
        self.store.insert(format!("{}/{}", self.prefix, name), var)?;
        Ok(tensor)
    }

    pub fn normal(&mut self, name: &str, shape: impl Into<Shape>, std: f64) -> Result<Tensor> {
        let dtype = self.store.dtype;
        let device = self.store.device.clone();
        let value = normal_tensor(&mut self.rng, shape, std, dtype, &device)?;
        self.register(name, value)
    }

    pub fn constant(&mut self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, self.store.dtype, &self.store.device)? * value)?;
        self.register(name, t)
    }

    pub fn values(&mut self, name: &str, shape: impl Into<Shape>, values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.store.device)?;
        self.register(name, t)
    }

    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Conv> {
        let fan_in = (cin * kernel * kernel) as f64;
        let weight = self.normal(
            &format!("{name}/weight"),
            (cout, cin, kernel, kernel),
            (2.0 / fan_in).sqrt(),
        )?;
        let bias = if bias {
            Some(self.constant(&format!("{name}/bias"), cout, 0.0)?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize, bias: bool) -> Result<Linear> {
        let weight = self.normal(&format!("{name}/weight"), (dout, din), (1.0 / din as f64).sqrt())?;
        let bias = if bias {
            Some(self.constant(&format!("{name}/bias"), dout, 0.0)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.weight, self.bias.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_follow_prefix() {
        assert_eq!(ParamGroup::of("encoder/stem/weight"), Some(ParamGroup::Encoder));
        assert_eq!(ParamGroup::of("frozen/id/fc/weight"), Some(ParamGroup::Frozen));
        assert_eq!(ParamGroup::of("optim/m/x"), None);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new(DType::F32);
        let mut init = ParamInit::new(&mut store, "critic", 0);
        init.constant("a", 2, 1.0).unwrap();
        assert!(matches!(init.constant("a", 2, 1.0), Err(Error::DuplicateTensor(_))));
    }

    #[test]
    fn load_overwrites_shared_tensors() {
        let mut store = ParamStore::new(DType::F64);
        let t = ParamInit::new(&mut store, "sbm", 0).constant("w", (2, 2), 1.0).unwrap();
        let mut values = store.snapshot().unwrap();
        values.insert("sbm/w".into(), Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap());
        store.load(&values).unwrap();
        assert_eq!(ops::mean_scalar(&t).unwrap(), 0.0);
    }
}
