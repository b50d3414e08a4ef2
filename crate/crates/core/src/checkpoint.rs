//! Portable tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SBLD" | u32 format_version | u64 manifest_len | manifest JSON (UTF-8)
//! repeated manifest.tensor_count times, sorted by name:
//!   u32 name_len | name (UTF-8) | u8 dtype (0 = f32, 1 = f64) | u8 rank | rank x u64 dims | data
//! ```
//!
//! Tensor data is raw row-major little-endian. Writing the same content twice yields the
//! same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::trainer::Phase;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SBLD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub phase: Phase,
    /// Filled in by the writer.
    #[serde(default)]
    pub tensor_count: usize,
    /// Adam step counters per parameter group, present when optimizer state is archived.
    #[serde(default)]
    pub adam_steps: BTreeMap<String, u64>,
}

impl Manifest {
    pub fn new(config: ModelConfig, step: u64, phase: Phase) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config,
            step,
            phase,
            tensor_count: 0,
            adam_steps: BTreeMap::new(),
        }
    }
}

/// Serializes `tensors` into archive bytes. Fails on duplicate names.
pub fn encode<'a, S, I>(manifest: &Manifest, tensors: I) -> Result<Vec<u8>>
where
    S: AsRef<str>,
    I: IntoIterator<Item = (S, &'a Tensor)>,
{
    let mut sorted: BTreeMap<String, &Tensor> = BTreeMap::new();
    for (name, t) in tensors {
        let name = name.as_ref().to_string();
        if sorted.insert(name.clone(), t).is_some() {
            return Err(Error::DuplicateTensor(name));
        }
    }
    let mut manifest = manifest.clone();
    manifest.tensor_count = sorted.len();
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&manifest.format_version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in sorted {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        let tag = match t.dtype() {
            DType::F32 => 0u8,
            DType::F64 => 1u8,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "tensor {name:?} has unsupported dtype {other:?}"
                )))
            }
        };
        out.push(tag);
        let dims = t.dims();
        out.push(u8::try_from(dims.len()).map_err(|_| Error::shape("rank above 255"))?);
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let flat = t.flatten_all()?;
        match tag {
            0 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            _ => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Corrupt(format!("{what} overflows")))
    }
}

/// Parses archive bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(Manifest, BTreeMap<String, Tensor>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Corrupt("bad magic bytes".into()));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let manifest_len = r.len("manifest length")?;
    let manifest: Manifest = serde_json::from_slice(r.take(manifest_len, "manifest")?)
        .map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(Error::Corrupt(format!(
            "manifest version {} disagrees with header {version}",
            manifest.format_version
        )));
    }
    let mut tensors = BTreeMap::new();
    for _ in 0..manifest.tensor_count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let tag = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.len("dimension"))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corrupt(format!("tensor {name:?} is too large")))?;
        let tensor = match tag {
            0 => {
                let raw = r.take(count.saturating_mul(4), "tensor data")?;
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            1 => {
                let raw = r.take(count.saturating_mul(8), "tensor data")?;
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            t => return Err(Error::Corrupt(format!("unknown dtype tag {t}"))),
        };
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::Corrupt(format!("tensor {name:?} appears twice")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((manifest, tensors))
}

pub fn save_checkpoint<'a, S, I>(path: impl AsRef<Path>, tensors: I, manifest: &Manifest) -> Result<()>
where
    S: AsRef<str>,
    I: IntoIterator<Item = (S, &'a Tensor)>,
{
    let bytes = encode(manifest, tensors)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Manifest, BTreeMap<String, Tensor>)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::to_f64_vec;

    fn manifest() -> Manifest {
        Manifest::new(ModelConfig::desk(), 3, Phase::One)
    }

    #[test]
    fn empty_archive() {
        let bytes = encode(&manifest(), std::iter::empty::<(&str, &Tensor)>()).unwrap();
        let (m, t) = decode(&bytes).unwrap();
        assert_eq!(m.tensor_count, 0);
        assert_eq!(m.step, 3);
        assert!(t.is_empty());
    }

    #[test]
    fn single_tensor_round_trip() {
        let w = Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap();
        let bytes = encode(&manifest(), [("w", &w)]).unwrap();
        let (_, t) = decode(&bytes).unwrap();
        let back = &t["w"];
        assert_eq!(back.dims(), &[2, 2]);
        assert_eq!(back.dtype(), DType::F32);
        assert_eq!(to_f64_vec(back).unwrap(), to_f64_vec(&w).unwrap());
    }

    #[test]
    fn duplicate_names_fail() {
        let w = Tensor::new(&[1f32], &Device::Cpu).unwrap();
        assert!(matches!(
            encode(&manifest(), [("w", &w), ("w", &w)]),
            Err(Error::DuplicateTensor(_))
        ));
    }

    #[test]
    fn wrong_magic_is_corrupt() {
        let mut bytes = encode(&manifest(), std::iter::empty::<(&str, &Tensor)>()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn future_version_is_unsupported() {
        let mut bytes = encode(&manifest(), std::iter::empty::<(&str, &Tensor)>()).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn truncation_is_corrupt() {
        let w = Tensor::new(&[1f64, 2.0, 3.0], &Device::Cpu).unwrap();
        let bytes = encode(&manifest(), [("w", &w)]).unwrap();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Corrupt(_))));
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&manifest(), std::iter::empty::<(&str, &Tensor)>()).unwrap();
        assert_eq!(&bytes[..4], b"SBLD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(json["format_version"], 1);
        assert_eq!(json["config"]["style_count"], 12);
    }
}
