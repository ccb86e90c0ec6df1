//! Single-file checkpoint container.
//!
//! ```text
//! magic    8 bytes   "DVGCKPT\0"
//! length   u64 LE    byte length of the manifest
//! manifest JSON      format version, stage, step, RNG state, config,
//!                    extra metadata and the tensor table
//! data     f32 LE    tensors in table order, contiguous
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DVGCKPT\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, as a decimal string (exceeds JSON integers).
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    stage: u8,
    step: u64,
    rng: RngState,
    config: TrainConfig,
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub step: u64,
    pub rng: RngState,
    pub config: TrainConfig,
    /// Stage-specific metadata (e.g. feature normalisation).
    pub extra: serde_json::Value,
    pub tensors: TensorMap,
}

impl Checkpoint {
    /// Captures the parameters of `store` whose names start with any of
    /// `prefixes`.
    pub fn from_store(store: &ParamStore, prefixes: &[&str], stage: u8, step: u64, rng: RngState, config: &TrainConfig, extra: serde_json::Value) -> Result<Self> {
        let tensors = store
            .snapshot()?
            .into_iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .collect();
        Ok(Self {
            stage,
            step,
            rng,
            config: config.clone(),
            extra,
            tensors,
        })
    }

    /// Fails with an incompatibility error unless this is a stage-`stage`
    /// checkpoint.
    pub fn expect_stage(&self, stage: u8) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Incompatible(format!(
                "expected a stage-{stage} checkpoint, found stage {}",
                self.stage
            )));
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> TensorMap {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, (shape, data)) in &self.tensors {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Checkpoint(format!("tensor `{name}` shape/data mismatch")));
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len: data.len(),
            });
            offset += data.len();
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            stage: self.stage,
            step: self.step,
            rng: self.rng,
            config: self.config.clone(),
            extra: self.extra.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in self.tensors.values() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if len > body.len() {
            return Err(Error::Checkpoint("truncated manifest".into()));
        }
        let head: serde_json::Value = serde_json::from_slice(&body[..len])
            .map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
        let version = head.get("format_version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version:?}")));
        }
        let manifest: Manifest = serde_json::from_value(head).map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
        let data = &body[len..];
        let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
        if data.len() != 4 * total {
            return Err(Error::Checkpoint(format!(
                "expected {} data bytes, found {}",
                4 * total,
                data.len()
            )));
        }
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0usize;
        for t in &manifest.tensors {
            if t.offset != expected_offset || t.shape.iter().product::<usize>() != t.len {
                return Err(Error::Checkpoint(format!("inconsistent table entry `{}`", t.name)));
            }
            let raw = &data[4 * t.offset..4 * (t.offset + t.len)];
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.insert(t.name.clone(), (t.shape.clone(), values)).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{}`", t.name)));
            }
            expected_offset += t.len;
        }
        Ok(Self {
            stage: manifest.stage,
            step: manifest.step,
            rng: manifest.rng,
            config: manifest.config,
            extra: manifest.extra,
            tensors,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("b.w".to_string(), (vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]));
        tensors.insert("a.bias".to_string(), (vec![3], vec![0.0, 1e-7, f32::MAX]));
        Checkpoint {
            stage: 1,
            step: 12,
            rng: RngState { seed: 3, word_pos: 1 << 70 },
            config: TrainConfig::default(),
            extra: serde_json::json!({"note": "x"}),
            tensors,
        }
    }

    #[test]
    fn bytes_roundtrip_is_identical() {
        let c = sample();
        let a = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn truncation_detected() {
        let a = sample().to_bytes().unwrap();
        for cut in [4, 20, a.len() - 1] {
            assert!(Checkpoint::from_bytes(&a[..cut]).is_err());
        }
    }

    #[test]
    fn unknown_version_rejected() {
        let mut a = sample().to_bytes().unwrap();
        let pat = b"\"format_version\":1";
        let at = a.windows(pat.len()).position(|w| w == pat).unwrap();
        a[at + pat.len() - 1] = b'9';
        let err = Checkpoint::from_bytes(&a).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn stage_mismatch_is_incompatible() {
        assert!(matches!(sample().expect_stage(2), Err(Error::Incompatible(_))));
    }
}
