//! Single-file checkpoints in safetensors format.
//!
//! Tensors are stored under `weights.<name>`, `adam_m.<name>` and
//! `adam_v.<name>`; everything else lives in one JSON metadata entry, so the
//! file bytes are a deterministic function of the checkpoint contents.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::optim::Adam;
use crate::data::write_atomic;
use crate::error::{Error, Result};

const META_KEY: &str = "checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Depth,
    Teacher,
}

/// Position in the data stream. Batch order is a pure function of the
/// experiment seed and the epoch, so these counters are the whole RNG state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
    /// Batches already consumed in `epoch`.
    pub cursor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub stage: u8,
    pub step: usize,
    pub config: ExperimentConfig,
    pub rng: RngState,
    pub adam_step: u64,
    #[serde(default)]
    pub best_val_abs_rel: Option<f64>,
    /// Digest of the teacher weights used in stage 2.
    #[serde(default)]
    pub teacher_digest: Option<String>,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub pixel_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub weights: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

fn deep_copy(map: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
    map.iter().map(|(k, v)| Ok((k.clone(), v.copy()?.detach()))).collect()
}

impl Checkpoint {
    /// Snapshot of weights and optimizer moments (deep copies).
    pub fn snapshot(meta: CheckpointMeta, weights: &BTreeMap<String, Tensor>, adam: Option<&Adam>) -> Result<Self> {
        let (m, v) = match adam {
            Some(a) => (deep_copy(&a.m)?, deep_copy(&a.v)?),
            None => (BTreeMap::new(), BTreeMap::new()),
        };
        Ok(Self { meta, weights: deep_copy(weights)?, adam_m: m, adam_v: v })
    }

    /// Restore an optimizer with this checkpoint's moments and step count.
    pub fn optimizer(&self, lr: f64) -> Adam {
        let mut a = Adam::new(lr);
        a.step = self.meta.adam_step;
        a.m = self.adam_m.clone();
        a.v = self.adam_v.clone();
        a
    }

    fn tensors(&self) -> BTreeMap<String, &Tensor> {
        let mut out = BTreeMap::new();
        for (prefix, map) in [("weights", &self.weights), ("adam_m", &self.adam_m), ("adam_v", &self.adam_v)] {
            for (k, t) in map {
                out.insert(format!("{prefix}.{k}"), t);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.meta)?)]);
        Ok(safetensors::serialize(self.tensors(), Some(meta))?)
    }

    /// Serialized weights alone, without optimizer state or metadata.
    pub fn weight_payload(&self) -> Result<Vec<u8>> {
        Ok(safetensors::serialize(self.weights.iter(), None)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = safetensors::SafeTensors::read_metadata(bytes)?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing checkpoint metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", meta.format_version)));
        }
        let mut ck = Checkpoint { meta, weights: BTreeMap::new(), adam_m: BTreeMap::new(), adam_v: BTreeMap::new() };
        for (name, t) in candle_core::safetensors::load_buffer(bytes, &Device::Cpu)? {
            let (prefix, key) = name
                .split_once('.')
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            let map = match prefix {
                "weights" => &mut ck.weights,
                "adam_m" => &mut ck.adam_m,
                "adam_v" => &mut ck.adam_v,
                _ => return Err(Error::Checkpoint(format!("unexpected tensor {name}"))),
            };
            map.insert(key.to_string(), t);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
