use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::Serialize;

use super::config::ExperimentConfig;
use crate::backbone::{Encoder, FeaturePyramid, SegHead};
use crate::decoder::EfafDecoder;
use crate::error::{Error, Result};
use crate::maps::{DepthMap, RgbImage};
use crate::params::ParamStore;
use crate::posenet::PoseNet;

/// Depth network (encoder + decoder) and PoseNet sharing one parameter
/// store, with parameters under `encoder.`, `decoder.`, `posenet.` and, for
/// the joint-segmentation ablation, `seg_head.`.
pub struct DepthModel {
    store: ParamStore,
    pub encoder: Encoder,
    pub decoder: EfafDecoder,
    pub posenet: PoseNet,
    pub seg_head: Option<SegHead>,
}

/// Parameter counts per module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamTable {
    pub backbone: usize,
    pub decoder: usize,
    pub posenet: usize,
    pub seg_head: usize,
    pub total: usize,
}

impl ParamTable {
    pub fn rows(&self) -> Vec<(&'static str, usize)> {
        let mut rows = vec![("backbone", self.backbone), ("decoder", self.decoder), ("posenet", self.posenet)];
        if self.seg_head > 0 {
            rows.push(("seg_head", self.seg_head));
        }
        rows.push(("total", self.total));
        rows
    }
}

impl DepthModel {
    pub fn new(cfg: &ExperimentConfig, dtype: DType) -> Result<Self> {
        Self::build(cfg, ParamStore::new(dtype), None)
    }

    /// Build with the given weights (names as in [`DepthModel::weights`]).
    pub fn with_weights(cfg: &ExperimentConfig, weights: &BTreeMap<String, Tensor>, dtype: DType) -> Result<Self> {
        Self::build(cfg, ParamStore::new(dtype), Some(weights))
    }

    fn build(cfg: &ExperimentConfig, store: ParamStore, weights: Option<&BTreeMap<String, Tensor>>) -> Result<Self> {
        if let Some(w) = weights {
            store.load(w, "")?;
        }
        let root = store.root();
        let encoder = Encoder::new(&root.pp("encoder"), &cfg.encoder)?;
        let decoder = EfafDecoder::new(&root.pp("decoder"), &cfg.effective_decoder(), &cfg.encoder)?;
        let posenet = PoseNet::new(&root.pp("posenet"), &cfg.posenet)?;
        let seg_head = if cfg.ablation.joint_semantic_decoder {
            Some(SegHead::new(&root.pp("seg_head"), &cfg.encoder, cfg.teacher.num_classes)?)
        } else {
            None
        };
        if let Some(w) = weights {
            let names = store.names();
            if let Some(missing) = names.iter().find(|n| !w.contains_key(*n)) {
                return Err(Error::Checkpoint(format!("checkpoint lacks parameter {missing}")));
            }
            if let Some(extra) = w.keys().find(|k| !names.contains(k)) {
                return Err(Error::Checkpoint(format!("checkpoint has unknown parameter {extra}")));
            }
        }
        Ok(Self { store, encoder, decoder, posenet, seg_head })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn weights(&self) -> BTreeMap<String, Tensor> {
        self.store.tensors()
    }

    /// Depth `(B, 1, H, W)` and the encoder pyramid of a batch of images.
    pub fn depth(&self, images: &Tensor) -> Result<(Tensor, FeaturePyramid)> {
        let pyr = self.encoder.encode(images)?;
        let out = self.decoder.decode(&pyr)?;
        Ok((out.depth, pyr))
    }

    pub fn pose(&self, target: &Tensor, source: &Tensor) -> Result<Tensor> {
        self.posenet.forward(target, source)
    }

    /// Host-side depth prediction for one image.
    pub fn predict(&self, image: &RgbImage) -> Result<DepthMap> {
        self.encoder.config().check_input_size(image.height, image.width)?;
        let x = image.to_tensor(self.store.dtype())?;
        let (d, _) = self.depth(&x)?;
        DepthMap::from_tensor(&d.detach())
    }

    pub fn param_table(&self) -> ParamTable {
        let s = &self.store;
        ParamTable {
            backbone: s.num_elements_with_prefix("encoder"),
            decoder: s.num_elements_with_prefix("decoder"),
            posenet: s.num_elements_with_prefix("posenet"),
            seg_head: s.num_elements_with_prefix("seg_head"),
            total: s.num_elements(),
        }
    }
}
