//! The frozen semantic teacher: an encoder trained on segmentation whose
//! weights are constants during distillation.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, RngState, FORMAT_VERSION};
use super::config::ExperimentConfig;
use super::model::DepthModel;
use super::optim::Adam;
use crate::backbone::{Encoder, EncoderConfig, FeaturePyramid, SegHead};
use crate::data::SampleTriplet;
use crate::error::{Error, Result};
use crate::maps::batch;
use crate::nn;
use crate::params::ParamStore;

pub struct Teacher {
    store: ParamStore,
    encoder: Encoder,
    pub num_classes: Option<usize>,
    pub pixel_accuracy: Option<f64>,
}

/// Where the teacher comes from.
pub enum TeacherSource<'a> {
    Checkpoint(&'a Path),
    /// Train on frames carrying object-id masks.
    Segmentation(&'a [SampleTriplet]),
}

impl Teacher {
    /// Freeze encoder weights (names relative to the encoder).
    pub fn from_weights(cfg: &EncoderConfig, weights: &std::collections::BTreeMap<String, Tensor>) -> Result<Self> {
        let store = ParamStore::new_frozen(DType::F32);
        store.load(weights, "encoder")?;
        let n_loaded = store.len();
        let encoder = Encoder::new(&store.root().pp("encoder"), &EncoderConfig { pretrained_init: None, ..cfg.clone() })?;
        if store.len() != n_loaded {
            return Err(Error::Checkpoint(format!(
                "teacher weights cover {n_loaded} of {} encoder parameters",
                store.len()
            )));
        }
        Ok(Self { store, encoder, num_classes: None, pixel_accuracy: None })
    }

    /// Frozen copy of a model's current encoder.
    pub fn from_student(model: &DepthModel) -> Result<Self> {
        let w = model.store().tensors_with_prefix("encoder");
        Self::from_weights(model.encoder.config(), &w)
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let x = images.to_dtype(self.store.dtype())?;
        Ok(self.encoder.encode(&x)?.detach())
    }

    /// True when no teacher weight can receive a gradient.
    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen() && self.store.num_trainable() == 0
    }

    pub fn digest(&self) -> Result<String> {
        self.store.digest()
    }

    pub fn to_checkpoint(&self, cfg: &ExperimentConfig) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Teacher,
            stage: 0,
            step: 0,
            config: cfg.clone(),
            rng: RngState::default(),
            adam_step: 0,
            best_val_abs_rel: None,
            teacher_digest: Some(self.digest()?),
            num_classes: self.num_classes,
            pixel_accuracy: self.pixel_accuracy,
        };
        Checkpoint::snapshot(meta, &self.store.tensors(), None)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.kind != CheckpointKind::Teacher {
            return Err(Error::Checkpoint("not a teacher checkpoint".into()));
        }
        let w = strip_prefix(&ck.weights, "encoder.");
        let mut t = Self::from_weights(&ck.meta.config.encoder, &w)?;
        if let Some(d) = &ck.meta.teacher_digest {
            if *d != t.digest()? {
                return Err(Error::Checkpoint("teacher weights do not match their digest".into()));
            }
        }
        t.num_classes = ck.meta.num_classes;
        t.pixel_accuracy = ck.meta.pixel_accuracy;
        Ok(t)
    }

    pub fn save(&self, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
        self.to_checkpoint(cfg)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn strip_prefix(
    map: &std::collections::BTreeMap<String, Tensor>,
    prefix: &str,
) -> std::collections::BTreeMap<String, Tensor> {
    map.iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

/// Labelled frames as `(images (N,3,H,W), labels (N,H,W) u32)`.
fn segmentation_set(frames: &[SampleTriplet], num_classes: usize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut imgs = Vec::new();
    let mut labels = Vec::new();
    for f in frames {
        let seg = f.seg.as_ref().ok_or_else(|| Error::Data {
            entry: f.name.clone(),
            msg: "segmentation training needs object-id masks".into(),
        })?;
        if let Some(l) = seg.labels.iter().find(|l| **l as usize >= num_classes) {
            return Err(Error::Config(format!(
                "label {l} in {} exceeds teacher.num_classes = {num_classes}",
                f.name
            )));
        }
        imgs.push(f.target.to_tensor(DType::F32)?);
        labels.push(seg.to_tensor()?);
    }
    if imgs.is_empty() {
        return Err(Error::Config("no frames for teacher training".into()));
    }
    Ok((imgs, labels))
}

/// Fraction of pixels whose predicted class matches the label.
pub fn pixel_accuracy(encoder: &Encoder, head: &SegHead, images: &[Tensor], labels: &[Tensor]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (x, y) in images.iter().zip(labels) {
        let pred = SegHead::predict(&head.forward(&encoder.encode(x)?)?)?;
        let p = pred.flatten_all()?.to_vec1::<u32>()?;
        let l = y.flatten_all()?.to_vec1::<u32>()?;
        hit += p.iter().zip(&l).filter(|(a, b)| a == b).count();
        total += l.len();
    }
    Ok(hit as f64 / total as f64)
}

/// Obtain a frozen teacher: load it, or train an encoder plus a lightweight
/// segmentation head (the head is discarded afterwards). The encoder starts
/// from the same initialization as the student encoder.
pub fn prepare_teacher(cfg: &ExperimentConfig, source: TeacherSource) -> Result<Teacher> {
    let frames = match source {
        TeacherSource::Checkpoint(p) => return Teacher::load(p),
        TeacherSource::Segmentation(frames) => frames,
    };
    let tc = &cfg.teacher;
    let frames: Vec<SampleTriplet> = match cfg.image_size {
        Some([w, h]) => frames.iter().map(|f| f.resized(w, h)).collect(),
        None => frames.to_vec(),
    };
    let (imgs, labels) = segmentation_set(&frames, tc.num_classes)?;
    let store = ParamStore::new(DType::F32);
    let encoder = Encoder::new(&store.root().pp("encoder"), &cfg.encoder)?;
    let head = SegHead::new(&store.root().pp("seg_head").with_seed(cfg.seed ^ 0x5e9), &cfg.encoder, tc.num_classes)?;
    let vars = store.vars();
    let mut opt = Adam::new(tc.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7eac_4e5);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..tc.steps {
        let mut pick = Vec::with_capacity(tc.batch_size);
        while pick.len() < tc.batch_size.min(imgs.len()) {
            if order.is_empty() {
                order = (0..imgs.len()).collect();
                order.shuffle(&mut rng);
            }
            pick.push(order.pop().expect("refilled"));
        }
        let x = batch(&pick.iter().map(|i| imgs[*i].clone()).collect::<Vec<_>>())?;
        let y = Tensor::cat(&pick.iter().map(|i| labels[*i].clone()).collect::<Vec<_>>(), 0)?;
        let loss = SegHead::cross_entropy(&head.forward(&encoder.encode(&x)?)?, &y)?;
        let value = nn::scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { step, terms: format!("segmentation={value}") });
        }
        opt.apply(&vars, &loss.backward()?)?;
        if step % 50 == 0 {
            log::debug!("teacher step {step}: cross-entropy {value:.4}");
        }
    }
    let acc = pixel_accuracy(&encoder, &head, &imgs, &labels)?;
    log::info!("teacher pixel accuracy {:.2}%", acc * 100.0);
    if acc < tc.min_pixel_accuracy {
        log::warn!(
            "teacher pixel accuracy {acc:.3} is below the target {:.3}",
            tc.min_pixel_accuracy
        );
    }
    let w = store.tensors_with_prefix("encoder");
    let mut t = Teacher::from_weights(&cfg.encoder, &w)?;
    t.num_classes = Some(tc.num_classes);
    t.pixel_accuracy = Some(acc);
    Ok(t)
}
