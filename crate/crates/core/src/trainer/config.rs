//! Experiment configuration: one JSON document with every knob, plus dotted
//! `key=value` overrides that must name an existing key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::EncoderConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::losses::{LossOptions, LossWeights};
use crate::metrics::MetricOptions;
use crate::posenet::PoseNetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub disable_high_level_sce: bool,
    pub disable_low_level_sce: bool,
    /// Train a single stage with the semantic term from the start.
    pub semantic_loss_in_stage1: bool,
    /// Shared encoder with a segmentation head trained jointly (cross-entropy
    /// in place of the distillation term).
    pub joint_semantic_decoder: bool,
}

/// Toy segmentation pre-training of the teacher encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub min_pixel_accuracy: f64,
    /// Segmentation classes; label ids must be below this.
    pub num_classes: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 1e-3,
            batch_size: 4,
            min_pixel_accuracy: 0.9,
            num_classes: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub posenet: PoseNetConfig,
    pub loss: LossWeights,
    pub loss_options: LossOptions,
    pub metrics: MetricOptions,
    pub teacher: TeacherConfig,
    pub ablation: AblationFlags,
    pub stage: u8,
    /// Total budget over both stages.
    pub epochs: usize,
    /// Share of the epoch budget given to stage 2.
    pub stage2_fraction: f64,
    /// Hard cap on the steps of the current stage, overriding `epochs`.
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Validate (and possibly keep a new best checkpoint) every N steps.
    pub eval_every: usize,
    /// Resize every frame to `[width, height]` on load.
    pub image_size: Option<[usize; 2]>,
    pub stage1_checkpoint: Option<PathBuf>,
    pub teacher_checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig::default(),
            posenet: PoseNetConfig::default(),
            loss: LossWeights::default(),
            loss_options: LossOptions::default(),
            metrics: MetricOptions::default(),
            teacher: TeacherConfig::default(),
            ablation: AblationFlags::default(),
            stage: 1,
            epochs: 100,
            stage2_fraction: 0.5,
            max_steps: None,
            learning_rate: 1e-4,
            batch_size: 4,
            seed: 0,
            validation_fraction: 0.1,
            eval_every: 100,
            image_size: None,
            stage1_checkpoint: None,
            teacher_checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Decoder configuration after applying the SCE ablation flags.
    pub fn effective_decoder(&self) -> DecoderConfig {
        self.decoder
            .with_ablation(self.ablation.disable_high_level_sce, self.ablation.disable_low_level_sce)
    }

    /// Whether the semantic term is part of the current stage's objective.
    pub fn uses_semantic_loss(&self) -> bool {
        self.stage == 2 || self.ablation.semantic_loss_in_stage1
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.effective_decoder().validate()?;
        self.loss.validate()?;
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.stage == 2 && self.ablation.semantic_loss_in_stage1 {
            return Err(Error::Config("semantic_loss_in_stage1 is a single-stage schedule".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.stage2_fraction) || !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("stage2_fraction must be in [0, 1], validation_fraction in [0, 1)".into()));
        }
        if let Some([w, h]) = self.image_size {
            self.encoder.check_input_size(h, w)?;
        }
        Ok(())
    }

    /// Stage 2 needs both a stage-1 checkpoint and a teacher.
    pub fn validate_stage2_inputs(&self) -> Result<(&Path, &Path)> {
        match (&self.stage1_checkpoint, &self.teacher_checkpoint) {
            (Some(s), Some(t)) => Ok((s, t)),
            _ => Err(Error::Config(
                "stage 2 requires both stage1_checkpoint and teacher_checkpoint".into(),
            )),
        }
    }

    /// Epochs assigned to the current stage.
    pub fn stage_epochs(&self) -> usize {
        if self.ablation.semantic_loss_in_stage1 {
            return self.epochs;
        }
        let s2 = (self.epochs as f64 * self.stage2_fraction).round() as usize;
        if self.stage == 2 {
            s2
        } else {
            self.epochs - s2
        }
    }

    /// Optimizer steps for the current stage on `n_train` training triplets.
    pub fn stage_steps(&self, n_train: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.stage_epochs() * n_train.div_ceil(self.batch_size))
    }

    /// Apply `a.b.c=value` overrides. The value is parsed as JSON, falling
    /// back to a plain string; the key must already exist.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut doc, o.as_ref())?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        node = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    *node = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok(())
}
