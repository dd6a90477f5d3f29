//! The training loop shared by both stages.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, RngState, FORMAT_VERSION};
use super::config::ExperimentConfig;
use super::model::DepthModel;
use super::optim::Adam;
use super::teacher::Teacher;
use crate::backbone::{FeaturePyramid, SegHead};
use crate::data::SampleTriplet;
use crate::error::{Error, Result};
use crate::geometry::{warp_depth, warp_image, Intrinsics};
use crate::losses::{
    boundary_alignment_loss, geometric_consistency_loss, semantic_information_loss,
    view_reconstruction_loss, LossBundle,
};
use crate::metrics::standard_metrics;
use crate::nn;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub stage: u8,
    pub view: f64,
    pub geo: f64,
    pub bnd: Option<f64>,
    pub sem: Option<f64>,
    /// Weighted recombination of the logged terms.
    pub total: f64,
    /// The total as computed by the differentiated graph.
    pub total_graph: f64,
    pub lr: f64,
    /// Why the boundary term was not evaluated, if it was not.
    pub bnd_skipped: Option<String>,
}

impl StepRecord {
    pub fn bundle(&self) -> LossBundle {
        LossBundle {
            stage: self.stage,
            view: self.view,
            geo: self.geo,
            bnd: self.bnd,
            sem: self.sem,
            total: self.total,
        }
    }
}

pub struct TrainOutcome {
    /// State after the final step (resumable).
    pub last: Checkpoint,
    /// Lowest validation Abs.Rel seen; equals `last` when nothing was validated.
    pub best: Checkpoint,
    pub best_val_abs_rel: Option<f64>,
    pub log: Vec<StepRecord>,
}

struct Batch {
    target: Tensor,
    sources: Vec<Tensor>,
    pseudo: Option<Tensor>,
    seg: Option<Tensor>,
    k: Intrinsics,
}

/// Deterministic train/validation split: a seeded shuffle, the first
/// `ceil(fraction * n)` indices validate. At least one frame always trains.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5911));
    let n_val = ((n as f64 * fraction).ceil() as usize).min(n.saturating_sub(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// First `n` samples of every pyramid level.
fn head_of(p: &FeaturePyramid, n: usize) -> Result<FeaturePyramid> {
    let levels = p.levels.iter().map(|l| l.narrow(0, 0, n)).collect::<candle_core::Result<_>>()?;
    Ok(FeaturePyramid { levels, strides: p.strides.clone() })
}

pub struct Trainer {
    cfg: ExperimentConfig,
    model: DepthModel,
    teacher: Option<Teacher>,
    teacher_digest: Option<String>,
    adam: Adam,
    vars: Vec<(String, Var)>,
    data: Vec<SampleTriplet>,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    step: usize,
    rng: RngState,
    best: Option<(f64, Checkpoint)>,
    log: Vec<StepRecord>,
    log_path: Option<PathBuf>,
}

impl Trainer {
    /// Fresh model for the configured stage.
    pub fn new(cfg: &ExperimentConfig, data: &[SampleTriplet], teacher: Option<Teacher>) -> Result<Self> {
        let model = DepthModel::new(cfg, DType::F32)?;
        let adam = Adam::new(cfg.learning_rate);
        Self::setup(cfg, data, model, teacher, adam, 0, RngState { seed: cfg.seed, ..Default::default() })
    }

    /// Start a new stage from a checkpoint's weights. The optimizer moments
    /// stored with them carry over, so the stage continues the same
    /// optimization instead of restarting Adam with sign-like unit steps.
    pub fn from_weights(
        cfg: &ExperimentConfig,
        data: &[SampleTriplet],
        init: &Checkpoint,
        teacher: Option<Teacher>,
    ) -> Result<Self> {
        let model = DepthModel::with_weights(cfg, &init.weights, DType::F32)?;
        let adam = init.optimizer(cfg.learning_rate);
        Self::setup(cfg, data, model, teacher, adam, 0, RngState { seed: cfg.seed, ..Default::default() })
    }

    /// Continue exactly where a checkpoint stopped.
    pub fn resume(ck: &Checkpoint, data: &[SampleTriplet], teacher: Option<Teacher>) -> Result<Self> {
        if ck.meta.kind != CheckpointKind::Depth {
            return Err(Error::Checkpoint("cannot resume from a teacher checkpoint".into()));
        }
        let cfg = &ck.meta.config;
        let model = DepthModel::with_weights(cfg, &ck.weights, DType::F32)?;
        let adam = ck.optimizer(cfg.learning_rate);
        let mut t = Self::setup(cfg, data, model, teacher, adam, ck.meta.step, ck.meta.rng)?;
        if let Some(v) = ck.meta.best_val_abs_rel {
            t.best = Some((v, ck.clone()));
        }
        Ok(t)
    }

    fn setup(
        cfg: &ExperimentConfig,
        data: &[SampleTriplet],
        model: DepthModel,
        teacher: Option<Teacher>,
        adam: Adam,
        step: usize,
        rng: RngState,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let data: Vec<SampleTriplet> = match cfg.image_size {
            Some([w, h]) => data.iter().map(|t| t.resized(w, h)).collect(),
            None => data.to_vec(),
        };
        for t in &data {
            t.validate()?;
            let (w, h) = t.size();
            cfg.encoder.check_input_size(h, w)?;
        }
        if cfg.uses_semantic_loss() && !cfg.ablation.joint_semantic_decoder && teacher.is_none() {
            return Err(Error::Config("the semantic loss needs a teacher".into()));
        }
        let teacher_digest = match &teacher {
            Some(t) => {
                if !t.is_frozen() {
                    return Err(Error::Config("teacher weights must be frozen".into()));
                }
                Some(t.digest()?)
            }
            None => None,
        };
        let (train_idx, val_idx) = split_indices(data.len(), cfg.validation_fraction, cfg.seed);
        let vars = model.store().vars();
        let t = Self {
            cfg: cfg.clone(),
            model,
            teacher,
            teacher_digest,
            adam,
            vars,
            data,
            train_idx,
            val_idx,
            step,
            rng,
            best: None,
            log: Vec::new(),
            log_path: None,
        };
        if let Some(teacher) = &t.teacher {
            let x = t.data[0].target.to_tensor(DType::F32)?;
            let (_, student) = t.model.depth(&x)?;
            student.check_compatible(&teacher.encode(&x)?)?;
        }
        Ok(t)
    }

    /// Append every step record as one JSON line to `path`.
    pub fn with_log_file(mut self, path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        // A resumed run extends its log; a fresh one starts it over.
        std::fs::OpenOptions::new().create(true).append(true).truncate(false).open(path)?;
        if self.step == 0 {
            std::fs::File::create(path)?;
        }
        self.log_path = Some(path.to_path_buf());
        Ok(self)
    }

    pub fn model(&self) -> &DepthModel {
        &self.model
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val_idx
    }

    pub fn teacher(&self) -> Option<&Teacher> {
        self.teacher.as_ref()
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.stage_steps(self.train_idx.len())
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order = self.train_idx.clone();
        let seed = self.rng.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    /// Indices of the batch at the current stream position.
    pub fn current_batch(&self) -> Vec<usize> {
        let order = self.epoch_order(self.rng.epoch);
        order
            .chunks(self.cfg.batch_size)
            .nth(self.rng.cursor)
            .expect("cursor within epoch")
            .to_vec()
    }

    fn advance(&mut self) {
        let n_batches = self.train_idx.len().div_ceil(self.cfg.batch_size);
        self.rng.cursor += 1;
        if self.rng.cursor >= n_batches {
            self.rng.cursor = 0;
            self.rng.epoch += 1;
        }
    }

    fn assemble(&self, idx: &[usize]) -> Result<Batch> {
        let items: Vec<&SampleTriplet> = idx.iter().map(|i| &self.data[*i]).collect();
        let first = items[0];
        for t in &items {
            if t.intrinsics != first.intrinsics || t.sources.len() != first.sources.len() || t.size() != first.size() {
                return Err(Error::Data {
                    entry: t.name.clone(),
                    msg: "frames in one batch must share size, intrinsics and source count".into(),
                });
            }
        }
        let stack = |f: &dyn Fn(&SampleTriplet) -> Result<Tensor>| -> Result<Tensor> {
            Ok(Tensor::cat(&items.iter().map(|t| f(t)).collect::<Result<Vec<_>>>()?, 0)?)
        };
        let target = stack(&|t| t.target.to_tensor(DType::F32))?;
        let sources = (0..first.sources.len())
            .map(|j| stack(&|t| t.sources[j].to_tensor(DType::F32)))
            .collect::<Result<Vec<_>>>()?;
        let pseudo = if items.iter().all(|t| t.pseudo_depth.is_some()) {
            Some(stack(&|t| t.pseudo_depth.as_ref().expect("checked").to_tensor(DType::F32))?)
        } else {
            None
        };
        let seg = if items.iter().all(|t| t.seg.is_some()) {
            Some(stack(&|t| t.seg.as_ref().expect("checked").to_tensor())?)
        } else {
            None
        };
        Ok(Batch { target, sources, pseudo, seg, k: first.intrinsics })
    }

    /// Loss graph of one batch: the differentiable total and the named terms.
    fn losses(&self, b: &Batch) -> Result<(Tensor, LossBundle, Option<String>)> {
        let w = &self.cfg.loss;
        let n = b.target.dim(0)?;
        let mut frames = vec![b.target.clone()];
        frames.extend(b.sources.iter().cloned());
        let (depth_all, pyr_all) = self.model.depth(&Tensor::cat(&frames, 0)?)?;
        let depth = depth_all.narrow(0, 0, n)?;
        let mut views = Vec::new();
        let mut geos = Vec::new();
        for (j, src) in b.sources.iter().enumerate() {
            let pose = self.model.pose(&b.target, src)?;
            let synth = warp_image(src, &depth, &pose, &b.k)?;
            views.push(view_reconstruction_loss(&b.target, &synth.synthesized, &synth.valid, w.lambda)?);
            let src_depth = depth_all.narrow(0, (j + 1) * n, n)?;
            let wd = warp_depth(&src_depth, &depth, &pose, &b.k)?;
            geos.push(geometric_consistency_loss(&depth, &wd.synthesized, &wd.valid)?);
        }
        let ns = views.len() as f64;
        let view = (Tensor::stack(&views, 0)?.sum_all()? / ns)?;
        let geo = (Tensor::stack(&geos, 0)?.sum_all()? / ns)?;
        let (bnd, skipped) = if w.gamma == 0.0 {
            (None, Some("gamma = 0".to_string()))
        } else if let Some(pd) = &b.pseudo {
            (Some(boundary_alignment_loss(&depth, pd, w, &self.cfg.loss_options)?), None)
        } else {
            log::warn!("pseudo-depth missing in batch, boundary loss skipped");
            (None, Some("pseudo-depth unavailable".to_string()))
        };
        let sem = if self.cfg.ablation.joint_semantic_decoder {
            match (&self.model.seg_head, &b.seg) {
                (Some(head), Some(labels)) => {
                    Some(SegHead::cross_entropy(&head.forward(&head_of(&pyr_all, n)?)?, labels)?)
                }
                _ => None,
            }
        } else if self.cfg.uses_semantic_loss() {
            let teacher = self.teacher.as_ref().ok_or_else(|| Error::Config("missing teacher".into()))?;
            let student = head_of(&pyr_all, n)?;
            let t = teacher.encode(&b.target)?;
            Some(semantic_information_loss(&student, &t, self.cfg.loss_options.per_pixel_semantic)?)
        } else {
            None
        };
        let total = w.combine(&view, &geo, bnd.as_ref(), sem.as_ref())?;
        let v = |t: &Tensor| nn::scalar(t);
        let bnd_v = bnd.as_ref().map(v).transpose()?;
        let mut bundle = match &sem {
            Some(s) => LossBundle::stage2(v(&view)?, v(&geo)?, bnd_v, v(s)?, w),
            None => LossBundle::stage1(v(&view)?, v(&geo)?, bnd_v, w),
        };
        bundle.stage = self.cfg.stage;
        Ok((total, bundle, skipped))
    }

    /// Loss terms on the given training-set indices, without updating.
    pub fn batch_loss(&self, idx: &[usize]) -> Result<LossBundle> {
        Ok(self.losses(&self.assemble(idx)?)?.1)
    }

    /// One optimizer step on the batch at the current stream position.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let idx = self.current_batch();
        let batch = self.assemble(&idx)?;
        let (total, bundle, skipped) = self.losses(&batch)?;
        let total_graph = nn::scalar(&total)?;
        if !bundle.is_finite() || !total_graph.is_finite() {
            return Err(Error::NonFinite {
                step: self.step + 1,
                terms: format!("{} (batch {idx:?})", bundle.non_finite_terms().join(", ")),
            });
        }
        let grads = total.backward()?;
        self.adam.apply(&self.vars, &grads)?;
        self.step += 1;
        let rec = StepRecord {
            step: self.step,
            epoch: self.rng.epoch,
            stage: self.cfg.stage,
            view: bundle.view,
            geo: bundle.geo,
            bnd: bundle.bnd,
            sem: bundle.sem,
            total: bundle.total,
            total_graph,
            lr: self.adam.lr,
            bnd_skipped: skipped,
        };
        self.advance();
        if let Some(p) = &self.log_path {
            let mut f = std::fs::OpenOptions::new().append(true).open(p)?;
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        self.log.push(rec.clone());
        Ok(rec)
    }

    /// Mean Abs.Rel over the validation frames carrying ground truth.
    pub fn validate(&self) -> Result<Option<f64>> {
        let mut vals = Vec::new();
        for &i in &self.val_idx {
            let t = &self.data[i];
            let Some(gt) = &t.gt_depth else { continue };
            let pred = self.model.predict(&t.target)?;
            vals.push(standard_metrics(&pred, gt, self.cfg.metrics.median_scaling)?.abs_rel);
        }
        Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Depth,
            stage: self.cfg.stage,
            step: self.step,
            config: self.cfg.clone(),
            rng: self.rng,
            adam_step: self.adam.step,
            best_val_abs_rel: self.best.as_ref().map(|b| b.0),
            teacher_digest: self.teacher_digest.clone(),
            num_classes: None,
            pixel_accuracy: None,
        };
        Checkpoint::snapshot(meta, &self.model.weights(), Some(&self.adam))
    }

    fn maybe_keep_best(&mut self) -> Result<()> {
        let Some(v) = self.validate()? else { return Ok(()) };
        log::info!("step {}: validation Abs.Rel {v:.4}", self.step);
        if self.best.as_ref().is_none_or(|(b, _)| v < *b) {
            let mut ck = self.checkpoint()?;
            ck.meta.best_val_abs_rel = Some(v);
            self.best = Some((v, ck));
        }
        Ok(())
    }

    /// Train until the stage's step budget is used up.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let total = self.total_steps();
        while self.step < total {
            let rec = self.train_step()?;
            if rec.step % 50 == 0 || rec.step == 1 {
                log::info!(
                    "step {}/{total} total {:.5} view {:.5} geo {:.5} bnd {:?} sem {:?}",
                    rec.step, rec.total, rec.view, rec.geo, rec.bnd, rec.sem
                );
            }
            if self.step % self.cfg.eval_every == 0 || self.step == total {
                self.maybe_keep_best()?;
            }
        }
        if let (Some(t), Some(d)) = (&self.teacher, &self.teacher_digest) {
            if t.digest()? != *d {
                return Err(Error::Checkpoint("teacher weights changed during training".into()));
            }
        }
        let last = self.checkpoint()?;
        let (best_val, best) = match &self.best {
            Some((v, ck)) => (Some(*v), ck.clone()),
            None => (None, last.clone()),
        };
        Ok(TrainOutcome { last, best, best_val_abs_rel: best_val, log: self.log.clone() })
    }
}

/// Stage 1: view, geometric and boundary terms from a fresh model. With
/// `semantic_loss_in_stage1` the distillation term is on from the first step
/// and a teacher is required.
pub fn stage1_trainer(cfg: &ExperimentConfig, data: &[SampleTriplet], teacher: Option<Teacher>) -> Result<Trainer> {
    if cfg.stage != 1 {
        return Err(Error::Config(format!("stage-1 training called with stage {}", cfg.stage)));
    }
    Trainer::new(cfg, data, teacher)
}

pub fn train_stage1(cfg: &ExperimentConfig, data: &[SampleTriplet]) -> Result<TrainOutcome> {
    stage1_trainer(cfg, data, None)?.run()
}

/// Single schedule with the semantic term from the start (ablation).
pub fn train_single_stage_with_teacher(
    cfg: &ExperimentConfig,
    data: &[SampleTriplet],
    teacher: Teacher,
) -> Result<TrainOutcome> {
    stage1_trainer(cfg, data, Some(teacher))?.run()
}

/// Stage 2: continue from stage-1 weights, adding the distillation term
/// against the frozen teacher.
pub fn stage2_trainer(
    cfg: &ExperimentConfig,
    stage1: &Checkpoint,
    teacher: Teacher,
    data: &[SampleTriplet],
) -> Result<Trainer> {
    if cfg.stage != 2 {
        return Err(Error::Config(format!("stage-2 training called with stage {}", cfg.stage)));
    }
    if stage1.meta.kind != CheckpointKind::Depth || stage1.meta.stage != 1 {
        return Err(Error::Checkpoint("stage 2 must start from a stage-1 depth checkpoint".into()));
    }
    Trainer::from_weights(cfg, data, stage1, Some(teacher))
}

pub fn train_stage2(
    cfg: &ExperimentConfig,
    stage1: &Checkpoint,
    teacher: Teacher,
    data: &[SampleTriplet],
) -> Result<TrainOutcome> {
    stage2_trainer(cfg, stage1, teacher, data)?.run()
}
