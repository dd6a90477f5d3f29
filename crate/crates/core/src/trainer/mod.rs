//! Two-stage training, teacher preparation, checkpoints and evaluation.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod optim;
pub mod teacher;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, RngState};
pub use config::{AblationFlags, ExperimentConfig, TeacherConfig};
pub use eval::{evaluate, evaluate_maps, EvalReport, FrameMetrics};
pub use model::{DepthModel, ParamTable};
pub use optim::Adam;
pub use teacher::{prepare_teacher, Teacher, TeacherSource};
pub use train::{
    split_indices, stage1_trainer, stage2_trainer, train_single_stage_with_teacher, train_stage1, train_stage2, StepRecord,
    TrainOutcome, Trainer,
};
