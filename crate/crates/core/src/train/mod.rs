//! Staged training: freeze masks, schedule, optimizer, checkpoints.

pub mod checkpoint;
pub mod optim;
pub mod schedule;
pub mod stage;
pub mod trainer;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta, RngState, FORMAT_VERSION, MAGIC,
};
pub use optim::{adamw_step, clip_grad_norm, AdamWConfig, OptimizerState};
pub use schedule::{lr_at, LrSchedule};
pub use stage::{build_freeze_mask, FreezeMask, Stage};
pub use trainer::{run_trainer, train_stage, MetricRecord, StageConfig, StageData, StageOutcome, TrainOptions, Trainer};
