//! Three-phase training engine: stage objectives, the cosine stage
//! scheduler, AdamW, checkpoints and the training loop.

pub mod checkpoint;
pub mod config;
pub mod optimizer;
pub mod scheduler;
pub mod stage;
pub mod trainer;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{BatchSchedule, DataSpec, EncoderSpec, RunConfig, Split, TrainConfig, TrainMode};
pub use optimizer::{optimizer_step, AdamW, Moments, ADAM_EPS};
pub use scheduler::{css_score, step_scheduler, Phase, SchedulerConfig, StageState};
pub use stage::{loss_alignment, loss_refinement, loss_stabilization, ClassifierBinding};
pub use trainer::{build_dataset, build_encoder, train, LogRow, Trainer, LOG_HEADER};
