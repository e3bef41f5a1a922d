//! Optimization: multi-task loss, schedule, Adam, language balancing, the
//! training loop and checkpoint averaging.

pub mod adam;
pub mod average;
pub mod data;
pub mod loss;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use adam::{Adam, AdamConfig};
pub use average::average_stores;
pub use data::{FeatureCache, PreparedUtterance, TaskData};
pub use loss::{combine_losses, loss_weights, validate_weights, LossBundle};
pub use sampler::{sample_language, LanguageSampler};
pub use schedule::{lr_at, TrainSchedule};
pub use trainer::{train, BatchLosses, BestCheckpoint, DevRecord, StepRecord, TrainConfig, TrainEvent, Trainer, TrainerState};
