//! Optimizer, schedule, datasets and the training/evaluation loops.

pub mod data;
pub mod optim;
pub mod train;
pub mod transfer;

pub use data::{Augment, Dataset};
pub use optim::{clip_grad_norm, lr_at, AdamW, Schedule};
pub use train::{evaluate, evaluate_checkpoint, train, EvalResult, MetricsRow, RunArtifacts, TrainConfig};
pub use transfer::{attention_transfer_train, transfer_forward};
