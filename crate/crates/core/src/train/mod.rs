//! Losses, the optimizer, metrics, the training loop and tiled evaluation.

mod eval;
mod loss;
mod metrics;
mod optim;
mod trainer;

pub use eval::{evaluate, predict_image};
pub use loss::{segmentation_loss, LossConfig, LossValue};
pub use metrics::{ClassMetrics, ConfusionMatrix, MetricsReport};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{FitSummary, StepLog, TrainConfig, Trainer, LOSS_CSV_HEADER};
