//! Losses, ray batches and the training loop.

mod data;
mod loss;
mod trainer;

pub use data::{BatchSampler, PixelBatch, RayRecord, SensorSet};
pub use loss::{color_loss, color_loss_grad, irs_loss, irs_loss_grad, uss_loss, uss_loss_grad, uss_violates, LossReduction, LossReport, LossWeights};
pub use trainer::{
    evaluate_batch, run_offline, run_online, timeline_csv, EvalReport, Evaluator, FieldOptimizer, GridVariant, LossSettings, Mode,
    TimelineRow, TrainConfig, TrainStats, Trainer, TIMELINE_HEADER,
};
