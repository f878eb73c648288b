//! Optimisation: Dice/IoU objective, AdamW with warm-up and cosine decay,
//! gradient accumulation, component freezing and best-weight restoration.

mod config;
mod freeze;
mod optim;
mod trainer;

pub use config::{lr_at, TrainConfig};
pub use freeze::{apply_freeze_policy, FreezePolicy, Strategy};
pub use optim::{adamw_step, AdamW, Moments, OptimizerState};
pub use trainer::{
    batch_gradients, prepare_samples, sample_gradients, sample_loss, train, train_on_samples,
    validation_scores, HistoryRecord, PreparedSample, TrainHistory, TrainOutcome, BEST_CHECKPOINT,
    LAST_GOOD_CHECKPOINT,
};
