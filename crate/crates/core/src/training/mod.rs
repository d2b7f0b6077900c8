//! Optimization: losses, AdamW, the learning-rate schedule, the training
//! loop and backbone relevance scoring.

mod config;
mod loss;
mod optim;
mod schedule;
mod scoring;
mod trainer;

pub use config::{TrainConfig, SCORING_LAMBDA};
pub use loss::{
    check_partition, cross_entropy, group_norms, record_group_penalty, record_total_loss,
    total_loss, BackboneRows,
};
pub use optim::{adamw_step, AdamWHyper, AdamWState};
pub use schedule::lr_at;
pub use scoring::{restrict_to_top, score_models, select_and_retrain, ImportanceReport};
pub use trainer::{
    batch_gradients, evaluate, evaluate_checkpoint, run_training, train, BackboneScore,
    EpochRecord, SplitData, SplitSizes, TrainOutcome, TrainReport,
};
