//! Objective, optimizer, training loop and ranking metrics.

pub mod loss;
pub mod metrics;
pub mod optim;
mod trainer;

pub use loss::{
    batch_gradients, cross_entropy, non_neg_loss, total_loss, BatchGradients, LossParts, CHUNK_SIZE,
};
pub use metrics::{auc, gauc};
pub use optim::AdagradState;
pub use trainer::{
    evaluate, train, train_with, write_log, EpochRecord, Evaluation, TrainConfig, TrainOutcome,
};
