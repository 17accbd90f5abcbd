//! Low-rank efficient attention for long behavior sequences in CTR models.
//!
//! Training runs the low-rank attention through a small reverse-mode tape.
//! Serving caches two `d×r` matrices per user and scores candidates without
//! touching the raw length-`L` sequence.

// `!(x > 0.0)` is used on purpose so NaN fails validation; index loops
// mirror the math in oracles and generators.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod par;
pub mod serving;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use matrix::{Matrix, Scalar};
pub use model::{AttentionKind, Checkpoint, InferenceModel, LreaParams, ModelConfig};
pub use par::Execution;
pub use serving::{CompressedUserState, ScoreRequest, StateStore};
pub use training::{TrainConfig, TrainOutcome};
