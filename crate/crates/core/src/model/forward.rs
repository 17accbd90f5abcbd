//! Full per-example forward: attention branches, feature concatenation, the
//! MLP head and the sigmoid.

use crate::data::{BehaviorSequence, Example};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};
use crate::tape::sigmoid;

use super::attention::{din_attention, lookup_sequence, lrea_attention_train};
use super::{AttentionKind, Dense, LreaParams, ModelConfig, Weights};

/// Probabilities are kept inside `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// A checkpoint's weights materialized at a given precision, tagged with the
/// params version they came from.
#[derive(Debug, Clone)]
pub struct InferenceModel<T = f64> {
    pub config: ModelConfig,
    pub version: String,
    pub weights: Weights<Matrix<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleOutput {
    pub logit: f64,
    pub prob: f64,
    /// `‖max(0, -W_Compᵀ·E_s)‖²` for this example (0 for DIN).
    pub penalty: f64,
    /// Unabsorbed vs absorbed max-abs difference (0 for DIN).
    pub absorption_gap: f64,
}

/// Runs the MLP head on an `n×in` feature block; returns `n×1` logits.
pub fn head_logits<T: Scalar, M: AsRef<Matrix<T>>>(
    features: &Matrix<T>,
    head: &[Dense<M>],
    slope: f64,
) -> Result<Matrix<T>> {
    let mut x = features.clone();
    let last = head.len().saturating_sub(1);
    for (i, layer) in head.iter().enumerate() {
        let bias = layer.bias.as_ref().broadcast_rows(x.rows())?;
        x = x.matmul(layer.weight.as_ref())?.add(&bias)?;
        if i < last {
            x = x.leaky_relu(slope);
        }
    }
    Ok(x)
}

/// Side-feature embeddings flattened into one `1×(n_side·d)` row.
pub fn side_features<T: Scalar>(
    table: &Matrix<T>,
    side: &[u32],
    n_side: usize,
) -> Result<Matrix<T>> {
    if side.len() != n_side {
        return Err(Error::Argument(format!(
            "expected {n_side} side features, got {}",
            side.len()
        )));
    }
    let rows = lookup_sequence(table, side)?;
    let width = rows.len();
    Matrix::new(1, width, rows.into_data())
}

pub fn short_branch<T: Scalar, M: AsRef<Matrix<T>>>(
    config: &ModelConfig,
    weights: &Weights<M>,
    seq: &BehaviorSequence,
    e_t: &Matrix<T>,
) -> Result<Option<Matrix<T>>> {
    match (&weights.short, config.uses_short_branch()) {
        (Some(w), true) => {
            let e_short = lookup_sequence(weights.embedding.as_ref(), &seq.short_ids)?;
            Ok(Some(din_attention(&e_short, e_t, w, config.leaky_slope)?))
        }
        _ => Ok(None),
    }
}

/// Head input `[long | short? | target | side…]`.
pub fn feature_row<T: Scalar>(
    long: &Matrix<T>,
    short: Option<&Matrix<T>>,
    e_t: &Matrix<T>,
    side: &Matrix<T>,
) -> Result<Matrix<T>> {
    let mut parts = vec![long];
    parts.extend(short);
    parts.push(e_t);
    parts.push(side);
    Matrix::hstack(&parts)
}

fn check_sequence(config: &ModelConfig, seq: &BehaviorSequence) -> Result<()> {
    if seq.long_ids.len() != config.long_len {
        return Err(Error::Dimension {
            op: "long sequence",
            lhs: (seq.long_ids.len(), 1),
            rhs: (config.long_len, 1),
        });
    }
    if config.uses_short_branch() && seq.short_ids.len() != config.short_len {
        return Err(Error::Dimension {
            op: "short sequence",
            lhs: (seq.short_ids.len(), 1),
            rhs: (config.short_len, 1),
        });
    }
    Ok(())
}

/// Training-path forward of one example (unabsorbed attention for LREA).
pub fn forward_example<T: Scalar, M: AsRef<Matrix<T>>>(
    config: &ModelConfig,
    weights: &Weights<M>,
    ex: &Example,
) -> Result<ExampleOutput> {
    check_sequence(config, &ex.seq)?;
    let table = weights.embedding.as_ref();
    let e_s = lookup_sequence(table, &ex.seq.long_ids)?;
    let e_t = lookup_sequence(table, &[ex.target])?;

    let (long, penalty, gap) = match (config.kind, &weights.compression) {
        (AttentionKind::Lrea, Some(c)) => {
            let out = lrea_attention_train(
                &e_s,
                &e_t,
                c.w_comp.as_ref(),
                c.w_decomp.as_ref(),
                &weights.long,
                config.leaky_slope,
            )?;
            let penalty = out.e_comp_t.neg_part_sq_norm().as_f64();
            (out.pooled, penalty, out.absorption_gap.as_f64())
        }
        (AttentionKind::Din, _) => (
            din_attention(&e_s, &e_t, &weights.long, config.leaky_slope)?,
            0.0,
            0.0,
        ),
        (AttentionKind::Lrea, None) => {
            return Err(Error::Argument(
                "low-rank model is missing compression weights".into(),
            ))
        }
    };
    let short = short_branch(config, weights, &ex.seq, &e_t)?;
    let side = side_features(weights.side_embedding.as_ref(), &ex.side, config.n_side)?;
    let features = feature_row(&long, short.as_ref(), &e_t, &side)?;
    let logit = head_logits(&features, &weights.head, config.leaky_slope)?
        .item()?
        .as_f64();
    Ok(ExampleOutput {
        logit,
        prob: clamp_prob(sigmoid(logit)),
        penalty,
        absorption_gap: gap,
    })
}

/// Click probability `σ(MLP(concat))` on the training path.
pub fn predict(ex: &Example, params: &LreaParams) -> Result<f64> {
    Ok(forward_example(&params.config, &params.weights, ex)?.prob)
}
