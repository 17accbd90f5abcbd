//! Objective terms and batched gradient evaluation.

use crate::data::Example;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::graph::{bind, chunk_objective, ObjectiveOptions};
use crate::model::{forward_example, AttentionKind, LreaParams, Weights, PROB_CLAMP};
use crate::par::Execution;
use crate::tape::{bce_mean, Tape};

/// Examples per tape. Fixed so results do not depend on thread count.
pub const CHUNK_SIZE: usize = 16;

/// Mean binary cross-entropy `-(1/N)·Σ[y·ln p + (1-y)·ln(1-p)]`.
pub fn cross_entropy(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Argument("cross-entropy of an empty batch".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    Ok(bce_mean(probs, labels, PROB_CLAMP))
}

/// `‖max(0, -W_Decompᵀ)‖² + ‖max(0, -W_Compᵀ·E_s)‖²`, with the second
/// argument already formed as the `r×d` product `W_Compᵀ·E_s`.
pub fn non_neg_loss(w_decomp: &Matrix, e_comp_t: &Matrix) -> f64 {
    w_decomp.transpose().neg_part_sq_norm() + e_comp_t.neg_part_sq_norm()
}

/// Components of the batch objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    /// Mean per-example `E_Comp` penalty plus the `W_Decomp` penalty.
    pub penalty: f64,
    pub total: f64,
}

/// `CE + λ·(mean_i ‖max(0,-W_Compᵀ·E_s⁽ⁱ⁾)‖² + ‖max(0,-W_Decompᵀ)‖²)` evaluated
/// with the plain forward.
pub fn total_loss(batch: &[Example], params: &LreaParams, lambda: f64) -> Result<LossParts> {
    if lambda < 0.0 {
        return Err(Error::Argument(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    let outs = batch
        .iter()
        .map(|ex| forward_example(&params.config, &params.weights, ex))
        .collect::<Result<Vec<_>>>()?;
    let probs: Vec<f64> = outs.iter().map(|o| o.prob).collect();
    let labels: Vec<f64> = batch.iter().map(Example::label_f64).collect();
    let ce = cross_entropy(&probs, &labels)?;
    let penalty = match (params.config.kind, &params.weights.compression) {
        (AttentionKind::Lrea, Some(c)) => {
            outs.iter().map(|o| o.penalty).sum::<f64>() / batch.len() as f64
                + c.w_decomp.transpose().neg_part_sq_norm()
        }
        _ => 0.0,
    };
    Ok(LossParts {
        ce,
        penalty,
        total: ce + lambda * penalty,
    })
}

#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub parts: LossParts,
    pub grads: Weights<Matrix>,
}

/// Objective and its gradient over a batch, split into fixed-size chunks
/// that are differentiated independently and summed in order.
pub fn batch_gradients(
    params: &LreaParams,
    batch: &[&Example],
    opts: ObjectiveOptions,
    exec: Execution,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let chunks: Vec<&[&Example]> = batch.chunks(CHUNK_SIZE).collect();
    let indexed: Vec<(usize, &[&Example])> = chunks.into_iter().enumerate().collect();
    let per_chunk = exec.try_map(&indexed, |&(i, chunk)| {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &params.weights);
        let out = chunk_objective(
            &mut tape,
            &params.config,
            &vars,
            chunk,
            batch.len(),
            opts,
            i == 0,
        )?;
        let loss = tape.value(out.loss).item()?;
        let mut g = tape.backward(out.loss)?;
        let grads = vars.map(|&v| g.take(v));
        Ok((out, loss, grads))
    })?;

    let n = batch.len() as f64;
    let mut iter = per_chunk.into_iter();
    let (first, mut total, mut grads) = iter.next().expect("non-empty batch");
    let mut ce_sum = first.ce_sum;
    let mut penalty_sum = first.penalty_sum;
    let decomp = first.decomp_penalty;
    for (out, loss, g) in iter {
        total += loss;
        ce_sum += out.ce_sum;
        penalty_sum += out.penalty_sum;
        for (acc, part) in grads.tensors_mut().into_iter().zip(g.tensors()) {
            acc.add_assign(part)?;
        }
    }
    Ok(BatchGradients {
        parts: LossParts {
            ce: ce_sum / n,
            penalty: penalty_sum / n + decomp,
            total,
        },
        grads,
    })
}
