//! The training objective recorded on a [`Tape`].
//!
//! Mirrors the plain forward in [`super::forward`] operation for operation,
//! always through the unabsorbed low-rank path, so gradients reach
//! `W_Comp`, `W_Decomp`, the attention weights, the head and the embeddings.

use std::sync::Arc;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

use super::forward::PROB_CLAMP;
use super::{AttentionKind, AttentionWeights, ModelConfig, Weights};

/// Options of the regularized objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    /// Weight of the non-negativity penalty.
    pub lambda: f64,
    /// When false, the `W_Compᵀ·E_s` penalty term treats `E_s` as a constant.
    pub penalty_grad_to_embeddings: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            penalty_grad_to_embeddings: true,
        }
    }
}

/// Records every tensor as a tape leaf.
pub fn bind(tape: &mut Tape, weights: &Weights<Arc<Matrix>>) -> Weights<Var> {
    weights.map(|m| tape.leaf(Arc::clone(m)))
}

/// Values recorded for one chunk of a batch.
#[derive(Debug, Clone, Copy)]
pub struct ChunkLoss {
    /// This chunk's additive share of the batch objective.
    pub loss: Var,
    /// Sum over the chunk of per-example cross-entropy.
    pub ce_sum: f64,
    /// Sum over the chunk of per-example `‖max(0, -W_Compᵀ·E_s)‖²`.
    pub penalty_sum: f64,
    /// `‖max(0, -W_Decompᵀ)‖²` if this chunk carries it, else 0.
    pub decomp_penalty: f64,
}

fn din_pool(
    tape: &mut Tape,
    e_s: Var,
    e_t: Var,
    w: &AttentionWeights<Var>,
    slope: f64,
) -> Result<Var> {
    let l = tape.shape(e_s).0;
    let t_w1 = tape.matmul(e_t, w.w1)?;
    let t_w1_b = tape.broadcast_rows(t_w1, l)?;
    let s_w2 = tape.matmul(e_s, w.w2)?;
    let t_b = tape.broadcast_rows(e_t, l)?;
    let inter = tape.hadamard(t_b, e_s)?;
    let inter_w3 = tape.matmul(inter, w.w3)?;
    let pre = tape.add(t_w1_b, s_w2)?;
    let pre = tape.add(pre, inter_w3)?;
    let act = tape.leaky_relu(pre, slope);
    let score = tape.matmul(act, w.w_o)?;
    let score_t = tape.transpose(score);
    tape.matmul(score_t, e_s)
}

fn ids(v: &[u32]) -> Vec<usize> {
    v.iter().map(|&i| i as usize).collect()
}

/// Records the objective contribution of `examples`, one chunk of a batch of
/// `batch_len` examples:
///
/// `(n/N)·CE_chunk + (λ/N)·Σ‖max(0,-W_Compᵀ·E_s)‖² [+ λ·‖max(0,-W_Decompᵀ)‖²]`
///
/// Summing the chunk losses of a batch gives the batch objective; exactly one
/// chunk should set `carry_decomp_term`.
pub fn chunk_objective(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &Weights<Var>,
    examples: &[&Example],
    batch_len: usize,
    opts: ObjectiveOptions,
    carry_decomp_term: bool,
) -> Result<ChunkLoss> {
    if examples.is_empty() || batch_len < examples.len() {
        return Err(Error::Argument(format!(
            "chunk of {} examples in a batch of {batch_len}",
            examples.len()
        )));
    }
    let slope = config.leaky_slope;
    let n_batch = batch_len as f64;
    let compression = match (config.kind, &vars.compression) {
        (AttentionKind::Lrea, Some(c)) => {
            let wc_t = tape.transpose(c.w_comp);
            let wd_t = tape.transpose(c.w_decomp);
            Some((wc_t, wd_t))
        }
        (AttentionKind::Lrea, None) => {
            return Err(Error::Argument(
                "low-rank model is missing compression weights".into(),
            ))
        }
        (AttentionKind::Din, _) => None,
    };

    let mut rows = Vec::with_capacity(examples.len());
    let mut penalties = Vec::new();
    for ex in examples {
        if ex.seq.long_ids.len() != config.long_len {
            return Err(Error::Dimension {
                op: "long sequence",
                lhs: (ex.seq.long_ids.len(), 1),
                rhs: (config.long_len, 1),
            });
        }
        let e_s = tape.gather_rows(vars.embedding, &ids(&ex.seq.long_ids))?;
        let e_t = tape.gather_rows(vars.embedding, &[ex.target as usize])?;

        let pooled = match compression {
            Some((wc_t, wd_t)) => {
                let w = &vars.long;
                let e_comp_t = tape.matmul(wc_t, e_s)?;
                let r = tape.shape(e_comp_t).0;
                let t_b = tape.broadcast_rows(e_t, r)?;
                let a = tape.matmul(t_b, w.w1)?;
                let b = tape.matmul(e_comp_t, w.w2)?;
                let inter = tape.hadamard(t_b, e_comp_t)?;
                let c = tape.matmul(inter, w.w3)?;
                let m = tape.add(a, b)?;
                let m = tape.add(m, c)?;
                let x = tape.matmul(wd_t, m)?;
                let act = tape.leaky_relu(x, slope);
                let score = tape.matmul(act, w.w_o)?;
                let score_t = tape.transpose(score);

                let penalty_src = if opts.penalty_grad_to_embeddings {
                    e_comp_t
                } else {
                    let frozen = tape.leaf(tape.value(e_s).clone());
                    tape.matmul(wc_t, frozen)?
                };
                penalties.push(tape.neg_part_sq_norm(penalty_src));
                tape.matmul(score_t, e_s)?
            }
            None => din_pool(tape, e_s, e_t, &vars.long, slope)?,
        };

        let mut parts = vec![pooled];
        if let (Some(w), true) = (&vars.short, config.uses_short_branch()) {
            let e_short = tape.gather_rows(vars.embedding, &ids(&ex.seq.short_ids))?;
            parts.push(din_pool(tape, e_short, e_t, w, slope)?);
        }
        parts.push(e_t);
        if ex.side.len() != config.n_side {
            return Err(Error::Argument(format!(
                "expected {} side features, got {}",
                config.n_side,
                ex.side.len()
            )));
        }
        for &s in &ex.side {
            parts.push(tape.gather_rows(vars.side_embedding, &[s as usize])?);
        }
        rows.push(tape.hstack(&parts)?);
    }

    let n = examples.len();
    let mut x = tape.vstack(&rows)?;
    let last = vars.head.len().saturating_sub(1);
    for (i, layer) in vars.head.iter().enumerate() {
        let z = tape.matmul(x, layer.weight)?;
        let b = tape.broadcast_rows(layer.bias, n)?;
        x = tape.add(z, b)?;
        if i < last {
            x = tape.leaky_relu(x, slope);
        }
    }
    let probs = tape.sigmoid(x);
    let labels: Vec<f64> = examples.iter().map(|e| e.label_f64()).collect();
    let ce_mean = tape.binary_cross_entropy(probs, &labels, PROB_CLAMP)?;
    let ce_sum = tape.value(ce_mean).item()? * n as f64;
    let mut loss = tape.scale(ce_mean, n as f64 / n_batch);

    let mut penalty_sum = 0.0;
    if !penalties.is_empty() {
        let mut acc = penalties[0];
        for &p in &penalties[1..] {
            acc = tape.add(acc, p)?;
        }
        penalty_sum = tape.value(acc).item()?;
        let scaled = tape.scale(acc, opts.lambda / n_batch);
        loss = tape.add(loss, scaled)?;
    }

    let mut decomp_penalty = 0.0;
    if let (true, Some((_, wd_t))) = (carry_decomp_term, compression) {
        let p = tape.neg_part_sq_norm(wd_t);
        decomp_penalty = tape.value(p).item()?;
        let scaled = tape.scale(p, opts.lambda);
        loss = tape.add(loss, scaled)?;
    }

    Ok(ChunkLoss {
        loss,
        ce_sum,
        penalty_sum,
        decomp_penalty,
    })
}
