//! Offline precompute of per-user compressed states and online candidate
//! scoring through the absorbed low-rank path.

pub mod bench;
mod store;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{BehaviorSequence, Example};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};
use crate::model::attention::AbsorbedUser;
use crate::model::forward::{clamp_prob, head_logits, side_features};
use crate::model::{din_attention, lookup_sequence, AttentionKind, InferenceModel};
use crate::tape::sigmoid;

pub use store::{precompute, Manifest, StateStore};

/// What the serving tier keeps per user. Nothing here grows with `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedUserState<T = f64> {
    pub user_id: u64,
    /// `E_sᵀ·W_Comp`, `d×r`.
    pub e_comp: Matrix<T>,
    /// `E_sᵀ·W_Decompᵀ`, `d×r`.
    pub e_auxabsorb: Matrix<T>,
    /// Recent items for the short-sequence branch (capacity `S`, not `L`).
    pub short_ids: Vec<u32>,
    pub params_version: String,
}

impl<T: Scalar> CompressedUserState<T> {
    pub fn cast<U: Scalar>(&self) -> CompressedUserState<U> {
        CompressedUserState {
            user_id: self.user_id,
            e_comp: self.e_comp.cast(),
            e_auxabsorb: self.e_auxabsorb.cast(),
            short_ids: self.short_ids.clone(),
            params_version: self.params_version.clone(),
        }
    }
}

/// Materializes one user's state from the raw sequence.
pub fn compress_user<T: Scalar>(
    user_id: u64,
    seq: &BehaviorSequence,
    model: &InferenceModel<T>,
) -> Result<CompressedUserState<T>> {
    let c = match (model.config.kind, &model.weights.compression) {
        (AttentionKind::Lrea, Some(c)) => c,
        _ => {
            return Err(Error::Argument(
                "only low-rank checkpoints can be precomputed".into(),
            ))
        }
    };
    if seq.long_ids.len() != model.config.long_len {
        return Err(Error::Dimension {
            op: "compress_user",
            lhs: (seq.long_ids.len(), 1),
            rhs: (model.config.long_len, 1),
        });
    }
    let e_s = lookup_sequence(&model.weights.embedding, &seq.long_ids)?;
    Ok(CompressedUserState {
        user_id,
        e_comp: e_s.t_matmul(&c.w_comp)?,
        e_auxabsorb: c.w_decomp.matmul(&e_s)?.transpose(),
        short_ids: seq.short_ids.clone(),
        params_version: model.version.clone(),
    })
}

/// The most recent sequence of each user, in file order.
pub fn latest_sequences(examples: &[Example]) -> BTreeMap<u64, Arc<BehaviorSequence>> {
    let mut out = BTreeMap::new();
    for ex in examples {
        out.insert(ex.user_id, Arc::clone(&ex.seq));
    }
    out
}

/// Restricts `all` to `ids`, failing on the first id with no sequence.
pub fn select_users(
    all: &BTreeMap<u64, Arc<BehaviorSequence>>,
    ids: &[u64],
) -> Result<BTreeMap<u64, Arc<BehaviorSequence>>> {
    ids.iter()
        .map(|&id| {
            all.get(&id)
                .map(|s| (id, Arc::clone(s)))
                .ok_or(Error::UnknownUser(id))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub user_id: u64,
    pub candidates: Vec<u32>,
    /// Request-level side-feature ids, shared by every candidate.
    pub side: Vec<u32>,
}

impl ScoreRequest {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::Argument("request has no candidates".into()));
        }
        if let Some(&bad) = self
            .candidates
            .iter()
            .find(|&&c| c == 0 || c as usize >= vocab_size)
        {
            return Err(Error::Index {
                what: "item vocabulary",
                index: bad as usize,
                size: vocab_size,
            });
        }
        Ok(())
    }
}

fn finish<T: Scalar>(
    model: &InferenceModel<T>,
    long: Vec<Matrix<T>>,
    short_ids: &[u32],
    e_t: &Matrix<T>,
    side: &[u32],
) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let b = e_t.rows();
    let side_row = side_features(&model.weights.side_embedding, side, cfg.n_side)?;
    let e_short = match (&model.weights.short, cfg.uses_short_branch()) {
        (Some(_), true) => Some(lookup_sequence(&model.weights.embedding, short_ids)?),
        _ => None,
    };
    let mut rows = Vec::with_capacity(b);
    for (i, pooled) in long.iter().enumerate() {
        let t = e_t.row_slice(i, 1)?;
        let mut parts = vec![pooled.clone()];
        if let (Some(e_short), Some(w)) = (&e_short, &model.weights.short) {
            parts.push(din_attention(e_short, &t, w, cfg.leaky_slope)?);
        }
        parts.push(t);
        parts.push(side_row.clone());
        let refs: Vec<&Matrix<T>> = parts.iter().collect();
        rows.push(Matrix::hstack(&refs)?);
    }
    let refs: Vec<&Matrix<T>> = rows.iter().collect();
    let features = Matrix::vstack(&refs)?;
    let logits = head_logits(&features, &model.weights.head, cfg.leaky_slope)?;
    Ok(logits
        .data()
        .iter()
        .map(|&z| clamp_prob(sigmoid(z.as_f64())))
        .collect())
}

/// Scores a request from an in-memory state. Reads only `d×r` state and the
/// candidate rows of the embedding table.
pub fn score_state<T: Scalar>(
    request: &ScoreRequest,
    state: &CompressedUserState<T>,
    model: &InferenceModel<T>,
) -> Result<Vec<f64>> {
    if state.params_version != model.version {
        return Err(Error::StaleCache {
            cached: state.params_version.clone(),
            current: model.version.clone(),
        });
    }
    request.validate(model.config.vocab_size)?;
    let w = &model.weights.long;
    let user = AbsorbedUser::new(state, w)?;
    let e_t = lookup_sequence(&model.weights.embedding, &request.candidates)?;
    let long = (0..e_t.rows())
        .map(|i| user.attend(&e_t.row_slice(i, 1)?, w, model.config.leaky_slope))
        .collect::<Result<Vec<_>>>()?;
    finish(model, long, &state.short_ids, &e_t, &request.side)
}

/// Scores a request against a persisted store. Fails with a stale-cache
/// error if the store was built from another checkpoint and with a cache
/// miss if the user has no state.
pub fn score<T: Scalar>(
    request: &ScoreRequest,
    store: &StateStore,
    model: &InferenceModel<T>,
) -> Result<Vec<f64>> {
    let built_for = &store.manifest().params_version;
    if *built_for != model.version {
        return Err(Error::StaleCache {
            cached: built_for.clone(),
            current: model.version.clone(),
        });
    }
    let state = store.get(request.user_id)?;
    score_state(request, &state.cast::<T>(), model)
}

/// Baseline: full DIN attention over the raw length-`L` sequence with the
/// checkpoint's long-attention weights. Cost grows with `L`.
pub fn score_din_long<T: Scalar>(
    request: &ScoreRequest,
    seq: &BehaviorSequence,
    model: &InferenceModel<T>,
) -> Result<Vec<f64>> {
    request.validate(model.config.vocab_size)?;
    let e_s = lookup_sequence(&model.weights.embedding, &seq.long_ids)?;
    let e_t = lookup_sequence(&model.weights.embedding, &request.candidates)?;
    let w = &model.weights.long;
    let long = (0..e_t.rows())
        .map(|i| din_attention(&e_s, &e_t.row_slice(i, 1)?, w, model.config.leaky_slope))
        .collect::<Result<Vec<_>>>()?;
    finish(model, long, &seq.short_ids, &e_t, &request.side)
}
