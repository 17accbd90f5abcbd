//! Training records, synthetic generation with known ground truth, and the
//! tab-separated behavior-log format.

mod synthetic;
mod tsv;

use std::sync::Arc;

pub use synthetic::{generate, GroundTruth, SyntheticData, SyntheticSpec};
pub use tsv::{load, parse_line, write, Schema};

/// A user's behavior history, oldest first, left-padded with id 0 so the
/// most recent item always sits in the last slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BehaviorSequence {
    pub long_ids: Vec<u32>,
    pub long_len: usize,
    pub short_ids: Vec<u32>,
    pub short_len: usize,
}

impl BehaviorSequence {
    /// Keeps the most recent `long_cap` / `short_cap` items of each raw list
    /// and pads to capacity.
    pub fn from_raw(long: &[u32], short: &[u32], long_cap: usize, short_cap: usize) -> Self {
        let (long_ids, long_len) = suffix_padded(long, long_cap);
        let (short_ids, short_len) = suffix_padded(short, short_cap);
        Self {
            long_ids,
            long_len,
            short_ids,
            short_len,
        }
    }

    /// The unpadded long history.
    pub fn long_history(&self) -> &[u32] {
        &self.long_ids[self.long_ids.len() - self.long_len..]
    }

    pub fn short_history(&self) -> &[u32] {
        &self.short_ids[self.short_ids.len() - self.short_len..]
    }
}

fn suffix_padded(raw: &[u32], cap: usize) -> (Vec<u32>, usize) {
    let keep = raw.len().min(cap);
    let mut ids = vec![0; cap - keep];
    ids.extend_from_slice(&raw[raw.len() - keep..]);
    (ids, keep)
}

/// One labeled impression.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user_id: u64,
    pub target: u32,
    pub label: u8,
    pub seq: Arc<BehaviorSequence>,
    pub side: Vec<u32>,
}

impl Example {
    pub fn label_f64(&self) -> f64 {
        f64::from(self.label)
    }
}

/// Splits off the first `n_train` examples as the training set.
pub fn split(mut examples: Vec<Example>, n_train: usize) -> (Vec<Example>, Vec<Example>) {
    let n = n_train.min(examples.len());
    let test = examples.split_off(n);
    (examples, test)
}
