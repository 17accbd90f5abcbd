use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BehaviorSequence, Example};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Knobs of the synthetic CTR generator.
///
/// Items belong to latent interest clusters. Each user has a few interests
/// and a history made of sessions, each session drawn from one interest.
/// A click is driven by a soft attention of the target's latent over the
/// history latents, so target attention is the right inductive bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub long_len: usize,
    pub short_len: usize,
    pub n_examples: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub noise: f64,
    pub temperature: f64,
    pub n_clusters: usize,
    pub interests_per_user: usize,
    pub side_vocab: usize,
    /// Chance that a history slot is a uniformly random item instead of one
    /// from the session's interest.
    pub explore_prob: f64,
    /// Affinity at which the click probability is one half.
    pub label_offset: f64,
    /// Inclusive bounds on the number of consecutive history items drawn
    /// from one interest.
    pub session_len: [usize; 2],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 500,
            n_items: 200,
            long_len: 200,
            short_len: 10,
            n_examples: 25_000,
            seed: 7,
            latent_dim: 8,
            noise: 0.1,
            temperature: 1.0,
            n_clusters: 10,
            interests_per_user: 2,
            side_vocab: 8,
            explore_prob: 0.03,
            label_offset: 0.6,
            session_len: [4, 24],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("long_len", self.long_len),
            ("n_examples", self.n_examples),
            ("latent_dim", self.latent_dim),
            ("n_clusters", self.n_clusters),
            ("interests_per_user", self.interests_per_user),
            ("side_vocab", self.side_vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Argument(format!("{name} must be positive")));
            }
        }
        if self.n_clusters > self.n_items {
            return Err(Error::Argument("n_clusters exceeds n_items".into()));
        }
        if self.interests_per_user > self.n_clusters {
            return Err(Error::Argument(
                "interests_per_user exceeds n_clusters".into(),
            ));
        }
        if self.short_len > self.long_len {
            return Err(Error::Argument("short_len exceeds long_len".into()));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::Argument(format!(
                "noise must be >= 0, got {}",
                self.noise
            )));
        }
        if !(0.0..=1.0).contains(&self.explore_prob) {
            return Err(Error::Argument(format!(
                "explore_prob must lie in [0, 1], got {}",
                self.explore_prob
            )));
        }
        if self.session_len[0] == 0 || self.session_len[0] > self.session_len[1] {
            return Err(Error::Argument(format!(
                "bad session_len {:?}",
                self.session_len
            )));
        }
        if !self.label_offset.is_finite() {
            return Err(Error::Argument("label_offset must be finite".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Argument("temperature must be positive".into()));
        }
        Ok(())
    }

    /// Item vocabulary including the padding id 0.
    pub fn vocab_size(&self) -> usize {
        self.n_items + 1
    }

    /// Side-feature vocabulary including the padding id 0.
    pub fn side_vocab_size(&self) -> usize {
        self.side_vocab + 1
    }
}

/// Hidden generator state sufficient to rebuild the label model.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Unit-norm item latents, one row per item id (row 0 is zero).
    pub item_latents: Matrix,
    pub item_cluster: Vec<usize>,
    pub user_interests: Vec<Vec<usize>>,
    pub sharpness: f64,
    pub scale: f64,
    pub offset: f64,
    pub temperature: f64,
}

impl GroundTruth {
    fn latent(&self, id: u32) -> &[f64] {
        self.item_latents.row(id as usize)
    }

    /// Softmax-attention-weighted similarity of the target to the history.
    pub fn affinity(&self, target: u32, history: &[u32]) -> f64 {
        if history.is_empty() {
            return 0.0;
        }
        let t = self.latent(target);
        let sims: Vec<f64> = history.iter().map(|&s| dot(t, self.latent(s))).collect();
        let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let mut acc = 0.0;
        for &s in &sims {
            let w = (self.sharpness * (s - max)).exp();
            z += w;
            acc += w * s;
        }
        acc / z
    }

    /// Noise-free click logit; the Bayes-optimal ranking score.
    pub fn logit(&self, example: &Example) -> f64 {
        let a = self.affinity(example.target, example.seq.long_history());
        self.scale * (a - self.offset) / self.temperature
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub examples: Vec<Example>,
    /// Per-user behavior sequence, indexed by user id.
    pub sequences: Vec<Arc<BehaviorSequence>>,
    pub truth: GroundTruth,
}

const ITEM_SPREAD: f64 = 0.35;

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Draws a dataset and its ground truth. A pure function of `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.latent_dim;

    let centers: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| unit_gaussian(&mut rng, k))
        .collect();

    let mut latents = Matrix::zeros(spec.vocab_size(), k);
    let mut item_cluster = vec![usize::MAX; spec.vocab_size()];
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); spec.n_clusters];
    for id in 1..=spec.n_items {
        let c = (id - 1) % spec.n_clusters;
        let noise = unit_gaussian(&mut rng, k);
        let mut v: Vec<f64> = centers[c]
            .iter()
            .zip(&noise)
            .map(|(a, b)| a + ITEM_SPREAD * b)
            .collect();
        normalize(&mut v);
        latents.row_mut(id).copy_from_slice(&v);
        item_cluster[id] = c;
        members[c].push(id as u32);
    }

    let all_clusters: Vec<usize> = (0..spec.n_clusters).collect();
    let mut user_interests = Vec::with_capacity(spec.n_users);
    let mut sequences = Vec::with_capacity(spec.n_users);
    for _ in 0..spec.n_users {
        let interests: Vec<usize> = all_clusters
            .choose_multiple(&mut rng, spec.interests_per_user)
            .copied()
            .collect();
        let min_len = (spec.long_len / 2).max(1);
        let len = rng.gen_range(min_len..=spec.long_len);
        let mut history = Vec::with_capacity(len);
        while history.len() < len {
            let c = interests[rng.gen_range(0..interests.len())];
            let session = rng.gen_range(spec.session_len[0]..=spec.session_len[1]);
            for _ in 0..session.min(len - history.len()) {
                let item = if rng.gen_bool(spec.explore_prob) {
                    rng.gen_range(1..=spec.n_items as u32)
                } else {
                    *members[c].choose(&mut rng).expect("clusters are non-empty")
                };
                history.push(item);
            }
        }
        let short = &history[history.len().saturating_sub(spec.short_len)..];
        sequences.push(Arc::new(BehaviorSequence::from_raw(
            &history,
            short,
            spec.long_len,
            spec.short_len,
        )));
        user_interests.push(interests);
    }

    let truth = GroundTruth {
        item_latents: latents,
        item_cluster,
        user_interests,
        sharpness: 6.0,
        scale: 16.0,
        offset: spec.label_offset,
        temperature: spec.temperature,
    };

    let mut examples = Vec::with_capacity(spec.n_examples);
    for _ in 0..spec.n_examples {
        let user = rng.gen_range(0..spec.n_users);
        let target = if rng.gen_bool(0.5) {
            let interests = &truth.user_interests[user];
            let c = interests[rng.gen_range(0..interests.len())];
            *members[c].choose(&mut rng).expect("clusters are non-empty")
        } else {
            rng.gen_range(1..=spec.n_items as u32)
        };
        let side = vec![rng.gen_range(1..=spec.side_vocab as u32)];
        let mut ex = Example {
            user_id: user as u64,
            target,
            label: 0,
            seq: Arc::clone(&sequences[user]),
            side,
        };
        let eps: f64 = rng.sample(StandardNormal);
        let p = crate::tape::sigmoid(truth.logit(&ex) + spec.noise * eps);
        ex.label = u8::from(rng.gen_bool(p.clamp(0.0, 1.0)));
        examples.push(ex);
    }

    Ok(SyntheticData {
        spec: spec.clone(),
        examples,
        sequences,
        truth,
    })
}
