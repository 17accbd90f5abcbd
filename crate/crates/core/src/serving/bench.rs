//! Latency comparison of the cached low-rank serve path against DIN over the
//! raw sequence, across sequence lengths and candidate counts.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{compress_user, score_din_long, score_state, ScoreRequest};
use crate::data::BehaviorSequence;
use crate::error::{Error, Result};
use crate::matrix::Scalar;
use crate::model::{AttentionKind, Checkpoint, LreaParams, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub lens: Vec<usize>,
    /// Base candidate count; every length is also timed at twice this.
    pub batch: usize,
    pub rank: usize,
    pub dim: usize,
    pub att_hidden: usize,
    pub head_sizes: Vec<usize>,
    pub short_len: usize,
    pub vocab_size: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    /// 32 or 64.
    pub precision: u8,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lens: vec![128, 1024, 8192],
            batch: 32,
            rank: 32,
            dim: 16,
            att_hidden: 36,
            head_sizes: vec![512, 256, 128],
            short_len: 10,
            vocab_size: 10_001,
            reps: 100,
            warmup: 10,
            seed: 7,
            precision: 32,
        }
    }
}

/// Timings in milliseconds. `medians_ms` and `p90_ms` are keyed by path
/// (`lrea_b<B>` / `din_b<B>`) then by sequence length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub medians_ms: BTreeMap<String, BTreeMap<usize, f64>>,
    pub p90_ms: BTreeMap<String, BTreeMap<usize, f64>>,
    /// Per-user state materialization time by sequence length.
    pub precompute_ms: BTreeMap<usize, f64>,
}

impl BenchReport {
    pub fn median(&self, path: &str, batch: usize, len: usize) -> Option<f64> {
        self.medians_ms
            .get(&format!("{path}_b{batch}"))?
            .get(&len)
            .copied()
    }
}

/// Median and 90th percentile of `samples` (sorted in place).
pub fn summarize(samples: &mut [f64]) -> (f64, f64) {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    let p90 = samples[((n as f64 * 0.9).ceil() as usize).clamp(1, n) - 1];
    (median, p90)
}

fn time_ms(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        f()?;
    }
    let mut out = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        out.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(out)
}

pub fn run(config: &BenchConfig) -> Result<BenchReport> {
    match config.precision {
        32 => run_at::<f32>(config),
        64 => run_at::<f64>(config),
        p => Err(Error::Argument(format!(
            "precision must be 32 or 64, got {p}"
        ))),
    }
}

fn run_at<T: Scalar>(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps == 0 || cfg.batch == 0 || cfg.lens.is_empty() {
        return Err(Error::Argument(
            "bench needs reps, batch and lengths".into(),
        ));
    }
    let mut report = BenchReport {
        config: cfg.clone(),
        medians_ms: BTreeMap::new(),
        p90_ms: BTreeMap::new(),
        precompute_ms: BTreeMap::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let item = |rng: &mut ChaCha8Rng| rng.gen_range(1..cfg.vocab_size as u32);

    for &len in &cfg.lens {
        let model_cfg = ModelConfig {
            kind: AttentionKind::Lrea,
            vocab_size: cfg.vocab_size,
            side_vocab: 9,
            n_side: 1,
            long_len: len,
            short_len: cfg.short_len,
            rank: cfg.rank.min(len),
            dim: cfg.dim,
            att_hidden: cfg.att_hidden,
            head_sizes: cfg.head_sizes.clone(),
            ..ModelConfig::default()
        };
        let ckpt = Checkpoint::new(LreaParams::init(model_cfg, cfg.seed)?)?;
        let model = ckpt.inference::<T>();
        let history: Vec<u32> = (0..len).map(|_| item(&mut rng)).collect();
        let short = &history[len.saturating_sub(cfg.short_len)..];
        let seq = BehaviorSequence::from_raw(&history, short, len, cfg.short_len);

        let mut pre = time_ms(cfg.reps.div_ceil(10).max(5), 1, || {
            black_box(compress_user(0, &seq, &model)?);
            Ok(())
        })?;
        report.precompute_ms.insert(len, summarize(&mut pre).0);
        let state = compress_user(0, &seq, &model)?;

        for b in [cfg.batch, 2 * cfg.batch] {
            let request = ScoreRequest {
                user_id: 0,
                candidates: (0..b).map(|_| item(&mut rng)).collect(),
                side: vec![1],
            };
            let mut lrea = time_ms(cfg.reps, cfg.warmup, || {
                black_box(score_state(&request, &state, &model)?);
                Ok(())
            })?;
            let mut din = time_ms(cfg.reps, cfg.warmup, || {
                black_box(score_din_long(&request, &seq, &model)?);
                Ok(())
            })?;
            for (path, samples) in [("lrea", &mut lrea), ("din", &mut din)] {
                let (m, p) = summarize(samples);
                let key = format!("{path}_b{b}");
                report
                    .medians_ms
                    .entry(key.clone())
                    .or_default()
                    .insert(len, m);
                report.p90_ms.entry(key).or_default().insert(len, p);
            }
        }
    }
    Ok(report)
}
