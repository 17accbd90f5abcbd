//! Run configuration: defaults, then an optional TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lrea::data::{Schema, SyntheticSpec};
use lrea::model::CompressionInit;
use lrea::serving::bench::BenchConfig;
use lrea::{AttentionKind, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub request: Option<PathBuf>,
}

/// Model shape. Vocabulary and sequence capacities come from the data
/// section so a checkpoint always matches the files it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: AttentionKind,
    pub rank: usize,
    pub dim: usize,
    pub att_hidden: usize,
    pub head_sizes: Vec<usize>,
    pub leaky_slope: f64,
    pub embedding_std: f64,
    pub compression_init: CompressionInit,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            kind: m.kind,
            rank: 32,
            dim: m.dim,
            att_hidden: m.att_hidden,
            head_sizes: m.head_sizes,
            leaky_slope: m.leaky_slope,
            embedding_std: m.embedding_std,
            compression_init: CompressionInit::Windowed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Applied to the generator, the trainer and the bench when set.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// Float width of the serving path: 32 or 64.
    pub precision: u8,
    /// Leading share of the data used for training; the rest is held out.
    pub train_fraction: f64,
    pub paths: Paths,
    pub data: SyntheticSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            threads: None,
            precision: 32,
            train_fraction: 0.8,
            paths: Paths::default(),
            data: SyntheticSpec::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Command-line values that override the file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub paths: Paths,
    pub long_len: Vec<usize>,
    pub rank: Option<usize>,
    pub dim: Option<usize>,
    pub kind: Option<AttentionKind>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub precision: Option<u8>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Layers `o` on top and propagates shared knobs into every section.
    pub fn resolve(mut self, o: Overrides, bench: bool) -> Result<Self> {
        let p = &mut self.paths;
        for (slot, v) in [
            (&mut p.data, o.paths.data),
            (&mut p.checkpoint, o.paths.checkpoint),
            (&mut p.store, o.paths.store),
            (&mut p.report, o.paths.report),
            (&mut p.request, o.paths.request),
        ] {
            if v.is_some() {
                *slot = v;
            }
        }
        match (o.long_len.as_slice(), bench) {
            ([], _) => {}
            (lens, true) => self.bench.lens = lens.to_vec(),
            ([l], false) => self.data.long_len = *l,
            (_, false) => bail!("--L takes a single length outside bench"),
        }
        if let Some(r) = o.rank {
            self.model.rank = r;
            self.bench.rank = r;
        }
        if let Some(d) = o.dim {
            self.model.dim = d;
            self.bench.dim = d;
        }
        if let Some(k) = o.kind {
            self.model.kind = k;
        }
        if let Some(v) = o.lambda {
            self.train.lambda = v;
        }
        if let Some(v) = o.lr {
            self.train.learning_rate = v;
        }
        if let Some(v) = o.batch {
            self.train.batch_size = v;
            self.bench.batch = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        self.seed = o.seed.or(self.seed);
        self.threads = o.threads.or(self.threads);
        self.precision = o.precision.unwrap_or(self.precision);

        if let Some(s) = self.seed {
            self.data.seed = s;
            self.train.seed = s;
            self.bench.seed = s;
        }
        self.bench.precision = self.precision;
        if self.precision != 32 && self.precision != 64 {
            bail!("precision must be 32 or 64, got {}", self.precision);
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            bail!(
                "train_fraction must lie in (0, 1], got {}",
                self.train_fraction
            );
        }
        if self.data.short_len > self.data.long_len {
            self.data.short_len = self.data.long_len;
        }
        Ok(self)
    }

    pub fn schema(&self) -> Schema {
        Schema {
            long_len: self.data.long_len,
            short_len: self.data.short_len,
            vocab_size: self.data.vocab_size(),
            side_vocab: self.data.side_vocab_size(),
            n_side: 1,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            kind: m.kind,
            vocab_size: self.data.vocab_size(),
            side_vocab: self.data.side_vocab_size(),
            n_side: 1,
            long_len: self.data.long_len,
            short_len: self.data.short_len,
            rank: m.rank,
            dim: m.dim,
            att_hidden: m.att_hidden,
            head_sizes: m.head_sizes.clone(),
            leaky_slope: m.leaky_slope,
            embedding_std: m.embedding_std,
            compression_init: m.compression_init,
        }
    }

    pub fn n_train(&self, total: usize) -> usize {
        (total as f64 * self.train_fraction).round() as usize
    }
}

/// The path stored in `slot`, or an error naming the missing flag.
pub fn required<'a>(slot: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    slot.as_deref().with_context(|| format!("missing --{flag}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_and_seed_propagates() {
        let file: RunConfig =
            toml::from_str("seed = 3\n[train]\nepochs = 9\nlambda = 0.5\n").unwrap();
        let o = Overrides {
            epochs: Some(2),
            seed: Some(11),
            ..Overrides::default()
        };
        let c = file.resolve(o, false).unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.lambda, 0.5);
        assert_eq!((c.data.seed, c.train.seed, c.bench.seed), (11, 11, 11));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("epochz = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("[model]\nrnak = 3\n").is_err());
    }

    #[test]
    fn length_lists_only_for_bench() {
        let o = || Overrides {
            long_len: vec![64, 128],
            ..Overrides::default()
        };
        assert!(RunConfig::default().resolve(o(), false).is_err());
        let c = RunConfig::default().resolve(o(), true).unwrap();
        assert_eq!(c.bench.lens, vec![64, 128]);
    }
}
