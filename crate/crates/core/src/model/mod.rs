//! Model parameters, checkpoints, and the three attention routes:
//! DIN target attention over the raw sequence, the low-rank training path,
//! and the absorbed serving path.

pub mod attention;
mod checkpoint;
pub mod forward;
pub mod graph;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

pub use attention::{
    din_attention, din_score, lookup_sequence, lrea_attention_serve, lrea_attention_train,
    lrea_mixing, lrea_reconstruct, LreaTrainOutput,
};
pub use checkpoint::Checkpoint;
pub use forward::{forward_example, predict, ExampleOutput, InferenceModel, PROB_CLAMP};

/// Which attention runs over the long behavior sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Low-rank compressed attention with absorbable decompression.
    Lrea,
    /// Full DIN target attention over all `L` positions.
    Din,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: AttentionKind,
    /// Item vocabulary including padding id 0.
    pub vocab_size: usize,
    /// Side-feature vocabulary including padding id 0.
    pub side_vocab: usize,
    pub n_side: usize,
    pub long_len: usize,
    /// Short-term sequence capacity; 0 disables the short DIN branch.
    pub short_len: usize,
    pub rank: usize,
    pub dim: usize,
    pub att_hidden: usize,
    pub head_sizes: Vec<usize>,
    pub leaky_slope: f64,
    /// Standard deviation of both embedding tables at init.
    #[serde(default = "default_embedding_std")]
    pub embedding_std: f64,
    #[serde(default)]
    pub compression_init: CompressionInit,
}

fn default_embedding_std() -> f64 {
    0.01
}

/// Starting point for `W_Comp` and `W_Decomp`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionInit {
    /// `W_Comp ~ U[0, 1/√L]`, `W_Decomp ~ |N(0,1)|/√r`.
    #[default]
    Uniform,
    /// Position `l` belongs to slot `⌊l·r/L⌋`. `W_Comp` averages each slot's
    /// positions and `W_Decomp` copies the slot's score back to them, so the
    /// absorbed and unabsorbed paths agree exactly and `r = L` reproduces DIN.
    Windowed,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: AttentionKind::Lrea,
            vocab_size: 1001,
            side_vocab: 9,
            n_side: 1,
            long_len: 200,
            short_len: 10,
            rank: 128,
            dim: 16,
            att_hidden: 36,
            head_sizes: vec![512, 256, 128],
            leaky_slope: 0.01,
            embedding_std: default_embedding_std(),
            compression_init: CompressionInit::Uniform,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("side_vocab", self.side_vocab),
            ("long_len", self.long_len),
            ("rank", self.rank),
            ("dim", self.dim),
            ("att_hidden", self.att_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Argument(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Argument(
                "vocab_size must leave room for padding".into(),
            ));
        }
        if self.kind == AttentionKind::Lrea && self.rank > self.long_len {
            return Err(Error::Argument(format!(
                "rank {} exceeds sequence length {}",
                self.rank, self.long_len
            )));
        }
        if self.head_sizes.contains(&0) {
            return Err(Error::Argument("head layer sizes must be positive".into()));
        }
        if !(self.embedding_std > 0.0 && self.embedding_std.is_finite()) {
            return Err(Error::Argument(format!(
                "embedding_std must be positive, got {}",
                self.embedding_std
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Argument(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    pub fn uses_short_branch(&self) -> bool {
        self.short_len > 0
    }

    /// Width of the concatenated head input.
    pub fn head_input_dim(&self) -> usize {
        let blocks = 2 + usize::from(self.uses_short_branch()) + self.n_side;
        blocks * self.dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<M> {
    pub w1: M,
    pub w2: M,
    pub w3: M,
    pub w_o: M,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compression<M> {
    /// `L × r`.
    pub w_comp: M,
    /// `r × L`.
    pub w_decomp: M,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<M> {
    pub weight: M,
    pub bias: M,
}

/// Every trainable tensor, generic over how a tensor is held (owned matrix,
/// shared matrix, tape handle, gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<M> {
    pub embedding: M,
    pub side_embedding: M,
    pub compression: Option<Compression<M>>,
    pub long: AttentionWeights<M>,
    pub short: Option<AttentionWeights<M>>,
    pub head: Vec<Dense<M>>,
}

impl<M> AttentionWeights<M> {
    fn map<N>(&self, f: &mut impl FnMut(&M) -> N) -> AttentionWeights<N> {
        AttentionWeights {
            w1: f(&self.w1),
            w2: f(&self.w2),
            w3: f(&self.w3),
            w_o: f(&self.w_o),
        }
    }
}

fn push_attention<'a, M>(prefix: &str, a: &'a AttentionWeights<M>, out: &mut Vec<(String, &'a M)>) {
    out.push((format!("{prefix}.w1"), &a.w1));
    out.push((format!("{prefix}.w2"), &a.w2));
    out.push((format!("{prefix}.w3"), &a.w3));
    out.push((format!("{prefix}.w_o"), &a.w_o));
}

impl<M> Weights<M> {
    /// Applies `f` to every tensor in canonical order.
    pub fn map<N>(&self, mut f: impl FnMut(&M) -> N) -> Weights<N> {
        let embedding = f(&self.embedding);
        let side_embedding = f(&self.side_embedding);
        let compression = self.compression.as_ref().map(|c| Compression {
            w_comp: f(&c.w_comp),
            w_decomp: f(&c.w_decomp),
        });
        let long = self.long.map(&mut f);
        let short = self.short.as_ref().map(|s| s.map(&mut f));
        let head = self
            .head
            .iter()
            .map(|l| Dense {
                weight: f(&l.weight),
                bias: f(&l.bias),
            })
            .collect();
        Weights {
            embedding,
            side_embedding,
            compression,
            long,
            short,
            head,
        }
    }

    /// Tensors with stable names, in canonical order.
    pub fn named(&self) -> Vec<(String, &M)> {
        let mut out = vec![
            ("embedding".to_string(), &self.embedding),
            ("side_embedding".to_string(), &self.side_embedding),
        ];
        if let Some(c) = &self.compression {
            out.push(("w_comp".into(), &c.w_comp));
            out.push(("w_decomp".into(), &c.w_decomp));
        }
        push_attention("long", &self.long, &mut out);
        if let Some(s) = &self.short {
            push_attention("short", s, &mut out);
        }
        for (i, l) in self.head.iter().enumerate() {
            out.push((format!("head.{i}.weight"), &l.weight));
            out.push((format!("head.{i}.bias"), &l.bias));
        }
        out
    }

    /// Mutable tensors in the same order as [`Weights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut M> {
        let mut out = vec![&mut self.embedding, &mut self.side_embedding];
        if let Some(c) = &mut self.compression {
            out.push(&mut c.w_comp);
            out.push(&mut c.w_decomp);
        }
        for a in std::iter::once(&mut self.long).chain(self.short.as_mut()) {
            out.push(&mut a.w1);
            out.push(&mut a.w2);
            out.push(&mut a.w3);
            out.push(&mut a.w_o);
        }
        for l in &mut self.head {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&M> {
        self.named().into_iter().map(|(_, m)| m).collect()
    }

    /// Rebuilds a weight set with the same layout as `self` from a flat list
    /// in canonical order.
    pub fn with_flat<N>(&self, flat: Vec<N>) -> Result<Weights<N>> {
        let expected = self.named().len();
        if flat.len() != expected {
            return Err(Error::Argument(format!(
                "expected {expected} tensors, got {}",
                flat.len()
            )));
        }
        let mut it = flat.into_iter();
        Ok(self.map(|_| it.next().expect("length checked")))
    }
}

/// A held matrix of a fixed element type.
pub trait Tensor {
    type Elem: Scalar;
    fn tensor(&self) -> &Matrix<Self::Elem>;
}

impl<T: Scalar> Tensor for Matrix<T> {
    type Elem = T;
    fn tensor(&self) -> &Matrix<T> {
        self
    }
}

impl<T: Scalar> Tensor for Arc<Matrix<T>> {
    type Elem = T;
    fn tensor(&self) -> &Matrix<T> {
        self
    }
}

impl<M: Tensor> Weights<M> {
    pub fn to_owned_matrices(&self) -> Weights<Matrix<M::Elem>> {
        self.map(|m| m.tensor().clone())
    }

    pub fn cast<U: Scalar>(&self) -> Weights<Matrix<U>> {
        self.map(|m| m.tensor().cast::<U>())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|m| m.tensor().len()).sum()
    }
}

impl<T: Scalar> AsRef<Matrix<T>> for Matrix<T> {
    fn as_ref(&self) -> &Matrix<T> {
        self
    }
}

/// The full trainable state of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct LreaParams {
    pub config: ModelConfig,
    pub weights: Weights<Arc<Matrix>>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

fn attention_init(rng: &mut ChaCha8Rng, d: usize, h: usize) -> AttentionWeights<Arc<Matrix>> {
    let s = 1.0 / (d as f64).sqrt();
    AttentionWeights {
        w1: Arc::new(gaussian(rng, d, h, s)),
        w2: Arc::new(gaussian(rng, d, h, s)),
        w3: Arc::new(gaussian(rng, d, h, s)),
        w_o: Arc::new(gaussian(rng, h, 1, 1.0 / (h as f64).sqrt())),
    }
}

/// Non-negative compression init of the requested kind.
pub fn compression_init(
    rng: &mut ChaCha8Rng,
    kind: CompressionInit,
    long_len: usize,
    rank: usize,
) -> Compression<Arc<Matrix>> {
    let (w_comp, w_decomp) = match kind {
        CompressionInit::Uniform => {
            let hi = 1.0 / (long_len as f64).sqrt();
            let w_comp = Matrix::from_fn(long_len, rank, |_, _| rng.gen_range(0.0..hi));
            let s = 1.0 / (rank as f64).sqrt();
            (
                w_comp,
                gaussian(rng, rank, long_len, 1.0).map(|v| v.abs() * s),
            )
        }
        CompressionInit::Windowed => {
            let slot = |l: usize| l * rank / long_len;
            let mut sizes = vec![0usize; rank];
            for l in 0..long_len {
                sizes[slot(l)] += 1;
            }
            let w_comp = Matrix::from_fn(long_len, rank, |l, j| {
                if slot(l) == j {
                    1.0 / sizes[j] as f64
                } else {
                    0.0
                }
            });
            let w_decomp =
                Matrix::from_fn(rank, long_len, |j, l| f64::from(u8::from(slot(l) == j)));
            (w_comp, w_decomp)
        }
    };
    Compression {
        w_comp: Arc::new(w_comp),
        w_decomp: Arc::new(w_decomp),
    }
}

impl LreaParams {
    /// Seeded initialization. Row 0 of both embedding tables is zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let mut embedding = gaussian(&mut rng, config.vocab_size, d, config.embedding_std);
        embedding.row_mut(0).fill(0.0);
        let mut side_embedding = gaussian(&mut rng, config.side_vocab, d, config.embedding_std);
        side_embedding.row_mut(0).fill(0.0);

        let compression = match config.kind {
            AttentionKind::Lrea => Some(compression_init(
                &mut rng,
                config.compression_init,
                config.long_len,
                config.rank,
            )),
            AttentionKind::Din => None,
        };
        let long = attention_init(&mut rng, d, config.att_hidden);
        let short = config
            .uses_short_branch()
            .then(|| attention_init(&mut rng, d, config.att_hidden));

        let mut head = Vec::with_capacity(config.head_sizes.len() + 1);
        let mut fan_in = config.head_input_dim();
        for &width in config.head_sizes.iter().chain(std::iter::once(&1)) {
            let std = if width == 1 && head.len() == config.head_sizes.len() {
                (1.0 / fan_in as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            head.push(Dense {
                weight: Arc::new(gaussian(&mut rng, fan_in, width, std)),
                bias: Arc::new(Matrix::zeros(1, width)),
            });
            fan_in = width;
        }

        Ok(Self {
            config,
            weights: Weights {
                embedding: Arc::new(embedding),
                side_embedding: Arc::new(side_embedding),
                compression,
                long,
                short,
                head,
            },
        })
    }

    /// Checks every tensor shape against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let expect = |name: &str, m: &Matrix, shape: (usize, usize)| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::Argument(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            Ok(())
        };
        let w = &self.weights;
        expect("embedding", &w.embedding, (c.vocab_size, c.dim))?;
        expect("side_embedding", &w.side_embedding, (c.side_vocab, c.dim))?;
        match (&w.compression, c.kind) {
            (Some(comp), AttentionKind::Lrea) => {
                expect("w_comp", &comp.w_comp, (c.long_len, c.rank))?;
                expect("w_decomp", &comp.w_decomp, (c.rank, c.long_len))?;
            }
            (None, AttentionKind::Din) => {}
            _ => {
                return Err(Error::Argument(
                    "compression tensors do not match model kind".into(),
                ))
            }
        }
        let check_att = |prefix: &str, a: &AttentionWeights<Arc<Matrix>>| -> Result<()> {
            expect(&format!("{prefix}.w1"), &a.w1, (c.dim, c.att_hidden))?;
            expect(&format!("{prefix}.w2"), &a.w2, (c.dim, c.att_hidden))?;
            expect(&format!("{prefix}.w3"), &a.w3, (c.dim, c.att_hidden))?;
            expect(&format!("{prefix}.w_o"), &a.w_o, (c.att_hidden, 1))
        };
        check_att("long", &w.long)?;
        match (&w.short, c.uses_short_branch()) {
            (Some(s), true) => check_att("short", s)?,
            (None, false) => {}
            _ => {
                return Err(Error::Argument(
                    "short branch does not match short_len".into(),
                ))
            }
        }
        if w.head.len() != c.head_sizes.len() + 1 {
            return Err(Error::Argument(
                "head depth does not match head_sizes".into(),
            ));
        }
        let mut fan_in = c.head_input_dim();
        for (i, (layer, &width)) in w
            .head
            .iter()
            .zip(c.head_sizes.iter().chain(std::iter::once(&1)))
            .enumerate()
        {
            expect(&format!("head.{i}.weight"), &layer.weight, (fan_in, width))?;
            expect(&format!("head.{i}.bias"), &layer.bias, (1, width))?;
            fan_in = width;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: AttentionKind) -> ModelConfig {
        ModelConfig {
            kind,
            vocab_size: 20,
            side_vocab: 4,
            n_side: 1,
            long_len: 8,
            short_len: 3,
            rank: 3,
            dim: 4,
            att_hidden: 5,
            head_sizes: vec![6, 4],
            leaky_slope: 0.01,
            embedding_std: 0.1,
            compression_init: CompressionInit::Uniform,
        }
    }

    #[test]
    fn init_is_seeded_and_shape_consistent() {
        let a = LreaParams::init(tiny(AttentionKind::Lrea), 3).unwrap();
        let b = LreaParams::init(tiny(AttentionKind::Lrea), 3).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!(a.weights.embedding.row(0).iter().all(|&v| v == 0.0));
        let comp = a.weights.compression.as_ref().unwrap();
        assert!(comp.w_comp.data().iter().all(|&v| v >= 0.0));
        assert!(comp.w_decomp.data().iter().all(|&v| v >= 0.0));
        let din = LreaParams::init(tiny(AttentionKind::Din), 3).unwrap();
        din.validate().unwrap();
        assert!(din.weights.compression.is_none());
    }

    #[test]
    fn canonical_orders_agree() {
        let mut p = LreaParams::init(tiny(AttentionKind::Lrea), 1).unwrap();
        let names: Vec<String> = p.weights.named().into_iter().map(|(n, _)| n).collect();
        let mut counter = 0usize;
        let indexed = p.weights.map(|_| {
            counter += 1;
            counter - 1
        });
        assert_eq!(
            indexed.tensors().into_iter().copied().collect::<Vec<_>>(),
            (0..names.len()).collect::<Vec<_>>()
        );
        let shapes: Vec<_> = p.weights.tensors().iter().map(|m| m.shape()).collect();
        let mut_shapes: Vec<_> = p.weights.tensors_mut().iter().map(|m| m.shape()).collect();
        assert_eq!(shapes, mut_shapes);
        assert_eq!(names[0], "embedding");
        assert!(names.contains(&"w_decomp".to_string()));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(AttentionKind::Lrea);
        c.rank = 9;
        assert!(c.validate().is_err());
        c.kind = AttentionKind::Din;
        assert!(c.validate().is_ok());
        let mut c = tiny(AttentionKind::Lrea);
        c.leaky_slope = 1.5;
        assert!(c.validate().is_err());
        let c = ModelConfig {
            embedding_std: 0.0,
            ..tiny(AttentionKind::Lrea)
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn windowed_init_partitions_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = compression_init(&mut rng, CompressionInit::Windowed, 10, 3);
        let product = c.w_comp.matmul(&c.w_decomp).unwrap();
        // Each position's slot averages its window, so columns of W_Comp sum to one
        // and every position is decompressed from exactly one slot.
        for j in 0..3 {
            let col: f64 = (0..10).map(|l| c.w_comp.get(l, j)).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
        for l in 0..10 {
            let ones = (0..3).filter(|&j| c.w_decomp.get(j, l) == 1.0).count();
            assert_eq!(ones, 1);
            assert!(product.row(l).iter().all(|&v| v >= 0.0));
        }
        let full = compression_init(&mut rng, CompressionInit::Windowed, 6, 6);
        assert_eq!(*full.w_comp, Matrix::identity(6));
        assert_eq!(*full.w_decomp, Matrix::identity(6));
    }

    #[test]
    fn init_fields_default_when_absent() {
        let mut v = serde_json::to_value(tiny(AttentionKind::Lrea)).unwrap();
        let obj = v.as_object_mut().unwrap();
        obj.remove("embedding_std");
        obj.remove("compression_init");
        let back: ModelConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back.embedding_std, 0.01);
        assert_eq!(back.compression_init, CompressionInit::Uniform);
    }
}
