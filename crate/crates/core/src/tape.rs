//! Reverse-mode differentiation over a per-evaluation tape.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! [`Tape::backward`] walks the record in reverse exactly once and returns
//! the gradient of a scalar output with respect to every recorded value.
//! Leaves hold `Arc`ed matrices so binding a large parameter costs a
//! refcount bump, not a copy.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    BroadcastRows(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    NegPartSqNorm(Var),
    Sum(Var),
    HStack(Vec<Var>),
    VStack(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// Mean binary cross-entropy of a column of probabilities, with the
    /// probabilities clamped to `[clamp, 1 - clamp]`.
    BinaryCrossEntropy {
        probs: Var,
        labels: Vec<f64>,
        clamp: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Matrix>,
    op: Op,
}

/// Ordered record of the operations of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every value on a tape.
///
/// Slots start at zero; a slot that received no contribution reads as zero.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    /// Takes the gradient for `v`, materializing zeros when nothing flowed.
    pub fn take(&mut self, v: Var) -> Matrix {
        let (r, c) = self.shapes[v.0];
        self.slots[v.0]
            .take()
            .unwrap_or_else(|| Matrix::zeros(r, c))
    }

    pub fn wrt(&self, v: Var) -> Matrix {
        let (r, c) = self.shapes[v.0];
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(r, c))
    }

    fn accumulate(&mut self, v: Var, delta: Matrix) {
        match &mut self.slots[v.0] {
            Some(g) => g
                .add_assign(&delta)
                .expect("gradient shape matches its value"),
            slot @ None => *slot = Some(delta),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&mut self, value: Arc<Matrix>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: impl Into<Arc<Matrix>>) -> Var {
        self.push_arc(value.into(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push(out, Op::Scale(a, k))
    }

    /// Replicates a `1×n` value into `rows×n`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let out = self.value(a).broadcast_rows(rows)?;
        Ok(self.push(out, Op::BroadcastRows(a)))
    }

    /// Leaky ReLU; the derivative at exactly zero is taken as 1.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).leaky_relu(slope);
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// `Σ max(0, -aᵢⱼ)²` as a 1×1 value.
    pub fn neg_part_sq_norm(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).neg_part_sq_norm());
        self.push(out, Op::NegPartSqNorm(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::hstack(&vals)?;
        Ok(self.push(out, Op::HStack(parts.to_vec())))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vstack(&vals)?;
        Ok(self.push(out, Op::VStack(parts.to_vec())))
    }

    /// Row lookup; the backward pass scatter-adds into the source rows.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).gather_rows(ids)?;
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec())))
    }

    /// Mean binary cross-entropy of an `N×1` column of probabilities against
    /// 0/1 labels. Probabilities are clamped to `[clamp, 1 - clamp]`; the
    /// gradient is zero where the clamp is active.
    pub fn binary_cross_entropy(&mut self, probs: Var, labels: &[f64], clamp: f64) -> Result<Var> {
        let p = self.value(probs);
        if p.cols() != 1 || p.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "binary_cross_entropy",
                lhs: p.shape(),
                rhs: (labels.len(), 1),
            });
        }
        let loss = bce_mean(p.data(), labels, clamp);
        let out = Matrix::scalar(loss);
        Ok(self.push(
            out,
            Op::BinaryCrossEntropy {
                probs,
                labels: labels.to_vec(),
                clamp,
            },
        ))
    }

    /// Reverse pass from a 1×1 output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                lhs: out_val.shape(),
                rhs: (1, 1),
            });
        }
        let mut grads = Gradients {
            slots: vec![None; self.nodes.len()],
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        };
        grads.slots[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(upstream) = grads.slots[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    grads.accumulate(*a, upstream.matmul_t(bv)?);
                    grads.accumulate(*b, av.t_matmul(&upstream)?);
                }
                Op::Transpose(a) => grads.accumulate(*a, upstream.transpose()),
                Op::Add(a, b) => {
                    grads.accumulate(*b, upstream.clone());
                    grads.accumulate(*a, upstream.clone());
                }
                Op::Hadamard(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    grads.accumulate(*a, upstream.hadamard(bv)?);
                    grads.accumulate(*b, upstream.hadamard(av)?);
                }
                Op::Scale(a, k) => grads.accumulate(*a, upstream.scale(*k)),
                Op::BroadcastRows(a) => {
                    let mut acc = vec![0.0; upstream.cols()];
                    for r in 0..upstream.rows() {
                        for (s, &u) in acc.iter_mut().zip(upstream.row(r)) {
                            *s += u;
                        }
                    }
                    grads.accumulate(*a, Matrix::row_vector(acc)?);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let g = upstream.zip_map(x, "leaky_relu_grad", |u, x| {
                        if x >= 0.0 {
                            u
                        } else {
                            u * slope
                        }
                    })?;
                    grads.accumulate(*a, g);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let g = upstream.zip_map(y, "sigmoid_grad", |u, y| u * y * (1.0 - y))?;
                    grads.accumulate(*a, g);
                }
                Op::NegPartSqNorm(a) => {
                    let u = upstream.item()?;
                    let g = self
                        .value(*a)
                        .map(|x| if x < 0.0 { 2.0 * x * u } else { 0.0 });
                    grads.accumulate(*a, g);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    grads.accumulate(*a, Matrix::filled(r, c, upstream.item()?));
                }
                Op::HStack(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        grads.accumulate(p, upstream.col_slice(start, w)?);
                        start += w;
                    }
                }
                Op::VStack(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        grads.accumulate(p, upstream.row_slice(start, h)?);
                        start += h;
                    }
                }
                Op::GatherRows(table, ids) => {
                    let (r, c) = self.shape(*table);
                    let slot = grads.slots[table.0].get_or_insert_with(|| Matrix::zeros(r, c));
                    for (i, &id) in ids.iter().enumerate() {
                        for (dst, &src) in slot.row_mut(id).iter_mut().zip(upstream.row(i)) {
                            *dst += src;
                        }
                    }
                }
                Op::BinaryCrossEntropy {
                    probs,
                    labels,
                    clamp,
                } => {
                    let u = upstream.item()?;
                    let p = self.value(*probs);
                    let n = labels.len() as f64;
                    let lo = *clamp;
                    let hi = 1.0 - clamp;
                    let g: Vec<f64> = p
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&p, &y)| {
                            if p < lo || p > hi {
                                0.0
                            } else {
                                -u * (y / p - (1.0 - y) / (1.0 - p)) / n
                            }
                        })
                        .collect();
                    grads.accumulate(*probs, Matrix::column_vector(g)?);
                }
            }
            grads.slots[idx] = Some(upstream);
        }
        Ok(grads)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_mean(probs: &[f64], labels: &[f64], clamp: f64) -> f64 {
    let n = labels.len() as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(clamp, 1.0 - clamp);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}
