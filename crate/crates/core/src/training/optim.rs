//! Adagrad with dense per-parameter accumulators.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::Weights;

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    pub acc: Weights<Matrix>,
    pub eps: f64,
}

impl AdagradState {
    /// Zero accumulators shaped like `params`.
    pub fn new(params: &Weights<Arc<Matrix>>, eps: f64) -> Self {
        Self {
            acc: params.map(|m| Matrix::zeros(m.rows(), m.cols())),
            eps,
        }
    }

    /// `acc += g²; θ -= lr·g / (√acc + ε)`, then re-zeroes the padding row of
    /// both embedding tables.
    pub fn step(
        &mut self,
        params: &mut Weights<Arc<Matrix>>,
        grads: &Weights<Matrix>,
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        let eps = self.eps;
        let ps = params.tensors_mut();
        let gs = grads.tensors();
        let accs = self.acc.tensors_mut();
        if ps.len() != gs.len() || ps.len() != accs.len() {
            return Err(Error::Argument(
                "parameter, gradient and state layouts differ".into(),
            ));
        }
        for ((p, g), a) in ps.into_iter().zip(gs).zip(accs) {
            if p.shape() != g.shape() || p.shape() != a.shape() {
                return Err(Error::Dimension {
                    op: "adagrad step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            let p = Arc::make_mut(p);
            for ((theta, &gi), acc) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(a.data_mut().iter_mut())
            {
                if gi == 0.0 {
                    continue;
                }
                *acc += gi * gi;
                *theta -= lr * gi / (acc.sqrt() + eps);
            }
        }
        Arc::make_mut(&mut params.embedding).row_mut(0).fill(0.0);
        Arc::make_mut(&mut params.side_embedding)
            .row_mut(0)
            .fill(0.0);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LreaParams, ModelConfig};
    use proptest::prelude::*;

    fn tiny() -> LreaParams {
        LreaParams::init(
            ModelConfig {
                vocab_size: 10,
                side_vocab: 3,
                long_len: 4,
                short_len: 0,
                rank: 2,
                dim: 3,
                att_hidden: 2,
                head_sizes: vec![],
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap()
    }

    fn with_grad(p: &LreaParams, value: f64) -> Weights<Matrix> {
        p.weights.map(|m| Matrix::filled(m.rows(), m.cols(), value))
    }

    #[test]
    fn hand_evaluated_step() {
        let mut p = tiny();
        Arc::make_mut(&mut p.weights.long.w_o).data_mut()[0] = 1.0;
        let mut st = AdagradState::new(&p.weights, DEFAULT_EPS);
        let g = with_grad(&p, 0.5);
        st.step(&mut p.weights, &g, 0.1).unwrap();
        assert_eq!(st.acc.long.w_o.data()[0], 0.25);
        assert!((p.weights.long.w_o.data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = tiny();
        let before = p.clone();
        let mut st = AdagradState::new(&p.weights, DEFAULT_EPS);
        let g = with_grad(&p, 0.0);
        st.step(&mut p.weights, &g, 0.1).unwrap();
        assert_eq!(p, before);
        assert!(st.acc.tensors().iter().all(|a| a.sum() == 0.0));
    }

    #[test]
    fn repeated_steps_shrink() {
        let mut p = tiny();
        let mut st = AdagradState::new(&p.weights, DEFAULT_EPS);
        let g = with_grad(&p, 0.3);
        let x0 = p.weights.long.w1.data()[0];
        st.step(&mut p.weights, &g, 0.1).unwrap();
        let x1 = p.weights.long.w1.data()[0];
        st.step(&mut p.weights, &g, 0.1).unwrap();
        let x2 = p.weights.long.w1.data()[0];
        assert!((x2 - x1).abs() < (x1 - x0).abs());
    }

    #[test]
    fn padding_rows_stay_zero() {
        let mut p = tiny();
        let mut st = AdagradState::new(&p.weights, DEFAULT_EPS);
        let g = with_grad(&p, 1.0);
        st.step(&mut p.weights, &g, 0.1).unwrap();
        assert!(p.weights.embedding.row(0).iter().all(|&v| v == 0.0));
        assert!(p.weights.side_embedding.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = tiny();
        let mut st = AdagradState::new(&p.weights, DEFAULT_EPS);
        let mut g = with_grad(&p, 1.0);
        g.embedding = Matrix::zeros(2, 2);
        assert!(matches!(
            st.step(&mut p.weights, &g, 0.1),
            Err(Error::Dimension { .. })
        ));
    }

    proptest! {
        #[test]
        fn accumulators_never_decrease(gs in prop::collection::vec(-3.0f64..3.0, 1..8)) {
            let mut p = tiny();
            let mut st = AdagradState::new(&p.weights, DEFAULT_EPS);
            let mut prev = st.acc.clone();
            for g in gs {
                let g = with_grad(&p, g);
                st.step(&mut p.weights, &g, 0.05).unwrap();
                for (a, b) in st.acc.tensors().into_iter().zip(prev.tensors()) {
                    prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x >= y));
                }
                prev = st.acc.clone();
            }
        }
    }
}
