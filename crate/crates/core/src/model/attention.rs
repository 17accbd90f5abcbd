//! Plain (tape-free) attention forwards, generic over precision.
//!
//! Shapes: `e_s` is `L×d`, `e_t` is `1×d`, `W₁,W₂,W₃` are `d×h`, `W_o` is
//! `h×1`, `W_Comp` is `L×r`, `W_Decomp` is `r×L`. Pooled outputs are `1×d`.
//! Products like `E_sᵀ·φ(X)·W_o` are evaluated as `(φ(X)·W_o)ᵀ·E_s`, which
//! is the same value with a length-`L` column instead of an `L×h` block.

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};
use crate::serving::CompressedUserState;

use super::{AttentionWeights, InferenceModel};

/// Embeds a list of ids; padding id 0 maps to the (zero) row 0.
pub fn lookup_sequence<T: Scalar>(table: &Matrix<T>, ids: &[u32]) -> Result<Matrix<T>> {
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    table.gather_rows(&idx)
}

fn check_target<T: Scalar>(e_t: &Matrix<T>, d: usize, op: &'static str) -> Result<()> {
    if e_t.shape() != (1, d) {
        return Err(Error::Dimension {
            op,
            lhs: e_t.shape(),
            rhs: (1, d),
        });
    }
    Ok(())
}

/// DIN attention scores `φ[(E_t·W₁)↓L + E_s·W₂ + (E_t↓L ⊙ E_s)·W₃]·W_o`, `L×1`.
pub fn din_score<T: Scalar, M: AsRef<Matrix<T>>>(
    e_s: &Matrix<T>,
    e_t: &Matrix<T>,
    w: &AttentionWeights<M>,
    slope: f64,
) -> Result<Matrix<T>> {
    check_target(e_t, e_s.cols(), "din_score")?;
    let l = e_s.rows();
    let t_b = e_t.broadcast_rows(l)?;
    let pre = e_t
        .matmul(w.w1.as_ref())?
        .broadcast_rows(l)?
        .add(&e_s.matmul(w.w2.as_ref())?)?
        .add(&t_b.hadamard(e_s)?.matmul(w.w3.as_ref())?)?;
    pre.leaky_relu(slope).matmul(w.w_o.as_ref())
}

/// DIN target attention pooled interest `(E_sᵀ·AttScore)ᵀ`.
pub fn din_attention<T: Scalar, M: AsRef<Matrix<T>>>(
    e_s: &Matrix<T>,
    e_t: &Matrix<T>,
    w: &AttentionWeights<M>,
    slope: f64,
) -> Result<Matrix<T>> {
    din_score(e_s, e_t, w, slope)?.t_matmul(e_s)
}

/// `(E_sᵀ·W_Comp·W_Decomp)ᵀ`, the rank-`r` reconstruction of `E_s`.
pub fn lrea_reconstruct<T: Scalar>(
    e_s: &Matrix<T>,
    w_comp: &Matrix<T>,
    w_decomp: &Matrix<T>,
) -> Result<Matrix<T>> {
    let e_comp = e_s.t_matmul(w_comp)?;
    Ok(e_comp.matmul(w_decomp)?.transpose())
}

/// `M = (E_t↓r)·W₁ + E_Compᵀ·W₂ + (E_t↓r ⊙ E_Compᵀ)·W₃`, `r×h`, from the
/// `r×d` matrix `E_Compᵀ`.
pub fn lrea_mixing<T: Scalar, M: AsRef<Matrix<T>>>(
    e_comp_t: &Matrix<T>,
    e_t: &Matrix<T>,
    w: &AttentionWeights<M>,
) -> Result<Matrix<T>> {
    check_target(e_t, e_comp_t.cols(), "lrea_mixing")?;
    let t_b = e_t.broadcast_rows(e_comp_t.rows())?;
    t_b.matmul(w.w1.as_ref())?
        .add(&e_comp_t.matmul(w.w2.as_ref())?)?
        .add(&t_b.hadamard(e_comp_t)?.matmul(w.w3.as_ref())?)
}

#[derive(Debug, Clone)]
pub struct LreaTrainOutput<T = f64> {
    /// Unabsorbed output `(E_sᵀ·φ(W_Decompᵀ·M)·W_o)ᵀ`, `1×d`.
    pub pooled: Matrix<T>,
    /// Absorbed output `((E_sᵀ·W_Decompᵀ)·φ(M)·W_o)ᵀ`, `1×d`.
    pub absorbed: Matrix<T>,
    /// Max-abs difference between `pooled` and `absorbed`.
    pub absorption_gap: T,
    /// Per-position scores `φ(W_Decompᵀ·M)·W_o`, `L×1`.
    pub score: Matrix<T>,
    /// `E_Compᵀ = W_Compᵀ·E_s`, `r×d`.
    pub e_comp_t: Matrix<T>,
    /// The `r×h` mixing matrix.
    pub mixing: Matrix<T>,
}

/// Training-path low-rank attention. Returns the unabsorbed output together
/// with the absorbed value and their gap as a diagnostic.
pub fn lrea_attention_train<T: Scalar, M: AsRef<Matrix<T>>>(
    e_s: &Matrix<T>,
    e_t: &Matrix<T>,
    w_comp: &Matrix<T>,
    w_decomp: &Matrix<T>,
    w: &AttentionWeights<M>,
    slope: f64,
) -> Result<LreaTrainOutput<T>> {
    if w_comp.rows() != e_s.rows() || w_decomp.shape() != (w_comp.cols(), w_comp.rows()) {
        return Err(Error::Dimension {
            op: "lrea_attention_train",
            lhs: w_comp.shape(),
            rhs: w_decomp.shape(),
        });
    }
    let e_comp_t = w_comp.t_matmul(e_s)?;
    let mixing = lrea_mixing(&e_comp_t, e_t, w)?;

    let score = w_decomp
        .t_matmul(&mixing)?
        .leaky_relu(slope)
        .matmul(w.w_o.as_ref())?;
    let pooled = score.t_matmul(e_s)?;

    // (E_sᵀ·W_Decompᵀ)ᵀ = W_Decomp·E_s, r×d.
    let aux_t = w_decomp.matmul(e_s)?;
    let absorbed = mixing
        .leaky_relu(slope)
        .matmul(w.w_o.as_ref())?
        .t_matmul(&aux_t)?;
    let absorption_gap = pooled.max_abs_diff(&absorbed)?;
    Ok(LreaTrainOutput {
        pooled,
        absorbed,
        absorption_gap,
        score,
        e_comp_t,
        mixing,
    })
}

/// A user's cached state prepared for repeated candidate scoring: the
/// candidate-independent part of the mixing matrix is computed once.
#[derive(Debug, Clone)]
pub struct AbsorbedUser<T> {
    e_comp_t: Matrix<T>,
    comp_w2: Matrix<T>,
    e_aux: Matrix<T>,
}

impl<T: Scalar> AbsorbedUser<T> {
    pub fn new<M: AsRef<Matrix<T>>>(
        state: &CompressedUserState<T>,
        w: &AttentionWeights<M>,
    ) -> Result<Self> {
        let e_comp_t = state.e_comp.transpose();
        let comp_w2 = e_comp_t.matmul(w.w2.as_ref())?;
        Ok(Self {
            e_comp_t,
            comp_w2,
            e_aux: state.e_auxabsorb.clone(),
        })
    }

    /// `(E_Auxabsorb·φ(M)·W_o)ᵀ`. Touches only `r`-sized objects.
    pub fn attend<M: AsRef<Matrix<T>>>(
        &self,
        e_t: &Matrix<T>,
        w: &AttentionWeights<M>,
        slope: f64,
    ) -> Result<Matrix<T>> {
        check_target(e_t, self.e_comp_t.cols(), "lrea_attention_serve")?;
        let r = self.e_comp_t.rows();
        let mixing = e_t
            .matmul(w.w1.as_ref())?
            .broadcast_rows(r)?
            .add(&self.comp_w2)?
            .add(
                &e_t.broadcast_rows(r)?
                    .hadamard(&self.e_comp_t)?
                    .matmul(w.w3.as_ref())?,
            )?;
        let s = mixing.leaky_relu(slope).matmul(w.w_o.as_ref())?;
        Ok(self.e_aux.matmul(&s)?.transpose())
    }
}

/// Serving-path attention from a cached compressed state.
pub fn lrea_attention_serve<T: Scalar>(
    state: &CompressedUserState<T>,
    e_t: &Matrix<T>,
    model: &InferenceModel<T>,
) -> Result<Matrix<T>> {
    if state.params_version != model.version {
        return Err(Error::StaleCache {
            cached: state.params_version.clone(),
            current: model.version.clone(),
        });
    }
    let w = &model.weights.long;
    AbsorbedUser::new(state, w)?.attend(e_t, w, model.config.leaky_slope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_m(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(lo..1.0))
    }

    fn weights(rng: &mut ChaCha8Rng, d: usize, h: usize, lo: f64) -> AttentionWeights<Matrix> {
        AttentionWeights {
            w1: rand_m(rng, d, h, lo),
            w2: rand_m(rng, d, h, lo),
            w3: rand_m(rng, d, h, lo),
            w_o: rand_m(rng, h, 1, lo),
        }
    }

    fn leaky(x: f64, s: f64) -> f64 {
        if x >= 0.0 {
            x
        } else {
            s * x
        }
    }

    /// Straight-line DIN: per position, per hidden unit, scalar loops.
    fn din_oracle(e_s: &Matrix, e_t: &Matrix, w: &AttentionWeights<Matrix>, s: f64) -> Vec<f64> {
        let (l, d) = e_s.shape();
        let h = w.w1.cols();
        let mut out = vec![0.0; d];
        for i in 0..l {
            let mut score = 0.0;
            for k in 0..h {
                let mut pre = 0.0;
                for j in 0..d {
                    let t = e_t.get(0, j);
                    let e = e_s.get(i, j);
                    pre += t * w.w1.get(j, k) + e * w.w2.get(j, k) + t * e * w.w3.get(j, k);
                }
                score += leaky(pre, s) * w.w_o.get(k, 0);
            }
            for j in 0..d {
                out[j] += score * e_s.get(i, j);
            }
        }
        out
    }

    /// Straight-line unabsorbed low-rank attention.
    fn lrea_oracle(
        e_s: &Matrix,
        e_t: &Matrix,
        w_comp: &Matrix,
        w_decomp: &Matrix,
        w: &AttentionWeights<Matrix>,
        s: f64,
    ) -> Vec<f64> {
        let (l, d) = e_s.shape();
        let r = w_comp.cols();
        let h = w.w1.cols();
        // e_comp[j][q] = Σ_i e_s[i][j] w_comp[i][q]
        let mut e_comp = vec![vec![0.0; r]; d];
        for j in 0..d {
            for q in 0..r {
                for i in 0..l {
                    e_comp[j][q] += e_s.get(i, j) * w_comp.get(i, q);
                }
            }
        }
        let mut m = vec![vec![0.0; h]; r];
        for q in 0..r {
            for k in 0..h {
                for j in 0..d {
                    let t = e_t.get(0, j);
                    let c = e_comp[j][q];
                    m[q][k] += t * w.w1.get(j, k) + c * w.w2.get(j, k) + t * c * w.w3.get(j, k);
                }
            }
        }
        let mut out = vec![0.0; d];
        for i in 0..l {
            let mut score = 0.0;
            for k in 0..h {
                let mut x = 0.0;
                for q in 0..r {
                    x += w_decomp.get(q, i) * m[q][k];
                }
                score += leaky(x, s) * w.w_o.get(k, 0);
            }
            for j in 0..d {
                out[j] += score * e_s.get(i, j);
            }
        }
        out
    }

    fn max_diff(a: &Matrix, b: &[f64]) -> f64 {
        a.data()
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn din_hand_example() {
        let one = Matrix::scalar(1.0);
        let w = AttentionWeights {
            w1: one.clone(),
            w2: one.clone(),
            w3: one.clone(),
            w_o: one,
        };
        let out = din_attention(&Matrix::scalar(3.0), &Matrix::scalar(2.0), &w, 0.01).unwrap();
        assert_eq!(out, Matrix::scalar(33.0));
    }

    #[test]
    fn din_zero_weights_give_zero() {
        let z = Matrix::zeros(4, 5);
        let w = AttentionWeights {
            w1: z.clone(),
            w2: z.clone(),
            w3: z,
            w_o: Matrix::zeros(5, 1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = din_attention(
            &rand_m(&mut rng, 6, 4, -1.0),
            &rand_m(&mut rng, 1, 4, -1.0),
            &w,
            0.01,
        )
        .unwrap();
        assert_eq!(out, Matrix::zeros(1, 4));
    }

    #[test]
    fn din_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e_s = rand_m(&mut rng, 7, 4, -1.0);
        let e_t = rand_m(&mut rng, 1, 4, -1.0);
        let w = weights(&mut rng, 4, 5, -1.0);
        let out = din_attention(&e_s, &e_t, &w, 0.01).unwrap();
        assert!(max_diff(&out, &din_oracle(&e_s, &e_t, &w, 0.01)) <= 1e-10);
    }

    #[test]
    fn din_padding_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e_s = rand_m(&mut rng, 5, 4, -1.0);
        let e_t = rand_m(&mut rng, 1, 4, -1.0);
        let w = weights(&mut rng, 4, 5, -1.0);
        let padded = Matrix::vstack(&[&e_s, &Matrix::zeros(3, 4)]).unwrap();
        let a = din_attention(&e_s, &e_t, &w, 0.01).unwrap();
        let b = din_attention(&padded, &e_t, &w, 0.01).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn reconstruct_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e_s = rand_m(&mut rng, 6, 3, -1.0);
        let eye = Matrix::identity(6);
        let back = lrea_reconstruct(&e_s, &eye, &eye).unwrap();
        assert!(back.max_abs_diff(&e_s).unwrap() <= 1e-12);

        let zero =
            lrea_reconstruct(&e_s, &Matrix::zeros(6, 2), &rand_m(&mut rng, 2, 6, -1.0)).unwrap();
        assert_eq!(zero, Matrix::zeros(6, 3));

        let wc = rand_m(&mut rng, 6, 2, -1.0);
        let wd = rand_m(&mut rng, 2, 6, -1.0);
        let got = lrea_reconstruct(&e_s, &wc, &wd).unwrap();
        let oracle = e_s
            .transpose()
            .matmul(&wc)
            .unwrap()
            .matmul(&wd)
            .unwrap()
            .transpose();
        assert!(got.max_abs_diff(&oracle).unwrap() <= 1e-12);
    }

    #[test]
    fn train_path_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (l, d, r, h) = (9, 4, 3, 5);
        let e_s = rand_m(&mut rng, l, d, -1.0);
        let e_t = rand_m(&mut rng, 1, d, -1.0);
        let wc = rand_m(&mut rng, l, r, -1.0);
        let wd = rand_m(&mut rng, r, l, -1.0);
        let w = weights(&mut rng, d, h, -1.0);
        let out = lrea_attention_train(&e_s, &e_t, &wc, &wd, &w, 0.01).unwrap();
        assert!(max_diff(&out.pooled, &lrea_oracle(&e_s, &e_t, &wc, &wd, &w, 0.01)) <= 1e-10);
        assert!(out.absorption_gap > 0.0);
    }

    #[test]
    fn absorption_is_exact_on_non_negative_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (l, d, r, h) = (10, 4, 3, 5);
        let e_s = rand_m(&mut rng, l, d, 0.0);
        let e_t = rand_m(&mut rng, 1, d, 0.0);
        let wc = rand_m(&mut rng, l, r, 0.0);
        let wd = rand_m(&mut rng, r, l, 0.0);
        let w = weights(&mut rng, d, h, 0.0);
        let out = lrea_attention_train(&e_s, &e_t, &wc, &wd, &w, 0.01).unwrap();
        assert!(out.mixing.data().iter().all(|&v| v >= 0.0));
        assert!(out.absorption_gap <= 1e-10);
    }

    #[test]
    fn identity_compression_reduces_to_din() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = 6;
        let e_s = rand_m(&mut rng, l, 4, -1.0);
        let e_t = rand_m(&mut rng, 1, 4, -1.0);
        let w = weights(&mut rng, 4, 5, -1.0);
        let eye = Matrix::identity(l);
        let out = lrea_attention_train(&e_s, &e_t, &eye, &eye, &w, 0.01).unwrap();
        let din = din_score(&e_s, &e_t, &w, 0.01).unwrap();
        assert!(out.score.max_abs_diff(&din).unwrap() <= 1e-10);
    }

    #[test]
    fn zero_head_gives_zero_output_and_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = AttentionWeights {
            w1: Matrix::zeros(4, 5),
            w2: Matrix::zeros(4, 5),
            w3: Matrix::zeros(4, 5),
            w_o: Matrix::zeros(5, 1),
        };
        let out = lrea_attention_train(
            &rand_m(&mut rng, 8, 4, -1.0),
            &rand_m(&mut rng, 1, 4, -1.0),
            &rand_m(&mut rng, 8, 3, -1.0),
            &rand_m(&mut rng, 3, 8, -1.0),
            &w,
            0.01,
        )
        .unwrap();
        assert_eq!(out.pooled, Matrix::zeros(1, 4));
        assert_eq!(out.absorption_gap, 0.0);
    }

    #[test]
    fn shape_errors_are_reported() {
        let w = AttentionWeights {
            w1: Matrix::<f64>::zeros(4, 5),
            w2: Matrix::zeros(4, 5),
            w3: Matrix::zeros(4, 5),
            w_o: Matrix::zeros(5, 1),
        };
        assert!(din_attention(&Matrix::zeros(3, 4), &Matrix::zeros(1, 3), &w, 0.01).is_err());
        assert!(lrea_attention_train(
            &Matrix::zeros(8, 4),
            &Matrix::zeros(1, 4),
            &Matrix::zeros(7, 3),
            &Matrix::zeros(3, 8),
            &w,
            0.01
        )
        .is_err());
    }
}
