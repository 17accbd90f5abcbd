//! Central finite-difference verification of tape gradients.

use std::sync::Arc;

use serde::Serialize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BehaviorSequence, Example};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::graph::{chunk_objective, ObjectiveOptions};
use crate::model::{LreaParams, ModelConfig};
use crate::tape::{Tape, Var};

/// Denominator floor for relative error, so entries whose true gradient is
/// (near) zero are judged by absolute error instead of blowing up.
pub const DEFAULT_REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub index: usize,
    pub shape: (usize, usize),
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Entries whose relative error exceeded the tolerance.
    pub flagged: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged == 0)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, params: &[Arc<Matrix>]) -> Result<(Tape, Var, Vec<Var>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(Arc::clone(p))).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {value}")));
    }
    Ok((tape, out, vars))
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences `(f(θ+h) - f(θ-h)) / 2h`, entry by entry.
pub fn grad_check<F>(f: F, params: &[Matrix], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_floor(f, params, step, tol, DEFAULT_REL_FLOOR)
}

pub fn grad_check_with_floor<F>(
    f: F,
    params: &[Matrix],
    step: f64,
    tol: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Argument(format!(
            "step must be positive, got {step}"
        )));
    }
    let mut current: Vec<Arc<Matrix>> = params.iter().cloned().map(Arc::new).collect();
    let (tape, out, vars) = evaluate(&f, &current)?;
    let grads = tape.backward(out)?;

    let mut report = Vec::with_capacity(params.len());
    for (pi, &var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        let base = params[pi].clone();
        let mut check = ParamCheck {
            index: pi,
            shape: base.shape(),
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
            flagged: 0,
        };
        for e in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[e] += step;
            current[pi] = Arc::new(plus);
            let (t, o, _) = evaluate(&f, &current)?;
            let f_plus = t.value(o).item()?;

            let mut minus = base.clone();
            minus.data_mut()[e] -= step;
            current[pi] = Arc::new(minus);
            let (t, o, _) = evaluate(&f, &current)?;
            let f_minus = t.value(o).item()?;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic.data()[e];
            let rel = relative_error(a, numeric, floor);
            if rel > tol {
                check.flagged += 1;
            }
            if rel > check.max_rel_error || e == 0 {
                check.max_rel_error = rel;
                check.worst_entry = e;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        current[pi] = Arc::new(base);
        report.push(check);
    }
    Ok(GradCheckReport {
        step,
        tol,
        params: report,
    })
}

/// The full regularized objective over `batch`, checked for every tensor.
pub fn check_objective(
    params: &LreaParams,
    batch: &[Example],
    opts: ObjectiveOptions,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let refs: Vec<&Example> = batch.iter().collect();
    let layout = &params.weights;
    let flat: Vec<Matrix> = layout
        .tensors()
        .into_iter()
        .map(|m| (**m).clone())
        .collect();
    grad_check(
        |tape, vars| {
            let w = layout.with_flat(vars.to_vec())?;
            let out = chunk_objective(tape, &params.config, &w, &refs, refs.len(), opts, true)?;
            Ok(out.loss)
        },
        &flat,
        step,
        tol,
    )
}

/// A small desk instance (`L=8, d=4, r=3, h=5`, three examples) whose
/// compression weights straddle zero so every penalty branch is live.
pub fn desk_instance(seed: u64) -> Result<(LreaParams, Vec<Example>)> {
    let config = ModelConfig {
        vocab_size: 12,
        side_vocab: 4,
        n_side: 1,
        long_len: 8,
        short_len: 3,
        rank: 3,
        dim: 4,
        att_hidden: 5,
        head_sizes: vec![6],
        embedding_std: 0.1,
        ..ModelConfig::default()
    };
    let mut params = LreaParams::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(c) = params.weights.compression.as_mut() {
        for m in [&mut c.w_comp, &mut c.w_decomp] {
            Arc::make_mut(m)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.5..1.0));
        }
    }
    let batch = (0..3)
        .map(|u| {
            let len = rng.gen_range(5..=8);
            let long: Vec<u32> = (0..len).map(|_| rng.gen_range(1..12)).collect();
            let short = long[len - 2..].to_vec();
            Example {
                user_id: u,
                target: rng.gen_range(1..12),
                label: (u % 2) as u8,
                seq: Arc::new(BehaviorSequence::from_raw(&long, &short, 8, 3)),
                side: vec![rng.gen_range(1..4)],
            }
        })
        .collect();
    Ok((params, batch))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Matrix {
        Matrix::from_rows(&[&[0.3, -1.2, 2.0], &[0.7, 0.0, -0.4]])
    }

    #[test]
    fn sum_has_exact_unit_gradient() {
        let report = grad_check(|t, p| Ok(t.sum(p[0])), &[sample()], 1e-5, 1e-9).unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-9);
    }

    #[test]
    fn squared_norm_is_exact_under_central_differences() {
        let report = grad_check(
            |t, p| {
                let sq = t.hadamard(p[0], p[0])?;
                Ok(t.sum(sq))
            },
            &[sample()],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // leaky_relu with a kink exactly at the evaluation point: the tape
        // reports slope 1 at zero, central differences see the average.
        let x = Matrix::from_rows(&[&[0.0]]);
        let report = grad_check(
            |t, p| {
                let y = t.leaky_relu(p[0], 0.5);
                Ok(t.sum(y))
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut rand_m = |r, c| Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let a = rand_m(3, 4);
        let b = rand_m(4, 2);
        let row = rand_m(1, 4);
        let table = rand_m(5, 4);
        let probs_logits = rand_m(3, 1);
        let report = grad_check(
            |t, p| {
                let ab = t.matmul(p[0], p[1])?;
                let r = t.broadcast_rows(p[2], 3)?;
                let h = t.hadamard(p[0], r)?;
                let ht = t.transpose(h);
                let g = t.gather_rows(p[3], &[1, 4, 1])?;
                let gt = t.matmul(g, ht)?; // 3x3
                let act = t.leaky_relu(gt, 0.1);
                let st = t.hstack(&[ab, act])?;
                let vs = t.vstack(&[st, st])?;
                let s1 = t.sum(vs);
                let np = t.neg_part_sq_norm(p[0]);
                let sig = t.sigmoid(p[4]);
                let ce = t.binary_cross_entropy(sig, &[1.0, 0.0, 1.0], 1e-7)?;
                let scaled = t.scale(np, 0.7);
                let x = t.add(s1, scaled)?;
                t.add(x, ce)
            },
            &[a, b, row, table, probs_logits],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Matrix::from_rows(&[&[f64::NAN]]);
        let err = grad_check(|t, p| Ok(t.sum(p[0])), &[x], 1e-5, 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn full_objective_on_desk_instance() {
        for seed in 0..3 {
            let (params, batch) = desk_instance(seed).unwrap();
            let report =
                check_objective(&params, &batch, ObjectiveOptions::default(), 1e-5, 1e-4).unwrap();
            assert!(
                report.passed(),
                "seed {seed}: {:?}",
                report
                    .params
                    .iter()
                    .filter(|p| p.flagged > 0)
                    .collect::<Vec<_>>()
            );
        }
    }
}
