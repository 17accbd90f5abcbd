//! Minibatch training loop and evaluation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::batch_gradients;
use super::metrics::{auc, gauc};
use super::optim::{AdagradState, DEFAULT_EPS};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::graph::ObjectiveOptions;
use crate::model::{forward_example, Checkpoint, LreaParams, ModelConfig};
use crate::par::Execution;

/// Optimization settings. Model shape lives in [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Lets the `W_Compᵀ·E_s` penalty push gradient into the embeddings.
    pub penalty_grad_to_embeddings: bool,
    pub eps: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 5,
            seed: 7,
            penalty_grad_to_embeddings: true,
            eps: DEFAULT_EPS,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Argument(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Argument("eps must be positive".into()));
        }
        Ok(())
    }

    fn objective(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            lambda: self.lambda,
            penalty_grad_to_embeddings: self.penalty_grad_to_embeddings,
        }
    }
}

/// One line of the training log, measured at the parameters reached at the
/// end of `epoch` (epoch 0 is the initialization).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub penalty: f64,
    pub gap_mean: f64,
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
    /// Mean minibatch objective seen during the epoch.
    pub train_loss: Option<f64>,
}

/// Metrics of a parameter set on a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub ce: f64,
    /// Mean per-example `E_Comp` penalty plus the `W_Decomp` penalty.
    pub penalty: f64,
    pub gap_mean: f64,
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scores `examples` on the training path and summarizes.
pub fn evaluate(params: &LreaParams, examples: &[Example], exec: Execution) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    let outs = exec.try_map(examples, |ex| {
        forward_example(&params.config, &params.weights, ex)
    })?;
    let n = examples.len() as f64;
    let probs: Vec<f64> = outs.iter().map(|o| o.prob).collect();
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    let groups: Vec<u64> = examples.iter().map(|e| e.user_id).collect();
    let label_f: Vec<f64> = examples.iter().map(Example::label_f64).collect();
    let decomp = params
        .weights
        .compression
        .as_ref()
        .map_or(0.0, |c| c.w_decomp.transpose().neg_part_sq_norm());
    Ok(Evaluation {
        ce: super::loss::cross_entropy(&probs, &label_f)?,
        penalty: outs.iter().map(|o| o.penalty).sum::<f64>() / n + decomp,
        gap_mean: outs.iter().map(|o| o.absorption_gap).sum::<f64>() / n,
        auc: defined(auc(&probs, &labels))?,
        gauc: defined(gauc(&probs, &labels, &groups))?,
        probs,
    })
}

fn record(epoch: usize, e: &Evaluation, train_loss: Option<f64>) -> EpochRecord {
    EpochRecord {
        epoch,
        ce: e.ce,
        penalty: e.penalty,
        gap_mean: e.gap_mean,
        auc: e.auc,
        gauc: e.gauc,
        train_loss,
    }
}

/// Trains from a seeded initialization. Each epoch visits `train` in a
/// seeded shuffle; after each epoch (and once before the first) the model
/// is evaluated on `eval`, or on `train` when `eval` is empty.
pub fn train(
    train: &[Example],
    eval: &[Example],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(train, eval, model, config, |_| {})
}

/// [`train`] with a callback fired as each log record is produced.
pub fn train_with(
    train: &[Example],
    eval: &[Example],
    model: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let monitor = if eval.is_empty() { train } else { eval };
    let mut params = LreaParams::init(model.clone(), config.seed)?;
    let mut state = AdagradState::new(&params.weights, config.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let opts = config.objective();

    let mut log = Vec::with_capacity(config.epochs + 1);
    let first = record(0, &evaluate(&params, monitor, config.execution)?, None);
    on_epoch(&first);
    log.push(first);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            let g = batch_gradients(&params, &batch, opts, config.execution)?;
            if !g.parts.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective {} at epoch {epoch}, batch {b} (ce {}, penalty {})",
                    g.parts.total, g.parts.ce, g.parts.penalty
                )));
            }
            state.step(&mut params.weights, &g.grads, config.learning_rate)?;
            loss_sum += g.parts.total;
            batches += 1;
        }
        let rec = record(
            epoch,
            &evaluate(&params, monitor, config.execution)?,
            Some(loss_sum / batches as f64),
        );
        on_epoch(&rec);
        log.push(rec);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(params)?,
        log,
    })
}

/// Writes records as newline-delimited JSON.
pub fn write_log(path: impl AsRef<Path>, log: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for rec in log {
        serde_json::to_writer(&mut out, rec)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}
