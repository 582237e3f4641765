//! Training loop with patience-based early stopping, evaluation, and the
//! metric suite.

mod adam;
mod metrics;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use metrics::{compute_metrics, ClassMetrics, ConfusionMatrix, MetricsReport};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, Batch, EncodedExample};
use crate::model::{argmax, Model};
use crate::tensor::{kernels, Mode, Tape};
use crate::{CoreError, Result};

/// Examples per shard during parallel evaluation; fixed so the merge order
/// (and the summed loss) never depends on the thread count.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Batches without a strict validation-accuracy improvement before the
    /// run halts.
    pub stop_go: usize,
    /// Batches between validation evaluations.
    pub eval_every: usize,
    pub dropout: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 5e-5,
            epochs: 3,
            stop_go: 1000,
            eval_every: 100,
            dropout: 0.5,
            seed: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.stop_go == 0 {
            return Err(CoreError::config(
                "batch_size, eval_every and stop_go must be positive".to_string(),
            ));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(CoreError::config(format!("bad learning_rate {}", self.learning_rate)));
        }
        if self.stop_go < self.eval_every {
            return Err(CoreError::config(format!(
                "stop_go {} must be ≥ eval_every {}",
                self.stop_go, self.eval_every
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochsDone,
    EarlyStop,
}

/// One validation evaluation. `train_loss` is the mean batch loss since the
/// previous eval point (NaN for the pre-training entry at batch 0).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalPoint {
    pub batch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainHistory {
    pub evals: Vec<EvalPoint>,
    pub best_accuracy: f64,
    pub best_batch: usize,
    pub stop_reason: StopReason,
    pub batches_run: usize,
}

/// Loop over epochs × batches, evaluating every `eval_every` batches and
/// keeping the best-accuracy snapshot. Halts early once
/// `current batch − best batch > stop_go`, checked at eval boundaries before
/// evaluating. Returns the best snapshot, never the last.
///
/// Ties do not count as improvement. The model trains under
/// `config.dropout`; evaluation always runs with dropout off.
pub fn train(
    model: &Model,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
    config: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if config.epochs == 0 {
        let history = TrainHistory {
            evals: Vec::new(),
            best_accuracy: 0.0,
            best_batch: 0,
            stop_reason: StopReason::EpochsDone,
            batches_run: 0,
        };
        return Ok((model.clone(), history));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CoreError::contract("train: empty train or val split".to_string()));
    }

    let mut work = model.clone();
    work.config.dropout = config.dropout;

    let (cm, val_loss) = evaluate_with_loss(&work, val_set)?;
    let acc0 = cm.trace() as f64 / cm.total() as f64;
    let mut best = work.clone();
    let mut best_accuracy = acc0;
    let mut best_batch = 0usize;
    let mut evals = vec![EvalPoint { batch: 0, train_loss: f64::NAN, val_loss, val_accuracy: acc0 }];

    let mut adam_state = {
        let params = work.named_params();
        let refs: Vec<&crate::tensor::Tensor> = params.iter().map(|(_, t)| *t).collect();
        AdamState::for_params(&refs)
    };
    let adam_cfg = config.adam();

    let mut batch_no = 0usize;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut stop_reason = StopReason::EpochsDone;

    'epochs: for epoch in 0..config.epochs {
        for batch in batch_iter(train_set, config.batch_size, true, config.seed, epoch as u64)? {
            batch_no += 1;
            let (loss, grads) = train_step(&work, &batch, config.seed, batch_no)?;
            if !loss.is_finite() {
                return Err(CoreError::contract(format!(
                    "train: non-finite loss at batch {batch_no}"
                )));
            }
            loss_sum += loss;
            loss_count += 1;

            {
                let mut params = work.named_params_mut();
                let mut refs: Vec<&mut crate::tensor::Tensor> =
                    params.iter_mut().map(|(_, t)| &mut **t).collect();
                adam_step(&mut refs, &grads, &mut adam_state, batch_no, &adam_cfg)?;
            }

            if batch_no % config.eval_every == 0 {
                if batch_no - best_batch > config.stop_go {
                    stop_reason = StopReason::EarlyStop;
                    break 'epochs;
                }
                let (cm, val_loss) = evaluate_with_loss(&work, val_set)?;
                let val_accuracy = cm.trace() as f64 / cm.total() as f64;
                evals.push(EvalPoint {
                    batch: batch_no,
                    train_loss: loss_sum / loss_count as f64,
                    val_loss,
                    val_accuracy,
                });
                loss_sum = 0.0;
                loss_count = 0;
                if val_accuracy > best_accuracy {
                    best_accuracy = val_accuracy;
                    best_batch = batch_no;
                    best = work.clone();
                }
            }
        }
    }

    let history = TrainHistory {
        evals,
        best_accuracy,
        best_batch,
        stop_reason,
        batches_run: batch_no,
    };
    Ok((best, history))
}

/// Mean loss and mean parameter gradients over one batch. Examples run on
/// independent tapes in parallel; the reduction order is fixed by example
/// index, so results are bitwise-stable for any thread count.
fn train_step(model: &Model, batch: &Batch, seed: u64, batch_no: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    let per_example: Vec<Result<(f64, Vec<Vec<f64>>)>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let dropout_seed = mix3(seed, batch_no as u64, i as u64);
            let mut tape = Tape::with_seed(Mode::Train, dropout_seed);
            let bound = model.bind(&mut tape);
            let (ids, mask, label) = batch.row(i);
            let logits = bound.forward_row(&mut tape, ids, mask)?;
            let loss = tape.cross_entropy(logits, &[label])?;
            tape.backward(loss)?;
            let grads = bound
                .param_ids()
                .iter()
                .map(|&id| tape.grad(id).expect("param grad populated").to_vec())
                .collect();
            Ok((tape.values(loss)[0], grads))
        })
        .collect();

    let scale = 1.0 / batch.len() as f64;
    let mut loss_total = 0.0;
    let mut grad_sums: Option<Vec<Vec<f64>>> = None;
    for result in per_example {
        let (loss, grads) = result?;
        loss_total += loss;
        match &mut grad_sums {
            None => grad_sums = Some(grads),
            Some(sums) => {
                for (sum, grad) in sums.iter_mut().zip(&grads) {
                    for (s, g) in sum.iter_mut().zip(grad) {
                        *s += g;
                    }
                }
            }
        }
    }
    let mut grads = grad_sums.expect("non-empty batch");
    for grad in &mut grads {
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    Ok((loss_total * scale, grads))
}

fn mix3(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Dropout-free predictions over a dataset, as a confusion matrix.
/// Shards run in parallel and merge by elementwise addition.
pub fn evaluate(model: &Model, data: &[EncodedExample]) -> Result<ConfusionMatrix> {
    Ok(evaluate_with_loss(model, data)?.0)
}

/// [`evaluate`] plus the mean cross-entropy over the dataset.
pub fn evaluate_with_loss(model: &Model, data: &[EncodedExample]) -> Result<(ConfusionMatrix, f64)> {
    if data.is_empty() {
        return Err(CoreError::contract("evaluate: empty dataset".to_string()));
    }
    let k = model.config.num_classes;
    let shard_results: Vec<Result<(ConfusionMatrix, f64)>> = data
        .par_chunks(EVAL_CHUNK)
        .map(|shard| {
            let mut tape = Tape::new(Mode::Eval);
            let bound = model.bind(&mut tape);
            let mut cm = ConfusionMatrix::new(k);
            let mut loss_sum = 0.0;
            for ex in shard {
                let logits = bound.forward_row(&mut tape, &ex.row.ids, &ex.row.mask)?;
                let row = tape.values(logits).to_vec();
                cm.record(ex.label, argmax(&row));
                loss_sum += kernels::log_sum_exp_row(&row) - row[ex.label];
            }
            Ok((cm, loss_sum))
        })
        .collect();

    let mut cm = ConfusionMatrix::new(k);
    let mut loss_sum = 0.0;
    for result in shard_results {
        let (shard_cm, shard_loss) = result?;
        cm.merge(&shard_cm);
        loss_sum += shard_loss;
    }
    Ok((cm, loss_sum / data.len() as f64))
}
