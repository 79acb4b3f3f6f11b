//! Mini-batch training with Adam, gradient clipping, and early stopping.
//!
//! One epoch shuffles the training instances, walks them in batches,
//! averages per-instance BPTT gradients, clips the global L2 norm, and
//! applies the optimizer. After each epoch the model is scored on the
//! validation split; the best validation loss so far is snapshotted, and
//! training stops once `patience` consecutive epochs fail to improve on it
//! (strictly). The snapshot, not the final state, is what callers get back.
//!
//! Determinism: the only randomness is the shuffle order, driven by the
//! config seed; batch gradients are summed in fixed-size chunks that are
//! combined in index order, so the result is independent of how many threads
//! rayon happens to use.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::WindowInstance;
use crate::dgru::{backward, forward, forward_probs, DgruModel, Gradients, ModelError};
use crate::numerics::{cross_entropy, Rng};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Instances per parallel work unit when accumulating batch gradients.
/// Fixed so that partial-sum boundaries (and therefore float rounding) do
/// not depend on the machine's thread count.
const GRAD_CHUNK: usize = 32;
/// Instances per parallel work unit during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training config invalid: {reason}")]
    Config { reason: String },
    #[error("the {split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("non-finite gradient in {param}; training diverged")]
    NonFiniteGradient { param: String },
    #[error("{context} loss became non-finite in epoch {epoch}; training diverged")]
    Diverged {
        context: &'static str,
        epoch: usize,
        /// Everything that completed before the divergence.
        report: TrainReport,
    },
    #[error("optimizer state and gradients disagree at {param}: {reason}")]
    ShapeMismatch { param: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("epoch log {path}:{line}: {reason}")]
    EpochLog {
        path: String,
        line: usize,
        reason: String,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        })
    }
}

impl std::str::FromStr for Optimizer {
    type Err = String;
    fn from_str(s: &str) -> Result<Optimizer, String> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(format!("unknown optimizer {other:?} (expected adam or sgd)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without strict validation-loss improvement before stopping.
    pub patience: usize,
    /// Global L2 norm cap applied to each batch gradient before the update.
    pub grad_clip_norm: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            max_epochs: 100,
            patience: 10,
            grad_clip_norm: 5.0,
            optimizer: Optimizer::Adam,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |reason: String| Err(TrainError::Config { reason });
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.grad_clip_norm > 0.0 && self.grad_clip_norm.is_finite()) {
            return bad(format!(
                "grad_clip_norm must be positive and finite, got {}",
                self.grad_clip_norm
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose snapshot was returned; 0 if no epoch completed.
    pub best_epoch: usize,
    /// Last epoch that ran.
    pub stopped_epoch: usize,
    pub stopped_early: bool,
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// Adam's first and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &crate::dgru::DgruParams) -> OptimizerState {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Global L2 norm across every gradient array.
pub fn global_grad_norm(grads: &Gradients) -> f64 {
    let mut sum = 0.0;
    for (_, data) in grads.arrays() {
        for v in data {
            sum += v * v;
        }
    }
    sum.sqrt()
}

/// Scale gradients so their global L2 norm is at most `max_norm`; a norm at
/// or under the cap is left untouched. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

fn ensure_finite(grads: &Gradients) -> Result<(), TrainError> {
    for (name, data) in grads.arrays() {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: format!("{name}[{i}]"),
            });
        }
    }
    Ok(())
}

fn check_same_shape(
    params: &[(String, &mut [f64])],
    grads: &[(String, &[f64])],
) -> Result<(), TrainError> {
    if params.len() != grads.len() {
        return Err(TrainError::ShapeMismatch {
            param: "<structure>".into(),
            reason: format!("{} vs {} arrays", params.len(), grads.len()),
        });
    }
    for ((name, p), (_, g)) in params.iter().zip(grads.iter()) {
        if p.len() != g.len() {
            return Err(TrainError::ShapeMismatch {
                param: name.clone(),
                reason: format!("lengths {} vs {}", p.len(), g.len()),
            });
        }
    }
    Ok(())
}

/// One Adam update: validate and clip the gradients, advance the step
/// counter, and apply bias-corrected moment estimates. Zero gradients leave
/// the parameters untouched.
pub fn adam_step(
    model: &mut DgruModel,
    mut grads: Gradients,
    state: &mut OptimizerState,
    learning_rate: f64,
    grad_clip_norm: f64,
) -> Result<(), TrainError> {
    ensure_finite(&grads)?;
    clip_gradients(&mut grads, grad_clip_norm);
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powf(state.step as f64);
    let bc2 = 1.0 - ADAM_BETA2.powf(state.step as f64);

    let mut params = model.params.arrays_mut();
    let grad_arrays = grads.arrays();
    check_same_shape(&params, &grad_arrays)?;
    let mut m_arrays = state.m.arrays_mut();
    let mut v_arrays = state.v.arrays_mut();
    if m_arrays.len() != params.len() || v_arrays.len() != params.len() {
        return Err(TrainError::ShapeMismatch {
            param: "<optimizer state>".into(),
            reason: "moment estimates do not match the parameter layout".into(),
        });
    }

    for i in 0..params.len() {
        let p = &mut params[i].1;
        let g = grad_arrays[i].1;
        let m = &mut m_arrays[i].1;
        let v = &mut v_arrays[i].1;
        for j in 0..p.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

/// Plain SGD update with the same validation and clipping contract.
pub fn sgd_step(
    model: &mut DgruModel,
    mut grads: Gradients,
    learning_rate: f64,
    grad_clip_norm: f64,
) -> Result<(), TrainError> {
    ensure_finite(&grads)?;
    clip_gradients(&mut grads, grad_clip_norm);
    let mut params = model.params.arrays_mut();
    let grad_arrays = grads.arrays();
    check_same_shape(&params, &grad_arrays)?;
    for i in 0..params.len() {
        let p = &mut params[i].1;
        let g = grad_arrays[i].1;
        for j in 0..p.len() {
            p[j] -= learning_rate * g[j];
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Mean cross-entropy and accuracy over a split. Work is parallelized in
/// fixed chunks whose partial sums combine in index order, so the result
/// matches a sequential loop to the last bit regardless of thread count.
pub fn evaluate_split(
    model: &DgruModel,
    instances: &[WindowInstance],
) -> Result<(f64, f64), TrainError> {
    if instances.is_empty() {
        return Err(TrainError::EmptySplit { split: "evaluation" });
    }
    let parts: Vec<(f64, usize)> = instances
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| -> Result<(f64, usize), TrainError> {
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            for inst in chunk {
                let probs = forward_probs(model, &inst.values)?;
                let target = inst.label.class_index();
                loss_sum += cross_entropy(&probs, target).map_err(ModelError::from)?;
                let predicted = usize::from(probs[1] > probs[0]);
                if predicted == target {
                    correct += 1;
                }
            }
            Ok((loss_sum, correct))
        })
        .collect::<Result<_, _>>()?;

    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (l, c) in parts {
        loss_sum += l;
        correct += c;
    }
    let n = instances.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

fn batch_gradients(
    model: &DgruModel,
    batch: &[&WindowInstance],
) -> Result<(Gradients, f64), TrainError> {
    let parts: Vec<(Gradients, f64)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| -> Result<(Gradients, f64), TrainError> {
            let mut acc = model.params.zeros_like();
            let mut loss_sum = 0.0;
            for inst in chunk {
                let target = inst.label.class_index();
                let (probs, trace) = forward(model, &inst.values)?;
                loss_sum += cross_entropy(&probs, target).map_err(ModelError::from)?;
                let g = backward(model, &trace, target)?;
                acc.add_assign(&g)?;
            }
            Ok((acc, loss_sum))
        })
        .collect::<Result<_, _>>()?;

    let mut total = model.params.zeros_like();
    let mut loss_sum = 0.0;
    for (g, l) in parts {
        total.add_assign(&g)?;
        loss_sum += l;
    }
    let scale = 1.0 / batch.len() as f64;
    total.scale(scale);
    Ok((total, loss_sum * scale))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Train with the standard validation scorer ([`evaluate_split`]).
pub fn train(
    model: DgruModel,
    train_set: &[WindowInstance],
    val_set: &[WindowInstance],
    cfg: &TrainConfig,
) -> Result<(DgruModel, TrainReport), TrainError> {
    train_with_eval_hook(model, train_set, val_set, cfg, evaluate_split)
}

/// Training loop with a pluggable validation scorer.
///
/// The hook exists so the stopping logic can be exercised against scripted
/// loss schedules; production callers use [`train`]. The hook returns
/// `(val_loss, val_accuracy)` for the model after the epoch's updates.
pub fn train_with_eval_hook<F>(
    mut model: DgruModel,
    train_set: &[WindowInstance],
    val_set: &[WindowInstance],
    cfg: &TrainConfig,
    mut eval_fn: F,
) -> Result<(DgruModel, TrainReport), TrainError>
where
    F: FnMut(&DgruModel, &[WindowInstance]) -> Result<(f64, f64), TrainError>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit { split: "training" });
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit { split: "validation" });
    }

    let mut rng = Rng::new(cfg.seed);
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    let mut state = OptimizerState::new(&model.params);

    let mut records: Vec<EpochRecord> = Vec::new();
    let mut best_model = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_without_improvement = 0usize;
    let mut stopped_early = false;
    let mut stopped_epoch = 0usize;

    let report_so_far = |records: &[EpochRecord], best_epoch, stopped_epoch, stopped_early| TrainReport {
        records: records.to_vec(),
        best_epoch,
        stopped_epoch,
        stopped_early,
    };

    for epoch in 1..=cfg.max_epochs {
        stopped_epoch = epoch;
        rng.shuffle(&mut indices);

        let mut loss_weighted_sum = 0.0;
        for batch_indices in indices.chunks(cfg.batch_size) {
            let batch: Vec<&WindowInstance> =
                batch_indices.iter().map(|&i| &train_set[i]).collect();
            let (grads, batch_loss) = batch_gradients(&model, &batch)?;
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged {
                    context: "training",
                    epoch,
                    report: report_so_far(&records, best_epoch, epoch, false),
                });
            }
            loss_weighted_sum += batch_loss * batch.len() as f64;
            match cfg.optimizer {
                Optimizer::Adam => {
                    adam_step(&mut model, grads, &mut state, cfg.learning_rate, cfg.grad_clip_norm)?
                }
                Optimizer::Sgd => {
                    sgd_step(&mut model, grads, cfg.learning_rate, cfg.grad_clip_norm)?
                }
            }
        }
        let train_loss = loss_weighted_sum / train_set.len() as f64;

        let (val_loss, val_accuracy) = eval_fn(&model, val_set)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged {
                context: "validation",
                epoch,
                report: report_so_far(&records, best_epoch, epoch, false),
            });
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });

        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best_model = model.clone();
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok((
        best_model,
        TrainReport {
            records,
            best_epoch,
            stopped_epoch,
            stopped_early,
        },
    ))
}

// ---------------------------------------------------------------------------
// Epoch log
// ---------------------------------------------------------------------------

const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_loss,val_accuracy";

/// Write the per-epoch log as CSV. Floats use Rust's shortest round-trip
/// formatting, so a load/save cycle reproduces the file byte for byte.
pub fn save_epoch_log(path: &Path, records: &[EpochRecord]) -> Result<(), TrainError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{EPOCH_LOG_HEADER}").map_err(|e| io_err(path, e))?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_accuracy)
            .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_epoch_log(path: &Path) -> Result<Vec<EpochRecord>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let bad = |line: usize, reason: String| TrainError::EpochLog {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == EPOCH_LOG_HEADER => {}
        Some((_, header)) => {
            return Err(bad(1, format!("unexpected header {header:?}")));
        }
        None => return Err(bad(1, "file is empty".into())),
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(lineno, format!("expected 4 fields, got {}", fields.len())));
        }
        let epoch: usize = fields[0]
            .parse()
            .map_err(|_| bad(lineno, format!("bad epoch {:?}", fields[0])))?;
        let parse_f = |s: &str, what: &str| -> Result<f64, TrainError> {
            s.parse()
                .map_err(|_| bad(lineno, format!("bad {what} {s:?}")))
        };
        records.push(EpochRecord {
            epoch,
            train_loss: parse_f(fields[1], "train_loss")?,
            val_loss: parse_f(fields[2], "val_loss")?,
            val_accuracy: parse_f(fields[3], "val_accuracy")?,
        });
    }
    Ok(records)
}
