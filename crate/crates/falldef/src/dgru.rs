//! Stacked GRU classifier over accelerometer windows.
//!
//! Architecture: one or more GRU layers run left-to-right over the window
//! (each layer feeding the next), then a two-affine output head reads the
//! final hidden state of the top layer:
//!
//! ```text
//! z_t = sigmoid(Wz x_t + Uz h_{t-1} + bz)        update gate
//! r_t = sigmoid(Wr x_t + Ur h_{t-1} + br)        reset gate
//! c_t = tanh(Wh x_t + Uh (r_t . h_{t-1}) + bh)   candidate state
//! h_t = (1 - z_t) . h_{t-1} + z_t . c_t
//!
//! probs = softmax(W2 tanh(W1 h_T + b1) + b2)
//! ```
//!
//! The tanh between the head affines is deliberate: without it the two
//! matrices would collapse into one and add nothing over a single layer.
//!
//! Training gradients come from full backpropagation through time, written
//! by hand below and verified against central finite differences (see
//! [`check_gradients`]). Input normalization is part of the model, so any
//! code path that runs the model (offline eval, the TCP service, FFI
//! callers) applies the identical transform.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Label, NormStats, WindowInstance};
use crate::numerics::{
    cross_entropy, glorot_uniform, sigmoid, softmax, tanh, Matrix, NumericsError, Rng, Vector,
};

/// Accelerometer channels per sample. The whole pipeline is tri-axial.
pub const INPUT_DIM: usize = 3;
/// Output classes: index 0 non-fall, index 1 fall.
pub const OUTPUT_CLASSES: usize = 2;
/// Model file schema version written by [`save_model`].
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("window has {got} samples, model expects {expected}")]
    WindowLength { got: usize, expected: usize },
    #[error("class target {target} is out of range (0..{OUTPUT_CLASSES})")]
    Target { target: usize },
    #[error("model config invalid: {reason}")]
    Config { reason: String },
    #[error("forward trace does not match this model: {reason}")]
    TraceMismatch { reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("model file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("model file {path}: format_version {found} is not supported (expected {expected})")]
    UnsupportedVersion { path: String, found: u32, expected: u32 },
    #[error("model file {path}: {field}: {reason}")]
    InvalidField {
        path: String,
        field: String,
        reason: String,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// One GRU layer. W* act on the layer input, U* on the previous hidden
/// state; gate order is z (update), r (reset), h (candidate) throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayerParams {
    pub wz: Matrix,
    pub uz: Matrix,
    pub bz: Vector,
    pub wr: Matrix,
    pub ur: Matrix,
    pub br: Vector,
    pub wh: Matrix,
    pub uh: Matrix,
    pub bh: Vector,
}

impl GruLayerParams {
    pub fn new(input_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Result<GruLayerParams, NumericsError> {
        Ok(GruLayerParams {
            wz: glorot_uniform(rng, hidden_dim, input_dim)?,
            uz: glorot_uniform(rng, hidden_dim, hidden_dim)?,
            bz: Vector::zeros(hidden_dim),
            wr: glorot_uniform(rng, hidden_dim, input_dim)?,
            ur: glorot_uniform(rng, hidden_dim, hidden_dim)?,
            br: Vector::zeros(hidden_dim),
            wh: glorot_uniform(rng, hidden_dim, input_dim)?,
            uh: glorot_uniform(rng, hidden_dim, hidden_dim)?,
            bh: Vector::zeros(hidden_dim),
        })
    }

    fn zeros(input_dim: usize, hidden_dim: usize) -> GruLayerParams {
        GruLayerParams {
            wz: Matrix::zeros(hidden_dim, input_dim),
            uz: Matrix::zeros(hidden_dim, hidden_dim),
            bz: Vector::zeros(hidden_dim),
            wr: Matrix::zeros(hidden_dim, input_dim),
            ur: Matrix::zeros(hidden_dim, hidden_dim),
            br: Vector::zeros(hidden_dim),
            wh: Matrix::zeros(hidden_dim, input_dim),
            uh: Matrix::zeros(hidden_dim, hidden_dim),
            bh: Vector::zeros(hidden_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.wz.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.wz.rows()
    }
}

/// The classification head: probs = softmax(W2 tanh(W1 h + b1) + b2).
#[derive(Debug, Clone, PartialEq)]
pub struct OutputHead {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

impl OutputHead {
    pub fn new(hidden_dim: usize, head_dim: usize, rng: &mut Rng) -> Result<OutputHead, NumericsError> {
        Ok(OutputHead {
            w1: glorot_uniform(rng, head_dim, hidden_dim)?,
            b1: Vector::zeros(head_dim),
            w2: glorot_uniform(rng, OUTPUT_CLASSES, head_dim)?,
            b2: Vector::zeros(OUTPUT_CLASSES),
        })
    }

    fn zeros(hidden_dim: usize, head_dim: usize) -> OutputHead {
        OutputHead {
            w1: Matrix::zeros(head_dim, hidden_dim),
            b1: Vector::zeros(head_dim),
            w2: Matrix::zeros(OUTPUT_CLASSES, head_dim),
            b2: Vector::zeros(OUTPUT_CLASSES),
        }
    }
}

/// Every trainable array of the model. Gradients reuse the same shape, so
/// the optimizer can walk parameters and gradients in lockstep.
#[derive(Debug, Clone, PartialEq)]
pub struct DgruParams {
    pub layers: Vec<GruLayerParams>,
    pub head: OutputHead,
}

/// Same shapes as [`DgruParams`]; one entry per parameter array.
pub type Gradients = DgruParams;

impl DgruParams {
    pub fn zeros_like(&self) -> DgruParams {
        DgruParams {
            layers: self
                .layers
                .iter()
                .map(|l| GruLayerParams::zeros(l.input_dim(), l.hidden_dim()))
                .collect(),
            head: OutputHead::zeros(self.head.w1.cols(), self.head.w1.rows()),
        }
    }

    /// All arrays with stable names, in a fixed traversal order. The order
    /// is part of the contract: optimizer state, gradient accumulation, and
    /// diagnostics rely on parameters and gradients lining up index by index.
    pub fn arrays(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(self.layers.len() * 9 + 4);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers[{i}].wz"), l.wz.data()));
            out.push((format!("layers[{i}].uz"), l.uz.data()));
            out.push((format!("layers[{i}].bz"), l.bz.data()));
            out.push((format!("layers[{i}].wr"), l.wr.data()));
            out.push((format!("layers[{i}].ur"), l.ur.data()));
            out.push((format!("layers[{i}].br"), l.br.data()));
            out.push((format!("layers[{i}].wh"), l.wh.data()));
            out.push((format!("layers[{i}].uh"), l.uh.data()));
            out.push((format!("layers[{i}].bh"), l.bh.data()));
        }
        out.push(("head.w1".into(), self.head.w1.data()));
        out.push(("head.b1".into(), self.head.b1.data()));
        out.push(("head.w2".into(), self.head.w2.data()));
        out.push(("head.b2".into(), self.head.b2.data()));
        out
    }

    /// Mutable variant of [`DgruParams::arrays`], same order.
    pub fn arrays_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(self.layers.len() * 9 + 4);
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers[{i}].wz"), l.wz.data_mut()));
            out.push((format!("layers[{i}].uz"), l.uz.data_mut()));
            out.push((format!("layers[{i}].bz"), l.bz.data_mut()));
            out.push((format!("layers[{i}].wr"), l.wr.data_mut()));
            out.push((format!("layers[{i}].ur"), l.ur.data_mut()));
            out.push((format!("layers[{i}].br"), l.br.data_mut()));
            out.push((format!("layers[{i}].wh"), l.wh.data_mut()));
            out.push((format!("layers[{i}].uh"), l.uh.data_mut()));
            out.push((format!("layers[{i}].bh"), l.bh.data_mut()));
        }
        out.push(("head.w1".into(), self.head.w1.data_mut()));
        out.push(("head.b1".into(), self.head.b1.data_mut()));
        out.push(("head.w2".into(), self.head.w2.data_mut()));
        out.push(("head.b2".into(), self.head.b2.data_mut()));
        out
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &DgruParams) -> Result<(), ModelError> {
        let theirs = other.arrays();
        let mut mine = self.arrays_mut();
        if mine.len() != theirs.len() {
            return Err(ModelError::TraceMismatch {
                reason: format!(
                    "parameter sets have {} and {} arrays",
                    mine.len(),
                    theirs.len()
                ),
            });
        }
        for ((name, a), (_, b)) in mine.iter_mut().zip(theirs.iter()) {
            if a.len() != b.len() {
                return Err(ModelError::TraceMismatch {
                    reason: format!("{name} has lengths {} and {}", a.len(), b.len()),
                });
            }
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for (_, a) in self.arrays_mut() {
            for x in a {
                *x *= k;
            }
        }
    }
}

/// Model hyperparameters. `head_dim` defaults to `hidden_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub head_dim: usize,
    pub window_size: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            hidden_dim: 256,
            num_layers: 2,
            head_dim: 256,
            window_size: 40,
        }
    }
}

/// The classifier: GRU stack, output head, and the input normalization it
/// was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct DgruModel {
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub window_size: usize,
    pub params: DgruParams,
    pub norm: NormStats,
}

impl DgruModel {
    /// Fresh Glorot-initialized model. Matrices are drawn in a fixed order
    /// (per layer: wz, uz, wr, ur, wh, uh; then head w1, w2; biases start at
    /// zero), so a seed fully determines the initialization.
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<DgruModel, ModelError> {
        if cfg.hidden_dim == 0 || cfg.num_layers == 0 || cfg.head_dim == 0 || cfg.window_size == 0 {
            return Err(ModelError::Config {
                reason: format!(
                    "hidden_dim, num_layers, head_dim, and window_size must all be nonzero \
                     (got {}, {}, {}, {})",
                    cfg.hidden_dim, cfg.num_layers, cfg.head_dim, cfg.window_size
                ),
            });
        }
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let input_dim = if i == 0 { INPUT_DIM } else { cfg.hidden_dim };
            layers.push(GruLayerParams::new(input_dim, cfg.hidden_dim, rng)?);
        }
        let head = OutputHead::new(cfg.hidden_dim, cfg.head_dim, rng)?;
        Ok(DgruModel {
            hidden_dim: cfg.hidden_dim,
            head_dim: cfg.head_dim,
            window_size: cfg.window_size,
            params: DgruParams { layers, head },
            norm: NormStats::identity(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.params.layers.len()
    }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Everything the backward pass needs from one cell evaluation.
#[derive(Debug, Clone)]
pub struct CellTrace {
    pub x: Vector,
    pub h_prev: Vector,
    pub z: Vector,
    pub r: Vector,
    pub c: Vector,
    pub h: Vector,
}

/// Intermediate values of a full forward pass, indexed `steps[t][layer]`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub steps: Vec<Vec<CellTrace>>,
    /// tanh activations of the head's first affine.
    pub head_act: Vector,
    pub probs: Vector,
}

fn cell_forward(
    layer: &GruLayerParams,
    x: &Vector,
    h_prev: &Vector,
) -> Result<(Vector, Vector, Vector, Vector), NumericsError> {
    let z = sigmoid(&layer.wz.matvec(x)?.add(&layer.uz.matvec(h_prev)?)?.add(&layer.bz)?);
    let r = sigmoid(&layer.wr.matvec(x)?.add(&layer.ur.matvec(h_prev)?)?.add(&layer.br)?);
    let rh = r.hadamard(h_prev)?;
    let c = tanh(&layer.wh.matvec(x)?.add(&layer.uh.matvec(&rh)?)?.add(&layer.bh)?);
    let mut h = Vector::zeros(h_prev.len());
    for i in 0..h.len() {
        h[i] = (1.0 - z[i]) * h_prev[i] + z[i] * c[i];
    }
    Ok((h, z, r, c))
}

/// One GRU cell evaluation, returning the new hidden state and its trace.
pub fn gru_cell_step(
    layer: &GruLayerParams,
    x: &Vector,
    h_prev: &Vector,
) -> Result<(Vector, CellTrace), ModelError> {
    let (h, z, r, c) = cell_forward(layer, x, h_prev)?;
    let trace = CellTrace {
        x: x.clone(),
        h_prev: h_prev.clone(),
        z,
        r,
        c,
        h: h.clone(),
    };
    Ok((h, trace))
}

fn head_forward(head: &OutputHead, h_top: &Vector) -> Result<(Vector, Vector), NumericsError> {
    let s = tanh(&head.w1.matvec(h_top)?.add(&head.b1)?);
    let logits = head.w2.matvec(&s)?.add(&head.b2)?;
    let probs = softmax(&logits)?;
    Ok((s, probs))
}

fn check_window(model: &DgruModel, values: &[[f64; 3]]) -> Result<(), ModelError> {
    if values.len() != model.window_size {
        return Err(ModelError::WindowLength {
            got: values.len(),
            expected: model.window_size,
        });
    }
    Ok(())
}

/// Full forward pass with trace, for training. Hidden states start at zero;
/// normalization is applied to the raw window first.
pub fn forward(model: &DgruModel, values: &[[f64; 3]]) -> Result<(Vector, ForwardTrace), ModelError> {
    check_window(model, values)?;
    let mut hidden: Vec<Vector> = model
        .params
        .layers
        .iter()
        .map(|l| Vector::zeros(l.hidden_dim()))
        .collect();
    let mut steps = Vec::with_capacity(values.len());
    for raw in values {
        let mut x = Vector::from_vec(model.norm.normalize(*raw).to_vec());
        let mut layer_traces = Vec::with_capacity(model.num_layers());
        for (li, layer) in model.params.layers.iter().enumerate() {
            let (h, trace) = gru_cell_step(layer, &x, &hidden[li])?;
            hidden[li] = h.clone();
            x = h;
            layer_traces.push(trace);
        }
        steps.push(layer_traces);
    }
    let h_top = hidden.last().expect("at least one layer").clone();
    let (head_act, probs) = head_forward(&model.params.head, &h_top)?;
    Ok((
        probs.clone(),
        ForwardTrace {
            steps,
            head_act,
            probs,
        },
    ))
}

/// Forward pass without trace bookkeeping, for inference. Produces exactly
/// the same probabilities as [`forward`]: both run the same cell and head
/// code, only the bookkeeping differs.
pub fn forward_probs(model: &DgruModel, values: &[[f64; 3]]) -> Result<Vector, ModelError> {
    check_window(model, values)?;
    let mut hidden: Vec<Vector> = model
        .params
        .layers
        .iter()
        .map(|l| Vector::zeros(l.hidden_dim()))
        .collect();
    for raw in values {
        let mut x = Vector::from_vec(model.norm.normalize(*raw).to_vec());
        for (li, layer) in model.params.layers.iter().enumerate() {
            let (h, _, _, _) = cell_forward(layer, &x, &hidden[li])?;
            hidden[li] = h.clone();
            x = h;
        }
    }
    let (_, probs) = head_forward(&model.params.head, hidden.last().expect("at least one layer"))?;
    Ok(probs)
}

/// Classify a window: (label, fall probability). Ties go to non-fall.
pub fn predict_values(model: &DgruModel, values: &[[f64; 3]]) -> Result<(Label, f64), ModelError> {
    let probs = forward_probs(model, values)?;
    let label = if probs[1] > probs[0] { Label::Fall } else { Label::NonFall };
    Ok((label, probs[1]))
}

pub fn predict(model: &DgruModel, instance: &WindowInstance) -> Result<(Label, f64), ModelError> {
    predict_values(model, &instance.values)
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Backpropagation through time for one window, given its forward trace.
///
/// Head gradients use the softmax/cross-entropy identity
/// `dlogits = probs - onehot(target)`. Each cell inverts the forward
/// equations: with incoming `dh`,
///
/// ```text
/// dz = dh . (c - h_prev)          dc = dh . z
/// dac = dc . (1 - c^2)            drh = Uh^T dac
/// dr = drh . h_prev               daz = dz . z . (1 - z)
/// dar = dr . r . (1 - r)
/// dh_prev = dh . (1 - z) + drh . r + Uz^T daz + Ur^T dar
/// dx      = Wz^T daz + Wr^T dar + Wh^T dac
/// ```
///
/// `dx` of layer l is the `dh` contribution from above for layer l-1 at the
/// same timestep; `dh_prev` carries to timestep t-1 of the same layer.
pub fn backward(
    model: &DgruModel,
    trace: &ForwardTrace,
    target: usize,
) -> Result<Gradients, ModelError> {
    if target >= OUTPUT_CLASSES {
        return Err(ModelError::Target { target });
    }
    let num_layers = model.num_layers();
    if trace.steps.len() != model.window_size {
        return Err(ModelError::TraceMismatch {
            reason: format!(
                "trace has {} steps, model window_size is {}",
                trace.steps.len(),
                model.window_size
            ),
        });
    }
    if trace.steps.iter().any(|s| s.len() != num_layers) {
        return Err(ModelError::TraceMismatch {
            reason: "trace layer count does not match the model".into(),
        });
    }

    let mut grads = model.params.zeros_like();
    let head = &model.params.head;
    let h_top = &trace.steps[model.window_size - 1][num_layers - 1].h;

    // Head: dlogits = probs - onehot(target).
    let mut dlogits = trace.probs.clone();
    dlogits[target] -= 1.0;
    grads.head.w2.add_outer_product(&dlogits, &trace.head_act)?;
    grads.head.b2.add_assign(&dlogits)?;
    let ds = head.w2.matvec_transpose(&dlogits)?;
    let mut da1 = Vector::zeros(ds.len());
    for i in 0..da1.len() {
        da1[i] = ds[i] * (1.0 - trace.head_act[i] * trace.head_act[i]);
    }
    grads.head.w1.add_outer_product(&da1, h_top)?;
    grads.head.b1.add_assign(&da1)?;

    // dh flowing into each layer's hidden state from the future (t+1).
    let mut dh_rec: Vec<Vector> = model
        .params
        .layers
        .iter()
        .map(|l| Vector::zeros(l.hidden_dim()))
        .collect();
    // The head gradient enters the top layer at the final timestep.
    dh_rec[num_layers - 1] = head.w1.matvec_transpose(&da1)?;

    for t in (0..model.window_size).rev() {
        // dh from the layer above at this same timestep (none for the top).
        let mut dh_above: Option<Vector> = None;
        for li in (0..num_layers).rev() {
            let cell = &trace.steps[t][li];
            let layer = &model.params.layers[li];
            let g = &mut grads.layers[li];

            let mut dh = std::mem::replace(&mut dh_rec[li], Vector::zeros(0));
            if let Some(extra) = dh_above.take() {
                dh.add_assign(&extra)?;
            }

            let n = dh.len();
            let mut dz = Vector::zeros(n);
            let mut dac = Vector::zeros(n);
            let mut dh_prev = Vector::zeros(n);
            for i in 0..n {
                dz[i] = dh[i] * (cell.c[i] - cell.h_prev[i]);
                let dc = dh[i] * cell.z[i];
                dac[i] = dc * (1.0 - cell.c[i] * cell.c[i]);
                dh_prev[i] = dh[i] * (1.0 - cell.z[i]);
            }

            let rh = cell.r.hadamard(&cell.h_prev)?;
            g.wh.add_outer_product(&dac, &cell.x)?;
            g.uh.add_outer_product(&dac, &rh)?;
            g.bh.add_assign(&dac)?;

            let drh = layer.uh.matvec_transpose(&dac)?;
            let mut dar = Vector::zeros(n);
            let mut daz = Vector::zeros(n);
            for i in 0..n {
                let dr = drh[i] * cell.h_prev[i];
                dar[i] = dr * cell.r[i] * (1.0 - cell.r[i]);
                daz[i] = dz[i] * cell.z[i] * (1.0 - cell.z[i]);
                dh_prev[i] += drh[i] * cell.r[i];
            }

            g.wz.add_outer_product(&daz, &cell.x)?;
            g.uz.add_outer_product(&daz, &cell.h_prev)?;
            g.bz.add_assign(&daz)?;
            g.wr.add_outer_product(&dar, &cell.x)?;
            g.ur.add_outer_product(&dar, &cell.h_prev)?;
            g.br.add_assign(&dar)?;

            dh_prev.add_assign(&layer.uz.matvec_transpose(&daz)?)?;
            dh_prev.add_assign(&layer.ur.matvec_transpose(&dar)?)?;
            dh_rec[li] = dh_prev;

            if li > 0 {
                let mut dx = layer.wz.matvec_transpose(&daz)?;
                dx.add_assign(&layer.wr.matvec_transpose(&dar)?)?;
                dx.add_assign(&layer.wh.matvec_transpose(&dac)?)?;
                dh_above = Some(dx);
            }
        }
    }

    Ok(grads)
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

/// Result of a finite-difference sweep over every parameter component.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub components_checked: usize,
}

/// Compare [`backward`] against central finite differences of the loss for
/// every single parameter component. Relative error uses a denominator floor
/// of 1e-6 so near-zero gradients are compared absolutely. A healthy
/// implementation stays below 1e-4 with a step of 1e-5; this is a
/// verification utility, not something to run in production loops.
pub fn check_gradients(
    model: &DgruModel,
    values: &[[f64; 3]],
    target: usize,
    epsilon: f64,
) -> Result<GradientCheck, ModelError> {
    let (_, trace) = forward(model, values)?;
    let analytic = backward(model, &trace, target)?;
    let analytic_arrays: Vec<(String, Vec<f64>)> = analytic
        .arrays()
        .into_iter()
        .map(|(name, data)| (name, data.to_vec()))
        .collect();

    let loss_of = |m: &DgruModel| -> Result<f64, ModelError> {
        let probs = forward_probs(m, values)?;
        Ok(cross_entropy(&probs, target)?)
    };

    let mut work = model.clone();
    let mut max_rel_error: f64 = 0.0;
    let mut worst_param = String::new();
    let mut components_checked = 0;

    for (ai, (name, grad)) in analytic_arrays.iter().enumerate() {
        for i in 0..grad.len() {
            let original = work.params.arrays()[ai].1[i];

            work.params.arrays_mut()[ai].1[i] = original + epsilon;
            let loss_plus = loss_of(&work)?;
            work.params.arrays_mut()[ai].1[i] = original - epsilon;
            let loss_minus = loss_of(&work)?;
            work.params.arrays_mut()[ai].1[i] = original;

            let numeric = (loss_plus - loss_minus) / (2.0 * epsilon);
            let denom = numeric.abs().max(grad[i].abs()).max(1e-6);
            let rel = (numeric - grad[i]).abs() / denom;
            if rel > max_rel_error {
                max_rel_error = rel;
                worst_param = format!("{name}[{i}]");
            }
            components_checked += 1;
        }
    }

    Ok(GradientCheck {
        max_rel_error,
        worst_param,
        components_checked,
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ArchFile {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    head_dim: usize,
    output_dim: usize,
    window_size: usize,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    wz: Vec<Vec<f64>>,
    uz: Vec<Vec<f64>>,
    bz: Vec<f64>,
    wr: Vec<Vec<f64>>,
    ur: Vec<Vec<f64>>,
    br: Vec<f64>,
    wh: Vec<Vec<f64>>,
    uh: Vec<Vec<f64>>,
    bh: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    arch: ArchFile,
    norm: NormStats,
    layers: Vec<LayerFile>,
    head: HeadFile,
}

fn model_to_file(model: &DgruModel) -> ModelFile {
    ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        arch: ArchFile {
            input_dim: INPUT_DIM,
            hidden_dims: model.params.layers.iter().map(|l| l.hidden_dim()).collect(),
            head_dim: model.head_dim,
            output_dim: OUTPUT_CLASSES,
            window_size: model.window_size,
        },
        norm: model.norm.clone(),
        layers: model
            .params
            .layers
            .iter()
            .map(|l| LayerFile {
                wz: l.wz.to_rows(),
                uz: l.uz.to_rows(),
                bz: l.bz.data().to_vec(),
                wr: l.wr.to_rows(),
                ur: l.ur.to_rows(),
                br: l.br.data().to_vec(),
                wh: l.wh.to_rows(),
                uh: l.uh.to_rows(),
                bh: l.bh.data().to_vec(),
            })
            .collect(),
        head: HeadFile {
            w1: model.params.head.w1.to_rows(),
            b1: model.params.head.b1.data().to_vec(),
            w2: model.params.head.w2.to_rows(),
            b2: model.params.head.b2.data().to_vec(),
        },
    }
}

struct FieldCheck<'a> {
    path: &'a Path,
}

impl<'a> FieldCheck<'a> {
    fn invalid(&self, field: &str, reason: impl Into<String>) -> ModelError {
        ModelError::InvalidField {
            path: self.path.display().to_string(),
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    fn matrix(&self, field: &str, rows: &[Vec<f64>], want_rows: usize, want_cols: usize)
        -> Result<Matrix, ModelError>
    {
        let m = Matrix::from_rows(rows).map_err(|e| self.invalid(field, e.to_string()))?;
        if m.rows() != want_rows || m.cols() != want_cols {
            return Err(self.invalid(
                field,
                format!("expected {want_rows}x{want_cols}, got {}x{}", m.rows(), m.cols()),
            ));
        }
        Ok(m)
    }

    fn vector(&self, field: &str, data: &[f64], want_len: usize) -> Result<Vector, ModelError> {
        if data.len() != want_len {
            return Err(self.invalid(
                field,
                format!("expected length {want_len}, got {}", data.len()),
            ));
        }
        Ok(Vector::from_vec(data.to_vec()))
    }
}

fn model_from_file(file: ModelFile, path: &Path) -> Result<DgruModel, ModelError> {
    let ck = FieldCheck { path };
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion {
            path: path.display().to_string(),
            found: file.format_version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let arch = &file.arch;
    if arch.input_dim != INPUT_DIM {
        return Err(ck.invalid("arch.input_dim", format!("only {INPUT_DIM}-channel input is supported")));
    }
    if arch.output_dim != OUTPUT_CLASSES {
        return Err(ck.invalid("arch.output_dim", format!("must be {OUTPUT_CLASSES}")));
    }
    if arch.window_size == 0 {
        return Err(ck.invalid("arch.window_size", "must be nonzero"));
    }
    if arch.hidden_dims.is_empty() {
        return Err(ck.invalid("arch.hidden_dims", "at least one layer required"));
    }
    let hidden = arch.hidden_dims[0];
    if hidden == 0 || arch.head_dim == 0 {
        return Err(ck.invalid("arch", "hidden and head dimensions must be nonzero"));
    }
    if arch.hidden_dims.iter().any(|&h| h != hidden) {
        return Err(ck.invalid("arch.hidden_dims", "stacked layers must share one width"));
    }
    if file.layers.len() != arch.hidden_dims.len() {
        return Err(ck.invalid(
            "layers",
            format!(
                "arch lists {} layers but {} are present",
                arch.hidden_dims.len(),
                file.layers.len()
            ),
        ));
    }

    let mut layers = Vec::with_capacity(file.layers.len());
    for (i, l) in file.layers.iter().enumerate() {
        let in_dim = if i == 0 { INPUT_DIM } else { hidden };
        let f = |name: &str| format!("layers[{i}].{name}");
        layers.push(GruLayerParams {
            wz: ck.matrix(&f("wz"), &l.wz, hidden, in_dim)?,
            uz: ck.matrix(&f("uz"), &l.uz, hidden, hidden)?,
            bz: ck.vector(&f("bz"), &l.bz, hidden)?,
            wr: ck.matrix(&f("wr"), &l.wr, hidden, in_dim)?,
            ur: ck.matrix(&f("ur"), &l.ur, hidden, hidden)?,
            br: ck.vector(&f("br"), &l.br, hidden)?,
            wh: ck.matrix(&f("wh"), &l.wh, hidden, in_dim)?,
            uh: ck.matrix(&f("uh"), &l.uh, hidden, hidden)?,
            bh: ck.vector(&f("bh"), &l.bh, hidden)?,
        });
    }
    let head = OutputHead {
        w1: ck.matrix("head.w1", &file.head.w1, arch.head_dim, hidden)?,
        b1: ck.vector("head.b1", &file.head.b1, arch.head_dim)?,
        w2: ck.matrix("head.w2", &file.head.w2, OUTPUT_CLASSES, arch.head_dim)?,
        b2: ck.vector("head.b2", &file.head.b2, OUTPUT_CLASSES)?,
    };

    for c in 0..3 {
        if !file.norm.mean[c].is_finite() || !file.norm.std[c].is_finite() {
            return Err(ck.invalid("norm", "mean and std must be finite"));
        }
        if file.norm.enabled && file.norm.std[c] <= 0.0 {
            return Err(ck.invalid("norm.std", "must be positive when normalization is enabled"));
        }
    }

    let model = DgruModel {
        hidden_dim: hidden,
        head_dim: arch.head_dim,
        window_size: arch.window_size,
        params: DgruParams { layers, head },
        norm: file.norm,
    };
    for (name, data) in model.params.arrays() {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ck.invalid(&name, "contains a non-finite value"));
        }
    }
    Ok(model)
}

/// Write the model as pretty-printed JSON. Floats are emitted in shortest
/// round-trip form, so save -> load -> save is byte-stable.
pub fn save_model(model: &DgruModel, path: &Path) -> Result<(), ModelError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &model_to_file(model)).map_err(|e| ModelError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    use std::io::Write;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DgruModel, ModelError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let parsed: ModelFile =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| ModelError::Json {
            path: path.display().to_string(),
            source: e,
        })?;
    model_from_file(parsed, path)
}
