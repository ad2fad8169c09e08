//! Classifiers for the direction of the next mid-price move.
//!
//! Every family stores its parameters in one flat `Vec<f64>`; gradients,
//! optimizer state and checkpoints share that layout.

mod linear;
mod lstm;
mod mlp;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Move, SequenceSample, Window};

pub use linear::{linear_forward, LinearParams};
pub use lstm::{lstm_forward, lstm_forward_from, LstmParams, LstmState};
pub use mlp::{mlp_forward, MlpParams};

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite activation at step {step}")]
    NonFiniteActivation { step: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub p_up: f64,
    pub p_down: f64,
}

impl Prediction {
    /// Two-way softmax of `(z_up, z_down)`.
    pub fn from_logits(z_up: f64, z_down: f64) -> Self {
        let p_up = 1.0 / (1.0 + (z_down - z_up).exp());
        Prediction {
            p_up,
            p_down: 1.0 - p_up,
        }
    }

    pub fn prob(&self, m: Move) -> f64 {
        match m {
            Move::Up => self.p_up,
            Move::Down => self.p_down,
        }
    }
}

/// `Up` iff `p_up > 0.5`; an exact tie resolves to `Up`.
pub fn predict_direction(pred: &Prediction) -> Move {
    if pred.p_up >= 0.5 {
        Move::Up
    } else {
        Move::Down
    }
}

/// Which unrolled steps contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Only the label following the final state of the window.
    #[default]
    LastStep,
    /// Every step of the window that has a label (padding excluded).
    PerStep,
}

fn default_features() -> usize {
    8
}
fn default_units() -> usize {
    50
}
fn default_layers() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Recurrent linear features feeding a logistic output.
    Linear {
        #[serde(default = "default_features")]
        features: usize,
    },
    /// Feedforward ReLU network on the latest state only.
    Mlp { hidden: Vec<usize> },
    /// Stacked LSTM, one ReLU layer, softmax head.
    Lstm {
        #[serde(default = "default_units")]
        units: usize,
        #[serde(default = "default_layers")]
        layers: usize,
        /// Width of the ReLU layer; defaults to `units`.
        #[serde(default)]
        relu_units: Option<usize>,
    },
}

impl Architecture {
    pub fn lstm(units: usize) -> Self {
        Architecture::Lstm {
            units,
            layers: 3,
            relu_units: None,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Architecture::Linear { .. } => "linear",
            Architecture::Mlp { .. } => "mlp",
            Architecture::Lstm { .. } => "lstm",
        }
    }

    fn validate(&self, input_dim: usize) -> Result<(), ModelError> {
        let bad = |s: &str| Err(ModelError::InvalidArchitecture(s.into()));
        if input_dim == 0 {
            return bad("input dimension must be positive");
        }
        match self {
            Architecture::Linear { features } if *features == 0 => bad("features must be positive"),
            Architecture::Mlp { hidden } if hidden.iter().any(|&h| h == 0) => {
                bad("hidden widths must be positive")
            }
            Architecture::Lstm {
                units,
                layers,
                relu_units,
            } if *units == 0 || *layers == 0 || *relu_units == Some(0) => {
                bad("units, layers and relu_units must be positive")
            }
            _ => Ok(()),
        }
    }
}

/// Per-step loss targets for one sample.
pub(crate) fn targets(w: &Window, label: Move, mode: LossMode) -> Vec<(usize, Move)> {
    let last = w.len() - 1;
    match mode {
        LossMode::LastStep => vec![(last, label)],
        LossMode::PerStep => (0..last)
            .filter_map(|t| w.step_label(t).map(|m| (t, m)))
            .chain(std::iter::once((last, label)))
            .collect(),
    }
}

/// Loss of one target and the logit gradient scaled by `weight`.
pub(crate) fn softmax_loss(z_up: f64, z_down: f64, label: Move, weight: f64) -> (f64, Prediction, [f64; 2]) {
    let p = Prediction::from_logits(z_up, z_down);
    let prob = p.prob(label);
    let loss = -prob.max(PROB_FLOOR).ln();
    let (y_up, y_down) = match label {
        Move::Up => (1.0, 0.0),
        Move::Down => (0.0, 1.0),
    };
    let dz = if prob < PROB_FLOOR {
        [0.0, 0.0]
    } else {
        [weight * (p.p_up - y_up), weight * (p.p_down - y_down)]
    };
    (loss, p, dz)
}

/// `out += M x` for a row-major `rows × x.len()` matrix.
#[inline]
pub(crate) fn gemv_acc(out: &mut [f64], m: &[f64], x: &[f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Mᵀ y` for a row-major `y.len() × out.len()` matrix.
#[inline]
pub(crate) fn gemv_t_acc(out: &mut [f64], m: &[f64], y: &[f64]) {
    let cols = out.len();
    for (yi, row) in y.iter().zip(m.chunks_exact(cols)) {
        if *yi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += yi * a;
        }
    }
}

/// `g += y xᵀ`.
#[inline]
pub(crate) fn outer_acc(g: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    for (yi, row) in y.iter().zip(g.chunks_exact_mut(cols)) {
        if *yi == 0.0 {
            continue;
        }
        for (gv, xv) in row.iter_mut().zip(x) {
            *gv += yi * xv;
        }
    }
}

/// Fills `w` uniformly in `±1/√fan_in`.
pub(crate) fn fill_uniform(w: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng) {
    let r = 1.0 / (fan_in as f64).sqrt();
    for v in w {
        *v = rng.gen_range(-r..=r);
    }
}

fn check_window(w: &Window, dim: usize) -> Result<(), ModelError> {
    if w.dim() != dim {
        return Err(ModelError::DimensionMismatch {
            expected: dim,
            found: w.dim(),
        });
    }
    Ok(())
}

/// A classifier of any family.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(LinearParams),
    Mlp(MlpParams),
    Lstm(LstmParams),
}

impl Model {
    /// Seeded initialization: weights uniform in `±1/√fan_in`, biases zero
    /// except LSTM forget gates at +1, linear recurrence scaled to be stable.
    pub fn init(arch: &Architecture, input_dim: usize, seed: u64) -> Result<Self, ModelError> {
        let mut m = Model::zeros(arch, input_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match &mut m {
            Model::Linear(p) => p.randomize(&mut rng),
            Model::Mlp(p) => p.randomize(&mut rng),
            Model::Lstm(p) => p.randomize(&mut rng),
        }
        Ok(m)
    }

    pub fn zeros(arch: &Architecture, input_dim: usize) -> Result<Self, ModelError> {
        arch.validate(input_dim)?;
        Ok(match arch {
            Architecture::Linear { features } => Model::Linear(LinearParams::zeros(input_dim, *features)),
            Architecture::Mlp { hidden } => Model::Mlp(MlpParams::zeros(input_dim, hidden)),
            Architecture::Lstm {
                units,
                layers,
                relu_units,
            } => Model::Lstm(LstmParams::zeros(
                input_dim,
                *units,
                *layers,
                relu_units.unwrap_or(*units),
            )),
        })
    }

    /// Rebuilds a model from a flat parameter vector.
    pub fn from_params(arch: &Architecture, input_dim: usize, theta: Vec<f64>) -> Result<Self, ModelError> {
        let mut m = Model::zeros(arch, input_dim)?;
        if theta.len() != m.n_params() {
            return Err(ModelError::DimensionMismatch {
                expected: m.n_params(),
                found: theta.len(),
            });
        }
        m.params_mut().copy_from_slice(&theta);
        Ok(m)
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Model::Linear(p) => Architecture::Linear { features: p.features },
            Model::Mlp(p) => Architecture::Mlp {
                hidden: p.hidden.clone(),
            },
            Model::Lstm(p) => Architecture::Lstm {
                units: p.units,
                layers: p.layers,
                relu_units: (p.relu_units != p.units).then_some(p.relu_units),
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Linear(p) => p.input_dim,
            Model::Mlp(p) => p.input_dim,
            Model::Lstm(p) => p.input_dim,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Model::Linear(p) => &p.theta,
            Model::Mlp(p) => &p.theta,
            Model::Lstm(p) => &p.theta,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Model::Linear(p) => &mut p.theta,
            Model::Mlp(p) => &mut p.theta,
            Model::Lstm(p) => &mut p.theta,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params().len()
    }

    /// `true` for bias coordinates, which the L2 penalty skips.
    pub fn bias_mask(&self) -> Vec<bool> {
        match self {
            Model::Linear(p) => p.bias_mask(),
            Model::Mlp(p) => p.bias_mask(),
            Model::Lstm(p) => p.bias_mask(),
        }
    }

    /// `‖θ‖²` over weights only.
    pub fn weight_norm_sq(&self) -> f64 {
        self.params()
            .iter()
            .zip(self.bias_mask())
            .filter(|(_, b)| !b)
            .map(|(v, _)| v * v)
            .sum()
    }

    /// Prediction after the final state of `w`.
    pub fn predict(&self, w: &Window) -> Result<Prediction, ModelError> {
        check_window(w, self.input_dim())?;
        let last = w.len() - 1;
        match self {
            Model::Mlp(p) => mlp_forward(p, w.last()),
            _ => Ok(*self.predict_steps(w)?.get(last).expect("non-empty window")),
        }
    }

    /// Prediction after every state of `w`.
    pub fn predict_steps(&self, w: &Window) -> Result<Vec<Prediction>, ModelError> {
        check_window(w, self.input_dim())?;
        match self {
            Model::Linear(p) => linear_forward(p, w),
            Model::Mlp(p) => (0..w.len()).map(|t| mlp_forward(p, w.step(t))).collect(),
            Model::Lstm(p) => lstm_forward(p, w).map(|(preds, _)| preds),
        }
    }

    /// Mean loss of one sample over its targets; adds `weight ×` its
    /// gradient into `grad`. The L2 term is not included.
    pub fn sample_loss_grad(
        &self,
        w: &Window,
        label: Move,
        mode: LossMode,
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        check_window(w, self.input_dim())?;
        let tg = targets(w, label, mode);
        let per = weight / tg.len() as f64;
        let total = match self {
            Model::Linear(p) => p.backward(w, &tg, per, grad)?,
            Model::Mlp(p) => p.backward(w, &tg, per, grad)?,
            Model::Lstm(p) => p.backward(w, &tg, per, grad)?,
        };
        Ok(total / tg.len() as f64)
    }

    /// Batch-mean regularized loss and its exact gradient.
    pub fn loss_and_gradient(
        &self,
        batch: &[SequenceSample],
        l2: f64,
        mode: LossMode,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut grad = vec![0.0; self.n_params()];
        let weight = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for s in batch {
            loss += weight * self.sample_loss_grad(&s.window, s.label, mode, weight, &mut grad)?;
        }
        loss += self.add_l2(l2, &mut grad);
        Ok((loss, grad))
    }

    /// Adds the L2 gradient into `grad`, returning the penalty value.
    pub fn add_l2(&self, l2: f64, grad: &mut [f64]) -> f64 {
        if l2 == 0.0 {
            return 0.0;
        }
        let mut pen = 0.0;
        for ((g, v), b) in grad.iter_mut().zip(self.params()).zip(self.bias_mask()) {
            if !b {
                *g += 2.0 * l2 * v;
                pen += v * v;
            }
        }
        l2 * pen
    }

    /// Batch-mean regularized loss without gradients.
    pub fn loss(&self, batch: &[SequenceSample], l2: f64, mode: LossMode) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut total = 0.0;
        for s in batch {
            let preds = match mode {
                LossMode::LastStep => vec![self.predict(&s.window)?],
                LossMode::PerStep => self.predict_steps(&s.window)?,
            };
            let tg = targets(&s.window, s.label, mode);
            let ls: Vec<Move> = tg.iter().map(|t| t.1).collect();
            let ps: Vec<Prediction> = match mode {
                LossMode::LastStep => preds,
                LossMode::PerStep => tg.iter().map(|t| preds[t.0]).collect(),
            };
            total += nll_loss(&ps, &ls, 0.0, self);
        }
        Ok(total / batch.len() as f64 + l2 * self.weight_norm_sq())
    }
}

/// Mean `-ln p(label)` plus `l2·‖θ‖²` (biases excluded).
pub fn nll_loss(preds: &[Prediction], labels: &[Move], l2: f64, model: &Model) -> f64 {
    assert_eq!(preds.len(), labels.len(), "one label per prediction");
    assert!(l2 >= 0.0);
    let data = if preds.is_empty() {
        0.0
    } else {
        preds
            .iter()
            .zip(labels)
            .map(|(p, &m)| -p.prob(m).max(PROB_FLOOR).ln())
            .sum::<f64>()
            / preds.len() as f64
    };
    let pen = if l2 == 0.0 { 0.0 } else { l2 * model.weight_norm_sq() };
    data + pen
}
