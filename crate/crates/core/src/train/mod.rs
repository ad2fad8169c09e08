//! Minibatch training over truncated-BPTT windows.
//!
//! Synchronous training is a pure function of the initial model, the data
//! and [`OptConfig`]. The asynchronous trainer runs worker threads against
//! one shared parameter store: each worker takes the next batch, reads the
//! current parameter version, computes a gradient outside the lock and then
//! applies it in a short critical section. Gradients older than the
//! staleness cap are dropped and counted.

mod checkpoint;

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Corpus, SampleRef, SequenceSample};
use crate::models::{LossMode, Model, ModelError};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

pub const DEFAULT_STALENESS_CAP: usize = 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at step {step}: loss {loss}, |θ| {param_norm}, |g| {grad_norm}")]
    NonFiniteLoss {
        step: u64,
        loss: f64,
        param_norm: f64,
        grad_norm: f64,
    },
    #[error("invalid optimizer config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("checkpoint checksum mismatch: {0}")]
    ChecksumMismatch(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Adam,
    Rmsprop,
    Sgd,
}

fn d_lr() -> f64 {
    1e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_rho() -> f64 {
    0.9
}
fn d_batch() -> usize {
    32
}
fn d_epochs() -> usize {
    1
}
fn d_l2() -> f64 {
    1e-5
}
fn d_clip() -> Option<f64> {
    Some(5.0)
}
fn d_eval_every() -> u64 {
    50
}
fn d_eval_samples() -> usize {
    2048
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct OptConfig {
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    /// Decay of the squared-gradient average for RMSprop.
    #[serde(default = "d_rho")]
    pub rho: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Total update budget; overrides `epochs` when set.
    #[serde(default)]
    pub steps: Option<u64>,
    #[serde(default = "d_l2")]
    pub l2: f64,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm clip; `null` disables clipping.
    #[serde(default = "d_clip")]
    pub clip_norm: Option<f64>,
    /// When set, the learning rate follows a cosine from `learning_rate`
    /// down to this fraction of it over the update budget.
    #[serde(default)]
    pub final_lr_fraction: Option<f64>,
    #[serde(default)]
    pub loss_mode: LossMode,
    /// Loss-curve resolution in updates.
    #[serde(default = "d_eval_every")]
    pub eval_every: u64,
    /// Size of the fixed subset on which initial and final loss are measured.
    #[serde(default = "d_eval_samples")]
    pub eval_samples: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &str, reason: &str| {
            Err(TrainError::InvalidConfig {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be finite and non-negative");
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("rho", self.rho)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(name, "must lie in (0, 1)");
            }
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.steps.is_none() && self.epochs == 0 {
            return bad("epochs", "must be positive when steps is unset");
        }
        if !(self.l2 >= 0.0) {
            return bad("l2", "must be non-negative");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm", "must be positive");
        }
        if matches!(self.final_lr_fraction, Some(f) if !(0.0..=1.0).contains(&f)) {
            return bad("final_lr_fraction", "must lie in [0, 1]");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be positive");
        }
        Ok(())
    }

    fn budget(&self, n_samples: usize) -> u64 {
        self.steps
            .unwrap_or((self.epochs * n_samples.div_ceil(self.batch_size)) as u64)
    }
}

/// First-order optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    horizon: Option<u64>,
}

impl Optimizer {
    pub fn new(cfg: &OptConfig, n_params: usize) -> Self {
        Optimizer {
            cfg: cfg.clone(),
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            horizon: None,
        }
    }

    /// Sets the update count over which a configured decay runs.
    pub fn with_horizon(mut self, updates: u64) -> Self {
        self.horizon = Some(updates);
        self
    }

    /// Learning rate of update number `t` (1-based).
    pub fn learning_rate(&self, t: u64) -> f64 {
        let lr = self.cfg.learning_rate;
        match (self.cfg.final_lr_fraction, self.horizon) {
            (Some(f), Some(h)) if h > 1 => {
                let x = (t.saturating_sub(1)).min(h - 1) as f64 / (h - 1) as f64;
                lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos()))
            }
            _ => lr,
        }
    }

    /// Clips `grad` in place and updates `theta`.
    pub fn step(&mut self, theta: &mut [f64], grad: &mut [f64]) {
        if let Some(c) = self.cfg.clip_norm {
            let norm = l2_norm(grad);
            if norm > c {
                let s = c / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        self.t += 1;
        let lr = self.learning_rate(self.t);
        match self.cfg.algorithm {
            Algorithm::Sgd => {
                for (p, g) in theta.iter_mut().zip(grad.iter()) {
                    *p -= lr * g;
                }
            }
            Algorithm::Rmsprop => {
                let (rho, eps) = (self.cfg.rho, self.cfg.epsilon);
                for ((p, g), v) in theta.iter_mut().zip(grad.iter()).zip(&mut self.v) {
                    *v = rho * *v + (1.0 - rho) * g * g;
                    *p -= lr * g / (v.sqrt() + eps);
                }
            }
            Algorithm::Adam => {
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon);
                let c1 = 1.0 - b1.powi(self.t.min(i32::MAX as u64) as i32);
                let c2 = 1.0 - b2.powi(self.t.min(i32::MAX as u64) as i32);
                for (((p, g), m), v) in theta
                    .iter_mut()
                    .zip(grad.iter())
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One epoch of seeded, uniformly shuffled batches; the last may be short.
pub fn tbptt_batches(refs: &[SampleRef], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<SampleRef>> {
    assert!(batch_size > 0);
    let mut order = refs.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Endless batch sequence, reshuffled every epoch.
#[derive(Debug)]
pub struct BatchStream<'a> {
    refs: &'a [SampleRef],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    current: std::vec::IntoIter<Vec<SampleRef>>,
}

impl<'a> BatchStream<'a> {
    pub fn new(refs: &'a [SampleRef], batch_size: usize, seed: u64) -> Self {
        BatchStream {
            refs,
            batch_size,
            seed,
            epoch: 0,
            current: tbptt_batches(refs, batch_size, seed, 0).into_iter(),
        }
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Vec<SampleRef>;

    fn next(&mut self) -> Option<Vec<SampleRef>> {
        if self.refs.is_empty() {
            return None;
        }
        if let Some(b) = self.current.next() {
            return Some(b);
        }
        self.epoch += 1;
        self.current = tbptt_batches(self.refs, self.batch_size, self.seed, self.epoch).into_iter();
        self.current.next()
    }
}

/// Training inputs: a corpus, the training sample references and the lag.
#[derive(Debug, Clone, Copy)]
pub struct TrainSet<'a> {
    pub corpus: &'a Corpus,
    pub refs: &'a [SampleRef],
    pub lag: usize,
}

impl<'a> TrainSet<'a> {
    pub fn new(corpus: &'a Corpus, refs: &'a [SampleRef], lag: usize) -> Self {
        TrainSet { corpus, refs, lag }
    }

    fn samples(&self, refs: &[SampleRef]) -> Vec<SequenceSample<'a>> {
        refs.iter().map(|r| self.corpus.sample(*r, self.lag)).collect()
    }

    /// Evenly spaced subset used for whole-set loss measurements.
    fn eval_refs(&self, n: usize) -> Vec<SampleRef> {
        let len = self.refs.len();
        if n == 0 || n >= len {
            return self.refs.to_vec();
        }
        (0..n).map(|i| self.refs[i * len / n]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Model,
    /// Mean minibatch loss over each interval of `eval_every` updates.
    pub loss_curve: Vec<LossPoint>,
    /// Regularized loss on the evaluation subset before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub wall_seconds: f64,
    /// Batches drawn.
    pub steps: u64,
    pub applied_updates: u64,
    pub dropped_stale: u64,
    pub n_workers: usize,
    /// Count of applied updates by staleness; asynchronous runs only.
    pub staleness_histogram: Option<Vec<u64>>,
}

impl TrainReport {
    pub fn write_loss_curve(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let mut out = String::from("step,loss\n");
        for p in &self.loss_curve {
            out.push_str(&format!("{},{}\n", p.step, p.loss));
        }
        std::fs::write(path, out).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

struct Curve {
    every: u64,
    acc: f64,
    n: u64,
    points: Vec<LossPoint>,
}

impl Curve {
    fn new(every: u64) -> Self {
        Curve {
            every,
            acc: 0.0,
            n: 0,
            points: Vec::new(),
        }
    }

    fn push(&mut self, step: u64, loss: f64) {
        self.acc += loss;
        self.n += 1;
        if self.n == self.every {
            self.flush(step);
        }
    }

    fn flush(&mut self, step: u64) {
        if self.n > 0 {
            self.points.push(LossPoint {
                step,
                loss: self.acc / self.n as f64,
            });
        }
        self.acc = 0.0;
        self.n = 0;
    }
}

fn prepare(model: &Model, data: &TrainSet, opt: &OptConfig) -> Result<(), TrainError> {
    opt.validate()?;
    if data.refs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if data.lag == 0 {
        return Err(TrainError::InvalidConfig {
            field: "lag".into(),
            reason: "must be at least 1".into(),
        });
    }
    let dim = data.corpus.dim();
    if dim != model.input_dim() {
        return Err(ModelError::DimensionMismatch {
            expected: model.input_dim(),
            found: dim,
        }
        .into());
    }
    Ok(())
}

fn non_finite(step: u64, loss: f64, theta: &[f64], grad: &[f64]) -> TrainError {
    let err = TrainError::NonFiniteLoss {
        step,
        loss,
        param_norm: l2_norm(theta),
        grad_norm: l2_norm(grad),
    };
    log::error!("{err}");
    err
}

/// Deterministic minibatch training.
pub fn train_synchronous(model: Model, data: TrainSet, opt: &OptConfig) -> Result<TrainReport, TrainError> {
    prepare(&model, &data, opt)?;
    let start = Instant::now();
    let eval = data.samples(&data.eval_refs(opt.eval_samples));
    let initial_loss = model.loss(&eval, opt.l2, opt.loss_mode)?;
    let budget = opt.budget(data.refs.len());
    let mut model = model;
    let mut optim = Optimizer::new(opt, model.n_params()).with_horizon(budget);
    let mut curve = Curve::new(opt.eval_every);
    let mut batches = BatchStream::new(data.refs, opt.batch_size, opt.seed);
    for step in 1..=budget {
        let batch = data.samples(&batches.next().expect("non-empty refs"));
        let (loss, mut grad) = model.loss_and_gradient(&batch, opt.l2, opt.loss_mode)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(non_finite(step, loss, model.params(), &grad));
        }
        optim.step(model.params_mut(), &mut grad);
        curve.push(step, loss);
    }
    curve.flush(budget);
    let final_loss = model.loss(&eval, opt.l2, opt.loss_mode)?;
    log::debug!("sync: {budget} steps, loss {initial_loss:.5} -> {final_loss:.5}");
    Ok(TrainReport {
        model,
        loss_curve: curve.points,
        initial_loss,
        final_loss,
        wall_seconds: start.elapsed().as_secs_f64(),
        steps: budget,
        applied_updates: budget,
        dropped_stale: 0,
        n_workers: 1,
        staleness_histogram: None,
    })
}

struct Store<'a> {
    version: u64,
    theta: Arc<Vec<f64>>,
    optim: Optimizer,
    batches: BatchStream<'a>,
    drawn: u64,
    curve: Curve,
    histogram: Vec<u64>,
    dropped: u64,
    failure: Option<TrainError>,
}

/// Parameter-server training with `n_workers` concurrent workers.
pub fn train_asynchronous(
    model: Model,
    data: TrainSet,
    opt: &OptConfig,
    n_workers: usize,
    staleness_cap: usize,
) -> Result<TrainReport, TrainError> {
    prepare(&model, &data, opt)?;
    if n_workers == 0 {
        return Err(TrainError::InvalidConfig {
            field: "n_workers".into(),
            reason: "must be at least 1".into(),
        });
    }
    let start = Instant::now();
    let eval = data.samples(&data.eval_refs(opt.eval_samples));
    let initial_loss = model.loss(&eval, opt.l2, opt.loss_mode)?;
    let budget = opt.budget(data.refs.len());
    let arch = model.architecture();
    let dim = model.input_dim();
    let store = Mutex::new(Store {
        version: 0,
        theta: Arc::new(model.params().to_vec()),
        optim: Optimizer::new(opt, model.n_params()).with_horizon(budget),
        batches: BatchStream::new(data.refs, opt.batch_size, opt.seed),
        drawn: 0,
        curve: Curve::new(opt.eval_every),
        histogram: vec![0; staleness_cap + 1],
        dropped: 0,
        failure: None,
    });

    let worker = || -> Result<(), TrainError> {
        loop {
            let (refs, theta, version, step) = {
                let mut s = store.lock().expect("store lock");
                if s.drawn >= budget || s.failure.is_some() {
                    return Ok(());
                }
                s.drawn += 1;
                let refs = s.batches.next().expect("non-empty refs");
                (refs, Arc::clone(&s.theta), s.version, s.drawn)
            };
            let local = Model::from_params(&arch, dim, theta.as_ref().clone())?;
            drop(theta);
            let batch = data.samples(&refs);
            let (loss, mut grad) = local.loss_and_gradient(&batch, opt.l2, opt.loss_mode)?;
            let mut s = store.lock().expect("store lock");
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let err = non_finite(step, loss, local.params(), &grad);
                s.failure.get_or_insert(err);
                return Ok(());
            }
            let staleness = (s.version - version) as usize;
            if staleness > staleness_cap {
                s.dropped += 1;
                continue;
            }
            let s = &mut *s;
            let theta = Arc::make_mut(&mut s.theta);
            s.optim.step(theta, &mut grad);
            s.version += 1;
            s.histogram[staleness] += 1;
            let v = s.version;
            s.curve.push(v, loss);
        }
    };

    let results: Vec<Result<(), TrainError>> = if n_workers == 1 {
        vec![worker()]
    } else {
        std::thread::scope(|sc| {
            let handles: Vec<_> = (0..n_workers).map(|_| sc.spawn(&worker)).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };
    for r in results {
        r?;
    }
    let mut s = store.into_inner().expect("store lock");
    if let Some(err) = s.failure.take() {
        return Err(err);
    }
    let applied = s.version;
    s.curve.flush(applied);
    let model = Model::from_params(&arch, dim, s.theta.as_ref().clone())?;
    let final_loss = model.loss(&eval, opt.l2, opt.loss_mode)?;
    Ok(TrainReport {
        model,
        loss_curve: s.curve.points,
        initial_loss,
        final_loss,
        wall_seconds: start.elapsed().as_secs_f64(),
        steps: budget,
        applied_updates: applied,
        dropped_stale: s.dropped,
        n_workers,
        staleness_histogram: Some(s.histogram),
    })
}
