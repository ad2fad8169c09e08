use std::ops::Range;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    build_state_vector, FeatureError, FeatureSpec, Move, PriceChangeDetector, PriceChangeEvent,
};
use crate::book::{BookState, Rebuilder};
use crate::feed::{Message, Timestamp};

/// Price-change events of one stock with their state vectors.
///
/// Event `j` carries the state observed at `τ_j`. Sample `k` is defined for
/// `k + 1 < len()` and is labelled by the move at event `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventDataset {
    pub stock_id: String,
    pub spec: FeatureSpec,
    pub taus: Vec<Timestamp>,
    pub moves: Vec<Move>,
    /// Raw best-bid and best-ask queue sizes at each event.
    pub touch: Vec<(u32, u32)>,
    states: Vec<f64>,
    pub normalization: Normalization,
    pub one_sided_skipped: usize,
}

impl EventDataset {
    pub fn new(stock_id: impl Into<String>, spec: FeatureSpec) -> Self {
        EventDataset {
            stock_id: stock_id.into(),
            spec,
            taus: Vec::new(),
            moves: Vec::new(),
            touch: Vec::new(),
            states: Vec::new(),
            normalization: Normalization::identity(spec.dimension()),
            one_sided_skipped: 0,
        }
    }

    /// Replays `msgs` and keeps one state vector per mid-price change.
    pub fn from_messages(
        stock_id: impl Into<String>,
        msgs: &[Message],
        tick_size: i64,
        spec: FeatureSpec,
    ) -> Result<Self, FeatureError> {
        let mut ds = EventDataset::new(stock_id, spec);
        let mut rebuild = Rebuilder::new(
            BookState::new(tick_size),
            msgs.iter(),
            spec.levels,
            spec.depth_mode,
        );
        let mut detector = PriceChangeDetector::new();
        let mut index = 0;
        while let Some(snap) = rebuild.next() {
            let snap = snap?;
            if let Some((event, s)) = detector.push(index, snap) {
                ds.push_event(&event, &s)?;
            }
            index += 1;
        }
        if let Some((event, s)) = detector.finish() {
            ds.push_event(&event, &s)?;
        }
        ds.one_sided_skipped = detector.one_sided_skipped();
        Ok(ds)
    }

    fn push_event(
        &mut self,
        event: &PriceChangeEvent,
        snap: &crate::book::DepthSnapshot,
    ) -> Result<(), FeatureError> {
        let v = build_state_vector(snap, &self.spec, Some(event.direction))?;
        self.push_row(
            event.tau,
            event.direction,
            (snap.bid_sizes[0] as u32, snap.ask_sizes[0] as u32),
            &v.0,
        );
        Ok(())
    }

    pub fn push_row(&mut self, tau: Timestamp, direction: Move, touch: (u32, u32), state: &[f64]) {
        assert_eq!(state.len(), self.dim(), "state dimension");
        self.taus.push(tau);
        self.moves.push(direction);
        self.touch.push(touch);
        self.states.extend_from_slice(state);
    }

    pub fn dim(&self) -> usize {
        self.spec.dimension()
    }

    pub fn len(&self) -> usize {
        self.moves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }

    pub fn n_samples(&self) -> usize {
        self.len().saturating_sub(1)
    }

    pub fn state(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.states[j * d..(j + 1) * d]
    }

    pub fn label(&self, k: usize) -> Move {
        self.moves[k + 1]
    }

    /// Window of the `lag` states ending at event `k`, left-padded with the
    /// earliest state when history is short.
    pub fn sample(&self, k: usize, lag: usize) -> SequenceSample<'_> {
        assert!(lag >= 1, "lag must be positive");
        assert!(k + 1 < self.len(), "sample {k} has no label");
        let d = self.dim();
        let first = (k + 1).saturating_sub(lag);
        let pad = lag - (k + 1 - first);
        SequenceSample {
            stock_id: &self.stock_id,
            k,
            label: self.moves[k + 1],
            window: Window {
                rows: &self.states[first * d..(k + 1) * d],
                first: &self.states[first * d..(first + 1) * d],
                pad,
                dim: d,
                first_event: first,
                moves: &self.moves,
            },
        }
    }

    /// Keeps events `range`, renumbering from zero.
    pub fn slice(&self, range: Range<usize>) -> EventDataset {
        let d = self.dim();
        EventDataset {
            stock_id: self.stock_id.clone(),
            spec: self.spec,
            taus: self.taus[range.clone()].to_vec(),
            moves: self.moves[range.clone()].to_vec(),
            touch: self.touch[range.clone()].to_vec(),
            states: self.states[range.start * d..range.end * d].to_vec(),
            normalization: self.normalization.clone(),
            one_sided_skipped: 0,
        }
    }

    /// Applies a fitted transform to every stored state.
    pub fn apply_normalization(&mut self, norm: Normalization) -> Result<(), FeatureError> {
        if self.normalization.applied {
            return Err(FeatureError::AlreadyNormalized(self.stock_id.clone()));
        }
        if norm.shift.len() != self.dim() {
            return Err(FeatureError::DimensionMismatch {
                expected: self.dim(),
                found: norm.shift.len(),
            });
        }
        let d = self.dim();
        for row in self.states.chunks_exact_mut(d) {
            norm.forward(row);
        }
        self.normalization = Normalization {
            applied: true,
            ..norm
        };
        Ok(())
    }

    /// Fits `scheme` on the states of samples `train` and applies it.
    pub fn normalize(&mut self, scheme: NormScheme, train: Range<usize>) -> Result<(), FeatureError> {
        let norm = fit_normalization(self, train, scheme);
        self.apply_normalization(norm)
    }
}

/// A lazily materialized window of `T` state vectors.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    rows: &'a [f64],
    first: &'a [f64],
    pad: usize,
    dim: usize,
    first_event: usize,
    moves: &'a [Move],
}

impl<'a> Window<'a> {
    /// Window over explicit rows with no padding and no step labels.
    pub fn from_rows(rows: &'a [f64], dim: usize) -> Self {
        assert!(dim > 0 && !rows.is_empty() && rows.len() % dim == 0);
        Window {
            rows,
            first: &rows[..dim],
            pad: 0,
            dim,
            first_event: 0,
            moves: &[],
        }
    }

    pub fn len(&self) -> usize {
        self.pad + self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn step(&self, t: usize) -> &'a [f64] {
        if t < self.pad {
            self.first
        } else {
            let r = t - self.pad;
            &self.rows[r * self.dim..(r + 1) * self.dim]
        }
    }

    pub fn last(&self) -> &'a [f64] {
        self.step(self.len() - 1)
    }

    /// Label of the move following step `t`; `None` for padded steps.
    pub fn step_label(&self, t: usize) -> Option<Move> {
        if t < self.pad {
            return None;
        }
        self.moves.get(self.first_event + (t - self.pad) + 1).copied()
    }

    /// The window restricted to its first `len` steps.
    pub fn truncated(&self, len: usize) -> Window<'a> {
        assert!(len >= 1 && len <= self.len());
        if len <= self.pad {
            return Window {
                rows: &self.first[..0],
                pad: len,
                ..*self
            };
        }
        Window {
            rows: &self.rows[..(len - self.pad) * self.dim],
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SequenceSample<'a> {
    pub stock_id: &'a str,
    pub k: usize,
    pub window: Window<'a>,
    pub label: Move,
}

impl SequenceSample<'_> {
    pub fn padded(&self) -> bool {
        self.window.pad > 0
    }
}

/// Reference to sample `k` of stock `stock` inside a [`Corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub stock: u32,
    pub k: u32,
}

/// One or more stock datasets sharing a feature layout.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub stocks: Vec<EventDataset>,
}

impl Corpus {
    pub fn new(stocks: Vec<EventDataset>) -> Self {
        Corpus { stocks }
    }

    pub fn single(ds: EventDataset) -> Self {
        Corpus { stocks: vec![ds] }
    }

    pub fn dim(&self) -> usize {
        self.stocks.first().map_or(0, |s| s.dim())
    }

    pub fn sample(&self, r: SampleRef, lag: usize) -> SequenceSample<'_> {
        self.stocks[r.stock as usize].sample(r.k as usize, lag)
    }

    /// Sample references for `range` of stock `stock`.
    pub fn refs(&self, stock: usize, range: Range<usize>) -> Vec<SampleRef> {
        range
            .map(|k| SampleRef {
                stock: stock as u32,
                k: k as u32,
            })
            .collect()
    }

    pub fn all_refs(&self) -> Vec<SampleRef> {
        (0..self.stocks.len())
            .flat_map(|s| self.refs(s, 0..self.stocks[s].n_samples()))
            .collect()
    }
}

/// Splits `n_samples` contiguous, time-ordered samples at the given
/// fractions. A sample belongs to the partition containing its own index;
/// samples whose windows reach back across a boundary therefore land in
/// the later partition, and no earlier partition sees a later label.
pub fn temporal_split(n_samples: usize, boundaries: &[f64]) -> Result<Vec<Range<usize>>, FeatureError> {
    let ok = !boundaries.is_empty()
        && boundaries.iter().all(|b| *b > 0.0 && *b < 1.0)
        && boundaries.windows(2).all(|w| w[0] < w[1]);
    if !ok {
        return Err(FeatureError::InvalidBoundaries(boundaries.to_vec()));
    }
    let mut cuts: Vec<usize> = boundaries
        .iter()
        .map(|b| (b * n_samples as f64).round() as usize)
        .collect();
    cuts.insert(0, 0);
    cuts.push(n_samples);
    let parts: Vec<Range<usize>> = cuts.windows(2).map(|w| w[0]..w[1]).collect();
    if let Some(i) = parts.iter().position(|p| p.is_empty()) {
        return Err(FeatureError::EmptyPartition(i));
    }
    Ok(parts)
}

/// Content hash identifying a partition: stock, sample range and labels.
pub fn partition_hash(ds: &EventDataset, samples: Range<usize>) -> String {
    let mut h = Sha256::new();
    h.update(ds.stock_id.as_bytes());
    h.update([0u8]);
    h.update((samples.start as u64).to_le_bytes());
    h.update((samples.end as u64).to_le_bytes());
    for k in samples {
        h.update([ds.label(k).sign() as u8]);
        h.update(ds.taus[k].nanos().to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum NormScheme {
    #[default]
    None,
    /// Each coordinate centred and scaled to unit variance.
    PerStockZscore,
    /// Depth coordinates in units of mean per-level depth, spread in units
    /// of mean spread; the direction coordinate is left as is.
    SpreadUnits,
    /// Each coordinate divided by its standard deviation, uncentred.
    VolatilityUnits,
}

/// Per-coordinate affine map `x ↦ (x - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scheme: NormScheme,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    /// Set once the transform has been applied to the stored states.
    pub applied: bool,
    /// Coordinates left unscaled because their training variance is zero.
    pub zero_variance: Vec<usize>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization {
            scheme: NormScheme::None,
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
            applied: false,
            zero_variance: Vec::new(),
        }
    }

    pub fn forward(&self, x: &mut [f64]) {
        for ((v, s), c) in x.iter_mut().zip(&self.shift).zip(&self.scale) {
            *v = (*v - s) / c;
        }
    }

    pub fn inverse(&self, x: &mut [f64]) {
        for ((v, s), c) in x.iter_mut().zip(&self.shift).zip(&self.scale) {
            *v = *v * c + s;
        }
    }
}

/// Statistics over the states observable by samples `train` (events
/// `train.start ..= train.end - 1`).
pub fn fit_normalization(ds: &EventDataset, train: Range<usize>, scheme: NormScheme) -> Normalization {
    fit_pooled_normalization(&[(ds, train)], scheme)
}

/// One transform fitted on the training states of several datasets that
/// share a feature layout.
pub fn fit_pooled_normalization(parts: &[(&EventDataset, Range<usize>)], scheme: NormScheme) -> Normalization {
    let ds = parts.first().expect("at least one dataset").0;
    let d = ds.dim();
    let mut norm = Normalization::identity(d);
    norm.scheme = scheme;
    let n: usize = parts.iter().map(|p| p.1.len()).sum();
    if scheme == NormScheme::None || n == 0 {
        return norm;
    }
    let n = n as f64;
    let mut mean = vec![0.0; d];
    for (ds, train) in parts {
        assert_eq!(ds.dim(), d, "pooled datasets share a layout");
        for j in train.clone() {
            for (m, x) in mean.iter_mut().zip(ds.state(j)) {
                *m += x / n;
            }
        }
    }
    let mut var = vec![0.0; d];
    for (ds, train) in parts {
        for j in train.clone() {
            for ((v, x), m) in var.iter_mut().zip(ds.state(j)).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
    }
    let depth = 2 * ds.spec.levels;
    let spread_idx = ds.spec.include_spread.then_some(depth);
    let mut zero = Vec::new();
    let mut safe = |i: usize, s: f64| {
        if s > 1e-12 && s.is_finite() {
            s
        } else {
            zero.push(i);
            1.0
        }
    };
    match scheme {
        NormScheme::None => {}
        NormScheme::PerStockZscore => {
            for i in 0..d {
                norm.shift[i] = mean[i];
                norm.scale[i] = safe(i, var[i].sqrt());
            }
        }
        NormScheme::VolatilityUnits => {
            for i in 0..d {
                norm.scale[i] = safe(i, var[i].sqrt());
            }
        }
        NormScheme::SpreadUnits => {
            let mean_depth = mean[..depth].iter().sum::<f64>() / depth as f64;
            let s = safe(0, mean_depth);
            for i in 0..depth {
                norm.scale[i] = s;
            }
            if let Some(i) = spread_idx {
                norm.scale[i] = safe(i, mean[i]);
            }
        }
    }
    if !zero.is_empty() {
        log::warn!(
            "{}: zero training variance in coordinates {:?}; left unscaled",
            ds.stock_id,
            zero
        );
    }
    zero.sort_unstable();
    zero.dedup();
    norm.zero_variance = zero;
    norm
}
