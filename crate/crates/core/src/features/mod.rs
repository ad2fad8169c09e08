//! Event-time supervised learning problem.
//!
//! The sequence index is the count of mid-price changes: a sample is the
//! window of book states observed at the `T` most recent price changes up
//! to `τ_k`, labelled by the direction of the change at `τ_{k+1}`.
//!
//! Snapshots sharing a timestamp are treated as one atomic book update:
//! only the book after the last message of a timestamp group is observed.

mod dataset;
pub mod io;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::book::{mid_and_spread, DepthMode, DepthSnapshot, MidPrice, RebuildError};
use crate::feed::Timestamp;

pub use dataset::{
    fit_normalization, fit_pooled_normalization, partition_hash, temporal_split, Corpus, EventDataset, NormScheme,
    Normalization, SampleRef, SequenceSample, Window,
};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("snapshot has an empty side but the feature spec needs both")]
    OneSidedBook,
    #[error("dataset {0} is already normalized")]
    AlreadyNormalized(String),
    #[error("partition {0} is empty")]
    EmptyPartition(usize),
    #[error("split boundaries must be strictly increasing inside (0, 1): {0:?}")]
    InvalidBoundaries(Vec<f64>),
    #[error("lag must be at least 1")]
    ZeroLag,
    #[error(transparent)]
    Rebuild(#[from] RebuildError),
    #[error("dataset file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Direction of a mid-price change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Move {
    Up,
    Down,
}

impl Move {
    pub fn sign(self) -> i8 {
        match self {
            Move::Up => 1,
            Move::Down => -1,
        }
    }

    pub fn from_sign(s: i64) -> Option<Self> {
        match s.signum() {
            1 => Some(Move::Up),
            -1 => Some(Move::Down),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriceChangeEvent {
    pub k: usize,
    pub tau: Timestamp,
    pub direction: Move,
    /// Index of the observed (last-of-timestamp) snapshot in the stream.
    pub snapshot_index: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PriceChanges {
    pub events: Vec<PriceChangeEvent>,
    pub one_sided_skipped: usize,
}

/// Streaming detector; feed snapshots in order, then call [`finish`].
///
/// [`finish`]: PriceChangeDetector::finish
#[derive(Debug, Default)]
pub struct PriceChangeDetector {
    pending: Option<(usize, DepthSnapshot)>,
    last_mid: Option<MidPrice>,
    next_k: usize,
    one_sided: usize,
}

impl PriceChangeDetector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the event (with its observed snapshot) completed by this push,
    /// if any. Events surface one timestamp group late.
    pub fn push(
        &mut self,
        index: usize,
        snap: DepthSnapshot,
    ) -> Option<(PriceChangeEvent, DepthSnapshot)> {
        let ready = match &self.pending {
            Some((_, prev)) if prev.event_time != snap.event_time => self.pending.take(),
            _ => None,
        };
        self.pending = Some((index, snap));
        ready.and_then(|(i, s)| self.observe(i, s))
    }

    pub fn finish(&mut self) -> Option<(PriceChangeEvent, DepthSnapshot)> {
        let (i, s) = self.pending.take()?;
        self.observe(i, s)
    }

    pub fn one_sided_skipped(&self) -> usize {
        self.one_sided
    }

    fn observe(&mut self, index: usize, snap: DepthSnapshot) -> Option<(PriceChangeEvent, DepthSnapshot)> {
        let Ok((mid, _)) = mid_and_spread(&snap) else {
            self.one_sided += 1;
            return None;
        };
        let prev = self.last_mid.replace(mid);
        let direction = Move::from_sign(mid.0 - prev?.0)?;
        let event = PriceChangeEvent {
            k: self.next_k,
            tau: snap.event_time,
            direction,
            snapshot_index: index,
        };
        self.next_k += 1;
        Some((event, snap))
    }
}

pub fn detect_price_changes(snaps: &[DepthSnapshot]) -> PriceChanges {
    let mut det = PriceChangeDetector::new();
    let mut events: Vec<_> = snaps
        .iter()
        .enumerate()
        .filter_map(|(i, s)| det.push(i, s.clone()).map(|(e, _)| e))
        .collect();
    events.extend(det.finish().map(|(e, _)| e));
    PriceChanges {
        events,
        one_sided_skipped: det.one_sided_skipped(),
    }
}

fn default_levels() -> usize {
    crate::book::DEFAULT_LEVELS
}

/// Layout of a state vector: `bid_sizes[1..L], ask_sizes[1..L]`, then the
/// optional spread (ticks) and the optional direction (±1) of the move that
/// just happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default)]
    pub depth_mode: DepthMode,
    #[serde(default)]
    pub include_spread: bool,
    #[serde(default)]
    pub include_last_direction: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            levels: default_levels(),
            depth_mode: DepthMode::TickOffset,
            include_spread: false,
            include_last_direction: false,
        }
    }
}

impl FeatureSpec {
    pub fn depth_only(levels: usize) -> Self {
        FeatureSpec {
            levels,
            ..Default::default()
        }
    }

    pub fn dimension(&self) -> usize {
        2 * self.levels + self.include_spread as usize + self.include_last_direction as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn build_state_vector(
    snap: &DepthSnapshot,
    spec: &FeatureSpec,
    last_move: Option<Move>,
) -> Result<StateVector, FeatureError> {
    if snap.levels() != spec.levels {
        return Err(FeatureError::DimensionMismatch {
            expected: 2 * spec.levels,
            found: 2 * snap.levels(),
        });
    }
    let mut v = Vec::with_capacity(spec.dimension());
    v.extend(snap.bid_sizes.iter().map(|&s| s as f64));
    v.extend(snap.ask_sizes.iter().map(|&s| s as f64));
    if spec.include_spread {
        let (_, spread) = mid_and_spread(snap).map_err(|_| FeatureError::OneSidedBook)?;
        v.push(spread as f64);
    }
    if spec.include_last_direction {
        v.push(last_move.map_or(0.0, |m| m.sign() as f64));
    }
    Ok(StateVector(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::book::DepthMode;

    fn snap(t: u64, bid: i64, ask: i64, bids: Vec<u64>, asks: Vec<u64>) -> DepthSnapshot {
        let l = bids.len();
        DepthSnapshot::from_levels(
            Timestamp(t),
            DepthMode::TickOffset,
            (0..l as i64).map(|i| Some(bid - i)).collect(),
            bids,
            (0..l as i64).map(|i| Some(ask + i)).collect(),
            asks,
        )
    }

    #[test]
    fn detects_signed_changes() {
        // mids 10.000, 10.000, 10.005, 10.000 with a 0.01 tick
        let snaps = vec![
            snap(1, 999, 1001, vec![1], vec![1]),
            snap(2, 999, 1001, vec![2], vec![1]),
            snap(3, 1000, 1001, vec![1], vec![1]),
            snap(4, 999, 1001, vec![1], vec![1]),
        ];
        let ev = detect_price_changes(&snaps).events;
        assert_eq!(ev.len(), 2);
        assert_eq!((ev[0].snapshot_index, ev[0].direction), (2, Move::Up));
        assert_eq!((ev[1].snapshot_index, ev[1].direction), (3, Move::Down));
        assert_eq!(ev[1].k, 1);
    }

    #[test]
    fn constant_mid_has_no_events() {
        let snaps: Vec<_> = (0..10)
            .map(|t| snap(t, 99, 100, vec![t + 1], vec![3]))
            .collect();
        assert!(detect_price_changes(&snaps).events.is_empty());
    }

    #[test]
    fn same_timestamp_group_is_one_observation() {
        let snaps = vec![
            snap(1, 99, 100, vec![1], vec![1]),
            snap(2, 98, 100, vec![1], vec![1]),
            snap(2, 98, 99, vec![1], vec![1]),
        ];
        let ev = detect_price_changes(&snaps).events;
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].snapshot_index, 2);
        assert_eq!(ev[0].direction, Move::Down);
    }

    #[test]
    fn one_sided_snapshots_are_counted() {
        let mut one_sided = snap(2, 99, 100, vec![1], vec![0]);
        one_sided = DepthSnapshot::from_levels(
            one_sided.event_time,
            DepthMode::TickOffset,
            vec![Some(99)],
            vec![1],
            vec![None],
            vec![0],
        );
        let snaps = vec![snap(1, 99, 100, vec![1], vec![1]), one_sided, snap(3, 100, 101, vec![1], vec![1])];
        let pc = detect_price_changes(&snaps);
        assert_eq!(pc.one_sided_skipped, 1);
        assert_eq!(pc.events.len(), 1);
    }

    #[test]
    fn state_vector_layouts() {
        let s = snap(0, 9999, 10000, vec![100, 0], vec![50, 25]);
        let spec = FeatureSpec::depth_only(2);
        assert_eq!(build_state_vector(&s, &spec, None).unwrap().0, vec![100.0, 0.0, 50.0, 25.0]);
        let with_spread = FeatureSpec {
            include_spread: true,
            ..spec
        };
        assert_eq!(
            build_state_vector(&s, &with_spread, None).unwrap().0,
            vec![100.0, 0.0, 50.0, 25.0, 1.0]
        );
        let with_dir = FeatureSpec {
            include_last_direction: true,
            ..with_spread
        };
        assert_eq!(
            build_state_vector(&s, &with_dir, Some(Move::Down)).unwrap().0.last(),
            Some(&-1.0)
        );
        assert_eq!(FeatureSpec::default().dimension(), 20);
        assert!(matches!(
            build_state_vector(&s, &FeatureSpec::depth_only(3), None),
            Err(FeatureError::DimensionMismatch { .. })
        ));
    }
}
