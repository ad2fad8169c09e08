//! Zero-intelligence order-flow simulator.
//!
//! Each side of the book receives unit-size limit orders at rate `lambda`
//! on every one of the `levels` prices nearest its touch, unit market
//! orders at rate `mu` against its touch, and each resting share cancels
//! at rate `theta_c`. The touch queues therefore follow exactly the
//! birth-death chain solved by [`oracle`]. When a touch queue empties the
//! price moves one tick: the vacated tick is refilled by the opposite side
//! and the next level on the depleted side becomes the touch (refilled if
//! empty), all within one timestamp, so the spread is one tick at every
//! distinct event time.
//!
//! In the persistent regime a hidden two-state process flips at rate
//! `kappa` and tilts buy-side against sell-side intensities by `1 ± bias`,
//! so the history of price moves carries information about the next one.

pub mod oracle;
pub mod universe;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::book::{BookState, CrossingPolicy, Side};
use crate::feed::{Direction, Message, MessageKind, Timestamp};

pub use oracle::{oracle_p_down, FirstPassageSurface, OracleQuery};
pub use universe::{make_universe, ParamRanges, Range};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("both sides of the book are empty; increase initial_depth")]
    BookDepleted,
    #[error("first-passage oracle requires the memoryless regime")]
    NotMemoryless,
    #[error("truncation {truncation} too small: result moved by {change:e} when doubled")]
    TruncationTooSmall { truncation: usize, change: f64 },
    #[error("invalid oracle query: {0}")]
    InvalidQuery(String),
    #[error("empty range for {param}: [{lo}, {hi}]")]
    EmptyRange { param: String, lo: f64, hi: f64 },
}

fn invalid(field: &str, reason: impl Into<String>) -> SimError {
    SimError::InvalidConfig {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regime {
    Memoryless,
    /// Hidden buy/sell pressure flipping at rate `kappa`, tilting
    /// intensities by `1 ± bias`.
    Persistent { kappa: f64, bias: f64 },
}

fn default_skew() -> f64 {
    1.0
}
fn default_start_price() -> i64 {
    10_000
}
fn default_start_time() -> f64 {
    34_200.0
}
fn default_tick_size() -> i64 {
    100
}
fn default_levels() -> usize {
    5
}

/// Parameters of one synthetic stock. Rates are per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub stock_id: String,
    /// Limit-order arrival rate per price level per side.
    pub lambda: f64,
    /// Market-order rate per side.
    pub mu: f64,
    /// Cancellation rate per resting share.
    pub theta_c: f64,
    /// Number of price levels per side that receive limit orders.
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Message price units (10^-4 currency) per tick.
    #[serde(default = "default_tick_size")]
    pub tick_size: i64,
    /// Mean size (shares) of a freshly created price level.
    pub initial_depth: f64,
    /// Target mean time between mid-price changes, seconds. When set, the
    /// clock of the generated stream is rescaled to hit it.
    #[serde(default)]
    pub mean_event_gap: Option<f64>,
    /// Bid-side rates are multiplied and ask-side rates divided by this.
    #[serde(default = "default_skew")]
    pub activity_skew: f64,
    pub regime: Regime,
    #[serde(default = "default_start_price")]
    pub start_price: i64,
    /// Seconds after midnight of the first message.
    #[serde(default = "default_start_time")]
    pub start_time: f64,
    pub seed: u64,
}

impl SimConfig {
    /// A symmetric memoryless stock with the given rates.
    pub fn memoryless(stock_id: impl Into<String>, lambda: f64, mu: f64, theta_c: f64) -> Self {
        SimConfig {
            stock_id: stock_id.into(),
            lambda,
            mu,
            theta_c,
            levels: default_levels(),
            tick_size: default_tick_size(),
            initial_depth: 5.0,
            mean_event_gap: None,
            activity_skew: 1.0,
            regime: Regime::Memoryless,
            start_price: default_start_price(),
            start_time: default_start_time(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(name, format!("must be a positive number, got {v}")))
            }
        };
        if self.stock_id.is_empty() {
            return Err(invalid("stock_id", "must not be empty"));
        }
        positive("lambda", self.lambda)?;
        positive("mu", self.mu)?;
        positive("theta_c", self.theta_c)?;
        positive("activity_skew", self.activity_skew)?;
        if !(self.initial_depth.is_finite() && self.initial_depth >= 1.0) {
            return Err(invalid("initial_depth", "must be at least 1 share"));
        }
        if self.levels == 0 {
            return Err(invalid("levels", "must be at least 1"));
        }
        if self.tick_size <= 0 {
            return Err(invalid("tick_size", "must be positive"));
        }
        if self.start_price <= self.levels as i64 + 1 {
            return Err(invalid("start_price", "too close to zero for the level count"));
        }
        if !(self.start_time.is_finite() && self.start_time >= 0.0) {
            return Err(invalid("start_time", "must be non-negative"));
        }
        if let Some(g) = self.mean_event_gap {
            positive("mean_event_gap", g)?;
        }
        if let Regime::Persistent { kappa, bias } = self.regime {
            positive("regime.kappa", kappa)?;
            if !(0.0..1.0).contains(&bias) {
                return Err(invalid("regime.bias", "must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Intensities driving the two touch queues in the memoryless regime.
    pub fn touch_rates(&self) -> TouchRates {
        let s = self.activity_skew;
        TouchRates {
            bid: QueueRates {
                birth: self.lambda * s,
                market: self.mu * s,
                cancel: self.theta_c,
            },
            ask: QueueRates {
                birth: self.lambda / s,
                market: self.mu / s,
                cancel: self.theta_c,
            },
        }
    }
}

/// Birth rate, constant death rate and per-share death rate of one queue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueRates {
    pub birth: f64,
    pub market: f64,
    pub cancel: f64,
}

impl QueueRates {
    pub fn death(&self, q: u32) -> f64 {
        self.market + self.cancel * q as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TouchRates {
    pub bid: QueueRates,
    pub ask: QueueRates,
}

impl TouchRates {
    pub fn symmetric(birth: f64, market: f64, cancel: f64) -> Self {
        let q = QueueRates {
            birth,
            market,
            cancel,
        };
        TouchRates { bid: q, ask: q }
    }
}

/// Output of one simulation run.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub messages: Vec<Message>,
    /// Number of mid-price changes generated.
    pub price_changes: usize,
    /// Factor applied to model time to reach `mean_event_gap` (1 if unset).
    pub time_scale: f64,
}

/// Unit-order ids resting in the book, with O(1) uniform sampling.
#[derive(Debug, Default)]
struct LiveSet {
    ids: Vec<u64>,
    pos: HashMap<u64, usize>,
}

impl LiveSet {
    fn insert(&mut self, id: u64) {
        self.pos.insert(id, self.ids.len());
        self.ids.push(id);
    }

    fn remove(&mut self, id: u64) {
        let i = self.pos.remove(&id).expect("live id");
        self.ids.swap_remove(i);
        if let Some(&moved) = self.ids.get(i) {
            self.pos.insert(moved, i);
        }
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

struct Generator<'a> {
    cfg: &'a SimConfig,
    rng: ChaCha8Rng,
    book: BookState,
    live: LiveSet,
    next_id: u64,
    /// Bid touch in ticks; the ask touch is one tick above between groups.
    bid_touch: i64,
    pressure: f64,
    messages: Vec<Message>,
    model_times: Vec<f64>,
    change_times: Vec<f64>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a SimConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pressure = match cfg.regime {
            Regime::Memoryless => 0.0,
            Regime::Persistent { .. } => {
                if rng.gen_bool(0.5) {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        Generator {
            cfg,
            rng,
            book: BookState::new(cfg.tick_size).with_policy(CrossingPolicy::Execute),
            live: LiveSet::default(),
            next_id: 1,
            bid_touch: cfg.start_price,
            pressure,
            messages: Vec::new(),
            model_times: Vec::new(),
            change_times: Vec::new(),
        }
    }

    fn refill_size(&mut self) -> u64 {
        let mean = self.cfg.initial_depth;
        if mean <= 1.0 {
            return 1;
        }
        // Geometric on {1, 2, ...} with the configured mean.
        let p = 1.0 / mean;
        let u: f64 = self.rng.gen::<f64>();
        1 + ((1.0 - u).ln() / (1.0 - p).ln()).floor() as u64
    }

    fn emit(&mut self, t: f64, kind: MessageKind, id: u64, price_ticks: i64, side: Side) {
        let msg = Message {
            time: Timestamp::ZERO,
            kind,
            order_id: id,
            size: 1,
            price: price_ticks * self.cfg.tick_size,
            direction: match side {
                Side::Bid => Direction::Buy,
                Side::Ask => Direction::Sell,
            },
        };
        self.book
            .apply_message(&msg)
            .expect("simulator emits only valid messages");
        match kind {
            MessageKind::Submit => self.live.insert(id),
            _ => self.live.remove(id),
        }
        self.messages.push(msg);
        self.model_times.push(t);
    }

    fn submit(&mut self, t: f64, side: Side, price: i64) {
        let id = self.next_id;
        self.next_id += 1;
        self.emit(t, MessageKind::Submit, id, price, side);
    }

    fn fill_level(&mut self, t: f64, side: Side, price: i64) {
        let k = self.refill_size();
        for _ in 0..k {
            self.submit(t, side, price);
        }
    }

    fn seed_book(&mut self) {
        let b = self.bid_touch;
        for i in 0..self.cfg.levels as i64 {
            self.fill_level(0.0, Side::Bid, b - i);
            self.fill_level(0.0, Side::Ask, b + 1 + i);
        }
    }

    fn rates(&self) -> TouchRates {
        let base = self.cfg.touch_rates();
        let Regime::Persistent { bias, .. } = self.cfg.regime else {
            return base;
        };
        let up = 1.0 + bias * self.pressure;
        let down = 1.0 - bias * self.pressure;
        TouchRates {
            bid: QueueRates {
                birth: base.bid.birth * up,
                market: base.bid.market * down,
                cancel: base.bid.cancel,
            },
            ask: QueueRates {
                birth: base.ask.birth * down,
                market: base.ask.market * up,
                cancel: base.ask.cancel,
            },
        }
    }

    /// After a touch empties, shifts the book one tick and restores a
    /// one-tick spread.
    fn reprice(&mut self, t: f64, depleted: Side) -> Result<(), SimError> {
        let b = self.bid_touch;
        match depleted {
            Side::Bid => {
                if self.book.level_size(Side::Bid, b - 1) == 0 {
                    self.fill_level(t, Side::Bid, b - 1);
                }
                self.fill_level(t, Side::Ask, b);
                self.bid_touch = b - 1;
            }
            Side::Ask => {
                if self.book.level_size(Side::Ask, b + 2) == 0 {
                    self.fill_level(t, Side::Ask, b + 2);
                }
                self.fill_level(t, Side::Bid, b + 1);
                self.bid_touch = b + 1;
            }
        }
        if self.book.best_bid().is_none() && self.book.best_ask().is_none() {
            return Err(SimError::BookDepleted);
        }
        self.change_times.push(t);
        Ok(())
    }

    fn step(&mut self, t: &mut f64) -> Result<(), SimError> {
        let rates = self.rates();
        let levels = self.cfg.levels as f64;
        let kappa = match self.cfg.regime {
            Regime::Persistent { kappa, .. } => kappa,
            Regime::Memoryless => 0.0,
        };
        let cancel_total = self.cfg.theta_c * self.live.len() as f64;
        let weights = [
            rates.bid.birth * levels,
            rates.ask.birth * levels,
            rates.bid.market,
            rates.ask.market,
            cancel_total,
            kappa,
        ];
        let total: f64 = weights.iter().sum();
        let u: f64 = self.rng.gen::<f64>();
        *t += -(1.0 - u).ln() / total;

        let mut pick = self.rng.gen::<f64>() * total;
        let mut event = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if pick < *w {
                event = i;
                break;
            }
            pick -= w;
        }
        // Zero-weight slots can only be hit through rounding at the tail.
        while weights[event] == 0.0 {
            event -= 1;
        }

        let b = self.bid_touch;
        let now = *t;
        match event {
            0 => {
                let i = self.rng.gen_range(0..self.cfg.levels) as i64;
                self.submit(now, Side::Bid, b - i);
            }
            1 => {
                let i = self.rng.gen_range(0..self.cfg.levels) as i64;
                self.submit(now, Side::Ask, b + 1 + i);
            }
            2 | 3 => {
                let (side, price) = if event == 2 {
                    (Side::Bid, b)
                } else {
                    (Side::Ask, b + 1)
                };
                let front = self.book.level_queue(side, price)[0];
                self.emit(now, MessageKind::ExecuteVisible, front, price, side);
            }
            4 => {
                let id = self.live.ids[self.rng.gen_range(0..self.live.len())];
                let order = self.book.order(id).expect("live order");
                self.emit(now, MessageKind::Delete, id, order.price, order.side);
            }
            _ => {
                self.pressure = -self.pressure;
                return Ok(());
            }
        }
        if self.book.level_size(Side::Bid, b) == 0 {
            self.reprice(now, Side::Bid)?;
        } else if self.book.level_size(Side::Ask, b + 1) == 0 {
            self.reprice(now, Side::Ask)?;
        }
        Ok(())
    }

    fn run(mut self, n_events: usize) -> Result<Simulation, SimError> {
        self.seed_book();
        let mut t = 0.0;
        while self.messages.len() < n_events {
            self.step(&mut t)?;
        }
        let price_changes = self.change_times.len();
        let time_scale = match (self.cfg.mean_event_gap, &self.change_times[..]) {
            (Some(target), [first, .., last]) if last > first => {
                let mean_gap = (last - first) / (price_changes - 1) as f64;
                target / mean_gap
            }
            _ => 1.0,
        };
        let start = Timestamp::from_secs_f64(self.cfg.start_time).nanos();
        let mut prev_model = f64::NEG_INFINITY;
        let mut prev_ns = 0u64;
        for (msg, &tm) in self.messages.iter_mut().zip(&self.model_times) {
            let mut ns = start + (tm * time_scale * 1e9).round() as u64;
            if tm == prev_model {
                ns = prev_ns;
            } else if ns <= prev_ns && prev_model > f64::NEG_INFINITY {
                // keep distinct event groups at distinct timestamps
                ns = prev_ns + 1;
            }
            msg.time = Timestamp(ns);
            prev_model = tm;
            prev_ns = ns;
        }
        Ok(Simulation {
            messages: self.messages,
            price_changes,
            time_scale,
        })
    }
}

/// Runs the simulator until at least `n_events` messages are emitted
/// (the last event's repricing group is never split).
pub fn simulate(cfg: &SimConfig, n_events: usize) -> Result<Simulation, SimError> {
    cfg.validate()?;
    Generator::new(cfg).run(n_events)
}

pub fn simulate_stock(cfg: &SimConfig, n_events: usize) -> Result<Vec<Message>, SimError> {
    simulate(cfg, n_events).map(|s| s.messages)
}
