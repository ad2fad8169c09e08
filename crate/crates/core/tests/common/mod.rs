//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use priceform_core::book::{DepthMode, DepthSnapshot};
use priceform_core::features::{EventDataset, FeatureSpec, Move, SequenceSample};
use priceform_core::feed::{Direction, Message, MessageKind, Timestamp};
use priceform_core::models::{LossMode, Model};
use priceform_core::sim::TouchRates;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Any well-formed message, including halts and cross trades whose size
/// and price are unconstrained.
pub fn random_message(rng: &mut impl Rng) -> Message {
    let kind = MessageKind::from_code(rng.gen_range(1..=7)).unwrap();
    let (size, price) = if kind.is_order_event() {
        let (ks, kp) = (rng.gen_range(0..60), rng.gen_range(0..60));
        (rng.gen_range(1..=u64::MAX >> ks), rng.gen_range(1..=i64::MAX >> kp))
    } else {
        (rng.gen_range(0..1_000_000), rng.gen_range(-10_000_000_000i64..10_000_000_000))
    };
    let id_shift = rng.gen_range(0..64);
    Message {
        time: Timestamp(rng.gen_range(0..200_000 * 1_000_000_000u64)),
        kind,
        order_id: rng.gen::<u64>() >> id_shift,
        size,
        price,
        direction: if rng.gen_bool(0.5) { Direction::Buy } else { Direction::Sell },
    }
}

/// Reference book: a flat map of live orders rescanned for every readout.
#[derive(Debug, Default, Clone)]
pub struct NaiveBook {
    /// id -> (is_bid, price in ticks, size, arrival number)
    pub orders: HashMap<u64, (bool, i64, u64, u64)>,
    arrivals: u64,
}

impl NaiveBook {
    /// Applies a replay message; returns false when it would be invalid.
    pub fn apply(&mut self, m: &Message, tick: i64) -> bool {
        match m.kind {
            MessageKind::Halt | MessageKind::ExecuteHidden | MessageKind::CrossTrade => true,
            MessageKind::Submit => {
                if m.size == 0 || m.price % tick != 0 || self.orders.contains_key(&m.order_id) {
                    return false;
                }
                let is_bid = m.direction == Direction::Buy;
                let p = m.price / tick;
                let crosses = if is_bid {
                    self.best(false).is_some_and(|a| p >= a)
                } else {
                    self.best(true).is_some_and(|b| p <= b)
                };
                if crosses {
                    return false;
                }
                self.arrivals += 1;
                self.orders.insert(m.order_id, (is_bid, p, m.size, self.arrivals));
                true
            }
            MessageKind::PartialCancel | MessageKind::ExecuteVisible | MessageKind::Delete => {
                let Some(o) = self.orders.get_mut(&m.order_id) else {
                    return false;
                };
                let ok = m.size > 0
                    && if m.kind == MessageKind::Delete { m.size == o.2 } else { m.size <= o.2 };
                if !ok {
                    return false;
                }
                o.2 -= m.size;
                if o.2 == 0 {
                    self.orders.remove(&m.order_id);
                }
                true
            }
        }
    }

    pub fn best(&self, bid: bool) -> Option<i64> {
        let prices = self.orders.values().filter(|o| o.0 == bid).map(|o| o.1);
        if bid {
            prices.max()
        } else {
            prices.min()
        }
    }

    pub fn size_at(&self, bid: bool, price: i64) -> u64 {
        self.orders.values().filter(|o| o.0 == bid && o.1 == price).map(|o| o.2).sum()
    }

    /// Live order ids at a price in arrival order.
    pub fn queue(&self, bid: bool, price: i64) -> Vec<u64> {
        let mut q: Vec<_> = self.orders.iter().filter(|(_, o)| o.0 == bid && o.1 == price).collect();
        q.sort_by_key(|(_, o)| o.3);
        q.into_iter().map(|(id, _)| *id).collect()
    }

    /// (price, size) per level for one side.
    pub fn levels(&self, bid: bool, n: usize, mode: DepthMode) -> Vec<(Option<i64>, u64)> {
        let step = if bid { -1 } else { 1 };
        match mode {
            DepthMode::TickOffset => match self.best(bid) {
                None => vec![(None, 0); n],
                Some(b) => (0..n as i64).map(|i| (Some(b + step * i), self.size_at(bid, b + step * i))).collect(),
            },
            DepthMode::Rank => {
                let mut prices: Vec<i64> = self.orders.values().filter(|o| o.0 == bid).map(|o| o.1).collect();
                prices.sort_unstable();
                prices.dedup();
                if bid {
                    prices.reverse();
                }
                let mut out: Vec<_> = prices.iter().take(n).map(|&p| (Some(p), self.size_at(bid, p))).collect();
                out.resize(n, (None, 0));
                out
            }
        }
    }

    /// Describes the first difference from `snap`, if any.
    pub fn mismatch(&self, snap: &DepthSnapshot, mode: DepthMode) -> Option<String> {
        let n = snap.levels();
        for (bid, name) in [(true, "bid"), (false, "ask")] {
            let expect = self.levels(bid, n, mode);
            let best = if bid { snap.best_bid } else { snap.best_ask };
            if best != expect[0].0 {
                return Some(format!("best {name} {best:?} vs {:?}", expect[0].0));
            }
            for (i, (p, s)) in expect.iter().enumerate() {
                let (gp, gs) = if bid {
                    (snap.bid_price(i), snap.bid_sizes[i])
                } else {
                    (snap.ask_price(i), snap.ask_sizes[i])
                };
                if gp != *p || gs != *s {
                    return Some(format!("{name} level {i}: ({gp:?}, {gs}) vs ({p:?}, {s})"));
                }
            }
        }
        None
    }
}

/// Fraction of simulated paths on which the bid queue empties first, and
/// its standard error. Each path runs the jump chain of two untruncated
/// birth-death queues.
pub fn mc_p_down(rates: &TouchRates, bid: u32, ask: u32, paths: usize, rng: &mut impl Rng) -> (f64, f64) {
    let mut hits = 0usize;
    for _ in 0..paths {
        let (mut qb, mut qa) = (bid, ask);
        while qb > 0 && qa > 0 {
            let db = rates.bid.death(qb);
            let da = rates.ask.death(qa);
            let total = rates.bid.birth + rates.ask.birth + db + da;
            let mut u = rng.gen::<f64>() * total;
            if u < db {
                qb -= 1;
                continue;
            }
            u -= db;
            if u < da {
                qa -= 1;
                continue;
            }
            u -= da;
            if u < rates.bid.birth {
                qb += 1;
            } else {
                qa += 1;
            }
        }
        hits += (qb == 0) as usize;
    }
    let p = hits as f64 / paths as f64;
    (p, (p * (1.0 - p) / paths as f64).sqrt())
}

/// `d = 4` random states (two levels per side) with random moves.
pub fn random_dataset(n_events: usize, seed: u64) -> EventDataset {
    let mut rng = rng(seed);
    let mut ds = EventDataset::new("G", FeatureSpec::depth_only(2));
    for j in 0..n_events {
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let mv = if rng.gen_bool(0.5) { Move::Up } else { Move::Down };
        ds.push_row(Timestamp(j as u64), mv, (1, 1), &x);
    }
    ds
}

/// Eight samples, some of them left-padded.
pub fn gradient_batch(ds: &EventDataset, lag: usize) -> Vec<SequenceSample<'_>> {
    (0..8).map(|i| ds.sample(2 + 3 * i, lag)).collect()
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;

/// Largest relative error between the analytic gradient and central
/// differences, with the coordinate where it occurs.
pub fn worst_gradient_error(model: &Model, samples: &[SequenceSample], l2: f64, mode: LossMode) -> (f64, usize) {
    let (_, grad) = model.loss_and_gradient(samples, l2, mode).unwrap();
    let mut worst = (0.0, 0);
    for i in 0..model.n_params() {
        let mut plus = model.clone();
        plus.params_mut()[i] += FD_STEP;
        let mut minus = model.clone();
        minus.params_mut()[i] -= FD_STEP;
        let fd = (plus.loss(samples, l2, mode).unwrap() - minus.loss(samples, l2, mode).unwrap()) / (2.0 * FD_STEP);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(FD_FLOOR);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    worst
}
