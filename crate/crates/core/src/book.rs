//! Limit order book state machine.
//!
//! Prices inside the book are integer ticks; the mid-price is carried in
//! half-ticks so that no floating point ever enters book state.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feed::{Direction, Message, MessageKind, Timestamp};

pub const DEFAULT_LEVELS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Bid,
    Ask,
}

impl From<Direction> for Side {
    fn from(d: Direction) -> Self {
        match d {
            Direction::Buy => Side::Bid,
            Direction::Sell => Side::Ask,
        }
    }
}

/// How depth levels are counted away from the touch.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// Level `i` is the price `i` ticks away from the best price, empty or not.
    #[default]
    TickOffset,
    /// Level `i` is the `i`-th occupied price level.
    Rank,
}

/// What to do with a limit order that would cross the opposite touch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum CrossingPolicy {
    /// Replay of recorded data: crossing submissions are an error.
    #[default]
    Reject,
    /// Simulation: the marketable part executes against resting orders in
    /// price-time priority and any residual rests.
    Execute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Order {
    pub id: u64,
    pub side: Side,
    pub price: i64,
    pub size: u64,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fill {
    pub resting_id: u64,
    pub price: i64,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Applied {
    Mutated,
    /// Crossing submission converted to executions.
    Crossed { fills: Vec<Fill> },
    /// Hidden execution or cross trade: time advances, book unchanged.
    PassThrough,
    /// Trading halt message: no snapshot is produced.
    Skipped,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BookError {
    #[error("unknown order id {0}")]
    UnknownOrderId(u64),
    #[error("order id {0} is already live")]
    DuplicateOrderId(u64),
    #[error("limit order {id} at {price} crosses opposite touch {touch}")]
    CrossingLimitOrder { id: u64, price: i64, touch: i64 },
    #[error("size must be positive")]
    NonPositiveSize,
    #[error("order {id}: size {requested} exceeds remaining {remaining}")]
    SizeExceedsOrder {
        id: u64,
        requested: u64,
        remaining: u64,
    },
    #[error("order {id}: delete of {requested} does not match remaining {remaining}")]
    SizeMismatch {
        id: u64,
        requested: u64,
        remaining: u64,
    },
    #[error("price {price} is not a multiple of tick size {tick_size}")]
    OffTickPrice { price: i64, tick_size: i64 },
    #[error("time {found} precedes previous message time {previous}")]
    TimeOrdering {
        previous: Timestamp,
        found: Timestamp,
    },
    #[error("book has an empty side")]
    OneSidedBook,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("message {index}: {source}")]
pub struct RebuildError {
    pub index: usize,
    #[source]
    pub source: BookError,
}

#[derive(Debug, Clone, Default)]
struct Level {
    queue: VecDeque<u64>,
    total: u64,
}

#[derive(Debug, Clone, Copy)]
struct Resting {
    side: Side,
    price: i64,
    size: u64,
    seq: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BookCounters {
    pub halts_skipped: u64,
    pub pass_through: u64,
}

/// Full reconstructed book for one instrument.
#[derive(Debug, Clone)]
pub struct BookState {
    bids: BTreeMap<i64, Level>,
    asks: BTreeMap<i64, Level>,
    orders: HashMap<u64, Resting>,
    tick_size: i64,
    next_seq: u64,
    policy: CrossingPolicy,
    counters: BookCounters,
}

impl BookState {
    /// `tick_size` is the number of message price units per tick.
    pub fn new(tick_size: i64) -> Self {
        assert!(tick_size > 0, "tick size must be positive");
        BookState {
            bids: BTreeMap::new(),
            asks: BTreeMap::new(),
            orders: HashMap::new(),
            tick_size,
            next_seq: 0,
            policy: CrossingPolicy::Reject,
            counters: BookCounters::default(),
        }
    }

    pub fn with_policy(mut self, policy: CrossingPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn tick_size(&self) -> i64 {
        self.tick_size
    }

    pub fn counters(&self) -> BookCounters {
        self.counters
    }

    pub fn best_bid(&self) -> Option<i64> {
        self.bids.keys().next_back().copied()
    }

    pub fn best_ask(&self) -> Option<i64> {
        self.asks.keys().next().copied()
    }

    pub fn live_orders(&self) -> usize {
        self.orders.len()
    }

    pub fn total_size(&self) -> u64 {
        self.orders.values().map(|o| o.size).sum()
    }

    pub fn order(&self, id: u64) -> Option<Order> {
        self.orders.get(&id).map(|r| Order {
            id,
            side: r.side,
            price: r.price,
            size: r.size,
            seq: r.seq,
        })
    }

    /// Aggregate size resting at `price` ticks on `side`.
    pub fn level_size(&self, side: Side, price: i64) -> u64 {
        self.side(side).get(&price).map_or(0, |l| l.total)
    }

    /// Order ids at a level, front of queue first.
    pub fn level_queue(&self, side: Side, price: i64) -> Vec<u64> {
        self.side(side)
            .get(&price)
            .map(|l| l.queue.iter().copied().collect())
            .unwrap_or_default()
    }

    fn side(&self, side: Side) -> &BTreeMap<i64, Level> {
        match side {
            Side::Bid => &self.bids,
            Side::Ask => &self.asks,
        }
    }

    fn side_mut(&mut self, side: Side) -> &mut BTreeMap<i64, Level> {
        match side {
            Side::Bid => &mut self.bids,
            Side::Ask => &mut self.asks,
        }
    }

    fn to_ticks(&self, price: i64) -> Result<i64, BookError> {
        if price % self.tick_size != 0 {
            return Err(BookError::OffTickPrice {
                price,
                tick_size: self.tick_size,
            });
        }
        Ok(price / self.tick_size)
    }

    /// Applies one message. On error the book is left unchanged.
    pub fn apply_message(&mut self, msg: &Message) -> Result<Applied, BookError> {
        match msg.kind {
            MessageKind::Halt => {
                self.counters.halts_skipped += 1;
                Ok(Applied::Skipped)
            }
            MessageKind::ExecuteHidden | MessageKind::CrossTrade => {
                self.counters.pass_through += 1;
                Ok(Applied::PassThrough)
            }
            MessageKind::Submit => {
                if msg.size == 0 {
                    return Err(BookError::NonPositiveSize);
                }
                let price = self.to_ticks(msg.price)?;
                self.submit(msg.order_id, Side::from(msg.direction), price, msg.size)
            }
            MessageKind::PartialCancel | MessageKind::ExecuteVisible => {
                if msg.size == 0 {
                    return Err(BookError::NonPositiveSize);
                }
                let resting = self.live(msg.order_id)?;
                if msg.size > resting.size {
                    return Err(BookError::SizeExceedsOrder {
                        id: msg.order_id,
                        requested: msg.size,
                        remaining: resting.size,
                    });
                }
                self.reduce(msg.order_id, msg.size);
                Ok(Applied::Mutated)
            }
            MessageKind::Delete => {
                if msg.size == 0 {
                    return Err(BookError::NonPositiveSize);
                }
                let resting = self.live(msg.order_id)?;
                if msg.size != resting.size {
                    return Err(BookError::SizeMismatch {
                        id: msg.order_id,
                        requested: msg.size,
                        remaining: resting.size,
                    });
                }
                self.reduce(msg.order_id, resting.size);
                Ok(Applied::Mutated)
            }
        }
    }

    fn live(&self, id: u64) -> Result<Resting, BookError> {
        self.orders
            .get(&id)
            .copied()
            .ok_or(BookError::UnknownOrderId(id))
    }

    fn crosses(side: Side, price: i64, touch: i64) -> bool {
        match side {
            Side::Bid => price >= touch,
            Side::Ask => price <= touch,
        }
    }

    fn opposite_touch(&self, side: Side) -> Option<i64> {
        match side {
            Side::Bid => self.best_ask(),
            Side::Ask => self.best_bid(),
        }
    }

    fn submit(&mut self, id: u64, side: Side, price: i64, size: u64) -> Result<Applied, BookError> {
        if self.orders.contains_key(&id) {
            return Err(BookError::DuplicateOrderId(id));
        }
        let mut remaining = size;
        let mut fills = Vec::new();
        if let Some(touch) = self.opposite_touch(side) {
            if Self::crosses(side, price, touch) {
                if self.policy == CrossingPolicy::Reject {
                    return Err(BookError::CrossingLimitOrder { id, price, touch });
                }
                let contra = match side {
                    Side::Bid => Side::Ask,
                    Side::Ask => Side::Bid,
                };
                while remaining > 0 {
                    let Some(best) = self.opposite_touch(side) else {
                        break;
                    };
                    if !Self::crosses(side, price, best) {
                        break;
                    }
                    let front = self.side(contra)[&best].queue[0];
                    let take = remaining.min(self.orders[&front].size);
                    self.reduce(front, take);
                    remaining -= take;
                    fills.push(Fill {
                        resting_id: front,
                        price: best,
                        size: take,
                    });
                }
            }
        }
        if remaining > 0 {
            let seq = self.next_seq;
            self.next_seq += 1;
            self.orders.insert(
                id,
                Resting {
                    side,
                    price,
                    size: remaining,
                    seq,
                },
            );
            let level = self.side_mut(side).entry(price).or_default();
            level.queue.push_back(id);
            level.total += remaining;
        }
        if fills.is_empty() {
            Ok(Applied::Mutated)
        } else {
            Ok(Applied::Crossed { fills })
        }
    }

    /// Removes `amount` shares from a live order, dropping it (and its level)
    /// when nothing remains.
    fn reduce(&mut self, id: u64, amount: u64) {
        let resting = self.orders.get_mut(&id).expect("live order");
        resting.size -= amount;
        let (side, price, gone) = (resting.side, resting.price, resting.size == 0);
        if gone {
            self.orders.remove(&id);
        }
        let book_side = self.side_mut(side);
        let level = book_side.get_mut(&price).expect("level of live order");
        level.total -= amount;
        if gone {
            if let Some(pos) = level.queue.iter().position(|&o| o == id) {
                level.queue.remove(pos);
            }
        }
        if level.total == 0 {
            book_side.remove(&price);
        }
    }

    /// Projects the book onto `levels` price levels per side.
    pub fn snapshot(&self, levels: usize, mode: DepthMode, time: Timestamp) -> DepthSnapshot {
        assert!(levels >= 1, "snapshot needs at least one level");
        let (bid_prices, bid_sizes) = match mode {
            DepthMode::TickOffset => dense_side(&self.bids, self.best_bid(), levels, -1),
            DepthMode::Rank => ranked_side(self.bids.iter().rev(), levels),
        };
        let (ask_prices, ask_sizes) = match mode {
            DepthMode::TickOffset => dense_side(&self.asks, self.best_ask(), levels, 1),
            DepthMode::Rank => ranked_side(self.asks.iter(), levels),
        };
        DepthSnapshot::from_levels(time, mode, bid_prices, bid_sizes, ask_prices, ask_sizes)
    }
}

type SideLevels = (Vec<Option<i64>>, Vec<u64>);

fn dense_side(
    side: &BTreeMap<i64, Level>,
    best: Option<i64>,
    levels: usize,
    step: i64,
) -> SideLevels {
    match best {
        None => (vec![None; levels], vec![0; levels]),
        Some(best) => (0..levels as i64)
            .map(|i| {
                let p = best + step * i;
                (Some(p), side.get(&p).map_or(0, |l| l.total))
            })
            .unzip(),
    }
}

fn ranked_side<'a>(iter: impl Iterator<Item = (&'a i64, &'a Level)>, levels: usize) -> SideLevels {
    let mut prices = Vec::with_capacity(levels);
    let mut sizes = Vec::with_capacity(levels);
    for (p, l) in iter.take(levels) {
        prices.push(Some(*p));
        sizes.push(l.total);
    }
    prices.resize(levels, None);
    sizes.resize(levels, 0);
    (prices, sizes)
}

/// Top-`L` projection of the book: the model's observable state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthSnapshot {
    pub event_time: Timestamp,
    pub mode: DepthMode,
    pub best_bid: Option<i64>,
    pub best_ask: Option<i64>,
    pub bid_sizes: Vec<u64>,
    pub ask_sizes: Vec<u64>,
    bid_prices: Vec<Option<i64>>,
    ask_prices: Vec<Option<i64>>,
}

impl DepthSnapshot {
    pub fn from_levels(
        event_time: Timestamp,
        mode: DepthMode,
        bid_prices: Vec<Option<i64>>,
        bid_sizes: Vec<u64>,
        ask_prices: Vec<Option<i64>>,
        ask_sizes: Vec<u64>,
    ) -> Self {
        debug_assert_eq!(bid_prices.len(), bid_sizes.len());
        debug_assert_eq!(ask_prices.len(), ask_sizes.len());
        debug_assert_eq!(bid_sizes.len(), ask_sizes.len());
        DepthSnapshot {
            event_time,
            mode,
            best_bid: bid_prices.first().copied().flatten(),
            best_ask: ask_prices.first().copied().flatten(),
            bid_sizes,
            ask_sizes,
            bid_prices,
            ask_prices,
        }
    }

    pub fn levels(&self) -> usize {
        self.bid_sizes.len()
    }

    pub fn bid_price(&self, level: usize) -> Option<i64> {
        self.bid_prices.get(level).copied().flatten()
    }

    pub fn ask_price(&self, level: usize) -> Option<i64> {
        self.ask_prices.get(level).copied().flatten()
    }

    /// Same snapshot stamped with a different time.
    pub fn at(mut self, time: Timestamp) -> Self {
        self.event_time = time;
        self
    }

    pub fn mid_and_spread(&self) -> Result<(MidPrice, i64), BookError> {
        mid_and_spread(self)
    }
}

/// Mid-price in half-ticks (best bid + best ask).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MidPrice(pub i64);

impl MidPrice {
    pub fn half_ticks(self) -> i64 {
        self.0
    }

    /// Mid-price in currency, given the currency value of one tick.
    pub fn in_currency(self, tick_value: f64) -> f64 {
        self.0 as f64 * tick_value / 2.0
    }
}

pub fn mid_and_spread(snap: &DepthSnapshot) -> Result<(MidPrice, i64), BookError> {
    match (snap.best_bid, snap.best_ask) {
        (Some(b), Some(a)) => Ok((MidPrice(b + a), a - b)),
        _ => Err(BookError::OneSidedBook),
    }
}

/// Replays messages through a fresh book, yielding one snapshot per applied
/// message. Halt messages are skipped and produce no snapshot.
pub struct Rebuilder<I> {
    book: BookState,
    messages: I,
    levels: usize,
    mode: DepthMode,
    index: usize,
    last_time: Option<Timestamp>,
    failed: bool,
}

impl<'a, I: Iterator<Item = &'a Message>> Rebuilder<I> {
    pub fn new(book: BookState, messages: I, levels: usize, mode: DepthMode) -> Self {
        Rebuilder {
            book,
            messages,
            levels,
            mode,
            index: 0,
            last_time: None,
            failed: false,
        }
    }

    pub fn book(&self) -> &BookState {
        &self.book
    }

    /// Applies the next message without materializing a snapshot. Returns
    /// `None` at end of stream, `Some(Ok(false))` for skipped halts.
    pub fn advance(&mut self) -> Option<Result<(bool, Timestamp), RebuildError>> {
        if self.failed {
            return None;
        }
        let msg = self.messages.next()?;
        let index = self.index;
        self.index += 1;
        let fail = |source| RebuildError { index, source };
        if let Some(prev) = self.last_time {
            if msg.time < prev {
                self.failed = true;
                return Some(Err(fail(BookError::TimeOrdering {
                    previous: prev,
                    found: msg.time,
                })));
            }
        }
        self.last_time = Some(msg.time);
        match self.book.apply_message(msg) {
            Ok(Applied::Skipped) => Some(Ok((false, msg.time))),
            Ok(_) => Some(Ok((true, msg.time))),
            Err(e) => {
                self.failed = true;
                Some(Err(fail(e)))
            }
        }
    }
}

impl<'a, I: Iterator<Item = &'a Message>> Iterator for Rebuilder<I> {
    type Item = Result<DepthSnapshot, RebuildError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            match self.advance()? {
                Ok((true, time)) => {
                    return Some(Ok(self.book.snapshot(self.levels, self.mode, time)))
                }
                Ok((false, _)) => continue,
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

/// Collects the full snapshot sequence for a message slice.
pub fn rebuild_stream(
    msgs: &[Message],
    levels: usize,
    mode: DepthMode,
    tick_size: i64,
) -> Result<Vec<DepthSnapshot>, RebuildError> {
    Rebuilder::new(BookState::new(tick_size), msgs.iter(), levels, mode).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(kind: MessageKind, id: u64, size: u64, price: i64, dir: Direction) -> Message {
        Message {
            time: Timestamp::ZERO,
            kind,
            order_id: id,
            size,
            price,
            direction: dir,
        }
    }

    fn submit(id: u64, size: u64, price: i64, dir: Direction) -> Message {
        msg(MessageKind::Submit, id, size, price, dir)
    }

    #[test]
    fn single_bid_defines_touch_and_execution_reduces_it() {
        let mut book = BookState::new(1);
        book.apply_message(&submit(1, 100, 9999, Direction::Buy))
            .unwrap();
        let s = book.snapshot(10, DepthMode::TickOffset, Timestamp::ZERO);
        assert_eq!(s.best_bid, Some(9999));
        assert_eq!(s.bid_sizes[0], 100);

        book.apply_message(&msg(MessageKind::ExecuteVisible, 1, 40, 9999, Direction::Buy))
            .unwrap();
        let s = book.snapshot(10, DepthMode::TickOffset, Timestamp::ZERO);
        assert_eq!(s.bid_sizes[0], 60);

        let err = book
            .apply_message(&msg(MessageKind::Delete, 777, 1, 9999, Direction::Buy))
            .unwrap_err();
        assert_eq!(err, BookError::UnknownOrderId(777));
    }

    #[test]
    fn two_level_readout_and_empty_book() {
        let mut book = BookState::new(1);
        book.apply_message(&submit(1, 100, 9999, Direction::Buy))
            .unwrap();
        book.apply_message(&submit(2, 50, 10000, Direction::Sell))
            .unwrap();
        let s = book.snapshot(2, DepthMode::TickOffset, Timestamp::ZERO);
        assert_eq!(s.bid_sizes, vec![100, 0]);
        assert_eq!(s.ask_sizes, vec![50, 0]);
        let (mid, spread) = s.mid_and_spread().unwrap();
        assert_eq!(mid, MidPrice(19999));
        assert!((mid.in_currency(0.01) - 99.995).abs() < 1e-9);
        assert_eq!(spread, 1);

        let empty = BookState::new(1).snapshot(3, DepthMode::TickOffset, Timestamp::ZERO);
        assert_eq!(empty.best_bid, None);
        assert_eq!(empty.best_ask, None);
        assert!(empty.bid_sizes.iter().chain(&empty.ask_sizes).all(|&s| s == 0));
        assert_eq!(empty.mid_and_spread(), Err(BookError::OneSidedBook));
    }

    #[test]
    fn mid_in_half_ticks() {
        let mut book = BookState::new(1);
        book.apply_message(&submit(1, 1, 9998, Direction::Buy)).unwrap();
        book.apply_message(&submit(2, 1, 10000, Direction::Sell))
            .unwrap();
        let s = book.snapshot(1, DepthMode::TickOffset, Timestamp::ZERO);
        assert_eq!(s.mid_and_spread().unwrap(), (MidPrice(19998), 2));
    }

    #[test]
    fn price_time_priority_within_level() {
        let mut book = BookState::new(1);
        for id in [5, 3, 9] {
            book.apply_message(&submit(id, 10, 100, Direction::Sell))
                .unwrap();
        }
        assert_eq!(book.level_queue(Side::Ask, 100), vec![5, 3, 9]);
        book.apply_message(&msg(MessageKind::Delete, 3, 10, 100, Direction::Sell))
            .unwrap();
        assert_eq!(book.level_queue(Side::Ask, 100), vec![5, 9]);
        assert!(book.order(5).unwrap().seq < book.order(9).unwrap().seq);
    }

    #[test]
    fn crossing_rejected_in_replay_and_executed_in_simulation() {
        let mut replay = BookState::new(1);
        replay
            .apply_message(&submit(1, 10, 101, Direction::Sell))
            .unwrap();
        let err = replay
            .apply_message(&submit(2, 5, 101, Direction::Buy))
            .unwrap_err();
        assert!(matches!(err, BookError::CrossingLimitOrder { .. }));
        assert_eq!(replay.total_size(), 10);

        let mut sim = BookState::new(1).with_policy(CrossingPolicy::Execute);
        sim.apply_message(&submit(1, 10, 101, Direction::Sell)).unwrap();
        sim.apply_message(&submit(2, 4, 102, Direction::Sell)).unwrap();
        let out = sim
            .apply_message(&submit(3, 12, 102, Direction::Buy))
            .unwrap();
        assert_eq!(
            out,
            Applied::Crossed {
                fills: vec![
                    Fill { resting_id: 1, price: 101, size: 10 },
                    Fill { resting_id: 2, price: 102, size: 2 },
                ]
            }
        );
        assert_eq!(sim.best_ask(), Some(102));
        assert_eq!(sim.level_size(Side::Ask, 102), 2);
        assert_eq!(sim.best_bid(), None);

        let out = sim.apply_message(&submit(4, 5, 102, Direction::Buy)).unwrap();
        assert!(matches!(out, Applied::Crossed { .. }));
        assert_eq!(sim.best_bid(), Some(102));
        assert_eq!(sim.level_size(Side::Bid, 102), 3);
        assert_eq!(sim.best_ask(), None);
    }

    #[test]
    fn size_errors_leave_book_unchanged() {
        let mut book = BookState::new(1);
        book.apply_message(&submit(1, 10, 100, Direction::Buy)).unwrap();
        let before = book.total_size();
        assert_eq!(
            book.apply_message(&submit(2, 0, 100, Direction::Buy)),
            Err(BookError::NonPositiveSize)
        );
        assert!(matches!(
            book.apply_message(&msg(MessageKind::PartialCancel, 1, 11, 100, Direction::Buy)),
            Err(BookError::SizeExceedsOrder { .. })
        ));
        assert!(matches!(
            book.apply_message(&msg(MessageKind::Delete, 1, 4, 100, Direction::Buy)),
            Err(BookError::SizeMismatch { .. })
        ));
        assert_eq!(
            book.apply_message(&submit(1, 3, 99, Direction::Buy)),
            Err(BookError::DuplicateOrderId(1))
        );
        assert_eq!(book.total_size(), before);
    }

    #[test]
    fn off_tick_price_rejected() {
        let mut book = BookState::new(100);
        assert_eq!(
            book.apply_message(&submit(1, 1, 10_050, Direction::Buy)),
            Err(BookError::OffTickPrice {
                price: 10_050,
                tick_size: 100
            })
        );
        book.apply_message(&submit(1, 1, 10_000, Direction::Buy))
            .unwrap();
        assert_eq!(book.best_bid(), Some(100));
    }

    #[test]
    fn hidden_and_halt_do_not_mutate() {
        let mut book = BookState::new(1);
        book.apply_message(&submit(1, 10, 100, Direction::Buy)).unwrap();
        assert_eq!(
            book.apply_message(&msg(MessageKind::ExecuteHidden, 0, 7, 100, Direction::Buy)),
            Ok(Applied::PassThrough)
        );
        assert_eq!(
            book.apply_message(&msg(MessageKind::Halt, 0, 0, -1, Direction::Sell)),
            Ok(Applied::Skipped)
        );
        assert_eq!(book.total_size(), 10);
        assert_eq!(
            book.counters(),
            BookCounters {
                halts_skipped: 1,
                pass_through: 1
            }
        );
    }

    #[test]
    fn rank_mode_skips_empty_prices() {
        let mut book = BookState::new(1);
        book.apply_message(&submit(1, 10, 100, Direction::Buy)).unwrap();
        book.apply_message(&submit(2, 7, 97, Direction::Buy)).unwrap();
        let dense = book.snapshot(3, DepthMode::TickOffset, Timestamp::ZERO);
        assert_eq!(dense.bid_sizes, vec![10, 0, 0]);
        let ranked = book.snapshot(3, DepthMode::Rank, Timestamp::ZERO);
        assert_eq!(ranked.bid_sizes, vec![10, 7, 0]);
        assert_eq!(ranked.bid_price(1), Some(97));
        assert_eq!(ranked.bid_price(2), None);
    }

    #[test]
    fn rebuild_counts_and_time_ordering() {
        let mut msgs = vec![
            submit(1, 10, 100, Direction::Buy),
            submit(2, 10, 101, Direction::Sell),
            msg(MessageKind::ExecuteVisible, 2, 4, 101, Direction::Sell),
        ];
        for (i, m) in msgs.iter_mut().enumerate() {
            m.time = Timestamp(i as u64 * 10);
        }
        let snaps = rebuild_stream(&msgs, 2, DepthMode::TickOffset, 1).unwrap();
        assert_eq!(snaps.len(), 3);
        assert_eq!(snaps[2].ask_sizes[0], 6);

        msgs[2].time = Timestamp(5);
        let err = rebuild_stream(&msgs, 2, DepthMode::TickOffset, 1).unwrap_err();
        assert_eq!(err.index, 2);
        assert!(matches!(err.source, BookError::TimeOrdering { .. }));
    }
}
