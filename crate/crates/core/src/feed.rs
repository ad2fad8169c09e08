//! LOBSTER-style message and order-book files.
//!
//! Message files carry six comma-separated columns:
//!
//! ```text
//! time,kind,order_id,size,price,direction
//! 34200.189462639,1,11885113,21,2238200,1
//! ```
//!
//! `time` is seconds after midnight with up to nine fractional digits and is
//! held internally as integer nanoseconds. `price` is in units of 10^-4
//! currency. Snapshot ("orderbook") files carry `4·L` columns per row laid
//! out as `ask_price_1,ask_size_1,bid_price_1,bid_size_1,...`, with absent
//! prices written as [`ABSENT_PRICE`].

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::book::{DepthMode, DepthSnapshot};

/// Price written for an absent level in snapshot rows.
pub const ABSENT_PRICE: i64 = -9_999_999_999;

const NANOS_PER_SEC: u64 = 1_000_000_000;

/// Event time in integer nanoseconds after midnight.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_nanos(ns: u64) -> Self {
        Timestamp(ns)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp((secs * NANOS_PER_SEC as f64).round().max(0.0) as u64)
    }

    pub fn nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_SEC as f64
    }

    /// Parses `seconds[.fraction]` with at most nine fractional digits.
    pub fn parse(text: &str) -> Option<Self> {
        let (int_part, frac_part) = match text.split_once('.') {
            Some((i, f)) => (i, f),
            None => (text, ""),
        };
        if int_part.is_empty() || !int_part.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if frac_part.len() > 9 || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if text.contains('.') && frac_part.is_empty() {
            return None;
        }
        let secs: u64 = int_part.parse().ok()?;
        let mut frac: u64 = if frac_part.is_empty() {
            0
        } else {
            frac_part.parse().ok()?
        };
        for _ in frac_part.len()..9 {
            frac *= 10;
        }
        secs.checked_mul(NANOS_PER_SEC)?
            .checked_add(frac)
            .map(Timestamp)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{:09}",
            self.0 / NANOS_PER_SEC,
            self.0 % NANOS_PER_SEC
        )
    }
}

/// LOBSTER event type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Submit,
    PartialCancel,
    Delete,
    ExecuteVisible,
    ExecuteHidden,
    /// Auction cross trade; passed through like a hidden execution.
    CrossTrade,
    Halt,
}

impl MessageKind {
    pub fn code(self) -> u8 {
        match self {
            MessageKind::Submit => 1,
            MessageKind::PartialCancel => 2,
            MessageKind::Delete => 3,
            MessageKind::ExecuteVisible => 4,
            MessageKind::ExecuteHidden => 5,
            MessageKind::CrossTrade => 6,
            MessageKind::Halt => 7,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => MessageKind::Submit,
            2 => MessageKind::PartialCancel,
            3 => MessageKind::Delete,
            4 => MessageKind::ExecuteVisible,
            5 => MessageKind::ExecuteHidden,
            6 => MessageKind::CrossTrade,
            7 => MessageKind::Halt,
            _ => return None,
        })
    }

    /// Kinds whose size and price must be strictly positive.
    pub fn is_order_event(self) -> bool {
        !matches!(self, MessageKind::Halt | MessageKind::CrossTrade)
    }
}

/// Trade direction of the order a message refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Buy,
    Sell,
}

impl Direction {
    pub fn sign(self) -> i8 {
        match self {
            Direction::Buy => 1,
            Direction::Sell => -1,
        }
    }
}

/// One order-flow event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub time: Timestamp,
    pub kind: MessageKind,
    pub order_id: u64,
    pub size: u64,
    /// Price in 10^-4 currency units.
    pub price: i64,
    pub direction: Direction,
}

#[derive(Debug, Error)]
pub enum FeedError {
    #[error("malformed line: field {field}: {reason}")]
    MalformedLine { field: usize, reason: String },
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<FeedError>,
    },
    #[error("snapshot {index} has {found} levels, expected {expected}")]
    MixedDepth {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl FeedError {
    fn malformed(field: usize, reason: impl Into<String>) -> Self {
        FeedError::MalformedLine {
            field,
            reason: reason.into(),
        }
    }

    /// Line number for errors raised while streaming a file (1-based).
    pub fn line(&self) -> Option<usize> {
        match self {
            FeedError::AtLine { line, .. } => Some(*line),
            _ => None,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FeedError + '_ {
    move |source| FeedError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses one six-column message line. Field indices in errors are 0-based;
/// field 6 denotes an arity problem.
pub fn parse_message_line(line: &str) -> Result<Message, FeedError> {
    let line = line.trim_end_matches(['\r', '\n']);
    let mut fields = [""; 6];
    let mut count = 0;
    for part in line.split(',') {
        if count == 6 {
            return Err(FeedError::malformed(6, "arity: more than 6 fields"));
        }
        fields[count] = part;
        count += 1;
    }
    if count != 6 {
        return Err(FeedError::malformed(
            6,
            format!("arity: expected 6 fields, found {count}"),
        ));
    }

    let time = Timestamp::parse(fields[0])
        .ok_or_else(|| FeedError::malformed(0, format!("invalid time {:?}", fields[0])))?;
    let kind = fields[1]
        .parse::<u8>()
        .ok()
        .and_then(MessageKind::from_code)
        .ok_or_else(|| FeedError::malformed(1, format!("invalid kind {:?}", fields[1])))?;
    let order_id = fields[2]
        .parse::<u64>()
        .map_err(|_| FeedError::malformed(2, format!("invalid order id {:?}", fields[2])))?;
    let size = fields[3]
        .parse::<u64>()
        .map_err(|_| FeedError::malformed(3, format!("invalid size {:?}", fields[3])))?;
    let price = fields[4]
        .parse::<i64>()
        .map_err(|_| FeedError::malformed(4, format!("invalid price {:?}", fields[4])))?;
    let direction = match fields[5] {
        "1" => Direction::Buy,
        "-1" => Direction::Sell,
        other => {
            return Err(FeedError::malformed(
                5,
                format!("invalid direction {other:?}"),
            ))
        }
    };
    if kind.is_order_event() {
        if size == 0 {
            return Err(FeedError::malformed(3, "size must be positive"));
        }
        if price <= 0 {
            return Err(FeedError::malformed(4, "price must be positive"));
        }
    }
    Ok(Message {
        time,
        kind,
        order_id,
        size,
        price,
        direction,
    })
}

/// Canonical form: nine fractional time digits, no leading zeros.
pub fn serialize_message_line(msg: &Message) -> String {
    let mut out = String::with_capacity(48);
    write_message_line(&mut out, msg);
    out
}

fn write_message_line(out: &mut String, msg: &Message) {
    use std::fmt::Write as _;
    let _ = write!(
        out,
        "{},{},{},{},{},{}",
        msg.time,
        msg.kind.code(),
        msg.order_id,
        msg.size,
        msg.price,
        msg.direction.sign()
    );
}

/// Streaming reader over a message file; holds one line in memory at a time.
pub struct MessageReader<R> {
    inner: R,
    buf: String,
    line: usize,
}

impl MessageReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, FeedError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(io_err(path))?;
        Ok(MessageReader::new(BufReader::with_capacity(1 << 16, file)))
    }
}

impl<R: BufRead> MessageReader<R> {
    pub fn new(inner: R) -> Self {
        MessageReader {
            inner,
            buf: String::new(),
            line: 0,
        }
    }
}

impl<R: BufRead> Iterator for MessageReader<R> {
    type Item = Result<Message, FeedError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.inner.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(source) => {
                    return Some(Err(FeedError::AtLine {
                        line: self.line + 1,
                        source: Box::new(FeedError::Io {
                            path: PathBuf::new(),
                            source,
                        }),
                    }))
                }
            }
            self.line += 1;
            let text = self.buf.trim_end_matches(['\r', '\n']);
            if text.is_empty() {
                continue;
            }
            return Some(parse_message_line(text).map_err(|e| FeedError::AtLine {
                line: self.line,
                source: Box::new(e),
            }));
        }
    }
}

/// Opens `path` as a bounded-memory message stream.
pub fn read_message_stream(
    path: impl AsRef<Path>,
) -> Result<MessageReader<BufReader<File>>, FeedError> {
    MessageReader::open(path)
}

pub fn write_message_file(path: impl AsRef<Path>, msgs: &[Message]) -> Result<(), FeedError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut line = String::with_capacity(64);
    for m in msgs {
        line.clear();
        write_message_line(&mut line, m);
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Level prices for the row layout, in message price units.
fn level_prices(snap: &DepthSnapshot, tick_size: i64) -> (Vec<i64>, Vec<i64>) {
    let to_units = |p: Option<i64>| p.map_or(ABSENT_PRICE, |t| t * tick_size);
    let asks = (0..snap.levels())
        .map(|i| to_units(snap.ask_price(i)))
        .collect();
    let bids = (0..snap.levels())
        .map(|i| to_units(snap.bid_price(i)))
        .collect();
    (asks, bids)
}

/// One CSV row in LOBSTER orderbook layout.
pub fn snapshot_row(snap: &DepthSnapshot, tick_size: i64) -> String {
    use std::fmt::Write as _;
    let (asks, bids) = level_prices(snap, tick_size);
    let mut out = String::new();
    for i in 0..snap.levels() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(
            out,
            "{},{},{},{}",
            asks[i], snap.ask_sizes[i], bids[i], snap.bid_sizes[i]
        );
    }
    out
}

pub fn write_snapshot_rows(
    snaps: &[DepthSnapshot],
    path: impl AsRef<Path>,
    tick_size: i64,
) -> Result<(), FeedError> {
    let path = path.as_ref();
    if let Some(first) = snaps.first() {
        let expected = first.levels();
        if let Some((index, s)) = snaps
            .iter()
            .enumerate()
            .find(|(_, s)| s.levels() != expected)
        {
            return Err(FeedError::MixedDepth {
                index,
                expected,
                found: s.levels(),
            });
        }
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in snaps {
        w.write_all(snapshot_row(s, tick_size).as_bytes())
            .map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads rows written by [`write_snapshot_rows`]. The orderbook layout has
/// no time column, so snapshots come back with `event_time` zero.
pub fn read_snapshot_rows(
    path: impl AsRef<Path>,
    tick_size: i64,
    mode: DepthMode,
) -> Result<Vec<DepthSnapshot>, FeedError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let at = |e: FeedError| FeedError::AtLine {
            line: n + 1,
            source: Box::new(e),
        };
        let values = line
            .split(',')
            .enumerate()
            .map(|(i, f)| {
                f.parse::<i64>()
                    .map_err(|_| FeedError::malformed(i, format!("not an integer: {f:?}")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(at)?;
        if values.is_empty() || values.len() % 4 != 0 {
            return Err(at(FeedError::malformed(
                values.len(),
                "row width is not a multiple of 4",
            )));
        }
        let levels = values.len() / 4;
        let price = |v: i64| (v != ABSENT_PRICE).then_some(v / tick_size);
        let mut ask_prices = Vec::with_capacity(levels);
        let mut bid_prices = Vec::with_capacity(levels);
        let mut ask_sizes = Vec::with_capacity(levels);
        let mut bid_sizes = Vec::with_capacity(levels);
        for chunk in values.chunks_exact(4) {
            ask_prices.push(price(chunk[0]));
            ask_sizes.push(chunk[1].max(0) as u64);
            bid_prices.push(price(chunk[2]));
            bid_sizes.push(chunk[3].max(0) as u64);
        }
        out.push(DepthSnapshot::from_levels(
            Timestamp::ZERO,
            mode,
            bid_prices,
            bid_sizes,
            ask_prices,
            ask_sizes,
        ));
    }
    Ok(out)
}
