//! Dataset files: one JSON header line followed by one CSV row per event
//! (`tau,move,bid_touch,ask_touch,x_1,...,x_d`).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EventDataset, FeatureError, FeatureSpec, Move, Normalization};
use crate::feed::Timestamp;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    stock_id: String,
    spec: FeatureSpec,
    events: usize,
    one_sided_skipped: usize,
    normalization: Normalization,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_document(w: &mut impl Write, ds: &EventDataset) -> std::io::Result<()> {
    let header = Header {
        stock_id: ds.stock_id.clone(),
        spec: ds.spec,
        events: ds.len(),
        one_sided_skipped: ds.one_sided_skipped,
        normalization: ds.normalization.clone(),
    };
    let json = serde_json::to_string(&header).map_err(std::io::Error::other)?;
    writeln!(w, "{json}")?;
    for j in 0..ds.len() {
        let (b, a) = ds.touch[j];
        write!(w, "{},{},{},{}", ds.taus[j], ds.moves[j].sign(), b, a)?;
        for x in ds.state(j) {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_dataset(ds: &EventDataset, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    write_datasets(std::slice::from_ref(ds), path)
}

/// Writes several datasets into one file, one document after another.
pub fn write_datasets(sets: &[EventDataset], path: impl AsRef<Path>) -> Result<(), FeatureError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for ds in sets {
        write_document(&mut w, ds).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a file holding exactly one dataset.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<EventDataset, FeatureError> {
    let mut sets = read_datasets(path)?;
    match sets.len() {
        1 => Ok(sets.pop().expect("one")),
        n => Err(FeatureError::Format(format!("expected one dataset, found {n}"))),
    }
}

/// Reads every dataset document in a file.
pub fn read_datasets(path: impl AsRef<Path>) -> Result<Vec<EventDataset>, FeatureError> {
    let path = path.as_ref();
    let mut lines = BufReader::new(File::open(path).map_err(io_err(path))?).lines();
    let mut out = Vec::new();
    let mut row = 0usize;
    while let Some(first) = lines.next() {
        let first = first.map_err(io_err(path))?;
        row += 1;
        let header: Header = serde_json::from_str(&first)
            .map_err(|e| FeatureError::Format(format!("line {row}: header: {e}")))?;
        let mut ds = EventDataset::new(header.stock_id, header.spec);
        let d = ds.dim();
        if header.normalization.shift.len() != d || header.normalization.scale.len() != d {
            return Err(FeatureError::DimensionMismatch {
                expected: d,
                found: header.normalization.shift.len(),
            });
        }
        let mut state = Vec::with_capacity(d);
        for _ in 0..header.events {
            let line = match lines.next() {
                Some(l) => l.map_err(io_err(path))?,
                None => {
                    return Err(FeatureError::Format(format!(
                        "{}: header declares {} events, found {}",
                        ds.stock_id,
                        header.events,
                        ds.len()
                    )))
                }
            };
            row += 1;
            let bad = |what: &str| FeatureError::Format(format!("line {row}: {what}"));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 + d {
                return Err(FeatureError::DimensionMismatch {
                    expected: 4 + d,
                    found: fields.len(),
                });
            }
            let tau = Timestamp::parse(fields[0]).ok_or_else(|| bad("time"))?;
            let mv = fields[1]
                .parse::<i64>()
                .ok()
                .and_then(Move::from_sign)
                .ok_or_else(|| bad("move"))?;
            let b = fields[2].parse().map_err(|_| bad("bid touch"))?;
            let a = fields[3].parse().map_err(|_| bad("ask touch"))?;
            state.clear();
            for f in &fields[4..] {
                state.push(f.parse::<f64>().map_err(|_| bad("state"))?);
            }
            ds.push_row(tau, mv, (b, a), &state);
        }
        ds.normalization = header.normalization;
        ds.one_sided_skipped = header.one_sided_skipped;
        out.push(ds);
    }
    if out.is_empty() {
        return Err(FeatureError::Format("missing header".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::NormScheme;

    #[test]
    fn round_trip_preserves_everything() {
        let spec = FeatureSpec {
            include_spread: true,
            include_last_direction: true,
            ..FeatureSpec::depth_only(2)
        };
        let mut ds = EventDataset::new("RT", spec);
        for j in 0..30u64 {
            let mv = if j % 2 == 0 { Move::Up } else { Move::Down };
            let x = [j as f64 * 1.5, 3.0, 0.1 * j as f64, 7.0 + j as f64, 1.0, mv.sign() as f64];
            ds.push_row(Timestamp(34_200_000_000_000 + j * 17), mv, (j as u32 + 1, 2), &x);
        }
        ds.normalize(NormScheme::PerStockZscore, 0..20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_dataset(&ds, &p).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn wrong_arity_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let mut ds = EventDataset::new("A", FeatureSpec::depth_only(1));
        ds.push_row(Timestamp(1), Move::Up, (1, 1), &[1.0, 2.0]);
        write_dataset(&ds, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap().replace("1,2\n", "1,2,3\n");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(read_dataset(&p), Err(FeatureError::DimensionMismatch { .. })));
    }

    #[test]
    fn several_documents_in_one_file() {
        let mk = |id: &str, n: u64| {
            let mut ds = EventDataset::new(id, FeatureSpec::depth_only(1));
            for j in 0..n {
                ds.push_row(Timestamp(j), Move::Down, (1, 2), &[j as f64, 1.0]);
            }
            ds
        };
        let sets = vec![mk("A", 3), mk("B", 5)];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pooled.csv");
        write_datasets(&sets, &p).unwrap();
        assert_eq!(read_datasets(&p).unwrap(), sets);
        assert!(matches!(read_dataset(&p), Err(FeatureError::Format(_))));
        let text = std::fs::read_to_string(&p).unwrap();
        let cut: Vec<&str> = text.lines().take(7).collect();
        std::fs::write(&p, cut.join("\n") + "\n").unwrap();
        assert!(matches!(read_datasets(&p), Err(FeatureError::Format(_))));
    }
}
