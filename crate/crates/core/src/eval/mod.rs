//! Accuracy scores, paired cross-sectional comparisons and the experiment
//! harness.

pub mod experiments;
mod surface;

use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::features::{partition_hash, EventDataset, FeatureError, Move};
use crate::models::{predict_direction, Model, ModelError};
use crate::sim::{FirstPassageSurface, SimConfig, SimError};
use crate::train::TrainError;

pub use surface::{sensitivity_surface, SurfaceCell, SurfaceTable, MIN_CELL_COUNT};

/// Paired deltas at least this many standard errors from zero are significant.
pub const SIGNIFICANCE_SIGMAS: f64 = 3.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set for {0} is empty")]
    EmptyTestSet(String),
    #[error("paired reports differ on {stock}: {reason}")]
    PartitionMismatch { stock: String, reason: String },
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Percentage of correctly predicted directions on one test partition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub stock_id: String,
    pub model_id: String,
    /// Percent correct.
    pub accuracy: f64,
    pub n: usize,
    pub correct: usize,
    /// Binomial standard error, percent.
    pub se: f64,
    pub partition: String,
    /// Per-sample outcome, for paired comparisons.
    #[serde(skip)]
    pub hits: Vec<bool>,
}

impl AccuracyReport {
    pub fn from_hits(stock_id: &str, model_id: &str, partition: String, hits: Vec<bool>) -> Self {
        let n = hits.len();
        let correct = hits.iter().filter(|h| **h).count();
        let p = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
        AccuracyReport {
            stock_id: stock_id.to_string(),
            model_id: model_id.to_string(),
            accuracy: 100.0 * p,
            n,
            correct,
            se: if n == 0 {
                0.0
            } else {
                100.0 * (p * (1.0 - p) / n as f64).sqrt()
            },
            partition,
            hits,
        }
    }
}

/// Scores `predict(k)` against the label of every sample in `samples`.
pub fn score<F>(ds: &EventDataset, samples: Range<usize>, model_id: &str, mut predict: F) -> Result<AccuracyReport, EvalError>
where
    F: FnMut(usize) -> Result<Move, EvalError>,
{
    if samples.is_empty() {
        return Err(EvalError::EmptyTestSet(ds.stock_id.clone()));
    }
    let hits = samples
        .clone()
        .map(|k| Ok(predict(k)? == ds.label(k)))
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(AccuracyReport::from_hits(
        &ds.stock_id,
        model_id,
        partition_hash(ds, samples),
        hits,
    ))
}

/// Accuracy of `model` on windows of length `lag` ending at each sample.
pub fn accuracy_score(
    model: &Model,
    ds: &EventDataset,
    samples: Range<usize>,
    lag: usize,
    model_id: &str,
) -> Result<AccuracyReport, EvalError> {
    score(ds, samples, model_id, |k| {
        Ok(predict_direction(&model.predict(&ds.sample(k, lag).window)?))
    })
}

/// Predicted `p_down` of `model` on each sample.
pub fn predicted_p_down(model: &Model, ds: &EventDataset, samples: Range<usize>, lag: usize) -> Result<Vec<f64>, EvalError> {
    samples
        .map(|k| Ok(model.predict(&ds.sample(k, lag).window)?.p_down))
        .collect()
}

/// First-passage surface large enough for every touch size in `ds`.
pub fn oracle_surface(cfg: &SimConfig, ds: &EventDataset) -> Result<FirstPassageSurface, EvalError> {
    let max_q = ds.touch.iter().map(|&(b, a)| b.max(a)).max().unwrap_or(1);
    let n = crate::sim::oracle::DEFAULT_TRUNCATION.max(max_q as usize + 10);
    if !matches!(cfg.regime, crate::sim::Regime::Memoryless) {
        return Err(SimError::NotMemoryless.into());
    }
    Ok(FirstPassageSurface::solve_checked(&cfg.touch_rates(), n, max_q)?)
}

/// Oracle `p_down` at the touch sizes observed after each sample's event.
pub fn oracle_p_down_series(surface: &FirstPassageSurface, ds: &EventDataset, samples: Range<usize>) -> Vec<f64> {
    samples
        .map(|k| {
            let (b, a) = ds.touch[k];
            surface.p_down(b.max(1), a.max(1)).expect("surface covers observed sizes")
        })
        .collect()
}

/// The Bayes predictor of a memoryless stock: down iff `p_down > 0.5`.
pub fn oracle_accuracy(cfg: &SimConfig, ds: &EventDataset, samples: Range<usize>) -> Result<AccuracyReport, EvalError> {
    let surface = oracle_surface(cfg, ds)?;
    let p = oracle_p_down_series(&surface, ds, samples.clone());
    let start = samples.start;
    score(ds, samples, "oracle", |k| {
        Ok(if p[k - start] > 0.5 { Move::Down } else { Move::Up })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedRow {
    pub stock_id: String,
    pub accuracy_a: f64,
    pub se_a: f64,
    pub accuracy_b: f64,
    pub se_b: f64,
    /// `accuracy_a - accuracy_b`, percent.
    pub delta: f64,
    /// Paired standard error of `delta` from discordant samples, percent.
    pub se_delta: f64,
    pub n: usize,
    pub partition: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossSummary {
    pub n_stocks: usize,
    pub mean_delta: f64,
    /// Standard error of the mean delta from per-stock paired errors.
    pub se_mean: f64,
    /// Standard deviation of the deltas over `√n_stocks`.
    pub se_cross: f64,
    pub fraction_positive: f64,
    pub fraction_nonnegative: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossSection {
    pub label: String,
    pub model_a: String,
    pub model_b: String,
    pub rows: Vec<PairedRow>,
    pub summary: CrossSummary,
}

impl CrossSection {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "stock_id,model_a,accuracy_a,se_a,model_b,accuracy_b,se_b,delta,se_delta,n,partition\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{},{:.4},{:.4},{:.4},{:.4},{},{}",
                r.stock_id,
                self.model_a,
                r.accuracy_a,
                r.se_a,
                self.model_b,
                r.accuracy_b,
                r.se_b,
                r.delta,
                r.se_delta,
                r.n,
                r.partition
            );
        }
        s
    }
}

/// Per-stock deltas `a - b` on identical test partitions.
pub fn compare_cross_section(a: &[AccuracyReport], b: &[AccuracyReport], label: &str) -> Result<CrossSection, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::PartitionMismatch {
            stock: "*".into(),
            reason: format!("{} reports against {}", a.len(), b.len()),
        });
    }
    let mut rows = Vec::with_capacity(a.len());
    for ra in a {
        let rb = b.iter().find(|r| r.stock_id == ra.stock_id).ok_or_else(|| EvalError::PartitionMismatch {
            stock: ra.stock_id.clone(),
            reason: "missing from second report set".into(),
        })?;
        if ra.partition != rb.partition || ra.hits.len() != rb.hits.len() {
            return Err(EvalError::PartitionMismatch {
                stock: ra.stock_id.clone(),
                reason: format!("partition {} vs {}", ra.partition, rb.partition),
            });
        }
        let n = ra.hits.len().max(1) as f64;
        let (mut only_a, mut only_b) = (0usize, 0usize);
        for (x, y) in ra.hits.iter().zip(&rb.hits) {
            match (x, y) {
                (true, false) => only_a += 1,
                (false, true) => only_b += 1,
                _ => {}
            }
        }
        let d = (only_a as f64 - only_b as f64) / n;
        let var = (((only_a + only_b) as f64 / n) - d * d).max(0.0) / n;
        rows.push(PairedRow {
            stock_id: ra.stock_id.clone(),
            accuracy_a: ra.accuracy,
            se_a: ra.se,
            accuracy_b: rb.accuracy,
            se_b: rb.se,
            delta: ra.accuracy - rb.accuracy,
            se_delta: 100.0 * var.sqrt(),
            n: ra.n,
            partition: ra.partition.clone(),
        });
    }
    let k = rows.len() as f64;
    let mean = rows.iter().map(|r| r.delta).sum::<f64>() / k.max(1.0);
    let se_mean = rows.iter().map(|r| r.se_delta * r.se_delta).sum::<f64>().sqrt() / k.max(1.0);
    let se_cross = if rows.len() > 1 {
        (rows.iter().map(|r| (r.delta - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() / k.sqrt()
    } else {
        0.0
    };
    let summary = CrossSummary {
        n_stocks: rows.len(),
        mean_delta: mean,
        se_mean,
        se_cross,
        fraction_positive: rows.iter().filter(|r| r.delta > 0.0).count() as f64 / k.max(1.0),
        fraction_nonnegative: rows.iter().filter(|r| r.delta >= 0.0).count() as f64 / k.max(1.0),
        significant: se_mean > 0.0 && mean.abs() >= SIGNIFICANCE_SIGMAS * se_mean,
    };
    Ok(CrossSection {
        label: label.to_string(),
        model_a: a.first().map_or(String::new(), |r| r.model_id.clone()),
        model_b: b.first().map_or(String::new(), |r| r.model_id.clone()),
        rows,
        summary,
    })
}

/// Pools several reports of one model into a single accuracy.
pub fn pool_reports(reports: &[AccuracyReport], stock_id: &str, model_id: &str) -> AccuracyReport {
    let hits: Vec<bool> = reports.iter().flat_map(|r| r.hits.iter().copied()).collect();
    let mut parts: Vec<&str> = reports.iter().map(|r| r.partition.as_str()).collect();
    parts.sort_unstable();
    AccuracyReport::from_hits(stock_id, model_id, parts.join("+"), hits)
}

/// One assertion of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    /// Whether failure should fail the experiment.
    pub gating: bool,
}

impl Check {
    pub fn gate(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            detail,
            gating: true,
        }
    }

    pub fn info(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            detail,
            gating: false,
        }
    }

    pub fn line(&self) -> String {
        let status = match (self.passed, self.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "MISS",
        };
        format!("{status} {}: {}", self.name, self.detail)
    }
}

/// Tables and checks produced by one experiment.
#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub name: String,
    /// `(file name, CSV content)`.
    pub tables: Vec<(String, String)>,
    pub checks: Vec<Check>,
    /// Free-form metadata written next to the tables.
    pub metadata: serde_json::Value,
    /// Trained models worth keeping, `(name, model, metadata)`.
    pub models: Vec<(String, Model, crate::train::CheckpointMeta)>,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.gating)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn table(&self, name: &str) -> Option<&str> {
        self.tables.iter().find(|t| t.0 == name).map(|t| t.1.as_str())
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("check,gating,passed,detail\n");
        for c in &self.checks {
            let _ = writeln!(s, "{},{},{},\"{}\"", c.name, c.gating, c.passed, c.detail.replace('"', "'"));
        }
        s
    }

    /// Writes every table, `checks.csv` and `metadata.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| EvalError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut written = Vec::new();
        let mut files: Vec<(String, String)> = self.tables.clone();
        files.push(("checks.csv".into(), self.summary_csv()));
        files.push((
            "metadata.json".into(),
            serde_json::to_string_pretty(&self.metadata).unwrap_or_default() + "\n",
        ));
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(io(&p))?;
            written.push(p);
        }
        Ok(written)
    }
}
