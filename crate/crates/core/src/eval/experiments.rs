//! End-to-end experiments on synthetic universes.
//!
//! Each runner simulates its universe, builds event-time datasets, trains
//! the models it compares, scores them on shared test partitions and
//! returns CSV tables plus pass/fail checks. Everything is a function of
//! the config seeds; per-stock jobs run on up to `parallelism` threads and
//! are reduced in stock order.

use std::fmt::Write as _;
use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::{
    accuracy_score, compare_cross_section, oracle_accuracy, oracle_p_down_series, oracle_surface,
    pool_reports, predicted_p_down, sensitivity_surface, AccuracyReport, Check, CrossSection,
    EvalError, ExperimentReport,
};
use crate::features::{
    fit_normalization, fit_pooled_normalization, temporal_split, Corpus, EventDataset, FeatureSpec,
    NormScheme, Normalization, SampleRef,
};
use crate::models::{Architecture, LossMode, Model};
use crate::sim::{make_universe, simulate_stock, ParamRanges, Range as ParamRange, SimConfig};
use crate::train::{train_synchronous, CheckpointMeta, OptConfig, TrainReport, TrainSet};

/// Experiment names accepted by [`run_named`].
pub const EXPERIMENTS: [&str; 5] = [
    "nonlinearity",
    "universality",
    "stationarity",
    "path_dependence",
    "sensitivity",
];

fn default_train_fraction() -> f64 {
    0.8
}
fn default_lag() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_grid() -> usize {
    10
}

/// A universe of synthetic stocks and how much order flow to simulate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct UniverseSpec {
    pub template: SimConfig,
    #[serde(default)]
    pub ranges: ParamRanges,
    pub n_stocks: usize,
    /// Messages simulated per stock, drawn log-uniformly per stock.
    pub messages: ParamRange,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default)]
    pub features: FeatureSpec,
    /// Leading fraction of each stock's samples used for training.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub normalization: NormScheme,
    /// Fit one transform on the pooled training data of the training stocks
    /// and apply it to every stock.
    #[serde(default)]
    pub pooled_normalization: bool,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            features: FeatureSpec::default(),
            train_fraction: default_train_fraction(),
            normalization: NormScheme::None,
            pooled_normalization: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Window length `T`.
    #[serde(default = "default_lag")]
    pub lag: usize,
    #[serde(default)]
    pub opt: OptConfig,
    /// Spacing between training windows; defaults to `lag` under per-step
    /// loss (non-overlapping windows) and 1 otherwise.
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(match self.opt.loss_mode {
            LossMode::PerStep => self.lag,
            LossMode::LastStep => 1,
        })
        .max(1)
    }

    fn validate(&self, what: &str) -> Result<(), EvalError> {
        if self.lag == 0 {
            return Err(EvalError::InvalidConfig(format!("{what}: lag must be at least 1")));
        }
        self.opt.validate()?;
        Ok(())
    }
}

/// Execution knobs that do not change results.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub parallelism: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Ordered parallel map over `items` on up to `threads` threads.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *out[i].lock().expect("slot") = Some(r);
            });
        }
    });
    out.into_iter()
        .map(|m| m.into_inner().expect("slot").expect("every slot filled"))
        .collect()
}

/// Simulated and featurized universe with per-stock partitions.
#[derive(Debug, Clone)]
pub struct UniverseData {
    pub configs: Vec<SimConfig>,
    pub corpus: Corpus,
    pub train: Vec<Range<usize>>,
    pub test: Vec<Range<usize>>,
    /// `(stock or "*" when pooled, transform)`.
    pub normalization: Vec<(String, Normalization)>,
}

impl UniverseData {
    pub fn n_stocks(&self) -> usize {
        self.configs.len()
    }

    pub fn dataset(&self, s: usize) -> &EventDataset {
        &self.corpus.stocks[s]
    }

    pub fn id(&self, s: usize) -> &str {
        &self.configs[s].stock_id
    }
}

/// Per-stock configurations and message counts of a universe.
pub fn universe_jobs(spec: &UniverseSpec) -> Result<Vec<(SimConfig, usize)>, EvalError> {
    spec.messages.check("messages")?;
    let configs = make_universe(spec.n_stocks, &spec.template, &spec.ranges, spec.seed)?;
    for c in &configs {
        c.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6d65_7373_6167_6573);
    Ok(configs
        .into_iter()
        .map(|c| {
            let n = spec.messages.draw(&mut rng).round() as usize;
            (c, n)
        })
        .collect())
}

/// Simulates every stock and builds its dataset, unnormalized.
pub fn simulate_universe(spec: &UniverseSpec, features: FeatureSpec, opts: RunOptions) -> Result<(Vec<SimConfig>, Vec<EventDataset>), EvalError> {
    let jobs = universe_jobs(spec)?;
    let built = par_map(&jobs, opts.parallelism, |(cfg, n)| -> Result<EventDataset, EvalError> {
        let msgs = simulate_stock(cfg, *n)?;
        let ds = EventDataset::from_messages(&cfg.stock_id, &msgs, cfg.tick_size, features)?;
        log::info!("{}: {} messages, {} price changes", cfg.stock_id, msgs.len(), ds.len());
        Ok(ds)
    });
    let datasets = built.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok((jobs.into_iter().map(|j| j.0).collect(), datasets))
}

/// Builds the universe with a temporal train/test split per stock.
pub fn build_universe(spec: &UniverseSpec, data: &DataSpec, opts: RunOptions) -> Result<UniverseData, EvalError> {
    if !(data.train_fraction > 0.0 && data.train_fraction < 1.0) {
        return Err(EvalError::InvalidConfig("train_fraction must lie in (0, 1)".into()));
    }
    let (configs, datasets) = simulate_universe(spec, data.features, opts)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ds in &datasets {
        let parts = temporal_split(ds.n_samples(), &[data.train_fraction])?;
        train.push(parts[0].clone());
        test.push(parts[1].clone());
    }
    Ok(UniverseData {
        configs,
        corpus: Corpus::new(datasets),
        train,
        test,
        normalization: Vec::new(),
    })
}

/// Fits normalization on the training partitions (`fit_on` stocks when
/// pooled) and applies it to every stock. Returns `(stock or "*", transform)`.
pub fn normalize_corpus(corpus: &mut Corpus, train: &[Range<usize>], data: &DataSpec, fit_on: &[usize]) -> Result<Vec<(String, Normalization)>, EvalError> {
    if data.normalization == NormScheme::None {
        return Ok(Vec::new());
    }
    if data.pooled_normalization {
        let parts: Vec<(&EventDataset, Range<usize>)> =
            fit_on.iter().map(|&s| (&corpus.stocks[s], train[s].clone())).collect();
        let norm = fit_pooled_normalization(&parts, data.normalization);
        for ds in &mut corpus.stocks {
            ds.apply_normalization(norm.clone())?;
        }
        Ok(vec![("*".into(), norm)])
    } else {
        let mut out = Vec::new();
        for (s, ds) in corpus.stocks.iter_mut().enumerate() {
            let norm = fit_normalization(ds, train[s].clone(), data.normalization);
            ds.apply_normalization(norm.clone())?;
            out.push((ds.stock_id.clone(), norm));
        }
        Ok(out)
    }
}

pub fn normalize_universe(u: &mut UniverseData, data: &DataSpec, fit_on: &[usize]) -> Result<(), EvalError> {
    u.normalization = normalize_corpus(&mut u.corpus, &u.train, data, fit_on)?;
    Ok(())
}

/// Training windows of `stocks` inside `ranges`, `stride` apart and
/// ending at each range's last sample.
pub fn window_refs(stocks: &[usize], ranges: &[Range<usize>], stride: usize) -> Vec<SampleRef> {
    let mut refs = Vec::new();
    for &s in stocks {
        let r = &ranges[s];
        let mut k = r.end;
        while k > r.start {
            k -= 1;
            refs.push(SampleRef {
                stock: s as u32,
                k: k as u32,
            });
            if k < r.start + stride {
                break;
            }
            k -= stride - 1;
        }
    }
    refs.sort();
    refs
}

/// Trains `spec` on the given stocks' `ranges`.
pub fn train_on(spec: &ModelSpec, corpus: &Corpus, stocks: &[usize], ranges: &[Range<usize>]) -> Result<TrainReport, EvalError> {
    let refs = window_refs(stocks, ranges, spec.stride());
    let model = Model::init(&spec.architecture, corpus.dim(), spec.init_seed)?;
    let report = train_synchronous(model, TrainSet::new(corpus, &refs, spec.lag), &spec.opt)?;
    log::info!(
        "trained {} (T={}) on {} windows: loss {:.4} -> {:.4} in {:.1}s",
        spec.architecture.family(),
        spec.lag,
        refs.len(),
        report.initial_loss,
        report.final_loss,
        report.wall_seconds
    );
    Ok(report)
}

fn score_stocks(model: &Model, u: &UniverseData, stocks: &[usize], ranges: &[Range<usize>], lag: usize, id: &str, opts: RunOptions) -> Result<Vec<AccuracyReport>, EvalError> {
    par_map(stocks, opts.parallelism, |&s| {
        accuracy_score(model, u.dataset(s), ranges[s].clone(), lag, id)
    })
    .into_iter()
    .collect()
}

/// Per-stock training of `spec`, one model per stock, scored on `test`.
fn per_stock(spec: &ModelSpec, u: &UniverseData, stocks: &[usize], id: &str, opts: RunOptions) -> Result<Vec<AccuracyReport>, EvalError> {
    par_map(stocks, opts.parallelism, |&s| {
        let rep = train_on(spec, &u.corpus, &[s], &u.train)?;
        accuracy_score(&rep.model, u.dataset(s), u.test[s].clone(), spec.lag, id)
    })
    .into_iter()
    .collect()
}

pub fn accuracy_table(reports: &[AccuracyReport]) -> String {
    let mut s = String::from("stock_id,model_id,accuracy,se,n,correct,partition\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{},{},{}",
            r.stock_id, r.model_id, r.accuracy, r.se, r.n, r.correct, r.partition
        );
    }
    s
}

fn cs_detail(cs: &CrossSection) -> String {
    format!(
        "mean delta {:+.3}% (paired se {:.3}, cross-sectional se {:.3}), {}/{} stocks positive",
        cs.summary.mean_delta,
        cs.summary.se_mean,
        cs.summary.se_cross,
        cs.rows.iter().filter(|r| r.delta > 0.0).count(),
        cs.summary.n_stocks
    )
}

fn model_meta(spec: &ModelSpec, u: &UniverseData, stocks: &[usize], steps: u64) -> CheckpointMeta {
    let mut meta = CheckpointMeta::new(spec.init_seed, spec.lag);
    meta.loss_mode = spec.opt.loss_mode;
    meta.feature_spec = Some(u.dataset(0).spec);
    meta.stocks = stocks.iter().map(|&s| u.id(s).to_string()).collect();
    meta.normalization = u.normalization.clone();
    meta.steps = steps;
    meta.training = serde_json::to_value(&spec.opt).unwrap_or_default();
    meta
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NonlinearityConfig {
    pub universe: UniverseSpec,
    #[serde(default)]
    pub data: DataSpec,
    pub linear: ModelSpec,
    pub lstm: ModelSpec,
}

/// Stock-specific LSTM against stock-specific recurrent linear models.
pub fn run_nonlinearity(cfg: &NonlinearityConfig, opts: RunOptions) -> Result<ExperimentReport, EvalError> {
    cfg.linear.validate("linear")?;
    cfg.lstm.validate("lstm")?;
    let mut u = build_universe(&cfg.universe, &cfg.data, opts)?;
    let stocks = all(u.n_stocks());
    normalize_universe(&mut u, &cfg.data, &stocks)?;
    let linear = per_stock(&cfg.linear, &u, &stocks, "linear", opts)?;
    let lstm = per_stock(&cfg.lstm, &u, &stocks, "lstm", opts)?;
    let cs = compare_cross_section(&lstm, &linear, "lstm_vs_linear")?;

    let mut reports = linear.clone();
    reports.extend(lstm.iter().cloned());
    let mut checks = vec![Check::gate(
        "lstm_beats_linear",
        cs.summary.mean_delta > 0.0 && cs.summary.significant,
        cs_detail(&cs),
    )];
    checks.push(Check::info(
        "real_data_magnitude_5_to_10pct",
        (5.0..=10.0).contains(&cs.summary.mean_delta),
        format!("synthetic mean delta {:+.3}% against 5-10% on real data", cs.summary.mean_delta),
    ));
    if cfg.universe.template.regime == crate::sim::Regime::Memoryless {
        let oracle = stocks
            .iter()
            .map(|&s| oracle_accuracy(&u.configs[s], u.dataset(s), u.test[s].clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let bounded = stocks.iter().all(|&s| {
            let o = &oracle[s];
            [&linear[s], &lstm[s]].iter().all(|r| r.accuracy <= o.accuracy + 2.0 * r.se.max(o.se))
        });
        let mean = |r: &[AccuracyReport]| r.iter().map(|x| x.accuracy).sum::<f64>() / r.len() as f64;
        checks.push(Check::info(
            "oracle_upper_bound",
            bounded,
            format!(
                "mean accuracy: oracle {:.3}%, lstm {:.3}%, linear {:.3}%",
                mean(&oracle),
                mean(&lstm),
                mean(&linear)
            ),
        ));
        reports.extend(oracle);
    }
    Ok(ExperimentReport {
        name: "nonlinearity".into(),
        tables: vec![
            ("nonlinearity_deltas.csv".into(), cs.to_csv()),
            ("accuracy.csv".into(), accuracy_table(&reports)),
        ],
        checks,
        metadata: serde_json::json!({ "config": cfg, "summary": cs.summary }),
        models: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct UniversalityConfig {
    pub universe: UniverseSpec,
    /// The last `held_out` stocks are never used for pooled training.
    pub held_out: usize,
    #[serde(default)]
    pub data: DataSpec,
    pub model: ModelSpec,
    /// Also train a pooled model that includes the held-out stocks.
    #[serde(default = "default_true")]
    pub include_held_out_comparison: bool,
}

/// Pooled model against stock-specific models, and on unseen stocks.
pub fn run_universality(cfg: &UniversalityConfig, opts: RunOptions) -> Result<ExperimentReport, EvalError> {
    cfg.model.validate("model")?;
    let n = cfg.universe.n_stocks;
    if cfg.held_out == 0 || cfg.held_out >= n {
        return Err(EvalError::InvalidConfig(format!(
            "held_out must lie in 1..{n}, got {}",
            cfg.held_out
        )));
    }
    let mut u = build_universe(&cfg.universe, &cfg.data, opts)?;
    let trained: Vec<usize> = (0..n - cfg.held_out).collect();
    let held: Vec<usize> = (n - cfg.held_out..n).collect();
    normalize_universe(&mut u, &cfg.data, &trained)?;
    let lag = cfg.model.lag;

    let pooled = train_on(&cfg.model, &u.corpus, &trained, &u.train)?;
    let pooled_trained = score_stocks(&pooled.model, &u, &trained, &u.test, lag, "pooled", opts)?;
    let pooled_held = score_stocks(&pooled.model, &u, &held, &u.test, lag, "pooled", opts)?;
    let specific = per_stock(&cfg.model, &u, &trained, "stock_specific", opts)?;
    let cs = compare_cross_section(&pooled_trained, &specific, "pooled_vs_specific")?;

    // Held-out stocks were never trained on, so all of their samples count.
    let full: Vec<Range<usize>> = (0..n).map(|s| 0..u.dataset(s).n_samples()).collect();
    let pooled_held_full = score_stocks(&pooled.model, &u, &held, &full, lag, "pooled", opts)?;
    let on_trained = pool_reports(&pooled_trained, "trained_stocks", "pooled");
    let on_held = pool_reports(&pooled_held_full, "held_out_stocks", "pooled");
    let gap = on_held.accuracy - on_trained.accuracy;

    let mut checks = vec![
        Check::gate(
            "pooled_beats_specific_on_70pct",
            cs.summary.fraction_nonnegative >= 0.7,
            format!(
                "pooled >= stock-specific on {:.0}% of {} stocks; {}",
                100.0 * cs.summary.fraction_nonnegative,
                cs.summary.n_stocks,
                cs_detail(&cs)
            ),
        ),
        Check::gate(
            "held_out_within_1pct",
            gap.abs() <= 1.0,
            format!(
                "held-out {:.3}% (n={}, all samples) vs trained {:.3}% (n={}, test samples): {:+.3}%",
                on_held.accuracy, on_held.n, on_trained.accuracy, on_trained.n, gap
            ),
        ),
    ];
    // Rank property: the stock with the least training data gains most.
    let least = trained
        .iter()
        .copied()
        .min_by_key(|&s| u.train[s].len())
        .expect("at least one trained stock");
    let best = cs
        .rows
        .iter()
        .max_by(|a, b| a.delta.total_cmp(&b.delta))
        .map(|r| r.stock_id.clone())
        .unwrap_or_default();
    checks.push(Check::info(
        "least_data_gains_most",
        best == u.id(least),
        format!("least data: {}, largest pooled advantage: {}", u.id(least), best),
    ));

    let mut tables = vec![("universality_pooled_vs_specific.csv".to_string(), cs.to_csv())];
    let mut reports = pooled_trained.clone();
    reports.extend(pooled_held.iter().cloned());
    reports.extend(specific.iter().cloned());
    let mut data_rows = String::from("stock_id,held_out,train_samples,test_samples\n");
    for s in 0..n {
        let _ = writeln!(
            data_rows,
            "{},{},{},{}",
            u.id(s),
            s >= n - cfg.held_out,
            u.train[s].len(),
            u.test[s].len()
        );
    }
    tables.push(("universality_data.csv".into(), data_rows));

    if cfg.include_held_out_comparison {
        let everyone = all(n);
        let inclusive = train_on(&cfg.model, &u.corpus, &everyone, &u.train)?;
        let incl_held = score_stocks(&inclusive.model, &u, &held, &u.test, lag, "pooled_including", opts)?;
        let t1 = compare_cross_section(&pooled_held, &incl_held, "excluding_vs_including")?;
        checks.push(Check::info(
            "excluding_vs_including_within_0.5pct",
            t1.summary.mean_delta.abs() <= 0.5,
            cs_detail(&t1),
        ));
        tables.push(("universality_table1.csv".into(), t1.to_csv()));
        reports.extend(incl_held);
    }
    tables.push(("accuracy.csv".into(), accuracy_table(&reports)));
    let meta = model_meta(&cfg.model, &u, &trained, pooled.steps);
    Ok(ExperimentReport {
        name: "universality".into(),
        tables,
        checks,
        metadata: serde_json::json!({
            "config": cfg,
            "pooled_vs_specific": cs.summary,
            "held_out_gap": gap,
        }),
        models: vec![("pooled".into(), pooled.model, meta)],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    /// Memoryless universe supplying the conditioning stream.
    pub universe: UniverseSpec,
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Checkpoint to analyse; required when run on its own.
    #[serde(default)]
    pub checkpoint: Option<std::path::PathBuf>,
}

/// Conditional `p_down` of a trained model on a depth-quantile grid,
/// against the first-passage oracle.
pub fn run_sensitivity(cfg: &SensitivityConfig, model: &Model, meta: &CheckpointMeta, opts: RunOptions) -> Result<ExperimentReport, EvalError> {
    let features = meta
        .feature_spec
        .ok_or_else(|| EvalError::InvalidConfig("checkpoint lacks a feature spec".into()))?;
    let (configs, mut datasets) = simulate_universe(&cfg.universe, features, opts)?;
    let pooled = meta.normalization.iter().find(|(s, _)| s == "*").map(|p| p.1.clone());
    for ds in &mut datasets {
        match &pooled {
            Some(n) => ds.apply_normalization(n.clone())?,
            None => {
                if let Some(mode) = meta.normalization.first().map(|n| n.1.scheme) {
                    log::warn!("{}: no pooled normalization in checkpoint; fitting per stock", ds.stock_id);
                    ds.normalize(mode, 0..ds.n_samples())?;
                }
            }
        }
    }
    let jobs: Vec<usize> = (0..configs.len()).collect();
    let obs = par_map(&jobs, opts.parallelism, |&s| -> Result<Vec<(u32, u32, f64, f64)>, EvalError> {
        let ds = &datasets[s];
        let range = 0..ds.n_samples();
        let surface = oracle_surface(&configs[s], ds)?;
        let oracle = oracle_p_down_series(&surface, ds, range.clone());
        let model_p = predicted_p_down(model, ds, range.clone(), meta.lag)?;
        Ok(range
            .zip(oracle.into_iter().zip(model_p))
            .map(|(k, (o, m))| (ds.touch[k].0, ds.touch[k].1, m, o))
            .collect())
    });
    let mut all_obs = Vec::new();
    for o in obs {
        all_obs.extend(o?);
    }
    let table = sensitivity_surface(&all_obs, cfg.grid);
    let dense = table.dense().count();
    let checks = vec![
        Check::gate(
            "surface_within_0.05_of_oracle",
            dense > 0 && table.max_abs_gap() <= 0.05,
            format!(
                "max |model - oracle| {:.4} over {} cells with >= {} observations",
                table.max_abs_gap(),
                dense,
                super::MIN_CELL_COUNT
            ),
        ),
        Check::gate(
            "diagonal_within_0.03_of_half",
            dense > 0 && table.max_diagonal_offset() <= 0.03,
            format!("max |p_down - 0.5| on the diagonal {:.4}", table.max_diagonal_offset()),
        ),
        Check::info(
            "p_down_rises_with_ask_depth",
            table.monotone_in_ask() == 1.0,
            format!("{:.0}% of rows monotone", 100.0 * table.monotone_in_ask()),
        ),
    ];
    Ok(ExperimentReport {
        name: "sensitivity".into(),
        tables: vec![("sensitivity_surface.csv".into(), table.to_csv())],
        checks,
        metadata: serde_json::json!({
            "config": cfg,
            "quantiles": "pooled over stocks and both sides of the book",
            "edges": table.edges,
            "observations": all_obs.len(),
            "sparse_cells": table.cells.len() - dense,
        }),
        models: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct StationarityConfig {
    pub universe: UniverseSpec,
    #[serde(default)]
    pub data: DataSpec,
    pub model: ModelSpec,
    /// Training-window lengths as fractions of the training span, ascending.
    pub windows: Vec<f64>,
    /// Leading fraction of each stock's samples available for training.
    pub train_span: f64,
    /// Size of the near and far test windows as a fraction of the samples.
    pub test_span: f64,
}

/// Accuracy against training-window length and train/test distance.
pub fn run_stationarity(cfg: &StationarityConfig, opts: RunOptions) -> Result<ExperimentReport, EvalError> {
    cfg.model.validate("model")?;
    let w = &cfg.windows;
    let ok = w.len() >= 2
        && w.iter().all(|f| *f > 0.0 && *f <= 1.0)
        && w.windows(2).all(|p| p[0] < p[1])
        && cfg.train_span > 0.0
        && cfg.test_span > 0.0
        && cfg.train_span + 2.0 * cfg.test_span <= 1.0;
    if !ok {
        return Err(EvalError::InvalidConfig(
            "windows must ascend in (0, 1] and train_span + 2 test_span must not exceed 1".into(),
        ));
    }
    let (configs, datasets) = simulate_universe(&cfg.universe, cfg.data.features, opts)?;
    let n_stocks = configs.len();
    let mut train = Vec::new();
    let mut near = Vec::new();
    let mut far = Vec::new();
    for ds in &datasets {
        let n = ds.n_samples();
        let t_end = (cfg.train_span * n as f64) as usize;
        let len = (cfg.test_span * n as f64) as usize;
        if t_end == 0 || len == 0 {
            return Err(EvalError::EmptyTestSet(ds.stock_id.clone()));
        }
        train.push(0..t_end);
        near.push(t_end..t_end + len);
        far.push(n - len..n);
    }
    let mut u = UniverseData {
        configs,
        corpus: Corpus::new(datasets),
        train: train.clone(),
        test: near.clone(),
        normalization: Vec::new(),
    };
    let stocks = all(n_stocks);
    normalize_universe(&mut u, &cfg.data, &stocks)?;

    let jobs: Vec<(usize, usize)> = stocks
        .iter()
        .flat_map(|&s| (0..w.len()).map(move |i| (s, i)))
        .collect();
    let results = par_map(&jobs, opts.parallelism, |&(s, i)| -> Result<(AccuracyReport, Option<AccuracyReport>), EvalError> {
        let t_end = train[s].end;
        let start = t_end - ((w[i] * t_end as f64).round() as usize).clamp(1, t_end);
        let mut ranges = u.train.clone();
        ranges[s] = start..t_end;
        let rep = train_on(&cfg.model, &u.corpus, &[s], &ranges)?;
        let id = format!("window_{}", w[i]);
        let a_near = accuracy_score(&rep.model, u.dataset(s), near[s].clone(), cfg.model.lag, &id)?;
        let a_far = if i + 1 == w.len() {
            Some(accuracy_score(&rep.model, u.dataset(s), far[s].clone(), cfg.model.lag, &id)?)
        } else {
            None
        };
        Ok((a_near, a_far))
    });
    let mut by_window: Vec<Vec<AccuracyReport>> = vec![Vec::new(); w.len()];
    let mut far_reports = Vec::new();
    for (r, &(_, i)) in results.into_iter().zip(&jobs) {
        let (a, f) = r?;
        by_window[i].push(a);
        far_reports.extend(f);
    }
    let longest = by_window.last().expect("two windows").clone();
    let cs = compare_cross_section(&longest, &by_window[0], "longest_vs_shortest")?;
    let near_pool = pool_reports(&longest, "all", "near");
    let far_pool = pool_reports(&far_reports, "all", "far");
    let gap = far_pool.accuracy - near_pool.accuracy;
    let means: Vec<f64> = by_window
        .iter()
        .map(|r| r.iter().map(|x| x.accuracy).sum::<f64>() / r.len() as f64)
        .collect();

    let mut window_table = String::from("window,stock_id,train_samples,accuracy,se,n\n");
    for (i, reps) in by_window.iter().enumerate() {
        for (s, r) in reps.iter().enumerate() {
            let t_end = train[s].end;
            let len = ((w[i] * t_end as f64).round() as usize).clamp(1, t_end);
            let _ = writeln!(window_table, "{},{},{},{:.4},{:.4},{}", w[i], r.stock_id, len, r.accuracy, r.se, r.n);
        }
    }
    let mut gap_table = String::from("stock_id,near_accuracy,near_se,far_accuracy,far_se,delta\n");
    for (a, b) in longest.iter().zip(&far_reports) {
        let _ = writeln!(
            gap_table,
            "{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            a.stock_id,
            a.accuracy,
            a.se,
            b.accuracy,
            b.se,
            b.accuracy - a.accuracy
        );
    }
    let checks = vec![
        Check::gate(
            "longest_beats_shortest_on_all",
            cs.summary.fraction_positive == 1.0,
            cs_detail(&cs),
        ),
        Check::gate(
            "far_within_1pct_of_near",
            gap.abs() <= 1.0,
            format!(
                "far {:.3}% (n={}) vs near {:.3}% (n={}): {:+.3}%",
                far_pool.accuracy, far_pool.n, near_pool.accuracy, near_pool.n, gap
            ),
        ),
        Check::info(
            "accuracy_nondecreasing_in_window",
            means.windows(2).all(|p| p[1] >= p[0]),
            format!("mean accuracy by window: {:?}", means.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>()),
        ),
    ];
    Ok(ExperimentReport {
        name: "stationarity".into(),
        tables: vec![
            ("stationarity_windows.csv".into(), window_table),
            ("stationarity_gap.csv".into(), gap_table),
            ("stationarity_longest_vs_shortest.csv".into(), cs.to_csv()),
        ],
        checks,
        metadata: serde_json::json!({ "config": cfg, "window_means": means, "far_minus_near": gap }),
        models: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PathDependenceConfig {
    /// Universe in the persistent regime.
    pub universe: UniverseSpec,
    /// Memoryless universe for the negative control.
    #[serde(default)]
    pub control: Option<UniverseSpec>,
    #[serde(default)]
    pub data: DataSpec,
    pub feedforward: ModelSpec,
    pub lstm: ModelSpec,
    /// Optional longer-lag LSTM.
    #[serde(default)]
    pub long: Option<ModelSpec>,
    /// Train one model per family on all stocks instead of one per stock.
    #[serde(default = "default_true")]
    pub pooled: bool,
}

struct PathRun {
    ff: Vec<AccuracyReport>,
    lstm: Vec<AccuracyReport>,
    long: Option<Vec<AccuracyReport>>,
}

fn path_run(cfg: &PathDependenceConfig, spec: &UniverseSpec, with_long: bool, tag: &str, opts: RunOptions) -> Result<PathRun, EvalError> {
    let mut u = build_universe(spec, &cfg.data, opts)?;
    let stocks = all(u.n_stocks());
    normalize_universe(&mut u, &cfg.data, &stocks)?;
    let run = |m: &ModelSpec, id: &str| -> Result<Vec<AccuracyReport>, EvalError> {
        let id = format!("{tag}_{id}");
        if cfg.pooled {
            let rep = train_on(m, &u.corpus, &stocks, &u.train)?;
            score_stocks(&rep.model, &u, &stocks, &u.test, m.lag, &id, opts)
        } else {
            per_stock(m, &u, &stocks, &id, opts)
        }
    };
    let ff = run(&cfg.feedforward, "feedforward")?;
    let lstm = run(&cfg.lstm, &format!("lstm{}", cfg.lstm.lag))?;
    let long = match (&cfg.long, with_long) {
        (Some(m), true) => Some(run(m, &format!("lstm{}", m.lag))?),
        _ => None,
    };
    Ok(PathRun { ff, lstm, long })
}

/// Feedforward (latest state only) against LSTMs with long windows.
pub fn run_path_dependence(cfg: &PathDependenceConfig, opts: RunOptions) -> Result<ExperimentReport, EvalError> {
    cfg.feedforward.validate("feedforward")?;
    cfg.lstm.validate("lstm")?;
    if let Some(m) = &cfg.long {
        m.validate("long")?;
    }
    let main = path_run(cfg, &cfg.universe, true, "persistent", opts)?;
    let cs = compare_cross_section(&main.lstm, &main.ff, "lstm_vs_feedforward")?;
    let mut tables = vec![("path_lstm_vs_feedforward.csv".to_string(), cs.to_csv())];
    let mut reports = main.ff.clone();
    reports.extend(main.lstm.iter().cloned());
    let mut checks = vec![Check::gate(
        "lstm_beats_feedforward_by_2pct",
        cs.summary.mean_delta >= 2.0 && cs.summary.significant,
        cs_detail(&cs),
    )];
    if let Some(long) = &main.long {
        let cl = compare_cross_section(long, &main.lstm, "long_vs_lstm")?;
        checks.push(Check::info(
            "long_lag_not_worse",
            cl.summary.mean_delta >= 0.0,
            cs_detail(&cl),
        ));
        tables.push(("path_long_vs_lstm.csv".into(), cl.to_csv()));
        reports.extend(long.iter().cloned());
    }
    let mut control_summary = None;
    if let Some(ctrl) = &cfg.control {
        let c = path_run(cfg, ctrl, false, "memoryless", opts)?;
        let cc = compare_cross_section(&c.lstm, &c.ff, "control_lstm_vs_feedforward")?;
        checks.push(Check::gate(
            "memoryless_control_within_0.5pct",
            cc.summary.mean_delta.abs() < 0.5,
            cs_detail(&cc),
        ));
        tables.push(("path_control.csv".into(), cc.to_csv()));
        reports.extend(c.ff);
        reports.extend(c.lstm);
        control_summary = Some(cc.summary);
    }
    tables.push(("accuracy.csv".into(), accuracy_table(&reports)));
    Ok(ExperimentReport {
        name: "path_dependence".into(),
        tables,
        checks,
        metadata: serde_json::json!({
            "config": cfg,
            "lstm_vs_feedforward": cs.summary,
            "control": control_summary,
        }),
        models: Vec::new(),
    })
}

/// Runs an experiment from its JSON config. `sensitivity` needs a
/// `checkpoint` in its config; the loaded model is analysed.
pub fn run_named(name: &str, config: &serde_json::Value, opts: RunOptions) -> Result<ExperimentReport, EvalError> {
    fn parse<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<T, EvalError> {
        serde_json::from_value(v.clone()).map_err(|e| EvalError::InvalidConfig(e.to_string()))
    }
    match name {
        "nonlinearity" => run_nonlinearity(&parse(config)?, opts),
        "universality" => run_universality(&parse(config)?, opts),
        "stationarity" => run_stationarity(&parse(config)?, opts),
        "path_dependence" => run_path_dependence(&parse(config)?, opts),
        "sensitivity" => {
            let cfg: SensitivityConfig = parse(config)?;
            let path = cfg
                .checkpoint
                .clone()
                .ok_or_else(|| EvalError::InvalidConfig("sensitivity needs a checkpoint".into()))?;
            let (model, meta) = crate::train::load_checkpoint(&path)?;
            run_sensitivity(&cfg, &model, &meta, opts)
        }
        other => Err(EvalError::InvalidConfig(format!(
            "unknown experiment {other}; expected one of {}",
            EXPERIMENTS.join(", ")
        ))),
    }
}
