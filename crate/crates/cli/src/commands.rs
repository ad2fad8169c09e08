use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use priceform_core::eval::experiments::{
    self, accuracy_table, normalize_corpus, train_on, universe_jobs, window_refs, DataSpec, RunOptions,
};
use priceform_core::eval::{accuracy_score, ExperimentReport};
use priceform_core::features::io::{read_dataset, write_dataset, write_datasets};
use priceform_core::features::{partition_hash, temporal_split, Corpus, EventDataset};
use priceform_core::feed::{read_message_stream, write_message_file};
use priceform_core::models::Model;
use priceform_core::sim::simulate_stock;
use priceform_core::train::{
    save_checkpoint, train_asynchronous, CheckpointMeta, TrainSet,
};
use serde::{Deserialize, Serialize};

use crate::config::{load, BuildDatasetConfig, SimulateConfig, TrainConfig};
use crate::output::{Manifest, OutputDir, MANIFEST_NAME};
use crate::{Global, Usage};

pub fn simulate(g: &Global, config: &Path) -> Result<bool> {
    let cfg = load::<SimulateConfig>(config, g.seed)?;
    let jobs = universe_jobs(&cfg.config.universe).map_err(|e| Usage(format!("universe: {e}")))?;
    let mut out = OutputDir::lock(&g.out)?;
    let sims = experiments::par_map(&jobs, g.parallelism, |(c, n)| simulate_stock(c, *n));
    let mut stocks = Vec::new();
    for ((c, _), msgs) in jobs.iter().zip(sims) {
        let msgs = msgs.with_context(|| format!("simulating {}", c.stock_id))?;
        let p = out.path(&format!("messages/{}.csv", c.stock_id))?;
        write_message_file(&p, &msgs)?;
        out.record(p);
        out.write_json(&format!("configs/{}.json", c.stock_id), c)?;
        log::info!("{}: {} messages", c.stock_id, msgs.len());
        stocks.push(serde_json::json!({
            "stock_id": c.stock_id,
            "messages": format!("messages/{}.csv", c.stock_id),
            "config": format!("configs/{}.json", c.stock_id),
            "tick_size": c.tick_size,
            "n_messages": msgs.len(),
        }));
    }
    out.finish("simulate", cfg.echo(), serde_json::json!({ "stocks": stocks }))?;
    Ok(true)
}

/// Per-stock entry of a dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub stock_id: String,
    pub file: String,
    pub events: usize,
    pub samples: usize,
    pub train: Range<usize>,
    pub test: Range<usize>,
    pub train_hash: String,
    pub test_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub lag: usize,
    pub feature_spec: priceform_core::features::FeatureSpec,
    pub normalization: Vec<(String, priceform_core::features::Normalization)>,
    pub stocks: Vec<DatasetEntry>,
    #[serde(default)]
    pub pooled: Option<String>,
}

fn message_inputs(cfg: &crate::config::Loaded<BuildDatasetConfig>) -> Result<Vec<(String, PathBuf)>> {
    let mut inputs = Vec::new();
    if let Some(sim) = &cfg.config.simulation {
        let path = cfg.resolve(sim);
        let m = Manifest::load(&path)?;
        if m.command != "simulate" {
            return Err(Usage(format!("{} was not written by simulate", path.display())).into());
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        m.verify(dir)?;
        let stocks = m.extra["stocks"].as_array().cloned().unwrap_or_default();
        for s in stocks {
            let id = s["stock_id"].as_str().unwrap_or_default().to_string();
            let file = s["messages"].as_str().unwrap_or_default();
            inputs.push((id, dir.join(file)));
        }
    }
    for p in &cfg.config.messages {
        let path = cfg.resolve(p);
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Usage(format!("{}: no file name", path.display())))?;
        inputs.push((id, path));
    }
    if inputs.is_empty() {
        return Err(Usage("no inputs: set `simulation` or `messages`".into()).into());
    }
    for (_, p) in &inputs {
        if !p.is_file() {
            return Err(Usage(format!("message file {} does not exist", p.display())).into());
        }
    }
    Ok(inputs)
}

pub fn build_dataset(g: &Global, config: &Path) -> Result<bool> {
    let cfg = load::<BuildDatasetConfig>(config, g.seed)?;
    let c = &cfg.config;
    if c.lag == 0 {
        return Err(Usage("lag: must be at least 1".into()).into());
    }
    let existing = g.out.join(MANIFEST_NAME);
    if existing.exists() {
        let m = Manifest::load(&existing)?;
        if m.command == "build-dataset" {
            let lag = m.extra["lag"].as_u64().unwrap_or(0) as usize;
            if lag != c.lag {
                return Err(Usage(format!(
                    "{} holds a dataset built for lag {lag}, refusing to rebuild it for lag {}",
                    g.out.display(),
                    c.lag
                ))
                .into());
            }
        }
    }
    let inputs = message_inputs(&cfg)?;
    let mut out = OutputDir::lock(&g.out)?;
    let built = experiments::par_map(&inputs, g.parallelism, |(id, path)| -> Result<EventDataset> {
        let msgs = read_message_stream(path)?
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("reading {}", path.display()))?;
        let ds = EventDataset::from_messages(id.clone(), &msgs, c.tick_size, c.features)
            .with_context(|| format!("replaying {}", path.display()))?;
        log::info!("{id}: {} messages, {} price changes", msgs.len(), ds.len());
        Ok(ds)
    });
    let datasets = built.into_iter().collect::<Result<Vec<_>>>()?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ds in &datasets {
        let parts = temporal_split(ds.n_samples(), &[c.train_fraction])
            .with_context(|| format!("splitting {}", ds.stock_id))?;
        train.push(parts[0].clone());
        test.push(parts[1].clone());
    }
    let mut corpus = Corpus::new(datasets);
    let data = DataSpec {
        features: c.features,
        train_fraction: c.train_fraction,
        normalization: c.normalization,
        pooled_normalization: c.pooled_normalization,
    };
    let all: Vec<usize> = (0..corpus.stocks.len()).collect();
    let normalization = normalize_corpus(&mut corpus, &train, &data, &all)?;

    let mut entries = Vec::new();
    for (s, ds) in corpus.stocks.iter().enumerate() {
        let file = format!("datasets/{}.csv", ds.stock_id);
        let p = out.path(&file)?;
        write_dataset(ds, &p)?;
        out.record(p);
        entries.push(DatasetEntry {
            stock_id: ds.stock_id.clone(),
            file,
            events: ds.len(),
            samples: ds.n_samples(),
            train: train[s].clone(),
            test: test[s].clone(),
            train_hash: partition_hash(ds, train[s].clone()),
            test_hash: partition_hash(ds, test[s].clone()),
        });
    }
    let pooled = if c.pooled {
        let p = out.path("datasets/pooled.csv")?;
        write_datasets(&corpus.stocks, &p)?;
        out.record(p);
        Some("datasets/pooled.csv".to_string())
    } else {
        None
    };
    let info = DatasetInfo {
        lag: c.lag,
        feature_spec: c.features,
        normalization,
        stocks: entries,
        pooled,
    };
    out.finish("build-dataset", cfg.echo(), serde_json::to_value(&info)?)?;
    Ok(true)
}

pub fn train(g: &Global, config: &Path) -> Result<bool> {
    let cfg = load::<TrainConfig>(config, g.seed)?;
    let c = &cfg.config;
    let manifest_path = cfg.resolve(&c.dataset);
    if !manifest_path.is_file() {
        return Err(Usage(format!("dataset manifest {} does not exist", manifest_path.display())).into());
    }
    let manifest = Manifest::load(&manifest_path)?;
    if manifest.command != "build-dataset" {
        return Err(Usage(format!("{} was not written by build-dataset", manifest_path.display())).into());
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    manifest.verify(dir)?;
    let info: DatasetInfo = serde_json::from_value(manifest.extra.clone()).context("dataset manifest")?;
    if c.model.lag != info.lag {
        return Err(Usage(format!(
            "model.lag {} does not match the dataset's lag {}",
            c.model.lag, info.lag
        ))
        .into());
    }
    c.model.opt.validate().map_err(|e| Usage(format!("model.opt: {e}")))?;
    if c.n_workers == 0 {
        return Err(Usage("n_workers: must be at least 1".into()).into());
    }
    let mut datasets = Vec::new();
    let mut train_ranges = Vec::new();
    let mut test_ranges = Vec::new();
    for e in &info.stocks {
        let ds = read_dataset(dir.join(&e.file))?;
        if partition_hash(&ds, e.test.clone()) != e.test_hash {
            anyhow::bail!("{}: test partition hash does not match the manifest", e.stock_id);
        }
        datasets.push(ds);
        train_ranges.push(e.train.clone());
        test_ranges.push(e.test.clone());
    }
    let selected: Vec<usize> = match &c.stocks {
        None => (0..datasets.len()).collect(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                datasets
                    .iter()
                    .position(|d| &d.stock_id == id)
                    .ok_or_else(|| Usage(format!("stocks: {id} is not in the dataset")))
            })
            .collect::<Result<_, _>>()?,
    };
    let corpus = Corpus::new(datasets);
    let mut out = OutputDir::lock(&g.out)?;
    let report = if c.n_workers == 1 {
        train_on(&c.model, &corpus, &selected, &train_ranges)?
    } else {
        let refs = window_refs(&selected, &train_ranges, c.model.stride());
        let model = Model::init(&c.model.architecture, corpus.dim(), c.model.init_seed)?;
        train_asynchronous(model, TrainSet::new(&corpus, &refs, c.model.lag), &c.model.opt, c.n_workers, c.staleness_cap)?
    };
    let mut meta = CheckpointMeta::new(c.model.init_seed, c.model.lag);
    meta.loss_mode = c.model.opt.loss_mode;
    meta.feature_spec = Some(info.feature_spec);
    meta.stocks = selected.iter().map(|&s| corpus.stocks[s].stock_id.clone()).collect();
    meta.normalization = info.normalization.clone();
    meta.steps = report.steps;
    meta.training = serde_json::to_value(&c.model.opt)?;
    let ckpt = out.path("model.ckpt")?;
    save_checkpoint(&report.model, &meta, &ckpt)?;
    out.record(ckpt);
    let curve = out.path("loss_curve.csv")?;
    report.write_loss_curve(&curve)?;
    out.record(curve);

    let mut scores = Vec::new();
    for &s in &selected {
        scores.push(accuracy_score(&report.model, &corpus.stocks[s], test_ranges[s].clone(), c.model.lag, "trained")?);
    }
    out.write("accuracy.csv", accuracy_table(&scores).as_bytes())?;
    let summary = serde_json::json!({
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "steps": report.steps,
        "applied_updates": report.applied_updates,
        "dropped_stale": report.dropped_stale,
        "n_workers": report.n_workers,
        "wall_seconds": report.wall_seconds,
        "staleness_histogram": report.staleness_histogram,
    });
    out.write_json("train_report.json", &summary)?;
    println!(
        "loss {:.5} -> {:.5} after {} steps ({:.1}s)",
        report.initial_loss, report.final_loss, report.steps, report.wall_seconds
    );
    out.finish("train", cfg.echo(), summary)?;
    Ok(true)
}

pub fn experiment(g: &Global, name: &str, config: &Path) -> Result<bool> {
    use priceform_core::eval::experiments::{
        run_nonlinearity, run_path_dependence, run_sensitivity, run_stationarity, run_universality,
        NonlinearityConfig, PathDependenceConfig, SensitivityConfig, StationarityConfig, UniversalityConfig,
    };
    let opts = RunOptions {
        parallelism: g.parallelism,
    };
    let (report, echo): (ExperimentReport, serde_json::Value) = match name {
        "nonlinearity" => {
            let c = load::<NonlinearityConfig>(config, g.seed)?;
            (run_nonlinearity(&c.config, opts)?, c.echo())
        }
        "universality" => {
            let c = load::<UniversalityConfig>(config, g.seed)?;
            (run_universality(&c.config, opts)?, c.echo())
        }
        "stationarity" => {
            let c = load::<StationarityConfig>(config, g.seed)?;
            (run_stationarity(&c.config, opts)?, c.echo())
        }
        "path_dependence" => {
            let c = load::<PathDependenceConfig>(config, g.seed)?;
            (run_path_dependence(&c.config, opts)?, c.echo())
        }
        "sensitivity" => {
            let c = load::<SensitivityConfig>(config, g.seed)?;
            let path = c
                .config
                .checkpoint
                .as_ref()
                .map(|p| c.resolve(p))
                .ok_or_else(|| Usage("checkpoint: required for the sensitivity experiment".into()))?;
            if !path.is_file() {
                return Err(Usage(format!("checkpoint {} does not exist", path.display())).into());
            }
            let (model, meta) = priceform_core::train::load_checkpoint(&path)?;
            (run_sensitivity(&c.config, &model, &meta, opts)?, c.echo())
        }
        other => {
            return Err(Usage(format!(
                "unknown experiment {other}; expected one of {}",
                experiments::EXPERIMENTS.join(", ")
            ))
            .into())
        }
    };
    let mut out = OutputDir::lock(&g.out)?;
    for p in report.write(out.root())? {
        out.record(p);
    }
    for (id, model, meta) in &report.models {
        let p = out.path(&format!("models/{id}.ckpt"))?;
        save_checkpoint(model, meta, &p)?;
        out.record(p);
    }
    for c in &report.checks {
        println!("{}", c.line());
    }
    let passed = report.passed();
    println!("{} {}", if passed { "PASSED" } else { "FAILED" }, report.name);
    out.finish(
        "experiment",
        echo,
        serde_json::json!({ "experiment": report.name, "passed": passed, "checks": report.checks }),
    )?;
    Ok(passed)
}

pub fn schemas(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, schema) in crate::config::schemas() {
        let p = dir.join(format!("{name}.schema.json"));
        std::fs::write(&p, serde_json::to_string_pretty(&schema)? + "\n")
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
