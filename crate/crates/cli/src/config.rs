//! Command configuration documents.

use std::path::{Path, PathBuf};

use anyhow::Result;
use priceform_core::eval::experiments::{
    ModelSpec, NonlinearityConfig, PathDependenceConfig, SensitivityConfig, StationarityConfig,
    UniversalityConfig, UniverseSpec,
};
use priceform_core::features::{FeatureSpec, NormScheme};
use priceform_core::train::DEFAULT_STALENESS_CAP;
use schemars::JsonSchema;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Usage;

fn default_tick_size() -> i64 {
    100
}
fn default_train_fraction() -> f64 {
    0.8
}
fn default_lag() -> usize {
    1
}
fn default_workers() -> usize {
    1
}
fn default_cap() -> usize {
    DEFAULT_STALENESS_CAP
}

/// `simulate`: a universe of synthetic stocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub universe: UniverseSpec,
}

/// `build-dataset`: message files to event-time datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct BuildDatasetConfig {
    /// Manifest written by `simulate`; its message files are used.
    #[serde(default)]
    pub simulation: Option<PathBuf>,
    /// Additional message files; the stock id is the file stem.
    #[serde(default)]
    pub messages: Vec<PathBuf>,
    /// Price units per tick of the message files.
    #[serde(default = "default_tick_size")]
    pub tick_size: i64,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default)]
    pub normalization: NormScheme,
    /// One transform fitted on the pooled training data instead of per stock.
    #[serde(default)]
    pub pooled_normalization: bool,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Window length the dataset is built for.
    #[serde(default = "default_lag")]
    pub lag: usize,
    /// Also write every stock into one pooled file.
    #[serde(default)]
    pub pooled: bool,
}

/// `train`: one model on a built dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Manifest written by `build-dataset`.
    pub dataset: PathBuf,
    pub model: ModelSpec,
    /// Stocks to train on; all when absent.
    #[serde(default)]
    pub stocks: Option<Vec<String>>,
    /// More than one selects asynchronous parameter-server training.
    #[serde(default = "default_workers")]
    pub n_workers: usize,
    #[serde(default = "default_cap")]
    pub staleness_cap: usize,
}

/// Every schema published with the tool, by file stem.
pub fn schemas() -> Vec<(&'static str, schemars::schema::RootSchema)> {
    use schemars::schema_for;
    vec![
        ("simulate", schema_for!(SimulateConfig)),
        ("build-dataset", schema_for!(BuildDatasetConfig)),
        ("train", schema_for!(TrainConfig)),
        ("sim-config", schema_for!(priceform_core::sim::SimConfig)),
        ("feature-spec", schema_for!(FeatureSpec)),
        ("opt-config", schema_for!(priceform_core::train::OptConfig)),
        ("experiment-nonlinearity", schema_for!(NonlinearityConfig)),
        ("experiment-universality", schema_for!(UniversalityConfig)),
        ("experiment-sensitivity", schema_for!(SensitivityConfig)),
        ("experiment-stationarity", schema_for!(StationarityConfig)),
        ("experiment-path_dependence", schema_for!(PathDependenceConfig)),
    ]
}

/// Replaces every `seed` and `init_seed` number in the document.
pub fn override_seeds(v: &mut serde_json::Value, seed: u64) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, x) in map.iter_mut() {
                if (k == "seed" || k == "init_seed") && x.is_number() {
                    *x = seed.into();
                } else {
                    override_seeds(x, seed);
                }
            }
        }
        serde_json::Value::Array(xs) => xs.iter_mut().for_each(|x| override_seeds(x, seed)),
        _ => {}
    }
}

/// A parsed config plus the document it came from.
pub struct Loaded<T> {
    pub config: T,
    /// Directory relative paths in the config resolve against.
    pub base: PathBuf,
}

impl<T: Serialize> Loaded<T> {
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).unwrap_or_default()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

/// Reads a JSON config, applying `seed`; errors name the offending path.
pub fn load<T: DeserializeOwned>(path: &Path, seed: Option<u64>) -> Result<Loaded<T>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Usage(format!("{}: invalid JSON: {e}", path.display())))?;
    if let Some(s) = seed {
        override_seeds(&mut doc, s);
    }
    let config = parse_value(doc).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
    Ok(Loaded {
        config,
        base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

pub fn parse_value<T: DeserializeOwned>(doc: serde_json::Value) -> Result<T, String> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let at = e.path().to_string();
        if at == "." {
            e.inner().to_string()
        } else {
            format!("at {at}: {}", e.inner())
        }
    })
}
