//! Checkpoint files.
//!
//! ```text
//! priceform-checkpoint 1\n
//! {JSON header}\n
//! n_params little-endian f64 values
//! ```
//!
//! The header records the architecture, input dimension, parameter count,
//! byte order, a SHA-256 of the parameter bytes and free-form metadata.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::features::{FeatureSpec, Normalization};
use crate::models::{Architecture, LossMode, Model};

const MAGIC: &str = "priceform-checkpoint 1";

/// What a reader needs to use a model without the training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub lag: usize,
    #[serde(default)]
    pub loss_mode: LossMode,
    #[serde(default)]
    pub feature_spec: Option<FeatureSpec>,
    /// Stocks the model was trained on.
    #[serde(default)]
    pub stocks: Vec<String>,
    /// Per-stock normalization applied to the training features.
    #[serde(default)]
    pub normalization: Vec<(String, Normalization)>,
    #[serde(default)]
    pub steps: u64,
    #[serde(default)]
    pub training: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(seed: u64, lag: usize) -> Self {
        CheckpointMeta {
            seed,
            lag,
            loss_mode: LossMode::LastStep,
            feature_spec: None,
            stocks: Vec::new(),
            normalization: Vec::new(),
            steps: 0,
            training: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    input_dim: usize,
    n_params: usize,
    endianness: String,
    sha256: String,
    meta: CheckpointMeta,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    let mut payload = Vec::with_capacity(8 * model.n_params());
    for v in model.params() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let header = Header {
        architecture: model.architecture(),
        input_dim: model.input_dim(),
        n_params: model.n_params(),
        endianness: "little".into(),
        sha256: hex::encode(Sha256::digest(&payload)),
        meta: meta.clone(),
    };
    let json = serde_json::to_string(&header).map_err(|e| TrainError::Format(e.to_string()))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io(path))?);
    writeln!(f, "{MAGIC}").map_err(io(path))?;
    writeln!(f, "{json}").map_err(io(path))?;
    f.write_all(&payload).map_err(io(path))?;
    f.flush().map_err(io(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta), TrainError> {
    let path = path.as_ref();
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io(path))?);
    let mut line = String::new();
    r.read_line(&mut line).map_err(io(path))?;
    if line.trim_end() != MAGIC {
        return Err(TrainError::Format("not a checkpoint file".into()));
    }
    line.clear();
    r.read_line(&mut line).map_err(io(path))?;
    if !line.ends_with('\n') {
        return Err(TrainError::ChecksumMismatch("file ends inside the header".into()));
    }
    let header: Header =
        serde_json::from_str(line.trim_end()).map_err(|e| TrainError::Format(format!("header: {e}")))?;
    if header.endianness != "little" {
        return Err(TrainError::Format(format!("unsupported byte order {}", header.endianness)));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io(path))?;
    if payload.len() != 8 * header.n_params {
        return Err(TrainError::ChecksumMismatch(format!(
            "expected {} parameter bytes, found {}",
            8 * header.n_params,
            payload.len()
        )));
    }
    let digest = hex::encode(Sha256::digest(&payload));
    if digest != header.sha256 {
        return Err(TrainError::ChecksumMismatch(format!(
            "header {} but content {digest}",
            header.sha256
        )));
    }
    let theta = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let model = Model::from_params(&header.architecture, header.input_dim, theta)?;
    Ok((model, header.meta))
}
