//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json        format, version, epoch, rng state, config
//!                            digest, config, array table, metrics so far
//! <dir>/<array>.bin          raw little-endian f64, row-major
//! ```
//!
//! Every array entry records its shape and the SHA-256 of its file bytes.
//! Loading checks the format tag and version, every array digest, and the
//! config digest against the embedded config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::EmpiricalPrototypeBank;
use crate::encoder::{Layer, MlpEncoder};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;
use crate::train::{EpochMetrics, TrainConfig, TrainState};

pub const FORMAT: &str = "epl-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    file: String,
    rows: usize,
    cols: usize,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    epoch: usize,
    rng_state: u64,
    config_digest: String,
    config: TrainConfig,
    layer_dims: Vec<usize>,
    bank_update_count: Vec<u64>,
    arrays: Vec<ArrayEntry>,
    metrics: Vec<EpochMetrics>,
}

/// A loaded checkpoint: the config it was trained with and the state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

fn named_arrays(state: &TrainState) -> Vec<(String, usize, usize, &[f64])> {
    let mut out = Vec::new();
    for (l, layer) in state.encoder.layers().iter().enumerate() {
        let (r, c) = layer.weight.shape();
        out.push((format!("encoder.{l}.weight"), r, c, layer.weight.as_slice()));
        out.push((format!("encoder.{l}.bias"), 1, layer.bias.len(), &layer.bias[..]));
    }
    let (r, c) = state.prototypes.shape();
    out.push(("prototypes".into(), r, c, state.prototypes.as_slice()));
    let (r, c) = state.bank.prototypes().shape();
    out.push(("bank".into(), r, c, state.bank.prototypes().as_slice()));
    for (k, buf) in state.momentum.iter().enumerate() {
        out.push((format!("momentum.{k}"), 1, buf.len(), &buf[..]));
    }
    out
}

/// Write `state` under `dir`, creating it if needed. Existing files with the
/// same names are replaced.
pub fn save_checkpoint(dir: impl AsRef<Path>, config: &TrainConfig, state: &TrainState) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut arrays = Vec::new();
    for (name, rows, cols, values) in named_arrays(state) {
        let bytes = to_bytes(values);
        let file = format!("{name}.bin");
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        arrays.push(ArrayEntry {
            name,
            file,
            rows,
            cols,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        epoch: state.epoch,
        rng_state: state.rng.state(),
        config_digest: config.digest(),
        config: config.clone(),
        layer_dims: state.encoder.layer_dims(),
        bank_update_count: state.bank.update_count().to_vec(),
        arrays,
        metrics: state.metrics.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::VersionMismatch(format!("unreadable manifest: {e}")))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
        return Err(Error::VersionMismatch(format!("format tag is not `{FORMAT}`")));
    }
    if raw.get("version").and_then(|v| v.as_u64()) != Some(u64::from(VERSION)) {
        return Err(Error::VersionMismatch(format!(
            "expected version {VERSION}, found {}",
            raw.get("version").map_or("none".to_string(), |v| v.to_string())
        )));
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.config.digest() != manifest.config_digest {
        return Err(Error::DigestMismatch("config does not match its recorded digest".into()));
    }

    let mut arrays = std::collections::HashMap::new();
    for entry in &manifest.arrays {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::DigestMismatch(format!("array `{}`", entry.name)));
        }
        if bytes.len() != 8 * entry.rows * entry.cols {
            return Err(Error::Format(format!("array `{}` has {} bytes", entry.name, bytes.len())));
        }
        arrays.insert(entry.name.clone(), Matrix::from_vec(entry.rows, entry.cols, from_bytes(&bytes))?);
    }
    let mut take = |name: &str| {
        arrays
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    };

    let dims = &manifest.layer_dims;
    if dims.len() < 2 {
        return Err(Error::Format("layer_dims needs at least two entries".into()));
    }
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for l in 0..dims.len() - 1 {
        let weight = take(&format!("encoder.{l}.weight"))?;
        if weight.shape() != (dims[l + 1], dims[l]) {
            return Err(Error::Format(format!("encoder layer {l} has shape {:?}", weight.shape())));
        }
        let bias = take(&format!("encoder.{l}.bias"))?.into_vec();
        layers.push(Layer { weight, bias });
    }
    let encoder = MlpEncoder::from_layers(layers)?;
    let prototypes = take("prototypes")?;
    let bank = EmpiricalPrototypeBank::from_parts(take("bank")?, manifest.config.bank, manifest.bank_update_count)?;
    let mut momentum = Vec::new();
    while let Ok(buf) = take(&format!("momentum.{}", momentum.len())) {
        momentum.push(buf.into_vec());
    }
    let state = TrainState {
        encoder,
        prototypes,
        bank,
        momentum,
        epoch: manifest.epoch,
        rng: Rng::from_state(manifest.rng_state),
        metrics: manifest.metrics,
    };
    let lens: Vec<usize> = state.momentum.iter().map(Vec::len).collect();
    if lens != state.param_lens() {
        return Err(Error::Format("momentum buffers do not match the parameters".into()));
    }
    Ok(Checkpoint {
        config: manifest.config,
        state,
    })
}
