//! Self-describing model checkpoints.
//!
//! Layout: the 8-byte magic `SFNMODEL`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a UTF-8 JSON header, then every
//! parameter tensor as little-endian `f64` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Architecture, FusionModel};
use super::train::TrainConfig;
use crate::dataset::LabelTable;
use crate::error::{Error, Result};
use crate::preprocess::MinMaxScaler;

pub const MAGIC: &[u8; 8] = b"SFNMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub architecture: Architecture,
    pub labels: LabelTable,
    /// File name of the scaler written next to the checkpoint.
    pub scaler_file: String,
    pub scaler: MinMaxScaler,
    pub train_config: TrainConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: FusionModel,
}

pub fn save_checkpoint(
    path: &Path,
    model: &FusionModel,
    labels: &LabelTable,
    scaler: &MinMaxScaler,
    scaler_file: &str,
    cfg: &TrainConfig,
) -> Result<()> {
    let names = model.parameter_names();
    let params = model.parameters();
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        architecture: model.arch.clone(),
        labels: labels.clone(),
        scaler_file: scaler_file.to_string(),
        scaler: scaler.clone(),
        train_config: TrainConfig {
            modality: model.modality,
            ..cfg.clone()
        },
        tensors: names
            .into_iter()
            .zip(&params)
            .map(|(name, p)| TensorEntry { name, len: p.len() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for p in params {
        for v in p {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::layout(path, "not a model checkpoint"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;

    let cfg = &header.train_config;
    let mut model = FusionModel::new(
        header.architecture.clone(),
        cfg.modality,
        cfg.dropout_rate,
        cfg.l2_lambda,
        cfg.freeze_backbone,
        0,
    )?;
    let names = model.parameter_names();
    let mut params = model.parameters_mut();
    if params.len() != header.tensors.len() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint lists {} tensors, architecture needs {}",
            header.tensors.len(),
            params.len()
        )));
    }
    let mut buf = [0u8; 8];
    for ((dst, entry), name) in params.iter_mut().zip(&header.tensors).zip(&names) {
        if entry.len != dst.len() || &entry.name != name {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} ({} values) does not match {} ({} values)",
                entry.name,
                entry.len,
                name,
                dst.len()
            )));
        }
        for v in dst.iter_mut() {
            r.read_exact(&mut buf).map_err(io)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    drop(params);
    model.touch();
    Ok(Checkpoint { header, model })
}
