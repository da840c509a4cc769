//! Binary checkpoints.
//!
//! Layout: magic `DSCK`, little-endian `u32` format version, `u64` manifest
//! length, the JSON manifest, then every tensor's values as `f64` in
//! manifest order and row-major layout.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use drivescale_core::codec::TokenVocab;
use drivescale_core::ledger::ModelShape;
use serde::{Deserialize, Serialize};

use crate::model::{JointModel, ModelConfig};
use crate::tape::Mat;
use crate::ModelError;

pub const MAGIC: &[u8; 4] = b"DSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub shape: ModelShape,
    pub vocab: TokenVocab,
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest(model: &JointModel, step: u64, seed: u64) -> Manifest {
    Manifest {
        format_version: FORMAT_VERSION,
        shape: model.config().shape(),
        vocab: model.config().vocab,
        config: *model.config(),
        step,
        seed,
        tensors: model
            .params()
            .iter()
            .zip(model.param_info())
            .map(|(p, i)| TensorEntry {
                name: i.name.clone(),
                rows: p.nrows(),
                cols: p.ncols(),
            })
            .collect(),
    }
}

pub fn write<W: Write>(
    mut w: W,
    model: &JointModel,
    step: u64,
    seed: u64,
) -> Result<(), ModelError> {
    let json = serde_json::to_vec(&manifest(model, step, seed))
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in model.params() {
        for v in p.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<(JointModel, Manifest), ModelError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let man: Manifest =
        serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut params = Vec::with_capacity(man.tensors.len());
    for t in &man.tensors {
        let mut bytes = vec![0u8; t.rows * t.cols * 8];
        r.read_exact(&mut bytes)?;
        let vals = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(
            Mat::from_shape_vec((t.rows, t.cols), vals)
                .map_err(|e| ModelError::Checkpoint(e.to_string()))?,
        );
    }
    let model = JointModel::from_parts(man.config, params)?;
    let names: Vec<&str> = model.param_info().iter().map(|i| i.name.as_str()).collect();
    if man
        .tensors
        .iter()
        .map(|t| t.name.as_str())
        .ne(names.iter().copied())
    {
        return Err(ModelError::Checkpoint(
            "tensor names do not match the layout".into(),
        ));
    }
    if man.shape != model.config().shape() {
        return Err(ModelError::Checkpoint(
            "shape does not match the config".into(),
        ));
    }
    Ok((model, man))
}

/// Writes the checkpoint and a `.json` manifest beside it.
pub fn save(path: &Path, model: &JointModel, step: u64, seed: u64) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write(&mut buf, model, step, seed)?;
    fs::write(path, buf)?;
    let json = serde_json::to_string_pretty(&manifest(model, step, seed))
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(path.with_extension("json"), json + "\n")?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(JointModel, Manifest), ModelError> {
    read(fs::read(path)?.as_slice())
}
