//! Checkpoint directories: a JSON manifest plus one binary file per tensor.
//!
//! Tensor file layout (little endian): magic `SMT1`, `u32` rank, `rank`
//! `u32` dims, the `f32` data, then a `u32` CRC-32 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, TrainConfig, TrainedModel};
use crate::architectures::{ArchConfig, ArchId, OutputSemantics};
use crate::dataset::LabelOrientation;
use crate::error::{Error, Result};
use crate::exec::ParamStore;
use crate::netgraph::LayerGraph;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SMT1";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    arch_id: ArchId,
    config: ArchConfig,
    graph: LayerGraph,
    orientation: LabelOrientation,
    output_semantics: OutputSemantics,
    seed: u64,
    train_config: TrainConfig,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    tensors: Vec<TensorEntry>,
}

fn tensor_file(name: &str) -> String {
    format!("{}.bin", name.replace('/', "__"))
}

fn encode(shape: &[usize], data: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 4 * shape.len() + 4 * data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.len() < 12 {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    if &body[..4] != MAGIC {
        return Err(Error::Format(format!("{}: not a tensor file", path.display())));
    }
    let word = |k: usize| -> Option<u32> { body.get(k..k + 4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes"))) };
    let bad = || Error::Format(format!("{}: truncated header", path.display()));
    let rank = word(4).ok_or_else(bad)? as usize;
    let shape: Vec<usize> = (0..rank).map(|i| word(8 + 4 * i).map(|d| d as usize)).collect::<Option<_>>().ok_or_else(bad)?;
    let data_bytes = &body[(8 + 4 * rank).min(body.len())..];
    let numel: usize = shape.iter().product();
    if data_bytes.len() != 4 * numel {
        return Err(Error::Format(format!("{}: {} data bytes for shape {shape:?}", path.display(), data_bytes.len())));
    }
    let data = data_bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Ok((shape, data))
}

/// Writes `model` into the directory `dir`, creating it if needed.
pub fn save_checkpoint(model: &TrainedModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (spec, data) in model.params.specs().iter().zip(model.params.values()) {
        let file = tensor_file(&spec.name);
        let path = dir.join(&file);
        fs::write(&path, encode(&spec.shape, data)).map_err(|e| Error::io(&path, e))?;
        tensors.push(TensorEntry { name: spec.name.clone(), file, shape: spec.shape.clone() });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        arch_id: model.spec.arch_id,
        config: model.spec.config.clone(),
        graph: model.spec.graph.clone(),
        orientation: model.spec.label_orientation,
        output_semantics: model.spec.output_semantics,
        seed: model.train_config.seed,
        train_config: model.train_config.clone(),
        history: model.history.clone(),
        best_epoch: model.best_epoch,
        tensors,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// Reads a checkpoint; with `expected` set, a different architecture is a
/// validation error.
pub fn load_checkpoint(dir: impl AsRef<Path>, expected: Option<ArchId>) -> Result<TrainedModel> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if let Some(want) = expected {
        if want != manifest.arch_id {
            return Err(Error::Validation(format!("checkpoint holds a {} model, not {want}", manifest.arch_id)));
        }
    }
    let spec = manifest.config.build()?;
    if spec.arch_id != manifest.arch_id || spec.graph != manifest.graph {
        return Err(Error::Validation("checkpoint graph does not match its configuration".into()));
    }
    let mut params = ParamStore::zeros(spec.graph.param_specs()?);
    if manifest.tensors.len() != params.len() {
        return Err(Error::Validation(format!("checkpoint lists {} tensors, model has {}", manifest.tensors.len(), params.len())));
    }
    for t in &manifest.tensors {
        let path = dir.join(&t.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (shape, data) = decode(&path, &bytes)?;
        if shape != t.shape {
            return Err(Error::Shape(format!("{}: stored shape {shape:?}, manifest says {:?}", t.name, t.shape)));
        }
        params.set(&t.name, data)?;
    }
    TrainedModel::new(spec, params, manifest.history, manifest.best_epoch, manifest.train_config)
}
