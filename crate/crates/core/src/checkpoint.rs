//! Model checkpoints: the parameter tensors concatenated in AMMT encoding in
//! one file, plus a JSON index (`<file>.index.json`) with the architecture,
//! the chosen configuration and each tensor's byte offset.

use std::fs;
use std::path::{Path, PathBuf};

use ammsm_tensor::{io, Scalar};
use serde::{Deserialize, Serialize};

use crate::backbone::StageConfig;
use crate::error::{lift, Error, Result};
use crate::model::{Model, Variant};
use crate::search::Config;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub version: u32,
    pub variant: Variant,
    pub n_classes: usize,
    pub stages: StageConfig,
    pub config: Config,
    pub tensors: Vec<TensorEntry>,
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".index.json");
    PathBuf::from(s)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, config: &Config, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
        });
        io::encode_into(t, &mut bytes);
    }
    let index = CheckpointIndex {
        version: CHECKPOINT_VERSION,
        variant: model.arch.variant,
        n_classes: model.arch.n_classes,
        stages: model.arch.backbone.cfg.clone(),
        config: config.clone(),
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let ipath = index_path(path);
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(&ipath, json).map_err(|e| Error::io(&ipath, e))
}

pub fn read_index(path: &Path) -> Result<CheckpointIndex> {
    let ipath = index_path(path);
    let text = fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text)
        .map_err(|e| Error::format(&ipath, Some(crate::data::byte_offset(&text, e.line(), e.column())), e.to_string()))?;
    if index.version != CHECKPOINT_VERSION {
        return Err(Error::format(&ipath, None, format!("unsupported checkpoint version {}", index.version)));
    }
    Ok(index)
}

/// Rebuilds the model described by the index and loads every tensor,
/// checking names, order, shapes and offsets.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointIndex)> {
    let index = read_index(path)?;
    let mut model = Model::<T>::new(&index.stages, index.n_classes, index.variant, 0)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected: Vec<(String, Vec<usize>)> = model
        .store
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    if expected.len() != index.tensors.len() {
        return Err(Error::format(
            path,
            None,
            format!("checkpoint holds {} tensors, model has {}", index.tensors.len(), expected.len()),
        ));
    }
    let mut offset = 0usize;
    for ((name, shape), entry) in expected.iter().zip(&index.tensors) {
        if *name != entry.name || *shape != entry.shape || entry.offset != offset as u64 {
            return Err(Error::format(
                path,
                Some(entry.offset),
                format!("expected {name} {shape:?} at offset {offset}, index has {} {:?} at {}", entry.name, entry.shape, entry.offset),
            ));
        }
        let (t, next) = io::decode_at(&bytes, offset, path).map_err(lift)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::format(path, Some(offset as u64), format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        model.store.set(name, t.cast())?;
        offset = next;
    }
    if offset != bytes.len() {
        return Err(Error::format(path, Some(offset as u64), "trailing bytes after the last tensor"));
    }
    Ok((model, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(&StageConfig::desk(), 3, Variant::Full, 9).unwrap();
        let cfg = Config { ratios: vec![0.5; 5], alpha: 2.0 };
        save_checkpoint(&model, &cfg, &path).unwrap();
        let (back, index) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(index.config, cfg);
        for ((na, a), (nb, b)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(&StageConfig::desk(), 3, Variant::NoAmm, 9).unwrap();
        save_checkpoint(&model, &Config::dense(5, 1.0), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_checkpoint::<f32>(&path).err().unwrap();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }
}
