//! Checkpoint file: `DGSD0001`, a little-endian `u64` manifest length, a
//! TOML manifest (config plus a tensor index), then the raw little-endian
//! `f32` blob.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DGSD0001";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    endian: String,
    config: ModelConfig,
    tensor: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
    dtype: String,
    /// Byte offset into the blob.
    offset: u64,
}

fn encode<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    model.visit(&mut |p| {
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape().dims(),
            dtype: "f32".into(),
            offset: blob.len() as u64,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    });
    let manifest = Manifest {
        endian: "little".into(),
        config: model.config.clone(),
        tensor: entries,
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + text.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&blob);
    out
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn decode(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing DGSD0001 magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated manifest"))?;
    let text = std::str::from_utf8(&bytes[16..end]).map_err(|_| bad("manifest is not UTF-8"))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.endian != "little" {
        return Err(bad(format!("unsupported endian marker `{}`", manifest.endian)));
    }
    Ok((manifest, &bytes[end..]))
}

fn apply<T: Scalar>(model: &mut Model<T>, manifest: &Manifest, blob: &[u8]) -> Result<()> {
    let mut index: HashMap<&str, &TensorEntry> = HashMap::new();
    for e in &manifest.tensor {
        if index.insert(e.name.as_str(), e).is_some() {
            return Err(bad(format!("tensor `{}` listed twice", e.name)));
        }
    }
    let mut loaded = Vec::new();
    let mut expected = Vec::new();
    model.visit(&mut |p| expected.push((p.name.clone(), p.shape())));
    for (name, shape) in &expected {
        let e = index.remove(name.as_str()).ok_or_else(|| Error::MissingTensor(name.clone()))?;
        if e.shape != shape.dims() {
            return Err(Error::TensorShape {
                name: name.clone(),
                expected: shape.dims(),
                found: e.shape,
            });
        }
        if e.dtype != "f32" {
            return Err(bad(format!("tensor `{name}` has unsupported dtype `{}`", e.dtype)));
        }
        let start = usize::try_from(e.offset).map_err(|_| bad("offset overflow"))?;
        let end = start
            .checked_add(shape.numel() * 4)
            .filter(|&end| end <= blob.len())
            .ok_or_else(|| bad(format!("truncated blob reading tensor `{name}`")))?;
        let data: Vec<T> = blob[start..end]
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        loaded.push(Tensor::new(Shape::from_dims(e.shape), data)?);
    }
    if let Some(extra) = index.keys().min() {
        return Err(bad(format!("unexpected tensor `{extra}`")));
    }
    let mut it = loaded.into_iter();
    model.visit_mut(&mut |p| *p.tensor_mut() = it.next().expect("one tensor per parameter"));
    Ok(())
}

/// Build the model described by the checkpoint and load its weights.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let (manifest, blob) = decode(&bytes)?;
    let mut model = Model::build(&manifest.config, 0)?;
    apply(&mut model, &manifest, blob)?;
    Ok(model)
}

impl<T: Scalar> Model<T> {
    /// Load weights into an already built graph, validating names and shapes
    /// against it.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let (manifest, blob) = decode(&bytes)?;
        apply(self, &manifest, blob)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        encode(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            input_size: [64, 64],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dgsd");
        let m = Model::<f32>::build(&small(), 5).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.to_checkpoint_bytes(), m.to_checkpoint_bytes());
        assert_eq!(back.count_params(), m.count_params());
    }

    #[test]
    fn blob_element_count_equals_param_count() {
        let m = Model::<f32>::build(&small(), 0).unwrap();
        let bytes = m.to_checkpoint_bytes();
        let (manifest, blob) = decode(&bytes).unwrap();
        assert_eq!(blob.len() / 4, m.count_params());
        let listed: usize = manifest.tensor.iter().map(|e| Shape::from_dims(e.shape).numel()).sum();
        assert_eq!(listed, m.count_params());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = Model::<f32>::build(&small(), 0).unwrap();
        let bytes = m.to_checkpoint_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Checkpoint(_))));
        let truncated = &bytes[..bytes.len() - 3];
        let (manifest, blob) = decode(truncated).unwrap();
        let mut fresh = Model::<f32>::build(&small(), 0).unwrap();
        let err = apply(&mut fresh, &manifest, blob).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
