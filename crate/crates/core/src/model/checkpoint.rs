//! Checkpoint directories: `manifest.json` describing every tensor plus one
//! little-endian blob `weights.bin`.
//!
//! Tensors are laid out back to back in manifest order; each entry records
//! its byte offset and length. Loading validates the manifest against the
//! blob before any tensor is materialized.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DualEncoderModel, ModelConfig};
use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

pub const FORMAT: &str = "fewlora-tensors";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: String,
    dtype: String,
    byte_order: String,
    blob: String,
    blob_bytes: u64,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded contents of a checkpoint directory.
#[derive(Debug, Clone)]
pub struct TensorFile<T> {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

pub fn write_tensor_file<T: Scalar>(
    dir: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(&str, &Tensor<T>)],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        t.data().iter().for_each(|v| v.write_le(&mut blob));
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        kind: kind.into(),
        dtype: T::DTYPE.into(),
        byte_order: "little".into(),
        blob: BLOB.into(),
        blob_bytes: blob.len() as u64,
        meta,
        tensors: entries,
    };
    fs::write(dir.join(BLOB), &blob)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_tensor_file<T: Scalar>(dir: &Path) -> Result<TensorFile<T>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("unreadable manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("unknown format {:?}", manifest.format)));
    }
    if manifest.version != VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
    }
    if manifest.byte_order != "little" {
        return Err(Error::Format(format!("unsupported byte order {:?}", manifest.byte_order)));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::Format(format!("checkpoint holds {} but {} was requested", manifest.dtype, T::DTYPE)));
    }
    let blob = fs::read(dir.join(&manifest.blob))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Format(format!(
            "blob holds {} bytes but manifest declares {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != T::DTYPE {
            return Err(Error::Format(format!("tensor {} has dtype {}", e.name, e.dtype)));
        }
        let count: usize = e.shape.iter().product();
        if e.shape.is_empty() || count == 0 || (count * T::BYTES) as u64 != e.nbytes {
            return Err(Error::Format(format!(
                "tensor {} declares shape {:?} but {} bytes",
                e.name, e.shape, e.nbytes
            )));
        }
        let end = e.offset.checked_add(e.nbytes).filter(|&end| end <= blob.len() as u64).ok_or_else(|| {
            Error::Format(format!("tensor {} spans past the end of the blob", e.name))
        })?;
        let bytes = &blob[e.offset as usize..end as usize];
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    Ok(TensorFile { kind: manifest.kind, meta: manifest.meta, tensors })
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    temperature: f64,
}

/// Writes every parameter of `model` to the directory `path`.
pub fn save_checkpoint<T: Scalar>(model: &DualEncoderModel<T>, path: &Path) -> Result<()> {
    let meta = ModelMeta { config: *model.config(), temperature: model.temperature_value().as_f64() };
    let tensors: Vec<(&str, &Tensor<T>)> = model.params.iter().map(|(_, n, t)| (n, t)).collect();
    write_tensor_file(path, "model", serde_json::to_value(meta)?, &tensors)
}

/// Reads a model checkpoint; every tensor must match the recorded architecture.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<DualEncoderModel<T>> {
    let file = read_tensor_file::<T>(path)?;
    if file.kind != "model" {
        return Err(Error::Format(format!("expected a model checkpoint, found {:?}", file.kind)));
    }
    let meta: ModelMeta =
        serde_json::from_value(file.meta).map_err(|e| Error::Format(format!("bad model metadata: {e}")))?;
    let mut model = DualEncoderModel::<T>::new(meta.config, 0).map_err(|e| Error::Format(e.to_string()))?;
    let mut seen = vec![false; model.params.len()];
    for (name, tensor) in file.tensors {
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
        let slot = model.params.get_mut(id);
        if slot.shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, architecture expects {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        if std::mem::replace(&mut seen[id.0], true) {
            return Err(Error::Format(format!("tensor {name} appears twice")));
        }
        *slot = tensor.trainable();
    }
    if let Some(i) = seen.iter().position(|&s| !s) {
        return Err(Error::Format(format!("missing tensor {}", model.params.name(super::ParamId(i)))));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    fn model() -> DualEncoderModel<f32> {
        let c = ModelConfig::toy(10).with_encoder(EncoderConfig { depth: 1, width: 8, heads: 2 }, 4);
        DualEncoderModel::new(c, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(back.params.len(), m.params.len());
        for ((_, na, a), (_, nb, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert!(a.bit_eq(b), "{na}");
        }
        assert_eq!(back.config(), m.config());
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(manifest.contains("\"temperature\"") && manifest.contains("\"dtype\": \"f32\""));
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path()).unwrap();
        let blob = fs::read(dir.path().join(BLOB)).unwrap();
        fs::write(dir.path().join(BLOB), &blob[..blob.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn edited_shape_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let entry = manifest["tensors"]
            .as_array_mut()
            .unwrap()
            .iter_mut()
            .find(|e| e["name"] == "text.proj")
            .unwrap();
        // same element count, wrong layout
        entry["shape"] = serde_json::json!([8, 4]);
        fs::write(&path, manifest.to_string()).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("text.proj"), "{err}");
    }

    #[test]
    fn unknown_version_and_dtype_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path()).unwrap();
        assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(Error::Format(_))));
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 7");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Format(_))));
    }
}
