//! Parameter checkpoints: a JSON manifest next to a raw little-endian f64 blob.
//!
//! `params.json` lists every tensor by path, shape and element offset into
//! `params.bin`. Trainable parameters, non-trainable buffers (batch-norm
//! running statistics, normalization stats) and optional Adam moments share
//! the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::params::ParamStore;
use crate::error::{io_err, json_err, Error, Result};

pub const MANIFEST_FILE: &str = "params.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub path: String,
    pub len: usize,
    pub m_offset: usize,
    pub v_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamManifest {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: Vec<MomentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub params: Vec<TensorEntry>,
    #[serde(default)]
    pub buffers: Vec<TensorEntry>,
    #[serde(default)]
    pub adam: Option<AdamManifest>,
    pub config_hash: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// A named, non-trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub buffers: BTreeMap<String, Buffer>,
    pub adam: Option<AdamState>,
    pub config_hash: String,
    /// Free-form state owned by the caller (e.g. scheduler, epoch).
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut blob: Vec<f64> = Vec::new();
        let mut push = |values: &[f64]| {
            let offset = blob.len();
            blob.extend_from_slice(values);
            offset
        };
        let params = self
            .params
            .iter()
            .map(|(path, p)| TensorEntry {
                path: path.clone(),
                shape: p.shape.clone(),
                offset: push(&p.value),
            })
            .collect();
        let buffers = self
            .buffers
            .iter()
            .map(|(path, b)| TensorEntry {
                path: path.clone(),
                shape: b.shape.clone(),
                offset: push(&b.value),
            })
            .collect();
        let adam = self.adam.as_ref().map(|a| AdamManifest {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
            moments: a
                .moments
                .iter()
                .map(|(path, (m, v))| MomentEntry {
                    path: path.clone(),
                    len: m.len(),
                    m_offset: push(m),
                    v_offset: push(v),
                })
                .collect(),
        });
        let manifest = CheckpointManifest {
            params,
            buffers,
            adam,
            config_hash: self.config_hash.clone(),
            extra: self.extra.clone(),
        };
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(json_err(&manifest_path))?;
        fs::write(&manifest_path, text + "\n").map_err(io_err(&manifest_path))?;
        let bytes: Vec<u8> = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
        let blob_path = dir.join(BLOB_FILE);
        fs::write(&blob_path, bytes).map_err(io_err(&blob_path))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(json_err(&manifest_path))?;
        let blob_path = dir.join(BLOB_FILE);
        let bytes = fs::read(&blob_path).map_err(io_err(&blob_path))?;
        if bytes.len() % 8 != 0 {
            return Err(format_error(
                &blob_path,
                bytes.len() as u64,
                "blob length is not a multiple of 8",
            ));
        }
        let blob: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let slice = |offset: usize, len: usize, path: &str| -> Result<Vec<f64>> {
            blob.get(offset..offset + len).map(<[f64]>::to_vec).ok_or_else(|| {
                format_error(
                    &blob_path,
                    (offset * 8) as u64,
                    &format!(
                        "{path}: expected {} bytes, blob has {}",
                        (offset + len) * 8,
                        bytes.len()
                    ),
                )
            })
        };

        let mut params = ParamStore::new();
        for e in &manifest.params {
            let len = e.shape.iter().product();
            params.insert(e.path.clone(), e.shape.clone(), slice(e.offset, len, &e.path)?)?;
        }
        let mut buffers = BTreeMap::new();
        for e in &manifest.buffers {
            let len = e.shape.iter().product();
            buffers.insert(
                e.path.clone(),
                Buffer {
                    shape: e.shape.clone(),
                    value: slice(e.offset, len, &e.path)?,
                },
            );
        }
        let adam = match &manifest.adam {
            None => None,
            Some(a) => {
                let mut moments = BTreeMap::new();
                for m in &a.moments {
                    moments.insert(
                        m.path.clone(),
                        (slice(m.m_offset, m.len, &m.path)?, slice(m.v_offset, m.len, &m.path)?),
                    );
                }
                Some(AdamState {
                    lr: a.lr,
                    beta1: a.beta1,
                    beta2: a.beta2,
                    eps: a.eps,
                    step: a.step,
                    moments,
                })
            }
        };
        Ok(Self {
            params,
            buffers,
            adam,
            config_hash: manifest.config_hash,
            extra: manifest.extra,
        })
    }
}

fn format_error(path: &Path, offset: u64, message: &str) -> Error {
    Error::Format {
        path: PathBuf::from(path),
        offset,
        message: message.to_owned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut params = ParamStore::new();
        params
            .insert("a.w", vec![2, 2], vec![0.1, -2.5e-300, f64::MIN_POSITIVE, 1.0 / 3.0])
            .unwrap();
        params.insert("b.bias", vec![1], vec![-0.0]).unwrap();
        let mut adam = AdamState::new(&params, 5e-2);
        adam.step = 7;
        adam.moments.get_mut("a.w").unwrap().0[1] = 0.123456789;
        let mut buffers = BTreeMap::new();
        buffers.insert(
            "bn1.running_var".to_owned(),
            Buffer {
                shape: vec![3],
                value: vec![1.0, 2.0, std::f64::consts::PI],
            },
        );
        let ckpt = Checkpoint {
            params,
            buffers,
            adam: Some(adam),
            config_hash: "abc".into(),
            extra: serde_json::json!({"epoch": 3}),
        };
        let dir = tempfile::tempdir().unwrap();
        ckpt.write(dir.path()).unwrap();
        let back = Checkpoint::read(dir.path()).unwrap();
        assert_eq!(back.params.get("b.bias")[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, ckpt);
    }

    #[test]
    fn truncated_blob_is_reported() {
        let mut params = ParamStore::new();
        params.insert("w", vec![4], vec![1.0; 4]).unwrap();
        let ckpt = Checkpoint {
            params,
            buffers: BTreeMap::new(),
            adam: None,
            config_hash: String::new(),
            extra: serde_json::Value::Null,
        };
        let dir = tempfile::tempdir().unwrap();
        ckpt.write(dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..16]).unwrap();
        let err = Checkpoint::read(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("expected 32 bytes"));
    }
}
