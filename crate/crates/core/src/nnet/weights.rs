//! `GNET1` weights container.
//!
//! ```text
//! "GNET1" | u32 version | u32 header_len | JSON header | f32le payloads...
//! ```
//!
//! The header lists tensors (name, shape, dtype) in payload order together
//! with the model config and its fingerprint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::ParamKind;
use super::model::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"GNET1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Ordered parameter snapshot of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub fingerprint: String,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorDescriptor {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    config: ModelConfig,
    tensors: Vec<TensorDescriptor>,
}

impl Model {
    pub fn weights(&self) -> ModelWeights {
        let mut tensors = Vec::new();
        self.visit_params(&mut |p| {
            tensors.push(NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: p.value.clone(),
            })
        });
        ModelWeights {
            fingerprint: self.config().fingerprint(),
            config: self.config().clone(),
            tensors,
        }
    }

    pub fn load_weights(&mut self, weights: &ModelWeights) -> Result<()> {
        if weights.config != *self.config() {
            return Err(Error::Config("weights were saved for a different model config".into()));
        }
        let mut iter = weights.tensors.iter();
        let mut err = None;
        self.visit_params_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match iter.next() {
                Some(t) if t.name == p.name && t.shape == p.shape => p.value.copy_from_slice(&t.values),
                Some(t) => {
                    err = Some(Error::Shape(format!(
                        "tensor `{}` {:?} does not match parameter `{}` {:?}",
                        t.name, t.shape, p.name, p.shape
                    )))
                }
                None => err = Some(Error::Shape(format!("missing tensor `{}`", p.name))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = iter.next() {
            return Err(Error::Shape(format!("unexpected tensor `{}`", extra.name)));
        }
        Ok(())
    }

    pub fn from_weights(weights: &ModelWeights) -> Result<Self> {
        let mut m = Model::new(weights.config.clone(), 0)?;
        m.load_weights(weights)?;
        Ok(m)
    }

    /// Names of parameters that receive weight decay.
    pub fn decayed_parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| {
            if p.kind.decays() {
                names.push(p.name.clone())
            }
        });
        names
    }

    pub fn count_kind(&self, kind: ParamKind) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.kind == kind {
                n += 1
            }
        });
        n
    }
}

impl ModelWeights {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            fingerprint: self.fingerprint.clone(),
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorDescriptor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    dtype: "f32le".into(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|t| t.values.len() * 4).sum();
        let mut out = Vec::with_capacity(13 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format {
            offset: offset as u64,
            message,
        };
        if bytes.len() < 5 || &bytes[..5] != MAGIC {
            return Err(fail(0, "missing GNET1 magic".into()));
        }
        let read_u32 = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| fail(at, "truncated header field".into()))
        };
        let version = read_u32(5)?;
        if version != VERSION {
            return Err(fail(5, format!("unsupported version {version}")));
        }
        let header_len = read_u32(9)? as usize;
        let json = bytes
            .get(13..13 + header_len)
            .ok_or_else(|| fail(13, format!("header of {header_len} bytes runs past end of file")))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| fail(13, format!("bad header JSON: {e}")))?;
        if header.fingerprint != header.config.fingerprint() {
            return Err(fail(13, "config fingerprint mismatch".into()));
        }
        let mut offset = 13 + header_len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for d in header.tensors {
            if d.dtype != "f32le" {
                return Err(fail(offset, format!("tensor `{}` has unsupported dtype {}", d.name, d.dtype)));
            }
            let n: usize = d.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| fail(offset, format!("payload of tensor `{}` truncated", d.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push(NamedTensor {
                name: d.name,
                shape: d.shape,
                values,
            });
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(fail(offset, format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self {
            config: header.config,
            fingerprint: header.fingerprint,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
