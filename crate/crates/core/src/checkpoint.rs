//! Single-file checkpoints: a magic tag, a format version, a JSON header
//! carrying the network configuration, tensor directory and free-form
//! metadata, then every tensor as little-endian scalars in directory order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dbpnet::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CPCRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    dtype: String,
    network_config: NetworkConfig,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

/// In-memory checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub network_config: NetworkConfig,
    /// Named tensors in file order.
    pub tensors: Vec<(TensorEntry, Vec<T>)>,
    pub metadata: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    /// All network tensors (parameters and running statistics) by name.
    pub fn from_network(net: &Network<T>, metadata: serde_json::Value) -> Self {
        let mut tensors = Vec::new();
        net.visit("", &mut |name, p| {
            tensors.push((
                TensorEntry {
                    name: name.to_string(),
                    shape: p.shape.clone(),
                },
                p.value.clone(),
            ))
        });
        Self {
            network_config: net.config().clone(),
            tensors,
            metadata,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&(TensorEntry, Vec<T>)> {
        self.tensors.iter().find(|(e, _)| e.name == name)
    }

    /// Rebuilds the network. With `expected` set, the embedded
    /// configuration must match it.
    pub fn to_network(&self, expected: Option<&NetworkConfig>) -> Result<Network<T>> {
        if let Some(cfg) = expected {
            if cfg != &self.network_config {
                return Err(Error::Checkpoint(format!(
                    "network configuration mismatch: checkpoint has {}, expected {}",
                    serde_json::to_string(&self.network_config)?,
                    serde_json::to_string(cfg)?
                )));
            }
        }
        let mut net = Network::new(self.network_config.clone(), 0)?;
        let mut missing = None;
        net.visit_mut("", &mut |name, p| {
            if missing.is_some() {
                return;
            }
            match self.tensor(name) {
                Some((e, v)) if e.shape == p.shape && v.len() == p.value.len() => {
                    p.value.clone_from(v)
                }
                Some((e, _)) => {
                    missing = Some(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        e.shape, p.shape
                    ))
                }
                None => missing = Some(format!("tensor {name} is missing")),
            }
        });
        match missing {
            Some(m) => Err(Error::Checkpoint(m)),
            None => Ok(net),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            network_config: self.network_config.clone(),
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|(_, v)| v.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (e, v) in &self.tensors {
            if v.len() != e.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} does not fill its shape",
                    e.name
                )));
            }
            for &x in v {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(format!("corrupt checkpoint: {what}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&e.to_string()))?;
        if header.format_version != version {
            return Err(corrupt("header version disagrees with preamble"));
        }
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {} tensors, loader expects {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let mut data = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < n * T::BYTES {
                return Err(corrupt(&format!("tensor {} is truncated", e.name)));
            }
            let v = data[..n * T::BYTES]
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            data = &data[n * T::BYTES..];
            tensors.push((e, v));
        }
        if !data.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            network_config: header.network_config,
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
