//! Binary checkpoint: magic, JSON header, then named little-endian f32 records.
//!
//! ```text
//! "VNETCKPT" | u32 format version | u64 header length | header JSON
//! u32 record count, then per record:
//!   u32 name length | name (UTF-8) | u32 rank | u64 dims... | f32 data...
//! ```
//!
//! Network records are `layer.weight`, `layer.bias`, `layer.gamma`,
//! `layer.beta`, `layer.running_mean` and `layer.running_var`. Optimizer state
//! and other extras live under their own prefixes.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vnet::{build_network, Layer, ModelParams, NetworkConfig};

pub const MAGIC: &[u8; 8] = b"VNETCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub network: NetworkConfig,
    pub seed: u64,
    /// optimizer steps taken when the checkpoint was written
    pub step: u64,
    /// network output channel to label value
    pub label_map: Vec<u8>,
    /// training configuration echo, free-form
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub records: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader, params: &ModelParams<f32>) -> Self {
        Self {
            header,
            records: params_to_records(params),
        }
    }

    /// Network parameters, validated against the header's configuration.
    pub fn params(&self) -> Result<ModelParams<f32>> {
        records_to_params(&self.header.network, &self.records)
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0, path };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: String::from_utf8_lossy(magic).into_owned(),
                expected: "VNETCKPT",
            });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.malformed(format!("format version {version}, this build reads {FORMAT_VERSION}")));
        }
        let hlen = r.u64()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| r.malformed(format!("header: {e}")))?;
        let count = r.u32()?;
        let mut records = IndexMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| r.malformed("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::DimensionOverflow {
                    path: path.to_path_buf(),
                    dims: shape.iter().map(|&d| d as u64).collect(),
                })?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if records.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
                return Err(r.malformed(format!("duplicate record {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: (self.pos as u64).saturating_add(n as u64),
                actual: self.bytes.len() as u64,
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn malformed(&self, detail: String) -> Error {
        Error::MalformedHeader {
            path: self.path.to_path_buf(),
            detail,
        }
    }
}

pub fn params_to_records(params: &ModelParams<f32>) -> IndexMap<String, Tensor<f32>> {
    let mut out = IndexMap::new();
    for (name, layer) in params.layers() {
        match layer {
            Layer::Conv(k) => {
                out.insert(format!("{name}.weight"), k.weight.clone());
                out.insert(format!("{name}.bias"), k.bias.clone());
            }
            Layer::BatchNorm(b) => {
                out.insert(format!("{name}.gamma"), b.gamma.clone());
                out.insert(format!("{name}.beta"), b.beta.clone());
                let c = b.running_mean.len();
                out.insert(format!("{name}.running_mean"), Tensor::from_vec(&[c], b.running_mean.clone()).expect("len"));
                out.insert(format!("{name}.running_var"), Tensor::from_vec(&[c], b.running_var.clone()).expect("len"));
            }
        }
    }
    out
}

pub fn records_to_params(cfg: &NetworkConfig, records: &IndexMap<String, Tensor<f32>>) -> Result<ModelParams<f32>> {
    let mut params = build_network(cfg, 0)?;
    let fetch = |key: String, like: &[usize]| -> Result<Tensor<f32>> {
        let t = records
            .get(&key)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks record {key}")))?;
        if t.shape() != like {
            return Err(Error::shape(
                "checkpoint",
                format!("record {key} has shape {:?}, network expects {like:?}", t.shape()),
            ));
        }
        Ok(t.clone())
    };
    let names: Vec<String> = params.layers().keys().cloned().collect();
    for name in names {
        if matches!(params.layers()[name.as_str()], Layer::Conv(_)) {
            let k = params.conv_mut(&name)?;
            k.weight = fetch(format!("{name}.weight"), k.weight.shape())?;
            k.bias = fetch(format!("{name}.bias"), k.bias.shape())?;
        } else {
            let b = params.batchnorm_mut(&name)?;
            b.gamma = fetch(format!("{name}.gamma"), b.gamma.shape())?;
            b.beta = fetch(format!("{name}.beta"), b.beta.shape())?;
            let c = b.running_mean.len();
            b.running_mean = fetch(format!("{name}.running_mean"), &[c])?.into_data();
            b.running_var = fetch(format!("{name}.running_var"), &[c])?.into_data();
        }
    }
    Ok(params)
}
