//! Versioned binary parameter container.
//!
//! Layout: 8 magic bytes, a little-endian `u64` header length, the JSON
//! header, then every parameter as raw little-endian `f64` values in header
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, ScheduleDocument};
use crate::error::{Error, Result};
use crate::models::classifier::{Classifier, ClassifierConfig};
use crate::models::denoiser::{Denoiser, DenoiserConfig};
use crate::models::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TTACKPT\0";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Denoiser,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub kind: ModelKind,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    #[serde(rename = "V")]
    pub v: usize,
    pub d: usize,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub config: serde_json::Value,
}

pub fn encode<T: Scalar>(mut header: CheckpointHeader, params: &ParamStore<T>) -> Result<Vec<u8>> {
    header.names = params.names().to_vec();
    header.shapes = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore<T>)> {
    let bad = |m: &str| Error::Checkpoint(m.into());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported schema version {} (expected {SCHEMA_VERSION})",
            header.schema_version
        )));
    }
    if header.names.len() != header.shapes.len() {
        return Err(bad("header lists differ in length"));
    }
    let mut data = bytes[16 + hlen..].chunks_exact(8);
    let mut params = ParamStore::new();
    for (name, shape) in header.names.iter().zip(&header.shapes) {
        let count: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(count);
        for _ in 0..count {
            let c = data.next().ok_or_else(|| bad("truncated parameter data"))?;
            vals.push(T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))));
        }
        params.insert(name.clone(), Tensor::new(shape.clone(), vals)?);
    }
    if data.next().is_some() || !data.remainder().is_empty() {
        return Err(bad("trailing bytes after parameter data"));
    }
    Ok((header, params))
}

#[derive(Serialize, Deserialize)]
struct DenoiserExtra {
    model: DenoiserConfig,
    schedule: ScheduleDocument,
}

impl<T: Scalar> Denoiser<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let extra = DenoiserExtra {
            model: self.config().clone(),
            schedule: self.schedule().to_document(),
        };
        let header = CheckpointHeader {
            schema_version: SCHEMA_VERSION,
            kind: ModelKind::Denoiser,
            t: Some(self.schedule().t_max()),
            v: self.config().vocab_size,
            d: self.config().d_model,
            names: Vec::new(),
            shapes: Vec::new(),
            config: serde_json::to_value(extra)?,
        };
        encode(header, self.params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, params) = decode(bytes)?;
        if header.kind != ModelKind::Denoiser {
            return Err(Error::Checkpoint(format!("expected a denoiser, found {:?}", header.kind)));
        }
        let extra: DenoiserExtra = serde_json::from_value(header.config)?;
        let schedule = NoiseSchedule::from_document(&extra.schedule)?;
        Self::from_parts(extra.model, schedule, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl<T: Scalar> Classifier<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            schema_version: SCHEMA_VERSION,
            kind: ModelKind::Classifier,
            t: None,
            v: self.config().vocab_size,
            d: self.config().d_hidden,
            names: Vec::new(),
            shapes: Vec::new(),
            config: serde_json::to_value(self.config())?,
        };
        encode(header, self.params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, params) = decode(bytes)?;
        if header.kind != ModelKind::Classifier {
            return Err(Error::Checkpoint(format!("expected a classifier, found {:?}", header.kind)));
        }
        let cfg: ClassifierConfig = serde_json::from_value(header.config)?;
        Self::from_parts(cfg, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
