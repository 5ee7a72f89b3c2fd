//! Single-file checkpoints: a text header, a JSON manifest, then named
//! little-endian `f32` parameter blobs.
//!
//! ```text
//! insertion-parser-ckpt
//! version 1
//! manifest_bytes <N>
//! <N bytes of JSON>
//! params <K>
//! K x { name_len: u32, name, ndim: u32 (=2), rows: u32, cols: u32, rows*cols f32 }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autograd::ParamSet;
use crate::corpus::{SerializedVocab, Vocabulary};
use crate::error::TrainError;
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &str = "insertion-parser-ckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub dev_em: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub train_config: TrainConfig,
    pub step: usize,
    pub metrics: Metrics,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab: SerializedVocab,
    step: usize,
    metrics: Metrics,
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn line(&mut self) -> Result<&'a str, TrainError> {
        let rest = &self.bytes[self.pos..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("truncated header"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| corrupt("header is not UTF-8"))?;
        self.pos += nl + 1;
        Ok(line)
    }

    fn field(&mut self, key: &str) -> Result<usize, TrainError> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt(format!("expected `{key} <number>`, found {line:?}")))
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(model: Model<f32>, train_config: TrainConfig, step: usize, metrics: Metrics) -> Self {
        Checkpoint { model, train_config, step, metrics }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            model_config: self.model.config().clone(),
            train_config: self.train_config.clone(),
            vocab: self.model.vocab().to_serialized(),
            step: self.step,
            metrics: self.metrics,
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let params = self.model.params();
        let mut out = Vec::with_capacity(json.len() + params.element_count() * 4 + 1024);
        write!(out, "{CHECKPOINT_MAGIC}\nversion {CHECKPOINT_VERSION}\nmanifest_bytes {}\n", json.len()).unwrap();
        out.extend_from_slice(&json);
        write!(out, "\nparams {}\n", params.len()).unwrap();
        for id in params.ids() {
            let name = params.name(id).as_bytes();
            let value = params.get(id);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
            for x in value.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.line()? != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = c.field("version")?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let len = c.field("manifest_bytes")?;
        let manifest: Manifest = serde_json::from_slice(c.take(len)?).map_err(|e| corrupt(format!("manifest: {e}")))?;
        c.line()?;
        let count = c.field("params")?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = c.u32()? as usize;
            let name = std::str::from_utf8(c.take(name_len)?).map_err(|_| corrupt("parameter name is not UTF-8"))?.to_string();
            if c.u32()? != 2 {
                return Err(corrupt(format!("parameter {name} is not a matrix")));
            }
            let rows = c.u32()? as usize;
            let cols = c.u32()? as usize;
            let data = c.take(rows * cols * 4)?;
            let values = data.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            if params.id(&name).is_some() {
                return Err(corrupt(format!("duplicate parameter {name}")));
            }
            params.add(name, Array2::from_shape_vec((rows, cols), values).unwrap());
        }
        if c.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        let vocab = Vocabulary::from_serialized(&manifest.vocab).map_err(|e| corrupt(e.to_string()))?;
        let model = Model::from_params(manifest.model_config, vocab, params)?;
        Ok(Checkpoint { model, train_config: manifest.train_config, step: manifest.step, metrics: manifest.metrics })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
