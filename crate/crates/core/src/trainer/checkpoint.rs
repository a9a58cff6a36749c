//! Binary checkpoint.
//!
//! ```text
//! u32 magic = 0x43435343, u32 version, u64 header length     (LE)
//! header: UTF-8 JSON {config, spec, epoch, best_acc, best_epoch, stale,
//!         stopped, log, tensors: [{name, shape}]}
//! f64 parameter values, tensor by tensor in header order      (LE)
//! f64 velocity values, same order and shapes                  (LE)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, Sgd, TrainConfig};
use crate::error::{CcsError, Result};
use crate::model::{Model, ModelSpec};
use crate::numeric::Tensor;

pub const CHECKPOINT_MAGIC: u32 = 0x4343_5343;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub velocity: Vec<Tensor>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_acc: Option<f64>,
    pub best_epoch: usize,
    /// Epochs since the last validation improvement.
    pub stale: usize,
    pub stopped: bool,
    pub log: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    spec: ModelSpec,
    epoch: usize,
    best_acc: Option<f64>,
    best_epoch: usize,
    stale: usize,
    stopped: bool,
    log: Vec<EpochMetrics>,
    tensors: Vec<TensorEntry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CcsError::Integrity(format!(
                "checkpoint truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn tensor(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n * 8, what)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

impl Checkpoint {
    pub fn fresh(config: TrainConfig, model: Model) -> Self {
        let velocity = Sgd::new(&model).velocity;
        Checkpoint {
            config,
            model,
            velocity,
            epoch: 0,
            best_acc: None,
            best_epoch: 0,
            stale: 0,
            stopped: false,
            log: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = self.model.names();
        let tensors = self.model.tensors();
        let header = Header {
            config: self.config.clone(),
            spec: self.model.spec.clone(),
            epoch: self.epoch,
            best_acc: self.best_acc,
            best_epoch: self.best_epoch,
            stale: self.stale,
            stopped: self.stopped,
            log: self.log.clone(),
            tensors: names
                .into_iter()
                .zip(&tensors)
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC.to_le_bytes());
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in tensors.into_iter().chain(&self.velocity) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.u32("magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CcsError::Parse {
                offset: 0,
                message: format!("bad checkpoint magic {magic:#010x}"),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CcsError::Parse {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let len = r.u64("header length")? as usize;
        let json = r.take(len, "header")?;
        let header: Header = serde_json::from_slice(json).map_err(|e| CcsError::Parse {
            offset: 16,
            message: format!("checkpoint header: {e}"),
        })?;
        let mut named = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            named.push((e.name.clone(), r.tensor(&e.shape, &e.name)?));
        }
        let mut velocity = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            velocity.push(r.tensor(&e.shape, &format!("velocity of {}", e.name))?);
        }
        if r.pos != buf.len() {
            return Err(CcsError::Integrity(format!(
                "{} trailing bytes after checkpoint payload",
                buf.len() - r.pos
            )));
        }
        let model = Model::from_named(header.spec, named)?;
        Ok(Checkpoint {
            config: header.config,
            model,
            velocity,
            epoch: header.epoch,
            best_acc: header.best_acc,
            best_epoch: header.best_epoch,
            stale: header.stale,
            stopped: header.stopped,
            log: header.log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
