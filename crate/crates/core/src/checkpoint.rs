//! Checkpoint directories.
//!
//! * `weights.bin`: magic, format version, parameter count, then per
//!   parameter its name, shape and row-major little-endian `f32` values.
//! * `config.json`: the model configuration.
//! * `meta.json`: format and library versions, step, SHA-256 of
//!   `config.json`, optional metrics snapshot.
//! * `optimizer.bin` (optional): Adam step and moments, same record layout.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const META_FILE: &str = "meta.json";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
const WEIGHTS_MAGIC: &[u8; 8] = b"DVGNWTS\0";
const OPTIMIZER_MAGIC: &[u8; 8] = b"DVGNOPT\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub format_version: u32,
    pub library_version: String,
    pub step: u64,
    pub config_hash: String,
    pub metrics_snapshot: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<(String, Tensor<f32>)>,
    pub v: Vec<(String, Tensor<f32>)>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: ParamStore<f32>,
    pub step: u64,
    pub metrics_snapshot: Option<MetricsReport>,
    pub optimizer: Option<OptimizerState>,
}

pub fn config_hash(config_json: &[u8]) -> String {
    hex::encode(Sha256::digest(config_json))
}

fn write_records(out: &mut Vec<u8>, records: &[(&str, &Tensor<f32>)]) {
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint(format!("{} is truncated", self.what)));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::Checkpoint(format!("{} has a bad magic number", self.what)));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{} has format version {version}, expected {FORMAT_VERSION}",
                self.what
            )));
        }
        Ok(())
    }

    fn records(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("{} has a non-UTF-8 name", self.what)))?;
            let ndim = self.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| self.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = self
                .take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("record too large".into()))?)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        if !self.buf.is_empty() {
            return Err(Error::Checkpoint(format!("{} has trailing bytes", self.what)));
        }
        Ok(out)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

impl Checkpoint {
    pub fn new<T: Scalar>(config: ModelConfig, weights: &ParamStore<T>, step: u64) -> Self {
        Self {
            config,
            weights: weights.cast(),
            step,
            metrics_snapshot: None,
            optimizer: None,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let mut buf = WEIGHTS_MAGIC.to_vec();
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let records: Vec<_> = self.weights.iter().map(|(_, n, t)| (n, t)).collect();
        write_records(&mut buf, &records);
        write_file(&dir.join(WEIGHTS_FILE), &buf)?;

        let config_json = serde_json::to_string_pretty(&self.config)?;
        write_file(&dir.join(CONFIG_FILE), config_json.as_bytes())?;

        let meta = Meta {
            format_version: FORMAT_VERSION,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            step: self.step,
            config_hash: config_hash(config_json.as_bytes()),
            metrics_snapshot: self.metrics_snapshot.clone(),
        };
        write_file(&dir.join(META_FILE), serde_json::to_string_pretty(&meta)?.as_bytes())?;

        let opt_path = dir.join(OPTIMIZER_FILE);
        match &self.optimizer {
            Some(state) => {
                let mut buf = OPTIMIZER_MAGIC.to_vec();
                buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
                buf.extend_from_slice(&state.step.to_le_bytes());
                let names: Vec<_> = state
                    .m
                    .iter()
                    .map(|(n, t)| (format!("m.{n}"), t))
                    .chain(state.v.iter().map(|(n, t)| (format!("v.{n}"), t)))
                    .collect();
                let refs: Vec<_> = names.iter().map(|(n, t)| (n.as_str(), *t)).collect();
                write_records(&mut buf, &refs);
                write_file(&opt_path, &buf)?;
            }
            None if opt_path.exists() => {
                std::fs::remove_file(&opt_path).map_err(|e| Error::io(&opt_path, e))?;
            }
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_bytes = read_file(&dir.join(META_FILE))?;
        let meta: Meta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::Checkpoint(format!("corrupt {META_FILE}: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let config_bytes = read_file(&dir.join(CONFIG_FILE))?;
        if config_hash(&config_bytes) != meta.config_hash {
            return Err(Error::Checkpoint(format!(
                "{CONFIG_FILE} does not match the hash recorded in {META_FILE}"
            )));
        }
        let config: ModelConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| Error::Checkpoint(format!("corrupt {CONFIG_FILE}: {e}")))?;

        let bytes = read_file(&dir.join(WEIGHTS_FILE))?;
        let mut r = Reader {
            buf: &bytes,
            what: WEIGHTS_FILE,
        };
        r.header(WEIGHTS_MAGIC)?;
        let mut weights = ParamStore::new();
        for (name, t) in r.records()? {
            if weights.find(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
            weights.push(name, t, false);
        }

        let opt_path = dir.join(OPTIMIZER_FILE);
        let optimizer = if opt_path.exists() {
            let bytes = read_file(&opt_path)?;
            let mut r = Reader {
                buf: &bytes,
                what: OPTIMIZER_FILE,
            };
            r.header(OPTIMIZER_MAGIC)?;
            let step = r.u64()?;
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for (name, t) in r.records()? {
                match name.split_once('.') {
                    Some(("m", rest)) => m.push((rest.to_string(), t)),
                    Some(("v", rest)) => v.push((rest.to_string(), t)),
                    _ => return Err(Error::Checkpoint(format!("unexpected optimizer record {name}"))),
                }
            }
            Some(OptimizerState { step, m, v })
        } else {
            None
        };

        Ok(Self {
            config,
            weights,
            step: meta.step,
            metrics_snapshot: meta.metrics_snapshot,
            optimizer,
        })
    }
}
