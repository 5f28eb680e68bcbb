//! Versioned binary checkpoints: model config echo, training metadata, and
//! raw little-endian f32 parameter records. save -> load -> save is
//! byte-exact; loading validates the format version and every record's shape
//! against the freshly built model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Detector, DetectorConfig};
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"FFKD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Prefix under which every detector parameter is registered.
pub const MODEL_PREFIX: &str = "model";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    /// f64 so the JSON echo round-trips bit-exactly (serde parses floats via
    /// f64; an f32 field would double-round).
    pub train_loss: f64,
    pub val_map50: f64,
    pub seed: u64,
    /// Training mode string (rgb-only | thermal-only | fusion | distill).
    pub mode: String,
}

#[derive(Debug, Clone)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config: DetectorConfig,
    pub meta: CheckpointMeta,
    pub records: Vec<ParamRecord>,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_block(buf: &mut Vec<u8>, bytes: &[u8]) {
    push_u32(buf, bytes.len() as u32);
    buf.extend_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {} (wanted {n} more)",
                self.path, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn block(&mut self) -> Result<&'a [u8]> {
        let len = self.u32()? as usize;
        self.take(len)
    }
}

/// Serialize a parameter store with its config and metadata. Only entries
/// under the model prefix are stored: training-only auxiliaries (feature
/// adapters) stay out of the artifact.
pub fn save_checkpoint(store: &ParamStore, config: &DetectorConfig, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    push_block(&mut buf, serde_json::to_string(config)?.as_bytes());
    push_block(&mut buf, serde_json::to_string(meta)?.as_bytes());
    let entries: Vec<_> = store
        .entries()
        .filter(|(_, e)| e.name.starts_with(MODEL_PREFIX))
        .collect();
    push_u32(&mut buf, entries.len() as u32);
    for (_, e) in entries {
        push_block(&mut buf, e.name.as_bytes());
        buf.push(e.trainable as u8);
        push_u32(&mut buf, e.shape.len() as u32);
        for &d in &e.shape {
            push_u32(&mut buf, d as u32);
        }
        let mut data = Vec::with_capacity(e.data.len() * 4);
        for v in &e.data {
            data.extend_from_slice(&v.to_le_bytes());
        }
        push_block(&mut buf, &data);
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { buf: &raw, pos: 0, path: path.display().to_string() };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint (bad magic)", r.path)));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {version} unsupported (expected {CHECKPOINT_VERSION})",
            r.path
        )));
    }
    let config: DetectorConfig = serde_json::from_slice(r.block()?)?;
    let meta: CheckpointMeta = serde_json::from_slice(r.block()?)?;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8_lossy(r.block()?).into_owned();
        let trainable = r.take(1)?[0] != 0;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let data_bytes = r.block()?;
        let numel: usize = shape.iter().product();
        if data_bytes.len() != numel * 4 {
            return Err(Error::Checkpoint(format!(
                "{}: record `{name}` has {} bytes but shape {shape:?} needs {}",
                r.path,
                data_bytes.len(),
                numel * 4
            )));
        }
        let data = data_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(ParamRecord { name, shape, trainable, data });
    }
    Ok(Checkpoint { version, config, meta, records })
}

impl Checkpoint {
    /// Rebuild the detector from the embedded config and overwrite its
    /// parameters with the stored records. Any name/shape mismatch against
    /// the freshly built model is rejected, naming the offending record.
    pub fn restore(&self) -> Result<(ParamStore, Detector)> {
        let mut store = ParamStore::new(self.meta.seed);
        let det = Detector::build(&mut store, MODEL_PREFIX, self.config.clone())?;
        if store.len() != self.records.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} parameters but checkpoint stores {}",
                store.len(),
                self.records.len()
            )));
        }
        for rec in &self.records {
            let id = store
                .by_name(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter record `{}`", rec.name)))?;
            if store.get(id).shape != rec.shape {
                return Err(Error::Checkpoint(format!(
                    "record `{}` has shape {:?} but the model expects {:?}",
                    rec.name,
                    rec.shape,
                    store.get(id).shape
                )));
            }
            store.data_mut(id).copy_from_slice(&rec.data);
        }
        Ok((store, det))
    }
}
