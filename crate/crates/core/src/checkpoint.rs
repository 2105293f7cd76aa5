//! Versioned binary checkpoints with per-tensor CRC32 checksums.
//!
//! Layout (little endian): magic `SIAC`, version `u16`, then sections for
//! config text, vocabulary, counters, best metric, RNG streams, parameters
//! and optimizer moments. Every tensor payload carries its own CRC32 and the
//! file ends with a CRC32 of everything before it.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, TrainConfig};
use crate::dataset::write_atomic;
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"SIAC";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is newer than supported version {supported}")]
    NewerVersion { found: u16, supported: u16 },
    #[error("checksum mismatch in {what}")]
    Checksum { what: String },
    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("checkpoint stores {found}-byte reals, this build uses {expected}-byte reals")]
    Precision { found: u8, expected: u8 },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("parameter mismatch: {0}")]
    Parameters(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestMetric {
    pub key: String,
    pub value: Real,
    pub epoch: usize,
}

/// Position of one named ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub name: String,
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    /// Completed epochs of `config.stage`.
    pub epoch: usize,
    pub step: u64,
    pub best: Option<BestMetric>,
    pub rng: Vec<RngState>,
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn params_from_store(store: &ParamStore) -> Vec<(String, Tensor)> {
        store
            .iter()
            .map(|(_, p)| (p.name.clone(), Tensor::new(p.tensor.shape(), p.tensor.data().to_vec()).expect("valid shape")))
            .collect()
    }

    /// Copies stored values into `store`; names and shapes must match exactly.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        if self.params.len() != store.len() {
            return Err(CheckpointError::Parameters(format!("checkpoint has {} tensors, model has {}", self.params.len(), store.len())));
        }
        for (name, t) in &self.params {
            let id = store.id(name).ok_or_else(|| CheckpointError::Parameters(format!("unknown tensor {name}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(CheckpointError::Parameters(format!(
                    "{name}: shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set_data(id, t.data()).map_err(|e| CheckpointError::Parameters(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u16(&mut w, VERSION);
        w.push(std::mem::size_of::<Real>() as u8);
        put_bytes(&mut w, self.config.to_text().as_bytes());
        put_bytes(&mut w, self.vocab.join("\n").as_bytes());
        put_u64(&mut w, self.epoch as u64);
        put_u64(&mut w, self.step);
        match &self.best {
            None => w.push(0),
            Some(b) => {
                w.push(1);
                put_bytes(&mut w, b.key.as_bytes());
                put_real(&mut w, b.value);
                put_u64(&mut w, b.epoch as u64);
            }
        }
        put_u32(&mut w, self.rng.len() as u32);
        for r in &self.rng {
            put_bytes(&mut w, r.name.as_bytes());
            put_u64(&mut w, r.seed);
            put_u64(&mut w, r.stream);
            w.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        put_u32(&mut w, self.params.len() as u32);
        for (name, t) in &self.params {
            put_bytes(&mut w, name.as_bytes());
            w.push(t.rank() as u8);
            t.shape().iter().for_each(|d| put_u32(&mut w, *d as u32));
            put_tensor(&mut w, t.data());
        }
        match &self.adam {
            None => w.push(0),
            Some(a) => {
                w.push(1);
                put_u32(&mut w, a.steps.len() as u32);
                for i in 0..a.steps.len() {
                    put_u64(&mut w, a.steps[i]);
                    put_tensor(&mut w, &a.first[i]);
                    put_tensor(&mut w, &a.second[i]);
                }
            }
        }
        let crc = crc32fast::hash(&w);
        put_u32(&mut w, crc);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() >= 6 {
            let v = u16::from_le_bytes([bytes[4], bytes[5]]);
            if v > VERSION {
                return Err(CheckpointError::NewerVersion { found: v, supported: VERSION });
            }
        }
        if bytes.len() < 10 {
            return Err(CheckpointError::Checksum { what: "file".into() });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(CheckpointError::Checksum { what: "file".into() });
        }
        let mut r = Cursor { buf: body, pos: 6 };
        let width = r.u8()?;
        if width as usize != std::mem::size_of::<Real>() {
            return Err(CheckpointError::Precision { found: width, expected: std::mem::size_of::<Real>() as u8 });
        }
        let config = TrainConfig::parse(&r.string()?)?;
        let vocab_text = r.string()?;
        let vocab = if vocab_text.is_empty() { vec![] } else { vocab_text.split('\n').map(str::to_string).collect() };
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let best = match r.u8()? {
            0 => None,
            _ => Some(BestMetric { key: r.string()?, value: r.real()?, epoch: r.u64()? as usize }),
        };
        let n_rng = r.u32()? as usize;
        let mut rng = Vec::with_capacity(n_rng.min(64));
        for _ in 0..n_rng {
            let name = r.string()?;
            let seed = r.u64()?;
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            rng.push(RngState { name, seed, stream, word_pos });
        }
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params.min(1 << 16));
        for _ in 0..n_params {
            let name = r.string()?;
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let data = r.tensor(&name)?;
            let at = r.pos;
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed { offset: at, reason: e.to_string() })?;
            params.push((name, t));
        }
        let adam = match r.u8()? {
            0 => None,
            _ => {
                let n = r.u32()? as usize;
                let mut a = AdamState::default();
                for i in 0..n {
                    a.steps.push(r.u64()?);
                    a.first.push(r.tensor(&format!("adam.first[{i}]"))?);
                    a.second.push(r.tensor(&format!("adam.second[{i}]"))?);
                }
                Some(a)
            }
        };
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed { offset: r.pos, reason: "trailing bytes".into() });
        }
        Ok(Checkpoint { config, vocab, epoch, step, best, rng, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

fn put_u16(w: &mut Vec<u8>, v: u16) {
    w.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}
fn put_real(w: &mut Vec<u8>, v: Real) {
    w.extend_from_slice(&v.to_le_bytes());
}
fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    put_u32(w, b.len() as u32);
    w.extend_from_slice(b);
}
fn put_tensor(w: &mut Vec<u8>, data: &[Real]) {
    let start = w.len() + 4;
    put_u32(w, data.len() as u32);
    data.iter().for_each(|x| put_real(w, *x));
    let crc = crc32fast::hash(&w[start..]);
    put_u32(w, crc);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Malformed { offset: self.pos, reason: format!("need {n} bytes") });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn real(&mut self) -> Result<Real, CheckpointError> {
        const W: usize = std::mem::size_of::<Real>();
        Ok(Real::from_le_bytes(self.take(W)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed { offset: at, reason: "invalid utf-8".into() })
    }
    fn tensor(&mut self, what: &str) -> Result<Vec<Real>, CheckpointError> {
        let start = self.pos;
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(std::mem::size_of::<Real>()).unwrap_or(usize::MAX))?;
        let stored = self.u32()?;
        if crc32fast::hash(raw) != stored {
            return Err(CheckpointError::Checksum { what: what.to_string() });
        }
        let _ = start;
        Ok(raw.chunks(std::mem::size_of::<Real>()).map(|c| Real::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
