//! Versioned binary container for a student and optional teacher.
//!
//! Layout (little-endian): magic `C2FCKPT`, `u32` version, 32-byte SHA-256
//! of the config JSON, `u64` length + config JSON, `u8` EMA flag (then
//! `f64` alpha and `u64` step), `u64` entry count, then per entry `u64`
//! name length + name, `u64` rank, `u64` dims and raw `f32` data. Teacher
//! entries carry an `ema.` prefix. Nothing time-dependent is stored.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmaState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{C2FNet, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"C2FCKPT";
pub const FORMAT_VERSION: u32 = 1;
const TEACHER_PREFIX: &str = "ema.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub ema: Option<EmaState>,
    pub train_config: Option<TrainConfig>,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_entries(buf: &mut Vec<u8>, prefix: &str, params: &ModelParams) {
    for (name, t) in params.iter() {
        let full = format!("{prefix}{name}");
        put_u64(buf, full.len() as u64);
        buf.extend_from_slice(full.as_bytes());
        put_u64(buf, t.rank() as u64);
        for &d in t.shape() {
            put_u64(buf, d as u64);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(params: &ModelParams, ema: Option<&EmaState>, config: Option<&TrainConfig>) -> Result<Vec<u8>> {
    if let Some(e) = ema {
        params.check_compatible(&e.teacher)?;
    }
    let header = serde_json::to_vec(&Header {
        model: *params.config(),
        train: config.cloned(),
    })
    .expect("header serialises");
    let mut buf = Vec::with_capacity(64 + params.scalar_count() * 4 * (1 + ema.is_some() as usize));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&Sha256::digest(&header));
    put_u64(&mut buf, header.len() as u64);
    buf.extend_from_slice(&header);
    match ema {
        Some(e) => {
            buf.push(1);
            buf.extend_from_slice(&e.alpha.to_le_bytes());
            put_u64(&mut buf, e.step);
        }
        None => buf.push(0),
    }
    put_u64(&mut buf, (params.len() * (1 + ema.is_some() as usize)) as u64);
    put_entries(&mut buf, "", params);
    if let Some(e) = ema {
        put_entries(&mut buf, TEACHER_PREFIX, &e.teacher);
    }
    Ok(buf)
}

pub fn save_checkpoint(params: &ModelParams, ema: Option<&EmaState>, config: Option<&TrainConfig>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, ema, config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        // Any length larger than the remaining bytes is corrupt.
        if v > (self.buf.len() - self.pos) as u64 {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        Ok(v as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let digest = r.take(32, "config digest")?.to_vec();
    let header_len = r.len("config length")?;
    let header_bytes = r.take(header_len, "config")?;
    if Sha256::digest(header_bytes).as_slice() != digest.as_slice() {
        return Err(Error::Checkpoint("config digest mismatch".into()));
    }
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let ema_meta = match r.take(1, "EMA flag")?[0] {
        0 => None,
        1 => {
            let alpha = f64::from_le_bytes(r.take(8, "EMA alpha")?.try_into().expect("8 bytes"));
            Some((alpha, r.u64("EMA step")?))
        }
        f => return Err(Error::Checkpoint(format!("bad EMA flag {f}"))),
    };

    let count = r.u64("entry count")?;
    let mut student = BTreeMap::new();
    let mut teacher = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.len("entry name")?;
        let name = std::str::from_utf8(r.take(name_len, "entry name")?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.len(&format!("rank of {name}"))?;
        let shape = (0..rank)
            .map(|_| r.u64(&format!("shape of {name}")).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("entry {name}: absurd shape {shape:?}")))?;
        let raw = r.take(n, &format!("data of {name}"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::from_vec(&shape, data);
        let (map, key) = match name.strip_prefix(TEACHER_PREFIX) {
            Some(rest) => (&mut teacher, rest.to_string()),
            None => (&mut student, name.clone()),
        };
        if map.insert(key, t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let params = ModelParams::from_entries(header.model, student);
    check_layout(&params, &header.model)?;
    let ema = match ema_meta {
        Some((alpha, step)) => {
            let teacher = ModelParams::from_entries(header.model, teacher);
            params
                .check_compatible(&teacher)
                .map_err(|e| Error::Checkpoint(format!("teacher: {e}")))?;
            Some(EmaState { teacher, alpha, step })
        }
        None if !teacher.is_empty() => return Err(Error::Checkpoint("teacher entries without EMA flag".into())),
        None => None,
    };
    Ok(Checkpoint {
        params,
        ema,
        train_config: header.train,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Errors, naming the first offending entry, unless `params` has exactly
/// the layout a network built from `config` expects.
pub fn check_layout(params: &ModelParams, config: &ModelConfig) -> Result<()> {
    let reference = C2FNet::new(*config)?.init_params(0)?;
    for (name, t) in reference.iter() {
        match params.get(name) {
            None => return Err(Error::Checkpoint(format!("entry {name} missing"))),
            Some(p) if p.shape() != t.shape() => {
                return Err(Error::Checkpoint(format!(
                    "entry {name}: checkpoint shape {:?}, model expects {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = params.names().find(|n| reference.get(n).is_none()) {
        return Err(Error::Checkpoint(format!("unexpected entry {extra}")));
    }
    Ok(())
}

impl Checkpoint {
    /// Checks the stored parameters against a network configuration and
    /// returns them relabelled with that configuration.
    pub fn params_for(&self, config: &ModelConfig) -> Result<ModelParams> {
        check_layout(&self.params, config)?;
        Ok(self.params.clone().with_config(*config))
    }

    /// Like [`Self::params_for`] for the stored EMA teacher.
    pub fn teacher_for(&self, config: &ModelConfig) -> Result<ModelParams> {
        let ema = self
            .ema
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no teacher".into()))?;
        check_layout(&ema.teacher, config)?;
        Ok(ema.teacher.clone().with_config(*config))
    }
}
