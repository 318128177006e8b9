//! Binary checkpoints: every named parameter tensor, the optimizer
//! state, run metadata, and a trailing integrity checksum in one file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PVGC"                       magic
//! u32   format version (1)
//! u64   config text length, then that many UTF-8 bytes
//! u64   epoch
//! u64   rng seed (all random streams are derived from it, so no
//!       generator position needs to be stored)
//! u64   tensor count, then per tensor:
//!         u64 name length, name bytes, u8 trainable flag,
//!         u64 rank, rank x u64 extents, numel x f64 values
//! u64   optimizer step
//! u64   moment-pair count, then per trainable tensor in table order:
//!         numel x f64 first moments, numel x f64 second moments
//! 32 bytes sha256 of everything above
//! ```
//!
//! Values are stored as f64 regardless of the in-memory scalar type;
//! f32 weights survive the round trip bitwise.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::OptState;
use crate::params::ParamSet;
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PVGC";
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// A decoded checkpoint. `moments` holds (first, second) AdamW
/// accumulators for each trainable tensor, in table order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: u64,
    pub seed: u64,
    pub tensors: Vec<TensorRecord>,
    pub opt_step: u64,
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
}

pub fn encode<T: Scalar>(
    params: &ParamSet<T>,
    opt: &OptState<T>,
    config_text: &str,
    epoch: u64,
    seed: u64,
) -> Result<Vec<u8>> {
    let trainable = params.trainable_ids();
    if opt.slots.len() != trainable.len() || opt.slots.iter().zip(&trainable).any(|(s, id)| s.0 != *id) {
        return Err(Error::contract("checkpoint", "optimizer state does not align with the parameter set"));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());
    buf.extend_from_slice(&epoch.to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());

    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for id in params.ids() {
        let name = params.name(id);
        let value = params.value(id);
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(params.is_trainable(id) as u8);
        buf.extend_from_slice(&(value.rank() as u64).to_le_bytes());
        for &e in value.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in value.data() {
            buf.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }

    buf.extend_from_slice(&opt.step.to_le_bytes());
    buf.extend_from_slice(&(opt.slots.len() as u64).to_le_bytes());
    for (_, m, v) in &opt.slots {
        for &x in m {
            buf.extend_from_slice(&x.to_f64().to_le_bytes());
        }
        for &x in v {
            buf.extend_from_slice(&x.to_f64().to_le_bytes());
        }
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CheckpointTruncated(format!(
                "file ends inside {what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// A u64 that must also fit this machine's usize and never exceed
    /// the bytes remaining, so corrupted counts fail before allocating.
    fn count(&mut self, what: &str, item_bytes: usize) -> Result<usize> {
        let raw = self.u64(what)?;
        let n = usize::try_from(raw).map_err(|_| Error::CheckpointFormat(format!("{what} {raw} is out of range")))?;
        if item_bytes > 0 && n > (self.buf.len() - self.pos) / item_bytes {
            return Err(Error::CheckpointTruncated(format!(
                "{what} {n} needs {} bytes, {} left",
                n * item_bytes,
                self.buf.len() - self.pos
            )));
        }
        Ok(n)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(Error::CheckpointTruncated(format!(
            "file is {} bytes, shorter than the fixed header and checksum",
            bytes.len()
        )));
    }
    let (body, stored_sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let mut r = Reader { buf: body, pos: 0 };

    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CheckpointFormat("missing PVGC magic; not a checkpoint file".to_string()));
    }
    let version = r.u32("format version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }

    let config_len = r.count("config length", 1)?;
    let config_text = std::str::from_utf8(r.take(config_len, "config text")?)
        .map_err(|_| Error::CheckpointFormat("config text is not valid UTF-8".to_string()))?
        .to_string();
    let epoch = r.u64("epoch")?;
    let seed = r.u64("seed")?;

    let tensor_count = r.count("tensor count", 8)?;
    let mut tensors = Vec::with_capacity(tensor_count);
    for i in 0..tensor_count {
        let ctx = format!("tensor {i}");
        let name_len = r.count(&format!("{ctx} name length"), 1)?;
        let name = std::str::from_utf8(r.take(name_len, &format!("{ctx} name"))?)
            .map_err(|_| Error::CheckpointFormat(format!("{ctx} name is not valid UTF-8")))?
            .to_string();
        let trainable = match r.u8(&format!("{ctx} trainable flag"))? {
            0 => false,
            1 => true,
            other => return Err(Error::CheckpointFormat(format!("{ctx} trainable flag is {other}, not 0 or 1"))),
        };
        let rank = r.count(&format!("{ctx} rank"), 8)?;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for a in 0..rank {
            let e = r.count(&format!("{ctx} extent {a}"), 0)?;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| Error::CheckpointFormat(format!("{ctx} extents overflow: {shape:?} x {e}")))?;
            shape.push(e);
        }
        if numel > (body.len() - r.pos) / 8 {
            return Err(Error::CheckpointTruncated(format!(
                "{ctx} claims {numel} values, only {} bytes left",
                body.len() - r.pos
            )));
        }
        let values = r.f64s(numel, &format!("{ctx} values"))?;
        if tensors.iter().any(|t: &TensorRecord| t.name == name) {
            return Err(Error::CheckpointFormat(format!("duplicate tensor name {name:?}")));
        }
        tensors.push(TensorRecord { name, trainable, shape, values });
    }

    let opt_step = r.u64("optimizer step")?;
    let moment_count = r.count("moment-pair count", 0)?;
    let trainable: Vec<&TensorRecord> = tensors.iter().filter(|t| t.trainable).collect();
    if moment_count != trainable.len() {
        return Err(Error::CheckpointFormat(format!(
            "{moment_count} moment pairs for {} trainable tensors",
            trainable.len()
        )));
    }
    let mut moments = Vec::with_capacity(moment_count);
    for t in &trainable {
        let n = t.values.len();
        let m = r.f64s(n, &format!("first moments of {}", t.name))?;
        let v = r.f64s(n, &format!("second moments of {}", t.name))?;
        moments.push((m, v));
    }

    if r.pos != body.len() {
        return Err(Error::CheckpointFormat(format!("{} unexpected bytes after the optimizer state", body.len() - r.pos)));
    }
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_sum {
        return Err(Error::CheckpointChecksum);
    }

    Ok(Checkpoint { config_text, epoch, seed, tensors, opt_step, moments })
}

impl Checkpoint {
    /// Copies the stored tensors and optimizer state into `params`.
    /// The checkpoint must describe exactly the same parameter set:
    /// same names, shapes, and trainable flags.
    pub fn apply<T: Scalar>(&self, params: &mut ParamSet<T>) -> Result<OptState<T>> {
        if self.tensors.len() != params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} tensors, model has {} parameters",
                self.tensors.len(),
                params.len()
            )));
        }
        let ids: Vec<_> = params.ids().collect();
        for (record, &id) in self.tensors.iter().zip(&ids) {
            let name = params.name(id);
            if record.name != name {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {:?} in checkpoint where model expects {:?}",
                    record.name, name
                )));
            }
            if record.shape != params.value(id).shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name} has shape {:?} in checkpoint, {:?} in model",
                    record.shape,
                    params.value(id).shape()
                )));
            }
            if record.trainable != params.is_trainable(id) {
                return Err(Error::CheckpointMismatch(format!(
                    "{name} trainable flag is {} in checkpoint, {} in model",
                    record.trainable,
                    params.is_trainable(id)
                )));
            }
        }
        for (record, &id) in self.tensors.iter().zip(&ids) {
            params.set_data(id, record.values.iter().map(|&v| T::from_f64(v)).collect())?;
        }
        let slots = params
            .trainable_ids()
            .into_iter()
            .zip(&self.moments)
            .map(|(id, (m, v))| {
                (id, m.iter().map(|&x| T::from_f64(x)).collect(), v.iter().map(|&x| T::from_f64(x)).collect())
            })
            .collect();
        Ok(OptState { step: self.opt_step, slots })
    }
}

pub fn save<T: Scalar>(
    path: &Path,
    params: &ParamSet<T>,
    opt: &OptState<T>,
    config_text: &str,
    epoch: u64,
    seed: u64,
) -> Result<()> {
    let bytes = encode(params, opt, config_text, epoch, seed)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
