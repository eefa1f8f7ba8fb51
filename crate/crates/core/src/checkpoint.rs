//! Binary model checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! b"DAFSCKPT" | version: u32 | entry count: u32
//! per entry: name length: u32 | name (UTF-8) | rank: u32 | dims: u64 * rank
//!            | value count: u64 | values: f64 * count
//! ```
//!
//! Entries hold every stored parameter (frozen ones included) followed by
//! the batch-norm running statistics.

use std::fs;
use std::path::Path;

use dafss_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 8] = b"DAFSCKPT";
pub const VERSION: u32 = 1;

const RUNNING_MEAN: &str = "sam.merge.bn.running_mean";
const RUNNING_VAR: &str = "sam.merge.bn.running_var";

fn entries(model: &Model) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect();
    let running = &model.sam.merge.running;
    out.push((RUNNING_MEAN.into(), Tensor::vector(running.mean.clone())));
    out.push((RUNNING_VAR.into(), Tensor::vector(running.var.clone())));
    out
}

pub fn encode(model: &Model) -> Vec<u8> {
    let entries = entries(model);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CoreError::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(CoreError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| CoreError::Checkpoint(format!("entry name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = r.u64("value count")? as usize;
        let raw = r.take(n.saturating_mul(8), &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| CoreError::Checkpoint(format!("entry `{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CoreError::Checkpoint(format!(
            "{} trailing bytes after the last entry",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| CoreError::io(path, e))
}

/// Overwrites the values of `model` with the checkpoint's. Every entry must
/// match a parameter of the same name and shape, and every parameter must
/// be present.
pub fn restore(model: &mut Model, bytes: &[u8]) -> Result<()> {
    let entries = decode(bytes)?;
    let expected = self::entries(model);
    if entries.len() != expected.len() {
        return Err(CoreError::Checkpoint(format!(
            "checkpoint has {} entries, model expects {}",
            entries.len(),
            expected.len()
        )));
    }
    for ((name, t), (want_name, want)) in entries.iter().zip(&expected) {
        if name != want_name || t.shape() != want.shape() {
            return Err(CoreError::Checkpoint(format!(
                "entry `{name}` {:?} does not match model parameter `{want_name}` {:?}",
                t.shape(),
                want.shape()
            )));
        }
    }
    for (name, t) in entries {
        match name.as_str() {
            RUNNING_MEAN => model.sam.merge.running.mean = t.into_data(),
            RUNNING_VAR => model.sam.merge.running.var = t.into_data(),
            _ => {
                let id = model.store.find(&name).expect("checked above");
                *model.store.value_mut(id) = t;
            }
        }
    }
    Ok(())
}

pub fn load(model: &mut Model, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    restore(model, &bytes)
}
