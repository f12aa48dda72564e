//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IVGCKPT\0"  u32 version  u8 dtype-width  [32] config hash
//! u32 len + config text (utf-8)
//! u64 step  u8 diverged
//! u32 count, then per counter:  u16 len + name, u64 value
//! u32 count, then per tensor:   u16 len + name, u8 rank, u32 extents, payload
//! "END\0"
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::{Dtype, Scalar, Tensor};

use super::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"IVGCKPT\0";
pub const VERSION: u32 = 1;
const END: &[u8; 4] = b"END\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config_text: String,
    pub config_hash: [u8; 32],
    pub step: u64,
    pub diverged: bool,
    pub counters: Vec<(String, u64)>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn counter(&self, name: &str) -> Option<u64> {
        self.counters.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.push(self.diverged as u8);
        let name = |out: &mut Vec<u8>, n: &str| {
            out.extend_from_slice(&(n.len() as u16).to_le_bytes());
            out.extend_from_slice(n.as_bytes());
        };
        out.extend_from_slice(&(self.counters.len() as u32).to_le_bytes());
        for (n, v) in &self.counters {
            name(&mut out, n);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (n, t) in &self.tensors {
            name(&mut out, n);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out.extend_from_slice(END);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(HarnessError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(HarnessError::Checkpoint(format!("version {version}, this build reads {VERSION}")));
        }
        let dtype = Dtype::from_code(r.take(1)?[0]).ok_or_else(|| HarnessError::Checkpoint("unknown dtype".into()))?;
        if dtype != T::DTYPE {
            return Err(HarnessError::Checkpoint(format!("payload is {}, expected {}", dtype.name(), T::DTYPE.name())));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| HarnessError::Checkpoint("config is not utf-8".into()))?;
        let step = r.u64()?;
        let diverged = r.take(1)?[0] != 0;
        let counters = (0..r.u32()?).map(|_| Ok((r.name()?, r.u64()?))).collect::<Result<Vec<_>>>()?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let n = r.name()?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| HarnessError::Checkpoint("extent overflow".into()))?;
            let width = T::DTYPE.code() as usize;
            let payload = r.take(len.checked_mul(width).ok_or_else(|| HarnessError::Checkpoint("extent overflow".into()))?)?;
            let data = payload.chunks_exact(width).map(T::read_le).collect();
            let t = Tensor::new(shape, data).map_err(|e| HarnessError::Checkpoint(format!("tensor {n}: {e}")))?;
            tensors.push((n, t));
        }
        if r.take(4)? != END || r.pos != bytes.len() {
            return Err(HarnessError::Checkpoint("missing end marker or trailing bytes".into()));
        }
        Ok(Self { config_text, config_hash, step, diverged, counters, tensors })
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves a
    /// half-written file under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Width tag of a checkpoint file, read from its header.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let mut head = [0u8; 13];
    io::Read::read_exact(&mut fs::File::open(path)?, &mut head).map_err(|_| HarnessError::Checkpoint("truncated header".into()))?;
    if &head[..8] != MAGIC {
        return Err(HarnessError::Checkpoint("bad magic".into()));
    }
    Dtype::from_code(head[12]).ok_or_else(|| HarnessError::Checkpoint("unknown dtype".into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| HarnessError::Checkpoint("truncated".into()))?;
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

    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| HarnessError::Checkpoint("name is not utf-8".into()))
    }
}
