//! Named-tensor container used for checkpoints and feature ingestion.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SESA" | version: u32 | record*
//! record := name_len: u32 | name: [u8; name_len] (UTF-8)
//!         | rank: u32 | extents: [u64; rank] | values: [f64; product(extents)]
//! ```
//!
//! Records run to end of file. Names must be unique.

use std::io::{self, Write};

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"SESA";
pub const VERSION: u32 = 1;

const MAX_RANK: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("container version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt container at byte {offset}: {detail}")]
    Corrupt { offset: usize, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Ordered list of named tensors.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn write_container<W: Write>(mut out: W, tensors: &[(String, Tensor)]) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContainerError> {
        if self.bytes.len() - self.pos < n {
            return Err(ContainerError::Corrupt {
                offset: self.pos,
                detail: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn corrupt(&self, offset: usize, detail: impl Into<String>) -> ContainerError {
        ContainerError::Corrupt { offset, detail: detail.into() }
    }
}

pub fn read_container(bytes: &[u8]) -> Result<NamedTensors, ContainerError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ContainerError::BadMagic(bytes.iter().take(4).copied().collect()));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(ContainerError::VersionMismatch { found: version, expected: VERSION });
    }
    let mut out: NamedTensors = Vec::new();
    while cur.pos < bytes.len() {
        let record_start = cur.pos;
        let name_len = cur.u32("name length")? as usize;
        let name_at = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| cur.corrupt(name_at, "name is not UTF-8"))?
            .to_string();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(cur.corrupt(record_start, format!("duplicate tensor name {name:?}")));
        }
        let rank_at = cur.pos;
        let rank = cur.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(cur.corrupt(rank_at, format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let at = cur.pos;
            let d = cur.u64("extent")?;
            let d = usize::try_from(d).ok().filter(|&d| d > 0).ok_or_else(|| cur.corrupt(at, format!("bad extent {d}")))?;
            count = count.checked_mul(d).ok_or_else(|| cur.corrupt(at, "element count overflows"))?;
            shape.push(d);
        }
        let bytes_needed = count.checked_mul(8).ok_or_else(|| cur.corrupt(cur.pos, "byte count overflows"))?;
        let raw = cur.take(bytes_needed, "tensor data")?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| cur.corrupt(record_start, e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}
