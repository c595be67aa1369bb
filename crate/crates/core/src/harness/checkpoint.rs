//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SAMLAB01"
//! u32 entry count
//! per entry: u16 name length, UTF-8 name, u8 rank, rank × u32 dims, f64 data
//! u32 CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{ParamVector, Tensor};

pub const MAGIC: &[u8; 8] = b"SAMLAB01";
const FAMILY: &[u8; 6] = b"SAMLAB";

pub fn encode(params: &ParamVector) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 8 * params.total_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| {
            CheckpointError::Malformed(format!("name too long: {} bytes", name.len()))
        })?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| CheckpointError::Malformed(format!("rank {} of {name}", t.rank())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| CheckpointError::Malformed(format!("dimension {d} of {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
            }),
        }
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Parses a checkpoint. Structure is checked before the checksum, so a short
/// file reports truncation rather than a checksum mismatch.
pub fn decode(bytes: &[u8]) -> std::result::Result<ParamVector, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let head = r.take(MAGIC.len()).map_err(|_| {
        if bytes.len() < FAMILY.len() || &bytes[..FAMILY.len()] != FAMILY {
            CheckpointError::BadMagic
        } else {
            CheckpointError::Truncated {
                offset: 0,
                needed: MAGIC.len(),
            }
        }
    })?;
    if &head[..FAMILY.len()] != FAMILY {
        return Err(CheckpointError::BadMagic);
    }
    if head != MAGIC {
        return Err(CheckpointError::Version(
            String::from_utf8_lossy(&head[FAMILY.len()..]).into_owned(),
        ));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| {
                CheckpointError::Malformed(format!("shape {shape:?} of {name} overflows"))
            })?;
        let raw = r.take(n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        entries.push((name, tensor));
    }
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let sorted = entries.windows(2).all(|w| w[0].0 < w[1].0);
    if !sorted {
        return Err(CheckpointError::Malformed(
            "entries are not in strictly ascending name order".into(),
        ));
    }
    ParamVector::new(entries).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

pub fn save_checkpoint(params: &ParamVector, path: &Path) -> Result<()> {
    let bytes = encode(params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamVector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}
