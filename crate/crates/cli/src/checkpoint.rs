//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ADABCKPT"  u32 version  u32 reserved          16-byte header
//! u32 len, run id (UTF-8)
//! [u8; 32] config hash (SHA-256)
//! u32 segment count, then per segment: u32 len, name, u64 offset, u64 len
//! u64 value count, then f64 values
//! ```

use std::path::Path;

use adabatch::{ParamVector, Segment};

pub const MAGIC: &[u8; 8] = b"ADABCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after checkpoint data")]
    Trailing(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run_id: String,
    pub config_hash: [u8; 32],
    pub params: ParamVector,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Malformed("length overflows usize".into()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("string is not UTF-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let values = self.params.values();
        let mut out = Vec::with_capacity(64 + 8 * values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        put_str(&mut out, &self.run_id);
        out.extend_from_slice(&self.config_hash);
        let segs = self.params.segments();
        out.extend_from_slice(&(segs.len() as u32).to_le_bytes());
        for s in segs {
            put_str(&mut out, &s.name);
            out.extend_from_slice(&(s.offset as u64).to_le_bytes());
            out.extend_from_slice(&(s.len as u64).to_le_bytes());
        }
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).map_err(|_| CheckpointError::Magic)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        r.u32()?;
        let run_id = r.string()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut segments = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let offset = r.usize()?;
            let len = r.usize()?;
            segments.push(Segment { name, offset, len });
        }
        let n = r.usize()?;
        if n > (buf.len() - r.pos) / 8 {
            return Err(CheckpointError::Truncated(buf.len()));
        }
        let values = (0..n)
            .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect::<Result<Vec<_>, _>>()?;
        if r.pos != buf.len() {
            return Err(CheckpointError::Trailing(buf.len() - r.pos));
        }
        let params = ParamVector::new(values, segments).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok(Self { run_id, config_hash, params })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.config_hash)
    }
}

/// Parses a 64-character hex SHA-256 digest.
pub fn hash_bytes(hex_digest: &str) -> Option<[u8; 32]> {
    hex::decode(hex_digest).ok()?.try_into().ok()
}
