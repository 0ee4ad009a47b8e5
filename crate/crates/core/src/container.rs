//! Little-endian binary containers shared by the on-disk formats.
//!
//! Every file starts with a 4-byte magic and a `u32` version, followed by a
//! format-specific header of `u32` fields and then raw `f32` arrays. There is
//! no padding and no trailing data.
//!
//! | magic  | contents                          |
//! |--------|-----------------------------------|
//! | `CTFV` | per-study visual features         |
//! | `CTPW` | MoE gate/experts + projection     |
//! | `CTLA` | one region's LoRA adapter         |
//! | `CTES` | exemplar embedding store          |

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("payload length mismatch: header implies {expected} bytes, found {actual}")]
    DimensionMismatch { expected: u64, actual: u64 },
    #[error("truncated payload: needed {needed} more bytes at offset {offset}")]
    TruncatedPayload { offset: usize, needed: usize },
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

/// Accumulates a container in memory; `finish` returns the bytes.
#[derive(Debug, Default)]
pub struct ContainerWriter {
    buf: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(magic: &[u8; 4]) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.put_u32(FORMAT_VERSION);
        w
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f32s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f32>) {
        for v in vals {
            self.put_f32(*v);
        }
    }

    /// `u32` byte length followed by UTF-8 bytes.
    pub fn put_str(&mut self, s: &str) -> Result<()> {
        let len = u32::try_from(s.len())
            .map_err(|_| FormatError::InvalidField(format!("string of {} bytes too long", s.len())))?;
        self.put_u32(len);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a container's bytes with bounds-checked reads.
#[derive(Debug)]
pub struct ContainerReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ContainerReader<'a> {
    /// Checks magic and version.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != magic {
            return Err(FormatError::MagicMismatch {
                expected: *magic,
                found: bytes[..bytes.len().min(4)].to_vec(),
            });
        }
        let mut r = Self { bytes, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::VersionUnsupported(version));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(FormatError::TruncatedPayload {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| FormatError::InvalidDims(format!("{n} floats overflow")))?;
        let b = self.take(len)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec())
            .map_err(|e| FormatError::InvalidField(format!("string is not UTF-8: {e}")))
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    /// Requires the payload from here on to be exactly `expected` bytes.
    pub fn expect_remaining(&self, expected: u64) -> Result<()> {
        let actual = self.remaining() as u64;
        if actual != expected {
            return Err(FormatError::DimensionMismatch { expected, actual });
        }
        Ok(())
    }

    /// Rejects trailing bytes.
    pub fn finish(self) -> Result<()> {
        self.expect_remaining(0)
    }
}

/// Product of dimensions as a byte count of `f32`s, checked for overflow.
pub fn f32_bytes(dims: &[usize]) -> Result<u64> {
    dims.iter()
        .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| FormatError::InvalidDims(format!("{dims:?} overflows")))
}

/// Writes to a sibling temp file and renames, so readers never observe a
/// half-written container.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("bin")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
