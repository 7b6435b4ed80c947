//! On-disk and on-wire formats. All integers and floats are little-endian
//! and fixed width; see `docs/PROTOCOL.md` for the byte-level layout.

mod block;
mod bundle;
mod message;
mod snapshot;
mod transport;

use std::path::Path;

use thiserror::Error;

use crate::partition::{StreamPlan, PLAN_SCHEMA_VERSION};

pub use block::{block_len, decode_block, encode_block, read_block, write_block};
pub use bundle::{decode_bundle, encode_bundle, read_bundle, write_bundle, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use message::{
    decode_message, encode_message, AckStatus, Message, MessageKind, Settings, MAX_PAYLOAD,
    UPLOAD_FRAMING_BYTES,
};
pub use snapshot::{decode_model, encode_model, read_model, write_model, MODEL_MAGIC};
pub use transport::{channel_pair, ChannelTransport, StreamTransport, Transport};

/// Problems with the contents of a file, annotated with the byte offset at
/// which they were detected.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic {found:?} at offset 0")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {version} at offset {offset}")]
    VersionUnsupported { offset: usize, version: u32 },
    #[error("truncated input: needed {needed} more byte(s) at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("label {label} at offset {offset} is not a declared class")]
    UndeclaredLabel { offset: usize, label: u64 },
    #[error("non-finite value at ({row}, {col}), offset {offset}")]
    NonFinite { offset: usize, row: usize, col: usize },
    #[error("{count} trailing byte(s) at offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("invalid content at offset {offset}: {detail}")]
    Invalid { offset: usize, detail: String },
}

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: String, source: FormatError },
    #[error("{path}: {detail}")]
    Plan { path: String, detail: String },
}

/// Protocol-level failures.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("truncated frame: needed {needed} more byte(s) at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("length prefix says {declared} payload byte(s), frame carries {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("payload of {0} bytes exceeds the frame limit")]
    TooLarge(usize),
    #[error("unexpected message: expected {expected}, got {got}")]
    Unexpected { expected: &'static str, got: &'static str },
    #[error("connection closed")]
    Closed,
    #[error("transport error: {0}")]
    Io(String),
}

impl From<FormatError> for ProtocolError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Truncated { offset, needed } => ProtocolError::Truncated { offset, needed },
            other => ProtocolError::Malformed(other.to_string()),
        }
    }
}

/// Bounds-checked little-endian cursor.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated { offset: self.pos, needed: n - self.remaining() });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// A `u64` count that must fit in memory as `count · elem_size` bytes of
    /// what is left in the buffer.
    pub(crate) fn count(&mut self, elem_size: usize) -> Result<usize, FormatError> {
        let at = self.pos;
        let raw = self.u64()?;
        let n = usize::try_from(raw).map_err(|_| FormatError::Invalid {
            offset: at,
            detail: format!("count {raw} does not fit in memory"),
        })?;
        match n.checked_mul(elem_size) {
            Some(bytes) if bytes <= self.remaining() => Ok(n),
            Some(bytes) => Err(FormatError::Truncated { offset: self.pos, needed: bytes - self.remaining() }),
            None => Err(FormatError::Invalid { offset: at, detail: format!("count {raw} overflows") }),
        }
    }

    pub(crate) fn finish(&self) -> Result<(), FormatError> {
        if self.remaining() > 0 {
            return Err(FormatError::TrailingBytes { offset: self.pos, count: self.remaining() });
        }
        Ok(())
    }
}

pub fn write_plan(plan: &StreamPlan, path: &Path) -> Result<(), FileError> {
    std::fs::write(path, plan.to_json())
        .map_err(|source| FileError::Io { path: path.display().to_string(), source })
}

pub fn read_plan(path: &Path) -> Result<StreamPlan, FileError> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| FileError::Io { path: p.clone(), source })?;
    let plan = StreamPlan::from_json(&text).map_err(|e| FileError::Plan { path: p.clone(), detail: e.to_string() })?;
    if plan.schema_version != PLAN_SCHEMA_VERSION {
        return Err(FileError::Plan {
            path: p,
            detail: format!("unsupported plan schema version {}", plan.schema_version),
        });
    }
    Ok(plan)
}
