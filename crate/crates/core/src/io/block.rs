//! Matrix block: `rows: u64 | cols: u64 | rows·cols f64`, row-major.

use std::path::Path;

use super::{ByteReader, FileError, FormatError};
use crate::linalg::Matrix;

/// Serialized size of an `rows × cols` block.
pub fn block_len(rows: usize, cols: usize) -> usize {
    16 + 8 * rows * cols
}

pub fn encode_block(m: &Matrix, out: &mut Vec<u8>) {
    out.reserve(block_len(m.rows(), m.cols()));
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_matrix(r: &mut ByteReader<'_>) -> Result<Matrix, FormatError> {
    let at = r.offset();
    let rows = r.u64()?;
    let cols = r.u64()?;
    let len = rows.checked_mul(cols).and_then(|n| usize::try_from(n).ok()).ok_or_else(|| {
        FormatError::Invalid { offset: at, detail: format!("block shape {rows}x{cols} overflows") }
    })?;
    let (rows, cols) = (rows as usize, cols as usize);
    if len.checked_mul(8).is_none_or(|b| b > r.remaining()) {
        return Err(FormatError::Truncated {
            offset: r.offset(),
            needed: len.saturating_mul(8).saturating_sub(r.remaining()),
        });
    }
    let start = r.offset();
    let mut data = Vec::with_capacity(len);
    for i in 0..len {
        let v = r.f64()?;
        if !v.is_finite() {
            return Err(FormatError::NonFinite { offset: start + 8 * i, row: i / cols, col: i % cols });
        }
        data.push(v);
    }
    Ok(Matrix::from_raw(rows, cols, data))
}

/// Decodes exactly one block; trailing bytes are an error.
pub fn decode_block(bytes: &[u8]) -> Result<Matrix, FormatError> {
    let mut r = ByteReader::new(bytes);
    let m = read_matrix(&mut r)?;
    r.finish()?;
    Ok(m)
}

pub fn write_block(m: &Matrix, path: &Path) -> Result<(), FileError> {
    let mut out = Vec::new();
    encode_block(m, &mut out);
    std::fs::write(path, out).map_err(|source| FileError::Io { path: path.display().to_string(), source })
}

pub fn read_block(path: &Path) -> Result<Matrix, FileError> {
    let p = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| FileError::Io { path: p.clone(), source })?;
    decode_block(&bytes).map_err(|source| FileError::Format { path: p, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0]]);
        let mut out = Vec::new();
        encode_block(&m, &mut out);
        assert_eq!(out.len(), block_len(1, 3));
        assert_eq!(&out[..8], &1u64.to_le_bytes());
        assert_eq!(&out[8..16], &3u64.to_le_bytes());
        assert_eq!(&out[16..24], &1.0f64.to_le_bytes());
        assert_eq!(decode_block(&out).unwrap(), m);
    }

    #[test]
    fn empty_blocks() {
        for m in [Matrix::zeros(0, 5), Matrix::zeros(4, 0)] {
            let mut out = Vec::new();
            encode_block(&m, &mut out);
            assert_eq!(out.len(), 16);
            assert_eq!(decode_block(&out).unwrap(), m);
        }
    }

    #[test]
    fn rejects_nan_and_truncation() {
        let mut out = Vec::new();
        encode_block(&Matrix::identity(2), &mut out);
        let mut bad = out.clone();
        bad[16 + 8 * 3..16 + 8 * 4].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(decode_block(&bad), Err(FormatError::NonFinite { offset: 40, row: 1, col: 1 }));
        assert!(matches!(decode_block(&out[..20]), Err(FormatError::Truncated { .. })));
        out.push(0);
        assert!(matches!(decode_block(&out), Err(FormatError::TrailingBytes { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Matrix::from_rows(&[[0.1, -2.5], [1e300, -0.0]]);
        write_block(&m, &path).unwrap();
        assert_eq!(read_block(&path).unwrap(), m);
    }
}
