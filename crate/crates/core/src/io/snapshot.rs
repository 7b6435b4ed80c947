//! Global model snapshot: `"AFCM" | version u32 | round u64 | d u64 |
//! class id u64 × d | weight block (l_e × d)`.

use std::path::Path;

use super::block::{encode_block, read_matrix};
use super::{ByteReader, FileError, FormatError};
use crate::registry::ClassId;
use crate::server::GlobalModel;

pub const MODEL_MAGIC: [u8; 4] = *b"AFCM";
const MODEL_VERSION: u32 = 1;

pub fn encode_model(model: &GlobalModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&model.round.to_le_bytes());
    out.extend_from_slice(&(model.column_classes.len() as u64).to_le_bytes());
    for c in &model.column_classes {
        out.extend_from_slice(&c.0.to_le_bytes());
    }
    encode_block(&model.weights, &mut out);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<GlobalModel, FormatError> {
    let mut r = ByteReader::new(bytes);
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MODEL_MAGIC {
        return Err(FormatError::BadMagic { found: magic });
    }
    let at = r.offset();
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(FormatError::VersionUnsupported { offset: at, version });
    }
    let round = r.u64()?;
    let d = r.count(8)?;
    let column_classes: Vec<ClassId> = (0..d).map(|_| r.u64().map(ClassId)).collect::<Result<_, _>>()?;
    let at = r.offset();
    let weights = read_matrix(&mut r)?;
    if weights.cols() != d {
        return Err(FormatError::Invalid {
            offset: at,
            detail: format!("{} weight columns for {d} classes", weights.cols()),
        });
    }
    r.finish()?;
    Ok(GlobalModel { weights, column_classes, round })
}

pub fn write_model(model: &GlobalModel, path: &Path) -> Result<(), FileError> {
    std::fs::write(path, encode_model(model))
        .map_err(|source| FileError::Io { path: path.display().to_string(), source })
}

pub fn read_model(path: &Path) -> Result<GlobalModel, FileError> {
    let p = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| FileError::Io { path: p.clone(), source })?;
    decode_model(&bytes).map_err(|source| FileError::Format { path: p, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    #[test]
    fn round_trip() {
        let m = GlobalModel {
            weights: Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.5]]),
            column_classes: vec![ClassId(8), ClassId(2)],
            round: 5,
        };
        let bytes = encode_model(&m);
        assert_eq!(decode_model(&bytes).unwrap(), m);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.afcm");
        write_model(&m, &path).unwrap();
        assert_eq!(read_model(&path).unwrap(), m);
        assert!(decode_model(&bytes[..bytes.len() - 3]).is_err());
        assert!(matches!(decode_model(b"AFCBxxxx"), Err(FormatError::BadMagic { .. })));
    }
}
