//! Feature bundle file.
//!
//! ```text
//! "AFCB" | version u32 | l_e u64 | N u64 | class count u64
//!        | declared class ids u64 (strictly ascending)
//!        | labels u64 × N | feature block (N × l_e)
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use super::block::{encode_block, read_matrix};
use super::{ByteReader, FileError, FormatError};
use crate::client::FeatureBundle;
use crate::registry::ClassId;

pub const BUNDLE_MAGIC: [u8; 4] = *b"AFCB";
pub const BUNDLE_VERSION: u32 = 1;

pub fn encode_bundle(bundle: &FeatureBundle) -> Vec<u8> {
    let n = bundle.samples();
    let l = bundle.embedding_width();
    let classes = bundle.declared_classes.len();
    let mut out = Vec::with_capacity(4 + 4 + 24 + 8 * (classes + n) + 16 + 8 * n * l);
    out.extend_from_slice(&BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(l as u64).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(classes as u64).to_le_bytes());
    for c in &bundle.declared_classes {
        out.extend_from_slice(&c.0.to_le_bytes());
    }
    for c in &bundle.labels {
        out.extend_from_slice(&c.0.to_le_bytes());
    }
    encode_block(&bundle.features, &mut out);
    out
}

/// Parses and validates a bundle. `tag` becomes the bundle's client tag.
pub fn decode_bundle(bytes: &[u8], tag: &str) -> Result<FeatureBundle, FormatError> {
    let mut r = ByteReader::new(bytes);
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != BUNDLE_MAGIC {
        return Err(FormatError::BadMagic { found: magic });
    }
    let at = r.offset();
    let version = r.u32()?;
    if version != BUNDLE_VERSION {
        return Err(FormatError::VersionUnsupported { offset: at, version });
    }
    let at = r.offset();
    let width = r.u64()?;
    let samples = r.u64()?;
    if width == 0 || samples == 0 {
        return Err(FormatError::Invalid {
            offset: at,
            detail: format!("bundle must have samples and features (N = {samples}, l_e = {width})"),
        });
    }

    let classes = r.count(8)?;
    let mut declared = BTreeSet::new();
    let mut prev: Option<u64> = None;
    for _ in 0..classes {
        let at = r.offset();
        let c = r.u64()?;
        if prev.is_some_and(|p| p >= c) {
            return Err(FormatError::Invalid {
                offset: at,
                detail: "declared classes must be strictly ascending".into(),
            });
        }
        prev = Some(c);
        declared.insert(ClassId(c));
    }

    let at = r.offset();
    let n = usize::try_from(samples).ok().filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()));
    let n = n.ok_or(FormatError::Truncated {
        offset: at,
        needed: (samples.saturating_mul(8) as usize).saturating_sub(r.remaining()),
    })?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let c = ClassId(r.u64()?);
        if !declared.contains(&c) {
            return Err(FormatError::UndeclaredLabel { offset: at, label: c.0 });
        }
        labels.push(c);
    }

    let at = r.offset();
    let features = read_matrix(&mut r)?;
    if features.shape() != (n, width as usize) {
        return Err(FormatError::Invalid {
            offset: at,
            detail: format!(
                "feature block is {}x{}, header says {n}x{width}",
                features.rows(),
                features.cols()
            ),
        });
    }
    r.finish()?;
    Ok(FeatureBundle { features, labels, declared_classes: declared, client_tag: tag.to_string() })
}

pub fn write_bundle(bundle: &FeatureBundle, path: &Path) -> Result<(), FileError> {
    std::fs::write(path, encode_bundle(bundle))
        .map_err(|source| FileError::Io { path: path.display().to_string(), source })
}

/// Reads a bundle; the client tag is the file stem.
pub fn read_bundle(path: &Path) -> Result<FeatureBundle, FileError> {
    let p = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| FileError::Io { path: p.clone(), source })?;
    let tag = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_bundle(&bytes, &tag).map_err(|source| FileError::Format { path: p, source })
}
