//! Binary feature files.
//!
//! Layout, little-endian: `"FGC1"` | u32 T | u32 D | T·D `f32` row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::FeatureSequence;
use crate::error::{Error, FeatureFileError, Result};

pub const MAGIC: [u8; 4] = *b"FGC1";
const HEADER_LEN: u64 = 12;

pub fn encode_features(f: &FeatureSequence) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + f.values().len() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&(f.num_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    for v in f.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8]) -> std::result::Result<FeatureSequence, FeatureFileError> {
    let found = bytes.len() as u64;
    if found < 4 {
        return Err(FeatureFileError::Truncated {
            expected: HEADER_LEN,
            found,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FeatureFileError::BadMagic { found: magic });
    }
    if found < HEADER_LEN {
        return Err(FeatureFileError::Truncated {
            expected: HEADER_LEN,
            found,
        });
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if frames == 0 {
        return Err(FeatureFileError::Empty);
    }
    if dim == 0 {
        return Err(FeatureFileError::ZeroDim);
    }
    let payload = (frames as u64)
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .filter(|&n| n <= isize::MAX as u64 - HEADER_LEN)
        .ok_or(FeatureFileError::DimensionOverflow { frames, dim })?;
    let expected = HEADER_LEN + payload;
    if found != expected {
        return Err(FeatureFileError::Truncated { expected, found });
    }
    let values = bytes[HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FeatureSequence::new(frames as usize, dim as usize, values)
        .map_err(|_| FeatureFileError::Empty)
}

/// Writes via a temporary file in the target directory, then renames.
pub fn write_features(path: &Path, f: &FeatureSequence) -> Result<()> {
    write_atomic(path, &encode_features(f))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path)?;
    decode_features(&bytes).map_err(|source| Error::FeatureFile {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
