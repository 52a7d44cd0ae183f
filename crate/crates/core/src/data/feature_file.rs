//! Feature-stack files.
//!
//! ```text
//! offset  size        field
//! 0       8           magic "HIERCON1"
//! 8       4           L (u32 LE)
//! 12      4           T (u32 LE)
//! 16      4           D (u32 LE)
//! 20      4·L·T·D     f32 LE values, layer-major, then frame-major
//! ```
//!
//! The payload must be exactly `4·L·T·D` bytes.

use std::path::Path;

use crate::error::{Error, ParseError, Result};
use crate::model::FeatureStack;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::ByteReader;

pub const FEATURE_MAGIC: &[u8; 8] = b"HIERCON1";
pub const HEADER_LEN: usize = 20;

/// Serializes `stack`, rounding every value to `f32`.
pub fn encode_feature_bytes<S: Scalar>(stack: &FeatureStack<S>) -> Result<Vec<u8>> {
    let (l, t, d) = stack.dims();
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| Error::Data(format!("extent {v} does not fit in u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * stack.values().numel());
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [l, t, d] {
        out.extend_from_slice(&dim(v)?.to_le_bytes());
    }
    for &v in stack.values().data() {
        let x = v
            .to_f32()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::Data(format!("value {v} is not representable as f32")))?;
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature_bytes<S: Scalar>(
    bytes: &[u8],
    utterance_id: &str,
) -> std::result::Result<FeatureStack<S>, ParseError> {
    let mut r = ByteReader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    let dims_at = r.pos();
    let (l, t, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if l == 0 || t == 0 || d == 0 {
        return Err(ParseError::Malformed {
            offset: dims_at,
            detail: format!("zero extent in L={l} T={t} D={d}"),
        });
    }
    let expected = l
        .checked_mul(t)
        .and_then(|n| n.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| ParseError::DimensionOverflow {
            offset: dims_at,
            detail: format!("4·{l}·{t}·{d} bytes overflows the address space"),
        })?;
    let actual = r.remaining();
    if actual < expected {
        return Err(ParseError::TruncatedPayload {
            offset: r.pos(),
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(ParseError::TrailingBytes {
            offset: r.pos() + expected,
            extra: actual - expected,
        });
    }
    let payload = r.take(expected)?;
    let values = payload
        .chunks_exact(4)
        .map(|c| {
            let x = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            S::from_f32(x).expect("f32 converts")
        })
        .collect();
    let tensor = Tensor::new([l, t, d], values).expect("extents checked");
    FeatureStack::new(utterance_id, tensor).map_err(|e| ParseError::Malformed {
        offset: HEADER_LEN,
        detail: e.to_string(),
    })
}

pub fn write_feature_file<S: Scalar>(stack: &FeatureStack<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_feature_bytes(stack)?).map_err(|e| Error::io(path, e))
}

/// Reads a feature file; the utterance id is taken from the file stem.
pub fn read_feature_file<S: Scalar>(path: impl AsRef<Path>) -> Result<FeatureStack<S>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_feature_bytes(&bytes, &id).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })
}
