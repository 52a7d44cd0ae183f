//! Named-tensor container used for checkpoints.
//!
//! ```text
//! magic     8 bytes "HCTENSOR"
//! version   u32 (1)
//! meta_len  u32, then meta_len bytes of UTF-8 metadata (JSON)
//! count     u32
//! count × { name_len u32, name bytes, rank u32, rank × u32 dims, numel × f64 }
//! ```
//!
//! All integers and floats are little-endian. Values are stored as `f64`,
//! so `f64` tensors round-trip bit for bit.

use std::path::Path;

use crate::error::{Error, ParseError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::ByteReader;

pub const CONTAINER_MAGIC: &[u8; 8] = b"HCTENSOR";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensors<S = f64> {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> NamedTensors<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn len_u32(n: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Data(format!("{what} length {n} does not fit in u32")))
}

pub fn encode<S: Scalar>(named: &NamedTensors<S>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&len_u32(named.metadata.len(), "metadata")?);
    out.extend_from_slice(named.metadata.as_bytes());
    out.extend_from_slice(&len_u32(named.tensors.len(), "tensor count")?);
    for (name, t) in &named.tensors {
        out.extend_from_slice(&len_u32(name.len(), "name")?);
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&len_u32(t.rank(), "rank")?);
        for &d in t.shape() {
            out.extend_from_slice(&len_u32(d, "extent")?);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

fn utf8(bytes: &[u8], offset: usize, what: &str) -> std::result::Result<String, ParseError> {
    String::from_utf8(bytes.to_vec()).map_err(|_| ParseError::Malformed {
        offset,
        detail: format!("{what} is not UTF-8"),
    })
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> std::result::Result<NamedTensors<S>, ParseError> {
    let mut r = ByteReader::new(bytes);
    r.magic(CONTAINER_MAGIC)?;
    let at = r.pos();
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(ParseError::Malformed {
            offset: at,
            detail: format!("unsupported container version {version}"),
        });
    }
    let meta_len = r.u32()? as usize;
    let at = r.pos();
    let metadata = utf8(r.take(meta_len)?, at, "metadata")?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let at = r.pos();
        let name = utf8(r.take(name_len)?, at, "tensor name")?;
        let rank_at = r.pos();
        let rank = r.u32()? as usize;
        let mut shape = Vec::new();
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| ParseError::DimensionOverflow {
                offset: rank_at,
                detail: format!("tensor {name} shape {shape:?}"),
            })?;
        let payload_at = r.pos();
        if r.remaining() < numel * 8 {
            return Err(ParseError::TruncatedPayload {
                offset: payload_at,
                expected: numel * 8,
                actual: r.remaining(),
            });
        }
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| ParseError::Malformed {
            offset: rank_at,
            detail: format!("tensor {name}: {e}"),
        })?;
        tensors.push((name, t));
    }
    if r.remaining() > 0 {
        return Err(ParseError::TrailingBytes {
            offset: r.pos(),
            extra: r.remaining(),
        });
    }
    Ok(NamedTensors { metadata, tensors })
}

pub fn write<S: Scalar>(path: impl AsRef<Path>, named: &NamedTensors<S>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(named)?).map_err(|e| Error::io(path, e))
}

pub fn read<S: Scalar>(path: impl AsRef<Path>) -> Result<NamedTensors<S>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })
}
