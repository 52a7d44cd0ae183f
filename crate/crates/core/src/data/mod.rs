//! On-disk formats and corpora.
//!
//! Feature files carry 32-bit floats; everything in memory is the generic
//! scalar (normally `f64`). Values are rounded to `f32` on write, so a
//! read-after-write returns exactly the `f32`-rounded stack.

pub mod container;
pub mod feature_file;
pub mod manifest;
pub mod synthetic;

pub use feature_file::{decode_feature_bytes, encode_feature_bytes, read_feature_file, write_feature_file};
pub use manifest::{parse_manifest, parse_manifest_str, Manifest, ManifestRow};
pub use synthetic::{generate_synthetic, synthesize, SyntheticSpec};

use crate::error::{ParseError, Result};
use crate::label::Label;
use crate::model::{FeatureStack, ModelConfig};
use crate::scalar::Scalar;

/// Labelled feature stacks held in memory, in manifest order.
#[derive(Debug, Clone)]
pub struct Corpus<S = f64> {
    pub items: Vec<(FeatureStack<S>, Label)>,
}

impl<S: Scalar> Corpus<S> {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let items = manifest
            .rows
            .iter()
            .map(|row| {
                let mut stack = read_feature_file(manifest.resolve(row))?;
                stack.utterance_id = row.utterance_id.clone();
                Ok((stack, row.label))
            })
            .collect::<Result<_>>()?;
        Ok(Corpus { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.items.iter().map(|(_, l)| *l).collect()
    }

    pub fn has_both_classes(&self) -> bool {
        let labels = self.labels();
        labels.contains(&Label::Real) && labels.contains(&Label::Fake)
    }

    pub fn check_matches(&self, cfg: &ModelConfig) -> Result<()> {
        self.items.iter().try_for_each(|(s, _)| s.check_matches(cfg))
    }
}

/// Little-endian cursor that reports failures with byte offsets.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ParseError> {
        if self.remaining() < n {
            return Err(ParseError::TruncatedHeader {
                offset: self.pos,
                expected: n,
                actual: self.remaining(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, ParseError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8]) -> std::result::Result<(), ParseError> {
        let found = &self.bytes[..self.bytes.len().min(8)];
        if found != expected {
            return Err(ParseError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: found.to_vec(),
            });
        }
        self.pos = 8;
        Ok(())
    }
}
