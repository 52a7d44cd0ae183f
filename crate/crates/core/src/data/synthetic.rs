//! Planted-artefact corpus.
//!
//! Real utterances are i.i.d. Gaussian noise. Fake utterances are the same
//! noise plus `signal_scale · dir` on every layer of `planted_group` and every
//! frame of the planted window, where `dir` is a unit vector fixed by `seed`.
//! Everything outside that block is distributed identically for both classes.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;
use crate::model::FeatureStack;
use crate::tensor::Tensor;

use super::feature_file::write_feature_file;
use super::manifest::{Manifest, ManifestRow};

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const FEATURE_EXT: &str = "hcf";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_layers: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub group_size: usize,
    pub planted_group: usize,
    /// `[start, end)` as fractions of the frame count.
    pub window: [f64; 2],
    pub signal_scale: f64,
    pub noise_scale: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub seed: u64,
    /// Noise stream. Corpora sharing a seed share the planted direction; a
    /// different stream gives independent noise (e.g. a validation split).
    pub stream: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_layers: 6,
            frames: 20,
            feature_dim: 16,
            group_size: 3,
            planted_group: 1,
            window: [0.4, 0.7],
            signal_scale: 2.0,
            noise_scale: 1.0,
            n_real: 64,
            n_fake: 64,
            seed: 7,
            stream: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [self.num_layers, self.frames, self.feature_dim, self.group_size].contains(&0) {
            return bad("layer, frame, dim and group extents must be >= 1".into());
        }
        if !self.num_layers.is_multiple_of(self.group_size) {
            return bad(format!(
                "num_layers {} is not divisible by group_size {}",
                self.num_layers, self.group_size
            ));
        }
        if self.planted_group >= self.num_layers / self.group_size {
            return bad(format!(
                "planted_group {} out of range for {} groups",
                self.planted_group,
                self.num_layers / self.group_size
            ));
        }
        let [s, e] = self.window;
        if !(0.0 <= s && s < e && e <= 1.0) {
            return bad(format!("window [{s}, {e}) must satisfy 0 <= start < end <= 1"));
        }
        if self.planted_frames().is_empty() {
            return bad(format!(
                "window [{s}, {e}) covers no frame at T={}",
                self.frames
            ));
        }
        if !(self.signal_scale >= 0.0 && self.signal_scale.is_finite()) {
            return bad(format!("signal_scale must be finite and >= 0, got {}", self.signal_scale));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be finite and > 0, got {}", self.noise_scale));
        }
        if self.n_real + self.n_fake == 0 {
            return bad("corpus must hold at least one utterance".into());
        }
        Ok(())
    }

    /// Frames `[round(start·T), round(end·T))`.
    pub fn planted_frames(&self) -> Range<usize> {
        let t = self.frames as f64;
        (self.window[0] * t).round() as usize..(self.window[1] * t).round() as usize
    }

    pub fn planted_layers(&self) -> Range<usize> {
        self.planted_group * self.group_size..(self.planted_group + 1) * self.group_size
    }

    pub fn num_groups(&self) -> usize {
        self.num_layers / self.group_size
    }

    /// Unit-norm planted direction, a function of `seed` only.
    pub fn direction(&self) -> Vec<f64> {
        let mut rng = rng_for(self.seed, u64::MAX, u64::MAX, 0);
        loop {
            let v: Vec<f64> = (0..self.feature_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

fn rng_for(seed: u64, stream: u64, class: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (k, w) in [seed, stream, class, index].into_iter().enumerate() {
        key[8 * k..8 * k + 8].copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub fn utterance_id(label: Label, index: usize) -> String {
    format!("{}_{index:04}", label.as_str())
}

/// Utterance order: real and fake alternate while both remain.
fn order(spec: &SyntheticSpec) -> Vec<(Label, usize)> {
    let mut out = Vec::with_capacity(spec.n_real + spec.n_fake);
    for i in 0..spec.n_real.max(spec.n_fake) {
        if i < spec.n_real {
            out.push((Label::Real, i));
        }
        if i < spec.n_fake {
            out.push((Label::Fake, i));
        }
    }
    out
}

/// One utterance, rounded to `f32` so it matches its on-disk form exactly.
pub fn synthesize_one(spec: &SyntheticSpec, dir: &[f64], label: Label, index: usize) -> FeatureStack<f64> {
    let (l, t, d) = (spec.num_layers, spec.frames, spec.feature_dim);
    let mut rng = rng_for(spec.seed, spec.stream, label.index() as u64, index as u64);
    let mut values: Vec<f64> = (0..l * t * d)
        .map(|_| spec.noise_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    if label == Label::Fake {
        for layer in spec.planted_layers() {
            for frame in spec.planted_frames() {
                let at = (layer * t + frame) * d;
                for (v, u) in values[at..at + d].iter_mut().zip(dir) {
                    *v += spec.signal_scale * u;
                }
            }
        }
    }
    let values = values.into_iter().map(|v| v as f32 as f64).collect();
    FeatureStack::new(
        utterance_id(label, index),
        Tensor::new([l, t, d], values).expect("extents validated"),
    )
    .expect("finite by construction")
}

/// The whole corpus in memory, in manifest order.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<(FeatureStack<f64>, Label)>> {
    spec.validate()?;
    let dir = spec.direction();
    Ok(order(spec)
        .into_iter()
        .map(|(label, i)| (synthesize_one(spec, &dir, label, i), label))
        .collect())
}

/// Writes one feature file per utterance plus `manifest.txt` into `out_dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let dir = spec.direction();
    let mut rows = Vec::new();
    for (label, i) in order(spec) {
        let stack = synthesize_one(spec, &dir, label, i);
        let file = PathBuf::from(format!("{}.{FEATURE_EXT}", stack.utterance_id));
        write_feature_file(&stack, out_dir.join(&file))?;
        rows.push(ManifestRow {
            utterance_id: stack.utterance_id,
            path: file,
            label,
            domain: None,
        });
    }
    let manifest = Manifest {
        rows,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.write(out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
