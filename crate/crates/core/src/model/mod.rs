//! Hierarchical attention head over multi-layer hidden states.
//!
//! A forward pass runs three pooling stages and two heads:
//!
//! 1. temporal attention pools the `T` frames of each layer into a layer
//!    token (weights `alpha`, one row per layer);
//! 2. consecutive layers are grouped `group_size` at a time and each group is
//!    pooled, then refined by a residual MLP (weights `beta`, one row per
//!    group);
//! 3. the group vectors are pooled and refined the same way into the
//!    utterance embedding `u` (weights `gamma`).
//!
//! The classifier maps `u` to two logits (`[real, fake]`), and the projection
//! head maps `u` into the contrastive space. All pooling uses the same
//! tanh-scored softmax form with its own parameters per stage.

mod params;

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::container::{self, NamedTensors};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dropout_mask, Tape, Tensor, Var, LAYER_NORM_EPS};

pub use params::{
    randomize, Affine, AttnPoolParams, ClassifierParams, HierConParams, ParamSet, ResidualMlp,
};

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub group_size: usize,
    pub attn_dim: usize,
    pub ffn_dim: usize,
    pub proj_dim: usize,
    pub dropout_rate: f64,
    /// One temporal scorer for all layers (`true`) or one per layer.
    pub shared_temporal: bool,
    /// Start both residual MLP branches with a zero output projection.
    pub zero_init_residual: bool,
}

impl Default for ModelConfig {
    /// Desk-scale profile matching the synthetic fixture.
    fn default() -> Self {
        ModelConfig {
            num_layers: 6,
            frames: 20,
            feature_dim: 16,
            group_size: 3,
            attn_dim: 16,
            ffn_dim: 16,
            proj_dim: 16,
            dropout_rate: 0.1,
            shared_temporal: true,
            zero_init_residual: true,
        }
    }
}

impl ModelConfig {
    /// 24 backbone layers of width 1024 in 8 groups of 3, attention width
    /// 128, feed-forward width 512, 256-d projection.
    pub fn full_scale(frames: usize) -> Self {
        ModelConfig {
            num_layers: 24,
            frames,
            feature_dim: 1024,
            group_size: 3,
            attn_dim: 128,
            ffn_dim: 512,
            proj_dim: 256,
            zero_init_residual: false,
            ..ModelConfig::default()
        }
    }

    pub fn num_groups(&self) -> usize {
        self.num_layers / self.group_size
    }

    /// Layers pooled by group `k`.
    pub fn group_layers(&self, k: usize) -> Range<usize> {
        k * self.group_size..(k + 1) * self.group_size
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("frames", self.frames),
            ("feature_dim", self.feature_dim),
            ("group_size", self.group_size),
            ("attn_dim", self.attn_dim),
            ("ffn_dim", self.ffn_dim),
            ("proj_dim", self.proj_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.num_layers.is_multiple_of(self.group_size) {
            return Err(Error::Config(format!(
                "num_layers {} is not divisible by group_size {}",
                self.num_layers, self.group_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Hidden states of one utterance, `[layers × frames × dims]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack<S = f64> {
    pub utterance_id: String,
    values: Tensor<S>,
}

impl<S: Scalar> FeatureStack<S> {
    pub fn new(utterance_id: impl Into<String>, values: Tensor<S>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape("FeatureStack", values.shape(), &[0, 0, 0]));
        }
        if !values.is_finite() {
            return Err(Error::Data("feature stack holds non-finite values".into()));
        }
        Ok(FeatureStack {
            utterance_id: utterance_id.into(),
            values,
        })
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }

    /// `(layers, frames, dims)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }

    /// Frames of layer `l` as a `[frames × dims]` matrix.
    pub fn layer(&self, l: usize) -> Tensor<S> {
        let (_, t, d) = self.dims();
        Tensor::new([t, d], self.values.data()[l * t * d..(l + 1) * t * d].to_vec())
            .expect("layer slice")
    }

    pub fn check_matches(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = [cfg.num_layers, cfg.frames, cfg.feature_dim];
        if self.values.shape() != expect {
            return Err(Error::Shape {
                op: "feature stack vs model config",
                left: self.values.shape().to_vec(),
                right: expect.to_vec(),
            });
        }
        Ok(())
    }
}

/// Attention weights of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<S = f64> {
    /// `[layers × frames]`
    pub alpha: Tensor<S>,
    /// `[groups × group_size]`
    pub beta: Tensor<S>,
    /// `[groups]`
    pub gamma: Tensor<S>,
}

impl<S: Scalar> AttentionRecord<S> {
    /// Worst deviation from the probability simplex over every row, or
    /// infinity if any weight is negative.
    pub fn simplex_violation(&self) -> f64 {
        let rows = |t: &Tensor<S>, width: usize| -> f64 {
            t.data()
                .chunks(width)
                .map(|r| {
                    if r.iter().any(|&v| v < S::zero()) {
                        f64::INFINITY
                    } else {
                        (r.iter().copied().sum::<S>().as_f64() - 1.0).abs()
                    }
                })
                .fold(0.0, f64::max)
        };
        rows(&self.alpha, self.alpha.cols())
            .max(rows(&self.beta, self.beta.cols()))
            .max(rows(&self.gamma, self.gamma.numel()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; the mask is drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
}

/// `x · weightᵀ + bias`
pub fn affine_on<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &Affine<Var>) -> Result<Var> {
    let wt = tape.transpose(p.weight)?;
    let y = tape.matmul(x, wt)?;
    tape.add_row(y, p.bias)
}

/// Scores each row of `tokens: [n × D]` with `w2ᵀ tanh(W1 x + b1)`, softmaxes
/// the scores, and returns `(weighted sum [1 × D], weights [1 × n])`.
pub fn attn_pool<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: Var,
    p: &AttnPoolParams<Var>,
) -> Result<(Var, Var)> {
    let n = tape.value(tokens).rows();
    let hidden = affine_on(
        tape,
        tokens,
        &Affine {
            weight: p.w1,
            bias: p.b1,
        },
    )?;
    let e = tape.tanh(hidden);
    let attn = tape.value(p.w2).numel();
    let w2 = tape.reshape(p.w2, [attn, 1])?;
    let scores = tape.matmul(e, w2)?;
    let scores = tape.reshape(scores, [1, n])?;
    let weights = tape.softmax(scores, 1)?;
    let pooled = tape.matmul(weights, tokens)?;
    Ok((pooled, weights))
}

/// Stage 1 for one layer: `frames: [T × D]` → `(z [1 × D], alpha [1 × T])`.
pub fn temporal_attention<S: Scalar>(
    tape: &mut Tape<S>,
    frames: Var,
    p: &AttnPoolParams<Var>,
) -> Result<(Var, Var)> {
    attn_pool(tape, frames, p)
}

/// `pool(tokens) + mlp(pool(tokens))`
pub fn residual_pool<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: Var,
    pool: &AttnPoolParams<Var>,
    mlp: &ResidualMlp<Var>,
) -> Result<(Var, Var)> {
    let (pooled, weights) = attn_pool(tape, tokens, pool)?;
    let up = affine_on(tape, pooled, &mlp.up)?;
    let act = tape.relu(up);
    let down = affine_on(tape, act, &mlp.down)?;
    Ok((tape.add(pooled, down)?, weights))
}

/// Stage 2: pools each run of `group_size` consecutive layer tokens.
/// Returns one `[1 × D]` vector and one `[1 × group_size]` weight row per group.
pub fn intra_group<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    layer_tokens: &[Var],
    params: &ParamSet<Var>,
) -> Result<(Vec<Var>, Vec<Var>)> {
    if layer_tokens.len() != cfg.num_layers || !cfg.num_layers.is_multiple_of(cfg.group_size) {
        return Err(Error::Config(format!(
            "{} layer tokens cannot form groups of {}",
            layer_tokens.len(),
            cfg.group_size
        )));
    }
    let mut vecs = Vec::with_capacity(cfg.num_groups());
    let mut betas = Vec::with_capacity(cfg.num_groups());
    for k in 0..cfg.num_groups() {
        let group = tape.concat_rows(&layer_tokens[cfg.group_layers(k)])?;
        let (v, beta) = residual_pool(tape, group, &params.intra_pool, &params.intra_mlp)?;
        vecs.push(v);
        betas.push(beta);
    }
    Ok((vecs, betas))
}

/// Stage 3: pools the group vectors into `(u [1 × D], gamma [1 × groups])`.
pub fn inter_group<S: Scalar>(
    tape: &mut Tape<S>,
    group_vecs: &[Var],
    params: &ParamSet<Var>,
) -> Result<(Var, Var)> {
    let stacked = tape.concat_rows(group_vecs)?;
    residual_pool(tape, stacked, &params.inter_pool, &params.inter_mlp)
}

/// `layer_norm → affine → relu → dropout (train only) → affine`, giving
/// `[1 × 2]` logits ordered `[real, fake]`.
pub fn classify<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    u: Var,
    p: &ClassifierParams<Var>,
    mode: Mode,
) -> Result<Var> {
    let normed = tape.layer_norm(u, p.norm_gain, p.norm_bias, S::lit(LAYER_NORM_EPS))?;
    let hidden = affine_on(tape, normed, &p.hidden)?;
    let mut act = tape.relu(hidden);
    if let Mode::Train { dropout_seed } = mode {
        if cfg.dropout_rate > 0.0 {
            let shape = tape.value(act).shape().to_vec();
            let mask = dropout_mask(&shape, cfg.dropout_rate, dropout_seed)?;
            act = tape.mul_const(act, mask)?;
        }
    }
    affine_on(tape, act, &p.output)
}

/// Projection into the contrastive space (not normalized).
pub fn project<S: Scalar>(tape: &mut Tape<S>, u: Var, p: &Affine<Var>) -> Result<Var> {
    affine_on(tape, u, p)
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars<S = f64> {
    pub logits: Var,
    pub embedding: Var,
    pub utterance: Var,
    pub layer_tokens: Vec<Var>,
    pub group_vecs: Vec<Var>,
    pub record: AttentionRecord<S>,
}

/// Records the full pipeline for one utterance on `tape`.
pub fn forward_on<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    params: &ParamSet<Var>,
    stack: &FeatureStack<S>,
    mode: Mode,
) -> Result<ForwardVars<S>> {
    stack.check_matches(cfg)?;
    let mut layer_tokens = Vec::with_capacity(cfg.num_layers);
    let mut alphas = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let frames = tape.leaf(stack.layer(l));
        let scorer = &params.temporal[if params.temporal.len() == 1 { 0 } else { l }];
        let (z, alpha) = temporal_attention(tape, frames, scorer)?;
        layer_tokens.push(z);
        alphas.push(alpha);
    }
    let (group_vecs, betas) = intra_group(tape, cfg, &layer_tokens, params)?;
    let (utterance, gamma) = inter_group(tape, &group_vecs, params)?;
    let logits = classify(tape, cfg, utterance, &params.classifier, mode)?;
    let embedding = project(tape, utterance, &params.projection)?;

    let stack_rows = |tape: &Tape<S>, vars: &[Var]| -> Result<Tensor<S>> {
        let rows: Vec<&Tensor<S>> = vars.iter().map(|&v| tape.value(v)).collect();
        Tensor::concat_rows(&rows)
    };
    let record = AttentionRecord {
        alpha: stack_rows(tape, &alphas)?,
        beta: stack_rows(tape, &betas)?,
        gamma: tape.value(gamma).reshaped([cfg.num_groups()])?,
    };
    Ok(ForwardVars {
        logits,
        embedding,
        utterance,
        layer_tokens,
        group_vecs,
        record,
    })
}

/// Values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<S = f64> {
    /// `[2]`, ordered `[real, fake]`
    pub logits: Tensor<S>,
    /// `[proj_dim]`
    pub embedding: Tensor<S>,
    /// `[feature_dim]`
    pub utterance: Tensor<S>,
    /// `[layers × feature_dim]`
    pub layer_tokens: Tensor<S>,
    pub record: AttentionRecord<S>,
}

impl<S: Scalar> Prediction<S> {
    /// Softmax probability of the fake class.
    pub fn fake_score(&self) -> S {
        let l = self.logits.data();
        S::one() / (S::one() + (l[0] - l[1]).exp())
    }
}

/// Configuration plus parameters: the unit that is trained and checkpointed.
#[derive(Debug, Clone, PartialEq)]
pub struct HierCon<S = f64> {
    pub config: ModelConfig,
    pub params: HierConParams<S>,
}

pub const CHECKPOINT_KIND: &str = "hiercon-checkpoint";

impl<S: Scalar> HierCon<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = HierConParams::init(&config, seed)?;
        Ok(HierCon { config, params })
    }

    pub fn forward(&self, stack: &FeatureStack<S>, mode: Mode) -> Result<Prediction<S>> {
        let mut tape = Tape::new();
        let vars = self.params.on_tape(&mut tape);
        let out = forward_on(&mut tape, &self.config, &vars, stack, mode)?;
        let rows: Vec<&Tensor<S>> = out.layer_tokens.iter().map(|&v| tape.value(v)).collect();
        Ok(Prediction {
            logits: tape.value(out.logits).reshaped([NUM_CLASSES])?,
            embedding: tape.value(out.embedding).reshaped([self.config.proj_dim])?,
            utterance: tape.value(out.utterance).reshaped([self.config.feature_dim])?,
            layer_tokens: Tensor::concat_rows(&rows)?,
            record: out.record,
        })
    }

    /// Eval-mode probability that `stack` is fake.
    pub fn score(&self, stack: &FeatureStack<S>) -> Result<S> {
        Ok(self.forward(stack, Mode::Eval)?.fake_score())
    }

    pub fn to_named_tensors(&self) -> Result<NamedTensors<S>> {
        let meta = serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "model": self.config,
        });
        let tensors = self
            .params
            .entries()
            .into_iter()
            .map(|(name, t)| (name, t.clone()))
            .collect();
        Ok(NamedTensors {
            metadata: meta.to_string(),
            tensors,
        })
    }

    pub fn from_named_tensors(named: &NamedTensors<S>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            kind: String,
            model: ModelConfig,
        }
        let meta: Meta = serde_json::from_str(&named.metadata)
            .map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Data(format!(
                "not a model checkpoint (kind {:?})",
                meta.kind
            )));
        }
        let mut model = HierCon::new(meta.model, 0)?;
        model.params.load_named(|name| named.get(name))?;
        if named.tensors.len() != model.params.entries().len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, model expects {}",
                named.tensors.len(),
                model.params.entries().len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write(path, &self.to_named_tensors()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_named_tensors(&container::read(path)?)
    }
}
