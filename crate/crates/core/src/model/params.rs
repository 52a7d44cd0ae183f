use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

use super::{ModelConfig, NUM_CLASSES};

/// Tanh-scored softmax pooling: `w1: [attn_dim × D]`, `b1: [attn_dim]`,
/// `w2: [attn_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnPoolParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
}

/// `y = x · weightᵀ + bias` with `weight: [out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub weight: T,
    pub bias: T,
}

/// `affine(D → ffn) → relu → affine(ffn → D)`, added back onto its input.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMlp<T> {
    pub up: Affine<T>,
    pub down: Affine<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    pub norm_gain: T,
    pub norm_bias: T,
    pub hidden: Affine<T>,
    pub output: Affine<T>,
}

/// Every trainable tensor of the head. `T` is a [`Tensor`] for stored
/// parameters and a tape handle while a forward pass is recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    /// One scorer shared by all layers, or one per layer.
    pub temporal: Vec<AttnPoolParams<T>>,
    pub intra_pool: AttnPoolParams<T>,
    pub intra_mlp: ResidualMlp<T>,
    pub inter_pool: AttnPoolParams<T>,
    pub inter_mlp: ResidualMlp<T>,
    pub classifier: ClassifierParams<T>,
    pub projection: Affine<T>,
}

pub type HierConParams<S = f64> = ParamSet<Tensor<S>>;

impl<T> AttnPoolParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttnPoolParams<U> {
        AttnPoolParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.b1"), &self.b1));
        out.push((format!("{prefix}.w2"), &self.w2));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.w1"), &mut self.w1));
        out.push((format!("{prefix}.b1"), &mut self.b1));
        out.push((format!("{prefix}.w2"), &mut self.w2));
    }
}

impl<T> Affine<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Affine<U> {
        Affine {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

impl<T> ResidualMlp<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ResidualMlp<U> {
        ResidualMlp {
            up: self.up.map(f),
            down: self.down.map(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.up.visit(&format!("{prefix}.up"), out);
        self.down.visit(&format!("{prefix}.down"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.up.visit_mut(&format!("{prefix}.up"), out);
        self.down.visit_mut(&format!("{prefix}.down"), out);
    }
}

impl<T> ClassifierParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ClassifierParams<U> {
        ClassifierParams {
            norm_gain: f(&self.norm_gain),
            norm_bias: f(&self.norm_bias),
            hidden: self.hidden.map(f),
            output: self.output.map(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.norm.gain"), &self.norm_gain));
        out.push((format!("{prefix}.norm.bias"), &self.norm_bias));
        self.hidden.visit(&format!("{prefix}.hidden"), out);
        self.output.visit(&format!("{prefix}.output"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.norm.gain"), &mut self.norm_gain));
        out.push((format!("{prefix}.norm.bias"), &mut self.norm_bias));
        self.hidden.visit_mut(&format!("{prefix}.hidden"), out);
        self.output.visit_mut(&format!("{prefix}.output"), out);
    }
}

impl<T> ParamSet<T> {
    /// Applies `f` to every leaf, preserving structure.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ParamSet<U> {
        ParamSet {
            temporal: self.temporal.iter().map(|p| p.map(&mut f)).collect(),
            intra_pool: self.intra_pool.map(&mut f),
            intra_mlp: self.intra_mlp.map(&mut f),
            inter_pool: self.inter_pool.map(&mut f),
            inter_mlp: self.inter_mlp.map(&mut f),
            classifier: self.classifier.map(&mut f),
            projection: self.projection.map(&mut f),
        }
    }

    /// Named leaves in a fixed order (the checkpoint order).
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (l, p) in self.temporal.iter().enumerate() {
            p.visit(&format!("temporal.{l}"), &mut out);
        }
        self.intra_pool.visit("intra.pool", &mut out);
        self.intra_mlp.visit("intra.mlp", &mut out);
        self.inter_pool.visit("inter.pool", &mut out);
        self.inter_mlp.visit("inter.mlp", &mut out);
        self.classifier.visit("classifier", &mut out);
        self.projection.visit("projection", &mut out);
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        for (l, p) in self.temporal.iter_mut().enumerate() {
            p.visit_mut(&format!("temporal.{l}"), &mut out);
        }
        self.intra_pool.visit_mut("intra.pool", &mut out);
        self.intra_mlp.visit_mut("intra.mlp", &mut out);
        self.inter_pool.visit_mut("inter.pool", &mut out);
        self.inter_mlp.visit_mut("inter.mlp", &mut out);
        self.classifier.visit_mut("classifier", &mut out);
        self.projection.visit_mut("projection", &mut out);
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        self.entries().into_iter().map(|(_, t)| t).collect()
    }

    /// Same structure around `leaves`, given in [`entries`](Self::entries) order.
    pub fn with_leaves<U: Clone>(&self, leaves: &[U]) -> ParamSet<U> {
        assert_eq!(leaves.len(), self.entries().len(), "one leaf per entry");
        let mut it = leaves.iter();
        self.map(|_| it.next().expect("counted").clone())
    }
}

/// Glorot-uniform bound for a map with the given fan-in and fan-out.
fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform_weight<S: Scalar>(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let a = glorot(inp, out);
    Tensor::uniform([out, inp], -a, a, rng)
}

fn affine<S: Scalar>(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Affine<Tensor<S>> {
    Affine {
        weight: uniform_weight(out, inp, rng),
        bias: Tensor::zeros([out]),
    }
}

fn attn_pool<S: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> AttnPoolParams<Tensor<S>> {
    let a = glorot(cfg.attn_dim, 1);
    AttnPoolParams {
        w1: uniform_weight(cfg.attn_dim, cfg.feature_dim, rng),
        b1: Tensor::zeros([cfg.attn_dim]),
        w2: Tensor::uniform([cfg.attn_dim], -a, a, rng),
    }
}

fn residual_mlp<S: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ResidualMlp<Tensor<S>> {
    let up = affine(cfg.feature_dim, cfg.ffn_dim, rng);
    let mut down = affine(cfg.ffn_dim, cfg.feature_dim, rng);
    if cfg.zero_init_residual {
        down.weight = Tensor::zeros([cfg.feature_dim, cfg.ffn_dim]);
    }
    ResidualMlp { up, down }
}

impl<S: Scalar> ParamSet<Tensor<S>> {
    /// Glorot-uniform weights, zero biases, unit layer-norm gain. The same
    /// `(config, seed)` always yields identical tensors.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scorers = if cfg.shared_temporal { 1 } else { cfg.num_layers };
        let temporal = (0..scorers).map(|_| attn_pool(cfg, &mut rng)).collect();
        let intra_pool = attn_pool(cfg, &mut rng);
        let intra_mlp = residual_mlp(cfg, &mut rng);
        let inter_pool = attn_pool(cfg, &mut rng);
        let inter_mlp = residual_mlp(cfg, &mut rng);
        let classifier = ClassifierParams {
            norm_gain: Tensor::ones([cfg.feature_dim]),
            norm_bias: Tensor::zeros([cfg.feature_dim]),
            hidden: affine(cfg.feature_dim, cfg.ffn_dim, &mut rng),
            output: affine(cfg.ffn_dim, NUM_CLASSES, &mut rng),
        };
        let projection = affine(cfg.feature_dim, cfg.proj_dim, &mut rng);
        Ok(ParamSet {
            temporal,
            intra_pool,
            intra_mlp,
            inter_pool,
            inter_mlp,
            classifier,
            projection,
        })
    }

    /// Registers every tensor as a tape leaf.
    pub fn on_tape(&self, tape: &mut Tape<S>) -> ParamSet<Var> {
        self.map(|t| tape.leaf(t.clone()))
    }

    pub fn num_parameters(&self) -> usize {
        self.leaves().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|t| t.is_finite())
    }

    /// Replaces every tensor by name from `source`, checking shapes.
    pub fn load_named<'a>(
        &mut self,
        mut source: impl FnMut(&str) -> Option<&'a Tensor<S>>,
    ) -> Result<()> {
        for (name, slot) in self.entries_mut() {
            let t = source(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Shape {
                    op: "load parameters",
                    left: slot.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

/// Draws uniform values in `[-a, a]` into every tensor; used to build
/// non-trivial parameter points for tests and gradient checks.
pub fn randomize<S: Scalar>(params: &mut HierConParams<S>, a: f64, rng: &mut impl Rng) {
    for (_, t) in params.entries_mut() {
        for v in t.data_mut() {
            *v = S::lit(rng.random_range(-a..a));
        }
    }
}
