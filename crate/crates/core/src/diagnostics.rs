//! Finite-difference audit of every differentiable op and of the full
//! training objective.

use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::label::Label;
use crate::losses::{
    contrastive_margin_with_grad, contrastive_on, cross_entropy_on, LossConfig, CONTRASTIVE_OP,
    CROSS_ENTROPY_OP,
};
use crate::model::{randomize, FeatureStack, HierCon, Mode, ModelConfig};
use crate::tensor::gradcheck::{check_tape_fn, random_input, GradCheck};
use crate::tensor::{OpKind, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::training::batch_objective;

pub const OP_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-6;

/// Ops audited individually, in report order.
pub const CHECKED_OPS: [OpKind; 16] = [
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::Reshape,
    OpKind::Add,
    OpKind::AddRow,
    OpKind::Scale,
    OpKind::MulConst,
    OpKind::Tanh,
    OpKind::Relu,
    OpKind::Softmax,
    OpKind::MeanAxis,
    OpKind::Sum,
    OpKind::LayerNorm,
    OpKind::ConcatRows,
    OpKind::Fused(CROSS_ENTROPY_OP),
    OpKind::Fused(CONTRASTIVE_OP),
];

pub fn op_kind_by_name(name: &str) -> Option<OpKind> {
    CHECKED_OPS.iter().copied().find(|k| k.name() == name)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub step: f64,
    /// Corrupts one backward rule; every check touching it should fail.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            step: DEFAULT_STEP,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub lines: Vec<CheckLine>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckLine> {
        self.lines.iter().find(|l| l.name == name)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(
                f,
                "{:<20} max_rel_err={:.3e} tol={:.0e} coords={:<5} {}",
                l.name,
                l.max_rel_error,
                l.tolerance,
                l.coordinates,
                if l.passed { "PASS" } else { "FAIL" }
            )?;
        }
        write!(f, "overall: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

fn line(name: &str, check: GradCheck, tolerance: f64) -> CheckLine {
    CheckLine {
        name: name.to_string(),
        max_rel_error: check.max_rel_error,
        tolerance,
        coordinates: check.coordinates,
        passed: check.max_rel_error <= tolerance,
    }
}

/// Uniform in `[-2, 2]` with every entry at least 0.1 from zero, keeping
/// relu probes off its kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random_input::<f64>(shape, rng);
    for v in t.data_mut() {
        *v += 0.1 * v.signum();
    }
    t
}

const MIXED: [Label; 6] = [Label::Real, Label::Fake, Label::Fake, Label::Real, Label::Fake, Label::Real];

fn hinge_clear(emb: &Tensor, labels: &[Label], cfg: &LossConfig) -> bool {
    contrastive_margin_with_grad(emb, labels, cfg)
        .map(|o| o.hinge_args.iter().flatten().all(|a: &f64| a.abs() > 1e-6))
        .unwrap_or(false)
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Build) {
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| random_input::<f64>(shape, rng);
    match kind {
        OpKind::MatMul => (vec![r(&[3, 4], rng), r(&[4, 2], rng)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        OpKind::Transpose => (vec![r(&[3, 4], rng)], Box::new(|t, v| t.transpose(v[0]))),
        OpKind::Reshape => (vec![r(&[3, 4], rng)], Box::new(|t, v| t.reshape(v[0], [2, 6]))),
        OpKind::Add => (vec![r(&[3, 4], rng), r(&[3, 4], rng)], Box::new(|t, v| t.add(v[0], v[1]))),
        OpKind::AddRow => (vec![r(&[3, 4], rng), r(&[4], rng)], Box::new(|t, v| t.add_row(v[0], v[1]))),
        OpKind::Scale => (vec![r(&[3, 4], rng)], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        OpKind::MulConst => {
            let mask = r(&[3, 4], rng);
            (vec![r(&[3, 4], rng)], Box::new(move |t, v| t.mul_const(v[0], mask.clone())))
        }
        OpKind::Tanh => (vec![r(&[3, 4], rng)], Box::new(|t, v| Ok(t.tanh(v[0])))),
        OpKind::Relu => (vec![away_from_zero(&[3, 4], rng)], Box::new(|t, v| Ok(t.relu(v[0])))),
        OpKind::Softmax => (vec![r(&[3, 4], rng)], Box::new(|t, v| t.softmax(v[0], 1))),
        OpKind::MeanAxis => (vec![r(&[3, 4], rng)], Box::new(|t, v| t.mean_axis(v[0], 0))),
        OpKind::Sum => (vec![r(&[3, 4], rng)], Box::new(|t, v| Ok(t.sum(v[0])))),
        OpKind::LayerNorm => (
            vec![r(&[3, 5], rng), r(&[5], rng), r(&[5], rng)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)),
        ),
        OpKind::ConcatRows => (
            vec![r(&[2, 3], rng), r(&[1, 3], rng)],
            Box::new(|t, v| t.concat_rows(&[v[0], v[1]])),
        ),
        OpKind::Fused(CROSS_ENTROPY_OP) => (
            vec![r(&[6, 2], rng)],
            Box::new(|t, v| cross_entropy_on(t, v[0], &MIXED)),
        ),
        OpKind::Fused(CONTRASTIVE_OP) => {
            let cfg = LossConfig::default();
            let emb = loop {
                let e = r(&[6, 5], rng);
                if hinge_clear(&e, &MIXED, &cfg) {
                    break e;
                }
            };
            (vec![emb], Box::new(move |t, v| contrastive_on(t, v[0], &MIXED, &cfg)))
        }
        other => unreachable!("no probe for {other}"),
    }
}

/// Model used for the end-to-end check: 6 layers, 5 frames, 8 dims.
pub fn end_to_end_config() -> ModelConfig {
    ModelConfig {
        num_layers: 6,
        frames: 5,
        feature_dim: 8,
        group_size: 3,
        attn_dim: 4,
        ffn_dim: 6,
        proj_dim: 5,
        dropout_rate: 0.1,
        shared_temporal: true,
        zero_init_residual: false,
    }
}

fn end_to_end(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let cfg = end_to_end_config();
    let loss = LossConfig::default();
    let labels = [Label::Real, Label::Fake, Label::Fake, Label::Real];
    let modes: Vec<Mode> = (0..labels.len())
        .map(|i| Mode::Train { dropout_seed: opts.seed.wrapping_add(i as u64) })
        .collect();
    loop {
        let mut model = HierCon::<f64>::new(cfg.clone(), rng.random())?;
        randomize(&mut model.params, 0.8, rng);
        let stacks: Vec<FeatureStack> = (0..labels.len())
            .map(|i| {
                let v = random_input(&[cfg.num_layers, cfg.frames, cfg.feature_dim], rng);
                FeatureStack::new(format!("g{i}"), v)
            })
            .collect::<Result<_>>()?;
        let items: Vec<(&FeatureStack, Label)> = stacks.iter().zip(labels).collect();

        // Redraw if the contrastive hinge sits within reach of the probe step.
        let mut tape = Tape::new();
        let vars = model.params.on_tape(&mut tape);
        let mut emb = Vec::new();
        for ((s, _), &m) in items.iter().zip(&modes) {
            emb.push(crate::model::forward_on(&mut tape, &cfg, &vars, s, m)?.embedding);
        }
        let emb = tape.concat_rows(&emb)?;
        if !hinge_clear(tape.value(emb), &labels, &loss) {
            continue;
        }

        let template = model.params.clone();
        let leaves: Vec<Tensor> = template.leaves().into_iter().cloned().collect();
        return check_tape_fn(
            &leaves,
            |tape, vars| {
                let params = template.with_leaves(vars);
                Ok(batch_objective(tape, &cfg, &params, &items, &modes, &loss)?.total)
            },
            opts.step,
            opts.fault,
        );
    }
}

/// Runs every op probe, a softmax/cross-entropy composite and the full
/// objective through the whole model.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut lines = Vec::new();
    for kind in CHECKED_OPS {
        let (inputs, build) = op_case(kind, &mut rng);
        let check = check_tape_fn(&inputs, build, opts.step, opts.fault)?;
        lines.push(line(kind.name(), check, OP_TOLERANCE));
    }

    let logits = random_input::<f64>(&[6, 2], &mut rng);
    let composite = check_tape_fn(
        &[logits],
        |t, v| {
            let p = t.softmax(v[0], 1)?;
            let p = t.scale(p, 3.0);
            cross_entropy_on(t, p, &MIXED)
        },
        opts.step,
        opts.fault,
    )?;
    lines.push(line("softmax+cross_entropy", composite, OP_TOLERANCE));

    let e2e = end_to_end(opts, &mut rng)?;
    lines.push(line("end_to_end", e2e, END_TO_END_TOLERANCE));
    Ok(GradcheckReport { lines })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.lines.len(), CHECKED_OPS.len() + 2);
    }

    #[test]
    fn names_resolve() {
        for k in CHECKED_OPS {
            assert_eq!(op_kind_by_name(k.name()), Some(k));
        }
        assert_eq!(op_kind_by_name("leaf"), None);
    }

    #[test]
    fn faults_are_caught() {
        for name in ["tanh", "layer_norm", "contrastive_margin"] {
            let opts = GradcheckOptions {
                fault: op_kind_by_name(name),
                ..GradcheckOptions::default()
            };
            let report = run_gradcheck(&opts).unwrap();
            assert!(!report.get(name).unwrap().passed, "{name}");
            assert!(!report.get("end_to_end").unwrap().passed, "{name}");
            assert!(report.get("transpose").unwrap().passed);
        }
    }
}
