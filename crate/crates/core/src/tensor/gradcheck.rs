//! Central finite-difference oracle for analytic gradients.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::scalar::Scalar;

use super::{OpKind, Tape, Tensor, Var};

/// Floor for the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compares `analytic` against `(f(p+h) - f(p-h)) / 2h` coordinate by
/// coordinate. Relative error uses `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<S, F>(
    mut f: F,
    params: &[Tensor<S>],
    analytic: &[Tensor<S>],
    h: S,
) -> GradCheck
where
    S: Scalar,
    F: FnMut(&[Tensor<S>]) -> S,
{
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut probe: Vec<Tensor<S>> = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let two_h = (h + h).as_f64();
    for (pi, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), params[pi].shape(), "gradient shape");
        for c in 0..params[pi].numel() {
            let orig = params[pi].data()[c];
            probe[pi].data_mut()[c] = orig + h;
            let up = f(&probe).as_f64();
            probe[pi].data_mut()[c] = orig - h;
            let down = f(&probe).as_f64();
            probe[pi].data_mut()[c] = orig;

            let numeric = (up - down) / two_h;
            let exact = grad.data()[c].as_f64();
            let denom = exact.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let rel = (exact - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((pi, c));
            }
        }
    }
    report
}

/// Weights that fold a non-scalar output into a scalar so that every output
/// coordinate receives a distinct upstream gradient.
fn projection_weights<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9d1f_3c07);
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng)
}

fn reduce_to_scalar<S: Scalar>(tape: &mut Tape<S>, out: Var) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = projection_weights(tape.value(out).shape());
    let weighted = tape.mul_const(out, w)?;
    Ok(tape.sum(weighted))
}

/// Records `build` over leaves holding `inputs`, backpropagates, and checks
/// every input gradient by finite differences. A non-scalar output is folded
/// with fixed random weights first. `fault` corrupts one backward rule in the
/// analytic pass only.
pub fn check_tape_fn<S, B>(
    inputs: &[Tensor<S>],
    build: B,
    h: S,
    fault: Option<OpKind>,
) -> Result<GradCheck>
where
    S: Scalar,
    B: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_backward_fault(kind);
    }
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &leaves)?;
    let out = reduce_to_scalar(&mut tape, out)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<S>> = leaves.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |params: &[Tensor<S>]| -> S {
        let mut t = Tape::new();
        let leaves: Vec<Var> = params.iter().map(|p| t.leaf(p.clone())).collect();
        let out = build(&mut t, &leaves).expect("forward succeeded once");
        let out = reduce_to_scalar(&mut t, out).expect("forward succeeded once");
        t.value(out).item()
    };
    Ok(finite_difference_check(eval, inputs, &analytic, h))
}

/// Random tensor with entries in `[-2, 2]`.
pub fn random_input<S: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<S> {
    Tensor::uniform(shape.to_vec(), -2.0, 2.0, rng)
}
