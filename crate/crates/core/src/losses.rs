//! Classification and margin-contrastive objectives.
//!
//! The contrastive term compares, for every anchor, the mean cosine similarity
//! to same-class samples against the mean similarity to opposite-class
//! samples in the batch, and penalizes anchors whose gap is below the margin:
//!
//! ```text
//! con = (1/N) Σ_i max(0, m + mean_neg(i) - mean_pos(i))
//! total = ce + lambda_con * con
//! ```
//!
//! Anchors without a positive or without a negative partner contribute 0
//! while the `1/N` normalizer still counts them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;
use crate::scalar::Scalar;
use crate::tensor::{cosine_similarity, Tape, Tensor, Var, COSINE_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda_con: f64,
    /// Count the anchor itself among its positives.
    pub include_anchor: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.5,
            lambda_con: 0.1,
            include_anchor: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.lambda_con >= 0.0 && self.lambda_con.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_con must be >= 0, got {}",
                self.lambda_con
            )));
        }
        Ok(())
    }
}

/// Model outputs for one batch, rows aligned with `labels`.
#[derive(Debug, Clone)]
pub struct Batch<S = f64> {
    pub embeddings: Tensor<S>,
    pub logits: Tensor<S>,
    pub labels: Vec<Label>,
}

impl<S: Scalar> Batch<S> {
    pub fn new(embeddings: Tensor<S>, logits: Tensor<S>, labels: Vec<Label>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("batch must hold at least one sample".into()));
        }
        check_rows("batch embeddings", &embeddings, labels.len())?;
        check_rows("batch logits", &logits, labels.len())?;
        Ok(Batch {
            embeddings,
            logits,
            labels,
        })
    }
}

fn check_rows<S: Scalar>(op: &'static str, t: &Tensor<S>, n: usize) -> Result<()> {
    if t.rank() != 2 || t.rows() != n {
        return Err(Error::shape(op, t.shape(), &[n]));
    }
    Ok(())
}

/// Loss components reported per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub con: f64,
}

/// Mean two-class softmax cross-entropy.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[Label]) -> Result<S> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[Label],
) -> Result<(S, Tensor<S>)> {
    check_rows("cross_entropy", logits, labels.len())?;
    if labels.is_empty() {
        return Err(Error::Data("cross_entropy on an empty batch".into()));
    }
    let classes = logits.cols();
    let n = S::from_usize(labels.len()).expect("batch size fits");
    let mut loss = S::zero();
    let mut grad = vec![S::zero(); logits.numel()];
    for (i, &label) in labels.iter().enumerate() {
        let k = label.index();
        if k >= classes {
            return Err(Error::Data(format!(
                "label index {k} out of range for {classes} logits"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let total: S = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + total.ln();
        loss += if row[k] == max {
            // ln(1 + rest) keeps a strictly positive loss for confident rows
            let rest: S = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .map(|(_, &v)| (v - max).exp())
                .sum();
            rest.ln_1p()
        } else {
            lse - row[k]
        };
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let onehot = if j == k { S::one() } else { S::zero() };
            grad[i * classes + j] = (p - onehot) / n;
        }
    }
    Ok((loss / n, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean cosine similarity of anchor `i` to its positives and negatives;
/// `None` for an empty set.
pub fn mean_similarities<S: Scalar>(
    embeddings: &Tensor<S>,
    labels: &[Label],
    i: usize,
    include_anchor: bool,
) -> Result<(Option<S>, Option<S>)> {
    check_rows("mean_similarities", embeddings, labels.len())?;
    if i >= labels.len() {
        return Err(Error::Param(format!(
            "anchor {i} out of range for batch of {}",
            labels.len()
        )));
    }
    let (mut pos, mut n_pos, mut neg, mut n_neg) = (S::zero(), 0usize, S::zero(), 0usize);
    for (j, &lj) in labels.iter().enumerate() {
        if j == i && !include_anchor {
            continue;
        }
        let c = cosine_similarity(embeddings.row(i), embeddings.row(j))?;
        if lj == labels[i] {
            pos += c;
            n_pos += 1;
        } else {
            neg += c;
            n_neg += 1;
        }
    }
    let mean = |s: S, k: usize| (k > 0).then(|| s / S::from_usize(k).expect("count fits"));
    Ok((mean(pos, n_pos), mean(neg, n_neg)))
}

/// Contrastive loss with its gradient and per-anchor hinge arguments
/// (`None` for skipped anchors).
#[derive(Debug, Clone)]
pub struct ContrastiveOutcome<S = f64> {
    pub loss: S,
    pub grad: Tensor<S>,
    pub hinge_args: Vec<Option<S>>,
}

pub fn contrastive_margin<S: Scalar>(
    embeddings: &Tensor<S>,
    labels: &[Label],
    cfg: &LossConfig,
) -> Result<S> {
    Ok(contrastive_margin_with_grad(embeddings, labels, cfg)?.loss)
}

/// Contrastive margin loss. At the hinge kink (argument exactly 0) the
/// subgradient is taken as 0.
pub fn contrastive_margin_with_grad<S: Scalar>(
    embeddings: &Tensor<S>,
    labels: &[Label],
    cfg: &LossConfig,
) -> Result<ContrastiveOutcome<S>> {
    check_rows("contrastive_margin", embeddings, labels.len())?;
    let n = labels.len();
    let d = embeddings.cols();
    let eps = S::lit(COSINE_EPS);
    let norms: Vec<S> = (0..n)
        .map(|i| embeddings.row(i).iter().map(|&v| v * v).sum::<S>().sqrt())
        .collect();
    let dots: Vec<S> = (0..n * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            embeddings
                .row(i)
                .iter()
                .zip(embeddings.row(j))
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect();
    let cos = |i: usize, j: usize| dots[i * n + j] / (norms[i] * norms[j] + eps);

    let nf = S::from_usize(n).expect("batch size fits");
    let margin = S::lit(cfg.margin);
    let mut loss = S::zero();
    let mut hinge_args = Vec::with_capacity(n);
    // d loss / d cos(i, j)
    let mut weights = vec![S::zero(); n * n];
    for i in 0..n {
        let members = |same: bool| {
            (0..n)
                .filter(move |&j| (labels[j] == labels[i]) == same)
                .filter(move |&j| !same || j != i || cfg.include_anchor)
        };
        let pos: Vec<usize> = members(true).collect();
        let neg: Vec<usize> = members(false).collect();
        if pos.is_empty() || neg.is_empty() {
            hinge_args.push(None);
            continue;
        }
        let np = S::from_usize(pos.len()).expect("count fits");
        let nn = S::from_usize(neg.len()).expect("count fits");
        let s_pos = pos.iter().map(|&j| cos(i, j)).sum::<S>() / np;
        let s_neg = neg.iter().map(|&j| cos(i, j)).sum::<S>() / nn;
        let arg = margin + s_neg - s_pos;
        hinge_args.push(Some(arg));
        if arg > S::zero() {
            loss += arg;
            for &j in &pos {
                weights[i * n + j] -= (nf * np).recip();
            }
            for &j in &neg {
                weights[i * n + j] += (nf * nn).recip();
            }
        }
    }
    loss /= nf;

    let mut grad = vec![S::zero(); n * d];
    for i in 0..n {
        for j in 0..n {
            let w = weights[i * n + j];
            if w == S::zero() {
                continue;
            }
            let den = norms[i] * norms[j] + eps;
            let dot = dots[i * n + j];
            let (a, b) = (embeddings.row(i), embeddings.row(j));
            for k in 0..d {
                // d cos / d a_k = b_k/den - dot * |b| * (a_k/|a|) / den^2
                let radial_a = if norms[i] > S::zero() {
                    dot * norms[j] * a[k] / (norms[i] * den * den)
                } else {
                    S::zero()
                };
                let radial_b = if norms[j] > S::zero() {
                    dot * norms[i] * b[k] / (norms[j] * den * den)
                } else {
                    S::zero()
                };
                grad[i * d + k] += w * (b[k] / den - radial_a);
                grad[j * d + k] += w * (a[k] / den - radial_b);
            }
        }
    }
    Ok(ContrastiveOutcome {
        loss,
        grad: Tensor::new(embeddings.shape().to_vec(), grad)?,
        hinge_args,
    })
}

/// Independent reference for [`contrastive_margin`] (anchor excluded from its
/// positives): a literal double loop sharing no code with the main path.
#[allow(clippy::needless_range_loop)]
pub fn brute_force_contrastive<S: Scalar>(
    embeddings: &Tensor<S>,
    labels: &[Label],
    margin: f64,
) -> f64 {
    let n = labels.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| embeddings.row(i).iter().map(|v| v.as_f64()).collect())
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        let mut pos_sum = 0.0;
        let mut pos_count = 0;
        let mut neg_sum = 0.0;
        let mut neg_count = 0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut dot = 0.0;
            let mut ni = 0.0;
            let mut nj = 0.0;
            for k in 0..rows[i].len() {
                dot += rows[i][k] * rows[j][k];
                ni += rows[i][k] * rows[i][k];
                nj += rows[j][k] * rows[j][k];
            }
            let c = dot / (ni.sqrt() * nj.sqrt() + 1e-8);
            if labels[i] == labels[j] {
                pos_sum += c;
                pos_count += 1;
            } else {
                neg_sum += c;
                neg_count += 1;
            }
        }
        if pos_count == 0 || neg_count == 0 {
            continue;
        }
        let hinge = margin + neg_sum / neg_count as f64 - pos_sum / pos_count as f64;
        if hinge > 0.0 {
            total += hinge;
        }
    }
    total / n as f64
}

/// Joint objective `ce + lambda_con * con`.
pub fn total_loss<S: Scalar>(batch: &Batch<S>, cfg: &LossConfig) -> Result<LossBreakdown> {
    let ce = cross_entropy(&batch.logits, &batch.labels)?.as_f64();
    let con = contrastive_margin(&batch.embeddings, &batch.labels, cfg)?.as_f64();
    Ok(LossBreakdown {
        total: ce + cfg.lambda_con * con,
        ce,
        con,
    })
}

pub const CROSS_ENTROPY_OP: &str = "cross_entropy";
pub const CONTRASTIVE_OP: &str = "contrastive_margin";

pub fn cross_entropy_on<S: Scalar>(tape: &mut Tape<S>, logits: Var, labels: &[Label]) -> Result<Var> {
    let (value, grad) = cross_entropy_with_grad(tape.value(logits), labels)?;
    tape.fused_scalar(CROSS_ENTROPY_OP, logits, value, grad)
}

pub fn contrastive_on<S: Scalar>(
    tape: &mut Tape<S>,
    embeddings: Var,
    labels: &[Label],
    cfg: &LossConfig,
) -> Result<Var> {
    let out = contrastive_margin_with_grad(tape.value(embeddings), labels, cfg)?;
    tape.fused_scalar(CONTRASTIVE_OP, embeddings, out.loss, out.grad)
}

/// Tape nodes for the joint objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub con: Var,
}

impl LossVars {
    pub fn breakdown<S: Scalar>(&self, tape: &Tape<S>) -> LossBreakdown {
        LossBreakdown {
            total: tape.value(self.total).item().as_f64(),
            ce: tape.value(self.ce).item().as_f64(),
            con: tape.value(self.con).item().as_f64(),
        }
    }
}

pub fn total_loss_on<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    embeddings: Var,
    labels: &[Label],
    cfg: &LossConfig,
) -> Result<LossVars> {
    cfg.validate()?;
    let ce = cross_entropy_on(tape, logits, labels)?;
    let con = contrastive_on(tape, embeddings, labels, cfg)?;
    let weighted = tape.scale(con, S::lit(cfg.lambda_con));
    let total = tape.add(ce, weighted)?;
    Ok(LossVars { total, ce, con })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_tape_fn, random_input};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use Label::{Fake, Real};

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn ce_uniform_and_confident() {
        let uniform = m(&[&[0.0, 0.0]]);
        for label in [Real, Fake] {
            let l = cross_entropy(&uniform, &[label]).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        }
        let confident = m(&[&[20.0, -20.0]]);
        assert!(cross_entropy(&confident, &[Real]).unwrap() < 1e-8);
        assert!(cross_entropy(&confident, &[Real]).unwrap() > 0.0);
    }

    #[test]
    fn ce_row_mismatch_is_error() {
        assert!(cross_entropy(&m(&[&[0.0, 0.0]]), &[Real, Fake]).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = [Real, Fake, Fake, Real, Fake];
        let inputs = [random_input::<f64>(&[5, 2], &mut rng)];
        let c = check_tape_fn(&inputs, |t, v| cross_entropy_on(t, v[0], &labels), 1e-6, None)
            .unwrap();
        assert!(c.max_rel_error <= 1e-6, "{c:?}");
    }

    #[test]
    fn mean_similarities_small_cases() {
        let same = m(&[&[1.0, 2.0], &[1.0, 2.0]]);
        let (p, n) = mean_similarities(&same, &[Real, Real], 0, false).unwrap();
        // cos(v, v) = |v|^2 / (|v|^2 + eps)
        assert!((p.unwrap() - 1.0).abs() < 1e-8);
        assert!(n.is_none());

        let ortho = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (p, n) = mean_similarities(&ortho, &[Real, Fake], 0, false).unwrap();
        assert!(p.is_none());
        assert_eq!(n, Some(0.0));
    }

    #[test]
    fn contrastive_degenerate_batches() {
        let single = m(&[&[1.0, 0.0], &[0.3, 0.2], &[-1.0, 4.0]]);
        let cfg = LossConfig::default();
        assert_eq!(contrastive_margin(&single, &[Fake, Fake, Fake], &cfg).unwrap(), 0.0);

        let pair = m(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(contrastive_margin(&pair, &[Real, Fake], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn contrastive_hand_evaluated_geometry() {
        let cfg = LossConfig::default();
        let labels = [Real, Real, Fake, Fake];
        let separated = m(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(contrastive_margin(&separated, &labels, &cfg).unwrap(), 0.0);

        // cos(a, b) = 0.8
        let close = m(&[&[1.0, 0.0], &[1.0, 0.0], &[0.8, 0.6], &[0.8, 0.6]]);
        let loss = contrastive_margin(&close, &labels, &cfg).unwrap();
        assert!((loss - 0.3).abs() < 1e-7, "{loss}");
        assert!((brute_force_contrastive(&close, &labels, 0.5) - loss).abs() < 1e-12);
    }

    #[test]
    fn contrastive_zero_margin_identical_embeddings() {
        let cfg = LossConfig {
            margin: 0.0,
            ..LossConfig::default()
        };
        let x = m(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(contrastive_margin(&x, &[Real, Fake, Fake], &cfg).unwrap(), 0.0);
        assert_eq!(brute_force_contrastive(&x, &[Real, Fake, Fake], 0.0), 0.0);
    }

    #[test]
    fn include_anchor_changes_positive_mean() {
        let x = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let labels = [Real, Real, Fake];
        let (p_ex, _) = mean_similarities(&x, &labels, 0, false).unwrap();
        let (p_in, _) = mean_similarities(&x, &labels, 0, true).unwrap();
        assert!(p_ex.unwrap().abs() < 1e-12);
        assert!((p_in.unwrap() - 0.5).abs() < 1e-7);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for include_anchor in [false, true] {
            let cfg = LossConfig {
                margin: 1.0,
                include_anchor,
                ..LossConfig::default()
            };
            let labels = [Real, Fake, Real, Fake, Fake, Real];
            let inputs = [random_input::<f64>(&[6, 4], &mut rng)];
            let c = check_tape_fn(&inputs, |t, v| contrastive_on(t, v[0], &labels, &cfg), 1e-6, None)
                .unwrap();
            assert!(c.max_rel_error <= 1e-5, "{c:?}");
        }
    }

    #[test]
    fn zero_embedding_is_guarded() {
        let x = m(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let out =
            contrastive_margin_with_grad(&x, &[Real, Real, Fake], &LossConfig::default()).unwrap();
        assert!(out.loss.is_finite());
        assert!(out.grad.is_finite());
    }

    #[test]
    fn total_loss_weighting() {
        let batch = Batch::new(
            m(&[&[1.0, 0.2], &[0.1, 1.0], &[0.9, 0.3]]),
            m(&[&[0.3, -0.2], &[1.0, 0.5], &[-0.4, 0.4]]),
            vec![Real, Fake, Real],
        )
        .unwrap();
        let off = LossConfig {
            lambda_con: 0.0,
            ..LossConfig::default()
        };
        let b = total_loss(&batch, &off).unwrap();
        assert_eq!(b.total, b.ce);
        let on = total_loss(&batch, &LossConfig::default()).unwrap();
        assert!((on.total - (on.ce + 0.1 * on.con)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { margin: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda_con: f64::NAN, ..Default::default() }.validate().is_err());
        assert_eq!(LossConfig::default().lambda_con, 0.1);
    }

    fn random_batch(rng: &mut ChaCha8Rng) -> (Tensor, Vec<Label>) {
        let n = rng.random_range(2..=16);
        let d = rng.random_range(1..=32);
        let x = Tensor::uniform([n, d], -2.0, 2.0, rng);
        let single = rng.random_bool(0.15);
        let labels = (0..n)
            .map(|_| if single || rng.random_bool(0.5) { Fake } else { Real })
            .collect();
        (x, labels)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn contrastive_matches_oracle(seed in any::<u64>(), margin in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, labels) = random_batch(&mut rng);
            let cfg = LossConfig { margin, ..LossConfig::default() };
            let fast = contrastive_margin(&x, &labels, &cfg).unwrap();
            let slow = brute_force_contrastive(&x, &labels, margin);
            prop_assert!((fast - slow).abs() <= 1e-12);
            prop_assert!(fast >= 0.0 && fast <= margin + 2.0);
        }

        // Exact up to eps/(|a||b|); rows are scaled to norm >= 10 so that
        // term stays below 1e-9 for c >= 0.5.
        #[test]
        fn contrastive_scale_invariant(seed in any::<u64>(), c in 0.5f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut x, labels) = random_batch(&mut rng);
            let d = x.cols();
            for row in x.data_mut().chunks_mut(d) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let target = rng.random_range(10.0..50.0);
                for v in row.iter_mut() {
                    *v *= target / norm.max(1e-3);
                }
            }
            let cfg = LossConfig::default();
            let i = rng.random_range(0..labels.len());
            let mut scaled = x.clone();
            for v in &mut scaled.data_mut()[i * d..(i + 1) * d] {
                *v *= c;
            }
            let a = contrastive_margin(&x, &labels, &cfg).unwrap();
            let b = contrastive_margin(&scaled, &labels, &cfg).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn ce_is_permutation_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..10);
            let logits = Tensor::<f64>::uniform([n, 2], -3.0, 3.0, &mut rng);
            let labels: Vec<Label> = (0..n).map(|_| if rng.random_bool(0.5) { Fake } else { Real }).collect();
            let base = cross_entropy(&logits, &labels).unwrap();
            let rev_rows: Vec<Vec<f64>> = (0..n).rev().map(|i| logits.row(i).to_vec()).collect();
            let rev_labels: Vec<Label> = labels.iter().rev().copied().collect();
            let other = cross_entropy(&Tensor::from_rows(&rev_rows).unwrap(), &rev_labels).unwrap();
            prop_assert!((base - other).abs() <= 1e-12);
            prop_assert!(base > 0.0);
        }
    }
}
