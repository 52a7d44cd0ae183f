//! Dense row-major tensors, their forward kernels, and the reverse-mode tape.
//!
//! Forward kernels live on [`Tensor`] and are usable on their own. The
//! [`Tape`] records the same kernels and replays analytic backward rules;
//! [`gradcheck`] validates every rule against central finite differences.

pub mod gradcheck;
mod tape;

pub use tape::{Gradients, OpKind, Tape, Var};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-8;

/// Dense tensor with explicit shape and row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Param(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("positive extents")
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Tensor::new([1], vec![value]).expect("singleton")
    }

    pub fn vector(data: Vec<S>) -> Result<Self> {
        let n = data.len();
        Tensor::new([n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Tensor::new([rows, cols], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", &[cols], &[bad.len()]));
        }
        Tensor::new([rows.len(), cols], rows.concat())
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| S::lit(rng.random_range(lo..hi)))
            .collect();
        Tensor::new(shape, data).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Row `i` of the tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![0; rank],
            });
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Matrix product of `[m × k]` and `[k × n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.expect_rank("matmul", 2)?;
        other.expect_rank("matmul", 2)?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == S::zero() {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new([m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        self.expect_rank("transpose", 2)?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new([n, m], out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("add", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Adds `bias` (length = last extent) to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let n = *self.shape.last().expect("rank >= 1");
        if bias.numel() != n {
            return Err(Error::shape("add_row", &self.shape, &bias.shape));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    /// Elementwise product with a same-shape tensor.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("mul", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn tanh_map(&self) -> Self {
        self.map(S::tanh)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > S::zero() { v } else { S::zero() })
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Softmax along `axis` with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = self.split_axis("softmax", axis)?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| o * len * inner + t * inner + i;
                let max = (0..len)
                    .map(|t| self.data[at(t)])
                    .fold(S::neg_infinity(), S::max);
                let mut total = S::zero();
                for t in 0..len {
                    let e = (self.data[at(t)] - max).exp();
                    out[at(t)] = e;
                    total += e;
                }
                for t in 0..len {
                    out[at(t)] /= total;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Mean along `axis`; the axis is removed from the shape (a rank-1 input
    /// reduces to shape `[1]`).
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = self.split_axis("mean_axis", axis)?;
        let n = S::from_usize(len).expect("extent fits");
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for t in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += self.data[o * len * inner + t * inner + i];
                }
            }
        }
        for v in &mut out {
            *v /= n;
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::new(shape, out)
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: S) -> Result<Self> {
        Ok(self.layer_norm_parts(gain, bias, eps)?.0)
    }

    /// Layer norm returning `(output, normalized, inverse std per row)`.
    pub(crate) fn layer_norm_parts(
        &self,
        gain: &Self,
        bias: &Self,
        eps: S,
    ) -> Result<(Self, Vec<S>, Vec<S>)> {
        let n = *self.shape.last().expect("rank >= 1");
        if gain.numel() != n {
            return Err(Error::shape("layer_norm", &self.shape, &gain.shape));
        }
        if bias.numel() != n {
            return Err(Error::shape("layer_norm", &self.shape, &bias.shape));
        }
        if eps <= S::zero() {
            return Err(Error::Param("layer_norm eps must be positive".into()));
        }
        let nf = S::from_usize(n).expect("extent fits");
        let mut out = vec![S::zero(); self.numel()];
        let mut xhat = vec![S::zero(); self.numel()];
        let mut inv_std = Vec::with_capacity(self.numel() / n);
        for (r, row) in self.data.chunks(n).enumerate() {
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let istd = (var + eps).sqrt().recip();
            inv_std.push(istd);
            for j in 0..n {
                let h = (row[j] - mean) * istd;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gain.data[j] + bias.data[j];
            }
        }
        Ok((Tensor::new(self.shape.clone(), out)?, xhat, inv_std))
    }

    /// Stacks equally sized tensors as the rows of a matrix.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("concat_rows needs at least one part".into()))?;
        let cols = first.numel();
        let mut data = Vec::with_capacity(cols * parts.len());
        let mut rows = 0;
        for p in parts {
            let (r, c) = if p.rank() == 1 {
                (1, p.numel())
            } else {
                (p.rows(), p.cols())
            };
            let expect = if first.rank() == 1 { cols } else { first.cols() };
            if c != expect {
                return Err(Error::shape("concat_rows", &first.shape, &p.shape));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        let c = if first.rank() == 1 { cols } else { first.cols() };
        Tensor::new([rows, c], data)
    }

    /// Returns `(outer, extent, inner)` strides around `axis`.
    fn split_axis(&self, op: &'static str, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![axis],
            });
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }
}

/// Cosine similarity with `COSINE_EPS` added to the norm product, so a zero
/// vector yields 0 rather than dividing by zero.
pub fn cosine_similarity<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<S>().sqrt();
    Ok(dot / (na * nb + S::lit(COSINE_EPS)))
}

/// Inverted-dropout keep mask: each element is `1/(1-rate)` with probability
/// `1-rate`, else 0. Deterministic in `seed`; rate 0 gives all ones.
pub fn dropout_mask<S: Scalar>(shape: &[usize], rate: f64, seed: u64) -> Result<Tensor<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_mask_from(shape, rate, &mut rng)
}

pub(crate) fn dropout_mask_from<S: Scalar>(
    shape: &[usize],
    rate: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<S>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Param(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if rate == 0.0 {
        return Ok(Tensor::ones(shape.to_vec()));
    }
    let keep = S::lit(1.0 / (1.0 - rate));
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            if rng.random::<f64>() < rate {
                S::zero()
            } else {
                keep
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}
