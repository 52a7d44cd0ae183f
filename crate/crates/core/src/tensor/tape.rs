use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Reshape,
    Add,
    AddRow,
    Scale,
    MulConst,
    Tanh,
    Relu,
    Softmax,
    MeanAxis,
    Sum,
    LayerNorm,
    ConcatRows,
    /// Scalar-valued op supplied with its own local gradient (loss kernels).
    Fused(&'static str),
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::MulConst => "mul_const",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::MeanAxis => "mean_axis",
            OpKind::Sum => "sum",
            OpKind::LayerNorm => "layer_norm",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Fused(name) => name,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    MulConst(Var, Tensor<S>),
    Tanh(Var),
    Relu(Var),
    Softmax(Var, usize),
    MeanAxis(Var, usize),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    ConcatRows(Vec<Var>),
    Fused {
        name: &'static str,
        input: Var,
        local_grad: Tensor<S>,
    },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::MulConst(..) => OpKind::MulConst,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::MeanAxis(..) => OpKind::MeanAxis,
            Op::Sum(_) => OpKind::Sum,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::Fused { name, .. } => OpKind::Fused(name),
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Append-only record of a forward computation.
///
/// Values are immutable once pushed. [`Tape::backward`] walks the record in
/// reverse and accumulates gradients for every node that reaches the output.
pub struct Tape<S = f64> {
    nodes: Vec<Node<S>>,
    fault: Option<OpKind>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales every backward contribution of `kind` by 1.5. Negative control
    /// for the gradient checker; never set outside tests and `gradcheck`.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).transpose()?;
        Ok(self.push(y, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let y = self.value(x).reshaped(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let y = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(y, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let y = self.value(x).scale(c);
        self.push(y, Op::Scale(x, c))
    }

    /// Elementwise product with a constant (no gradient flows into `mask`).
    pub fn mul_const(&mut self, x: Var, mask: Tensor<S>) -> Result<Var> {
        let y = self.value(x).mul(&mask)?;
        Ok(self.push(y, Op::MulConst(x, mask)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).tanh_map();
        self.push(y, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).relu();
        self.push(y, Op::Relu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = self.value(x).softmax(axis)?;
        Ok(self.push(y, Op::Softmax(x, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = self.value(x).mean_axis(axis)?;
        Ok(self.push(y, Op::MeanAxis(x, axis)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let (y, xhat, inv_std) =
            self.value(x)
                .layer_norm_parts(self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_rows(&values)?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec())))
    }

    /// Records a scalar computed outside the tape from `input`, together with
    /// d(value)/d(input).
    pub fn fused_scalar(
        &mut self,
        name: &'static str,
        input: Var,
        value: S,
        local_grad: Tensor<S>,
    ) -> Result<Var> {
        if local_grad.shape() != self.value(input).shape() {
            return Err(Error::shape(
                "fused_scalar",
                self.value(input).shape(),
                local_grad.shape(),
            ));
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::Fused {
                name,
                input,
                local_grad,
            },
        ))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients<S>> {
        let out_node = &self.nodes[out.0];
        if out_node.value.numel() != 1 {
            return Err(Error::shape("backward", out_node.value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![S::one()]);

        for i in (0..=out.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if self.fault == Some(node.op.kind()) {
                for v in &mut g {
                    *v *= S::lit(1.5);
                }
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let (ad, bd) = (av.data(), bv.data());
                self.accumulate(grads, *a, |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = S::zero();
                            for j in 0..n {
                                s += g[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += a_ip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                self.accumulate(grads, *x, |dx| {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |dx| add_into(dx, g)),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| add_into(da, g));
                self.accumulate(grads, *b, |db| add_into(db, g));
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, |dx| add_into(dx, g));
                let n = self.value(*bias).numel();
                self.accumulate(grads, *bias, |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, |dx| {
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += *c * gi;
                }
            }),
            Op::MulConst(x, mask) => self.accumulate(grads, *x, |dx| {
                for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask.data()) {
                    *d += gi * m;
                }
            }),
            Op::Tanh(x) => self.accumulate(grads, *x, |dx| {
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * (S::one() - yi * yi);
                }
            }),
            Op::Relu(x) => self.accumulate(grads, *x, |dx| {
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                    if yi > S::zero() {
                        *d += gi;
                    }
                }
            }),
            Op::Softmax(x, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                self.accumulate(grads, *x, |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |t: usize| o * len * inner + t * inner + i;
                            let dot: S = (0..len).map(|t| g[at(t)] * y[at(t)]).sum();
                            for t in 0..len {
                                dx[at(t)] += y[at(t)] * (g[at(t)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MeanAxis(x, axis) => {
                let shape = self.value(*x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let scale = S::from_usize(len).expect("extent fits").recip();
                self.accumulate(grads, *x, |dx| {
                    for o in 0..outer {
                        for t in 0..len {
                            for i in 0..inner {
                                dx[o * len * inner + t * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |dx| {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                let nf = S::from_usize(n).expect("extent fits");
                self.accumulate(grads, *gain, |dg| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for gr in g.chunks(n) {
                        add_into(db, gr);
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<S> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let sum_dh: S = dh.iter().copied().sum();
                        let sum_dh_h: S = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[r] / nf;
                        for j in 0..n {
                            dx[r * n + j] += k * (nf * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Fused {
                input, local_grad, ..
            } => self.accumulate(grads, *input, |dx| {
                for (d, &l) in dx.iter_mut().zip(local_grad.data()) {
                    *d += g[0] * l;
                }
            }),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        let len = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); len]);
        f(slot);
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of one output with respect to every recorded node.
pub struct Gradients<S = f64> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shaped like value"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn reaches(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_of_ops_backprops() {
        // y = sum(tanh(x) * 2)
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, -1.0]).unwrap());
        let t = tape.tanh(x);
        let s = tape.scale(t, 2.0);
        let y = tape.sum(s);
        let g = tape.backward(y).unwrap().wrt(x);
        for (gi, xi) in g.data().iter().zip([0.5f64, -1.0]) {
            let expect = 2.0 * (1.0 - xi.tanh().powi(2));
            assert!((gi - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(x + x)
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let d = tape.add(x, x).unwrap();
        let y = tape.sum(d);
        assert_eq!(tape.backward(y).unwrap().wrt(x).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn unreached_leaf_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]).unwrap());
        let unused = tape.leaf(Tensor::zeros([2, 2]));
        let y = tape.sum(x);
        let g = tape.backward(y).unwrap();
        assert!(!g.reaches(unused));
        assert_eq!(g.wrt(unused), Tensor::zeros([2, 2]));
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn injected_fault_changes_gradient() {
        let mut tape = Tape::<f64>::new();
        tape.inject_backward_fault(OpKind::Scale);
        let x = tape.leaf(Tensor::vector(vec![1.0]).unwrap());
        let s = tape.scale(x, 3.0);
        let y = tape.sum(s);
        assert_eq!(tape.backward(y).unwrap().wrt(x).data(), &[4.5]);
    }
}
