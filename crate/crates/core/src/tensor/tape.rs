//! Dynamic reverse-mode tape. A fresh tape is built for every forward pass;
//! nodes are appended in evaluation order so the node list is already a
//! topological order of the DAG.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::conv;
use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::gp::linalg::cholesky_safe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    LeakyRelu,
    Identity,
}

/// Slope used by [`Activation::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.1;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy(NodeId, NodeId),
    AddScalar(NodeId, NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Act(NodeId, Activation),
    Sum(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Conv(NodeId, NodeId, NodeId),
    Reshape(NodeId),
    Stack(Vec<NodeId>),
    Channel(NodeId, usize),
    ScaleRows(NodeId, Vec<f64>),
    EqWeights { sqdist: Tensor, lengthscale: NodeId },
    AddIdentity(NodeId, NodeId),
    Diag(NodeId),
    NearestPsd {
        input: NodeId,
        vectors: DMatrix<f64>,
        divided: DMatrix<f64>,
    },
    GaussianNll {
        mean: NodeId,
        cov: NodeId,
        inv: DMatrix<f64>,
        alpha: DVector<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = matches!(op, Op::Param(_))
            || parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, &[])
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let node = self.push(store.get(id).clone(), Op::Param(id), &[]);
        self.params.insert(id, node);
        node
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op, va, vb));
        }
        Ok(())
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape")
    }

    fn scalar_of(&self, op: &'static str, s: NodeId) -> Result<f64> {
        self.value(s)
            .item()
            .ok_or_else(|| mismatch(op, self.value(s), &Tensor::scalar(0.0)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor), &[a])
    }

    /// `a * s` for a single-element node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let k = self.scalar_of("scale_by", s)?;
        let v = self.value(a).map(|x| x * k);
        Ok(self.push(v, Op::ScaleBy(a, s), &[a, s]))
    }

    /// `a + s` for a single-element node `s`.
    pub fn add_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let k = self.scalar_of("add_scalar", s)?;
        let v = self.value(a).map(|x| x + k);
        Ok(self.push(v, Op::AddScalar(a, s), &[a, s]))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn pointwise(&mut self, a: NodeId, act: Activation) -> NodeId {
        if act == Activation::Identity {
            return a;
        }
        let v = self.value(a).map(|x| act.apply(x));
        self.push(v, Op::Act(a, act), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(mismatch("matmul", va, vb));
        }
        let v = matmul(va, vb);
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(mismatch("transpose", va, va));
        }
        let v = transpose(va);
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    /// "Same"-padded convolution; see [`conv::conv`] for layouts.
    pub fn conv(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = conv::conv(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(v, Op::Conv(x, w, b), &[x, w, b]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Stacks equally shaped nodes along a new trailing channel axis.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(parts[0]);
        let mut shape = first.shape().to_vec();
        for p in &parts[1..] {
            if self.value(*p).shape() != first.shape() {
                return Err(mismatch("stack", first, self.value(*p)));
            }
        }
        let (n, c) = (first.len(), parts.len());
        let mut data = vec![0.0; n * c];
        for (ci, p) in parts.iter().enumerate() {
            for (i, &x) in self.value(*p).data().iter().enumerate() {
                data[i * c + ci] = x;
            }
        }
        shape.push(c);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Stack(parts.to_vec()), parts))
    }

    /// Selects one channel of the trailing axis, dropping that axis.
    pub fn channel(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let va = self.value(a);
        let shape = va.shape();
        let c = *shape.last().unwrap_or(&0);
        if index >= c {
            return Err(mismatch("channel", va, &Tensor::zeros(&[index])));
        }
        let data = va.data().iter().skip(index).step_by(c).copied().collect();
        let v = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        Ok(self.push(v, Op::Channel(a, index), &[a]))
    }

    /// Multiplies row `i` of a matrix by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: NodeId, factors: Vec<f64>) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 2 || va.shape()[0] != factors.len() {
            return Err(mismatch("scale_rows", va, &Tensor::vector(factors)));
        }
        let cols = va.shape()[1];
        let mut v = va.clone();
        for (row, f) in v.data_mut().chunks_mut(cols.max(1)).zip(&factors) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        Ok(self.push(v, Op::ScaleRows(a, factors), &[a]))
    }

    /// EQ bump weights `exp(-d / (2 l^2))` for constant squared distances `d`
    /// and a single-element lengthscale node `l`.
    pub fn eq_weights(&mut self, sqdist: Tensor, lengthscale: NodeId) -> Result<NodeId> {
        let l = self.scalar_of("eq_weights", lengthscale)?;
        let v = sqdist.map(|d| (-0.5 * d / (l * l)).exp());
        Ok(self.push(v, Op::EqWeights { sqdist, lengthscale }, &[lengthscale]))
    }

    /// `a + s·I` for a square matrix `a` and single-element node `s`.
    pub fn add_identity(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let k = self.scalar_of("add_identity", s)?;
        let va = self.value(a);
        if va.rank() != 2 || va.shape()[0] != va.shape()[1] {
            return Err(mismatch("add_identity", va, va));
        }
        let n = va.shape()[0];
        let mut v = va.clone();
        for i in 0..n {
            v.data_mut()[i * n + i] += k;
        }
        Ok(self.push(v, Op::AddIdentity(a, s), &[a, s]))
    }

    /// Diagonal matrix from a vector.
    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 1 {
            return Err(mismatch("diag", va, va));
        }
        let n = va.len();
        let mut v = Tensor::zeros(&[n, n]);
        for i in 0..n {
            v.data_mut()[i * n + i] = va.data()[i];
        }
        Ok(self.push(v, Op::Diag(a), &[a]))
    }

    /// Frobenius projection onto the PSD cone (see [`crate::gp::nearest_psd`]),
    /// differentiated through the eigendecomposition of the symmetric part.
    pub fn nearest_psd(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 2 || va.shape()[0] != va.shape()[1] {
            return Err(mismatch("nearest_psd", va, va));
        }
        let n = va.shape()[0];
        let m = DMatrix::from_row_slice(n, n, va.data());
        let sym = (&m + m.transpose()) * 0.5;
        let eig = sym
            .try_symmetric_eigen(1e-15, 10_000)
            .ok_or(Error::EigenDecomposition)?;
        let lam = &eig.eigenvalues;
        let q = eig.eigenvectors;
        let clipped = lam.map(|v| v.max(0.0));
        let out = &q * DMatrix::from_diagonal(&clipped) * q.transpose();
        let out = (&out + out.transpose()) * 0.5;
        // First divided differences of max(·, 0) at the eigenvalues.
        let divided = DMatrix::from_fn(n, n, |i, j| {
            let (li, lj) = (lam[i], lam[j]);
            if (li - lj).abs() > 1e-12 * (li.abs() + lj.abs()).max(1e-300) {
                (li.max(0.0) - lj.max(0.0)) / (li - lj)
            } else if li > 0.0 {
                1.0
            } else {
                0.0
            }
        });
        let data = (0..n * n).map(|k| out[(k / n, k % n)]).collect();
        let v = Tensor::new(vec![n, n], data)?;
        let op = Op::NearestPsd {
            input: a,
            vectors: q,
            divided,
        };
        Ok(self.push(v, op, &[a]))
    }

    /// Negative log density `-log N(y | mean, cov)`.
    pub fn gaussian_nll(&mut self, y: &[f64], mean: NodeId, cov: NodeId) -> Result<NodeId> {
        let (vm, vk) = (self.value(mean), self.value(cov));
        let n = y.len();
        if vm.len() != n || vk.shape() != [n, n] {
            return Err(mismatch("gaussian_nll", vm, vk));
        }
        let k = DMatrix::from_row_slice(n, n, vk.data());
        let chol = cholesky_safe(&k, 0.0).map_err(|_| Error::NotPositiveDefinite)?;
        let resid = DVector::from_iterator(n, y.iter().zip(vm.data()).map(|(a, b)| a - b));
        let alpha = chol.solve(&resid);
        let inv = chol.inverse();
        let nll = 0.5 * resid.dot(&alpha)
            + 0.5 * chol.log_det()
            + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        let op = Op::GaussianNll {
            mean,
            cov,
            inv,
            alpha,
        };
        Ok(self.push(Tensor::scalar(nll), op, &[mean, cov]))
    }

    /// Reverse sweep from a scalar `loss`. Parameters the loss does not
    /// reach get zero gradients.
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut out = store.zeros_like();
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut send = |target: NodeId, delta: Tensor| {
                if !self.nodes[target.0].requires_grad {
                    return;
                }
                match &mut grads[target.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|x| -x));
                    send(*a, g);
                }
                Op::Scale(a, f) => send(*a, g.map(|x| x * f)),
                Op::ScaleBy(a, s) => {
                    let k = self.value(*s).data()[0];
                    let ds: f64 = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    send(*s, Tensor::full(self.value(*s).shape(), ds));
                    send(*a, g.map(|x| x * k));
                }
                Op::AddScalar(a, s) => {
                    let ds: f64 = g.data().iter().sum();
                    send(*s, Tensor::full(self.value(*s).shape(), ds));
                    send(*a, g);
                }
                Op::Exp(a) => {
                    let d = zip_with(&g, &node.value, |x, y| x * y);
                    send(*a, d);
                }
                Op::Softplus(a) => {
                    let d = zip_with(&g, self.value(*a), |x, y| x * sigmoid(y));
                    send(*a, d);
                }
                Op::Act(a, act) => {
                    let d = zip_with(&g, self.value(*a), |x, y| x * act.derivative(y));
                    send(*a, d);
                }
                Op::Sum(a) => {
                    let k = g.data()[0];
                    send(*a, Tensor::full(self.value(*a).shape(), k));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        send(*a, matmul(&g, &transpose(vb)));
                    }
                    if self.nodes[b.0].requires_grad {
                        send(*b, matmul(&transpose(va), &g));
                    }
                }
                Op::Transpose(a) => send(*a, transpose(&g)),
                Op::Conv(x, w, b) => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let need_x = self.nodes[x.0].requires_grad;
                    let (gx, gw, gb) = if vx.rank() == 2 {
                        conv::conv1d_backward(vx, vw, &g, need_x)
                    } else {
                        conv::conv2d_backward(vx, vw, &g, need_x)
                    };
                    if let Some(gx) = gx {
                        send(*x, gx);
                    }
                    send(*w, gw);
                    send(*b, gb);
                }
                Op::Reshape(a) => {
                    let d = g.reshape(self.value(*a).shape().to_vec())?;
                    send(*a, d);
                }
                Op::Stack(parts) => {
                    let c = parts.len();
                    for (ci, p) in parts.iter().enumerate() {
                        let data = g.data().iter().skip(ci).step_by(c).copied().collect();
                        send(*p, Tensor::new(self.value(*p).shape().to_vec(), data)?);
                    }
                }
                Op::Channel(a, index) => {
                    let va = self.value(*a);
                    let c = *va.shape().last().expect("rank >= 1");
                    let mut d = Tensor::zeros(va.shape());
                    for (i, &x) in g.data().iter().enumerate() {
                        d.data_mut()[i * c + index] = x;
                    }
                    send(*a, d);
                }
                Op::ScaleRows(a, factors) => {
                    let cols = g.shape()[1];
                    let mut d = g;
                    for (row, f) in d.data_mut().chunks_mut(cols.max(1)).zip(factors) {
                        row.iter_mut().for_each(|x| *x *= f);
                    }
                    send(*a, d);
                }
                Op::EqWeights {
                    sqdist,
                    lengthscale,
                } => {
                    let l = self.value(*lengthscale).data()[0];
                    let dl: f64 = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .zip(sqdist.data())
                        .map(|((gv, wv), d)| gv * wv * d / (l * l * l))
                        .sum();
                    send(*lengthscale, Tensor::full(self.value(*lengthscale).shape(), dl));
                }
                Op::AddIdentity(a, s) => {
                    let n = g.shape()[0];
                    let tr: f64 = (0..n).map(|i| g.data()[i * n + i]).sum();
                    send(*s, Tensor::full(self.value(*s).shape(), tr));
                    send(*a, g);
                }
                Op::Diag(a) => {
                    let n = g.shape()[0];
                    let d = (0..n).map(|i| g.data()[i * n + i]).collect();
                    send(*a, Tensor::vector(d));
                }
                Op::NearestPsd {
                    input,
                    vectors,
                    divided,
                } => {
                    let n = vectors.nrows();
                    let gm = DMatrix::from_row_slice(n, n, g.data());
                    let inner = vectors.transpose() * gm * vectors;
                    let s = vectors * inner.component_mul(divided) * vectors.transpose();
                    let s = (&s + s.transpose()) * 0.5;
                    let data = (0..n * n).map(|k| s[(k / n, k % n)]).collect();
                    send(*input, Tensor::new(vec![n, n], data)?);
                }
                Op::GaussianNll {
                    mean,
                    cov,
                    inv,
                    alpha,
                } => {
                    let k = g.data()[0];
                    let n = alpha.len();
                    let gm = Tensor::new(
                        self.value(*mean).shape().to_vec(),
                        alpha.iter().map(|a| -k * a).collect(),
                    )?;
                    send(*mean, gm);
                    let mut gk = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            gk[i * n + j] = 0.5 * k * (inv[(i, j)] - alpha[i] * alpha[j]);
                        }
                    }
                    send(*cov, Tensor::new(vec![n, n], gk)?);
                }
            }
        }
        Ok(out)
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape")
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let o_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in o_row.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out).expect("shape")
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("shape")
}
