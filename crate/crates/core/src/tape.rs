//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a valid reverse topological order and visits every node once. The tape is
//! rebuilt for every training step: call [`Tape::reset`] between steps, and
//! [`Tape::backward`] at most once per build.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{axpy, gemm_nn, gemm_nt, gemm_tn, Tensor, TensorError};

/// Clamp applied to probabilities before taking logs in the BCE node.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sin,
    Relu,
    Sigmoid,
    Softplus,
    Log,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Unary { a: Var, kind: Unary },
    Reshape { a: Var },
    Sum { a: Var },
    Bce { pred: Var, target: Vec<f64> },
    Mse { pred: Var, target: Vec<f64> },
    Dot { a: Var, c: Vec<f64> },
    SqDist { a: Var, c: Vec<f64> },
    GaussKl { mu0: Var, rho0: Var, mu1: Vec<f64>, sigma1: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor, TensorError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Element `i` of `v`, treating a single-element slice as a broadcast scalar.
#[inline]
fn bcast(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
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

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node, TensorError> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn needs(&self, vars: &[Var]) -> Result<bool, TensorError> {
        let mut any = false;
        for &v in vars {
            any |= self.node(v)?.requires_grad;
        }
        Ok(any)
    }

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].is_param = true;
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a parameter leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|n| n.value.grad())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`, the layout used by `[out × in]` weight matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let ta = &self.node(a)?.value;
        let tb = &self.node(b)?.value;
        let (m, k) = ta.dims2("matmul")?;
        let (r, c) = tb.dims2("matmul")?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if k != kb {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        if trans_b {
            gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        } else {
            gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        }
        let t = finite("matmul", Tensor::new(&[m, n], out)?)?;
        let rg = self.needs(&[a, b])?;
        Ok(self.push(t, Op::MatMul { a, b, trans_b }, rg))
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>, TensorError> {
        let ta = &self.node(a)?.value;
        let tb = &self.node(b)?.value;
        if ta.shape() == tb.shape() || tb.is_scalar() {
            Ok(ta.shape().to_vec())
        } else if ta.is_scalar() {
            Ok(tb.shape().to_vec())
        } else {
            Err(TensorError::Shape {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let shape = self.binary_shape(op, a, b)?;
        let n: usize = shape.iter().product();
        let da = self.value(a).data();
        let db = self.value(b).data();
        let out = (0..n).map(|i| f(bcast(da, i), bcast(db, i))).collect();
        finite(op, Tensor::new(&shape, out)?)
    }

    /// Elementwise sum; either side may be a one-element scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.needs(&[a, b])?;
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    /// Elementwise product; either side may be a one-element scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(&[a, b])?;
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// `a * k` for a constant `k`.
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, TensorError> {
        let s = self.constant(Tensor::scalar(k));
        self.mul(a, s)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var, TensorError> {
        let x = self.node(a)?.value.data();
        let (name, f): (&'static str, fn(f64) -> f64) = match kind {
            Unary::Sin => ("sin", libm::sin),
            Unary::Relu => ("relu", math::relu),
            Unary::Sigmoid => ("sigmoid", math::sigmoid),
            Unary::Softplus => ("softplus", math::softplus),
            Unary::Log => ("log", libm::log),
            Unary::Exp => ("exp", libm::exp),
        };
        if kind == Unary::Log && x.iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                reason: "non-positive input",
            });
        }
        let out: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let t = finite(name, Tensor::new(self.value(a).shape(), out)?)?;
        let rg = self.needs(&[a])?;
        Ok(self.push(t, Op::Unary { a, kind }, rg))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Unary::Sin)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Unary::Softplus)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Unary::Log)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Unary::Exp)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.node(a)?.value.clone();
        let mut t = t.reshaped(shape)?;
        t.clear_grad();
        let rg = self.needs(&[a])?;
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.node(a)?.value.data().iter().sum::<f64>();
        let t = finite("sum", Tensor::scalar(s))?;
        let rg = self.needs(&[a])?;
        Ok(self.push(t, Op::Sum { a }, rg))
    }

    fn check_len(&self, op: &'static str, a: Var, c: &[f64]) -> Result<(), TensorError> {
        let t = &self.node(a)?.value;
        if t.len() != c.len() {
            return Err(TensorError::Shape {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![c.len()],
            });
        }
        Ok(())
    }

    /// Mean binary cross-entropy of `pred` against 0/1 `target`, with `pred`
    /// clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_mean(&mut self, pred: Var, target: Vec<f64>) -> Result<Var, TensorError> {
        self.check_len("bce", pred, &target)?;
        if target.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(TensorError::Domain {
                op: "bce",
                reason: "targets must be 0 or 1",
            });
        }
        let p = self.value(pred).data();
        let v = crate::losses::bce_value(p, &target);
        let t = finite("bce", Tensor::scalar(v))?;
        let rg = self.needs(&[pred])?;
        Ok(self.push(t, Op::Bce { pred, target }, rg))
    }

    pub fn mse_mean(&mut self, pred: Var, target: Vec<f64>) -> Result<Var, TensorError> {
        self.check_len("mse", pred, &target)?;
        let p = self.value(pred).data();
        let n = p.len().max(1) as f64;
        let v = p.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let t = finite("mse", Tensor::scalar(v))?;
        let rg = self.needs(&[pred])?;
        Ok(self.push(t, Op::Mse { pred, target }, rg))
    }

    /// `⟨a, c⟩` for a constant vector `c`.
    pub fn dot_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var, TensorError> {
        self.check_len("dot", a, &c)?;
        let v = crate::tensor::dot(self.value(a).data(), &c);
        let t = finite("dot", Tensor::scalar(v))?;
        let rg = self.needs(&[a])?;
        Ok(self.push(t, Op::Dot { a, c }, rg))
    }

    /// `‖a − c‖²` for a constant vector `c`.
    pub fn sq_dist_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var, TensorError> {
        self.check_len("sq_dist", a, &c)?;
        let v = crate::losses::l2_value(self.value(a).data(), &c);
        let t = finite("sq_dist", Tensor::scalar(v))?;
        let rg = self.needs(&[a])?;
        Ok(self.push(t, Op::SqDist { a, c }, rg))
    }

    /// `Σᵢ KL(N(mu0ᵢ, softplus(rho0ᵢ)) ‖ N(mu1ᵢ, sigma1ᵢ))`. `mu1` and
    /// `sigma1` may be single-element broadcasts (a shared prior).
    pub fn gaussian_kl(
        &mut self,
        mu0: Var,
        rho0: Var,
        mu1: Vec<f64>,
        sigma1: Vec<f64>,
    ) -> Result<Var, TensorError> {
        let n = self.node(mu0)?.value.len();
        if self.node(rho0)?.value.len() != n {
            return Err(TensorError::Shape {
                op: "gaussian_kl",
                lhs: self.value(mu0).shape().to_vec(),
                rhs: self.value(rho0).shape().to_vec(),
            });
        }
        for c in [&mu1, &sigma1] {
            if c.len() != 1 && c.len() != n {
                return Err(TensorError::Shape {
                    op: "gaussian_kl",
                    lhs: vec![n],
                    rhs: vec![c.len()],
                });
            }
        }
        if sigma1.iter().any(|&s| !(s > 0.0)) {
            return Err(TensorError::Domain {
                op: "gaussian_kl",
                reason: "target sigma must be positive",
            });
        }
        let m0 = self.value(mu0).data();
        let r0 = self.value(rho0).data();
        let mut total = 0.0;
        for i in 0..n {
            let s0 = math::softplus(r0[i]);
            total += crate::losses::kl_gaussian(m0[i], s0, bcast(&mu1, i), bcast(&sigma1, i))
                .map_err(|_| TensorError::Domain {
                    op: "gaussian_kl",
                    reason: "softplus underflowed to zero",
                })?;
        }
        let t = finite("gaussian_kl", Tensor::scalar(total))?;
        let rg = self.needs(&[mu0, rho0])?;
        Ok(self.push(
            t,
            Op::GaussKl {
                mu0,
                rho0,
                mu1,
                sigma1,
            },
            rg,
        ))
    }

    /// Accumulates `∂loss/∂leaf` into every parameter leaf. Parameters that
    /// `loss` does not depend on get an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        self.backward_done = true;

        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                }
                Op::MatMul { a, b, trans_b } => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = node.value.shape()[1];
                    if self.nodes[a.0].requires_grad {
                        let da = slot(&mut adj, *a, m * k);
                        if *trans_b {
                            gemm_nn(&g, tb.data(), da, m, n, k);
                        } else {
                            gemm_nt(&g, tb.data(), da, m, n, k);
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = slot(&mut adj, *b, k * n);
                        if *trans_b {
                            gemm_tn(&g, ta.data(), db, m, n, k);
                        } else {
                            gemm_tn(ta.data(), &g, db, m, k, n);
                        }
                    }
                }
                Op::Add { a, b } => {
                    for v in [*a, *b] {
                        if self.nodes[v.0].requires_grad {
                            let len = self.nodes[v.0].value.len();
                            let d = slot(&mut adj, v, len);
                            if len == g.len() {
                                axpy(1.0, &g, d);
                            } else {
                                d[0] += g.iter().sum::<f64>();
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let pairs = [(*a, *b), (*b, *a)];
                    for (v, other) in pairs {
                        if !self.nodes[v.0].requires_grad {
                            continue;
                        }
                        let ov = self.nodes[other.0].value.data();
                        let len = self.nodes[v.0].value.len();
                        let d = slot(&mut adj, v, len);
                        if len == g.len() {
                            for (i, di) in d.iter_mut().enumerate() {
                                *di += g[i] * bcast(ov, i);
                            }
                        } else {
                            d[0] += g.iter().enumerate().map(|(i, gi)| gi * bcast(ov, i)).sum::<f64>();
                        }
                    }
                }
                Op::Unary { a, kind } => {
                    let x = self.nodes[a.0].value.data();
                    let y = node.value.data();
                    let d = slot(&mut adj, *a, x.len());
                    for i in 0..x.len() {
                        let local = match kind {
                            Unary::Sin => libm::cos(x[i]),
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Softplus => math::sigmoid(x[i]),
                            Unary::Log => 1.0 / x[i],
                            Unary::Exp => y[i],
                        };
                        d[i] += g[i] * local;
                    }
                }
                Op::Reshape { a } => {
                    let d = slot(&mut adj, *a, g.len());
                    axpy(1.0, &g, d);
                }
                Op::Sum { a } => {
                    let len = self.nodes[a.0].value.len();
                    let d = slot(&mut adj, *a, len);
                    for di in d.iter_mut() {
                        *di += g[0];
                    }
                }
                Op::Bce { pred, target } => {
                    let p = self.nodes[pred.0].value.data();
                    let n = p.len() as f64;
                    let d = slot(&mut adj, *pred, p.len());
                    for i in 0..p.len() {
                        if p[i] > BCE_EPS && p[i] < 1.0 - BCE_EPS {
                            d[i] += g[0] * (p[i] - target[i]) / (p[i] * (1.0 - p[i])) / n;
                        }
                    }
                }
                Op::Mse { pred, target } => {
                    let p = self.nodes[pred.0].value.data();
                    let n = p.len() as f64;
                    let d = slot(&mut adj, *pred, p.len());
                    for i in 0..p.len() {
                        d[i] += g[0] * 2.0 * (p[i] - target[i]) / n;
                    }
                }
                Op::Dot { a, c } => {
                    let d = slot(&mut adj, *a, c.len());
                    axpy(g[0], c, d);
                }
                Op::SqDist { a, c } => {
                    let x = self.nodes[a.0].value.data();
                    let d = slot(&mut adj, *a, c.len());
                    for i in 0..c.len() {
                        d[i] += g[0] * 2.0 * (x[i] - c[i]);
                    }
                }
                Op::GaussKl {
                    mu0,
                    rho0,
                    mu1,
                    sigma1,
                } => {
                    let m0 = self.nodes[mu0.0].value.data();
                    let r0 = self.nodes[rho0.0].value.data();
                    let n = m0.len();
                    if self.nodes[mu0.0].requires_grad {
                        let d = slot(&mut adj, *mu0, n);
                        for i in 0..n {
                            let s1 = bcast(sigma1, i);
                            d[i] += g[0] * (m0[i] - bcast(mu1, i)) / (s1 * s1);
                        }
                    }
                    if self.nodes[rho0.0].requires_grad {
                        let d = slot(&mut adj, *rho0, n);
                        for i in 0..n {
                            let s0 = math::softplus(r0[i]);
                            let s1 = bcast(sigma1, i);
                            let dsigma = (s0 * s0 - s1 * s1) / (s0 * s1 * s1);
                            d[i] += g[0] * dsigma * math::sigmoid(r0[i]);
                        }
                    }
                }
            }
        }

        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if node.is_param {
                let g = adj[idx].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.value.set_grad(g);
            }
        }
        Ok(())
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}
