//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. Binary
//! element-wise ops accept a right operand whose shape is a suffix of the
//! left operand's shape (leading-batch broadcast); nothing else broadcasts.

use std::cell::RefCell;

use crate::error::{AutodiffError, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    Focal {
        pred: Var,
        gt: Vec<T>,
        gamma: T,
        beta: T,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// A single-threaded computation graph. Build one per forward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_compatible(a: &[usize], b: &[usize]) -> bool {
    let first = b.iter().position(|&d| d != 1).unwrap_or(b.len());
    let b = &b[first..];
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn reduce_to<T: Scalar>(grad: &[T], nb: usize) -> Vec<T> {
    let mut out = vec![T::zero(); nb];
    for (i, &g) in grad.iter().enumerate() {
        out[i % nb] = out[i % nb] + g;
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn req(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn param(&self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.shape_of(v)
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.req(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if !broadcast_compatible(ta.shape(), tb.shape()) {
                return Err(AutodiffError::Shape {
                    op: name,
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let nb = tb.numel();
            let bd = tb.data();
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % nb]))
                .collect();
            (
                Tensor::new(ta.shape().to_vec(), data)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        self.push(value, make(a, b), rg, name)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn unary(
        &self,
        a: Var,
        name: &'static str,
        f: impl Fn(T) -> T,
        make: impl FnOnce(Var) -> Op<T>,
    ) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.map(f), nodes[a.0].requires_grad)
        };
        self.push(value, make(a), rg, name)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid)
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary(a, "gelu", gelu, Op::Gelu)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, "exp", |x| x.exp(), Op::Exp)
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(a, "log", |x| x.ln(), Op::Log)
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(a, "sqrt", |x| x.sqrt(), Op::Sqrt)
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        self.unary(a, "scale", |x| x * c, |v| Op::Scale(v, c))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape_of(v);
        if s.len() != 2 {
            return Err(AutodiffError::Shape {
                op,
                lhs: s,
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(AutodiffError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let mut out = vec![T::zero(); m * n];
            matmul_into(nodes[a.0].value.data(), nodes[b.0].value.data(), &mut out, m, k, n);
            (
                Tensor::new(vec![m, n], out)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        self.push(value, Op::MatMul(a, b), rg, "matmul")
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(AutodiffError::Shape {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let mut out = vec![T::zero(); m * n];
            matmul_nt_into(nodes[a.0].value.data(), nodes[b.0].value.data(), &mut out, m, k, n);
            (
                Tensor::new(vec![m, n], out)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        self.push(value, Op::MatMulNt(a, b), rg, "matmul_nt")
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let src = nodes[a.0].value.data();
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = src[i * n + j];
                }
            }
            (Tensor::new(vec![n, m], out)?, nodes[a.0].requires_grad)
        };
        self.push(value, Op::Transpose(a), rg, "transpose")
    }

    /// Concatenate along axis 0 (any rank, equal trailing shape) or axis 1
    /// (rank 2, equal row count).
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(AutodiffError::Contract("concat of zero tensors".into()));
        }
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let first = nodes[inputs[0].0].value.shape().to_vec();
            let rg = inputs.iter().any(|v| nodes[v.0].requires_grad);
            match axis {
                0 => {
                    if first.is_empty() {
                        return Err(AutodiffError::Shape { op: "concat", lhs: first, rhs: vec![] });
                    }
                    let mut rows = 0;
                    let mut data = Vec::new();
                    for v in inputs {
                        let s = nodes[v.0].value.shape();
                        if s.len() != first.len() || s[1..] != first[1..] {
                            return Err(AutodiffError::Shape {
                                op: "concat",
                                lhs: first.clone(),
                                rhs: s.to_vec(),
                            });
                        }
                        rows += s[0];
                        data.extend_from_slice(nodes[v.0].value.data());
                    }
                    let mut shape = first.clone();
                    shape[0] = rows;
                    (Tensor::new(shape, data)?, rg)
                }
                1 => {
                    if first.len() != 2 {
                        return Err(AutodiffError::Shape { op: "concat", lhs: first, rhs: vec![] });
                    }
                    let m = first[0];
                    let mut widths = Vec::with_capacity(inputs.len());
                    for v in inputs {
                        let s = nodes[v.0].value.shape();
                        if s.len() != 2 || s[0] != m {
                            return Err(AutodiffError::Shape {
                                op: "concat",
                                lhs: first.clone(),
                                rhs: s.to_vec(),
                            });
                        }
                        widths.push(s[1]);
                    }
                    let total: usize = widths.iter().sum();
                    let mut data = Vec::with_capacity(m * total);
                    for i in 0..m {
                        for (v, &w) in inputs.iter().zip(&widths) {
                            data.extend_from_slice(&nodes[v.0].value.data()[i * w..(i + 1) * w]);
                        }
                    }
                    (Tensor::new(vec![m, total], data)?, rg)
                }
                _ => return Err(AutodiffError::Contract(format!("concat axis {axis} unsupported"))),
            }
        };
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// Half-open slice `[start, end)` along axis 0 (any rank) or axis 1 (rank 2).
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let s = t.shape().to_vec();
            let extent = match (axis, s.len()) {
                (0, n) if n >= 1 => s[0],
                (1, 2) => s[1],
                _ => return Err(AutodiffError::Contract(format!("slice axis {axis} on shape {s:?}"))),
            };
            if start > end || end > extent {
                return Err(AutodiffError::Index { index: end, len: extent });
            }
            if axis == 0 {
                let inner: usize = s[1..].iter().product();
                let mut shape = s.clone();
                shape[0] = end - start;
                (
                    Tensor::new(shape, t.data()[start * inner..end * inner].to_vec())?,
                    nodes[a.0].requires_grad,
                )
            } else {
                let (m, n) = (s[0], s[1]);
                let mut data = Vec::with_capacity(m * (end - start));
                for i in 0..m {
                    data.extend_from_slice(&t.data()[i * n + start..i * n + end]);
                }
                (Tensor::new(vec![m, end - start], data)?, nodes[a.0].requires_grad)
            }
        };
        self.push(value, Op::Slice { input: a, axis, start }, rg, "slice")
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.clone().reshape(shape)?, nodes[a.0].requires_grad)
        };
        self.push(value, Op::Reshape(a), rg, "reshape")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let s: T = nodes[a.0].value.data().iter().copied().sum();
            (Tensor::scalar(s), nodes[a.0].requires_grad)
        };
        self.push(value, Op::Sum(a), rg, "sum")
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.numel() == 0 {
                return Err(AutodiffError::Contract("mean of empty tensor".into()));
            }
            let s: T = t.data().iter().copied().sum();
            (Tensor::scalar(s / T::from_f64(t.numel() as f64)), nodes[a.0].requires_grad)
        };
        self.push(value, Op::Mean(a), rg, "mean")
    }

    /// Softmax over the last axis, stabilized by row-max subtraction.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let d = t.last_dim();
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(d.max(1)) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    z = z + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / z;
                }
            }
            (Tensor::new(t.shape().to_vec(), out)?, nodes[a.0].requires_grad)
        };
        self.push(value, Op::Softmax(a), rg, "softmax")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of
    /// shape `[d]`.
    pub fn layernorm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, xhat, rstd, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let d = t.last_dim();
            let (g, b) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            if g.shape() != [d] || b.shape() != [d] {
                return Err(AutodiffError::Shape {
                    op: "layernorm",
                    lhs: t.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let eps = T::from_f64(eps);
            let dn = T::from_f64(d as f64);
            let mut out = vec![T::zero(); t.numel()];
            let mut xhat = vec![T::zero(); t.numel()];
            let mut rstd = Vec::with_capacity(t.outer());
            for (r, row) in t.data().chunks(d).enumerate() {
                let mu = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
                let rs = T::one() / (var + eps).sqrt();
                rstd.push(rs);
                for j in 0..d {
                    let h = (row[j] - mu) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g.data()[j] + b.data()[j];
                }
            }
            let rg = nodes[x.0].requires_grad || nodes[gamma.0].requires_grad || nodes[beta.0].requires_grad;
            (Tensor::new(t.shape().to_vec(), out)?, xhat, rstd, rg)
        };
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
            "layernorm",
        )
    }

    /// Row gather from a `[vocab, d]` table.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            if t.ndim() != 2 {
                return Err(AutodiffError::Shape {
                    op: "embedding",
                    lhs: t.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let (v, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(AutodiffError::Index { index: id, len: v });
                }
                data.extend_from_slice(t.row(id));
            }
            (Tensor::new(vec![ids.len(), d], data)?, nodes[table.0].requires_grad)
        };
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    /// Pixel-wise focal loss between predicted probabilities and a target map
    /// with values in `[0, 1]`, averaged over all cells.
    ///
    /// Cells with target exactly 1 are positives and contribute
    /// `(1-p)^gamma * log(p)`; all others contribute
    /// `(1-y)^beta * p^gamma * log(1-p)`. Probabilities are clamped to
    /// `[eps, 1-eps]` and the clamped region has zero gradient.
    pub fn focal_loss(&self, pred: Var, target: &Tensor<T>, gamma: f64, beta: f64, eps: f64) -> Result<Var> {
        let (value, rg, gt) = {
            let nodes = self.nodes.borrow();
            let p = &nodes[pred.0].value;
            if p.numel() != target.numel() {
                return Err(AutodiffError::Shape {
                    op: "focal_loss",
                    lhs: p.shape().to_vec(),
                    rhs: target.shape().to_vec(),
                });
            }
            if !target.data().iter().any(|&y| y >= T::one()) {
                return Err(AutodiffError::Contract(
                    "focal loss target needs at least one cell equal to 1".into(),
                ));
            }
            let (g, b, e) = (T::from_f64(gamma), T::from_f64(beta), T::from_f64(eps));
            let mut acc = T::zero();
            for (&pv, &y) in p.data().iter().zip(target.data()) {
                let pc = pv.max(e).min(T::one() - e);
                let term = if y >= T::one() {
                    (T::one() - pc).powf(g) * pc.ln()
                } else {
                    (T::one() - y).powf(b) * pc.powf(g) * (T::one() - pc).ln()
                };
                acc = acc + term;
            }
            let n = T::from_f64(p.numel() as f64);
            (Tensor::scalar(-acc / n), nodes[pred.0].requires_grad, target.data().to_vec())
        };
        self.push(
            value,
            Op::Focal {
                pred,
                gt,
                gamma: T::from_f64(gamma),
                beta: T::from_f64(beta),
                eps: T::from_f64(eps),
            },
            rg,
            "focal_loss",
        )
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into leaves
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[loss.0].value;
            if lv.numel() != 1 {
                return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
            }
            let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
            adj[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
            let mut leaf_grads = Vec::new();

            for id in (0..=loss.0).rev() {
                let Some(dy) = adj[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                let dyd = dy.data();
                let val = |v: Var| &nodes[v.0].value;
                let wants = |v: Var| nodes[v.0].requires_grad;
                let mut emit = |v: Var, data: Vec<T>| -> Result<()> {
                    if !nodes[v.0].requires_grad {
                        return Ok(());
                    }
                    let t = Tensor::new(nodes[v.0].value.shape().to_vec(), data)?;
                    match &mut adj[v.0] {
                        Some(existing) => existing.add_assign(&t),
                        slot @ None => *slot = Some(t),
                    }
                    Ok(())
                };

                match &node.op {
                    Op::Leaf => leaf_grads.push((id, dy.clone())),
                    Op::Add(a, b) => {
                        if wants(*a) {
                            emit(*a, dyd.to_vec())?;
                        }
                        if wants(*b) {
                            emit(*b, reduce_to(dyd, val(*b).numel()))?;
                        }
                    }
                    Op::Sub(a, b) => {
                        if wants(*a) {
                            emit(*a, dyd.to_vec())?;
                        }
                        if wants(*b) {
                            let neg: Vec<T> = dyd.iter().map(|&g| -g).collect();
                            emit(*b, reduce_to(&neg, val(*b).numel()))?;
                        }
                    }
                    Op::Mul(a, b) => {
                        let (ad, bd) = (val(*a).data(), val(*b).data());
                        let nb = bd.len();
                        if wants(*a) {
                            emit(*a, dyd.iter().enumerate().map(|(i, &g)| g * bd[i % nb]).collect())?;
                        }
                        if wants(*b) {
                            let prod: Vec<T> = dyd.iter().zip(ad).map(|(&g, &x)| g * x).collect();
                            emit(*b, reduce_to(&prod, nb))?;
                        }
                    }
                    Op::Div(a, b) => {
                        let (ad, bd) = (val(*a).data(), val(*b).data());
                        let nb = bd.len();
                        if wants(*a) {
                            emit(*a, dyd.iter().enumerate().map(|(i, &g)| g / bd[i % nb]).collect())?;
                        }
                        if wants(*b) {
                            let q: Vec<T> = dyd
                                .iter()
                                .enumerate()
                                .map(|(i, &g)| -g * ad[i] / (bd[i % nb] * bd[i % nb]))
                                .collect();
                            emit(*b, reduce_to(&q, nb))?;
                        }
                    }
                    Op::MatMul(a, b) => {
                        let (ta, tb) = (val(*a), val(*b));
                        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                        if wants(*a) {
                            let mut da = vec![T::zero(); m * k];
                            matmul_nt_into(dyd, tb.data(), &mut da, m, n, k);
                            emit(*a, da)?;
                        }
                        if wants(*b) {
                            let mut db = vec![T::zero(); k * n];
                            matmul_tn_into(ta.data(), dyd, &mut db, m, k, n);
                            emit(*b, db)?;
                        }
                    }
                    Op::MatMulNt(a, b) => {
                        let (ta, tb) = (val(*a), val(*b));
                        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                        if wants(*a) {
                            let mut da = vec![T::zero(); m * k];
                            matmul_into(dyd, tb.data(), &mut da, m, n, k);
                            emit(*a, da)?;
                        }
                        if wants(*b) {
                            let mut db = vec![T::zero(); n * k];
                            matmul_tn_into(dyd, ta.data(), &mut db, m, n, k);
                            emit(*b, db)?;
                        }
                    }
                    Op::Transpose(a) => {
                        let s = val(*a).shape();
                        let (m, n) = (s[0], s[1]);
                        let mut da = vec![T::zero(); m * n];
                        for i in 0..m {
                            for j in 0..n {
                                da[i * n + j] = dyd[j * m + i];
                            }
                        }
                        emit(*a, da)?;
                    }
                    Op::Concat { inputs, axis } => {
                        if *axis == 0 {
                            let mut off = 0;
                            for v in inputs {
                                let len = val(*v).numel();
                                emit(*v, dyd[off..off + len].to_vec())?;
                                off += len;
                            }
                        } else {
                            let m = node.value.shape()[0];
                            let total = node.value.shape()[1];
                            let mut col = 0;
                            for v in inputs {
                                let w = val(*v).shape()[1];
                                let mut d = Vec::with_capacity(m * w);
                                for i in 0..m {
                                    d.extend_from_slice(&dyd[i * total + col..i * total + col + w]);
                                }
                                emit(*v, d)?;
                                col += w;
                            }
                        }
                    }
                    Op::Slice { input, axis, start } => {
                        let src = val(*input);
                        let mut d = vec![T::zero(); src.numel()];
                        if *axis == 0 {
                            let inner: usize = src.shape()[1..].iter().product();
                            d[start * inner..start * inner + dyd.len()].copy_from_slice(dyd);
                        } else {
                            let (m, n) = (src.shape()[0], src.shape()[1]);
                            let w = node.value.shape()[1];
                            for i in 0..m {
                                d[i * n + start..i * n + start + w].copy_from_slice(&dyd[i * w..(i + 1) * w]);
                            }
                        }
                        emit(*input, d)?;
                    }
                    Op::Reshape(a) => emit(*a, dyd.to_vec())?,
                    Op::Sum(a) => emit(*a, vec![dyd[0]; val(*a).numel()])?,
                    Op::Mean(a) => {
                        let n = val(*a).numel();
                        emit(*a, vec![dyd[0] / T::from_f64(n as f64); n])?;
                    }
                    Op::Softmax(a) => {
                        let y = node.value.data();
                        let d = node.value.last_dim().max(1);
                        let mut dx = vec![T::zero(); y.len()];
                        for r in 0..y.len() / d {
                            let (ys, gs) = (&y[r * d..(r + 1) * d], &dyd[r * d..(r + 1) * d]);
                            let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                            for j in 0..d {
                                dx[r * d + j] = ys[j] * (gs[j] - dot);
                            }
                        }
                        emit(*a, dx)?;
                    }
                    Op::Sigmoid(a) => {
                        let y = node.value.data();
                        emit(*a, dyd.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect())?;
                    }
                    Op::Gelu(a) => {
                        let x = val(*a).data();
                        emit(*a, dyd.iter().zip(x).map(|(&g, &v)| g * gelu_grad(v)).collect())?;
                    }
                    Op::Exp(a) => {
                        let y = node.value.data();
                        emit(*a, dyd.iter().zip(y).map(|(&g, &e)| g * e).collect())?;
                    }
                    Op::Log(a) => {
                        let x = val(*a).data();
                        emit(*a, dyd.iter().zip(x).map(|(&g, &v)| g / v).collect())?;
                    }
                    Op::Sqrt(a) => {
                        let y = node.value.data();
                        let two = T::from_f64(2.0);
                        emit(*a, dyd.iter().zip(y).map(|(&g, &s)| g / (two * s)).collect())?;
                    }
                    Op::Scale(a, c) => emit(*a, dyd.iter().map(|&g| g * *c).collect())?,
                    Op::LayerNorm {
                        x,
                        gamma,
                        beta,
                        xhat,
                        rstd,
                    } => {
                        let d = node.value.last_dim();
                        let g = val(*gamma).data();
                        let dn = T::from_f64(d as f64);
                        if wants(*x) {
                            let mut dx = vec![T::zero(); dyd.len()];
                            for (r, &rs) in rstd.iter().enumerate() {
                                let row = r * d..(r + 1) * d;
                                let mut mean_dh = T::zero();
                                let mut mean_dh_h = T::zero();
                                for (j, i) in row.clone().enumerate() {
                                    let dh = dyd[i] * g[j];
                                    mean_dh = mean_dh + dh;
                                    mean_dh_h = mean_dh_h + dh * xhat[i];
                                }
                                mean_dh = mean_dh / dn;
                                mean_dh_h = mean_dh_h / dn;
                                for (j, i) in row.enumerate() {
                                    let dh = dyd[i] * g[j];
                                    dx[i] = rs * (dh - mean_dh - xhat[i] * mean_dh_h);
                                }
                            }
                            emit(*x, dx)?;
                        }
                        if wants(*gamma) {
                            let prod: Vec<T> = dyd.iter().zip(xhat).map(|(&a, &b)| a * b).collect();
                            emit(*gamma, reduce_to(&prod, d))?;
                        }
                        if wants(*beta) {
                            emit(*beta, reduce_to(dyd, d))?;
                        }
                    }
                    Op::Embedding { table, ids } => {
                        let t = val(*table);
                        let d = t.shape()[1];
                        let mut dt = vec![T::zero(); t.numel()];
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] = dt[id * d + j] + dyd[r * d + j];
                            }
                        }
                        emit(*table, dt)?;
                    }
                    Op::Focal {
                        pred,
                        gt,
                        gamma,
                        beta,
                        eps,
                    } => {
                        let p = val(*pred).data();
                        let n = T::from_f64(p.len() as f64);
                        let (g, b, e) = (*gamma, *beta, *eps);
                        let one = T::one();
                        let dp: Vec<T> = p
                            .iter()
                            .zip(gt)
                            .map(|(&pv, &y)| {
                                if pv < e || pv > one - e {
                                    return T::zero();
                                }
                                let d = if y >= one {
                                    -g * (one - pv).powf(g - one) * pv.ln() + (one - pv).powf(g) / pv
                                } else {
                                    (one - y).powf(b)
                                        * (g * pv.powf(g - one) * (one - pv).ln() - pv.powf(g) / (one - pv))
                                };
                                -dyd[0] * d / n
                            })
                            .collect();
                        emit(*pred, dp)?;
                    }
                }
            }
            leaf_grads
        };

        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            if !g.is_finite() {
                return Err(AutodiffError::NonFinite { op: "backward" });
            }
            match &mut nodes[id].grad {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
