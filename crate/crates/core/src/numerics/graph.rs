//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, which is therefore a topological
//! order; [`Graph::backward`] walks it once in reverse. A node records its op
//! only when some input requires a gradient, otherwise it is stored as a
//! constant.

use std::collections::HashMap;

use super::linalg;
use super::{NumericsError, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Index of a trainable tensor inside a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand is a row vector added to every row of the left operand.
    Rows,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, S),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Gelu(Var),
    Map { x: Var, deriv: Vec<S> },
    Mse(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    Sum(Var),
    Mean(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
    track_params: bool,
}

/// Gradients produced by [`Graph::backward`], keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    leaves: HashMap<Var, Tensor<S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Real> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.get(&v)
    }

    /// Gradient of a parameter registered through [`Graph::param`]; `None`
    /// when the parameter did not take part in the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id).and_then(|v| self.leaves.get(v))
    }
}

const LN_EPS: f64 = 1e-12;

fn gelu_parts<S: Real>(x: S) -> (S, S) {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = S::lit(0.044_715);
    let half = S::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (S::one() + t);
    let dinner = c * (S::one() + S::lit(3.0) * a * x * x);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * dinner;
    (y, dy)
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    /// Graph in which parameters are differentiable leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
        }
    }

    /// Graph in which parameters are constants; nothing is recorded.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, mut value: Tensor<S>, op: Op<S>, rg: bool) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let (op, rg) = if rg { (op, true) } else { (Op::Leaf, false) };
        if value.requires_grad() {
            value = Tensor::new(value.shape().to_vec(), value.into_data())?;
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Result<Var, NumericsError> {
        let rg = t.requires_grad();
        self.push("leaf", t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a parameter once per graph; repeated calls return the same
    /// node so gradients from every use accumulate.
    pub fn param(&mut self, id: ParamId, t: &Tensor<S>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let track = self.track_params;
        self.nodes.push(Node {
            value: Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor"),
            op: Op::Leaf,
            requires_grad: track,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Makes later [`Graph::param`] calls for `id` resolve to `v`, so a
    /// parameter can be driven by an arbitrary node (finite-difference checks).
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.params.insert(id, v);
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), NumericsError> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(NumericsError::InvalidArgument(format!("{op} expects a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = linalg::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb.len() == 1 && !sa.is_empty() && sa.last() == sb.last() {
            Ok(Bcast::Rows)
        } else {
            Err(self.mismatch(op, a, b))
        }
    }

    fn zip_with(&self, a: Var, b: Var, mode: Bcast, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let va = self.value(a);
        let vb = self.value(b).data();
        let data = match mode {
            Bcast::Same => va.data().iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Rows => {
                let c = vb.len();
                va.data().iter().enumerate().map(|(i, &x)| f(x, vb[i % c])).collect()
            }
        };
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let mode = self.bcast("add", a, b)?;
        let out = self.zip_with(a, b, mode, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, Op::Add(a, b, mode), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let mode = self.bcast("sub", a, b)?;
        let out = self.zip_with(a, b, mode, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", out, Op::Sub(a, b, mode), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let mode = self.bcast("mul", a, b)?;
        let out = self.zip_with(a, b, mode, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, Op::Mul(a, b, mode), rg)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push("scale", out, Op::Scale(a, c), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2(a, "transpose")?;
        let out = linalg::transpose(self.value(a).data(), r, c);
        let rg = self.rg(a);
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg)
    }

    fn gather(&mut self, name: &'static str, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2(a, name)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(NumericsError::IndexOutOfRange {
                op: name,
                index: bad,
                bound: r,
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        self.push(name, Tensor::new(vec![idx.len(), c], out)?, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Rows of `a` selected (with repetition allowed) by `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        self.gather("gather_rows", a, idx)
    }

    /// Embedding lookup: rows of `table` indexed by token ids.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        self.gather("embedding", table, ids)
    }

    /// Concatenation of matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        if parts.is_empty() || axis > 1 {
            return Err(NumericsError::InvalidArgument("concat needs parts and axis 0 or 1".into()));
        }
        let (r0, c0) = self.dims2(parts[0], "concat")?;
        for &p in &parts[1..] {
            let (r, c) = self.dims2(p, "concat")?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(self.mismatch("concat", parts[0], p));
            }
        }
        let (shape, data) = if axis == 0 {
            let rows: usize = parts.iter().map(|&p| self.shape(p)[0]).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            (vec![rows, c0], data)
        } else {
            let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            (vec![r0, cols], data)
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat", Tensor::new(shape, data)?, Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Splits a matrix into consecutive blocks of the given sizes along
    /// axis 0 or 1.
    pub fn split(&mut self, a: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>, NumericsError> {
        let (r, c) = self.dims2(a, "split")?;
        let total = if axis == 0 { r } else { c };
        if axis > 1 || sizes.iter().sum::<usize>() != total {
            return Err(NumericsError::InvalidArgument(format!(
                "split sizes {sizes:?} do not cover axis {axis} of shape {:?}",
                self.shape(a)
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            let src = self.value(a);
            let (shape, data) = if axis == 0 {
                (vec![len, c], src.data()[start * c..(start + len) * c].to_vec())
            } else {
                let mut d = Vec::with_capacity(r * len);
                for i in 0..r {
                    d.extend_from_slice(&src.row(i)[start..start + len]);
                }
                (vec![r, len], d)
            };
            let rg = self.rg(a);
            out.push(self.push("split", Tensor::new(shape, data)?, Op::Slice { src: a, axis, start }, rg)?);
            start += len;
        }
        Ok(out)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a);
        let c = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let rg = self.rg(a);
        let shape = v.shape().to_vec();
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis with learnable affine
    /// `gamma`, `beta` (vectors of the last-axis length).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let c = self.value(x).cols();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        let xv = self.value(x);
        let n = S::from_usize_lossy(c);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks(c) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + S::lit(LN_EPS)).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<S> = xhat.iter().enumerate().map(|(i, &h)| h * g[i % c] + b[i % c]).collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = xv.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| gelu_parts(x).0);
        let rg = self.rg(a);
        self.push("gelu", out, Op::Gelu(a), rg)
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(&mut self, a: Var, f: impl Fn(S) -> S, df: impl Fn(S) -> S) -> Result<Var, NumericsError> {
        let v = self.value(a);
        let out = v.map(&f);
        let deriv = v.data().iter().map(|&x| df(x)).collect();
        let rg = self.rg(a);
        self.push("map", out, Op::Map { x: a, deriv }, rg)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mse", a, b));
        }
        let n = S::from_usize_lossy(self.value(a).len().max(1));
        let s: S = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push("mse", Tensor::scalar(s / n), Op::Mse(a, b), rg)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(NumericsError::InvalidArgument(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                r
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(NumericsError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(r * c);
        let mut total = S::zero();
        for (i, row) in lv.chunks(c).enumerate() {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[targets[i]];
            probs.extend(row.iter().map(|&x| (x - mx).exp() / z));
        }
        let rg = self.rg(logits);
        let loss = total / S::from_usize_lossy(r.max(1));
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let n = S::from_usize_lossy(self.value(a).len().max(1));
        let s = self.value(a).sum() / n;
        let rg = self.rg(a);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        let Graph { nodes, params, .. } = self;
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        let mut leaves = HashMap::new();

        fn acc<S: Real>(grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], v: Var, g: impl FnOnce(&mut [S])) {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()]);
            g(slot);
        }

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    leaves.insert(Var(i), Tensor::new(node.value.shape().to_vec(), gout)?);
                }
                Op::MatMul(a, b) => {
                    let sa = nodes[a.0].value.shape();
                    let (m, k) = (sa[0], sa[1]);
                    let n = nodes[b.0].value.shape()[1];
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    acc(&mut grads, &nodes, *a, |g| linalg::matmul_nt_acc(&gout, bv, g, m, n, k));
                    acc(&mut grads, &nodes, *b, |g| linalg::matmul_tn_acc(av, &gout, g, m, k, n));
                }
                Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -S::one() } else { S::one() };
                    acc(&mut grads, &nodes, *a, |g| {
                        for (x, y) in g.iter_mut().zip(&gout) {
                            *x += *y;
                        }
                    });
                    acc(&mut grads, &nodes, *b, |g| match mode {
                        Bcast::Same => {
                            for (x, y) in g.iter_mut().zip(&gout) {
                                *x += sign * *y;
                            }
                        }
                        Bcast::Rows => {
                            let c = g.len();
                            for (j, y) in gout.iter().enumerate() {
                                g[j % c] += sign * *y;
                            }
                        }
                    });
                }
                Op::Mul(a, b, mode) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let c = bv.len();
                    acc(&mut grads, &nodes, *a, |g| {
                        for (j, x) in g.iter_mut().enumerate() {
                            let bj = if *mode == Bcast::Same { bv[j] } else { bv[j % c] };
                            *x += gout[j] * bj;
                        }
                    });
                    acc(&mut grads, &nodes, *b, |g| {
                        for (j, y) in gout.iter().enumerate() {
                            let k = if *mode == Bcast::Same { j } else { j % c };
                            g[k] += *y * av[j];
                        }
                    });
                }
                Op::Scale(a, c) => acc(&mut grads, &nodes, *a, |g| {
                    for (x, y) in g.iter_mut().zip(&gout) {
                        *x += *y * *c;
                    }
                }),
                Op::Transpose(a) => {
                    let s = node.value.shape();
                    let t = linalg::transpose(&gout, s[0], s[1]);
                    acc(&mut grads, &nodes, *a, |g| {
                        for (x, y) in g.iter_mut().zip(&t) {
                            *x += *y;
                        }
                    });
                }
                Op::GatherRows(a, idx) => {
                    let c = node.value.cols();
                    acc(&mut grads, &nodes, *a, |g| {
                        for (r, &src) in idx.iter().enumerate() {
                            for j in 0..c {
                                g[src * c + j] += gout[r * c + j];
                            }
                        }
                    });
                }
                Op::Concat(parts, axis) => {
                    let total_cols = node.value.cols();
                    let rows = node.value.shape()[0];
                    let mut offset = 0;
                    for p in parts {
                        let (pr, pc) = {
                            let s = nodes[p.0].value.shape();
                            (s[0], s[1])
                        };
                        acc(&mut grads, &nodes, *p, |g| {
                            if *axis == 0 {
                                for (x, y) in g.iter_mut().zip(&gout[offset * pc..(offset + pr) * pc]) {
                                    *x += *y;
                                }
                            } else {
                                for i in 0..rows {
                                    for j in 0..pc {
                                        g[i * pc + j] += gout[i * total_cols + offset + j];
                                    }
                                }
                            }
                        });
                        offset += if *axis == 0 { pr } else { pc };
                    }
                }
                Op::Slice { src, axis, start } => {
                    let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                    let src_cols = nodes[src.0].value.cols();
                    acc(&mut grads, &nodes, *src, |g| {
                        if *axis == 0 {
                            for (x, y) in g[start * c..(start + r) * c].iter_mut().zip(&gout) {
                                *x += *y;
                            }
                        } else {
                            for i in 0..r {
                                for j in 0..c {
                                    g[i * src_cols + start + j] += gout[i * c + j];
                                }
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    acc(&mut grads, &nodes, *a, |g| {
                        for ((gr, yr), gor) in g.chunks_mut(c).zip(y.chunks(c)).zip(gout.chunks(c)) {
                            let dot: S = yr.iter().zip(gor).map(|(a, b)| *a * *b).sum();
                            for j in 0..c {
                                gr[j] += yr[j] * (gor[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = node.value.cols();
                    let gv = nodes[gamma.0].value.data();
                    acc(&mut grads, &nodes, *gamma, |g| {
                        for (j, (y, h)) in gout.iter().zip(xhat).enumerate() {
                            g[j % c] += *y * *h;
                        }
                    });
                    acc(&mut grads, &nodes, *beta, |g| {
                        for (j, y) in gout.iter().enumerate() {
                            g[j % c] += *y;
                        }
                    });
                    let n = S::from_usize_lossy(c);
                    acc(&mut grads, &nodes, *x, |g| {
                        for (r, is) in inv_std.iter().enumerate() {
                            let range = r * c..(r + 1) * c;
                            let dxh: Vec<S> = gout[range.clone()].iter().zip(gv).map(|(a, b)| *a * *b).collect();
                            let h = &xhat[range.clone()];
                            let m1 = dxh.iter().copied().sum::<S>() / n;
                            let m2 = dxh.iter().zip(h).map(|(a, b)| *a * *b).sum::<S>() / n;
                            for j in 0..c {
                                g[r * c + j] += *is * (dxh[j] - m1 - h[j] * m2);
                            }
                        }
                    });
                }
                Op::Gelu(a) => {
                    let xv = nodes[a.0].value.data();
                    acc(&mut grads, &nodes, *a, |g| {
                        for ((x, y), v) in g.iter_mut().zip(&gout).zip(xv) {
                            *x += *y * gelu_parts(*v).1;
                        }
                    });
                }
                Op::Map { x, deriv } => acc(&mut grads, &nodes, *x, |g| {
                    for ((gx, y), d) in g.iter_mut().zip(&gout).zip(deriv) {
                        *gx += *y * *d;
                    }
                }),
                Op::Mse(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let k = S::lit(2.0) * gout[0] / S::from_usize_lossy(av.len().max(1));
                    acc(&mut grads, &nodes, *a, |g| {
                        for (j, x) in g.iter_mut().enumerate() {
                            *x += k * (av[j] - bv[j]);
                        }
                    });
                    acc(&mut grads, &nodes, *b, |g| {
                        for (j, x) in g.iter_mut().enumerate() {
                            *x -= k * (av[j] - bv[j]);
                        }
                    });
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let c = nodes[logits.0].value.cols();
                    let k = gout[0] / S::from_usize_lossy(targets.len().max(1));
                    acc(&mut grads, &nodes, *logits, |g| {
                        for (r, &t) in targets.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == t { S::one() } else { S::zero() };
                                g[r * c + j] += k * (probs[r * c + j] - onehot);
                            }
                        }
                    });
                }
                Op::Sum(a) => acc(&mut grads, &nodes, *a, |g| {
                    for x in g.iter_mut() {
                        *x += gout[0];
                    }
                }),
                Op::Mean(a) => {
                    let n = S::from_usize_lossy(nodes[a.0].value.len().max(1));
                    acc(&mut grads, &nodes, *a, |g| {
                        for x in g.iter_mut() {
                            *x += gout[0] / n;
                        }
                    });
                }
            }
        }
        Ok(Gradients { leaves, params })
    }
}
