//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Nodes are appended in
//! topological order, so `backward` is a single reverse sweep over the node
//! list. Graphs are cheap to build and are meant to be rebuilt per step.

use crate::tensor::{Tensor, TensorError};

/// Lower clamp applied to vector norms that appear in denominators.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Constant,
    Param,
    Add,
    Sub,
    Mul,
    ScalarMul,
    MatMul,
    Conv1d,
    Conv2d,
    Relu,
    Tanh,
    Mean,
    Sum,
    L2Norm,
    Dot,
    CosineSimilarity,
    Softmax,
    Abs,
    Square,
    Slice,
    Reshape,
    Concat,
    Center,
    Unfold,
    RowNormalize,
    Transpose,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    MatMul(Var, Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        pad: (usize, usize),
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        pad: (usize, usize),
    },
    Relu(Var),
    Tanh(Var),
    Mean(Var),
    Sum(Var),
    L2Norm(Var),
    Dot(Var, Var),
    CosineSimilarity(Var, Var),
    Softmax(Var, f64),
    Abs(Var),
    Square(Var),
    Slice {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Center(Var),
    Unfold(Var, usize),
    RowNormalize(Var),
    Transpose(Var),
}

#[derive(Debug, Clone)]
struct Node {
    kind: OpKind,
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zero-filled when unreachable from the loss.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn is_reachable(&self, var: Var) -> bool {
        self.get(var).is_some()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn bad_shape(op: &'static str, t: &Tensor, reason: &str) -> TensorError {
    TensorError::BadShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.to_string(),
    }
}

fn scalar_grad(g: &Tensor) -> f64 {
    g.data()[0]
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].kind
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, kind: OpKind, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            kind,
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Constant, Op::Leaf, value, false)
    }

    /// Leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Param, Op::Leaf, value, true)
    }

    fn elementwise(
        &mut self,
        kind: OpKind,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(kind, op, out, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(OpKind::Add, "add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(OpKind::Sub, "sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(OpKind::Mul, "mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(OpKind::ScalarMul, Op::ScalarMul(a, c), out, ng)
    }

    fn unary(&mut self, kind: OpKind, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(kind, op, out, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(OpKind::Relu, a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(OpKind::Tanh, a, f64::tanh, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(OpKind::Abs, a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(OpKind::Square, a, |x| x * x, Op::Square(a))
    }

    /// `x - mean(x)` over all elements.
    pub fn center(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.unary(OpKind::Center, a, move |x| x - m, Op::Center(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        let ng = self.ng(&[a]);
        self.push(OpKind::Sum, Op::Sum(a), Tensor::scalar(s), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(&[a]);
        self.push(OpKind::Mean, Op::Mean(a), Tensor::scalar(s), ng)
    }

    pub fn l2_norm(&mut self, a: Var) -> Var {
        let n = self.value(a).l2_norm();
        let ng = self.ng(&[a]);
        self.push(OpKind::L2Norm, Op::L2Norm(a), Tensor::scalar(n), ng)
    }

    /// Inner product of two equally sized tensors, flattened.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(mismatch("dot", ta, tb));
        }
        let d = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let ng = self.ng(&[a, b]);
        Ok(self.push(OpKind::Dot, Op::Dot(a, b), Tensor::scalar(d), ng))
    }

    /// Cosine similarity of two flattened tensors, with each norm clamped
    /// below at [`NORM_EPS`].
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(mismatch("cosine_similarity", ta, tb));
        }
        let d: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let na = ta.l2_norm().max(NORM_EPS);
        let nb = tb.l2_norm().max(NORM_EPS);
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            OpKind::CosineSimilarity,
            Op::CosineSimilarity(a, b),
            Tensor::scalar(d / (na * nb)),
            ng,
        ))
    }

    /// `softmax(x / temperature)` over all elements.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var, TensorError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(TensorError::InvalidArgument(format!(
                "softmax temperature must be positive and finite, got {temperature}"
            )));
        }
        let t = self.value(a);
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data().iter().map(|x| ((x - max) / temperature).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out = Tensor::new(t.shape().to_vec(), exps.into_iter().map(|e| e / z).collect())?;
        let ng = self.ng(&[a]);
        Ok(self.push(OpKind::Softmax, Op::Softmax(a, temperature), out, ng))
    }

    /// Rows `[start, start + len)` along the leading axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.shape().is_empty() || start + len > t.shape()[0] {
            return Err(bad_shape(
                "slice",
                t,
                &format!("range {start}..{} exceeds leading axis", start + len),
            ));
        }
        let row: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * row..(start + len) * row].to_vec();
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(OpKind::Slice, Op::Slice { input: a, start }, out, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a);
        let n: usize = shape.iter().product();
        if n != t.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = t.reshaped(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(OpKind::Reshape, Op::Reshape(a), out, ng))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let ft = self.value(*first);
        if ft.shape().is_empty() {
            return Err(bad_shape("concat", ft, "scalars cannot be concatenated"));
        }
        let tail = ft.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(mismatch("concat", ft, t));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(parts);
        Ok(self.push(OpKind::Concat, Op::Concat(parts.to_vec()), out, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(bad_shape("transpose", t, "expected a matrix"));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(OpKind::Transpose, Op::Transpose(a), out, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(OpKind::MatMul, Op::MatMul(a, b), out, ng))
    }

    /// Stride-1 sliding windows of a 1-D signal: `[T] -> [T - s + 1, s]`.
    pub fn unfold(&mut self, a: Var, window: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.shape().len() != 1 || window == 0 || window > t.numel() {
            return Err(bad_shape(
                "unfold",
                t,
                &format!("window {window} needs a 1-D signal at least that long"),
            ));
        }
        let n = t.numel() - window + 1;
        let src = t.data();
        let mut data = Vec::with_capacity(n * window);
        for i in 0..n {
            data.extend_from_slice(&src[i..i + window]);
        }
        let out = Tensor::new(vec![n, window], data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(OpKind::Unfold, Op::Unfold(a, window), out, ng))
    }

    /// Scales every row of a matrix to unit L2 norm (norm clamped at [`NORM_EPS`]).
    pub fn row_normalize(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(bad_shape("row_normalize", t, "expected a matrix"));
        }
        let c = t.shape()[1];
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(OpKind::RowNormalize, Op::RowNormalize(a), out, ng))
    }

    /// 1-D convolution (cross-correlation), stride 1.
    ///
    /// `input: [c_in, len]`, `weight: [c_out, c_in, k]`, `bias: [c_out]`;
    /// `pad` adds zeros on the (left, right) of the time axis.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        pad: (usize, usize),
    ) -> Result<Var, TensorError> {
        let (x, w) = (self.value(input), self.value(weight));
        if x.shape().len() != 2 || w.shape().len() != 3 || w.shape()[1] != x.shape()[0] {
            return Err(mismatch("conv1d", x, w));
        }
        let (cin, len) = (x.shape()[0], x.shape()[1]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let padded = len + pad.0 + pad.1;
        if padded < k {
            return Err(bad_shape("conv1d", x, "kernel longer than padded input"));
        }
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [cout] {
                return Err(mismatch("conv1d bias", w, tb));
            }
        }
        let out_len = padded - k + 1;
        let mut out = vec![0.0; cout * out_len];
        let (xd, wd) = (x.data(), w.data());
        for o in 0..cout {
            let orow = &mut out[o * out_len..(o + 1) * out_len];
            if let Some(b) = bias {
                orow.fill(self.nodes[b.0].value.data()[o]);
            }
            for c in 0..cin {
                let xrow = &xd[c * len..(c + 1) * len];
                for kk in 0..k {
                    let wv = wd[(o * cin + c) * k + kk];
                    // output t reads input t + kk - pad.0
                    let (lo, hi) = valid_range(out_len, kk, pad.0, len);
                    for t in lo..hi {
                        orow[t] += wv * xrow[t + kk - pad.0];
                    }
                }
            }
        }
        let out = Tensor::new(vec![cout, out_len], out)?;
        let mut ins = vec![input, weight];
        ins.extend(bias);
        let ng = self.ng(&ins);
        Ok(self.push(
            OpKind::Conv1d,
            Op::Conv1d {
                input,
                weight,
                bias,
                pad,
            },
            out,
            ng,
        ))
    }

    /// 2-D convolution (cross-correlation), stride 1.
    ///
    /// `input: [c_in, h, w]`, `weight: [c_out, c_in, kh, kw]`, `bias: [c_out]`;
    /// `pad = (ph, pw)` adds zeros symmetrically on each axis.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        pad: (usize, usize),
    ) -> Result<Var, TensorError> {
        let (x, w) = (self.value(input), self.value(weight));
        if x.shape().len() != 3 || w.shape().len() != 4 || w.shape()[1] != x.shape()[0] {
            return Err(mismatch("conv2d", x, w));
        }
        let (cin, h, wd_) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        if h + 2 * pad.0 < kh || wd_ + 2 * pad.1 < kw {
            return Err(bad_shape("conv2d", x, "kernel larger than padded input"));
        }
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [cout] {
                return Err(mismatch("conv2d bias", w, tb));
            }
        }
        let oh = h + 2 * pad.0 - kh + 1;
        let ow = wd_ + 2 * pad.1 - kw + 1;
        let mut out = vec![0.0; cout * oh * ow];
        let (xd, wdat) = (x.data(), w.data());
        for o in 0..cout {
            let b = bias.map_or(0.0, |b| self.nodes[b.0].value.data()[o]);
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b;
                    for c in 0..cin {
                        for ki in 0..kh {
                            let xi = i + ki;
                            if xi < pad.0 || xi - pad.0 >= h {
                                continue;
                            }
                            let xi = xi - pad.0;
                            let wrow = &wdat[((o * cin + c) * kh + ki) * kw..][..kw];
                            let xrow = &xd[(c * h + xi) * wd_..][..wd_];
                            let (lo, hi) = valid_range_2(j, kw, pad.1, wd_);
                            acc += dot4(&wrow[lo..hi], &xrow[j + lo - pad.1..j + hi - pad.1]);
                        }
                    }
                    out[(o * oh + i) * ow + j] = acc;
                }
            }
        }
        let out = Tensor::new(vec![cout, oh, ow], out)?;
        let mut ins = vec![input, weight];
        ins.extend(bias);
        let ng = self.ng(&ins);
        Ok(self.push(
            OpKind::Conv2d,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            },
            out,
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, var: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.nodes[var.0].value.shape().to_vec(), data).expect("gradient shape")
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = gd.iter().map(|x| -x).collect();
                self.accumulate(grads, *b, self.like(*b, neg));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].needs_grad {
                    let d = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.nodes[b.0].needs_grad {
                    let d = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::ScalarMul(a, c) => {
                let d = gd.iter().map(|g| g * c).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            let grow = &gd[i * n..(i + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                pad,
            } => self.conv1d_backward(*input, *weight, *bias, *pad, g, grads),
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            } => self.conv2d_backward(*input, *weight, *bias, *pad, g, grads),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Center(a) => {
                let m = gd.iter().sum::<f64>() / gd.len() as f64;
                let d = gd.iter().map(|g| g - m).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Sum(a) => {
                let s = scalar_grad(g);
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, self.like(*a, vec![s; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let s = scalar_grad(g) / n as f64;
                self.accumulate(grads, *a, self.like(*a, vec![s; n]));
            }
            Op::L2Norm(a) => {
                let s = scalar_grad(g);
                let norm = node.value.item();
                let x = self.value(*a).data();
                let d = if norm > 0.0 {
                    x.iter().map(|v| s * v / norm).collect()
                } else {
                    vec![0.0; x.len()]
                };
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Dot(a, b) => {
                let s = scalar_grad(g);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, self.like(*a, vb.iter().map(|y| s * y).collect()));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, self.like(*b, va.iter().map(|x| s * x).collect()));
                }
            }
            Op::CosineSimilarity(a, b) => {
                let s = scalar_grad(g);
                let cos = node.value.item();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ra = self.value(*a).l2_norm();
                let rb = self.value(*b).l2_norm();
                let (na, nb) = (ra.max(NORM_EPS), rb.max(NORM_EPS));
                if self.nodes[a.0].needs_grad {
                    let d = cosine_input_grad(va, vb, cos, na, nb, ra > NORM_EPS, s);
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.nodes[b.0].needs_grad {
                    let d = cosine_input_grad(vb, va, cos, nb, na, rb > NORM_EPS, s);
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::Softmax(a, temperature) => {
                let y = node.value.data();
                let gy: f64 = gd.iter().zip(y).map(|(g, y)| g * y).sum();
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(g, y)| y * (g - gy) / temperature)
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Slice { input, start } => {
                let t = self.value(*input);
                let row: usize = t.shape()[1..].iter().product();
                let mut d = vec![0.0; t.numel()];
                d[start * row..start * row + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, self.like(*a, gd.to_vec()));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    self.accumulate(grads, *p, self.like(*p, gd[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                // node is [r, c]; input is [c, r]
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = gd[i * c + j];
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Unfold(a, window) => {
                let n = node.value.shape()[0];
                let mut d = vec![0.0; self.value(*a).numel()];
                for i in 0..n {
                    for j in 0..*window {
                        d[i + j] += gd[i * window + j];
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::RowNormalize(a) => {
                let x = self.value(*a);
                let c = x.shape()[1];
                let y = node.value.data();
                let mut d = vec![0.0; x.numel()];
                for (r, drow) in d.chunks_mut(c).enumerate() {
                    let xr = &x.data()[r * c..(r + 1) * c];
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    let raw = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let n = raw.max(NORM_EPS);
                    if raw > NORM_EPS {
                        let gy: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((dv, gv), yv) in drow.iter_mut().zip(gr).zip(yr) {
                            *dv = (gv - yv * gy) / n;
                        }
                    } else {
                        for (dv, gv) in drow.iter_mut().zip(gr) {
                            *dv = gv / n;
                        }
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
        }
    }

    fn conv1d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        pad: (usize, usize),
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (x, w) = (self.value(input), self.value(weight));
        let (cin, len) = (x.shape()[0], x.shape()[1]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let out_len = g.shape()[1];
        let (xd, wd, gd) = (x.data(), w.data(), g.data());
        let need_x = self.nodes[input.0].needs_grad;
        let need_w = self.nodes[weight.0].needs_grad;
        let mut dx = vec![0.0; if need_x { x.numel() } else { 0 }];
        let mut dw = vec![0.0; if need_w { w.numel() } else { 0 }];
        for o in 0..cout {
            let grow = &gd[o * out_len..(o + 1) * out_len];
            for c in 0..cin {
                let xrow = &xd[c * len..(c + 1) * len];
                for kk in 0..k {
                    let widx = (o * cin + c) * k + kk;
                    let (lo, hi) = valid_range(out_len, kk, pad.0, len);
                    if need_w {
                        let mut acc = 0.0;
                        for t in lo..hi {
                            acc += grow[t] * xrow[t + kk - pad.0];
                        }
                        dw[widx] += acc;
                    }
                    if need_x {
                        let wv = wd[widx];
                        let dxrow = &mut dx[c * len..(c + 1) * len];
                        for t in lo..hi {
                            dxrow[t + kk - pad.0] += wv * grow[t];
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(grads, input, self.like(input, dx));
        }
        if need_w {
            self.accumulate(grads, weight, self.like(weight, dw));
        }
        if let Some(b) = bias {
            let db = gd.chunks(out_len).map(|r| r.iter().sum()).collect();
            self.accumulate(grads, b, self.like(b, db));
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        pad: (usize, usize),
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (x, w) = (self.value(input), self.value(weight));
        let (cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let (oh, ow) = (g.shape()[1], g.shape()[2]);
        let (xd, wd, gd) = (x.data(), w.data(), g.data());
        let need_x = self.nodes[input.0].needs_grad;
        let need_w = self.nodes[weight.0].needs_grad;
        let mut dx = vec![0.0; if need_x { x.numel() } else { 0 }];
        let mut dw = vec![0.0; if need_w { w.numel() } else { 0 }];
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let gv = gd[(o * oh + i) * ow + j];
                    if gv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = valid_range_2(j, kw, pad.1, wid);
                    for c in 0..cin {
                        for ki in 0..kh {
                            let xi = i + ki;
                            if xi < pad.0 || xi - pad.0 >= h {
                                continue;
                            }
                            let xi = xi - pad.0;
                            let wbase = ((o * cin + c) * kh + ki) * kw;
                            let xbase = (c * h + xi) * wid;
                            if need_w {
                                let dwrow = &mut dw[wbase..wbase + kw];
                                let xrow = &xd[xbase..xbase + wid];
                                for kj in lo..hi {
                                    dwrow[kj] += gv * xrow[j + kj - pad.1];
                                }
                            }
                            if need_x {
                                let wrow = &wd[wbase..wbase + kw];
                                let dxrow = &mut dx[xbase..xbase + wid];
                                for kj in lo..hi {
                                    dxrow[j + kj - pad.1] += gv * wrow[kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(grads, input, self.like(input, dx));
        }
        if need_w {
            self.accumulate(grads, weight, self.like(weight, dw));
        }
        if let Some(b) = bias {
            let db = gd.chunks(oh * ow).map(|r| r.iter().sum()).collect();
            self.accumulate(grads, b, self.like(b, db));
        }
    }
}

/// Output positions `t` in `[lo, hi)` for which `t + kk - pad` indexes the input.
fn valid_range(out_len: usize, kk: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = (len + pad).saturating_sub(kk).min(out_len);
    (lo, hi.max(lo))
}

/// Kernel taps `kj` in `[lo, hi)` for which `j + kj - pad` indexes the input.
/// Dot product with four independent accumulators, which lets the
/// compiler vectorize the loop.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn valid_range_2(j: usize, kw: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j);
    let hi = (len + pad).saturating_sub(j).min(kw);
    (lo, hi.max(lo))
}

fn cosine_input_grad(
    x: &[f64],
    y: &[f64],
    cos: f64,
    nx: f64,
    ny: f64,
    x_unclamped: bool,
    upstream: f64,
) -> Vec<f64> {
    let inv = 1.0 / (nx * ny);
    if x_unclamped {
        let c = cos / (nx * nx);
        x.iter()
            .zip(y)
            .map(|(xv, yv)| upstream * (yv * inv - c * xv))
            .collect()
    } else {
        y.iter().map(|yv| upstream * yv * inv).collect()
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}
