use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Upsample2 { input: Var },
    MatMul { a: Var, b: Var },
    Transpose { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Relu { input: Var },
    Exp { input: Var },
    Log { input: Var },
    Sum { input: Var, axis: usize },
    SumAll { input: Var },
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape { input: Var },
    Index { input: Var, index: usize },
    Stack { inputs: Vec<Var> },
    Map { input: Var, slope: Vec<f64> },
    Attention { x: Var, p: Var, q: Var, inv_tau: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode differentiation graph. Build a fresh one per batch: record
/// leaves with [`Graph::input`] / [`Graph::param`], compose operators, then
/// call [`Graph::backward`] on a scalar.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_dims(x: &[usize], w: &[usize]) -> ConvDims {
    ConvDims {
        batch: x[0],
        c_in: x[1],
        c_out: w[0],
        height: x[2],
        width: x[3],
        kernel: w[2],
    }
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

    /// Drops every recorded node. Outstanding `Var`s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        value.ensure_finite(op_name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant (no gradient).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push("input", value, Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push("param", value, Op::Leaf, true)
    }

    /// Copies `var`'s value into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, var: Var) -> Result<Var> {
        let v = self.value(var).clone();
        self.input(v)
    }

    /// Same-padded, stride-1 2-D convolution.
    /// `x: [B, Cin, H, W]`, `weight: [Cout, Cin, K, K]` with odd `K`, `bias: [Cout]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} incompatible with kernel {ws:?}"),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {bs:?} does not match kernel {ws:?}"),
            ));
        }
        let d = conv_dims(xs, ws);
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            d,
        );
        let t = Tensor::new([d.batch, d.c_out, d.height, d.width], out)?;
        let rg = self.rg(&[x, weight, bias]);
        self.push("conv2d", t, Op::Conv2d { input: x, weight, bias }, rg)
    }

    /// 2x2 max pooling over the last two axes of a rank-4 tensor.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::shape(
                "maxpool2",
                format!("input {s:?} must be rank 4 with even spatial dims"),
            ));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let t = Tensor::new([s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        let rg = self.rg(&[x]);
        self.push("maxpool2", t, Op::MaxPool2 { input: x, argmax }, rg)
    }

    /// Nearest-neighbour 2x upsampling over the last two axes of a rank-4 tensor.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2", format!("input {s:?} must be rank 4")));
        }
        let out = kernels::upsample2_forward(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let t = Tensor::new([s[0], s[1], s[2] * 2, s[3] * 2], out)?;
        let rg = self.rg(&[x]);
        self.push("upsample2", t, Op::Upsample2 { input: x }, rg)
    }

    /// `a[n,k] . b[k,m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let t = Tensor::new([n, m], out)?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", t, Op::MatMul { a, b }, rg)
    }

    /// Fused `q · softmax_rows(xᵀp · inv_tau)ᵀ` for `x: [D, N]`, `p: [D, M]`,
    /// `q: [K, M]`, giving `[K, N]`. Equivalent to composing transpose,
    /// matmul, scale and softmax, but never stores the `N x M` matrix.
    pub fn attention(&mut self, x: Var, p: Var, q: Var, inv_tau: f64) -> Result<Var> {
        let (xs, ps, qs) = (self.shape(x), self.shape(p), self.shape(q));
        if xs.len() != 2 || ps.len() != 2 || qs.len() != 2 || xs[0] != ps[0] || ps[1] != qs[1] {
            return Err(Error::shape(
                "attention",
                format!("x {xs:?}, p {ps:?}, q {qs:?} must be [D, N], [D, M], [K, M]"),
            ));
        }
        if !(inv_tau.is_finite() && inv_tau > 0.0) {
            return Err(Error::shape("attention", format!("inverse temperature {inv_tau}")));
        }
        let (n, m, k) = (xs[1], ps[1], qs[0]);
        let out = kernels::attention_forward(self.value(x).data(), self.value(p).data(), self.value(q).data(), n, m, inv_tau);
        let t = Tensor::new([k, n], out)?;
        let rg = self.rg(&[x, p, q]);
        self.push("attention", t, Op::Attention { x, p, q, inv_tau }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("input {s:?} must be rank 2")));
        }
        let (r, c) = (s[0], s[1]);
        let t = Tensor::new([c, r], kernels::transpose(self.value(x).data(), r, c))?;
        let rg = self.rg(&[x]);
        self.push("transpose", t, Op::Transpose { input: x }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push("add", t, Op::Add { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", t, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * factor).collect())?;
        let rg = self.rg(&[x]);
        self.push("scale", t, Op::Scale { input: x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x.max(0.0)).collect())?;
        let rg = self.rg(&[x]);
        self.push("relu", t, Op::Relu { input: x }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x.exp()).collect())?;
        let rg = self.rg(&[x]);
        self.push("exp", t, Op::Exp { input: x }, rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x.ln()).collect())?;
        let rg = self.rg(&[x]);
        self.push("log", t, Op::Log { input: x }, rg)
    }

    /// Element-wise user function; `f` returns (value, derivative) at each input.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> (f64, f64)) -> Result<Var> {
        let v = self.value(x);
        let (vals, slope): (Vec<f64>, Vec<f64>) = v.data().iter().map(|&x| f(x)).unzip();
        if slope.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite { op: "map" });
        }
        let t = Tensor::new(v.shape().to_vec(), vals)?;
        let rg = self.rg(&[x]);
        self.push("map", t, Op::Map { input: x, slope }, rg)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(
                op,
                format!("axis {axis} out of range for {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", x, axis)?;
        let s = self.shape(x).to_vec();
        let (outer, len, inner) = axis_extents(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..][..inner];
                for (d, v) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        self.push("sum", t, Op::Sum { input: x, axis }, rg)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum_all", Tensor::scalar(total), Op::SumAll { input: x }, rg)
    }

    fn softmax_values(src: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
        let (outer, len, inner) = axis_extents(shape, axis);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                if log {
                    let lse = total.ln();
                    for a in 0..len {
                        out[at(a)] = src[at(a)] - max - lse;
                    }
                } else {
                    for a in 0..len {
                        out[at(a)] /= total;
                    }
                }
            }
        }
        out
    }

    /// Softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let v = self.value(x);
        let out = Self::softmax_values(v.data(), v.shape(), axis, false);
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("softmax", t, Op::Softmax { input: x, axis }, rg)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let v = self.value(x);
        let out = Self::softmax_values(v.data(), v.shape(), axis, true);
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("log_softmax", t, Op::LogSoftmax { input: x, axis }, rg)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(inputs);
        self.push(
            "concat",
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        self.push("reshape", t, Op::Reshape { input: x }, rg)
    }

    /// Selects entry `index` along axis 0, dropping that axis.
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || index >= s[0] {
            return Err(Error::shape("index", format!("index {index} out of range for {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[index * inner..][..inner].to_vec();
        let t = Tensor::new(s[1..].to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("index", t, Op::Index { input: x, index }, rg)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("stack", "no inputs"))?;
        let base = self.shape(first).to_vec();
        let mut out = Vec::with_capacity(inputs.len() * self.value(first).numel());
        for &v in inputs {
            if self.shape(v) != base.as_slice() {
                return Err(Error::shape("stack", format!("{base:?} vs {:?}", self.shape(v))));
            }
            out.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![inputs.len()];
        shape.extend_from_slice(&base);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(inputs);
        self.push(
            "stack",
            t,
            Op::Stack {
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Graph(format!("unknown node {}", loss.0)))?;
        if node.value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Graph(
                "loss is detached: no trainable tensor reaches it".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contrib: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(&contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { input, weight, bias } => {
                let d = conv_dims(self.shape(input), self.shape(weight));
                let (gi, gw, gb) =
                    kernels::conv2d_backward(val(input), val(weight), g, d, needs(input));
                if let Some(gi) = gi {
                    self.accumulate(grads, input, gi);
                }
                self.accumulate(grads, weight, gw);
                self.accumulate(grads, bias, gb);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gi = vec![0.0; self.nodes[input.0].value.numel()];
                for (&src, gv) in argmax.iter().zip(g) {
                    gi[src] += gv;
                }
                self.accumulate(grads, *input, gi);
            }
            &Op::Upsample2 { input } => {
                let s = self.shape(input);
                let gi = kernels::upsample2_backward(g, s[0] * s[1], s[2], s[3]);
                self.accumulate(grads, input, gi);
            }
            &Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (ga, gb) = kernels::matmul_backward(val(a), val(b), g, sa[0], sa[1], sb[1]);
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            &Op::Attention { x, p, q, inv_tau } => {
                let (n, m) = (self.shape(x)[1], self.shape(p)[1]);
                let (gx, gp, gq) = kernels::attention_backward(val(x), val(p), val(q), g, n, m, inv_tau);
                self.accumulate(grads, x, gx);
                self.accumulate(grads, p, gp);
                self.accumulate(grads, q, gq);
            }
            &Op::Transpose { input } => {
                let s = node.value.shape();
                self.accumulate(grads, input, kernels::transpose(g, s[0], s[1]));
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    let ga = g.iter().zip(val(b)).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, a, ga);
                }
                if needs(b) {
                    let gb = g.iter().zip(val(a)).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Scale { input, factor } => {
                self.accumulate(grads, input, g.iter().map(|g| g * factor).collect());
            }
            &Op::Relu { input } => {
                let gi = g
                    .iter()
                    .zip(val(input))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, input, gi);
            }
            &Op::Exp { input } => {
                let gi = g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                self.accumulate(grads, input, gi);
            }
            &Op::Log { input } => {
                let gi = g.iter().zip(val(input)).map(|(g, x)| g / x).collect();
                self.accumulate(grads, input, gi);
            }
            Op::Map { input, slope } => {
                let gi = g.iter().zip(slope).map(|(g, s)| g * s).collect();
                self.accumulate(grads, *input, gi);
            }
            &Op::Sum { input, axis } => {
                let (outer, len, inner) = axis_extents(self.shape(input), axis);
                let mut gi = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g[o * inner..][..inner];
                    for a in 0..len {
                        gi[(o * len + a) * inner..][..inner].copy_from_slice(src);
                    }
                }
                self.accumulate(grads, input, gi);
            }
            &Op::SumAll { input } => {
                let n = self.nodes[input.0].value.numel();
                self.accumulate(grads, input, vec![g[0]; n]);
            }
            &Op::Softmax { input, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), axis);
                let mut gi = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dotp: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            gi[at(a)] = y[at(a)] * (g[at(a)] - dotp);
                        }
                    }
                }
                self.accumulate(grads, input, gi);
            }
            &Op::LogSoftmax { input, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), axis);
                let mut gi = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let total: f64 = (0..len).map(|a| g[at(a)]).sum();
                        for a in 0..len {
                            gi[at(a)] = g[at(a)] - y[at(a)].exp() * total;
                        }
                    }
                }
                self.accumulate(grads, input, gi);
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if needs(v) {
                        let mut gi = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            gi.extend_from_slice(&g[(o * total + offset) * inner..][..len * inner]);
                        }
                        self.accumulate(grads, v, gi);
                    }
                    offset += len;
                }
            }
            &Op::Reshape { input } => self.accumulate(grads, input, g.to_vec()),
            &Op::Index { input, index } => {
                let n = self.nodes[input.0].value.numel();
                let mut gi = vec![0.0; n];
                gi[index * g.len()..][..g.len()].copy_from_slice(g);
                self.accumulate(grads, input, gi);
            }
            Op::Stack { inputs } => {
                let inner = g.len() / inputs.len();
                for (k, &v) in inputs.iter().enumerate() {
                    self.accumulate(grads, v, g[k * inner..][..inner].to_vec());
                }
            }
        }
    }
}
