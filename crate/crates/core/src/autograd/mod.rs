//! Reverse-mode automatic differentiation with support for higher-order
//! gradients.
//!
//! Every backward rule is written in terms of differentiable [`Var`]
//! operations, so a gradient computed with `create_graph = true` is itself a
//! node of the graph and can be differentiated again. The gradient penalty of
//! the critic depends on exactly that.
//!
//! Values are `f64` and images are stored NCHW.

pub mod kernels;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

pub use kernels::ConvGeom;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Disables graph recording until dropped.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Rc<ArrayD<f64>>),
    Powf(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    SumAll(Var),
    BroadcastTo(Var),
    SumTo(Var),
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Pad {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
    Conv {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvInputGrad {
        g: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvWeightGrad {
        x: Var,
        g: Var,
        stride: usize,
        pad: usize,
    },
}

impl Op {
    fn parents(&self) -> Vec<&Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
            Neg(a) | Scale(a, _) | AddScalar(a) | MulConst(a, _) | Powf(a, _) | Exp(a)
            | Log(a) | Tanh(a) | Sigmoid(a) | Softplus(a) | Relu(a) | LeakyRelu(a, _)
            | Abs(a) | SumAll(a) | BroadcastTo(a) | SumTo(a) | Reshape(a) => vec![a],
            Narrow { x, .. } | Pad { x, .. } => vec![x],
            Concat(xs, _) => xs.iter().collect(),
            Conv { x, w, .. } => vec![x, w],
            ConvInputGrad { g, w, .. } => vec![g, w],
            ConvWeightGrad { x, g, .. } => vec![x, g],
        }
    }
}

struct Node {
    id: u64,
    value: ArrayD<f64>,
    requires_grad: bool,
    op: Op,
}

/// A node of the computation graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Var {
    fn from_op(value: ArrayD<f64>, op: Op) -> Var {
        let requires_grad = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        let op = if requires_grad { op } else { Op::Leaf };
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op,
        }))
    }

    /// A constant: never receives gradient.
    pub fn constant(value: ArrayD<f64>) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            op: Op::Leaf,
        }))
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(value: ArrayD<f64>) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            op: Op::Leaf,
        }))
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Var {
        Var::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.0.value.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> ArrayD<f64> {
        self.0.value.mapv(f)
    }

    fn assert_same_shape(&self, other: &Var, what: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Var) -> Var {
        self.assert_same_shape(other, "add");
        Var::from_op(&self.0.value + &other.0.value, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.assert_same_shape(other, "sub");
        Var::from_op(&self.0.value - &other.0.value, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.assert_same_shape(other, "mul");
        Var::from_op(&self.0.value * &other.0.value, Op::Mul(self.clone(), other.clone()))
    }

    pub fn neg(&self) -> Var {
        Var::from_op(self.map(|v| -v), Op::Neg(self.clone()))
    }

    pub fn scale(&self, s: f64) -> Var {
        Var::from_op(self.map(|v| v * s), Op::Scale(self.clone(), s))
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        Var::from_op(self.map(|v| v + s), Op::AddScalar(self.clone()))
    }

    /// Elementwise product with a tensor treated as a constant.
    pub fn mul_const(&self, c: Rc<ArrayD<f64>>) -> Var {
        assert_eq!(self.shape(), c.shape(), "mul_const: shape mismatch");
        Var::from_op(&self.0.value * &*c, Op::MulConst(self.clone(), c))
    }

    pub fn powf(&self, p: f64) -> Var {
        Var::from_op(self.map(|v| v.powf(p)), Op::Powf(self.clone(), p))
    }

    pub fn exp(&self) -> Var {
        Var::from_op(self.map(f64::exp), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Var {
        Var::from_op(self.map(f64::ln), Op::Log(self.clone()))
    }

    pub fn tanh(&self) -> Var {
        Var::from_op(self.map(f64::tanh), Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Var {
        Var::from_op(self.map(sigmoid), Op::Sigmoid(self.clone()))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var {
        Var::from_op(self.map(softplus), Op::Softplus(self.clone()))
    }

    pub fn relu(&self) -> Var {
        Var::from_op(self.map(|v| v.max(0.0)), Op::Relu(self.clone()))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        Var::from_op(
            self.map(|v| if v > 0.0 { v } else { slope * v }),
            Op::LeakyRelu(self.clone(), slope),
        )
    }

    pub fn abs(&self) -> Var {
        Var::from_op(self.map(f64::abs), Op::Abs(self.clone()))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Var {
        Var::from_op(ArrayD::from_elem(IxDyn(&[]), self.0.value.sum()), Op::SumAll(self.clone()))
    }

    pub fn mean(&self) -> Var {
        let n = self.0.value.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Expands size-1 axes (or a rank-0 tensor) to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::from_op(broadcast_value(&self.0.value, shape), Op::BroadcastTo(self.clone()))
    }

    /// Sums over the axes where `shape` has extent 1; ranks must agree.
    /// A rank-0 target sums everything.
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        if shape.is_empty() {
            return self.sum();
        }
        let value = sum_to_value(&self.0.value, shape);
        Var::from_op(value, Op::SumTo(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let flat: Vec<f64> = self.0.value.iter().copied().collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), flat)
            .unwrap_or_else(|_| panic!("cannot reshape {:?} to {:?}", self.shape(), shape));
        Var::from_op(value, Op::Reshape(self.clone()))
    }

    /// The sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        assert!(start + len <= self.shape()[axis], "narrow out of range");
        let value = self
            .0
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        Var::from_op(value, Op::Narrow { x: self.clone(), axis, start })
    }

    /// Embeds `self` into zeros of extent `total` along `axis`, at `start`.
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Var {
        let len = self.shape()[axis];
        assert!(start + len <= total, "pad_axis out of range");
        let mut shape = self.shape().to_vec();
        shape[axis] = total;
        let mut value = ArrayD::zeros(IxDyn(&shape));
        value
            .slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(&self.0.value);
        Var::from_op(value, Op::Pad { x: self.clone(), axis, start })
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|p| p.0.value.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        Var::from_op(value, Op::Concat(parts.to_vec(), axis))
    }

    /// Cross-correlation with weight `[C_out, C_in, kh, kw]`, no bias.
    pub fn conv2d(&self, w: &Var, stride: usize, pad: usize) -> Var {
        let value = kernels::conv2d(self.value(), w.value(), stride, pad);
        Var::from_op(value, Op::Conv { x: self.clone(), w: w.clone(), stride, pad })
    }

    /// Adjoint of [`Var::conv2d`] in its input, producing spatial extent
    /// `input`. With weight read as `[C_in, C_out, kh, kw]` this is the
    /// transposed convolution.
    pub fn conv2d_input_grad(&self, w: &Var, stride: usize, pad: usize, input: (usize, usize)) -> Var {
        let value = kernels::conv2d_input_grad(self.value(), w.value(), stride, pad, input);
        Var::from_op(value, Op::ConvInputGrad { g: self.clone(), w: w.clone(), stride, pad })
    }

    /// Transposed convolution with weight `[C_in, C_out, kh, kw]` and no
    /// output padding: out = (in − 1)·S − 2P + K.
    pub fn conv_transpose2d(&self, w: &Var, stride: usize, pad: usize) -> Var {
        let s = self.shape();
        let (kh, kw) = (w.shape()[2], w.shape()[3]);
        let oh = ((s[2] - 1) * stride + kh)
            .checked_sub(2 * pad)
            .expect("transposed conv output collapses");
        let ow = ((s[3] - 1) * stride + kw)
            .checked_sub(2 * pad)
            .expect("transposed conv output collapses");
        self.conv2d_input_grad(w, stride, pad, (oh, ow))
    }

    fn conv2d_weight_grad(x: &Var, g: &Var, stride: usize, pad: usize, kernel: (usize, usize)) -> Var {
        let value = kernels::conv2d_weight_grad(x.value(), g.value(), stride, pad, kernel);
        Var::from_op(value, Op::ConvWeightGrad { x: x.clone(), g: g.clone(), stride, pad })
    }
}

impl std::ops::Add for &Var {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        Var::add(self, rhs)
    }
}

impl std::ops::Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        Var::sub(self, rhs)
    }
}

impl std::ops::Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        Var::mul(self, rhs)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Materializes `value` broadcast to `shape` (numpy rules: leading axes
/// may be added, size-1 axes repeat).
fn broadcast_value(value: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let src_shape = value.shape();
    let lead = shape.len().checked_sub(src_shape.len());
    let fits = lead.is_some_and(|l| {
        src_shape.iter().zip(&shape[l..]).all(|(&a, &b)| a == b || a == 1)
    });
    assert!(fits, "cannot broadcast {src_shape:?} to {shape:?}");
    let lead = lead.unwrap();
    let full: Vec<usize> = std::iter::repeat_n(1, lead).chain(src_shape.iter().copied()).collect();
    let src: Vec<f64> = match value.as_slice() {
        Some(s) => s.to_vec(),
        None => value.iter().copied().collect(),
    };
    let mut out = Vec::with_capacity(shape.iter().product());
    broadcast_fill(&src, &full, shape, 0, &mut out);
    ArrayD::from_shape_vec(IxDyn(shape), out).unwrap()
}

fn broadcast_fill(src: &[f64], from: &[usize], to: &[usize], axis: usize, out: &mut Vec<f64>) {
    if from[axis..] == to[axis..] {
        out.extend_from_slice(src);
        return;
    }
    let start = out.len();
    if from[axis] == 1 {
        broadcast_fill(src, from, to, axis + 1, out);
        let chunk = out.len() - start;
        for _ in 1..to[axis] {
            out.extend_from_within(start..start + chunk);
        }
    } else {
        let inner: usize = from[axis + 1..].iter().product();
        for i in 0..to[axis] {
            broadcast_fill(&src[i * inner..(i + 1) * inner], from, to, axis + 1, out);
        }
    }
}

fn sum_to_value(value: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    assert_eq!(value.ndim(), shape.len(), "sum_to: rank mismatch {:?} -> {:?}", value.shape(), shape);
    let mut out = value.clone();
    for (axis, (&from, &to)) in value.shape().iter().zip(shape).enumerate() {
        if from != to {
            assert_eq!(to, 1, "sum_to: cannot reduce {from} to {to}");
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    out
}

fn mask_of(x: &Var, f: impl Fn(f64) -> f64) -> Rc<ArrayD<f64>> {
    Rc::new(x.value().mapv(f))
}

/// Gradients of `node`'s output with respect to each parent, given the
/// upstream gradient `g`. Only parents flagged in `want` are computed.
fn backward_rule(node: &Node, g: &Var, want: &[bool]) -> Vec<Option<Var>> {
    use Op::*;
    let pick = |i: usize, f: &dyn Fn() -> Var| if want[i] { Some(f()) } else { None };
    match &node.op {
        Leaf => vec![],
        Add(_, _) => vec![pick(0, &|| g.clone()), pick(1, &|| g.clone())],
        Sub(_, _) => vec![pick(0, &|| g.clone()), pick(1, &|| g.neg())],
        Mul(a, b) => vec![pick(0, &|| g.mul(b)), pick(1, &|| g.mul(a))],
        Neg(_) => vec![pick(0, &|| g.neg())],
        Scale(_, s) => vec![pick(0, &|| g.scale(*s))],
        AddScalar(_) => vec![pick(0, &|| g.clone())],
        MulConst(_, c) => vec![pick(0, &|| g.mul_const(c.clone()))],
        Powf(a, p) => vec![pick(0, &|| g.mul(&a.powf(p - 1.0)).scale(*p))],
        Exp(a) => vec![pick(0, &|| g.mul(&a.exp()))],
        Log(a) => vec![pick(0, &|| g.mul(&a.powf(-1.0)))],
        Tanh(a) => vec![pick(0, &|| {
            let t = a.tanh();
            g.mul(&t.mul(&t).neg().add_scalar(1.0))
        })],
        Sigmoid(a) => vec![pick(0, &|| {
            let s = a.sigmoid();
            g.mul(&s.mul(&s.neg().add_scalar(1.0)))
        })],
        Softplus(a) => vec![pick(0, &|| g.mul(&a.sigmoid()))],
        Relu(a) => vec![pick(0, &|| g.mul_const(mask_of(a, |v| if v > 0.0 { 1.0 } else { 0.0 })))],
        LeakyRelu(a, s) => {
            let s = *s;
            vec![pick(0, &|| g.mul_const(mask_of(a, |v| if v > 0.0 { 1.0 } else { s })))]
        }
        Abs(a) => vec![pick(0, &|| g.mul_const(mask_of(a, f64::signum)))],
        SumAll(a) => vec![pick(0, &|| g.broadcast_to(a.shape()))],
        BroadcastTo(a) => vec![pick(0, &|| g.sum_to(a.shape()))],
        SumTo(a) => vec![pick(0, &|| g.broadcast_to(a.shape()))],
        Reshape(a) => vec![pick(0, &|| g.reshape(a.shape()))],
        Narrow { x, axis, start } => vec![pick(0, &|| g.pad_axis(*axis, *start, x.shape()[*axis]))],
        Pad { x, axis, start } => vec![pick(0, &|| g.narrow(*axis, *start, x.shape()[*axis]))],
        Concat(xs, axis) => {
            let mut offset = 0;
            xs.iter()
                .enumerate()
                .map(|(i, x)| {
                    let len = x.shape()[*axis];
                    let out = pick(i, &|| g.narrow(*axis, offset, len));
                    offset += len;
                    out
                })
                .collect()
        }
        Conv { x, w, stride, pad } => {
            let (s, p) = (*stride, *pad);
            let input = (x.shape()[2], x.shape()[3]);
            let kernel = (w.shape()[2], w.shape()[3]);
            vec![
                pick(0, &|| g.conv2d_input_grad(w, s, p, input)),
                pick(1, &|| Var::conv2d_weight_grad(x, g, s, p, kernel)),
            ]
        }
        ConvInputGrad { g: g0, w, stride, pad } => {
            let (s, p) = (*stride, *pad);
            let kernel = (w.shape()[2], w.shape()[3]);
            // Upstream `g` has the shape of the reconstructed input.
            vec![
                pick(0, &|| g.conv2d(w, s, p)),
                pick(1, &|| Var::conv2d_weight_grad(g, g0, s, p, kernel)),
            ]
        }
        ConvWeightGrad { x, g: g0, stride, pad } => {
            let (s, p) = (*stride, *pad);
            let input = (x.shape()[2], x.shape()[3]);
            // Upstream `g` has the shape of the weight.
            vec![
                pick(0, &|| g0.conv2d_input_grad(g, s, p, input)),
                pick(1, &|| x.conv2d(g, s, p)),
            ]
        }
    }
}

/// Gradients of `output` (seeded with ones) with respect to `inputs`.
///
/// With `create_graph` the returned gradients are themselves differentiable.
/// Inputs that `output` does not depend on receive zeros.
pub fn grad(output: &Var, inputs: &[&Var], create_graph: bool) -> Vec<Var> {
    let zeros = || inputs.iter().map(|v| Var::zeros(v.shape())).collect::<Vec<_>>();
    if !output.requires_grad() {
        return zeros();
    }
    let _guard = if create_graph { None } else { Some(no_grad()) };

    let targets: HashSet<u64> = inputs.iter().map(|v| v.0.id).collect();

    // Post-order DFS restricted to nodes that require grad. A node is
    // relevant when some wanted input is reachable through its parents.
    let mut order: Vec<Var> = Vec::new();
    let mut relevant: HashMap<u64, bool> = HashMap::new();
    let mut stack: Vec<(Var, bool)> = vec![(output.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        let id = v.0.id;
        if expanded {
            let rel = targets.contains(&id)
                || v.0.op.parents().iter().any(|p| relevant.get(&p.0.id).copied().unwrap_or(false));
            relevant.insert(id, rel);
            order.push(v);
            continue;
        }
        if relevant.contains_key(&id) {
            continue;
        }
        // Placeholder so diamonds are not expanded twice.
        relevant.insert(id, false);
        stack.push((v.clone(), true));
        for p in v.0.op.parents() {
            if p.requires_grad() && !relevant.contains_key(&p.0.id) {
                stack.push((p.clone(), false));
            }
        }
    }

    let mut grads: HashMap<u64, Var> = HashMap::new();
    grads.insert(output.0.id, Var::constant(ArrayD::ones(output.0.value.raw_dim())));
    let mut results: HashMap<u64, Var> = HashMap::new();

    for v in order.iter().rev() {
        let id = v.0.id;
        if !relevant[&id] {
            continue;
        }
        let Some(g) = grads.remove(&id) else { continue };
        if targets.contains(&id) {
            results.insert(id, g.clone());
        }
        let parents = v.0.op.parents();
        if parents.is_empty() {
            continue;
        }
        let want: Vec<bool> = parents
            .iter()
            .map(|p| p.requires_grad() && relevant.get(&p.0.id).copied().unwrap_or(false))
            .collect();
        if !want.iter().any(|&w| w) {
            continue;
        }
        let contributions = backward_rule(&v.0, &g, &want);
        for (p, c) in parents.iter().zip(contributions) {
            let Some(c) = c else { continue };
            let pid = p.0.id;
            let acc = match grads.remove(&pid) {
                Some(prev) => prev.add(&c),
                None => c,
            };
            grads.insert(pid, acc);
        }
    }

    inputs
        .iter()
        .map(|v| results.remove(&v.0.id).unwrap_or_else(|| Var::zeros(v.shape())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn t(shape: &[usize], data: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), data.to_vec()).unwrap()
    }

    fn numeric_grad(f: &dyn Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>) -> ArrayD<f64> {
        let h = 1e-6;
        let mut out = ArrayD::zeros(x.raw_dim());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            out.as_slice_mut().unwrap()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn elementwise_chain_matches_finite_differences() {
        let x0 = t(&[2, 3], &[0.3, -0.2, 0.9, -1.1, 0.5, 0.05]);
        let f = |x: &Var| {
            let a = x.tanh().mul(&x.sigmoid());
            let b = x.softplus().add(&x.abs().scale(0.5));
            a.sub(&b.exp().ln()).add(&x.leaky_relu(0.01)).powf(2.0).mean()
        };
        let x = Var::param(x0.clone());
        let g = &grad(&f(&x), &[&x], false)[0];
        let fd = numeric_grad(&|a| f(&Var::constant(a.clone())).item(), &x0);
        assert_close(g.value(), &fd, 1e-7);
    }

    #[test]
    fn shape_ops_route_gradients() {
        let x0 = t(&[2, 3, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let f = |x: &Var| {
            let n = x.narrow(1, 1, 2);
            let p = n.pad_axis(1, 0, 4);
            let c = Var::concat(&[p, x.clone()], 1);
            let s = c.sum_to(&[1, 7, 1, 1]).broadcast_to(&[2, 7, 1, 1]);
            s.mul(&s).reshape(&[14]).sum()
        };
        let x = Var::param(x0.clone());
        let g = &grad(&f(&x), &[&x], false)[0];
        let fd = numeric_grad(&|a| f(&Var::constant(a.clone())).item(), &x0);
        assert_close(g.value(), &fd, 1e-6);
    }

    #[test]
    fn second_order_through_conv() {
        // f(w) = || d/dx sum(leaky(conv(x, w))) ||² depends on w only through
        // the input-gradient path; compare its w-gradient with differences.
        let x0 = ArrayD::from_shape_fn(IxDyn(&[1, 2, 5, 5]), |i| ((i[1] * 25 + i[2] * 5 + i[3]) as f64 * 0.37).sin());
        let w0 = ArrayD::from_shape_fn(IxDyn(&[3, 2, 3, 3]), |i| ((i[0] * 18 + i[1] * 9 + i[2] * 3 + i[3]) as f64 * 0.71).cos() * 0.5);
        let penalty = |w: &Var| {
            let x = Var::param(x0.clone());
            let y = x.conv2d(w, 2, 1).leaky_relu(0.2).sum();
            let gx = &grad(&y, &[&x], true)[0];
            gx.mul(gx).sum()
        };
        let w = Var::param(w0.clone());
        let p = penalty(&w);
        assert!(p.requires_grad());
        let gw = &grad(&p, &[&w], false)[0];
        let fd = numeric_grad(&|a| penalty(&Var::constant(a.clone())).item(), &w0);
        assert_close(gw.value(), &fd, 1e-6);
    }

    #[test]
    fn no_grad_produces_constants() {
        let w = Var::param(t(&[2], &[1.0, 2.0]));
        let _g = no_grad();
        assert!(!w.mul(&w).requires_grad());
    }

    #[test]
    fn unrelated_inputs_get_zero_gradient() {
        let a = Var::param(t(&[2], &[1.0, 2.0]));
        let b = Var::param(t(&[2], &[3.0, 4.0]));
        let gs = grad(&a.mul(&a).sum(), &[&a, &b], false);
        assert_eq!(gs[0].value(), &t(&[2], &[2.0, 4.0]));
        assert_eq!(gs[1].value(), &t(&[2], &[0.0, 0.0]));
    }

    proptest::proptest! {
        #[test]
        fn broadcast_matches_ndarray(
            dims in proptest::collection::vec((1usize..4, proptest::bool::ANY), 0..5),
            lead in 0usize..3,
        ) {
            let to: Vec<usize> = std::iter::repeat_n(2, lead).chain(dims.iter().map(|d| d.0)).collect();
            let from: Vec<usize> = dims.iter().map(|&(n, keep)| if keep { n } else { 1 }).collect();
            let len: usize = from.iter().product();
            let x = t(&from, &(0..len).map(|i| i as f64 * 0.5 - 1.0).collect::<Vec<_>>());
            let want = x.broadcast(IxDyn(&to)).unwrap().to_owned();
            proptest::prop_assert_eq!(broadcast_value(&x, &to), want);
        }
    }
}
