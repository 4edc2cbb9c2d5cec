//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so the tape is already topologically sorted
//! and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use dmplug::autodiff::Tape;
//! use dmplug::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```
//!
//! Binary elementwise primitives broadcast with numpy rules; the adjoint sums
//! back to each operand's shape.

pub(crate) mod kernels;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Tanh(usize),
    Silu(usize),
    Powf(usize, f64),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, #[allow(dead_code)] usize),
    Reshape(usize),
    BroadcastTo(usize),
    Concat(Vec<usize>, usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    MatMul(usize, usize),
    Conv2dSame {
        x: usize,
        k: usize,
        circular: bool,
    },
    AvgPool2d(usize, usize),
    SoftmaxFlat(usize),
    SoftmaxLast(usize),
    BilinearWarp {
        x: usize,
        flow: usize,
    },
    Mse(usize, usize),
    GatherRows(usize, Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward evaluation. Single-threaded; build one per unit of work.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients from one backward pass, indexed by the leaves they belong to.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grad-enabled input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if !std::ptr::eq(self, v.tape) {
            return Err(Error::contract("variable belongs to a different tape"));
        }
        Ok(())
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let requires = parts.iter().any(|p| self.requires(p.id));
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            requires,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_owner(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(&shapes[loss.id]));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = vjp(&nodes, id, &g);
            for (input, contrib) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc
                        .axpy(1.0, &contrib)
                        .expect("adjoint shape matches operand"),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        if !matches!(nodes[loss.id].op, Op::Leaf) {
            grads[loss.id] = None;
        }
        Ok(Gradients { grads, shapes })
    }
}

fn vjp(nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let out = &nodes[id].value;
    let ew = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
        a.zip_map(g, f).expect("adjoint shape matches output")
    };
    match &nodes[id].op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
        Op::Mul(a, b) => vec![
            (*a, ew(val(*b), &|bv, gv| bv * gv)),
            (*b, ew(val(*a), &|av, gv| av * gv)),
        ],
        Op::Div(a, b) => {
            let ga = ew(val(*b), &|bv, gv| gv / bv);
            let gb = ga.zip_map(out, |q, o| -q * o).expect("same shape");
            vec![(*a, ga), (*b, gb)]
        }
        Op::Scale(a, c) => vec![(*a, g.scale(*c))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Neg(a) => vec![(*a, g.scale(-1.0))],
        Op::Exp(a) => vec![(*a, ew(out, &|o, gv| o * gv))],
        Op::Log(a) => vec![(*a, ew(val(*a), &|x, gv| gv / x))],
        Op::Sqrt(a) => vec![(*a, ew(out, &|o, gv| 0.5 * gv / o))],
        Op::Tanh(a) => vec![(*a, ew(out, &|o, gv| gv * (1.0 - o * o)))],
        Op::Silu(a) => vec![(
            *a,
            ew(val(*a), &|x, gv| {
                let s = 1.0 / (1.0 + (-x).exp());
                gv * s * (1.0 + x * (1.0 - s))
            }),
        )],
        Op::Powf(a, p) => {
            let p = *p;
            vec![(*a, ew(val(*a), &|x, gv| gv * p * x.powf(p - 1.0)))]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Mean(a) => {
            let x = val(*a);
            vec![(*a, Tensor::full(x.shape(), g.item() / x.numel() as f64))]
        }
        Op::SumAxis(a, _) => {
            let x = val(*a);
            let gb = kernels::broadcast_to(g, x.shape()).expect("keepdim shape broadcasts");
            vec![(*a, gb)]
        }
        Op::Reshape(a) => vec![(
            *a,
            g.reshape(val(*a).shape()).expect("reshape preserves size"),
        )],
        Op::BroadcastTo(a) => vec![(*a, kernels::reduce_to(g, val(*a).shape()))],
        Op::Concat(parts, axis) => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut offset = 0;
            let mut result = Vec::with_capacity(parts.len());
            for &p in parts {
                let ps = val(p).shape().to_vec();
                let chunk = ps[*axis] * inner;
                let mut data = Vec::with_capacity(ps.iter().product());
                for o in 0..outer {
                    let row = o * shape[*axis] * inner + offset;
                    data.extend_from_slice(&g.data()[row..row + chunk]);
                }
                offset += chunk;
                result.push((p, Tensor::from_parts(ps, data)));
            }
            result
        }
        Op::Slice { input, axis, start } => {
            let xs = val(*input).shape().to_vec();
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let len = out.shape()[*axis];
            let mut data = vec![0.0; xs.iter().product()];
            for o in 0..outer {
                let dst = o * xs[*axis] * inner + start * inner;
                let src = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![(*input, Tensor::from_parts(xs, data))]
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = g.matmul(&bv.transpose().expect("2-D")).expect("conforming");
            let gb = av.transpose().expect("2-D").matmul(g).expect("conforming");
            vec![(*a, ga), (*b, gb)]
        }
        Op::Conv2dSame { x, k, circular } => {
            let (gx, gk) = kernels::conv2d_same_vjp(val(*x), val(*k), g, *circular);
            vec![(*x, gx), (*k, gk)]
        }
        Op::AvgPool2d(a, f) => vec![(*a, kernels::avg_pool2d_vjp(val(*a).shape(), *f, g))],
        Op::SoftmaxFlat(a) => {
            let mut gx = vec![0.0; out.numel()];
            kernels::softmax_slice_vjp(out.data(), g.data(), &mut gx);
            vec![(*a, Tensor::from_parts(out.shape().to_vec(), gx))]
        }
        Op::SoftmaxLast(a) => {
            let n = *out.shape().last().expect("non-empty shape");
            let mut gx = vec![0.0; out.numel()];
            for ((y, gr), o) in out
                .data()
                .chunks(n)
                .zip(g.data().chunks(n))
                .zip(gx.chunks_mut(n))
            {
                kernels::softmax_slice_vjp(y, gr, o);
            }
            vec![(*a, Tensor::from_parts(out.shape().to_vec(), gx))]
        }
        Op::BilinearWarp { x, flow } => {
            let (gx, gf) = kernels::bilinear_warp_vjp(val(*x), val(*flow), g);
            vec![(*x, gx), (*flow, gf)]
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let c = 2.0 * g.item() / av.numel() as f64;
            let ga = av.zip_map(bv, |x, y| c * (x - y)).expect("same shape");
            let gb = ga.scale(-1.0);
            vec![(*a, ga), (*b, gb)]
        }
        Op::GatherRows(table, idx) => {
            let ts = val(*table).shape().to_vec();
            let d = ts[1];
            let mut data = vec![0.0; ts[0] * d];
            for (r, &row) in idx.iter().enumerate() {
                for c in 0..d {
                    data[row * d + c] += g.data()[r * d + c];
                }
            }
            vec![(*table, Tensor::from_parts(ts, data))]
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    /// Brings both operands to their common broadcast shape.
    fn aligned(self, other: Var<'t>, op: &'static str) -> Result<(Var<'t>, Var<'t>)> {
        self.tape.check_owner(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            return Ok((self, other));
        }
        let shape = kernels::broadcast_shape(&sa, &sb)
            .map_err(|_| Error::shape(op, format!("{sa:?} vs {sb:?}")))?;
        Ok((self.broadcast_to(&shape)?, other.broadcast_to(&shape)?))
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let (a, b) = self.aligned(other, name)?;
        let value = a.value().zip_map(&b.value(), f)?;
        let requires = a.requires_grad() || b.requires_grad();
        Ok(self.tape.push(value, op(a.id, b.id), requires))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if other.value().data().iter().any(|&v| v == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().scale(c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.value().scale(-1.0);
        self.unary(v, Op::Neg(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::domain("log", format!("nonpositive operand {bad}")));
        }
        Ok(self.unary(x.map(f64::ln), Op::Log(self.id)))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::domain("sqrt", format!("negative operand {bad}")));
        }
        Ok(self.unary(x.map(f64::sqrt), Op::Sqrt(self.id)))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    /// `x * sigmoid(x)`
    pub fn silu(self) -> Var<'t> {
        let v = self.value().map(|x| x / (1.0 + (-x).exp()));
        self.unary(v, Op::Silu(self.id))
    }

    /// Elementwise `x^p`. Negative bases are rejected unless `p` is an integer.
    pub fn powf(self, p: f64) -> Result<Var<'t>> {
        let x = self.value();
        if p.fract() != 0.0 {
            if let Some(bad) = x.data().iter().find(|&&v| v < 0.0) {
                return Err(Error::domain(
                    "power",
                    format!("negative base {bad} with non-integer exponent {p}"),
                ));
            }
        }
        Ok(self.unary(x.map(|v| v.powf(p)), Op::Powf(self.id, p)))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    data[o * inner + i] += x.data()[(o * n + k) * inner + i];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        Ok(self.unary(Tensor::from_parts(out_shape, data), Op::SumAxis(self.id, axis)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        if self.shape() == shape {
            return Ok(self);
        }
        let v = kernels::broadcast_to(&self.value(), shape)?;
        Ok(self.unary(v, Op::BroadcastTo(self.id)))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(self.unary(
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_owner(other)?;
        let v = self.value().matmul(&other.value())?;
        let requires = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id), requires))
    }

    /// Zero-padded same-size convolution of the trailing two axes with a square odd kernel.
    pub fn conv2d_same(self, kernel: Var<'t>) -> Result<Var<'t>> {
        self.conv_impl(kernel, false)
    }

    /// Periodic-boundary variant of [`conv2d_same`](Self::conv2d_same).
    pub fn conv2d_circular(self, kernel: Var<'t>) -> Result<Var<'t>> {
        self.conv_impl(kernel, true)
    }

    fn conv_impl(self, kernel: Var<'t>, circular: bool) -> Result<Var<'t>> {
        self.tape.check_owner(kernel)?;
        let v = kernels::conv2d_same(&self.value(), &kernel.value(), circular)?;
        let requires = self.requires_grad() || kernel.requires_grad();
        Ok(self.tape.push(
            v,
            Op::Conv2dSame {
                x: self.id,
                k: kernel.id,
                circular,
            },
            requires,
        ))
    }

    pub fn avg_pool2d(self, factor: usize) -> Result<Var<'t>> {
        let v = kernels::avg_pool2d(&self.value(), factor)?;
        Ok(self.unary(v, Op::AvgPool2d(self.id, factor)))
    }

    /// Softmax over every entry of the tensor.
    pub fn softmax_flat(self) -> Var<'t> {
        let x = self.value();
        let mut out = vec![0.0; x.numel()];
        kernels::softmax_slice(x.data(), &mut out);
        self.unary(Tensor::from_parts(x.shape().to_vec(), out), Op::SoftmaxFlat(self.id))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(self) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().expect("non-empty shape");
        let mut out = vec![0.0; x.numel()];
        for (xr, or) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            kernels::softmax_slice(xr, or);
        }
        self.unary(Tensor::from_parts(x.shape().to_vec(), out), Op::SoftmaxLast(self.id))
    }

    /// Bilinear backward warp by a `[2, H, W]` displacement field.
    pub fn bilinear_warp(self, flow: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_owner(flow)?;
        let v = kernels::bilinear_warp(&self.value(), &flow.value())?;
        let requires = self.requires_grad() || flow.requires_grad();
        Ok(self.tape.push(
            v,
            Op::BilinearWarp {
                x: self.id,
                flow: flow.id,
            },
            requires,
        ))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_owner(other)?;
        let (a, b) = (self.value(), other.value());
        a.expect_same_shape(&b, "mse")?;
        let n = a.numel() as f64;
        let v = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let requires = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(Tensor::scalar(v), Op::Mse(self.id, other.id), requires))
    }

    /// Rows of a 2-D table selected by `rows` (embedding lookup).
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        let [n, d] = t.shape()[..] else {
            return Err(Error::shape("gather_rows", format!("{:?}", t.shape())));
        };
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        Ok(self.unary(
            Tensor::from_parts(vec![rows.len(), d], data),
            Op::GatherRows(self.id, rows.to_vec()),
        ))
    }
}

#[cfg(test)]
mod tests;
