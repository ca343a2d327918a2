//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape of nodes. Every operation evaluates its
//! forward value eagerly and records what backward needs; [`Graph::backward`]
//! walks the tape once in reverse insertion order and then clears it.

use std::collections::HashMap;
use std::fmt;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::nn::conv::{self, ConvSpec};
use crate::nn::pool;
use crate::nn::resize::{self, ResizeMode};
use crate::tensor::{check_shape, numel, strides, Real, Tensor};

/// Handle to a tensor living in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Operation families recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    Exp,
    Log,
    Sigmoid,
    Relu,
    LeakyRelu,
    Clamp,
    Reshape,
    Expand,
    Concat,
    Slice,
    Sum,
    Mean,
    Softmax,
    LogSoftmax,
    Conv3d,
    ConvTranspose3d,
    AvgPool3d,
    Resize,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::AddScalar,
        OpKind::MulScalar,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::LeakyRelu,
        OpKind::Clamp,
        OpKind::Reshape,
        OpKind::Expand,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Conv3d,
        OpKind::ConvTranspose3d,
        OpKind::AvgPool3d,
        OpKind::Resize,
    ];
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    /// Case-insensitive match on the variant name.
    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("op", format!("unknown operation `{s}`")))
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Clamp(Var, T, T),
    Reshape(Var),
    Expand(Var),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        input: Var,
        axes: Vec<usize>,
    },
    Mean {
        input: Var,
        axes: Vec<usize>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    AvgPool(Var, usize),
    Resize(Var, ResizeMode),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Expand(..) => OpKind::Expand,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::Conv { spec, .. } if spec.transposed => OpKind::ConvTranspose3d,
            Op::Conv { .. } => OpKind::Conv3d,
            Op::AvgPool(..) => OpKind::AvgPool3d,
            Op::Resize(..) => OpKind::Resize,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], keyed by leaf.
pub struct Gradients<T> {
    map: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.map.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// For every flat index of `shape`, the offset obtained with `mapped` strides.
fn mapped_offsets(shape: &[usize], mapped: &[usize]) -> Vec<usize> {
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += mapped[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= mapped[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Strides of `small` laid over `big`'s axes, zero on broadcast axes.
fn broadcast_strides(big: &[usize], small: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: big.to_vec(),
        rhs: small.to_vec(),
    };
    if big.len() != small.len() {
        return Err(mismatch());
    }
    let st = strides(small);
    big.iter()
        .zip(small)
        .zip(st)
        .map(|((&b, &s), st)| match s {
            _ if s == b => Ok(st),
            1 => Ok(0),
            _ => Err(mismatch()),
        })
        .collect()
}

/// Sums `g` (shaped like `big`) down onto `small`.
fn reduce_to<T: Real>(g: &Tensor<T>, small: &[usize]) -> Tensor<T> {
    if g.shape() == small {
        return g.clone();
    }
    let st = broadcast_strides(g.shape(), small, "reduce_to").expect("shapes validated in forward");
    let offs = mapped_offsets(g.shape(), &st);
    let mut out = vec![T::zero(); numel(small)];
    for (&o, &v) in offs.iter().zip(g.data()) {
        out[o] += v;
    }
    Tensor::from_parts(small.to_vec(), out)
}

fn channel_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::contract(format!(
            "channel op needs rank >= 2, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn softmax_into<T: Real>(x: &[T], out: &mut [T], c: usize, v: usize, log: bool) {
    let mut mx = vec![T::neg_infinity(); v];
    for ch in 0..c {
        for (m, &xv) in mx.iter_mut().zip(&x[ch * v..(ch + 1) * v]) {
            *m = m.max(xv);
        }
    }
    let mut sum = vec![T::zero(); v];
    for ch in 0..c {
        let o = &mut out[ch * v..(ch + 1) * v];
        for ((ov, &xv), (s, &m)) in o
            .iter_mut()
            .zip(&x[ch * v..(ch + 1) * v])
            .zip(sum.iter_mut().zip(&mx))
        {
            let e = (xv - m).exp();
            *s += e;
            *ov = if log { xv - m } else { e };
        }
    }
    for ch in 0..c {
        let o = &mut out[ch * v..(ch + 1) * v];
        for (ov, &s) in o.iter_mut().zip(&sum) {
            if log {
                *ov -= s.ln();
            } else {
                *ov = *ov / s;
            }
        }
    }
}

/// Reverse-mode tape. Owned by one thread of execution.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    nan_check: bool,
    first_non_finite: Option<OpKind>,
    fault: Option<OpKind>,
    profile: Option<Profile>,
    last_push: Option<Instant>,
}

/// Accumulated wall time per operation family, forward and backward.
#[derive(Clone, Debug, Default)]
pub struct Profile {
    pub forward: HashMap<OpKind, (usize, Duration)>,
    pub backward: HashMap<OpKind, (usize, Duration)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            nan_check: false,
            first_non_finite: None,
            fault: None,
            profile: None,
            last_push: None,
        }
    }

    /// Record per-op timings; forward time is measured between consecutive pushes.
    pub fn with_profiling(mut self, on: bool) -> Self {
        self.profile = on.then(Profile::default);
        self
    }

    pub fn profile(&self) -> Option<&Profile> {
        self.profile.as_ref()
    }

    /// Marks the start of a forward op for profiling purposes.
    fn tick(&mut self) {
        if self.profile.is_some() {
            self.last_push = Some(Instant::now());
        }
    }

    /// Screen every forward value for NaN/Inf; the first offender is reported by `backward`.
    pub fn with_nan_check(mut self, on: bool) -> Self {
        self.nan_check = on;
        self
    }

    /// Self-test hook: scales the backward contribution of every `kind` node by 1.5.
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The first operation that produced a non-finite value, when screening is on.
    pub fn non_finite_op(&self) -> Option<OpKind> {
        self.first_non_finite
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert!(!self.consumed, "graph was consumed by backward");
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        if let (Some(p), Some(t0)) = (self.profile.as_mut(), self.last_push.take()) {
            let e = p.forward.entry(op.kind()).or_default();
            e.0 += 1;
            e.1 += t0.elapsed();
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        if self.nan_check && self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(op.kind());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok(Tensor::from_parts(av.shape().to_vec(), data));
        }
        let st = broadcast_strides(av.shape(), bv.shape(), op)?;
        let offs = mapped_offsets(av.shape(), &st);
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .zip(&offs)
            .map(|(&x, &o)| f(x, bd[o]))
            .collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    /// `a + b`, with `b` broadcast over singleton axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tick();
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tick();
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tick();
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tick();
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.tick();
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        self.tick();
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::MulScalar(a, c), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.tick();
        let v = self.value(a).map(T::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.tick();
        let v = self.value(a).map(T::ln);
        self.push(v, Op::Log(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.tick();
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.tick();
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.tick();
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    /// Clamps into `[lo, hi]`; no gradient flows where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.tick();
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.tick();
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Broadcasts singleton axes of `a` up to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.tick();
        check_shape(shape)?;
        let av = self.value(a);
        let st = broadcast_strides(shape, av.shape(), "expand")?;
        let offs = mapped_offsets(shape, &st);
        let data = offs.iter().map(|&o| av.data()[o]).collect();
        let v = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push(v, Op::Expand(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.tick();
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::from_parts(shape, data);
        Ok(self.push(v, Op::Concat(inputs.to_vec(), axis), inputs))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.tick();
        let av = self.value(a);
        let shape = av.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: shape.to_vec(),
                rhs: vec![start, len],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let v = Tensor::from_parts(out_shape, data);
        Ok(self.push(
            v,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            &[a],
        ))
    }

    fn reduce(&self, a: Var, axes: &[usize], keepdim: bool) -> Result<(Tensor<T>, usize)> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() || seen[ax] {
                return Err(Error::InvalidAxis {
                    axis: ax,
                    rank: shape.len(),
                });
            }
            seen[ax] = true;
        }
        let kept: Vec<usize> = shape
            .iter()
            .zip(&seen)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let st = broadcast_strides(&shape, &kept, "reduce")?;
        let offs = mapped_offsets(&shape, &st);
        let mut out = vec![T::zero(); numel(&kept)];
        for (&o, &v) in offs.iter().zip(self.value(a).data()) {
            out[o] += v;
        }
        let count = axes.iter().map(|&ax| shape[ax]).product();
        let out_shape = if keepdim {
            kept
        } else {
            shape
                .iter()
                .zip(&seen)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect()
        };
        Ok((Tensor::from_parts(out_shape, out), count))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.tick();
        let (v, _) = self.reduce(a, axes, keepdim)?;
        Ok(self.push(
            v,
            Op::Sum {
                input: a,
                axes: axes.to_vec(),
            },
            &[a],
        ))
    }

    pub fn mean(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.tick();
        let (mut v, count) = self.reduce(a, axes, keepdim)?;
        let inv = T::one() / T::cast(count as f64);
        v.data_mut().iter_mut().for_each(|x| *x *= inv);
        Ok(self.push(
            v,
            Op::Mean {
                input: a,
                axes: axes.to_vec(),
            },
            &[a],
        ))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes, false).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes, false).expect("all axes are valid")
    }

    /// Softmax over axis 1 of a `[B, C, ...]` tensor, max-stabilized.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        self.tick();
        let v = self.channel_softmax(a, false)?;
        Ok(self.push(v, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax_channels(&mut self, a: Var) -> Result<Var> {
        self.tick();
        let v = self.channel_softmax(a, true)?;
        Ok(self.push(v, Op::LogSoftmax(a), &[a]))
    }

    fn channel_softmax(&self, a: Var, log: bool) -> Result<Tensor<T>> {
        let x = self.value(a);
        let (b, c, v) = channel_dims(x.shape())?;
        let mut out = vec![T::zero(); x.numel()];
        for bi in 0..b {
            let r = bi * c * v..(bi + 1) * c * v;
            softmax_into(&x.data()[r.clone()], &mut out[r], c, v, log);
        }
        Ok(Tensor::from_parts(x.shape().to_vec(), out))
    }

    /// 3D (transposed) convolution; `bias` must be present iff `spec.bias`.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: &ConvSpec,
    ) -> Result<Var> {
        self.tick();
        let v = conv::conv3d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let mut ins = vec![input, weight];
        ins.extend(bias);
        Ok(self.push(
            v,
            Op::Conv {
                input,
                weight,
                bias,
                spec: *spec,
            },
            &ins,
        ))
    }

    pub fn avg_pool3d(&mut self, a: Var, window: usize) -> Result<Var> {
        self.tick();
        let v = pool::avg_pool3d_forward(self.value(a), window)?;
        Ok(self.push(v, Op::AvgPool(a, window), &[a]))
    }

    /// Resamples the trailing three axes to `target`.
    pub fn resize(&mut self, a: Var, target: [usize; 3], mode: ResizeMode) -> Result<Var> {
        self.tick();
        let v = resize::resize_forward(self.value(a), target, mode)?;
        Ok(self.push(v, Op::Resize(a, mode), &[a]))
    }

    /// Back-propagates from a one-element `loss`, returning gradients for every
    /// `param` leaf (zeros where unused), then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        if let Some(kind) = self.first_non_finite {
            return Err(Error::NonFinite(kind.to_string()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![T::one()],
        ));
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let t0 = Instant::now();
            let mut contribs = self.node_backward(i, &g)?;
            if let Some(p) = self.profile.as_mut() {
                let e = p.backward.entry(self.nodes[i].op.kind()).or_default();
                e.0 += 1;
                e.1 += t0.elapsed();
            }
            if self.fault == Some(self.nodes[i].op.kind()) {
                let k = T::cast(1.5);
                for (_, t) in contribs.iter_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= k);
                }
            }
            for (v, t) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        }
        let mut map = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = match grads[i].take() {
                    Some(g) => g,
                    None => Tensor::from_parts(
                        node.value.shape().to_vec(),
                        vec![T::zero(); node.value.numel()],
                    ),
                };
                map.insert(Var(i), g);
            }
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(Gradients { map })
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let zip_map = |x: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| f(gv, xv))
                .collect();
            Tensor::from_parts(g.shape().to_vec(), data)
        };
        // `b` aligned elementwise with `g` (broadcast expanded).
        let aligned = |b: Var| -> Tensor<T> {
            let bv = val(b);
            if bv.shape() == g.shape() {
                return bv.clone();
            }
            let st = broadcast_strides(g.shape(), bv.shape(), "aligned").expect("validated");
            let offs = mapped_offsets(g.shape(), &st);
            Tensor::from_parts(
                g.shape().to_vec(),
                offs.iter().map(|&o| bv.data()[o]).collect(),
            )
        };
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                if wants(*b) {
                    out.push((*b, reduce_to(g, val(*b).shape())));
                }
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                if wants(*b) {
                    out.push((*b, reduce_to(&g.map(|v| -v), val(*b).shape())));
                }
            }
            Op::Mul(a, b) => {
                let bv = aligned(*b);
                if wants(*a) {
                    out.push((*a, zip_map(&bv, &|gv, y| gv * y)));
                }
                if wants(*b) {
                    let gb = zip_map(val(*a), &|gv, x| gv * x);
                    out.push((*b, reduce_to(&gb, val(*b).shape())));
                }
            }
            Op::Div(a, b) => {
                let bv = aligned(*b);
                if wants(*a) {
                    out.push((*a, zip_map(&bv, &|gv, y| gv / y)));
                }
                if wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(q.data())
                        .zip(bv.data())
                        .map(|((&gv, &qv), &y)| -gv * qv / y)
                        .collect();
                    let gb = Tensor::from_parts(g.shape().to_vec(), data);
                    out.push((*b, reduce_to(&gb, val(*b).shape())));
                }
            }
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::MulScalar(a, c) => {
                let c = *c;
                out.push((*a, g.map(|v| v * c)));
            }
            Op::Exp(a) => out.push((*a, zip_map(&node.value, &|gv, y| gv * y))),
            Op::Log(a) => out.push((*a, zip_map(val(*a), &|gv, x| gv / x))),
            Op::Sigmoid(a) => {
                out.push((*a, zip_map(&node.value, &|gv, y| gv * y * (T::one() - y))))
            }
            Op::Relu(a) => out.push((
                *a,
                zip_map(val(*a), &|gv, x| if x > T::zero() { gv } else { T::zero() }),
            )),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                out.push((
                    *a,
                    zip_map(val(*a), &|gv, x| if x > T::zero() { gv } else { gv * s }),
                ));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                out.push((
                    *a,
                    zip_map(val(*a), &|gv, x| {
                        if x < lo || x > hi {
                            T::zero()
                        } else {
                            gv
                        }
                    }),
                ));
            }
            Op::Reshape(a) => out.push((*a, g.clone().reshape(val(*a).shape())?)),
            Op::Expand(a) => out.push((*a, reduce_to(g, val(*a).shape()))),
            Op::Concat(inputs, axis) => {
                let axis = *axis;
                let shape = g.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[axis];
                let mut start = 0;
                for &v in inputs {
                    let n = val(v).shape()[axis];
                    if wants(v) {
                        let mut data = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            data.extend_from_slice(&g.data()[base..base + n * inner]);
                        }
                        out.push((v, Tensor::from_parts(val(v).shape().to_vec(), data)));
                    }
                    start += n;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = val(*input).shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let n = in_shape[*axis];
                let len = g.shape()[*axis];
                let mut data = vec![T::zero(); numel(in_shape)];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                out.push((*input, Tensor::from_parts(in_shape.to_vec(), data)));
            }
            Op::Sum { input, axes } | Op::Mean { input, axes } => {
                let in_shape = val(*input).shape();
                let kept: Vec<usize> = in_shape
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
                    .collect();
                let scale = match node.op {
                    Op::Mean { .. } => {
                        T::one()
                            / T::cast(axes.iter().map(|&a| in_shape[a]).product::<usize>() as f64)
                    }
                    _ => T::one(),
                };
                let st = broadcast_strides(in_shape, &kept, "sum backward")?;
                let offs = mapped_offsets(in_shape, &st);
                let data = offs.iter().map(|&o| g.data()[o] * scale).collect();
                out.push((*input, Tensor::from_parts(in_shape.to_vec(), data)));
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let (b, c, v) = channel_dims(s.shape())?;
                let mut data = vec![T::zero(); s.numel()];
                for bi in 0..b {
                    let base = bi * c * v;
                    let mut dot = vec![T::zero(); v];
                    for ch in 0..c {
                        let r = base + ch * v..base + (ch + 1) * v;
                        for ((d, &gv), &sv) in
                            dot.iter_mut().zip(&g.data()[r.clone()]).zip(&s.data()[r])
                        {
                            *d += gv * sv;
                        }
                    }
                    for ch in 0..c {
                        let r = base + ch * v..base + (ch + 1) * v;
                        for (((o, &gv), &sv), &d) in data[r.clone()]
                            .iter_mut()
                            .zip(&g.data()[r.clone()])
                            .zip(&s.data()[r])
                            .zip(&dot)
                        {
                            *o = sv * (gv - d);
                        }
                    }
                }
                out.push((*a, Tensor::from_parts(s.shape().to_vec(), data)));
            }
            Op::LogSoftmax(a) => {
                let ls = &node.value;
                let (b, c, v) = channel_dims(ls.shape())?;
                let mut data = vec![T::zero(); ls.numel()];
                for bi in 0..b {
                    let base = bi * c * v;
                    let mut gsum = vec![T::zero(); v];
                    for ch in 0..c {
                        for (s, &gv) in gsum
                            .iter_mut()
                            .zip(&g.data()[base + ch * v..base + (ch + 1) * v])
                        {
                            *s += gv;
                        }
                    }
                    for ch in 0..c {
                        let r = base + ch * v..base + (ch + 1) * v;
                        for (((o, &gv), &lv), &s) in data[r.clone()]
                            .iter_mut()
                            .zip(&g.data()[r.clone()])
                            .zip(&ls.data()[r])
                            .zip(&gsum)
                        {
                            *o = gv - lv.exp() * s;
                        }
                    }
                }
                out.push((*a, Tensor::from_parts(ls.shape().to_vec(), data)));
            }
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            } => {
                let need = [wants(*input), wants(*weight), bias.is_some_and(wants)];
                let grads = conv::conv3d_backward(val(*input), val(*weight), spec, g, need)?;
                if let Some(t) = grads.input {
                    out.push((*input, t));
                }
                if let Some(t) = grads.weight {
                    out.push((*weight, t));
                }
                if let (Some(b), Some(t)) = (bias, grads.bias) {
                    out.push((*b, t));
                }
            }
            Op::AvgPool(a, window) => {
                out.push((*a, pool::avg_pool3d_backward(val(*a).shape(), g, *window)));
            }
            Op::Resize(a, mode) => {
                out.push((*a, resize::resize_backward(val(*a).shape(), g, *mode)));
            }
        }
        Ok(out)
    }
}
