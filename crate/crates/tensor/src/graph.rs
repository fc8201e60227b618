//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s together with the
//! forward value. [`Graph::backward`] replays the tape in reverse from a
//! single-element loss and returns gradients for every leaf that requires
//! them. Nodes that cannot reach a gradient-requiring leaf are skipped.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, Broadcast, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary<T> {
    Tanh,
    Sigmoid,
    Square,
    Sqrt,
    /// `(x + eps)^(-1/2)`
    Rsqrt(T),
    Neg,
    Scale(T),
    Shift(T),
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Unary(Var, Unary<T>),
    Reshape(Var),
    Linear(Var, Var),
    Conv2d { x: Var, w: Var, g: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, g: ConvGeom },
    AvgPool { x: Var, k: usize },
    Resize { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    SumTo(Var),
    SampleNorm(Var),
    Mean(Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph that tracks gradients for trainable parameters and grad leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// Graph in which nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First element of `v`, for single-element results such as losses.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() == tb.shape() {
            return ta.zip_map(tb, f);
        }
        let bc = Broadcast::new(ta.shape(), tb.shape())
            .ok_or_else(|| mismatch(name, ta.shape(), tb.shape()))?;
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![T::zero(); numel(&bc.out_shape)];
        bc.for_each(|o, ia, ib| out[o] = f(da[ia], db[ib]));
        Tensor::new(bc.out_shape, out)
    }

    /// Elementwise sum with broadcasting over size-1 axes (equal rank).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn unary(&mut self, a: Var, u: Unary<T>) -> Var {
        let x = &self.nodes[a.0].value;
        let v = match u {
            Unary::Tanh => x.map(|v| v.tanh()),
            Unary::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
            Unary::Square => x.map(|v| v * v),
            Unary::Sqrt => x.map(|v| v.sqrt()),
            Unary::Rsqrt(eps) => x.map(|v| (v + eps).sqrt().recip()),
            Unary::Neg => x.map(|v| -v),
            Unary::Scale(c) => x.map(|v| v * c),
            Unary::Shift(c) => x.map(|v| v + c),
        };
        let rg = self.rg(&[a]);
        self.push(v, Op::Unary(a, u), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Unary::Scale(c))
    }

    pub fn shift(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Unary::Shift(c))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// `x [n, in] · wᵀ` for `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (n, inp, out) = match (tx.shape(), tw.shape()) {
            (&[n, i], &[o, i2]) if i == i2 => (n, i, o),
            _ => return Err(mismatch("linear", tw.shape(), tx.shape())),
        };
        let mut y = vec![T::zero(); n * out];
        gemm(
            false,
            true,
            n,
            inp,
            out,
            tx.data(),
            tw.data(),
            T::zero(),
            &mut y,
        );
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(vec![n, out], y)?, Op::Linear(x, w), rg))
    }

    /// Cross-correlation of `x [n, ci, h, w]` with `w [co, ci, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (n, ci, h, wd) = tx.dims4("conv2d")?;
        let (co, ci2, k, k2) = tw.dims4("conv2d")?;
        if ci != ci2 || k != k2 {
            return Err(mismatch("conv2d", &[co, ci, k, k], tw.shape()));
        }
        let g = ConvGeom::conv(h, wd, k, stride, pad)
            .ok_or_else(|| invalid("conv2d", "kernel larger than padded input"))?;
        let y = kernels::conv2d_forward(tx.data(), tw.data(), n, ci, co, &g);
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::new(vec![n, co, g.out_h, g.out_w], y)?,
            Op::Conv2d { x, w, g },
            rg,
        ))
    }

    /// Transposed convolution of `x [n, ci, h, w]` with `w [ci, co, k, k]`;
    /// output side is `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (n, ci, h, wd) = tx.dims4("conv_transpose2d")?;
        let (ci2, co, k, k2) = tw.dims4("conv_transpose2d")?;
        if ci != ci2 || k != k2 {
            return Err(mismatch("conv_transpose2d", &[ci, co, k, k], tw.shape()));
        }
        if stride == 0 || (h - 1) * stride + k < 2 * pad + 1 {
            return Err(invalid("conv_transpose2d", "empty output"));
        }
        let (oh, ow) = (
            (h - 1) * stride + k - 2 * pad,
            (wd - 1) * stride + k - 2 * pad,
        );
        let g = ConvGeom::conv(oh, ow, k, stride, pad)
            .ok_or_else(|| invalid("conv_transpose2d", "bad geometry"))?;
        debug_assert_eq!((g.out_h, g.out_w), (h, wd));
        let y = kernels::conv_transpose2d_forward(tx.data(), tw.data(), n, ci, co, &g);
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::new(vec![n, co, oh, ow], y)?,
            Op::ConvTranspose2d { x, w, g },
            rg,
        ))
    }

    /// Non-overlapping `k × k` mean pool; spatial sides must divide by `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (n, c, h, w) = t.dims4("avg_pool")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(invalid("avg_pool", format!("{h}x{w} not divisible by {k}")));
        }
        let y = kernels::avg_pool(t.data(), n * c, h, w, k);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, c, h / k, w / k], y)?,
            Op::AvgPool { x, k },
            rg,
        ))
    }

    /// Bilinear resize of the two trailing axes, align-corners off.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (n, c, h, w) = t.dims4("resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(invalid("resize", "empty output"));
        }
        let y = kernels::resize_bilinear(t.data(), n * c, h, w, out_h, out_w);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, c, out_h, out_w], y)?,
            Op::Resize { x },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "nothing to concatenate"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", "axis out of range"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(d, &v)| d != axis && v != base[d])
            {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let shape = t.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid(
                "narrow",
                format!(
                    "[{start}, {}) outside axis {axis} of {shape:?}",
                    start + len
                ),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let row = shape[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = o * row + start * inner;
            out.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Sums `x` down to `shape`, which must broadcast to `x`'s shape.
    pub fn sum_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let bc = Broadcast::new(t.shape(), shape)
            .filter(|b| b.out_shape == t.shape())
            .ok_or_else(|| mismatch("sum_to", t.shape(), shape))?;
        let mut out = vec![T::zero(); numel(shape)];
        let d = t.data();
        bc.for_each(|o, _, ib| out[ib] += d[o]);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::SumTo(x), rg))
    }

    /// Euclidean norm of each sample along the leading axis: `[n, ...] -> [n]`.
    pub fn sample_norm(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() == 0 || t.shape()[0] == 0 {
            return Err(invalid("sample_norm", "empty batch"));
        }
        let n = t.shape()[0];
        let y: Vec<T> = (0..n)
            .map(|i| t.sample(i).iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n], y)?, Op::SampleNorm(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let m = t.sum() / T::from_usize(t.numel()).unwrap();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(shape));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every parameter leaf that received one, in id order.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduces an upstream gradient of broadcast shape `out` back onto `target`.
    fn reduce_to(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
        if g.shape() == target {
            return g.clone();
        }
        let bc = Broadcast::new(g.shape(), target).expect("shapes broadcast during forward");
        let mut out = vec![T::zero(); numel(target)];
        let d = g.data();
        bc.for_each(|o, _, ib| out[ib] += d[o]);
        Tensor::new(target.to_vec(), out).expect("reduced length matches")
    }

    fn zeros_like(&self, v: Var) -> Tensor<T> {
        Tensor::zeros(self.shape(v))
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.wants(*a) {
                    Self::accumulate(grads, *a, Self::reduce_to(g, self.shape(*a)));
                }
                if self.wants(*b) {
                    let mut gb = Self::reduce_to(g, self.shape(*b));
                    if neg {
                        gb.scale_assign(-T::one());
                    }
                    Self::accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (wa, wb) = (self.wants(*a), self.wants(*b));
                let mut ga = if wa { Some(self.zeros_like(*a)) } else { None };
                let mut gb = if wb { Some(self.zeros_like(*b)) } else { None };
                let gd = g.data();
                let (da, db) = (ta.data(), tb.data());
                if ta.shape() == tb.shape() {
                    if let Some(ga) = ga.as_mut() {
                        for ((o, &gv), &bv) in ga.data_mut().iter_mut().zip(gd).zip(db) {
                            *o = gv * bv;
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        for ((o, &gv), &av) in gb.data_mut().iter_mut().zip(gd).zip(da) {
                            *o = gv * av;
                        }
                    }
                } else {
                    let bc = Broadcast::new(ta.shape(), tb.shape()).expect("validated in forward");
                    match (ga.as_mut(), gb.as_mut()) {
                        (Some(ga), Some(gb)) => {
                            let (pa, pb) = (ga.data_mut(), gb.data_mut());
                            bc.for_each(|o, ia, ib| {
                                pa[ia] += gd[o] * db[ib];
                                pb[ib] += gd[o] * da[ia];
                            });
                        }
                        (Some(ga), None) => {
                            let pa = ga.data_mut();
                            bc.for_each(|o, ia, ib| pa[ia] += gd[o] * db[ib]);
                        }
                        (None, Some(gb)) => {
                            let pb = gb.data_mut();
                            bc.for_each(|o, ia, ib| pb[ib] += gd[o] * da[ia]);
                        }
                        (None, None) => {}
                    }
                }
                if let Some(ga) = ga {
                    Self::accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    Self::accumulate(grads, *b, gb);
                }
            }
            Op::Unary(a, u) => {
                let x = self.value(*a);
                let y = &node.value;
                let two = T::one() + T::one();
                let half = T::one() / two;
                let gd = g.data();
                let data: Vec<T> = match *u {
                    Unary::Tanh => gd
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &y)| g * (T::one() - y * y))
                        .collect(),
                    Unary::Sigmoid => gd
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect(),
                    Unary::Square => gd
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &x)| g * two * x)
                        .collect(),
                    Unary::Sqrt => gd
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &y)| {
                            if y > T::zero() {
                                g * half / y
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                    Unary::Rsqrt(_) => gd
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &y)| -g * half * y * y * y)
                        .collect(),
                    Unary::Neg => gd.iter().map(|&g| -g).collect(),
                    Unary::Scale(c) => gd.iter().map(|&g| g * c).collect(),
                    Unary::Shift(_) => gd.to_vec(),
                };
                Self::accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Reshape(a) => {
                Self::accumulate(grads, *a, g.clone().reshape(self.shape(*a))?);
            }
            Op::Linear(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, inp) = (tx.shape()[0], tx.shape()[1]);
                let out = tw.shape()[0];
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); n * inp];
                    gemm(
                        false,
                        false,
                        n,
                        out,
                        inp,
                        g.data(),
                        tw.data(),
                        T::zero(),
                        &mut gx,
                    );
                    Self::accumulate(grads, *x, Tensor::new(vec![n, inp], gx)?);
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); out * inp];
                    gemm(
                        true,
                        false,
                        out,
                        n,
                        inp,
                        g.data(),
                        tx.data(),
                        T::zero(),
                        &mut gw,
                    );
                    Self::accumulate(grads, *w, Tensor::new(vec![out, inp], gw)?);
                }
            }
            Op::Conv2d { x, w, g: geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, ci, _, _) = tx.dims4("conv2d")?;
                let co = tw.shape()[0];
                let mut gx = self.wants(*x).then(|| self.zeros_like(*x));
                let mut gw = self.wants(*w).then(|| self.zeros_like(*w));
                kernels::conv2d_backward(
                    tx.data(),
                    tw.data(),
                    g.data(),
                    n,
                    ci,
                    co,
                    geom,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                );
                if let Some(gx) = gx {
                    Self::accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    Self::accumulate(grads, *w, gw);
                }
            }
            Op::ConvTranspose2d { x, w, g: geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, ci, _, _) = tx.dims4("conv_transpose2d")?;
                let co = tw.shape()[1];
                let mut gx = self.wants(*x).then(|| self.zeros_like(*x));
                let mut gw = self.wants(*w).then(|| self.zeros_like(*w));
                kernels::conv_transpose2d_backward(
                    tx.data(),
                    tw.data(),
                    g.data(),
                    n,
                    ci,
                    co,
                    geom,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                );
                if let Some(gx) = gx {
                    Self::accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    Self::accumulate(grads, *w, gw);
                }
            }
            Op::AvgPool { x, k } => {
                let (n, c, h, w) = self.value(*x).dims4("avg_pool")?;
                let mut gx = self.zeros_like(*x);
                kernels::avg_pool_backward(g.data(), n * c, h, w, *k, gx.data_mut());
                Self::accumulate(grads, *x, gx);
            }
            Op::Resize { x } => {
                let (n, c, h, w) = self.value(*x).dims4("resize")?;
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let mut gx = self.zeros_like(*x);
                kernels::resize_bilinear_backward(g.data(), n * c, h, w, oh, ow, gx.data_mut());
                Self::accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gp.extend_from_slice(
                                &g.data()[o * row + offset..o * row + offset + len],
                            );
                        }
                        Self::accumulate(grads, *p, Tensor::new(self.shape(*p).to_vec(), gp)?);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let sx = self.shape(*x);
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let row = sx[*axis] * inner;
                let len = node.value.shape()[*axis] * inner;
                let mut gx = vec![T::zero(); numel(sx)];
                for o in 0..outer {
                    let from = o * row + start * inner;
                    gx[from..from + len].copy_from_slice(&g.data()[o * len..(o + 1) * len]);
                }
                Self::accumulate(grads, *x, Tensor::new(sx.to_vec(), gx)?);
            }
            Op::SumTo(a) => {
                let sa = self.shape(*a);
                let bc = Broadcast::new(sa, g.shape()).expect("validated in forward");
                let mut ga = vec![T::zero(); numel(sa)];
                let gd = g.data();
                bc.for_each(|o, _, ib| ga[o] = gd[ib]);
                Self::accumulate(grads, *a, Tensor::new(sa.to_vec(), ga)?);
            }
            Op::SampleNorm(a) => {
                let x = self.value(*a);
                let n = x.shape()[0];
                let per = x.numel() / n;
                let mut ga = vec![T::zero(); x.numel()];
                for s in 0..n {
                    let norm = node.value.data()[s];
                    if norm > T::zero() {
                        let c = g.data()[s] / norm;
                        for (o, &v) in ga[s * per..(s + 1) * per].iter_mut().zip(x.sample(s)) {
                            *o = c * v;
                        }
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(x.shape().to_vec(), ga)?);
            }
            Op::Mean(a) => {
                let sa = self.shape(*a);
                let c = g.data()[0] / T::from_usize(numel(sa)).unwrap();
                Self::accumulate(grads, *a, Tensor::full(sa, c));
            }
            Op::Sum(a) => {
                Self::accumulate(grads, *a, Tensor::full(self.shape(*a), g.data()[0]));
            }
        }
        Ok(())
    }
}
