//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Values are computed
//! eagerly; [`Graph::backward`] walks the tape in reverse. Parameters are read
//! from a borrowed [`ParamStore`] and their gradients come back keyed by
//! [`ParamId`].

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::kernels::{self, ConvGeom, PadMode, Sample};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{split_axis, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Unary<T> {
    Relu,
    LeakyRelu(T),
    Tanh,
    Sigmoid,
    Exp,
    Abs,
    Square,
    Sqrt,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Unary(Var, Unary<T>),
    Map(Var, fn(T) -> T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddRow(Var, Var),
    AddChannel(Var, Var),
    MeanRows(Var),
    SubRow(Var, Var),
    SoftmaxRows(Var),
    MaxRows(Var, Vec<usize>),
    RowNormalize(Var, Vec<T>),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    InstanceNorm(Var, Vec<T>),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AvgPool(Var, usize),
    Resize(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    ToTokens(Var),
    FromTokens(Var),
    Warp(Var, Rc<Vec<Sample<T>>>),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    frozen_groups: HashSet<String>,
    nodes: RefCell<Vec<Node<T>>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
}

/// Gradients of a scalar with respect to parameters and differentiable leaves.
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn global_norm(&self) -> T {
        self.params
            .values()
            .map(|t| t.data().iter().map(|&v| v * v).sum::<T>())
            .sum::<T>()
            .sqrt()
    }
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            params: None,
            frozen_groups: HashSet::new(),
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Graph { params: Some(params), ..Self::new() }
    }

    /// Parameters in these groups enter the graph as constants.
    pub fn freeze_groups<S: AsRef<str>>(mut self, groups: &[S]) -> Self {
        self.frozen_groups.extend(groups.iter().map(|g| g.as_ref().to_string()));
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Input that gradients are not tracked for.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(nodes.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let entry = store.entry(id);
        let trainable = !self.frozen_groups.contains(&entry.group);
        let v = self.push(entry.tensor.clone(), Op::Param(id), trainable);
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    // ---- elementwise -------------------------------------------------

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> (Rc<Tensor<T>>, Rc<Tensor<T>>) {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{what}: shape mismatch");
        (va, vb)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.binary_same_shape(a, b, "add");
        let out = va.zip_map(&vb, |x, y| x + y);
        self.push(out, Op::Add(a, b), self.needs(a) || self.needs(b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.binary_same_shape(a, b, "sub");
        let out = va.zip_map(&vb, |x, y| x - y);
        self.push(out, Op::Sub(a, b), self.needs(a) || self.needs(b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.binary_same_shape(a, b, "mul");
        let out = va.zip_map(&vb, |x, y| x * y);
        self.push(out, Op::Mul(a, b), self.needs(a) || self.needs(b))
    }

    /// Sums any number of equally shaped vars.
    pub fn add_n(&self, xs: &[Var]) -> Var {
        let mut it = xs.iter();
        let first = *it.next().expect("add_n of nothing");
        it.fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), self.needs(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), self.needs(a))
    }

    /// `x * s` for a one-element var `s`.
    pub fn scale_by(&self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        self.push(out, Op::ScaleBy(x, s), self.needs(x) || self.needs(s))
    }

    pub fn unary(&self, x: Var, kind: Unary<T>) -> Var {
        let f = |v: T| -> T {
            match kind {
                Unary::Relu => v.max(T::zero()),
                Unary::LeakyRelu(s) => {
                    if v > T::zero() {
                        v
                    } else {
                        v * s
                    }
                }
                Unary::Tanh => v.tanh(),
                Unary::Sigmoid => T::one() / (T::one() + (-v).exp()),
                Unary::Exp => v.exp(),
                Unary::Abs => v.abs(),
                Unary::Square => v * v,
                Unary::Sqrt => v.sqrt(),
            }
        };
        let out = self.value(x).map(f);
        self.push(out, Op::Unary(x, kind), self.needs(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(T::of(slope)))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Elementwise `f` with derivative `df` (evaluated at the input).
    pub fn map(&self, x: Var, f: fn(T) -> T, df: fn(T) -> T) -> Var {
        let out = self.value(x).map(f);
        self.push(out, Op::Map(x, df), self.needs(x))
    }

    // ---- reductions and shape ----------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), self.needs(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), self.needs(x))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let out = (*self.value(x)).clone().reshape(shape).expect("reshape");
        self.push(out, Op::Reshape(x), self.needs(x))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let base = vals[0].shape().to_vec();
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            assert_eq!(s.len(), base.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&base).enumerate() {
                assert!(d == axis || a == b, "concat: {:?} vs {:?} on axis {axis}", s, base);
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &vals {
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Concat(xs.to_vec(), axis), needs)
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        assert!(start + len <= n, "slice {start}+{len} beyond axis length {n}");
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Slice { x, axis, start }, self.needs(x))
    }

    /// `[B,C,H,W]` → `[B·H·W, C]`.
    pub fn to_tokens(&self, x: Var) -> Var {
        let v = self.value(x);
        let [b, c, h, w] = dims4(v.shape());
        let hw = h * w;
        let mut out = vec![T::zero(); v.numel()];
        let src = v.data();
        for bi in 0..b {
            for ci in 0..c {
                let plane = &src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for (p, &val) in plane.iter().enumerate() {
                    out[(bi * hw + p) * c + ci] = val;
                }
            }
        }
        self.push(Tensor::from_vec(&[b * hw, c], out).unwrap(), Op::ToTokens(x), self.needs(x))
    }

    /// `[B·H·W, C]` → `[B,C,H,W]`.
    pub fn from_tokens(&self, x: Var, b: usize, h: usize, w: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.rank(), 2, "from_tokens expects a matrix");
        let (rows, c) = (v.dim(0), v.dim(1));
        assert_eq!(rows, b * h * w, "from_tokens: {rows} rows for layout {b}x{h}x{w}");
        let hw = h * w;
        let mut out = vec![T::zero(); v.numel()];
        let src = v.data();
        for bi in 0..b {
            for p in 0..hw {
                let row = &src[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                for (ci, &val) in row.iter().enumerate() {
                    out[(bi * c + ci) * hw + p] = val;
                }
            }
        }
        self.push(Tensor::from_vec(&[b, c, h, w], out).unwrap(), Op::FromTokens(x), self.needs(x))
    }

    // ---- matrix ops --------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, true)
    }

    pub fn matmul_t(&self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.rank() == 2 && vb.rank() == 2, "matmul expects matrices");
        let ma = mat(&va, ta);
        let mb = mat(&vb, tb);
        let m = if ta { va.dim(1) } else { va.dim(0) };
        let n = if tb { vb.dim(0) } else { vb.dim(1) };
        let mut out = vec![T::zero(); m * n];
        gemm(ma, mb, T::zero(), &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&[m, n], out).unwrap(), Op::MatMul { a, b, ta, tb }, needs)
    }

    /// `x [R,C] + b [C]` broadcast over rows.
    pub fn add_row(&self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = vx.dim(1);
        assert_eq!(vb.numel(), c, "add_row: bias length");
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(x, b), self.needs(x) || self.needs(b))
    }

    /// `x [B,C,H,W] + b [C]`.
    pub fn add_channel(&self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let [_, c, h, w] = dims4(vx.shape());
        assert_eq!(vb.numel(), c, "add_channel: bias length");
        let mut out = (*vx).clone();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let bv = vb.data()[i % c];
            plane.iter_mut().for_each(|o| *o += bv);
        }
        self.push(out, Op::AddChannel(x, b), self.needs(x) || self.needs(b))
    }

    /// Column means `[R,C]` → `[1,C]`.
    pub fn mean_rows(&self, x: Var) -> Var {
        let v = self.value(x);
        let (r, c) = (v.dim(0), v.dim(1));
        let mut out = vec![T::zero(); c];
        for row in v.data().chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = T::one() / T::of(r as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Tensor::from_vec(&[1, c], out).unwrap(), Op::MeanRows(x), self.needs(x))
    }

    /// `x [R,C] - m [1,C]`.
    pub fn sub_row(&self, x: Var, m: Var) -> Var {
        let (vx, vm) = (self.value(x), self.value(m));
        let c = vx.dim(1);
        assert_eq!(vm.numel(), c, "sub_row: row length");
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &mv) in row.iter_mut().zip(vm.data()) {
                *o -= mv;
            }
        }
        self.push(out, Op::SubRow(x, m), self.needs(x) || self.needs(m))
    }

    pub fn softmax_rows(&self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.dim(v.rank() - 1);
        let mut out = (*v).clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(x), self.needs(x))
    }

    /// Row maxima `[R,C]` → `[R,1]`.
    pub fn max_rows(&self, x: Var) -> Var {
        let v = self.value(x);
        let (r, c) = (v.dim(0), v.dim(1));
        let mut arg = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r);
        for row in v.data().chunks(c) {
            let (mut bi, mut bv) = (0, row[0]);
            for (i, &x) in row.iter().enumerate().skip(1) {
                if x > bv {
                    bi = i;
                    bv = x;
                }
            }
            arg.push(bi);
            out.push(bv);
        }
        self.push(Tensor::from_vec(&[r, 1], out).unwrap(), Op::MaxRows(x, arg), self.needs(x))
    }

    /// Scales each row to unit L2 norm; rows with zero norm become zero.
    pub fn row_normalize(&self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.dim(1);
        let tiny = T::min_positive_value().sqrt();
        let mut out = (*v).clone();
        let mut norms = Vec::with_capacity(v.dim(0));
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|&a| a * a).sum::<T>().sqrt();
            if n > tiny {
                let inv = T::one() / n;
                row.iter_mut().for_each(|a| *a *= inv);
                norms.push(n);
            } else {
                row.iter_mut().for_each(|a| *a = T::zero());
                norms.push(T::zero());
            }
        }
        self.push(out, Op::RowNormalize(x, norms), self.needs(x))
    }

    /// Row-wise layer norm of `[R,C]` with affine `gamma`, `beta` of length C.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = vx.dim(vx.rank() - 1);
        assert!(vg.numel() == c && vb.numel() == c, "layer_norm affine length");
        let eps = T::of(eps);
        let inv_c = T::one() / T::of(c as f64);
        let mut xhat = vx.data().to_vec();
        let mut rstd = Vec::with_capacity(vx.numel() / c);
        let mut out = vec![T::zero(); vx.numel()];
        for (row, orow) in xhat.chunks_mut(c).zip(out.chunks_mut(c)) {
            let mu = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&a| (a - mu) * (a - mu)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            for ((a, o), (&g, &b)) in row.iter_mut().zip(orow.iter_mut()).zip(vg.data().iter().zip(vb.data())) {
                *a = (*a - mu) * rs;
                *o = *a * g + b;
            }
            rstd.push(rs);
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::from_vec(vx.shape(), out).unwrap(),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            needs,
        )
    }

    /// Per-image, per-channel normalization of `[B,C,H,W]` (no affine).
    pub fn instance_norm(&self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let [_, _, h, w] = dims4(v.shape());
        let hw = h * w;
        let eps = T::of(eps);
        let inv = T::one() / T::of(hw as f64);
        let mut out = (*v).clone();
        let mut rstd = Vec::new();
        for plane in out.data_mut().chunks_mut(hw) {
            let mu = plane.iter().copied().sum::<T>() * inv;
            let var = plane.iter().map(|&a| (a - mu) * (a - mu)).sum::<T>() * inv;
            let rs = T::one() / (var + eps).sqrt();
            plane.iter_mut().for_each(|a| *a = (*a - mu) * rs);
            rstd.push(rs);
        }
        self.push(out, Op::InstanceNorm(x, rstd), self.needs(x))
    }

    // ---- spatial ops -------------------------------------------------

    /// 2-D convolution of `x [B,C,H,W]` with `w [O,C,k,k]` and optional bias `[O]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, mode: PadMode) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let [bsz, c, h, wd] = dims4(vx.shape());
        let [o, wc, k, k2] = dims4(vw.shape());
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(c, wc, "conv2d: input has {c} channels, kernel expects {wc}");
        let geom = ConvGeom { channels: c, height: h, width: wd, kernel: k, stride, pad, mode };
        let (oh, ow) = geom.out_hw();
        let npos = oh * ow;
        let rows = geom.col_rows();
        let mut out = vec![T::zero(); bsz * o * npos];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * npos] };
        for bi in 0..bsz {
            let xi = &vx.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
            let colm: &[T] = if geom.is_pointwise() {
                xi
            } else {
                kernels::im2col(xi, &geom, &mut cols);
                &cols
            };
            gemm(
                MatRef::new(vw.data(), o, rows),
                MatRef::new(colm, rows, npos),
                T::zero(),
                &mut out[bi * o * npos..(bi + 1) * o * npos],
            );
        }
        if let Some(b) = b {
            let vb = self.value(b);
            assert_eq!(vb.numel(), o, "conv2d bias length");
            for (i, plane) in out.chunks_mut(npos).enumerate() {
                let bv = vb.data()[i % o];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            Tensor::from_vec(&[bsz, o, oh, ow], out).unwrap(),
            Op::Conv2d { x, w, b, geom },
            needs,
        )
    }

    /// Non-overlapping `k×k` average pooling; H and W must be multiples of k.
    pub fn avg_pool(&self, x: Var, k: usize) -> Var {
        let v = self.value(x);
        let [b, c, h, w] = dims4(v.shape());
        assert!(h % k == 0 && w % k == 0, "avg_pool: {h}x{w} not divisible by {k}");
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / T::of((k * k) as f64);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for (p, (src, dst)) in v.data().chunks(h * w).zip(out.chunks_mut(oh * ow)).enumerate() {
            let _ = p;
            for y in 0..h {
                for x in 0..w {
                    dst[(y / k) * ow + x / k] += src[y * w + x] * inv;
                }
            }
        }
        self.push(Tensor::from_vec(&[b, c, oh, ow], out).unwrap(), Op::AvgPool(x, k), self.needs(x))
    }

    /// Bilinear resize of `[B,C,H,W]` to `[B,C,oh,ow]`.
    pub fn resize(&self, x: Var, oh: usize, ow: usize) -> Var {
        let v = self.value(x);
        let [b, c, h, w] = dims4(v.shape());
        if (h, w) == (oh, ow) {
            return x;
        }
        let mut out = vec![T::zero(); b * c * oh * ow];
        kernels::resize_bilinear(v.data(), b * c, (h, w), (oh, ow), &mut out);
        self.push(Tensor::from_vec(&[b, c, oh, ow], out).unwrap(), Op::Resize(x), self.needs(x))
    }

    /// Resamples every plane of `x [C,H,W]` (or `[B,C,H,W]` with B=1) at
    /// per-pixel source positions.
    pub fn warp(&self, x: Var, samples: Rc<Vec<Sample<T>>>) -> Var {
        let v = self.value(x);
        let s = v.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        assert_eq!(samples.len(), h * w, "warp: sample grid does not match image");
        let planes = v.numel() / (h * w);
        let mut out = vec![T::zero(); v.numel()];
        kernels::sample_planes(v.data(), planes, h, w, &samples, &mut out);
        self.push(Tensor::from_vec(s, out).unwrap(), Op::Warp(x, samples), self.needs(x))
    }

    // ---- backward ----------------------------------------------------

    /// Gradients of the one-element `loss` with respect to every trainable
    /// parameter and every [`Graph::variable`] leaf it depends on.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        let mut out = Gradients { params: HashMap::new(), leaves: HashMap::new() };

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, g: Tensor<T>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            let val = |v: Var| nodes[v.0].value.clone();
            let wants = |v: Var| nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), gy);
                }
                Op::Param(id) => {
                    out.params.insert(*id, gy);
                }
                Op::Add(a, b) => {
                    acc(*b, gy.clone());
                    acc(*a, gy);
                }
                Op::Sub(a, b) => {
                    acc(*b, gy.map(|v| -v));
                    acc(*a, gy);
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(*a, gy.zip_map(&val(*b), |g, y| g * y));
                    }
                    if wants(*b) {
                        acc(*b, gy.zip_map(&val(*a), |g, x| g * x));
                    }
                }
                Op::Scale(a, s) => acc(*a, gy.map(|v| v * *s)),
                Op::AddScalar(a) => acc(*a, gy),
                Op::ScaleBy(x, s) => {
                    let sv = val(*s).item();
                    if wants(*s) {
                        let d: T = gy.data().iter().zip(val(*x).data()).map(|(&g, &x)| g * x).sum();
                        acc(*s, Tensor::from_vec(val(*s).shape(), vec![d]).unwrap());
                    }
                    acc(*x, gy.map(|g| g * sv));
                }
                Op::Unary(x, kind) => {
                    let xv = val(*x);
                    let yv = &node.value;
                    let data: Vec<T> = gy
                        .data()
                        .iter()
                        .zip(xv.data().iter().zip(yv.data()))
                        .map(|(&g, (&xi, &yi))| g * unary_grad(*kind, xi, yi))
                        .collect();
                    acc(*x, Tensor::from_vec(xv.shape(), data).unwrap());
                }
                Op::Map(x, df) => {
                    let xv = val(*x);
                    acc(*x, gy.zip_map(&xv, |g, xi| g * df(xi)));
                }
                Op::Sum(x) => {
                    let g = gy.item();
                    acc(*x, Tensor::full(val(*x).shape(), g));
                }
                Op::Mean(x) => {
                    let xv = val(*x);
                    let g = gy.item() / T::of(xv.numel() as f64);
                    acc(*x, Tensor::full(xv.shape(), g));
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    acc(*x, gy.reshape(&shape).unwrap());
                }
                Op::Concat(xs, axis) => {
                    let shape = node.value.shape();
                    let (outer, _, inner) = split_axis(shape, *axis);
                    let total = shape[*axis] * inner;
                    let mut offset = 0;
                    for &x in xs {
                        let xs_shape = val(x).shape().to_vec();
                        let block = xs_shape[*axis] * inner;
                        if wants(x) {
                            let mut d = Vec::with_capacity(outer * block);
                            for o in 0..outer {
                                let base = o * total + offset;
                                d.extend_from_slice(&gy.data()[base..base + block]);
                            }
                            acc(x, Tensor::from_vec(&xs_shape, d).unwrap());
                        }
                        offset += block;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let xv = val(*x);
                    let (outer, n, inner) = split_axis(xv.shape(), *axis);
                    let len = node.value.shape()[*axis];
                    let mut d = vec![T::zero(); xv.numel()];
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        d[dst..dst + len * inner].copy_from_slice(&gy.data()[src..src + len * inner]);
                    }
                    acc(*x, Tensor::from_vec(xv.shape(), d).unwrap());
                }
                Op::ToTokens(x) => {
                    let s = val(*x).shape().to_vec();
                    let [b, _, h, w] = dims4(&s);
                    acc(*x, tokens_to_nchw(&gy, b, h, w));
                }
                Op::FromTokens(x) => {
                    acc(*x, nchw_to_tokens(&gy));
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (val(*a), val(*b));
                    let opa = mat(&va, *ta);
                    let opb = mat(&vb, *tb);
                    let dc = MatRef::new(gy.data(), gy.dim(0), gy.dim(1));
                    if wants(*a) {
                        let mut d = vec![T::zero(); va.numel()];
                        if *ta {
                            gemm(opb, dc.t(), T::zero(), &mut d);
                        } else {
                            gemm(dc, opb.t(), T::zero(), &mut d);
                        }
                        acc(*a, Tensor::from_vec(va.shape(), d).unwrap());
                    }
                    if wants(*b) {
                        let mut d = vec![T::zero(); vb.numel()];
                        if *tb {
                            gemm(dc.t(), opa, T::zero(), &mut d);
                        } else {
                            gemm(opa.t(), dc, T::zero(), &mut d);
                        }
                        acc(*b, Tensor::from_vec(vb.shape(), d).unwrap());
                    }
                }
                Op::AddRow(x, b) => {
                    if wants(*b) {
                        let vb = val(*b);
                        let c = vb.numel();
                        let mut d = vec![T::zero(); c];
                        for row in gy.data().chunks(c) {
                            for (o, &g) in d.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                        acc(*b, Tensor::from_vec(vb.shape(), d).unwrap());
                    }
                    acc(*x, gy);
                }
                Op::AddChannel(x, b) => {
                    if wants(*b) {
                        let vb = val(*b);
                        let c = vb.numel();
                        let [_, _, h, w] = dims4(gy.shape());
                        let mut d = vec![T::zero(); c];
                        for (i, plane) in gy.data().chunks(h * w).enumerate() {
                            d[i % c] += plane.iter().copied().sum::<T>();
                        }
                        acc(*b, Tensor::from_vec(vb.shape(), d).unwrap());
                    }
                    acc(*x, gy);
                }
                Op::MeanRows(x) => {
                    let xv = val(*x);
                    let (r, c) = (xv.dim(0), xv.dim(1));
                    let inv = T::one() / T::of(r as f64);
                    let row: Vec<T> = gy.data().iter().map(|&g| g * inv).collect();
                    let d: Vec<T> = (0..r).flat_map(|_| row.iter().copied()).collect();
                    acc(*x, Tensor::from_vec(&[r, c], d).unwrap());
                }
                Op::SubRow(x, m) => {
                    if wants(*m) {
                        let vm = val(*m);
                        let c = vm.numel();
                        let mut d = vec![T::zero(); c];
                        for row in gy.data().chunks(c) {
                            for (o, &g) in d.iter_mut().zip(row) {
                                *o -= g;
                            }
                        }
                        acc(*m, Tensor::from_vec(vm.shape(), d).unwrap());
                    }
                    acc(*x, gy);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let c = y.dim(y.rank() - 1);
                    let mut d = gy.data().to_vec();
                    for (drow, yrow) in d.chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: T = drow.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
                        for (g, &p) in drow.iter_mut().zip(yrow) {
                            *g = p * (*g - dot);
                        }
                    }
                    acc(*x, Tensor::from_vec(y.shape(), d).unwrap());
                }
                Op::MaxRows(x, arg) => {
                    let xv = val(*x);
                    let c = xv.dim(1);
                    let mut d = vec![T::zero(); xv.numel()];
                    for (r, &j) in arg.iter().enumerate() {
                        d[r * c + j] = gy.data()[r];
                    }
                    acc(*x, Tensor::from_vec(xv.shape(), d).unwrap());
                }
                Op::RowNormalize(x, norms) => {
                    let y = &node.value;
                    let c = y.dim(1);
                    let mut d = gy.data().to_vec();
                    for ((drow, yrow), &n) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(norms) {
                        if n == T::zero() {
                            drow.iter_mut().for_each(|g| *g = T::zero());
                            continue;
                        }
                        let dot: T = drow.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
                        let inv = T::one() / n;
                        for (g, &p) in drow.iter_mut().zip(yrow) {
                            *g = (*g - p * dot) * inv;
                        }
                    }
                    acc(*x, Tensor::from_vec(y.shape(), d).unwrap());
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let vg = val(*gamma);
                    let c = vg.numel();
                    if wants(*gamma) || wants(*beta) {
                        let mut dg = vec![T::zero(); c];
                        let mut db = vec![T::zero(); c];
                        for (grow, xrow) in gy.data().chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                dg[j] += grow[j] * xrow[j];
                                db[j] += grow[j];
                            }
                        }
                        acc(*gamma, Tensor::from_vec(vg.shape(), dg).unwrap());
                        acc(*beta, Tensor::from_vec(vg.shape(), db).unwrap());
                    }
                    if wants(*x) {
                        let inv_c = T::one() / T::of(c as f64);
                        let mut d = vec![T::zero(); gy.numel()];
                        for (r, ((drow, grow), xrow)) in
                            d.chunks_mut(c).zip(gy.data().chunks(c)).zip(xhat.chunks(c)).enumerate()
                        {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..c {
                                let dxh = grow[j] * vg.data()[j];
                                m1 += dxh;
                                m2 += dxh * xrow[j];
                            }
                            m1 *= inv_c;
                            m2 *= inv_c;
                            for j in 0..c {
                                let dxh = grow[j] * vg.data()[j];
                                drow[j] = rstd[r] * (dxh - m1 - xrow[j] * m2);
                            }
                        }
                        acc(*x, Tensor::from_vec(gy.shape(), d).unwrap());
                    }
                }
                Op::InstanceNorm(x, rstd) => {
                    let y = &node.value;
                    let [_, _, h, w] = dims4(y.shape());
                    let hw = h * w;
                    let inv = T::one() / T::of(hw as f64);
                    let mut d = gy.data().to_vec();
                    for ((drow, yrow), &rs) in d.chunks_mut(hw).zip(y.data().chunks(hw)).zip(rstd) {
                        let m1 = drow.iter().copied().sum::<T>() * inv;
                        let m2 = drow.iter().zip(yrow).map(|(&g, &p)| g * p).sum::<T>() * inv;
                        for (g, &p) in drow.iter_mut().zip(yrow) {
                            *g = rs * (*g - m1 - p * m2);
                        }
                    }
                    acc(*x, Tensor::from_vec(y.shape(), d).unwrap());
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let bsz = vx.dim(0);
                    let o = vw.dim(0);
                    let (oh, ow) = geom.out_hw();
                    let npos = oh * ow;
                    let rows = geom.col_rows();
                    let img = geom.channels * geom.height * geom.width;
                    if let Some(b) = b {
                        if wants(*b) {
                            let mut db = vec![T::zero(); o];
                            for (i, plane) in gy.data().chunks(npos).enumerate() {
                                db[i % o] += plane.iter().copied().sum::<T>();
                            }
                            acc(*b, Tensor::from_vec(&[o], db).unwrap());
                        }
                    }
                    let want_w = wants(*w);
                    let want_x = wants(*x);
                    let mut dw = if want_w { vec![T::zero(); vw.numel()] } else { Vec::new() };
                    let mut dx = if want_x { vec![T::zero(); vx.numel()] } else { Vec::new() };
                    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * npos] };
                    for bi in 0..bsz {
                        let dyi = MatRef::new(&gy.data()[bi * o * npos..(bi + 1) * o * npos], o, npos);
                        let xi = &vx.data()[bi * img..(bi + 1) * img];
                        if want_w {
                            let colm: &[T] = if geom.is_pointwise() {
                                xi
                            } else {
                                kernels::im2col(xi, geom, &mut cols);
                                &cols
                            };
                            gemm(dyi, MatRef::new(colm, rows, npos).t(), T::one(), &mut dw);
                        }
                        if want_x {
                            let dxi = &mut dx[bi * img..(bi + 1) * img];
                            let wt = MatRef::new(vw.data(), o, rows).t();
                            if geom.is_pointwise() {
                                gemm(wt, dyi, T::zero(), dxi);
                            } else {
                                gemm(wt, dyi, T::zero(), &mut cols);
                                kernels::col2im(&cols, geom, dxi);
                            }
                        }
                    }
                    if want_w {
                        acc(*w, Tensor::from_vec(vw.shape(), dw).unwrap());
                    }
                    if want_x {
                        acc(*x, Tensor::from_vec(vx.shape(), dx).unwrap());
                    }
                }
                Op::AvgPool(x, k) => {
                    let xv = val(*x);
                    let [_, _, h, w] = dims4(xv.shape());
                    let (oh, ow) = (h / k, w / k);
                    let inv = T::one() / T::of((k * k) as f64);
                    let mut d = vec![T::zero(); xv.numel()];
                    for (dst, src) in d.chunks_mut(h * w).zip(gy.data().chunks(oh * ow)) {
                        for y in 0..h {
                            for xx in 0..w {
                                dst[y * w + xx] = src[(y / k) * ow + xx / k] * inv;
                            }
                        }
                    }
                    acc(*x, Tensor::from_vec(xv.shape(), d).unwrap());
                }
                Op::Resize(x) => {
                    let xv = val(*x);
                    let [b, c, h, w] = dims4(xv.shape());
                    let [_, _, oh, ow] = dims4(gy.shape());
                    let mut d = vec![T::zero(); xv.numel()];
                    kernels::resize_bilinear_backward(gy.data(), b * c, (h, w), (oh, ow), &mut d);
                    acc(*x, Tensor::from_vec(xv.shape(), d).unwrap());
                }
                Op::Warp(x, samples) => {
                    let xv = val(*x);
                    let s = xv.shape();
                    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                    let mut d = vec![T::zero(); xv.numel()];
                    for (dst, src) in d.chunks_mut(h * w).zip(gy.data().chunks(h * w)) {
                        for (smp, &g) in samples.iter().zip(src) {
                            smp.scatter(dst, w, g);
                        }
                    }
                    acc(*x, Tensor::from_vec(s, d).unwrap());
                }
            }
        }
        out
    }
}

fn unary_grad<T: Scalar>(kind: Unary<T>, x: T, y: T) -> T {
    match kind {
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::LeakyRelu(s) => {
            if x > T::zero() {
                T::one()
            } else {
                s
            }
        }
        Unary::Tanh => T::one() - y * y,
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Exp => y,
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Square => x + x,
        Unary::Sqrt => {
            if y > T::zero() {
                T::of(0.5) / y
            } else {
                T::zero()
            }
        }
    }
}

fn mat<T: Scalar>(t: &Tensor<T>, trans: bool) -> MatRef<'_, T> {
    let m = MatRef::new(t.data(), t.dim(0), t.dim(1));
    if trans {
        m.t()
    } else {
        m
    }
}

pub(crate) fn dims4(s: &[usize]) -> [usize; 4] {
    assert_eq!(s.len(), 4, "expected a [B,C,H,W] tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let z = T::exp_below_in_place(row, m);
    let inv = T::one() / z;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// `[B,C,H,W]` → `[B·H·W, C]` without a graph.
pub fn nchw_to_tokens<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = dims4(x.shape());
    let hw = h * w;
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..hw {
                out[(bi * hw + p) * c + ci] = x.data()[(bi * c + ci) * hw + p];
            }
        }
    }
    Tensor::from_vec(&[b * hw, c], out).unwrap()
}

/// `[B·H·W, C]` → `[B,C,H,W]` without a graph.
pub fn tokens_to_nchw<T: Scalar>(x: &Tensor<T>, b: usize, h: usize, w: usize) -> Tensor<T> {
    let c = x.dim(1);
    let hw = h * w;
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for p in 0..hw {
            for ci in 0..c {
                out[(bi * c + ci) * hw + p] = x.data()[(bi * hw + p) * c + ci];
            }
        }
    }
    Tensor::from_vec(&[b, c, h, w], out).unwrap()
}
