//! Dense row-major tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] is built fresh for every loss evaluation. Parameters are copied
//! in from a [`ParamStore`] as tracked leaves; everything else enters as a
//! constant. Elementwise binary ops only broadcast the right-hand operand over
//! a leading batch dimension.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKey, ParamStore};

/// Floating-point element type. Training runs in `f32`; gradient checks
/// instantiate the same code at `f64`.
pub trait Real:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Hyperbolic tangent used by activations, bounded to [-1, 1].
    #[inline]
    fn act_tanh(self) -> Self {
        self.tanh()
    }
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    /// Rational minimax approximation (odd degree 13 over even degree 6),
    /// within a few ulp of `tanhf` and vectorizable.
    #[inline]
    fn act_tanh(self) -> Self {
        const CLAMP: f32 = 7.905_311;
        const A: [f32; 7] = [
            4.893_524_6e-3,
            6.372_619_3e-4,
            1.485_722_4e-5,
            5.122_297e-8,
            -8.604_671_5e-11,
            2.000_187_9e-13,
            -2.760_768_5e-16,
        ];
        const B: [f32; 4] = [4.893_525e-3, 2.268_434_6e-3, 1.185_347e-4, 1.198_258_4e-6];
        let x = self.clamp(-CLAMP, CLAMP);
        let x2 = x * x;
        let mut p = A[6];
        for &a in A[..6].iter().rev() {
            p = p * x2 + a;
        }
        p *= x;
        let q = ((B[3] * x2 + B[2]) * x2 + B[1]) * x2 + B[0];
        let r = (p / q).clamp(-1.0, 1.0);
        if self.abs() < 4e-4 {
            self
        } else {
            r
        }
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); numel],
        }
    }

    pub fn scalar(x: F) -> Self {
        Self {
            shape: vec![],
            data: vec![x],
        }
    }

    /// Builds a `rows × cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| F::of(x as f64)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension; 1 for scalars.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Trailing size per leading row.
    pub fn cols(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x.as_f64() as f32).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.as_f64())).collect(),
        }
    }
}

/// Smooth nonlinearity used by every hidden layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Mish,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Mish => "mish",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "mish" => Ok(Activation::Mish),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

pub mod kernels {
    use super::{Activation, Real};

    const MR: usize = 4;
    const NR: usize = 8;

    /// `out[m×n] += a[m×k] · b[k×n]`. Every output element accumulates its
    /// `k` products in index order starting from its current value, so a batch
    /// gives the same bits as its rows evaluated one at a time.
    pub fn matmul_acc<F: Real>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
        debug_assert!(out.len() == m * n && a.len() == m * k && b.len() == k * n);
        let mut i = 0;
        while i < m {
            let mr = (m - i).min(MR);
            match mr {
                4 => tile_rows::<F, 4>(out, a, b, i, k, n),
                3 => tile_rows::<F, 3>(out, a, b, i, k, n),
                2 => tile_rows::<F, 2>(out, a, b, i, k, n),
                _ => tile_rows::<F, 1>(out, a, b, i, k, n),
            }
            i += mr;
        }
    }

    #[inline(always)]
    fn tile_rows<F: Real, const R: usize>(out: &mut [F], a: &[F], b: &[F], i: usize, k: usize, n: usize) {
        let arows: [&[F]; R] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[F::zero(); NR]; R];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for (kk, brow) in b.chunks_exact(n).take(k).enumerate() {
                let brow: &[F; NR] = brow[j..j + NR].try_into().unwrap();
                for r in 0..R {
                    let av = arows[r][kk];
                    let row = &mut acc[r];
                    for c in 0..NR {
                        row[c] += av * brow[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
            j += NR;
        }
        if j < n {
            for (r, arow) in arows.iter().enumerate() {
                for c in j..n {
                    let mut s = out[(i + r) * n + c];
                    for (kk, &av) in arow.iter().enumerate() {
                        s += av * b[kk * n + c];
                    }
                    out[(i + r) * n + c] = s;
                }
            }
        }
    }

    /// `x[m×k] · w[k×n] + bias[n]`.
    pub fn linear<F: Real>(x: &[F], w: &[F], bias: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        matmul_acc(&mut out, x, w, m, k, n);
        out
    }

    pub fn transpose<F: Real>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
        let mut t = vec![F::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    /// `dx[m×k] += dy[m×n] · wᵀ`.
    pub fn matmul_grad_lhs<F: Real>(dx: &mut [F], dy: &[F], w: &[F], m: usize, k: usize, n: usize) {
        let wt = transpose(w, k, n);
        matmul_acc(dx, dy, &wt, m, n, k);
    }

    /// `dw[k×n] += xᵀ · dy[m×n]`.
    pub fn matmul_grad_rhs<F: Real>(dw: &mut [F], x: &[F], dy: &[F], m: usize, k: usize, n: usize) {
        let xt = transpose(x, m, k);
        matmul_acc(dw, &xt, dy, k, m, n);
    }

    #[inline]
    fn softplus<F: Real>(x: F) -> F {
        if x > F::of(20.0) {
            x
        } else {
            x.exp().ln_1p()
        }
    }

    #[inline]
    pub fn act<F: Real>(kind: Activation, x: F) -> F {
        match kind {
            Activation::Tanh => x.act_tanh(),
            Activation::Mish => x * softplus(x).tanh(),
        }
    }

    /// Derivative of the activation at pre-activation `x`.
    #[inline]
    pub fn act_grad<F: Real>(kind: Activation, x: F) -> F {
        match kind {
            Activation::Tanh => {
                let t = x.act_tanh();
                F::one() - t * t
            }
            Activation::Mish => {
                let tsp = softplus(x).tanh();
                let sig = F::one() / (F::one() + (-x).exp());
                tsp + x * sig * (F::one() - tsp * tsp)
            }
        }
    }

    pub fn act_inplace<F: Real>(kind: Activation, xs: &mut [F]) {
        for x in xs {
            *x = act(kind, *x);
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<F> {
    Constant,
    Param(ParamKey),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Act(Var, Activation),
    Square(Var),
    Mean(Var),
    Sum(Var),
    Mse(Var, Var),
    ConcatCols(Vec<Var>),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Act(_, Activation::Tanh) => "tanh",
            Op::Act(_, Activation::Mish) => "mish",
            Op::Square(_) => "square",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::Mse(..) => "mse",
            Op::ConcatCols(_) => "concat",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<F = f32> {
    map: BTreeMap<ParamKey, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor<F>> {
        self.map.get(&key)
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.map.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &Tensor<F>)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Computation tape. Nodes are appended in evaluation order, so reverse index
/// order is a valid topological order for backprop.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    params: HashMap<(ParamKey, bool), Var>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    if lhs == rhs {
        return true;
    }
    if lhs.is_empty() {
        return false;
    }
    let tail = &lhs[1..];
    rhs == tail || (rhs.len() == lhs.len() && rhs[0] == 1 && &rhs[1..] == tail)
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> Result<F> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Untracked leaf. Rejects non-finite input.
    pub fn constant(&mut self, t: Tensor<F>) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite("constant input".into()));
        }
        Ok(self.push(t, Op::Constant, false))
    }

    /// Inserts a stored parameter. Trainable parameters become tracked leaves;
    /// repeated insertion of the same parameter returns the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let track = store.is_trainable(id);
        self.insert_param(store, id, track)
    }

    /// Inserts a stored parameter as a constant regardless of its trainable flag.
    pub fn frozen_param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.insert_param(store, id, false)
    }

    fn insert_param(&mut self, store: &ParamStore<F>, id: ParamId, track: bool) -> Var {
        let key = store.key(id);
        if let Some(&v) = self.params.get(&(key, track)) {
            return v;
        }
        let value = store.value(id).clone();
        let op = if track { Op::Param(key) } else { Op::Constant };
        let v = self.push(value, op, track);
        self.params.insert((key, track), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), tracked))
    }

    /// Fused `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::shape("linear", sx, sw));
        }
        if sb != [sw[1]] {
            return Err(Error::shape("linear bias", sw, sb));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let out = kernels::linear(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            m,
            k,
            n,
        );
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }, tracked))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcast_ok(ta.shape(), tb.shape()) {
            return Err(Error::shape(op.name(), ta.shape(), tb.shape()));
        }
        let width = tb.numel();
        let data: Vec<F> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % width]))
            .collect();
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(shape, data)?, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::of(c);
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * c).collect();
        let shape = t.shape().to_vec();
        let tracked = self.tracked(a);
        self.push(Tensor { shape, data }, Op::Scale(a, c), tracked)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let t = self.value(a);
        let mut data = t.data().to_vec();
        kernels::act_inplace(kind, &mut data);
        let shape = t.shape().to_vec();
        let tracked = self.tracked(a);
        self.push(Tensor { shape, data }, Op::Act(a, kind), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn mish(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Mish)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * x).collect();
        let shape = t.shape().to_vec();
        let tracked = self.tracked(a);
        self.push(Tensor { shape, data }, Op::Square(a), tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: F = t.data().iter().copied().sum();
        let m = s / F::of(t.numel() as f64);
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(m), Op::Mean(a), tracked)
    }

    /// Mean squared error. `target` is a constant: no gradient flows into it
    /// even if it is tracked.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(Error::shape("mse", tp.shape(), tt.shape()));
        }
        let s: F = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let m = s / F::of(tp.numel() as f64);
        let tracked = self.tracked(pred);
        Ok(self.push(Tensor::scalar(m), Op::Mse(pred, target), tracked))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let rows = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat", self.value(*first).shape(), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            tracked,
        ))
    }

    /// Reverse-mode sweep from a scalar loss. Returns the gradient of every
    /// tracked parameter that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        if !lt.is_finite() {
            return Err(Error::NonFinite("loss value".into()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            if gy.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", node.op.name())));
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(key) => {
                    let t = Tensor::new(node.value.shape().to_vec(), gy)?;
                    out.map.insert(*key, t);
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.tracked(*a) {
                        let g = self.grad_buf(&mut grads, *a);
                        kernels::matmul_grad_lhs(g, &gy, self.value(*b).data(), m, k, n);
                    }
                    if self.tracked(*b) {
                        let g = self.grad_buf(&mut grads, *b);
                        kernels::matmul_grad_rhs(g, self.value(*a).data(), &gy, m, k, n);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (sx, sw) = (self.value(*x).shape(), self.value(*w).shape());
                    let (m, k, n) = (sx[0], sx[1], sw[1]);
                    if self.tracked(*x) {
                        let g = self.grad_buf(&mut grads, *x);
                        kernels::matmul_grad_lhs(g, &gy, self.value(*w).data(), m, k, n);
                    }
                    if self.tracked(*w) {
                        let g = self.grad_buf(&mut grads, *w);
                        kernels::matmul_grad_rhs(g, self.value(*x).data(), &gy, m, k, n);
                    }
                    if self.tracked(*b) {
                        let g = self.grad_buf(&mut grads, *b);
                        for row in gy.chunks_exact(n) {
                            for (d, &v) in g.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -F::one()
                    } else {
                        F::one()
                    };
                    if self.tracked(*a) {
                        let g = self.grad_buf(&mut grads, *a);
                        for (d, &v) in g.iter_mut().zip(&gy) {
                            *d += v;
                        }
                    }
                    if self.tracked(*b) {
                        let width = self.value(*b).numel();
                        let g = self.grad_buf(&mut grads, *b);
                        for (i, &v) in gy.iter().enumerate() {
                            g[i % width] += sign * v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let width = tb.numel();
                    if self.tracked(*a) {
                        let bd = tb.data().to_vec();
                        let g = self.grad_buf(&mut grads, *a);
                        for (i, &v) in gy.iter().enumerate() {
                            g[i] += v * bd[i % width];
                        }
                    }
                    if self.tracked(*b) {
                        let ad = ta.data().to_vec();
                        let g = self.grad_buf(&mut grads, *b);
                        for (i, &v) in gy.iter().enumerate() {
                            g[i % width] += v * ad[i];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    let g = self.grad_buf(&mut grads, *a);
                    for (d, &v) in g.iter_mut().zip(&gy) {
                        *d += v * c;
                    }
                }
                Op::Act(a, kind) => {
                    let local: Vec<F> = match kind {
                        Activation::Tanh => node.value.data().iter().map(|&y| F::one() - y * y).collect(),
                        _ => self.value(*a).data().iter().map(|&x| kernels::act_grad(*kind, x)).collect(),
                    };
                    let g = self.grad_buf(&mut grads, *a);
                    for ((d, &v), &l) in g.iter_mut().zip(&gy).zip(&local) {
                        *d += v * l;
                    }
                }
                Op::Square(a) => {
                    let x = self.value(*a).data().to_vec();
                    let two = F::of(2.0);
                    let g = self.grad_buf(&mut grads, *a);
                    for ((d, &v), &xv) in g.iter_mut().zip(&gy).zip(&x) {
                        *d += v * two * xv;
                    }
                }
                Op::Sum(a) => {
                    let gs = gy[0];
                    let g = self.grad_buf(&mut grads, *a);
                    for d in g.iter_mut() {
                        *d += gs;
                    }
                }
                Op::Mean(a) => {
                    let n = F::of(self.value(*a).numel() as f64);
                    let gs = gy[0] / n;
                    let g = self.grad_buf(&mut grads, *a);
                    for d in g.iter_mut() {
                        *d += gs;
                    }
                }
                Op::Mse(p, t) => {
                    let (tp, tt) = (self.value(*p), self.value(*t));
                    let scale = F::of(2.0) * gy[0] / F::of(tp.numel() as f64);
                    let diff: Vec<F> = tp
                        .data()
                        .iter()
                        .zip(tt.data())
                        .map(|(&a, &b)| (a - b) * scale)
                        .collect();
                    let g = self.grad_buf(&mut grads, *p);
                    for (d, v) in g.iter_mut().zip(diff) {
                        *d += v;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).shape()[1];
                        if self.tracked(p) {
                            let g = self.grad_buf(&mut grads, p);
                            for r in 0..rows {
                                let src = &gy[r * total + offset..r * total + offset + w];
                                for (d, &v) in g[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *d += v;
                                }
                            }
                        }
                        offset += w;
                    }
                }
            }
        }
        Ok(out)
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> &'a mut Vec<F> {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_activation_tanh_tracks_std_tanh() {
        let mut worst = 0.0f64;
        for i in -200_000..=200_000 {
            let x = i as f32 * 5e-5;
            for x in [x, x * 200.0] {
                let err = (x.act_tanh() as f64 - (x as f64).tanh()).abs();
                worst = worst.max(err);
                assert!(x.act_tanh().abs() <= 1.0);
            }
        }
        assert!(worst < 5e-7, "max error {worst}");
        assert_eq!(0.0f32.act_tanh(), 0.0);
        assert_eq!((-3.0f32).act_tanh(), -(3.0f32).act_tanh());
    }

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(mat(2, 2, &[1., 2., 3., 4.])).unwrap();
        let i = g.constant(mat(2, 2, &[1., 0., 0., 1.])).unwrap();
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);

        let r = g.constant(mat(1, 2, &[1., 2.])).unwrap();
        let c = g.constant(mat(2, 1, &[3., 4.])).unwrap();
        let y = g.matmul(r, c).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1]);
        assert_eq!(g.value(y).data(), &[11.]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::new(vec![3], vec![1., 2., 3.]).unwrap()).unwrap();
        let z = g.constant(Tensor::zeros(vec![3])).unwrap();
        let y = g.add(a, z).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3.]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");

        let c = g.constant(Tensor::zeros(vec![4])).unwrap();
        assert!(matches!(g.add(a, c), Err(Error::Shape { .. })));
        assert!(matches!(g.mse(a, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn batch_broadcast_of_rhs() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(mat(2, 2, &[1., 2., 3., 4.])).unwrap();
        let b = g.constant(Tensor::new(vec![2], vec![10., 20.]).unwrap()).unwrap();
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11., 22., 13., 24.]);
        // Only the rhs broadcasts.
        assert!(g.add(b, a).is_err());
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::new(vec![2], vec![1., 2.]).unwrap(), true);
        let mut g = Graph::new();
        let pv = g.param(&store, p);
        let t = g.constant(Tensor::new(vec![2], vec![3., 4.]).unwrap()).unwrap();
        let l = g.mse(pv, t).unwrap();
        assert_eq!(g.item(l).unwrap(), 4.0);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(store.key(p)).unwrap().data(), &[-2.0, -2.0]);

        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![3], vec![0.3, -1.0, 7.5]).unwrap()).unwrap();
        let l = g.mse(x, x).unwrap();
        assert_eq!(g.item(l).unwrap(), 0.0);
    }

    #[test]
    fn mse_target_receives_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::new(vec![2], vec![1., 2.]).unwrap(), true);
        let q = store.add("q", Tensor::new(vec![2], vec![0., 5.]).unwrap(), true);
        let mut g = Graph::new();
        let (pv, qv) = (g.param(&store, p), g.param(&store, q));
        let l = g.mse(pv, qv).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(store.key(p)).is_some());
        assert!(grads.get(store.key(q)).is_none());
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::new(vec![4], vec![1., -2., 3., 0.5]).unwrap(), true);
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let l = g.mean(wv);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(store.key(w)).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn constants_and_frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::new(vec![2], vec![1., 2.]).unwrap(), true);
        let mut g = Graph::new();
        let wv = g.frozen_param(&store, w);
        let c = g.constant(Tensor::new(vec![2], vec![3., 4.]).unwrap()).unwrap();
        let y = g.mul(wv, c).unwrap();
        let l = g.sum(y);
        assert!(!g.requires_grad(l));
        assert!(g.backward(l).unwrap().is_empty());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(g.backward(a), Err(Error::NotScalar(_))));
    }

    #[test]
    fn non_finite_constant_is_rejected() {
        let mut g = Graph::<f32>::new();
        let t = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(g.constant(t), Err(Error::NonFinite(_))));
    }

    #[test]
    fn nan_gradient_names_the_op() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::new(vec![1], vec![1e30]).unwrap(), true);
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let big = g.scale(wv, 1e10); // overflows to inf
        let sq = g.square(big);
        let l = g.mean(sq);
        match g.backward(l) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("loss") || msg.contains("gradient")),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for kind in [Activation::Tanh, Activation::Mish] {
            for &x in &[-25.0f64, -3.0, -0.7, 0.0, 0.4, 2.5, 30.0] {
                let eps = 1e-6;
                let fd = (kernels::act(kind, x + eps) - kernels::act(kind, x - eps)) / (2.0 * eps);
                let an = kernels::act_grad(kind, x);
                assert!((fd - an).abs() < 1e-7, "{kind:?} at {x}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn backward_accumulates_shared_parents() {
        // l = sum(w * w) via mul with itself -> dl/dw = 2w
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::new(vec![3], vec![1., -2., 0.5]).unwrap(), true);
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let wv2 = g.param(&store, w);
        assert_eq!(wv, wv2);
        let y = g.mul(wv, wv2).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(store.key(w)).unwrap().data(), &[2., -4., 1.]);
    }
}
