use super::tensor::{numel, strides, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a trainable parameter inside a [`super::ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(#[allow(dead_code)] ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Offset(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    BroadcastTo(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    MaxConst(Var, T),
    Softmax(Var),
    LayerNorm(Var, T),
    Gelu(Var),
    Softplus(Var),
    QuatMul(Var, Var),
    QuatRotate(Var, Var),
    #[cfg(test)]
    FaultySquare(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in evaluation order, so
/// the node list is already a topological order.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `var`; `None` when the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter bound into the graph, summed over repeated bindings.
    pub fn params(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for (id, var) in &self.params {
            let Some(g) = self.get(*var) else { continue };
            match out.iter_mut().find(|(i, _)| i == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((*id, g.clone())),
            }
        }
        out
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each element of `out_shape`, the flat index of its source in `src_shape`
/// under right-aligned broadcasting.
fn broadcast_index_map(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - src_shape.len();
    let src_strides = strides(src_shape);
    let mut eff = vec![0usize; rank];
    for i in 0..src_shape.len() {
        if src_shape[i] != 1 {
            eff[i + offset] = src_strides[i];
        }
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn permute_index_map(in_shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(&out_shape);
    let rank = out_shape.len();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

/// Splits `shape` around `axis` into (outer, n, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x);
    (y, dy)
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Batched matrix product `a[b] (m x k) * b[b] (k x n)`; `b_batched == false` shares `b`.
#[allow(clippy::too_many_arguments)]
fn matmul_kernel<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) {
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = if b_batched { &b[bi * k * n..(bi + 1) * k * n] } else { b };
        let out = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o = *o + av * *bv;
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a trainable parameter value into the graph.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Param(id), true);
        self.params.push((id, v));
        v
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let ng = self.ng(x);
        self.push(value, op, ng)
    }

    fn align(&mut self, a: Var, b: Var, op: &'static str) -> Result<(Var, Var)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            return Ok((a, b));
        }
        let out = broadcast_shape(&sa, &sb)
            .ok_or_else(|| shape_err(op, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let a = if sa == out { a } else { self.broadcast_to(a, &out)? };
        let b = if sb == out { b } else { self.broadcast_to(b, &out)? };
        Ok((a, b))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl Fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (a, b) = self.align(a, b, name)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op(a, b), ng))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Matrix product over the last two axes. `b` is either batched like `a` or rank 2.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}: rank < 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let b_batched = sb.len() > 2;
        if k != k2 || (b_batched && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        matmul_kernel(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
            batch,
            m,
            k,
            n,
            b_batched,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err("permute", format!("{perm:?} for shape {shape:?}")));
        }
        let (out_shape, map) = permute_index_map(&shape, perm);
        let src = self.nodes[x.0].value.data();
        let data = map.iter().map(|&i| src[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute(x, perm.to_vec()), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for x in xs {
            let s = self.shape(*x);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, d)| i != axis && *d != base[i])
            {
                return Err(shape_err("concat", format!("{base:?} with {s:?}")));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for x in xs {
                let v = &self.nodes[x.0].value;
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = xs.iter().any(|x| self.ng(*x));
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Concat(xs.to_vec(), axis), ng))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(shape_err(
                "slice",
                format!("{start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Slice { x, axis, start }, ng))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        match broadcast_shape(&src_shape, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(shape_err(
                    "broadcast_to",
                    format!("{src_shape:?} -> {shape:?}"),
                ))
            }
        }
        let map = broadcast_index_map(&src_shape, shape);
        let src = self.nodes[x.0].value.data();
        let data = map.iter().map(|&i| src[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo(x), ng))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(
                if mean { "mean_axis" } else { "sum_axis" },
                format!("axis {axis} for {shape:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.nodes[x.0].value.data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d = *d + *s;
                }
            }
        }
        if mean {
            let inv = T::one() / T::lit(n as f64);
            data.iter_mut().for_each(|v| *v = *v * inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.ng(x);
        let op = if mean { Op::MeanAxis(x, axis) } else { Op::SumAxis(x, axis) };
        Ok(self.push(Tensor::new(out_shape, data)?, op, ng))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.len() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    /// Absolute value; the backward rule uses subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// `max(x, c)` elementwise. Ties route no gradient to `x`.
    pub fn max_const(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v.max(c), Op::MaxConst(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.max_const(x, T::zero())
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    fn last_axis(&self, x: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(x);
        let n = *s.last().ok_or_else(|| shape_err(op, "rank-0 input"))?;
        if n == 0 {
            return Err(shape_err(op, "empty last axis"));
        }
        Ok((numel(s) / n, n))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, n) = self.last_axis(x, "softmax")?;
        let v = &self.nodes[x.0].value;
        let mut data = v.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * n..(r + 1) * n];
            let m = row.iter().fold(T::neg_infinity(), |a, b| a.max(*b));
            let mut s = T::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s = s + *e;
            }
            for e in row.iter_mut() {
                *e = *e / s;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Softmax(x), ng))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (rows, n) = self.last_axis(x, "layer_norm")?;
        let v = &self.nodes[x.0].value;
        let mut data = v.data().to_vec();
        let nf = T::lit(n as f64);
        for r in 0..rows {
            let row = &mut data[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|e| (*e - mean) * (*e - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            for e in row.iter_mut() {
                *e = (*e - mean) * inv;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::LayerNorm(x, eps), ng))
    }

    /// Hamilton product of quaternions stored `(w, x, y, z)` along the last axis.
    pub fn quat_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) || sa.last() != Some(&4) {
            return Err(shape_err(
                "quat_mul",
                format!("{sa:?} x {:?}", self.shape(b)),
            ));
        }
        let va = self.nodes[a.0].value.data();
        let vb = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); va.len()];
        for ((o, p), q) in out.chunks_exact_mut(4).zip(va.chunks_exact(4)).zip(vb.chunks_exact(4)) {
            o[0] = p[0] * q[0] - p[1] * q[1] - p[2] * q[2] - p[3] * q[3];
            o[1] = p[0] * q[1] + p[1] * q[0] + p[2] * q[3] - p[3] * q[2];
            o[2] = p[0] * q[2] - p[1] * q[3] + p[2] * q[0] + p[3] * q[1];
            o[3] = p[0] * q[3] + p[1] * q[2] - p[2] * q[1] + p[3] * q[0];
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(sa, out)?, Op::QuatMul(a, b), ng))
    }

    /// Applies the rotation matrix of each quaternion `q[..., 4]` to `v[..., 3]`.
    /// The matrix is the usual quadratic form, exact for unit quaternions.
    pub fn quat_rotate(&mut self, q: Var, v: Var) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sv = self.shape(v).to_vec();
        if sq.last() != Some(&4)
            || sv.last() != Some(&3)
            || sq[..sq.len() - 1] != sv[..sv.len() - 1]
        {
            return Err(shape_err("quat_rotate", format!("{sq:?} x {sv:?}")));
        }
        let vq = self.nodes[q.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut out = vec![T::zero(); vv.len()];
        for ((o, q), v) in out.chunks_exact_mut(3).zip(vq.chunks_exact(4)).zip(vv.chunks_exact(3)) {
            let r = rotate_raw(q, v);
            o.copy_from_slice(&r);
        }
        let ng = self.ng(q) || self.ng(v);
        Ok(self.push(Tensor::new(sv, out)?, Op::QuatRotate(q, v), ng))
    }

    #[cfg(test)]
    pub(crate) fn faulty_square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::FaultySquare(x))
    }

    /// Reverse pass from a scalar `root`, seeding `d root / d root = 1`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backward_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let elementwise = |x: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
            let data = x.data().iter().zip(g.data()).map(|(a, b)| f(*a, *b)).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, elementwise(vb, &|y, gi| y * gi));
                acc(*b, elementwise(va, &|x, gi| x * gi));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, elementwise(vb, &|y, gi| gi / y));
                let data = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .zip(g.data())
                    .map(|((x, y), gi)| -*gi * *x / (*y * *y))
                    .collect();
                acc(*b, Tensor::new(vb.shape().to_vec(), data).expect("same shape"));
            }
            Op::Neg(x) => acc(*x, g.map(|v| -v)),
            Op::Scale(x, c) => {
                let c = *c;
                acc(*x, g.map(|v| v * c));
            }
            Op::Offset(x) => acc(*x, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let sa = va.shape();
                let sb = vb.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = numel(&sa[..sa.len() - 2]);
                let b_batched = sb.len() > 2;
                let gd = g.data();
                if self.nodes[a.0].needs_grad {
                    // dA = dC * B^T
                    let mut da = vec![T::zero(); va.len()];
                    for bi in 0..batch {
                        let bm = if b_batched { &vb.data()[bi * k * n..(bi + 1) * k * n] } else { vb.data() };
                        let gm = &gd[bi * m * n..(bi + 1) * m * n];
                        let dam = &mut da[bi * m * k..(bi + 1) * m * k];
                        for r in 0..m {
                            let grow = &gm[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bm[p * n..(p + 1) * n];
                                dam[r * k + p] = grow.iter().zip(brow).map(|(x, y)| *x * *y).sum();
                            }
                        }
                    }
                    acc(*a, Tensor::new(sa.to_vec(), da).expect("shape"));
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T * dC, summed over the batch when B is shared
                    let mut db = vec![T::zero(); vb.len()];
                    for bi in 0..batch {
                        let am = &va.data()[bi * m * k..(bi + 1) * m * k];
                        let gm = &gd[bi * m * n..(bi + 1) * m * n];
                        let dbm = if b_batched { &mut db[bi * k * n..(bi + 1) * k * n] } else { &mut db[..] };
                        for r in 0..m {
                            let grow = &gm[r * n..(r + 1) * n];
                            for p in 0..k {
                                let av = am[r * k + p];
                                if av == T::zero() {
                                    continue;
                                }
                                for (d, gv) in dbm[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d = *d + av * *gv;
                                }
                            }
                        }
                    }
                    acc(*b, Tensor::new(sb.to_vec(), db).expect("shape"));
                }
            }
            Op::Reshape(x) => {
                let s = val(*x).shape().to_vec();
                acc(*x, g.clone().reshaped(&s).expect("same numel"));
            }
            Op::Permute(x, perm) => {
                let in_shape = val(*x).shape();
                let (_, map) = permute_index_map(in_shape, perm);
                let mut d = vec![T::zero(); g.len()];
                for (o, src) in map.iter().enumerate() {
                    d[*src] = g.data()[o];
                }
                acc(*x, Tensor::new(in_shape.to_vec(), d).expect("shape"));
            }
            Op::Concat(xs, axis) => {
                let out_shape = g.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut start = 0;
                for x in xs {
                    let s = val(*x).shape().to_vec();
                    let len = s[*axis];
                    if self.nodes[x.0].needs_grad {
                        let mut d = Vec::with_capacity(numel(&s));
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        acc(*x, Tensor::new(s, d).expect("shape"));
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = val(*x).shape().to_vec();
                let (outer, n, inner) = split_axis(&s, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![T::zero(); numel(&s)];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                acc(*x, Tensor::new(s, d).expect("shape"));
            }
            Op::BroadcastTo(x) => {
                let s = val(*x).shape().to_vec();
                let map = broadcast_index_map(&s, g.shape());
                let mut d = vec![T::zero(); numel(&s)];
                for (o, src) in map.iter().enumerate() {
                    d[*src] = d[*src] + g.data()[o];
                }
                acc(*x, Tensor::new(s, d).expect("shape"));
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let s = val(*x).shape().to_vec();
                let (outer, n, inner) = split_axis(&s, *axis);
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    T::one() / T::lit(n as f64)
                } else {
                    T::one()
                };
                let mut d = vec![T::zero(); numel(&s)];
                for o in 0..outer {
                    let grow = &g.data()[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        for (dv, gv) in d[(o * n + k) * inner..(o * n + k + 1) * inner].iter_mut().zip(grow) {
                            *dv = *gv * scale;
                        }
                    }
                }
                acc(*x, Tensor::new(s, d).expect("shape"));
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(val(*x).shape(), gv));
            }
            Op::MeanAll(x) => {
                let xv = val(*x);
                let gv = g.data()[0] / T::lit(xv.len() as f64);
                acc(*x, Tensor::full(xv.shape(), gv));
            }
            Op::Exp(x) => acc(*x, elementwise(&node.value, &|y, gi| y * gi)),
            Op::Ln(x) => acc(*x, elementwise(val(*x), &|xv, gi| gi / xv)),
            Op::Sqrt(x) => acc(*x, elementwise(&node.value, &|y, gi| gi * T::lit(0.5) / y)),
            Op::Abs(x) => acc(
                *x,
                elementwise(val(*x), &|xv, gi| {
                    if xv > T::zero() {
                        gi
                    } else if xv < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::MaxConst(x, c) => {
                let c = *c;
                acc(*x, elementwise(val(*x), &|xv, gi| if xv > c { gi } else { T::zero() }));
            }
            Op::Gelu(x) => acc(*x, elementwise(val(*x), &|xv, gi| gi * gelu_parts(xv).1)),
            Op::Softplus(x) => acc(*x, elementwise(val(*x), &|xv, gi| gi * sigmoid(xv))),
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("rank >= 1");
                let mut d = vec![T::zero(); y.len()];
                for r in 0..y.len() / n {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dotp: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for ((dv, yv), gv) in d[r * n..(r + 1) * n].iter_mut().zip(yr).zip(gr) {
                        *dv = *yv * (*gv - dotp);
                    }
                }
                acc(*x, Tensor::new(node.value.shape().to_vec(), d).expect("shape"));
            }
            Op::LayerNorm(x, eps) => {
                let xv = val(*x).data();
                let y = node.value.data();
                let n = *node.value.shape().last().expect("rank >= 1");
                let nf = T::lit(n as f64);
                let mut d = vec![T::zero(); y.len()];
                for r in 0..y.len() / n {
                    let xr = &xv[r * n..(r + 1) * n];
                    let mean = xr.iter().copied().sum::<T>() / nf;
                    let var = xr.iter().map(|e| (*e - mean) * (*e - mean)).sum::<T>() / nf;
                    let inv = T::one() / (var + *eps).sqrt();
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let gmean = gr.iter().copied().sum::<T>() / nf;
                    let gymean = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum::<T>() / nf;
                    for ((dv, yv), gv) in d[r * n..(r + 1) * n].iter_mut().zip(yr).zip(gr) {
                        *dv = inv * (*gv - gmean - *yv * gymean);
                    }
                }
                acc(*x, Tensor::new(node.value.shape().to_vec(), d).expect("shape"));
            }
            Op::QuatMul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let mut da = vec![T::zero(); va.len()];
                let mut db = vec![T::zero(); vb.len()];
                for i in 0..va.len() / 4 {
                    let p = &va[4 * i..4 * i + 4];
                    let q = &vb[4 * i..4 * i + 4];
                    let gq = &g.data()[4 * i..4 * i + 4];
                    let (gw, gx, gy, gz) = (gq[0], gq[1], gq[2], gq[3]);
                    da[4 * i] = gw * q[0] + gx * q[1] + gy * q[2] + gz * q[3];
                    da[4 * i + 1] = -gw * q[1] + gx * q[0] - gy * q[3] + gz * q[2];
                    da[4 * i + 2] = -gw * q[2] + gx * q[3] + gy * q[0] - gz * q[1];
                    da[4 * i + 3] = -gw * q[3] - gx * q[2] + gy * q[1] + gz * q[0];
                    db[4 * i] = gw * p[0] + gx * p[1] + gy * p[2] + gz * p[3];
                    db[4 * i + 1] = -gw * p[1] + gx * p[0] + gy * p[3] - gz * p[2];
                    db[4 * i + 2] = -gw * p[2] - gx * p[3] + gy * p[0] + gz * p[1];
                    db[4 * i + 3] = -gw * p[3] + gx * p[2] - gy * p[1] + gz * p[0];
                }
                acc(*a, Tensor::new(val(*a).shape().to_vec(), da).expect("shape"));
                acc(*b, Tensor::new(val(*b).shape().to_vec(), db).expect("shape"));
            }
            Op::QuatRotate(q, v) => {
                let (vq, vv) = (val(*q).data(), val(*v).data());
                let mut dq = vec![T::zero(); vq.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let two = T::lit(2.0);
                let four = T::lit(4.0);
                for i in 0..vv.len() / 3 {
                    let w = vq[4 * i];
                    let u = [vq[4 * i + 1], vq[4 * i + 2], vq[4 * i + 3]];
                    let x = [vv[3 * i], vv[3 * i + 1], vv[3 * i + 2]];
                    let gi = &g.data()[3 * i..3 * i + 3];
                    let gv = [gi[0], gi[1], gi[2]];
                    let uu = dot3(u, u);
                    let ux = dot3(u, x);
                    let ug = dot3(u, gv);
                    let gx = dot3(gv, x);
                    // d/dv: M^T g = (1 - 2|u|^2) g - 2w (u x g) + 2u (u . g)
                    let uxg = cross3(u, gv);
                    for c in 0..3 {
                        dv[3 * i + c] = (T::one() - two * uu) * gv[c] - two * w * uxg[c] + two * u[c] * ug;
                    }
                    // d/dw = 2 g . (u x v)
                    dq[4 * i] = two * dot3(gv, cross3(u, x));
                    // d/du = -4 (g . v) u + 2w (v x g) + 2 (u . v) g + 2 (g . u) v
                    let xg = cross3(x, gv);
                    for c in 0..3 {
                        dq[4 * i + 1 + c] =
                            -four * gx * u[c] + two * w * xg[c] + two * ux * gv[c] + two * ug * x[c];
                    }
                }
                acc(*q, Tensor::new(val(*q).shape().to_vec(), dq).expect("shape"));
                acc(*v, Tensor::new(val(*v).shape().to_vec(), dv).expect("shape"));
            }
            #[cfg(test)]
            Op::FaultySquare(x) => {
                // deliberately wrong: d(x^2)/dx should be 2x
                acc(*x, elementwise(val(*x), &|xv, gi| xv * gi));
            }
        }
    }
}

#[inline]
fn dot3<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn cross3<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
fn rotate_raw<T: Real>(q: &[T], v: &[T]) -> [T; 3] {
    let w = q[0];
    let u = [q[1], q[2], q[3]];
    let x = [v[0], v[1], v[2]];
    let two = T::lit(2.0);
    let t = cross3(u, x).map(|c| c * two);
    let ut = cross3(u, t);
    [
        x[0] + w * t[0] + ut[0],
        x[1] + w * t[1] + ut[1],
        x[2] + w * t[2] + ut[2],
    ]
}
