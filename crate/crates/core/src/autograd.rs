//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built per forward pass; nodes hold their values eagerly and
//! [`Graph::backward`] walks the tape in reverse. Parameter leaves are bound
//! from a [`ParamStore`] and carry the store's trainable flag, so frozen
//! parameters never receive gradients.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{arg_err, shape_err, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{numel, permute_index, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct MatMulSpec {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    shared_b: bool,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Arc<Tensor<T>>),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Silu(Var),
    Abs(Var),
    Mean(Var),
    Reshape(Var),
    Gather(Var, Arc<Vec<usize>>),
    MatMul(Var, Var, MatMulSpec),
    Softmax { x: Var },
    Conv3d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(T, T)> },
    RmsGroupNorm { x: Var, gain: Var, groups: usize, rstd: Vec<T> },
    Rope { x: Var, cos: Arc<Vec<T>>, sin: Arc<Vec<T>> },
    Resample { x: Var, axis: usize, matrix: Arc<Tensor<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Epsilon inside normalisation layers.
pub const NORM_EPS: f64 = 1e-6;

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every bound trainable parameter, ordered by id.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].take().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that always requires a gradient (used by gradient checks).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter once per graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, store.is_trainable(id));
        self.bound.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor<T>>) -> Result<Var> {
        let v = self.value(a).zip_map(&c, |x, y| x * y)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::MulConst(a, c), ng))
    }

    fn bcast_check(&self, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err!("cannot broadcast {sb:?} over trailing dims of {sa:?}"));
        }
        Ok(numel(sb))
    }

    /// `a + b` with `b` broadcast over the leading dims of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.bcast_check(a, b)?;
        let bv = self.value(b).as_slice();
        let mut v = self.value(a).clone();
        for (i, x) in v.as_mut_slice().iter_mut().enumerate() {
            *x = *x + bv[i % inner];
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::AddBcast(a, b), ng))
    }

    /// `a * b` with `b` broadcast over the leading dims of `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.bcast_check(a, b)?;
        let bv = self.value(b).as_slice();
        let mut v = self.value(a).clone();
        for (i, x) in v.as_mut_slice().iter_mut().enumerate() {
            *x = *x * bv[i % inner];
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MulBcast(a, b), ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// `out[i] = a[index[i]]` reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != index.len() {
            return Err(shape_err!("gather index of length {} cannot fill {shape:?}", index.len()));
        }
        let src = self.value(a).as_slice();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err!("gather index {bad} out of range for {} elements", src.len()));
        }
        let v = Tensor::new(shape.to_vec(), index.iter().map(|&i| src[i]).collect())?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Gather(a, index), ng))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape: Vec<usize> = axes.iter().map(|&ax| self.shape(a).get(ax).copied().unwrap_or(0)).collect();
        let idx = permute_index(self.shape(a), axes)?;
        self.gather(a, Arc::new(idx), &shape)
    }

    /// Contiguous sub-range along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            idx.extend(base..base + len * inner);
        }
        let mut out = shape;
        out[axis] = len;
        self.gather(a, Arc::new(idx), &out)
    }

    /// `a [B?, m, k] x w [k, n]` where `a`'s leading dims are flattened.
    pub fn linear(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a).to_vec(), self.shape(w).to_vec());
        let (k, n) = match sw[..] {
            [k, n] => (k, n),
            _ => return Err(shape_err!("linear weight must be 2-d, got {sw:?}")),
        };
        if sa.last() != Some(&k) {
            return Err(shape_err!("linear input {sa:?} does not end in {k}"));
        }
        let m = numel(&sa) / k;
        let spec = MatMulSpec { batch: 1, m, k, n, trans_b: false, shared_b: true };
        let mut out_shape = sa;
        *out_shape.last_mut().expect("non-empty") = n;
        self.matmul_impl(a, w, spec, &out_shape)
    }

    /// Batched matmul `a [B, m, k] x b [B, k, n]`, or `b [B, n, k]` transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k) = match sa[..] {
            [bt, m, k] => (bt, m, k),
            _ => return Err(shape_err!("bmm lhs must be 3-d, got {sa:?}")),
        };
        let (bb, r, c) = match sb[..] {
            [bb, r, c] => (bb, r, c),
            _ => return Err(shape_err!("bmm rhs must be 3-d, got {sb:?}")),
        };
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if bb != batch || kb != k {
            return Err(shape_err!("bmm shape mismatch {sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let spec = MatMulSpec { batch, m, k, n, trans_b, shared_b: false };
        self.matmul_impl(a, b, spec, &[batch, m, n])
    }

    fn b_view<'a>(&self, b: &'a [T], s: &MatMulSpec, i: usize) -> MatRef<'a, T> {
        let off = if s.shared_b { 0 } else { i * s.k * s.n };
        if s.trans_b {
            MatRef::row_major(&b[off..off + s.k * s.n], s.n, s.k).t()
        } else {
            MatRef::row_major(&b[off..off + s.k * s.n], s.k, s.n)
        }
    }

    fn matmul_impl(&mut self, a: Var, b: Var, s: MatMulSpec, out_shape: &[usize]) -> Result<Var> {
        let mut out = Tensor::zeros(out_shape);
        {
            let av = self.value(a).as_slice();
            let bv = self.value(b).as_slice();
            let o = out.as_mut_slice();
            for i in 0..s.batch {
                let am = MatRef::row_major(&av[i * s.m * s.k..(i + 1) * s.m * s.k], s.m, s.k);
                gemm(am, self.b_view(bv, &s, i), T::zero(), &mut o[i * s.m * s.n..(i + 1) * s.m * s.n]);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b, s), ng))
    }

    /// Softmax over the last axis. With `causal`, the last two axes are
    /// `(query i, key j)` and entries with `j > i` are exactly zero.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| shape_err!("softmax of a scalar"))?;
        let rows_per_mat = if causal {
            if shape.len() < 2 || shape[shape.len() - 2] != n {
                return Err(shape_err!("causal softmax needs square trailing dims, got {shape:?}"));
            }
            n
        } else {
            1
        };
        let mut v = self.value(a).clone();
        for (r, row) in v.as_mut_slice().chunks_mut(n).enumerate() {
            let limit = if causal { r % rows_per_mat + 1 } else { n };
            let mx = row[..limit].iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row[..limit].iter_mut() {
                *x = (*x - mx).exp();
                sum = sum + *x;
            }
            for x in row[..limit].iter_mut() {
                *x = *x / sum;
            }
            row[limit..].fill(T::zero());
        }
        let ng = self.ng(a);
        Ok(self.push(v, Op::Softmax { x: a }, ng))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let v = kernels::conv3d_forward(self.value(x), self.value(w), bias.map(|b| self.value(b)), &geom)?;
        let ng = self.ng(x) || self.ng(w) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(v, Op::Conv3d { x, w, bias, geom }, ng))
    }

    /// Group normalisation of a `(B, C, T, H, W)` tensor with statistics taken
    /// per batch item, per frame and per channel group (over `C/G x H x W`).
    /// Per-frame statistics keep the layer temporally causal.
    pub fn group_norm_frame(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (b, c, t, h, w) = self.value(x).dims5()?;
        if groups == 0 || c % groups != 0 {
            return Err(arg_err!("{c} channels not divisible into {groups} groups"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!("group norm affine params must have shape [{c}]"));
        }
        let cg = c / groups;
        let hw = h * w;
        let cnt = T::from_usize_lossy(cg * hw);
        let eps = T::lit(NORM_EPS);
        let xs = self.value(x).as_slice();
        let (gs, bs) = (self.value(gamma).as_slice(), self.value(beta).as_slice());
        let mut out = Tensor::zeros(&[b, c, t, h, w]);
        let o = out.as_mut_slice();
        let mut stats = Vec::with_capacity(b * t * groups);
        for bi in 0..b {
            for ti in 0..t {
                for g in 0..groups {
                    let plane = |ch: usize| ((bi * c + ch) * t + ti) * hw;
                    let mut sum = T::zero();
                    for ch in g * cg..(g + 1) * cg {
                        sum = sum + xs[plane(ch)..plane(ch) + hw].iter().copied().sum::<T>();
                    }
                    let mean = sum / cnt;
                    let mut var = T::zero();
                    for ch in g * cg..(g + 1) * cg {
                        for &v in &xs[plane(ch)..plane(ch) + hw] {
                            var = var + (v - mean) * (v - mean);
                        }
                    }
                    let rstd = T::one() / (var / cnt + eps).sqrt();
                    for ch in g * cg..(g + 1) * cg {
                        let p = plane(ch);
                        for i in p..p + hw {
                            o[i] = (xs[i] - mean) * rstd * gs[ch] + bs[ch];
                        }
                    }
                    stats.push((mean, rstd));
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }, ng))
    }

    /// RMS normalisation over channel groups of the last axis, learned
    /// per-channel gain, no bias.
    pub fn rms_group_norm(&mut self, x: Var, gain: Var, groups: usize) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| shape_err!("rms norm of a scalar"))?;
        if groups == 0 || d % groups != 0 {
            return Err(arg_err!("{d} channels not divisible into {groups} groups"));
        }
        if self.shape(gain) != [d] {
            return Err(shape_err!("rms norm gain must have shape [{d}]"));
        }
        let gsz = d / groups;
        let eps = T::lit(NORM_EPS);
        let inv = T::one() / T::from_usize_lossy(gsz);
        let gv = self.value(gain).as_slice().to_vec();
        let mut v = self.value(x).clone();
        let mut rstd = Vec::with_capacity(v.numel() / gsz);
        for grp in v.as_mut_slice().chunks_mut(gsz) {
            let ms = grp.iter().map(|&z| z * z).sum::<T>() * inv;
            rstd.push(T::one() / (ms + eps).sqrt());
        }
        for (i, z) in v.as_mut_slice().iter_mut().enumerate() {
            *z = *z * rstd[i / gsz] * gv[i % d];
        }
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(v, Op::RmsGroupNorm { x, gain, groups, rstd }, ng))
    }

    /// Rotary position embedding on `x [.., S, D]` with tables `[S, D/2]`
    /// rotating channel pairs `(2i, 2i+1)`.
    pub fn rope(&mut self, x: Var, cos: Arc<Vec<T>>, sin: Arc<Vec<T>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] % 2 != 0 {
            return Err(shape_err!("rope needs [.., S, even D], got {shape:?}"));
        }
        let (s, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if cos.len() != s * d / 2 || sin.len() != s * d / 2 {
            return Err(shape_err!("rope tables must hold {} entries", s * d / 2));
        }
        let mut v = self.value(x).clone();
        rope_apply(v.as_mut_slice(), s, d, &cos, &sin, false);
        let ng = self.ng(x);
        Ok(self.push(v, Op::Rope { x, cos, sin }, ng))
    }

    /// Linear resampling along `axis` by `matrix [n_out, n_in]`.
    pub fn resample(&mut self, x: Var, axis: usize, matrix: Arc<Tensor<T>>) -> Result<Var> {
        let v = kernels::resample_axis(self.value(x), axis, &matrix, false)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Resample { x, axis, matrix }, ng))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        let params = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *e = *e + *x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, gy.zip_map(self.value(*b), |g, y| g * y)?);
                }
                if self.ng(*b) {
                    acc(*b, gy.zip_map(self.value(*a), |g, x| g * x)?);
                }
            }
            Op::Scale(a, s) => acc(*a, gy.scale(*s)),
            Op::MulConst(a, c) => acc(*a, gy.zip_map(c, |g, y| g * y)?),
            Op::AddBcast(a, b) => {
                acc(*a, gy.clone());
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(self.shape(*b));
                    let inner = gb.numel();
                    for (j, &g) in gy.as_slice().iter().enumerate() {
                        let s = &mut gb.as_mut_slice()[j % inner];
                        *s = *s + g;
                    }
                    acc(*b, gb);
                }
            }
            Op::MulBcast(a, b) => {
                let bv = self.value(*b).as_slice();
                let inner = bv.len();
                if self.ng(*a) {
                    let mut ga = gy.clone();
                    for (j, g) in ga.as_mut_slice().iter_mut().enumerate() {
                        *g = *g * bv[j % inner];
                    }
                    acc(*a, ga);
                }
                if self.ng(*b) {
                    let av = self.value(*a).as_slice();
                    let mut gb = Tensor::zeros(self.shape(*b));
                    for (j, &g) in gy.as_slice().iter().enumerate() {
                        let s = &mut gb.as_mut_slice()[j % inner];
                        *s = *s + g * av[j];
                    }
                    acc(*b, gb);
                }
            }
            Op::Silu(a) => {
                let g = gy.zip_map(self.value(*a), |g, x| {
                    let sig = T::one() / (T::one() + (-x).exp());
                    g * sig * (T::one() + x * (T::one() - sig))
                })?;
                acc(*a, g);
            }
            Op::Abs(a) => acc(*a, gy.zip_map(self.value(*a), |g, x| g * x.signum())?),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let g = gy.as_slice()[0] / T::from_usize_lossy(n);
                acc(*a, Tensor::full(self.shape(*a), g));
            }
            Op::Reshape(a) => acc(*a, gy.clone().reshape(self.shape(*a))?),
            Op::Gather(a, idx) => {
                let mut g = Tensor::zeros(self.shape(*a));
                let gs = g.as_mut_slice();
                for (&src, &v) in idx.iter().zip(gy.as_slice()) {
                    gs[src] = gs[src] + v;
                }
                acc(*a, g);
            }
            Op::MatMul(a, b, s) => {
                let av = self.value(*a).as_slice();
                let bv = self.value(*b).as_slice();
                let gv = gy.as_slice();
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(self.shape(*a));
                    for i in 0..s.batch {
                        let gm = MatRef::row_major(&gv[i * s.m * s.n..(i + 1) * s.m * s.n], s.m, s.n);
                        let bt = self.b_view(bv, s, i).t();
                        gemm(gm, bt, T::zero(), &mut ga.as_mut_slice()[i * s.m * s.k..(i + 1) * s.m * s.k]);
                    }
                    acc(*a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(self.shape(*b));
                    for i in 0..s.batch {
                        let am = MatRef::row_major(&av[i * s.m * s.k..(i + 1) * s.m * s.k], s.m, s.k);
                        let gm = MatRef::row_major(&gv[i * s.m * s.n..(i + 1) * s.m * s.n], s.m, s.n);
                        let off = if s.shared_b { 0 } else { i * s.k * s.n };
                        let beta = if s.shared_b && i > 0 { T::one() } else { T::zero() };
                        let dst = &mut gb.as_mut_slice()[off..off + s.k * s.n];
                        if s.trans_b {
                            // b is [n, k]: db = dC^T A
                            gemm(gm.t(), am, beta, dst);
                        } else {
                            gemm(am.t(), gm, beta, dst);
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Softmax { x, .. } => {
                let y = &node.value;
                let n = *y.shape().last().expect("non-scalar");
                let mut g = gy.clone();
                for (grow, yrow) in g.as_mut_slice().chunks_mut(n).zip(y.as_slice().chunks(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                acc(*x, g);
            }
            Op::Conv3d { x, w, bias, geom } => {
                let need_db = bias.is_some_and(|b| self.ng(b));
                let (dx, dw, db) =
                    kernels::conv3d_backward(self.value(*x), self.value(*w), gy, geom, self.ng(*x), self.ng(*w), need_db)?;
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    acc(*b, db);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let (b, c, t, h, w) = self.value(*x).dims5()?;
                let cg = c / groups;
                let hw = h * w;
                let cnt = T::from_usize_lossy(cg * hw);
                let xs = self.value(*x).as_slice();
                let gs = self.value(*gamma).as_slice();
                let gys = gy.as_slice();
                let mut dx = Tensor::zeros(&[b, c, t, h, w]);
                let mut dg = Tensor::zeros(&[c]);
                let mut db = Tensor::zeros(&[c]);
                let mut si = 0;
                for bi in 0..b {
                    for ti in 0..t {
                        for g in 0..*groups {
                            let (mean, rstd) = stats[si];
                            si += 1;
                            let plane = |ch: usize| ((bi * c + ch) * t + ti) * hw;
                            let (mut s1, mut s2) = (T::zero(), T::zero());
                            for ch in g * cg..(g + 1) * cg {
                                let p = plane(ch);
                                let (mut dgs, mut dbs) = (T::zero(), T::zero());
                                for k in p..p + hw {
                                    let xh = (xs[k] - mean) * rstd;
                                    let dxh = gys[k] * gs[ch];
                                    s1 = s1 + dxh;
                                    s2 = s2 + dxh * xh;
                                    dgs = dgs + gys[k] * xh;
                                    dbs = dbs + gys[k];
                                }
                                dg.as_mut_slice()[ch] = dg.as_slice()[ch] + dgs;
                                db.as_mut_slice()[ch] = db.as_slice()[ch] + dbs;
                            }
                            let (m1, m2) = (s1 / cnt, s2 / cnt);
                            let dxs = dx.as_mut_slice();
                            for ch in g * cg..(g + 1) * cg {
                                let p = plane(ch);
                                for k in p..p + hw {
                                    let xh = (xs[k] - mean) * rstd;
                                    dxs[k] = rstd * (gys[k] * gs[ch] - m1 - xh * m2);
                                }
                            }
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::RmsGroupNorm { x, gain, groups, rstd } => {
                let xs = self.value(*x).as_slice();
                let gv = self.value(*gain).as_slice();
                let d = gv.len();
                let gsz = d / groups;
                let inv = T::one() / T::from_usize_lossy(gsz);
                let gys = gy.as_slice();
                let mut dx = Tensor::zeros(self.shape(*x));
                let mut dgain = Tensor::zeros(&[d]);
                for (gi, &r) in rstd.iter().enumerate() {
                    let base = gi * gsz;
                    let mut dot = T::zero();
                    for k in base..base + gsz {
                        let xh = xs[k] * r;
                        dot = dot + gys[k] * gv[k % d] * xh;
                        dgain.as_mut_slice()[k % d] = dgain.as_slice()[k % d] + gys[k] * xh;
                    }
                    let m = dot * inv;
                    let dxs = dx.as_mut_slice();
                    for k in base..base + gsz {
                        let xh = xs[k] * r;
                        dxs[k] = r * (gys[k] * gv[k % d] - xh * m);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
            }
            Op::Rope { x, cos, sin } => {
                let shape = self.shape(*x);
                let (s, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let mut g = gy.clone();
                rope_apply(g.as_mut_slice(), s, d, cos, sin, true);
                acc(*x, g);
            }
            Op::Resample { x, axis, matrix } => acc(*x, kernels::resample_axis(gy, *axis, matrix, true)?),
        }
        Ok(())
    }
}

fn rope_apply<T: Scalar>(v: &mut [T], s: usize, d: usize, cos: &[T], sin: &[T], inverse: bool) {
    let half = d / 2;
    for (row_i, row) in v.chunks_mut(d).enumerate() {
        let pos = row_i % s;
        for p in 0..half {
            let (c, mut sn) = (cos[pos * half + p], sin[pos * half + p]);
            if inverse {
                sn = -sn;
            }
            let (x0, x1) = (row[2 * p], row[2 * p + 1]);
            row[2 * p] = x0 * c - x1 * sn;
            row[2 * p + 1] = x0 * sn + x1 * c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of d(mean(f(x) * probe))/dx.
    fn check(shape: &[usize], f: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::<f64>::randn(shape, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let y = f(&mut g, x);
        let probe = Arc::new(Tensor::<f64>::randn(g.shape(y), 1.0, &mut rng));
        let yp = g.mul_const(y, probe.clone()).unwrap();
        let l = g.mean(yp);
        let grads = g.backward(l).unwrap();
        let analytic = grads.of(x).unwrap().clone();
        let eval = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.constant(t);
            let y = f(&mut g, x);
            let yp = g.mul_const(y, probe.clone()).unwrap();
            let l = g.mean(yp);
            g.value(l).as_slice()[0]
        };
        let h = 1e-6;
        for i in 0..x0.numel() {
            let mut p = x0.clone();
            p.as_mut_slice()[i] += h;
            let mut m = x0.clone();
            m.as_mut_slice()[i] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h);
            let an = analytic.as_slice()[i];
            assert!((fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()), "elem {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        check(&[3, 4], |g, x| g.silu(x));
        check(&[3, 4], |g, x| {
            let y = g.mul(x, x).unwrap();
            g.sub(y, x).unwrap()
        });
        check(&[2, 3, 4], |g, x| {
            let b = g.constant(Tensor::from_fn(&[4], |i| i[0] as f64 - 1.5));
            let y = g.mul_bcast(x, b).unwrap();
            g.add_bcast(y, b).unwrap()
        });
    }

    #[test]
    fn softmax_grads_plain_and_causal() {
        check(&[2, 5], |g, x| g.softmax(x, false).unwrap());
        check(&[2, 4, 4], |g, x| g.softmax(x, true).unwrap());
    }

    #[test]
    fn matmul_grads() {
        check(&[2, 3, 4], |g, x| {
            let w = g.constant(Tensor::from_fn(&[4, 5], |i| (i[0] as f64 * 0.3 - i[1] as f64 * 0.2).sin()));
            g.linear(x, w).unwrap()
        });
        check(&[2, 3, 4], |g, x| g.bmm(x, x, true).unwrap());
        check(&[2, 3, 3], |g, x| g.bmm(x, x, false).unwrap());
        // weight-side gradient of a shared rhs
        check(&[4, 2], |g, w| {
            let a = g.constant(Tensor::from_fn(&[3, 5, 4], |i| ((i[0] * 20 + i[1] * 4 + i[2]) as f64 * 0.1).cos()));
            g.linear(a, w).unwrap()
        });
    }

    #[test]
    fn norm_grads() {
        check(&[2, 4, 2, 3, 3], |g, x| {
            let gamma = g.constant(Tensor::from_fn(&[4], |i| 1.0 + 0.1 * i[0] as f64));
            let beta = g.constant(Tensor::from_fn(&[4], |i| 0.05 * i[0] as f64));
            g.group_norm_frame(x, gamma, beta, 2).unwrap()
        });
        check(&[3, 8], |g, x| {
            let gain = g.constant(Tensor::from_fn(&[8], |i| 0.5 + 0.1 * i[0] as f64));
            g.rms_group_norm(x, gain, 2).unwrap()
        });
    }

    #[test]
    fn rope_gather_conv_resample_grads() {
        let cos: Arc<Vec<f64>> = Arc::new((0..6).map(|i| (i as f64 * 0.4).cos()).collect());
        let sin: Arc<Vec<f64>> = Arc::new((0..6).map(|i| (i as f64 * 0.4).sin()).collect());
        check(&[2, 3, 4], move |g, x| g.rope(x, cos.clone(), sin.clone()).unwrap());
        check(&[2, 3, 4], |g, x| g.permute(x, &[2, 0, 1]).unwrap());
        check(&[1, 2, 3, 4, 4], |g, x| {
            let w = g.constant(Tensor::from_fn(&[3, 2, 3, 3, 3], |i| ((i[0] + 2 * i[1] + i[2] * i[3]) as f64 * 0.17).sin()));
            let b = g.constant(Tensor::from_fn(&[3], |i| i[0] as f64));
            g.conv3d(x, w, Some(b), ConvGeom { stride_t: 1, stride_s: 1, pad_t: 2, pad_s: 1 }).unwrap()
        });
        check(&[2, 4, 3], |g, x| {
            let m = Arc::new(Tensor::from_fn(&[2, 4], |i| (i[0] + i[1]) as f64 * 0.25));
            g.resample(x, 1, m).unwrap()
        });
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::full(&[2], 1.0)).unwrap();
        let b = store.add("b", Tensor::full(&[2], 2.0)).unwrap();
        store.set_trainable(b, false);
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let vb = g.param(&store, b);
        let y = g.mul(va, vb).unwrap();
        let l = g.mean(y);
        let grads = g.backward(l).unwrap().into_param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, a);
        assert_eq!(grads[0].1.as_slice(), &[1.0, 1.0]);
    }
}
