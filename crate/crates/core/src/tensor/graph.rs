//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op in creation order; [`Graph::backward`] walks
//! the record once in reverse. A graph can be differentiated exactly once:
//! a second `backward` is an error until [`Graph::reset`] is called, so
//! per-example gradient loops always build a fresh tape.

use std::collections::BTreeMap;

use super::conv::{conv2d_backward, conv2d_forward_cols};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatView, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BroadcastAdd(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Silu(Var),
    LeakyRelu(Var, T),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Concat(Vec<Var>),
    Upsample2x(Var),
    AvgPool2x(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Option<Vec<T>>,
    },
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-writer tape of tensor operations.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    grads: Option<Vec<Option<Tensor<T>>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grads: None,
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing in it requires a gradient.
    pub fn no_grad() -> Self {
        Graph {
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

    /// Drops every node, parameter binding, and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.grads = None;
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter; repeated calls with the same name return the
    /// same node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `a + b` where `b` broadcasts onto `a` (right-aligned; each dim of `b`
    /// is 1 or equal to the matching dim of `a`).
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let strides = broadcast_strides(self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = av.data().to_vec();
        for_each_broadcast(av.shape(), &strides, |i, j| out[i] += bv.data()[j]);
        let v = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::BroadcastAdd(a, b), rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Silu(a), rg)
    }

    /// `max(x, slope * x)` for `slope` in `[0, 1)`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::invalid(format!("leaky_relu slope {slope} outside [0, 1)")));
        }
        let s = T::lit(slope);
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * s });
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::LeakyRelu(a, s), rg))
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", format!("need >= 2 dims, got {shape:?}")));
        }
        let v = transpose_last2(self.value(a));
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    /// Concatenates along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat", format!("need >= 2 dims, got {s0:?}")));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape("concat", format!("{s0:?} vs {s:?}")));
            }
            channels += s[1];
        }
        let inner: usize = s0[2..].iter().product();
        let n = s0[0];
        let mut out = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let v = Tensor::new(shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec()), rg))
    }

    /// Nearest-neighbour ×2 upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", format!("expected 4 dims, got {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Upsample2x(a), rg))
    }

    /// 2×2 average pooling of `[N, C, H, W]` with even `H`, `W`.
    pub fn avg_pool2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::shape("avg_pool2x", format!("need [N,C,even,even], got {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2] / 2, s[3] / 2);
        let x = self.value(a).data();
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); nc * h * w];
        for p in 0..nc {
            for y in 0..h {
                for xx in 0..w {
                    let i = (p * 2 * h + 2 * y) * 2 * w + 2 * xx;
                    out[(p * h + y) * w + xx] = (x[i] + x[i + 1] + x[i + 2 * w] + x[i + 2 * w + 1]) * quarter;
                }
            }
        }
        let v = Tensor::new(vec![s[0], s[1], h, w], out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::AvgPool2x(a), rg))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().fold(T::zero(), |acc, &x| acc + x) / T::lit(t.numel() as f64);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = *t.shape().last().expect("non-empty shape");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    // ---- linear algebra ----------------------------------------------

    /// `[M,K]x[K,N]`, `[B,M,K]x[B,K,N]`, or `[B,M,K]x[K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = MatmulDims::new(self.shape(a), self.shape(b))?;
        let mut out = vec![T::zero(); dims.batch * dims.m * dims.n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..dims.batch {
            gemm(
                &av[i * dims.m * dims.k..],
                MatView::row_major(dims.m, dims.k),
                &bv[dims.b_offset(i)..],
                MatView::row_major(dims.k, dims.n),
                T::zero(),
                &mut out[i * dims.m * dims.n..(i + 1) * dims.m * dims.n],
                MatView::row_major(dims.m, dims.n),
            );
        }
        let v = Tensor::new(dims.out_shape(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let keep = self.grad_enabled && self.requires_grad(w);
        let (v, cols) = conv2d_forward_cols(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            keep,
        )?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        ))
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine
    /// `gamma`, `beta` of shape `[C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || groups == 0 || !s[1].is_multiple_of(groups) {
            return Err(Error::shape(
                "group_norm",
                format!("{groups} groups do not divide channels of {s:?}"),
            ));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "group_norm",
                format!(
                    "affine shapes {:?}/{:?} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let inner: usize = s[2..].iter().product();
        let per_group = c / groups * inner;
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(s[0] * groups);
        let mut rstds = Vec::with_capacity(s[0] * groups);
        let count = T::lit(per_group as f64);
        let eps = T::lit(GROUP_NORM_EPS);
        for (gi, chunk) in xv.chunks(per_group).enumerate() {
            let mean = chunk.iter().fold(T::zero(), |a, &v| a + v) / count;
            let var = chunk.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / count;
            let rstd = T::one() / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let g = gi % groups;
            let dst = &mut out[gi * per_group..(gi + 1) * per_group];
            for (ci, (src, dst)) in chunk.chunks(inner).zip(dst.chunks_mut(inner)).enumerate() {
                let ch = g * (c / groups) + ci;
                let (a, b) = (rstd * gv[ch], bv[ch] - mean * rstd * gv[ch]);
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = v * a + b;
                }
            }
        }
        let v = Tensor::new(s, out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// Rows of `table` (`[V, D]`) at `indices`, giving `[len, D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding", format!("table must be 2-d, got {s:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::invalid(format!(
                "embedding index {bad} out of range for {} rows",
                s[0]
            )));
        }
        let v = self.value(table).select_rows(indices)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---- losses ------------------------------------------------------

    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s = av
            .iter()
            .zip(bv)
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let v = Tensor::scalar(s / T::lit(av.len() as f64));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mse(a, b), rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy_loss",
                format!("logits {s:?} for {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            loss += lse - row[l];
            softmax_in_place(row);
        }
        let v = Tensor::scalar(loss / T::lit(labels.len() as f64));
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Populates gradients of the one-element `loss` with respect to every
    /// node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Backward(
                "backward already ran on this graph; call reset() and rebuild it".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::Backward("empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for (input, g) in self.node_backward(i, &dy)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                match &grads[i] {
                    Some(g) if !g.is_finite() => {
                        let name = self
                            .params
                            .iter()
                            .find(|(_, v)| v.0 == i)
                            .map(|(k, _)| k.clone())
                            .unwrap_or_else(|| format!("leaf #{i}"));
                        return Err(Error::NonFinite {
                            what: format!("gradient of {name}"),
                        });
                    }
                    Some(_) => {}
                    None => grads[i] = Some(Tensor::zeros(node.value.shape().to_vec())),
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    /// Gradients of every trainable bound parameter, by name.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter_map(|(name, &v)| self.grad(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    fn node_backward(&self, i: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, dy.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, dy.zip_map(val(*b), |g, y| g * y)?),
                (*b, dy.zip_map(val(*a), |g, x| g * x)?),
            ],
            Op::Scale(a, c) => {
                let c = *c;
                vec![(*a, dy.map(|g| g * c))]
            }
            Op::BroadcastAdd(a, b) => {
                let mut res = vec![(*a, dy.clone())];
                if need(*b) {
                    let strides = broadcast_strides(dy.shape(), val(*b).shape())?;
                    let mut db = vec![T::zero(); val(*b).numel()];
                    for_each_broadcast(dy.shape(), &strides, |i, j| db[j] += dy.data()[i]);
                    res.push((*b, Tensor::new(val(*b).shape().to_vec(), db)?));
                }
                res
            }
            Op::Silu(a) => vec![(
                *a,
                dy.zip_map(val(*a), |g, x| {
                    let s = sigmoid(x);
                    g * s * (T::one() + x * (T::one() - s))
                })?,
            )],
            Op::LeakyRelu(a, s) => {
                let s = *s;
                vec![(*a, dy.zip_map(val(*a), |g, x| if x > T::zero() { g } else { g * s })?)]
            }
            Op::Reshape(a) => vec![(*a, dy.reshape(val(*a).shape().to_vec())?)],
            Op::Transpose(a) => vec![(*a, transpose_last2(dy))],
            Op::Concat(parts) => {
                let s = dy.shape();
                let inner: usize = s[2..].iter().product();
                let total_c = s[1];
                let mut res = Vec::with_capacity(parts.len());
                let mut c0 = 0;
                for &p in parts {
                    let c = val(p).shape()[1];
                    if need(p) {
                        let mut g = Vec::with_capacity(val(p).numel());
                        for b in 0..s[0] {
                            let off = (b * total_c + c0) * inner;
                            g.extend_from_slice(&dy.data()[off..off + c * inner]);
                        }
                        res.push((p, Tensor::new(val(p).shape().to_vec(), g)?));
                    }
                    c0 += c;
                }
                res
            }
            Op::Upsample2x(a) => {
                let s = val(*a).shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut g = vec![T::zero(); nc * h * w];
                for p in 0..nc {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            g[(p * h + y / 2) * w + x / 2] += dy.data()[(p * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                vec![(*a, Tensor::new(s.to_vec(), g)?)]
            }
            Op::AvgPool2x(a) => {
                let s = val(*a).shape();
                let (nc, h, w) = (s[0] * s[1], s[2] / 2, s[3] / 2);
                let quarter = T::lit(0.25);
                let mut g = vec![T::zero(); val(*a).numel()];
                for p in 0..nc {
                    for y in 0..h {
                        for x in 0..w {
                            let d = dy.data()[(p * h + y) * w + x] * quarter;
                            let i = (p * 2 * h + 2 * y) * 2 * w + 2 * x;
                            g[i] = d;
                            g[i + 1] = d;
                            g[i + 2 * w] = d;
                            g[i + 2 * w + 1] = d;
                        }
                    }
                }
                vec![(*a, Tensor::new(s.to_vec(), g)?)]
            }
            Op::Sum(a) => {
                let g = dy.item();
                vec![(*a, Tensor::full(val(*a).shape().to_vec(), g))]
            }
            Op::Mean(a) => {
                let g = dy.item() / T::lit(val(*a).numel() as f64);
                vec![(*a, Tensor::full(val(*a).shape().to_vec(), g))]
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let d = *y.shape().last().expect("non-empty");
                let mut g = vec![T::zero(); y.numel()];
                for ((gr, yr), dr) in g.chunks_mut(d).zip(y.data().chunks(d)).zip(dy.data().chunks(d)) {
                    let dot = yr.iter().zip(dr).fold(T::zero(), |acc, (&yv, &dv)| acc + yv * dv);
                    for j in 0..d {
                        gr[j] = yr[j] * (dr[j] - dot);
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), g)?)]
            }
            Op::MatMul(a, b) => {
                let dims = MatmulDims::new(val(*a).shape(), val(*b).shape())?;
                let mut res = Vec::new();
                if need(*a) {
                    let mut da = vec![T::zero(); val(*a).numel()];
                    for i in 0..dims.batch {
                        gemm(
                            &dy.data()[i * dims.m * dims.n..],
                            MatView::row_major(dims.m, dims.n),
                            &val(*b).data()[dims.b_offset(i)..],
                            MatView::transposed(dims.k, dims.n),
                            T::zero(),
                            &mut da[i * dims.m * dims.k..(i + 1) * dims.m * dims.k],
                            MatView::row_major(dims.m, dims.k),
                        );
                    }
                    res.push((*a, Tensor::new(val(*a).shape().to_vec(), da)?));
                }
                if need(*b) {
                    let mut db = vec![T::zero(); val(*b).numel()];
                    for i in 0..dims.batch {
                        let off = dims.b_offset(i);
                        // Shared `b` accumulates over the batch in batch order.
                        let beta = if dims.b_shared { T::one() } else { T::zero() };
                        gemm(
                            &val(*a).data()[i * dims.m * dims.k..],
                            MatView::transposed(dims.m, dims.k),
                            &dy.data()[i * dims.m * dims.n..],
                            MatView::row_major(dims.m, dims.n),
                            beta,
                            &mut db[off..off + dims.k * dims.n],
                            MatView::row_major(dims.k, dims.n),
                        );
                    }
                    res.push((*b, Tensor::new(val(*b).shape().to_vec(), db)?));
                }
                res
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let g = conv2d_backward(
                    val(*x),
                    val(*w),
                    *stride,
                    *pad,
                    dy,
                    cols.as_deref(),
                    need(*x),
                    need(*w),
                    b.map(need).unwrap_or(false),
                )?;
                let mut res = Vec::new();
                if let Some(dx) = g.dx {
                    res.push((*x, dx));
                }
                if let Some(dw) = g.dw {
                    res.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    res.push((*b, db));
                }
                res
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let s = val(*x).shape();
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let cpg = c / groups;
                let per_group = cpg * inner;
                let xv = val(*x).data();
                let gv = val(*gamma).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let count = T::lit(per_group as f64);
                for gi in 0..xv.len() / per_group {
                    let g = gi % groups;
                    let (m, r) = (mean[gi], rstd[gi]);
                    let base = gi * per_group;
                    let mut sum_dyh = T::zero();
                    let mut sum_dyh_xh = T::zero();
                    for ci in 0..cpg {
                        let ch = g * cpg + ci;
                        let off = base + ci * inner;
                        let (mut dg, mut db) = (T::zero(), T::zero());
                        for (&xv, &d) in xv[off..off + inner].iter().zip(&dy.data()[off..off + inner]) {
                            let xh = (xv - m) * r;
                            dg += d * xh;
                            db += d;
                        }
                        dgamma[ch] += dg;
                        dbeta[ch] += db;
                        sum_dyh += db * gv[ch];
                        sum_dyh_xh += dg * gv[ch];
                    }
                    let mean_dyh = sum_dyh / count;
                    let mean_dyh_xh = sum_dyh_xh / count;
                    for ci in 0..cpg {
                        let ch = g * cpg + ci;
                        let off = base + ci * inner;
                        for j in off..off + inner {
                            let xh = (xv[j] - m) * r;
                            dx[j] = r * (dy.data()[j] * gv[ch] - mean_dyh - xh * mean_dyh_xh);
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(s.to_vec(), dx)?),
                    (*gamma, Tensor::new(vec![c], dgamma)?),
                    (*beta, Tensor::new(vec![c], dbeta)?),
                ]
            }
            Op::Embedding { table, indices } => {
                let s = val(*table).shape();
                let d = s[1];
                let mut g = vec![T::zero(); val(*table).numel()];
                for (row, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        g[idx * d + j] += dy.data()[row * d + j];
                    }
                }
                vec![(*table, Tensor::new(s.to_vec(), g)?)]
            }
            Op::Mse(a, b) => {
                let scale = dy.item() * T::lit(2.0 / val(*a).numel() as f64);
                let da = val(*a).zip_map(val(*b), |x, y| (x - y) * scale)?;
                let db = da.map(|v| -v);
                vec![(*a, da), (*b, db)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = val(*logits).shape()[1];
                let scale = dy.item() / T::lit(labels.len() as f64);
                let mut g = probs.clone();
                for (row, &l) in g.chunks_mut(k).zip(labels) {
                    row[l] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![(*logits, Tensor::new(val(*logits).shape().to_vec(), g)?)]
            }
        };
        Ok(out)
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn transpose_last2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = t.numel() / (r * c);
    let mut out = vec![T::zero(); t.numel()];
    for b in 0..batch {
        let src = &t.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Tensor::new(shape, out).expect("same element count")
}

/// Effective strides of `b` when broadcast onto shape `a` (0 on broadcast axes).
fn broadcast_strides(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if b.len() > a.len() {
        return Err(Error::shape("broadcast_add", format!("{b:?} has more dims than {a:?}")));
    }
    let lead = a.len() - b.len();
    let mut strides = vec![0; a.len()];
    let mut stride = 1;
    for i in (0..b.len()).rev() {
        let (ad, bd) = (a[lead + i], b[i]);
        if bd == ad {
            strides[lead + i] = if bd == 1 { 0 } else { stride };
        } else if bd != 1 {
            return Err(Error::shape(
                "broadcast_add",
                format!("cannot broadcast {b:?} onto {a:?}"),
            ));
        }
        stride *= bd;
    }
    Ok(strides)
}

/// Calls `f(i, j)` for each flat index `i` of shape `a`, with `j` the
/// corresponding flat index into the broadcast operand.
fn for_each_broadcast(a: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = a.iter().product();
    // Innermost contiguous run shares a stride, so iterate it directly.
    let last = a.len() - 1;
    let run = a[last];
    let run_stride = strides[last];
    let mut idx = vec![0usize; a.len()];
    let mut i = 0;
    while i < total {
        let base: usize = idx[..last].iter().zip(strides).map(|(&x, &s)| x * s).sum();
        for r in 0..run {
            f(i + r, base + r * run_stride);
        }
        i += run;
        for d in (0..last).rev() {
            idx[d] += 1;
            if idx[d] < a[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
    out_batch: Option<usize>,
}

impl MatmulDims {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || Error::shape("matmul", format!("{a:?} x {b:?}"));
        let (batch, m, k, out_batch) = match a.len() {
            2 => (1, a[0], a[1], None),
            3 => (a[0], a[1], a[2], Some(a[0])),
            _ => return Err(err()),
        };
        let (b_shared, kb, n) = match (b.len(), out_batch) {
            (2, _) => (true, b[0], b[1]),
            (3, Some(bt)) if b[0] == bt => (false, b[1], b[2]),
            _ => return Err(err()),
        };
        if kb != k {
            return Err(err());
        }
        Ok(MatmulDims {
            batch,
            m,
            k,
            n,
            b_shared,
            out_batch,
        })
    }

    fn b_offset(&self, i: usize) -> usize {
        if self.b_shared {
            0
        } else {
            i * self.k * self.n
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        match self.out_batch {
            Some(b) => vec![b, self.m, self.n],
            None => vec![self.m, self.n],
        }
    }
}
