//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node in an
//! append-only arena. Inputs always precede their consumers, so walking the
//! arena backwards from the loss visits each node once in reverse
//! topological order.
//!
//! Tape policy: [`Graph::backward`] does not consume or modify the graph.
//! It returns a fresh [`Gradients`] every call, so several losses recorded
//! on one graph can be differentiated independently. A graph is dropped
//! after its step; nothing carries over between steps.
//!
//! Parameters enter a graph through [`Graph::param`], which borrows the
//! tensor from the [`ParamStore`] instead of copying it. When a graph is
//! built with `track_params = false`, parameters are constants and the
//! backward pass skips all parameter-gradient work. That is the mode used
//! to compute gradients with respect to input embeddings only.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{kernels, real, Real, Tensor};
use crate::TokenId;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddN(Vec<Var>),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    AddConst(Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat(Vec<Var>, usize),
    SliceLast(Var, usize),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Vec<TokenId>),
    CrossEntropy {
        logits: Var,
        targets: Vec<TokenId>,
        pad: TokenId,
        probs: Tensor<T>,
        count: usize,
    },
    Sum(Var),
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    store: &'a ParamStore<T>,
    track_params: bool,
    param_vars: HashMap<ParamId, Var>,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>, track_params: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            store,
            track_params,
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn tracks_params(&self) -> bool {
        self.track_params
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked input whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The node for a stored parameter; created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store;
        let v = self.push_cow(
            Cow::Borrowed(store.get(id)),
            Op::Param,
            self.track_params,
        );
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self
            .value(b)
            .dims2()
            .map_err(|_| Error::shape("matmul", self.shape(a), self.shape(b)))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self
            .value(b)
            .dims2()
            .map_err(|_| Error::shape("matmul_nt", self.shape(a), self.shape(b)))?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a row vector to every row (leading-dimension broadcast only).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(a).last().unwrap_or(&0);
        if self.shape(bias) != [cols] {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    /// Sum of same-shaped tensors.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| Error::Contract("add_n of zero tensors".into()))?;
        let mut out = self.value(first).clone();
        for &v in &vars[1..] {
            if self.shape(v) != out.shape() {
                return Err(Error::shape("add_n", out.shape(), self.shape(v)));
            }
            out.add_assign(self.value(v));
        }
        let rg = self.rg(vars);
        Ok(self.push(out, Op::AddN(vars.to_vec()), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Elementwise product with an untracked tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape("mul_const", self.shape(a), c.shape()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(c.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MulConst(a, c), rg))
    }

    /// Adds an untracked tensor (attention masks, positional encodings).
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape("add_const", self.shape(a), c.shape()));
        }
        let mut out = self.value(a).clone();
        out.add_assign(c);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::AddConst(a), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::shape(op, self.shape(a), &[axis]));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let out = softmax_along(self.value(a), axis, false);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "log_softmax")?;
        let out = softmax_along(self.value(a), axis, true);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a, axis), rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / d.max(1);
        let dt: T = real(d as f64);
        let eps: T = real(eps);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_layout(&base, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let block = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat(parts.to_vec(), axis),
            rg,
        ))
    }

    /// Slice `[start, end)` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if start > end || end > d {
            return Err(Error::shape("slice_last", &shape, &[start, end]));
        }
        let mut out = Vec::with_capacity(self.value(a).len() / d.max(1) * (end - start));
        for row in self.value(a).data().chunks(d) {
            out.extend_from_slice(&row[start..end]);
        }
        let mut new_shape = shape;
        *new_shape.last_mut().expect("rank >= 1") = end - start;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::SliceLast(a, start), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Selects rows of a `[rows, cols]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[TokenId]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2()?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id as usize >= rows {
                return Err(Error::Vocabulary { id, size: rows });
            }
            out.extend_from_slice(tv.row(id as usize));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), cols], out)?,
            Op::GatherRows(table, ids.to_vec()),
            rg,
        ))
    }

    /// Mean token negative log-likelihood over positions whose target is not
    /// `pad`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[TokenId], pad: TokenId) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if n != targets.len() {
            return Err(Error::shape("cross_entropy", &[n, v], &[targets.len()]));
        }
        for &t in targets {
            if t as usize >= v {
                return Err(Error::Vocabulary { id: t, size: v });
            }
        }
        let count = targets.iter().filter(|&&t| t != pad).count();
        if count == 0 {
            return Err(Error::DegenerateInput(
                "cross_entropy target has no non-pad positions".into(),
            ));
        }
        let logp = softmax_along(self.value(logits), 1, true);
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t != pad {
                total -= logp.at(i, t as usize);
            }
        }
        let loss = total / real(count as f64);
        let probs = logp.map(|l| l.exp());
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of scalar nodes.
    pub fn mean_scalars(&mut self, vars: &[Var]) -> Result<Var> {
        let total = self.add_n(vars)?;
        Ok(self.scale(total, T::one() / real(vars.len() as f64)))
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &upstream, &mut grads)?;
            grads[i] = Some(upstream);
        }
        let params = self
            .param_vars
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect::<Vec<_>>();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(
        &self,
        node: &Node<'a, T>,
        dc: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).shape()[1];
                if rg(*a) {
                    let ga = slot(grads, *a, self.shape(*a));
                    kernels::gemm_nt(dc.data(), self.value(*b).data(), ga.data_mut(), m, n, k);
                }
                if rg(*b) {
                    let gb = slot(grads, *b, self.shape(*b));
                    kernels::gemm_tn(self.value(*a).data(), dc.data(), gb.data_mut(), m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).shape()[0];
                if rg(*a) {
                    let ga = slot(grads, *a, self.shape(*a));
                    kernels::gemm_nn(dc.data(), self.value(*b).data(), ga.data_mut(), m, n, k);
                }
                if rg(*b) {
                    let gb = slot(grads, *b, self.shape(*b));
                    kernels::gemm_tn(dc.data(), self.value(*a).data(), gb.data_mut(), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if rg(*v) {
                        slot(grads, *v, dc.shape()).add_assign(dc);
                    }
                }
            }
            Op::AddN(vs) => {
                for v in vs {
                    if rg(*v) {
                        slot(grads, *v, dc.shape()).add_assign(dc);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if rg(*a) {
                    slot(grads, *a, dc.shape()).add_assign(dc);
                }
                if rg(*bias) {
                    let cols = self.shape(*bias)[0];
                    let gb = slot(grads, *bias, &[cols]);
                    for row in dc.data().chunks(cols) {
                        for (g, &d) in gb.data_mut().iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let other = self.value(*b).data();
                    let ga = slot(grads, *a, dc.shape());
                    for ((g, &d), &o) in ga.data_mut().iter_mut().zip(dc.data()).zip(other) {
                        *g += d * o;
                    }
                }
                if rg(*b) {
                    let other = self.value(*a).data();
                    let gb = slot(grads, *b, dc.shape());
                    for ((g, &d), &o) in gb.data_mut().iter_mut().zip(dc.data()).zip(other) {
                        *g += d * o;
                    }
                }
            }
            Op::MulConst(a, c) => {
                if rg(*a) {
                    let ga = slot(grads, *a, dc.shape());
                    for ((g, &d), &o) in ga.data_mut().iter_mut().zip(dc.data()).zip(c.data()) {
                        *g += d * o;
                    }
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                if rg(*a) {
                    let shape = self.shape(*a).to_vec();
                    let ga = slot(grads, *a, &shape);
                    for (g, &d) in ga.data_mut().iter_mut().zip(dc.data()) {
                        *g += d;
                    }
                }
            }
            Op::Scale(a, s) => {
                if rg(*a) {
                    let ga = slot(grads, *a, dc.shape());
                    for (g, &d) in ga.data_mut().iter_mut().zip(dc.data()) {
                        *g += d * *s;
                    }
                }
            }
            Op::Relu(a) => {
                if rg(*a) {
                    let y = node.value.data();
                    let ga = slot(grads, *a, dc.shape());
                    for ((g, &d), &yv) in ga.data_mut().iter_mut().zip(dc.data()).zip(y) {
                        if yv > T::zero() {
                            *g += d;
                        }
                    }
                }
            }
            Op::Softmax(a, axis) => {
                if rg(*a) {
                    let y = &node.value;
                    let (outer, len, inner) = axis_layout(y.shape(), *axis);
                    let ga = slot(grads, *a, dc.shape());
                    let (yd, dd, gd) = (y.data(), dc.data(), ga.data_mut());
                    for o in 0..outer {
                        for inn in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + inn;
                            let dot: T = (0..len).map(|k| yd[idx(k)] * dd[idx(k)]).sum();
                            for k in 0..len {
                                gd[idx(k)] += yd[idx(k)] * (dd[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(a, axis) => {
                if rg(*a) {
                    let y = &node.value;
                    let (outer, len, inner) = axis_layout(y.shape(), *axis);
                    let ga = slot(grads, *a, dc.shape());
                    let (yd, dd, gd) = (y.data(), dc.data(), ga.data_mut());
                    for o in 0..outer {
                        for inn in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + inn;
                            let total: T = (0..len).map(|k| dd[idx(k)]).sum();
                            for k in 0..len {
                                gd[idx(k)] += dd[idx(k)] - yd[idx(k)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                if rg(*gain) {
                    let gg = slot(grads, *gain, &[d]);
                    for (row_d, row_h) in dc.data().chunks(d).zip(xhat.chunks(d)) {
                        for ((g, &dv), &h) in gg.data_mut().iter_mut().zip(row_d).zip(row_h) {
                            *g += dv * h;
                        }
                    }
                }
                if rg(*bias) {
                    let gb = slot(grads, *bias, &[d]);
                    for row_d in dc.data().chunks(d) {
                        for (g, &dv) in gb.data_mut().iter_mut().zip(row_d) {
                            *g += dv;
                        }
                    }
                }
                if rg(*x) {
                    let gain_v = self.value(*gain).data();
                    let dt: T = real(d as f64);
                    let gx = slot(grads, *x, dc.shape());
                    let mut dxhat = vec![T::zero(); d];
                    for (r, ((row_d, row_h), row_g)) in dc
                        .data()
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.data_mut().chunks_mut(d))
                        .enumerate()
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..d {
                            dxhat[j] = row_d[j] * gain_v[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * row_h[j];
                        }
                        mean_d = mean_d / dt;
                        mean_dh = mean_dh / dt;
                        for j in 0..d {
                            row_g[j] += rstd[r] * (dxhat[j] - mean_d - row_h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_layout(dc.shape(), *axis);
                let mut offset = 0;
                let total_block = dc.shape()[*axis] * inner;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let block = shape[*axis] * inner;
                    if rg(p) {
                        let gp = slot(grads, p, &shape);
                        for o in 0..outer {
                            let src = &dc.data()[o * total_block + offset..][..block];
                            for (g, &d) in gp.data_mut()[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(src)
                            {
                                *g += d;
                            }
                        }
                    }
                    offset += block;
                }
            }
            Op::SliceLast(a, start) => {
                if rg(*a) {
                    let shape = self.shape(*a).to_vec();
                    let d = *shape.last().expect("rank >= 1");
                    let w = *dc.shape().last().expect("rank >= 1");
                    let ga = slot(grads, *a, &shape);
                    for (grow, drow) in ga.data_mut().chunks_mut(d).zip(dc.data().chunks(w)) {
                        for (g, &dv) in grow[*start..*start + w].iter_mut().zip(drow) {
                            *g += dv;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if rg(*a) {
                    let t = dc.transpose2()?;
                    slot(grads, *a, t.shape()).add_assign(&t);
                }
            }
            Op::GatherRows(table, ids) => {
                if rg(*table) {
                    let shape = self.shape(*table).to_vec();
                    let gt = slot(grads, *table, &shape);
                    for (r, &id) in ids.iter().enumerate() {
                        for (g, &d) in gt.row_mut(id as usize).iter_mut().zip(dc.row(r)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
                count,
            } => {
                if rg(*logits) {
                    let up = dc.item() / real(*count as f64);
                    let gl = slot(grads, *logits, probs.shape());
                    for (i, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        let grow = gl.row_mut(i);
                        for (j, (g, &p)) in grow.iter_mut().zip(probs.row(i)).enumerate() {
                            let onehot = if j == t as usize { T::one() } else { T::zero() };
                            *g += up * (p - onehot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if rg(*a) {
                    let up = dc.item();
                    let shape = self.shape(*a).to_vec();
                    let ga = slot(grads, *a, &shape);
                    for g in ga.data_mut() {
                        *g += up;
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'g, T: Real>(
    grads: &'g mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
) -> &'g mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Softmax (or log-softmax) along `axis`, max-shifted for stability.
pub(crate) fn softmax_along<T: Real>(t: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, len, inner) = axis_layout(t.shape(), axis);
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for inn in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + inn;
            let mut max = T::neg_infinity();
            for k in 0..len {
                max = max.max(src[idx(k)]);
            }
            let mut total = T::zero();
            for k in 0..len {
                let e = (src[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            if log {
                let lse = total.ln();
                for k in 0..len {
                    out[idx(k)] = src[idx(k)] - max - lse;
                }
            } else {
                for k in 0..len {
                    out[idx(k)] = out[idx(k)] / total;
                }
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// Result of one reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` contributed to it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, or zeros of `shape` when `v` did not
    /// reach the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Parameter gradients, sorted by parameter id.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

/// Additive accumulator of parameter gradients across backward passes.
/// Reset with [`GradBuffer::zero`] between optimizer steps.
#[derive(Debug, Clone)]
pub struct GradBuffer<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Real> GradBuffer<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        GradBuffer {
            grads: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn accumulate(&mut self, g: &Gradients<T>) {
        for (id, t) in g.params() {
            self.grads[id.index()].add_assign(t);
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| {
                let f = v.to_f64().unwrap_or(f64::NAN);
                f * f
            })
            .sum::<f64>()
            .sqrt()
    }
}
