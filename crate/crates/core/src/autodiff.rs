//! Reverse-mode differentiation over an eagerly evaluated tape.
//!
//! A [`Graph`] borrows an immutable [`ParamStore`]; every operation computes
//! its value immediately and appends a node. [`Graph::backward`] walks the
//! nodes in reverse insertion order, which is a valid reverse topological
//! order because inputs always precede their consumers. A parameter used by
//! several operations (a reused block, say) is a single node, so adjoints
//! from every use accumulate into the same gradient slot.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax(Var),
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Dropout {
        x: Var,
        mask: Tensor,
    },
    /// Scalar output whose gradient with respect to `x` was computed during
    /// the forward pass (used by the CTC and cross-entropy losses).
    Linearized {
        x: Var,
        jacobian: Tensor,
    },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Tape of primitive applications.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of a backward pass.
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    vars: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter; `None` if the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for an input variable created with [`Graph::input`].
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.vars.get(v.0).and_then(Option::as_ref)
    }

    /// Dense per-parameter gradients, zero-filled where the loss is independent.
    pub fn into_dense(self, store: &ParamStore) -> Vec<Tensor> {
        self.params
            .into_iter()
            .zip(store.iter())
            .map(|(g, (_, _, p))| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Differentiable leaf whose gradient is reported by [`Gradients::var`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |p, q| p + q);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |p, q| p - q);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |p, q| p * q);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.value(a).dims2()?;
        if self.value(row).numel() != n {
            return Err(Error::Dimension(format!(
                "add_row: row of {} values for {n} columns",
                self.value(row).numel()
            )));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// `x·w + b` for `x: m×k`, `w: k×n`, `b: n`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Normalizes each row of an `m×n` matrix, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Dimension(format!(
                "layer_norm: gain/bias must have {n} values"
            )));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Tensor::zeros(&[m, n]);
        let mut out = Tensor::zeros(&[m, n]);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let xh = xhat.row(i).to_vec();
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = xh[j] * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Log-softmax along `axis`, stabilized by subtracting the maximum.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "log_softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|k| (src[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[at(k)] = src[at(k)] - lse;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::LogSoftmax {
                x,
                outer,
                len,
                inner,
            },
            ng,
        ))
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Dimension(format!(
                "gather index {bad} out of range for {} values",
                src.len()
            )));
        }
        let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Gather { x, index }, ng))
    }

    /// Rows of a table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (nrows, n) = self.value(table).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(Error::Input(format!("row {bad} out of range for {nrows} rows")));
        }
        let index: Rc<[usize]> = rows
            .iter()
            .flat_map(|&r| (r * n)..(r * n + n))
            .collect();
        self.gather(table, index, vec![rows.len(), n])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start + width > n || width == 0 {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} of {n} columns",
                start + width
            )));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&src.row(i)[start..start + width]);
        }
        let out = Tensor::new(vec![m, width], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let (m, _) = self.value(first).dims2()?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::Dimension("concat_cols row mismatch".into()));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Inverted dropout. Rate 0 returns `x` untouched without recording a node.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.value(x).shape().to_vec();
        let mask_data: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new(shape, mask_data)?;
        let out = {
            let xv = self.value(x);
            let d = xv.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
            Tensor::new(xv.shape().to_vec(), d)?
        };
        let ng = self.ng(x);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// Records a scalar-valued function of `x` whose gradient is already known.
    pub fn linearized(&mut self, x: Var, value: f64, jacobian: Tensor) -> Result<Var> {
        if jacobian.shape() != self.value(x).shape() {
            return Err(Error::Dimension("jacobian shape differs from input".into()));
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(value), Op::Linearized { x, jacobian }, ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut param_grads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    adj[idx] = Some(g);
                }
                Op::Param(id) => {
                    param_grads[id.0] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims2()?;
                    let n = bv.cols();
                    if self.ng(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                        accumulate(&mut adj, *a, Tensor::new(vec![m, k], da)?);
                    }
                    if self.ng(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                        accumulate(&mut adj, *b, Tensor::new(vec![k, n], db)?);
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut adj, *a, g.transpose()?);
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut adj, *b, g.clone());
                    }
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut adj, *b, g.map(|v| -v));
                    }
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut adj, *a, hadamard(&g, self.value(*b)));
                    }
                    if self.ng(*b) {
                        accumulate(&mut adj, *b, hadamard(&g, self.value(*a)));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let n = g.cols();
                        let mut dr = vec![0.0; n];
                        for chunk in g.data().chunks(n) {
                            for (d, v) in dr.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                        let shape = self.value(*row).shape().to_vec();
                        accumulate(&mut adj, *row, Tensor::new(shape, dr)?);
                    }
                    accumulate(&mut adj, *a, g);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut adj, *a, g.map(|v| v * s));
                }
                Op::Relu(a) => {
                    let xv = self.value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (m, n) = xhat.dims2()?;
                    let gv = self.value(*gain).data();
                    if self.ng(*gain) || self.ng(*bias) {
                        let mut dg = vec![0.0; n];
                        let mut db = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                dg[j] += g.at(i, j) * xhat.at(i, j);
                                db[j] += g.at(i, j);
                            }
                        }
                        let gs = self.value(*gain).shape().to_vec();
                        let bs = self.value(*bias).shape().to_vec();
                        accumulate(&mut adj, *gain, Tensor::new(gs, dg)?);
                        accumulate(&mut adj, *bias, Tensor::new(bs, db)?);
                    }
                    if self.ng(*x) {
                        let mut dx = Tensor::zeros(&[m, n]);
                        for i in 0..m {
                            let dxh: Vec<f64> = (0..n).map(|j| g.at(i, j) * gv[j]).collect();
                            let xh = xhat.row(i);
                            let mean_d = dxh.iter().sum::<f64>() / n as f64;
                            let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>()
                                / n as f64;
                            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                                *o = inv_std[i] * (dxh[j] - mean_d - xh[j] * mean_dx);
                            }
                        }
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::LogSoftmax {
                    x,
                    outer,
                    len,
                    inner,
                } => {
                    let y = self.value(Var(idx)).data();
                    let gd = g.data();
                    let mut dx = vec![0.0; gd.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let total: f64 = (0..*len).map(|k| gd[at(k)]).sum();
                            for k in 0..*len {
                                dx[at(k)] = gd[at(k)] - y[at(k)].exp() * total;
                            }
                        }
                    }
                    accumulate(&mut adj, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
                Op::Softmax(x) => {
                    let y = self.value(Var(idx));
                    let n = y.cols();
                    let mut dx = vec![0.0; y.numel()];
                    for ((yr, gr), dr) in y
                        .data()
                        .chunks(n)
                        .zip(g.data().chunks(n))
                        .zip(dx.chunks_mut(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut adj, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::Gather { x, index } => {
                    let shape = self.value(*x).shape().to_vec();
                    let mut dx = Tensor::zeros(&shape);
                    let d = dx.data_mut();
                    for (&i, v) in index.iter().zip(g.data()) {
                        d[i] += v;
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut adj, *x, g.reshape(shape)?);
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = self.value(*x).dims2()?;
                    let w = g.cols();
                    let mut dx = Tensor::zeros(&[m, n]);
                    for i in 0..m {
                        dx.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (m, w) = self.value(p).dims2()?;
                        if self.ng(p) {
                            let mut d = Vec::with_capacity(m * w);
                            for i in 0..m {
                                d.extend_from_slice(&g.row(i)[offset..offset + w]);
                            }
                            accumulate(&mut adj, p, Tensor::new(vec![m, w], d)?);
                        }
                        offset += w;
                    }
                }
                Op::Sum(x) => {
                    let gv = g.item()?;
                    accumulate(&mut adj, *x, Tensor::full(self.value(*x).shape(), gv));
                }
                Op::Dropout { x, mask } => {
                    accumulate(&mut adj, *x, hadamard(&g, mask));
                }
                Op::Linearized { x, jacobian } => {
                    let gv = g.item()?;
                    accumulate(&mut adj, *x, jacobian.map(|v| v * gv));
                }
            }
        }
        Ok(Gradients {
            params: param_grads,
            vars: adj,
        })
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), d).expect("matching shapes")
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
