//! Reverse-mode differentiation over a linear tape of 2-D values.
//!
//! A [`Graph`] records every primitive as it is evaluated. Parameters are bound
//! lazily from a [`ParamSet`] by name, so parameters a loss never touches are
//! absent from the gradient map. Gradients are accumulated in tape order with
//! a single accumulator per node, which keeps results bit-reproducible.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::{Component, ParamSet};
use crate::tensor::{hash_keys, unit_f64, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which bound parameters receive gradients.
pub enum GradSelect<'a> {
    /// Parameters whose `trainable` flag is set.
    Trainable,
    All,
    Custom(Box<dyn Fn(&str, Component) -> bool + 'a>),
}

impl GradSelect<'_> {
    fn wants(&self, name: &str, component: Component, trainable: bool) -> bool {
        match self {
            GradSelect::Trainable => trainable,
            GradSelect::All => true,
            GradSelect::Custom(f) => f(name, component),
        }
    }
}

/// Dropout keyed by `(seed, step, sample, site)`; masks are pure functions of
/// those counters.
#[derive(Clone, Copy, Debug)]
pub struct DropoutCtx {
    pub rate: f64,
    pub seed: u64,
    pub step: u64,
    pub sample: u64,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulCol { x: Var, w: Var, col: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Dropout { x: Var, mask: Vec<T> },
    MaskedMse { pred: Var, target: Vec<T>, mask: Vec<T>, denom: T },
    Sum(Var),
}

struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    needs_grad: bool,
}

pub type Grads<T> = BTreeMap<String, Tensor<T>>;

pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    params: &'p ParamSet<T>,
    bound: HashMap<String, Var>,
    select: GradSelect<'p>,
    dropout: Option<DropoutCtx>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>, select: GradSelect<'p>) -> Self {
        Self {
            nodes: Vec::new(),
            params,
            bound: HashMap::new(),
            select,
            dropout: None,
        }
    }

    pub fn with_dropout(mut self, ctx: Option<DropoutCtx>) -> Self {
        self.dropout = ctx.filter(|c| c.rate > 0.0);
        self
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite value produced");
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "constant",
                format!("[{rows}, {cols}] needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(self.push(data, rows, cols, Op::Leaf, false))
    }

    /// Bind a named parameter (once per graph) and return its node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = self
            .params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let (r, c) = entry.tensor.matrix_dims()?;
        let needs = self.select.wants(name, entry.component, entry.trainable);
        let v = self.push(entry.tensor.data().to_vec(), r, c, Op::Leaf, needs);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bj) in row.iter_mut().zip(brow) {
                    *o = *o + aip * bj;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, m, n, Op::MatMul(a, b), ng))
    }

    /// `a @ b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_bt", format!("[{m}, {k}] x [{n}, {k2}]^T")));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc = acc + x * y;
                }
                out[i * n + j] = acc;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, m, n, Op::MatMulBt(a, b), ng))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: Op<T>) -> Result<Var> {
        let (r, c) = self.same_dims(op, a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, r, c, mk, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[m, n] + row[1, n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(row) != (1, n) {
            return Err(Error::shape("add_row", format!("[{m}, {n}] + {:?}", self.dims(row))));
        }
        let xv = &self.nodes[x.0].value;
        let rv = &self.nodes[row.0].value;
        let out = xv.iter().enumerate().map(|(i, &v)| v + rv[i % n]).collect();
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, m, n, Op::AddRow(x, row), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let (r, c) = self.dims(x);
        let out = self.nodes[x.0].value.iter().map(|&v| v * s).collect();
        let ng = self.ng(x);
        self.push(out, r, c, Op::Scale(x, s), ng)
    }

    /// Scale row `i` of `x` by `w[i, col]`.
    pub fn mul_col(&mut self, x: Var, w: Var, col: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        let (wm, wn) = self.dims(w);
        if wm != m || col >= wn {
            return Err(Error::shape("mul_col", format!("[{m}, {n}] by column {col} of [{wm}, {wn}]")));
        }
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let s = wv[i * wn + col];
            out.extend(xv[i * n..(i + 1) * n].iter().map(|&v| v * s));
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(out, m, n, Op::MulCol { x, w, col }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gamma) != (1, n) || self.dims(beta) != (1, n) {
            return Err(Error::shape(
                "layer_norm",
                format!("input [{m}, {n}], gamma {:?}, beta {:?}", self.dims(gamma), self.dims(beta)),
            ));
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let nf = T::of(n as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            m,
            n,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Row-wise softmax. Entries with `mask[idx] == false` are exactly zero;
    /// a fully masked row is all zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(Error::shape("softmax", format!("mask of {} for [{m}, {n}]", mk.len())));
            }
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let keep = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let row = &xv[i * n..(i + 1) * n];
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    out[i * n + j] = e;
                    total = total + e;
                }
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o = *o / total;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, m, n, Op::Softmax(x), ng))
    }

    /// Row-wise softmax restricted to each row's `k` largest entries (ties to
    /// the lower index); all other weights are exactly zero.
    pub fn topk_softmax(&mut self, x: Var, k: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if k == 0 || k > n {
            return Err(Error::InvalidArgument(format!("top-k with k={k} over {n} entries")));
        }
        let xv = &self.nodes[x.0].value;
        let mut mask = vec![false; m * n];
        for i in 0..m {
            for j in topk_indices(&xv[i * n..(i + 1) * n], k) {
                mask[i * n + j] = true;
            }
        }
        self.softmax(x, Some(&mask))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, mk: Op<T>) -> Var {
        let (r, c) = self.dims(x);
        let out = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        self.push(out, r, c, mk, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// Rows of `x` selected by `idx` (embedding lookup when `x` is a table).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of [{m}, {n}]")));
        }
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        let ng = self.ng(x);
        Ok(self.push(out, idx.len(), n, Op::GatherRows { x, idx: idx.to_vec() }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(*parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Error::shape("concat_rows", format!("widths {n} and {c}")));
            }
            out.extend_from_slice(&self.nodes[p.0].value);
            rows += r;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, rows, n, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(*parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(Error::shape("concat_cols", format!("heights {m} and {r}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, m, n, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of width {n}", start + len)));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(out, m, len, Op::SliceCols { x, start }, ng))
    }

    /// Inverted dropout; identity when the graph has no dropout context.
    pub fn dropout(&mut self, x: Var, site: u64) -> Var {
        let Some(ctx) = self.dropout else { return x };
        let (r, c) = self.dims(x);
        let keep_scale = T::of(1.0 / (1.0 - ctx.rate));
        let base = hash_keys(&[ctx.seed, ctx.step, ctx.sample, site]);
        let mask: Vec<T> = (0..r * c)
            .map(|i| {
                if unit_f64(hash_keys(&[base, i as u64])) < ctx.rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let out = self.nodes[x.0].value.iter().zip(&mask).map(|(&v, &s)| v * s).collect();
        let ng = self.ng(x);
        self.push(out, r, c, Op::Dropout { x, mask }, ng)
    }

    /// Mean of `mask * (pred - target)^2` over unmasked entries.
    pub fn masked_mse(&mut self, pred: Var, target: &[T], mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims(pred);
        if target.len() != m * n || mask.len() != m * n {
            return Err(Error::shape(
                "masked_mse",
                format!("pred [{m}, {n}], target {}, mask {}", target.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::AllMasked);
        }
        let denom = T::of(count as f64);
        let mk: Vec<T> = mask.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        let pv = &self.nodes[pred.0].value;
        let mut total = T::zero();
        for i in 0..m * n {
            if mask[i] {
                let d = pv[i] - target[i];
                total = total + d * d;
            }
        }
        let ng = self.ng(pred);
        Ok(self.push(
            vec![total / denom],
            1,
            1,
            Op::MaskedMse {
                pred,
                target: target.to_vec(),
                mask: mk,
                denom,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].value.iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(vec![total], 1, 1, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Back-propagate from a scalar node and return gradients of every bound
    /// parameter selected for differentiation, keyed by name and shaped like
    /// the parameter.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss(vec![r, c]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if !self.ng(v) {
                continue;
            }
            let shape = self.params.tensor(name)?.shape().to_vec();
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            out.insert(name.clone(), Tensor::new(shape, g)?);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let n = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !n[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (n[a.0].rows, n[a.0].cols);
                let nn = n[b.0].cols;
                let (av, bv) = (&n[a.0].value, &n[b.0].value);
                acc(*a, &mut |da| {
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let brow = &bv[p * nn..(p + 1) * nn];
                            let mut s = T::zero();
                            for (&x, &y) in grow.iter().zip(brow) {
                                s = s + x * y;
                            }
                            da[i * k + p] = da[i * k + p] + s;
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let drow = &mut db[p * nn..(p + 1) * nn];
                            for (d, &x) in drow.iter_mut().zip(grow) {
                                *d = *d + aip * x;
                            }
                        }
                    }
                });
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (n[a.0].rows, n[a.0].cols);
                let nn = n[b.0].rows;
                let (av, bv) = (&n[a.0].value, &n[b.0].value);
                acc(*a, &mut |da| {
                    for i in 0..m {
                        for j in 0..nn {
                            let s = g[i * nn + j];
                            let brow = &bv[j * k..(j + 1) * k];
                            for (d, &y) in da[i * k..(i + 1) * k].iter_mut().zip(brow) {
                                *d = *d + s * y;
                            }
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..nn {
                            let s = g[i * nn + j];
                            for (d, &x) in db[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *d = *d + s * x;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x = *x - y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&n[a.0].value, &n[b.0].value);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * av[i];
                    }
                });
            }
            Op::AddRow(x, row) => {
                let nc = n[x.0].cols;
                acc(*x, &mut |d| add_into(d, g));
                acc(*row, &mut |d| {
                    for (i, &v) in g.iter().enumerate() {
                        d[i % nc] = d[i % nc] + v;
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |d| {
                    for (o, &v) in d.iter_mut().zip(g) {
                        *o = *o + v * *s;
                    }
                });
            }
            Op::MulCol { x, w, col } => {
                let (m, nc) = (n[x.0].rows, n[x.0].cols);
                let wn = n[w.0].cols;
                let (xv, wv) = (&n[x.0].value, &n[w.0].value);
                acc(*x, &mut |d| {
                    for i in 0..m {
                        let s = wv[i * wn + col];
                        for j in 0..nc {
                            d[i * nc + j] = d[i * nc + j] + g[i * nc + j] * s;
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for i in 0..m {
                        let mut s = T::zero();
                        for j in 0..nc {
                            s = s + g[i * nc + j] * xv[i * nc + j];
                        }
                        d[i * wn + col] = d[i * wn + col] + s;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, nc) = (n[x.0].rows, n[x.0].cols);
                let gv = &n[gamma.0].value;
                let nf = T::of(nc as f64);
                acc(*x, &mut |d| {
                    for i in 0..m {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..nc {
                            let dh = g[i * nc + j] * gv[j];
                            mean_d = mean_d + dh;
                            mean_dx = mean_dx + dh * xhat[i * nc + j];
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for j in 0..nc {
                            let dh = g[i * nc + j] * gv[j];
                            d[i * nc + j] =
                                d[i * nc + j] + inv_std[i] * (dh - mean_d - xhat[i * nc + j] * mean_dx);
                        }
                    }
                });
                acc(*gamma, &mut |d| {
                    for i in 0..m * nc {
                        d[i % nc] = d[i % nc] + g[i] * xhat[i];
                    }
                });
                acc(*beta, &mut |d| {
                    for i in 0..m * nc {
                        d[i % nc] = d[i % nc] + g[i];
                    }
                });
            }
            Op::Softmax(x) => {
                let (m, nc) = (node.rows, node.cols);
                let y = &node.value;
                acc(*x, &mut |d| {
                    for i in 0..m {
                        let r = i * nc..(i + 1) * nc;
                        let dot: T = y[r.clone()].iter().zip(&g[r.clone()]).map(|(&a, &b)| a * b).sum();
                        for j in r {
                            d[j] = d[j] + y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = &n[x.0].value;
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] > T::zero() {
                            d[i] = d[i] + g[i];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &n[x.0].value;
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let nc = node.cols;
                acc(*x, &mut |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..nc {
                            d[src * nc + j] = d[src * nc + j] + g[r * nc + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = n[p.0].value.len();
                    acc(p, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (node.rows, node.cols);
                let mut start = 0;
                for &p in parts {
                    let w = n[p.0].cols;
                    acc(p, &mut |d| {
                        for i in 0..m {
                            for j in 0..w {
                                d[i * w + j] = d[i * w + j] + g[i * total + start + j];
                            }
                        }
                    });
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, w) = (node.rows, node.cols);
                let nc = n[x.0].cols;
                acc(*x, &mut |d| {
                    for i in 0..m {
                        for j in 0..w {
                            d[i * nc + start + j] = d[i * nc + start + j] + g[i * w + j];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * mask[i];
                    }
                });
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                denom,
            } => {
                let pv = &n[pred.0].value;
                let two = T::of(2.0);
                acc(*pred, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[0] * two * mask[i] * (pv[i] - target[i]) / *denom;
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |d| {
                    for o in d.iter_mut() {
                        *o = *o + g[0];
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Indices of the `k` largest values; ties resolve to the lower index.
pub fn topk_indices<T: Scalar>(values: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Accumulates per-sample gradient maps in call order and averages them.
#[derive(Default)]
pub struct GradAccumulator<T: Scalar> {
    sum: Grads<T>,
    count: usize,
}

impl<T: Scalar> GradAccumulator<T> {
    pub fn new() -> Self {
        Self {
            sum: BTreeMap::new(),
            count: 0,
        }
    }

    pub fn add(&mut self, grads: Grads<T>) {
        self.count += 1;
        for (name, g) in grads {
            match self.sum.get_mut(&name) {
                Some(s) => add_into(s.data_mut(), g.data()),
                None => {
                    self.sum.insert(name, g);
                }
            }
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(mut self) -> Grads<T> {
        if self.count > 1 {
            let inv = T::one() / T::of(self.count as f64);
            for g in self.sum.values_mut() {
                for v in g.data_mut() {
                    *v = *v * inv;
                }
            }
        }
        self.sum
    }
}

/// Evaluate `loss_fn` on a fresh graph and return the loss with gradients of
/// every selected parameter it touched.
pub fn forward_backward<'p, T: Scalar>(
    params: &'p ParamSet<T>,
    select: GradSelect<'p>,
    dropout: Option<DropoutCtx>,
    loss_fn: impl FnOnce(&mut Graph<'p, T>) -> Result<Var>,
) -> Result<(T, Grads<T>)> {
    let mut g = Graph::new(params, select).with_dropout(dropout);
    let loss = loss_fn(&mut g)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss)[0], grads))
}

/// Largest relative error between analytic gradients and central finite
/// differences, `|a - n| / max(1, |n|)`, over every coordinate of every
/// parameter selected by `select`.
pub fn grad_check(
    params: &ParamSet<f64>,
    eps: f64,
    loss_fn: impl Fn(&mut Graph<'_, f64>) -> Result<Var>,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("grad_check eps must be positive, got {eps}")));
    }
    let (_, analytic) = forward_backward(params, GradSelect::All, None, |g| loss_fn(g))?;
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new(p, GradSelect::All);
        let l = loss_fn(&mut g)?;
        Ok(g.value(l)[0])
    };
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for (name, grad) in &analytic {
        for i in 0..grad.numel() {
            let orig = work.tensor(name)?.data()[i];
            work.get_mut(name).unwrap().tensor.data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().tensor.data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_tensor;

    fn one_param(name: &str, shape: &[usize], data: Vec<f64>) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::new(shape.to_vec(), data).unwrap(), Component::Backbone);
        p
    }

    #[test]
    fn square_has_derivative_two_w() {
        let p = one_param("w", &[1], vec![3.0]);
        let (loss, grads) = forward_backward(&p, GradSelect::All, None, |g| {
            let w = g.param("w")?;
            g.mul(w, w)
        })
        .unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(grads["w"].data(), &[6.0]);
    }

    #[test]
    fn exact_fit_has_zero_gradient() {
        let p = one_param("W", &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let (loss, grads) = forward_backward(&p, GradSelect::All, None, |g| {
            let w = g.param("W")?;
            let x = g.constant(1, 2, vec![1.0, 2.0])?;
            let y = g.matmul(x, w)?;
            g.masked_mse(y, &[1.0, 2.0], &[true, true])
        })
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads["W"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w1", normal_tensor(&[3, 5], 0.5, 3, "w1"), Component::Backbone);
        p.insert("b1", normal_tensor(&[5], 0.5, 3, "b1"), Component::Backbone);
        p.insert("w2", normal_tensor(&[5, 2], 0.5, 3, "w2"), Component::Backbone);
        let p = p.cast::<f64>();
        let x: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let err = grad_check(&p, 1e-5, |g| {
            let xv = g.constant(4, 3, x.clone())?;
            let w1 = g.param("w1")?;
            let b1 = g.param("b1")?;
            let w2 = g.param("w2")?;
            let h = g.matmul(xv, w1)?;
            let h = g.add_row(h, b1)?;
            let h = g.gelu(h);
            let y = g.matmul(h, w2)?;
            let y = g.tanh(y);
            g.masked_mse(y, &[0.1; 8], &[true; 8])
        })
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn primitives_pass_grad_check() {
        let mut p = ParamSet::<f32>::new();
        p.insert("a", normal_tensor(&[3, 4], 1.0, 9, "a"), Component::Backbone);
        p.insert("b", normal_tensor(&[3, 4], 1.0, 9, "b"), Component::Backbone);
        p.insert("g", normal_tensor(&[4], 1.0, 9, "g"), Component::Backbone);
        p.insert("t", normal_tensor(&[5, 4], 1.0, 9, "t"), Component::Backbone);
        let p = p.cast::<f64>();
        let mask = [true, false, true, true, true, true, false, true, true, true, true, false];
        let err = grad_check(&p, 1e-5, |g| {
            let a = g.param("a")?;
            let b = g.param("b")?;
            let gm = g.param("g")?;
            let t = g.param("t")?;
            let ln = g.layer_norm(a, gm, gm)?;
            let s = g.softmax(b, Some(&mask))?;
            let k = g.topk_softmax(a, 2)?;
            let m = g.mul(ln, s)?;
            let m = g.sub(m, k)?;
            let e = g.gather_rows(t, &[4, 0, 4])?;
            let sc = g.matmul_bt(m, e)?;
            let left = g.slice_cols(sc, 0, 2)?;
            let right = g.slice_cols(sc, 1, 2)?;
            let cat = g.concat_cols(&[left, right])?;
            let rows = g.concat_rows(&[cat, m])?;
            let w = g.softmax(rows, None)?;
            let mc = g.mul_col(rows, w, 1)?;
            let r = g.relu(mc);
            let sc2 = g.scale(r, 0.7);
            let y = g.add(sc2, mc)?;
            g.masked_mse(y, &vec![0.2; 24], &vec![true; 24])
        })
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let p = ParamSet::<f32>::new();
        let mut g = Graph::new(&p, GradSelect::All);
        let x = g.constant(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let shifted = g.constant(2, 3, vec![101.0, 102.0, 103.0, 95.0, 100.0, 105.0]).unwrap();
        let s = g.softmax(x, None).unwrap();
        let s2 = g.softmax(shifted, None).unwrap();
        for r in 0..2 {
            let row = &g.value(s)[r * 3..r * 3 + 3];
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        for (a, b) in g.value(s).iter().zip(g.value(s2)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fully_masked_softmax_row_is_zero() {
        let p = ParamSet::<f64>::new();
        let mut g = Graph::new(&p, GradSelect::All);
        let x = g.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let s = g.softmax(x, Some(&[false, false])).unwrap();
        assert_eq!(g.value(s), &[0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let p = ParamSet::<f32>::new();
        let mut g = Graph::new(&p, GradSelect::All);
        let a = g.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = g.constant(2, 3, vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn untouched_and_frozen_params_are_absent() {
        let mut p = ParamSet::<f64>::new();
        p.insert("used", Tensor::new(vec![1], vec![2.0]).unwrap(), Component::Backbone);
        p.insert("frozen", Tensor::new(vec![1], vec![2.0]).unwrap(), Component::Router);
        p.insert("unused", Tensor::new(vec![1], vec![2.0]).unwrap(), Component::Backbone);
        p.get_mut("frozen").unwrap().trainable = false;
        let (_, grads) = forward_backward(&p, GradSelect::Trainable, None, |g| {
            let u = g.param("used")?;
            let f = g.param("frozen")?;
            let y = g.mul(u, f)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert_eq!(grads.keys().collect::<Vec<_>>(), vec!["used"]);
    }

    #[test]
    fn dropout_is_deterministic_and_keyed() {
        let p = ParamSet::<f32>::new();
        let ctx = DropoutCtx {
            rate: 0.5,
            seed: 1,
            step: 2,
            sample: 0,
        };
        let run = |ctx: DropoutCtx| {
            let mut g = Graph::new(&p, GradSelect::All).with_dropout(Some(ctx));
            let x = g.constant(4, 8, vec![1.0; 32]).unwrap();
            let y = g.dropout(x, 3);
            g.value(y).to_vec()
        };
        assert_eq!(run(ctx), run(ctx));
        assert_ne!(run(ctx), run(DropoutCtx { step: 3, ..ctx }));
        assert!(run(ctx).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn topk_indices_break_ties_low() {
        assert_eq!(topk_indices(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(topk_indices(&[5.0, 5.0, 5.0], 1), vec![0]);
    }

    #[test]
    fn grad_check_rejects_nonpositive_eps() {
        let p = one_param("w", &[1], vec![1.0]);
        assert!(grad_check(&p, 0.0, |g| g.param("w")).is_err());
    }
}
