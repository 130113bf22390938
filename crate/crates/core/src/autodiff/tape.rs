//! Wengert tape: reverse-mode AD over dense `f64` tensors.
//!
//! Every operation appends one record holding its output value and whatever
//! the backward rule needs. A record participates in differentiation iff at
//! least one of its inputs does; [`Tape::stop_gradient`] records never do.
//! `backward` walks the records once, newest first.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, matmul_nn, matmul_nt, matmul_tn, sigmoid, softmax_row, SharedMask};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a record on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Detached,
    MatMul { a: usize, b: usize },
    AddBias { a: usize, bias: usize },
    MulRow { a: usize, gain: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Silu { a: usize },
    LayerNorm { a: usize, rstd: Vec<f64> },
    Sum { a: usize },
    Mse { a: usize, b: usize, row_weights: Option<Vec<f64>> },
    ConcatCols { a: usize, b: usize },
    InterleaveRows { a: usize, b: usize, groups: usize },
    SliceGroupRows { a: usize, groups: usize, start: usize },
    TileRows { a: usize, times: usize },
    RepeatRows { a: usize, times: usize },
    MaskedSoftmax { a: usize, mask: SharedMask },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        mask: SharedMask,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    grad_enabled: bool,
}

/// Operation record list for one forward/backward cycle.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the grad-enabled leaves it depends on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_leaf: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_leaf.get(&var.id)
    }

    pub fn contains(&self, var: Var) -> bool {
        self.by_leaf.contains_key(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.by_leaf.iter().map(|(k, v)| (*k, v))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::ForeignTensor { id: v.id });
        }
        Ok(&self.nodes[v.id])
    }

    fn idx(&self, v: Var) -> Result<usize> {
        self.node(v).map(|_| v.id)
    }

    fn push(&mut self, value: Tensor, op: Op, grad_enabled: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            grad_enabled,
        });
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    fn enabled(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].grad_enabled)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).expect("var from another tape").value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    pub fn grad_enabled(&self, v: Var) -> bool {
        self.node(v).map(|n| n.grad_enabled).unwrap_or(false)
    }

    /// Registers a leaf. Only leaves created with `grad_enabled` receive gradients.
    pub fn leaf(&mut self, value: Tensor, grad_enabled: bool) -> Var {
        self.push(value, Op::Leaf, grad_enabled)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Same values, no gradient flows back through the returned record.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.node(x)?.value.clone();
        Ok(self.push(value, Op::Detached, false))
    }

    fn mat_dims(&self, v: usize, op: &'static str) -> Result<(usize, usize)> {
        let s = self.nodes[v].value.shape();
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] @ [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(m, k, n, self.nodes[a].value.data(), self.nodes[b].value.data(), &mut out, false);
        let ge = self.enabled(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b }, ge))
    }

    /// `a[i, :] + bias` for every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (a, bias) = (self.idx(a)?, self.idx(bias)?);
        let (m, n) = self.mat_dims(a, "add_bias")?;
        if self.nodes[bias].value.numel() != n {
            return Err(shape_err("add_bias", format!("bias {:?} vs {n} columns", self.nodes[bias].value.shape())));
        }
        let b = self.nodes[bias].value.data();
        let mut out = self.nodes[a].value.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        let ge = self.enabled(&[a, bias]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddBias { a, bias }, ge))
    }

    /// `a[i, :] * gain` for every row.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        let (a, gain) = (self.idx(a)?, self.idx(gain)?);
        let (m, n) = self.mat_dims(a, "mul_row")?;
        if self.nodes[gain].value.numel() != n {
            return Err(shape_err("mul_row", format!("gain {:?} vs {n} columns", self.nodes[gain].value.shape())));
        }
        let g = self.nodes[gain].value.data();
        let mut out = self.nodes[a].value.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(g).for_each(|(o, gv)| *o *= gv);
        }
        let ge = self.enabled(&[a, gain]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MulRow { a, gain }, ge))
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok((a, b, Tensor::new(va.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, out) = self.elementwise(a, b, "add", |x, y| x + y)?;
        let ge = self.enabled(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, ge))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, out) = self.elementwise(a, b, "sub", |x, y| x - y)?;
        let ge = self.enabled(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, ge))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, out) = self.elementwise(a, b, "mul", |x, y| x * y)?;
        let ge = self.enabled(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, ge))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let v = &self.nodes[a].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * factor).collect())?;
        let ge = self.enabled(&[a]);
        Ok(self.push(out, Op::Scale { a, factor }, ge))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = &self.nodes[a].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * sigmoid(x)).collect())?;
        let ge = self.enabled(&[a]);
        Ok(self.push(out, Op::Silu { a }, ge))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let (m, n) = self.mat_dims(a, "layer_norm")?;
        let x = self.nodes[a].value.data();
        let mut out = vec![0.0; m * n];
        let mut rstd = Vec::with_capacity(m);
        for (xr, yr) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mean = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (y, v) in yr.iter_mut().zip(xr) {
                *y = (v - mean) * r;
            }
            rstd.push(r);
        }
        let ge = self.enabled(&[a]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::LayerNorm { a, rstd }, ge))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let s = self.nodes[a].value.data().iter().sum();
        let ge = self.enabled(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }, ge))
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.weighted_mse(a, b, None)
    }

    /// `sum_i w[row(i)] (a_i - b_i)^2 / numel`; `row_weights` has one entry per row.
    pub fn weighted_mse(&mut self, a: Var, b: Var, row_weights: Option<Vec<f64>>) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let cols = va.cols();
        if let Some(w) = &row_weights {
            if w.len() * cols != va.numel() {
                return Err(shape_err("mse", format!("{} row weights for shape {:?}", w.len(), va.shape())));
            }
        }
        let mut total = 0.0;
        for (i, (x, y)) in va.data().iter().zip(vb.data()).enumerate() {
            let w = row_weights.as_ref().map_or(1.0, |w| w[i / cols]);
            total += w * (x - y) * (x - y);
        }
        let loss = total / va.numel() as f64;
        let ge = self.enabled(&[a, b]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { a, b, row_weights }, ge))
    }

    /// `[a | b]` along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (m, n1) = self.mat_dims(a, "concat_cols")?;
        let (m2, n2) = self.mat_dims(b, "concat_cols")?;
        if m != m2 {
            return Err(shape_err("concat_cols", format!("{m} vs {m2} rows")));
        }
        let mut out = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            out.extend_from_slice(self.nodes[a].value.row(i));
            out.extend_from_slice(self.nodes[b].value.row(i));
        }
        let ge = self.enabled(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n1 + n2, out)?, Op::ConcatCols { a, b }, ge))
    }

    /// Per group `g`, stacks `a`'s rows of group `g` above `b`'s rows of group `g`.
    pub fn interleave_rows(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (ma, n) = self.mat_dims(a, "interleave_rows")?;
        let (mb, n2) = self.mat_dims(b, "interleave_rows")?;
        if n != n2 || groups == 0 || ma % groups != 0 || mb % groups != 0 {
            return Err(shape_err("interleave_rows", format!("[{ma},{n}] / [{mb},{n2}] in {groups} groups")));
        }
        let (ra, rb) = (ma / groups, mb / groups);
        let (da, db) = (self.nodes[a].value.data(), self.nodes[b].value.data());
        let mut out = Vec::with_capacity((ma + mb) * n);
        for g in 0..groups {
            out.extend_from_slice(&da[g * ra * n..(g + 1) * ra * n]);
            out.extend_from_slice(&db[g * rb * n..(g + 1) * rb * n]);
        }
        let ge = self.enabled(&[a, b]);
        Ok(self.push(Tensor::matrix(ma + mb, n, out)?, Op::InterleaveRows { a, b, groups }, ge))
    }

    /// Per group, keeps rows `start..start + len`.
    pub fn slice_group_rows(&mut self, a: Var, groups: usize, start: usize, len: usize) -> Result<Var> {
        let a = self.idx(a)?;
        let (m, n) = self.mat_dims(a, "slice_group_rows")?;
        if groups == 0 || m % groups != 0 || start + len > m / groups {
            return Err(shape_err("slice_group_rows", format!("{start}+{len} of [{m},{n}] in {groups} groups")));
        }
        let per = m / groups;
        let d = self.nodes[a].value.data();
        let mut out = Vec::with_capacity(groups * len * n);
        for g in 0..groups {
            let base = (g * per + start) * n;
            out.extend_from_slice(&d[base..base + len * n]);
        }
        let ge = self.enabled(&[a]);
        Ok(self.push(Tensor::matrix(groups * len, n, out)?, Op::SliceGroupRows { a, groups, start }, ge))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.slice_group_rows(a, 1, start, len)
    }

    /// Stacks `times` copies of the whole matrix.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let a = self.idx(a)?;
        let (m, n) = self.mat_dims(a, "tile_rows")?;
        let d = self.nodes[a].value.data();
        let mut out = Vec::with_capacity(times * m * n);
        for _ in 0..times {
            out.extend_from_slice(d);
        }
        let ge = self.enabled(&[a]);
        Ok(self.push(Tensor::matrix(times * m, n, out)?, Op::TileRows { a, times }, ge))
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let a = self.idx(a)?;
        let (m, n) = self.mat_dims(a, "repeat_rows")?;
        let v = &self.nodes[a].value;
        let mut out = Vec::with_capacity(times * m * n);
        for i in 0..m {
            for _ in 0..times {
                out.extend_from_slice(v.row(i));
            }
        }
        let ge = self.enabled(&[a]);
        Ok(self.push(Tensor::matrix(m * times, n, out)?, Op::RepeatRows { a, times }, ge))
    }

    /// Softmax of `[groups * queries, keys]` scores under `mask`.
    pub fn masked_softmax(&mut self, a: Var, mask: SharedMask) -> Result<Var> {
        let a = self.idx(a)?;
        let out = kernels::masked_softmax(&self.nodes[a].value, &mask)?;
        let ge = self.enabled(&[a]);
        Ok(self.push(out, Op::MaskedSoftmax { a, mask }, ge))
    }

    /// Multi-head scaled dot-product attention over `groups` independent
    /// sequences. `q`, `k`, `v` are `[groups * tokens, width]`, heads split
    /// the width into contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: SharedMask, heads: usize) -> Result<Var> {
        let (q, k, v) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        mask.check_rows()?;
        let (rows, width) = self.mat_dims(q, "attention")?;
        let n = mask.queries();
        if mask.keys() != n
            || heads == 0
            || width % heads != 0
            || rows % n != 0
            || self.nodes[k].value.shape() != self.nodes[q].value.shape()
            || self.nodes[v].value.shape() != self.nodes[q].value.shape()
        {
            return Err(shape_err(
                "attention",
                format!("q [{rows},{width}], {heads} heads, {}x{} mask", mask.queries(), mask.keys()),
            ));
        }
        let groups = rows / n;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.nodes[q].value.data(),
            self.nodes[k].value.data(),
            self.nodes[v].value.data(),
        );
        let mut probs = vec![0.0; groups * heads * n * n];
        let mut out = vec![0.0; rows * width];
        let mut scores = vec![0.0; n];
        for g in 0..groups {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..n {
                    let qi = &qd[(g * n + i) * width + col..][..dh];
                    for &j in mask.allowed(i) {
                        let kj = &kd[(g * n + j) * width + col..][..dh];
                        scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let p = &mut probs[((g * heads + h) * n + i) * n..][..n];
                    softmax_row(&scores, mask.allowed(i), p);
                    let oi = &mut out[(g * n + i) * width + col..][..dh];
                    for &j in mask.allowed(i) {
                        let vj = &vd[(g * n + j) * width + col..][..dh];
                        let pij = p[j];
                        oi.iter_mut().zip(vj).for_each(|(o, x)| *o += pij * x);
                    }
                }
            }
        }
        let ge = self.enabled(&[q, k, v]);
        Ok(self.push(
            Tensor::matrix(rows, width, out)?,
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                probs,
            },
            ge,
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every
    /// grad-enabled leaf reachable from it; unreachable leaves get no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        let lv = &self.nodes[root].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        if self.nodes[root].grad_enabled {
            grads[root] = Some(vec![1.0]);
        }
        let mut out = Gradients::default();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.grad_enabled {
                continue;
            }
            if let Op::Leaf = node.op {
                out.by_leaf.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop(node, &g, &mut grads);
        }
        Ok(out)
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Borrowed lazily so disabled inputs never allocate.
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[i].grad_enabled {
                return;
            }
            let buf = grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Detached => {}
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                let n = nodes[*b].value.cols();
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(*a, &mut |ga| matmul_nt(m, n, k, g, bv, ga, true));
                acc(*b, &mut |gb| matmul_tn(k, m, n, av, g, gb, true));
            }
            Op::AddBias { a, bias } => {
                let n = nodes[*a].value.cols();
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*bias, &mut |gb| {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::MulRow { a, gain } => {
                let n = nodes[*a].value.cols();
                let (av, gv) = (nodes[*a].value.data(), nodes[*gain].value.data());
                acc(*a, &mut |ga| {
                    for (gr, dr) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for j in 0..n {
                            gr[j] += dr[j] * gv[j];
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (ar, dr) in av.chunks_exact(n).zip(g.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += dr[j] * ar[j];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { a, factor } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y));
            }
            Op::Silu { a } => {
                let av = nodes[*a].value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        let s = sigmoid(av[i]);
                        ga[i] += g[i] * s * (1.0 + av[i] * (1.0 - s));
                    }
                });
            }
            Op::LayerNorm { a, rstd } => {
                let n = node.value.cols();
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for (r, ((gr, dr), yr)) in ga
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                        .enumerate()
                    {
                        let mean_d = dr.iter().sum::<f64>() / n as f64;
                        let mean_dy = dr.iter().zip(yr).map(|(d, y)| d * y).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gr[j] += rstd[r] * (dr[j] - mean_d - yr[j] * mean_dy);
                        }
                    }
                });
            }
            Op::Sum { a } => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mse { a, b, row_weights } => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                let cols = nodes[*a].value.cols();
                let c = 2.0 * g[0] / av.len() as f64;
                let w = |i: usize| row_weights.as_ref().map_or(1.0, |w| w[i / cols]);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += c * w(i) * (av[i] - bv[i]);
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= c * w(i) * (av[i] - bv[i]);
                    }
                });
            }
            Op::ConcatCols { a, b } => {
                let (n1, n2) = (nodes[*a].value.cols(), nodes[*b].value.cols());
                acc(*a, &mut |ga| {
                    for (gr, dr) in ga.chunks_exact_mut(n1).zip(g.chunks_exact(n1 + n2)) {
                        gr.iter_mut().zip(&dr[..n1]).for_each(|(x, y)| *x += y);
                    }
                });
                acc(*b, &mut |gb| {
                    for (gr, dr) in gb.chunks_exact_mut(n2).zip(g.chunks_exact(n1 + n2)) {
                        gr.iter_mut().zip(&dr[n1..]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::InterleaveRows { a, b, groups } => {
                let n = node.value.cols();
                let ra = nodes[*a].value.rows() / groups;
                let rb = nodes[*b].value.rows() / groups;
                acc(*a, &mut |ga| {
                    for gi in 0..*groups {
                        let src = &g[gi * (ra + rb) * n..][..ra * n];
                        ga[gi * ra * n..][..ra * n].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
                acc(*b, &mut |gb| {
                    for gi in 0..*groups {
                        let src = &g[(gi * (ra + rb) + ra) * n..][..rb * n];
                        gb[gi * rb * n..][..rb * n].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::SliceGroupRows { a, groups, start } => {
                let n = node.value.cols();
                let per = nodes[*a].value.rows() / groups;
                let len = node.value.rows() / groups;
                acc(*a, &mut |ga| {
                    for gi in 0..*groups {
                        let dst = &mut ga[(gi * per + start) * n..][..len * n];
                        dst.iter_mut().zip(&g[gi * len * n..][..len * n]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::TileRows { a, times } => {
                let len = nodes[*a].value.numel();
                acc(*a, &mut |ga| {
                    for t in 0..*times {
                        ga.iter_mut().zip(&g[t * len..][..len]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::RepeatRows { a, times } => {
                let n = node.value.cols();
                acc(*a, &mut |ga| {
                    for (i, gr) in ga.chunks_exact_mut(n).enumerate() {
                        for t in 0..*times {
                            let src = &g[(i * times + t) * n..][..n];
                            gr.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                });
            }
            Op::MaskedSoftmax { a, mask } => {
                let keys = node.value.cols();
                let p = node.value.data();
                acc(*a, &mut |ga| {
                    for r in 0..node.value.rows() {
                        let allowed = mask.allowed(r % mask.queries());
                        let (pr, dr) = (&p[r * keys..][..keys], &g[r * keys..][..keys]);
                        let dot: f64 = allowed.iter().map(|&j| pr[j] * dr[j]).sum();
                        for &j in allowed {
                            ga[r * keys + j] += pr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, mask, *heads, probs, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: usize,
        k: usize,
        v: usize,
        mask: &SharedMask,
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (rows, width) = (nodes[q].value.rows(), nodes[q].value.cols());
        let n = mask.queries();
        let groups = rows / n;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (nodes[q].value.data(), nodes[k].value.data(), nodes[v].value.data());
        let mut dq = vec![0.0; rows * width];
        let mut dk = vec![0.0; rows * width];
        let mut dv = vec![0.0; rows * width];
        let mut dp = vec![0.0; n];
        for gi in 0..groups {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..n {
                    let p = &probs[((gi * heads + h) * n + i) * n..][..n];
                    let go = &g[(gi * n + i) * width + col..][..dh];
                    let allowed = mask.allowed(i);
                    let mut dot = 0.0;
                    for &j in allowed {
                        let base = (gi * n + j) * width + col;
                        let vj = &vd[base..][..dh];
                        dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dot += p[j] * dp[j];
                        let dvj = &mut dv[base..][..dh];
                        dvj.iter_mut().zip(go).for_each(|(x, y)| *x += p[j] * y);
                    }
                    let qbase = (gi * n + i) * width + col;
                    for &j in allowed {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kbase = (gi * n + j) * width + col;
                        for c in 0..dh {
                            dq[qbase + c] += ds * kd[kbase + c];
                            dk[kbase + c] += ds * qd[qbase + c];
                        }
                    }
                }
            }
        }
        for (idx, buf) in [(q, dq), (k, dk), (v, dv)] {
            if !nodes[idx].grad_enabled {
                continue;
            }
            match &mut grads[idx] {
                Some(existing) => existing.iter_mut().zip(&buf).for_each(|(x, y)| *x += y),
                slot @ None => *slot = Some(buf),
            }
        }
    }
}
