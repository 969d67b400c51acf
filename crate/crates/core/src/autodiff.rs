//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and enough
//! information to run its vector-Jacobian product. [`Tape::backward`] replays
//! the nodes in reverse insertion order, which is a valid reverse topological
//! order because inputs always precede outputs.
//!
//! Leaves are bound from plain [`Tensor`]s with [`Tape::leaf`]. Gradients are
//! returned per leaf *tensor identity*, so binding the same parameter several
//! times (e.g. one scan head reused across four directions) accumulates into a
//! single gradient.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{bmm, numel, Tensor};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Backward rule for an operation registered with [`Tape::custom`].
pub trait VjpRule {
    fn name(&self) -> &str;

    /// Gradient with respect to each input, in input order.
    fn vjp(&self, grad_out: &Tensor, inputs: &[Tensor], output: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Exp(usize),
    Softplus(usize),
    Gelu(usize),
    MatMul(usize, usize),
    Sum(usize),
    Reshape(usize),
    GatherRows(usize, Arc<Vec<Option<usize>>>),
    SliceLast(usize, usize, usize),
    ConcatLast(Vec<usize>),
    SelectLast(usize, Arc<Vec<usize>>),
    LogSoftmax(usize),
    Cosine(usize, usize, f64),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Custom(Vec<usize>, Box<dyn VjpRule>),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | Cosine(a, b, _) => vec![*a, *b],
            Neg(a) | Scale(a, _) | Exp(a) | Softplus(a) | Gelu(a) | Sum(a) | Reshape(a)
            | GatherRows(a, _) | SliceLast(a, _, _) | SelectLast(a, _) | LogSoftmax(a) => vec![*a],
            ConcatLast(v) | Custom(v, _) => v.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Tape::backward`], keyed by tensor identity.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: HashMap<(usize, Vec<usize>), Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        self.map.get(&(leaf.id(), leaf.shape().to_vec()))
    }

    /// Gradient of `leaf`, or zeros if it was never bound or does not require grad.
    pub fn wrt(&self, leaf: &Tensor) -> Tensor {
        self.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => other.inputs().iter().any(|&i| nodes[i].needs_grad),
        };
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Binds a tensor as a leaf. It participates in gradients iff
    /// `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.clone(), Op::Leaf)
    }

    /// Binds a value that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t.with_requires_grad(false), Op::Leaf)
    }

    /// Records an operation whose forward value was computed by the caller
    /// and whose backward pass is `rule`.
    pub fn custom(&self, inputs: &[Var<'_>], value: Tensor, rule: Box<dyn VjpRule>) -> Var<'_> {
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push(value.with_requires_grad(false), Op::Custom(ids, rule))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::Contract("backward root belongs to another tape".into()));
        }
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape().to_vec()));

        for i in (0..=root.id).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            let val = |j: usize| &nodes[j].value;
            let contributions: Vec<(usize, Tensor)> = match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => vec![
                    (*a, g.sum_to_shape(val(*a).shape())),
                    (*b, g.sum_to_shape(val(*b).shape())),
                ],
                Op::Sub(a, b) => vec![
                    (*a, g.sum_to_shape(val(*a).shape())),
                    (*b, g.sum_to_shape(val(*b).shape()).map(|v| -v)),
                ],
                Op::Mul(a, b) => {
                    let mut out = Vec::with_capacity(2);
                    if nodes[*a].needs_grad {
                        let ga = g.zip_broadcast(val(*b), |x, y| x * y)?;
                        out.push((*a, ga.sum_to_shape(val(*a).shape())));
                    }
                    if nodes[*b].needs_grad {
                        let gb = g.zip_broadcast(val(*a), |x, y| x * y)?;
                        out.push((*b, gb.sum_to_shape(val(*b).shape())));
                    }
                    out
                }
                Op::Neg(a) => vec![(*a, g.map(|v| -v))],
                Op::Scale(a, c) => {
                    let c = *c;
                    vec![(*a, g.map(|v| v * c))]
                }
                Op::Exp(a) => vec![(*a, g.zip_broadcast(&node.value, |x, y| x * y)?)],
                Op::Softplus(a) => vec![(*a, g.zip_broadcast(val(*a), |x, y| x * sigmoid(y))?)],
                Op::Gelu(a) => vec![(*a, g.zip_broadcast(val(*a), |x, y| x * gelu_grad(y))?)],
                Op::MatMul(a, b) => {
                    let mut out = Vec::with_capacity(2);
                    if nodes[*a].needs_grad {
                        let ga = bmm(&g, val(*b), false, true)?;
                        out.push((*a, ga.sum_to_shape(val(*a).shape())));
                    }
                    if nodes[*b].needs_grad {
                        let gb = bmm(val(*a), &g, true, false)?;
                        out.push((*b, gb.sum_to_shape(val(*b).shape())));
                    }
                    out
                }
                Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.item()))],
                Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape().to_vec())?)],
                Op::GatherRows(a, idx) => {
                    let src = val(*a);
                    let width = src.numel() / src.shape()[0];
                    let mut out = vec![0.0; src.numel()];
                    for (r, ix) in idx.iter().enumerate() {
                        if let Some(s) = ix {
                            let gr = &g.data()[r * width..(r + 1) * width];
                            for (o, v) in out[s * width..(s + 1) * width].iter_mut().zip(gr) {
                                *o += v;
                            }
                        }
                    }
                    vec![(*a, Tensor::from_parts(src.shape().to_vec(), out))]
                }
                Op::SliceLast(a, start, end) => {
                    let src = val(*a);
                    let last = *src.shape().last().unwrap();
                    let w = end - start;
                    let mut out = vec![0.0; src.numel()];
                    for (r, gr) in g.data().chunks(w).enumerate() {
                        out[r * last + start..r * last + end].copy_from_slice(gr);
                    }
                    vec![(*a, Tensor::from_parts(src.shape().to_vec(), out))]
                }
                Op::ConcatLast(parts) => {
                    let total = *g.shape().last().unwrap();
                    let rows = g.numel() / total;
                    let mut offset = 0;
                    let mut out = Vec::with_capacity(parts.len());
                    for &p in parts {
                        let w = *val(p).shape().last().unwrap();
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        out.push((p, Tensor::from_parts(val(p).shape().to_vec(), d)));
                    }
                    out
                }
                Op::SelectLast(a, idx) => {
                    let src = val(*a);
                    let m = *src.shape().last().unwrap();
                    let mut out = vec![0.0; src.numel()];
                    for (r, &k) in idx.iter().enumerate() {
                        out[r * m + k] = g.data()[r];
                    }
                    vec![(*a, Tensor::from_parts(src.shape().to_vec(), out))]
                }
                Op::LogSoftmax(a) => {
                    let m = *node.value.shape().last().unwrap();
                    let mut out = vec![0.0; node.value.numel()];
                    for ((o, y), gr) in out
                        .chunks_mut(m)
                        .zip(node.value.data().chunks(m))
                        .zip(g.data().chunks(m))
                    {
                        let s: f64 = gr.iter().sum();
                        for k in 0..m {
                            o[k] = gr[k] - y[k].exp() * s;
                        }
                    }
                    vec![(*a, Tensor::from_parts(val(*a).shape().to_vec(), out))]
                }
                Op::Cosine(a, b, eps) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let m = *ta.shape().last().unwrap();
                    let mut ga = vec![0.0; ta.numel()];
                    let mut gb = vec![0.0; tb.numel()];
                    for r in 0..g.numel() {
                        let xa = &ta.data()[r * m..(r + 1) * m];
                        let xb = &tb.data()[r * m..(r + 1) * m];
                        let (na, nb) = (norm(xa), norm(xb));
                        let (da, db) = (na.max(*eps), nb.max(*eps));
                        let dot: f64 = xa.iter().zip(xb).map(|(p, q)| p * q).sum();
                        let cos = dot / (da * db);
                        let gr = g.data()[r];
                        for k in 0..m {
                            let mut dka = xb[k] / (da * db);
                            if na > *eps {
                                dka -= cos * xa[k] / (na * na);
                            }
                            let mut dkb = xa[k] / (da * db);
                            if nb > *eps {
                                dkb -= cos * xb[k] / (nb * nb);
                            }
                            ga[r * m + k] = gr * dka;
                            gb[r * m + k] = gr * dkb;
                        }
                    }
                    vec![
                        (*a, Tensor::from_parts(ta.shape().to_vec(), ga)),
                        (*b, Tensor::from_parts(tb.shape().to_vec(), gb)),
                    ]
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let tx = val(*x);
                    let gam = val(*gamma).data();
                    let m = *tx.shape().last().unwrap();
                    let mut gx = vec![0.0; tx.numel()];
                    let mut gg = vec![0.0; m];
                    let mut gbeta = vec![0.0; m];
                    let mut xhat = vec![0.0; m];
                    let mut gxh = vec![0.0; m];
                    for r in 0..tx.numel() / m {
                        let row = &tx.data()[r * m..(r + 1) * m];
                        let gr = &g.data()[r * m..(r + 1) * m];
                        let (mean, rstd) = moments(row, *eps);
                        for k in 0..m {
                            xhat[k] = (row[k] - mean) * rstd;
                            gxh[k] = gr[k] * gam[k];
                            gg[k] += gr[k] * xhat[k];
                            gbeta[k] += gr[k];
                        }
                        let mg = gxh.iter().sum::<f64>() / m as f64;
                        let mgx = gxh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for k in 0..m {
                            gx[r * m + k] = rstd * (gxh[k] - mg - xhat[k] * mgx);
                        }
                    }
                    vec![
                        (*x, Tensor::from_parts(tx.shape().to_vec(), gx)),
                        (*gamma, Tensor::from_parts(vec![m], gg)),
                        (*beta, Tensor::from_parts(vec![m], gbeta)),
                    ]
                }
                Op::Custom(ins, rule) => {
                    let inputs: Vec<Tensor> = ins.iter().map(|&j| val(j).clone()).collect();
                    let gs = rule.vjp(&g, &inputs, &node.value);
                    if gs.len() != ins.len() {
                        return Err(Error::Contract(format!(
                            "vjp of `{}` returned {} gradients for {} inputs",
                            rule.name(),
                            gs.len(),
                            ins.len()
                        )));
                    }
                    ins.iter().copied().zip(gs).collect()
                }
            };
            for (j, gj) in contributions {
                if !nodes[j].needs_grad {
                    continue;
                }
                debug_assert_eq!(gj.shape(), nodes[j].value.shape());
                grads[j] = Some(match grads[j].take() {
                    None => gj,
                    Some(prev) => {
                        let mut d = prev.to_vec();
                        for (p, v) in d.iter_mut().zip(gj.data()) {
                            *p += v;
                        }
                        Tensor::from_parts(gj.shape().to_vec(), d)
                    }
                });
            }
        }

        let mut out = Gradients::default();
        for (i, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.value.requires_grad() {
                continue;
            }
            let key = (node.value.id(), node.value.shape().to_vec());
            let g = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
            out.map
                .entry(key)
                .and_modify(|acc| {
                    let mut d = acc.to_vec();
                    for (p, v) in d.iter_mut().zip(g.data()) {
                        *p += v;
                    }
                    *acc = Tensor::from_parts(g.shape().to_vec(), d);
                })
                .or_insert(g);
        }
        Ok(out)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let m = row.len() as f64;
    let mean = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, 1.0 / (var + eps).sqrt())
}

fn last_dim(t: &Tensor, what: &str) -> Result<usize> {
    t.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::Dimension(format!("{what} needs rank >= 1, got a scalar")))
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(self, op: impl Fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f).with_requires_grad(false);
        self.tape.push(v, op(self.id))
    }

    fn binary(self, other: Var<'t>, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var<'t>> {
        let v = self.value().zip_broadcast(&other.value(), f)?;
        Ok(self.tape.push(v, op(self.id, other.id)))
    }

    pub fn try_add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a + b, Op::Add)
    }

    pub fn try_sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a - b, Op::Sub)
    }

    pub fn try_mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a * b, Op::Mul)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|a| Op::Scale(a, c), |v| v * c)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus, softplus)
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(Op::Gelu, gelu)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = bmm(&self.value(), &other.value(), false, false)?;
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?.with_requires_grad(false);
        Ok(self.tape.push(v, Op::Reshape(self.id)))
    }

    /// Row gather along the leading axis; `None` yields a zero row.
    pub fn gather_rows(self, idx: Arc<Vec<Option<usize>>>) -> Result<Var<'t>> {
        let src = self.value();
        let rows = *src.shape().first().ok_or_else(|| Error::Dimension("gather_rows on a scalar".into()))?;
        let width = src.numel() / rows;
        let mut d = Vec::with_capacity(idx.len() * width);
        for ix in idx.iter() {
            match ix {
                Some(r) if *r < rows => d.extend_from_slice(&src.data()[r * width..(r + 1) * width]),
                Some(r) => {
                    return Err(Error::Dimension(format!("gather index {r} out of range for {rows} rows")))
                }
                None => d.extend(std::iter::repeat_n(0.0, width)),
            }
        }
        let mut shape = src.shape().to_vec();
        shape[0] = idx.len();
        Ok(self.tape.push(Tensor::from_parts(shape, d), Op::GatherRows(self.id, idx)))
    }

    /// Permutes rows: output row `t` is input row `perm[t]`.
    pub fn permute_rows(self, perm: &[usize]) -> Result<Var<'t>> {
        self.gather_rows(Arc::new(perm.iter().map(|&p| Some(p)).collect()))
    }

    pub fn slice_last(self, start: usize, end: usize) -> Result<Var<'t>> {
        let src = self.value();
        let last = last_dim(&src, "slice_last")?;
        if start >= end || end > last {
            return Err(Error::Dimension(format!("slice {start}..{end} of last axis {last}")));
        }
        let w = end - start;
        let d: Vec<f64> = src.data().chunks(last).flat_map(|r| r[start..end].iter().copied()).collect();
        let mut shape = src.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        Ok(self.tape.push(Tensor::from_parts(shape, d), Op::SliceLast(self.id, start, end)))
    }

    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let tape = first.tape;
        let vals: Vec<Tensor> = parts.iter().map(Var::value).collect();
        let lead = &vals[0].shape()[..vals[0].rank().saturating_sub(1)];
        for v in &vals {
            if v.rank() == 0 || &v.shape()[..v.rank() - 1] != lead {
                return Err(Error::Dimension(format!(
                    "concat_last leading axes differ: {:?} vs {:?}",
                    vals[0].shape(),
                    v.shape()
                )));
            }
        }
        let widths: Vec<usize> = vals.iter().map(|v| *v.shape().last().unwrap()).collect();
        let rows = numel(lead);
        let mut d = Vec::with_capacity(rows * widths.iter().sum::<usize>());
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                d.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(widths.iter().sum());
        Ok(tape.push(Tensor::from_parts(shape, d), Op::ConcatLast(parts.iter().map(|p| p.id).collect())))
    }

    /// `out[r] = self[r, idx[r]]` for a rank-2 input.
    pub fn select_last(self, idx: Arc<Vec<usize>>) -> Result<Var<'t>> {
        let src = self.value();
        if src.rank() != 2 || src.shape()[0] != idx.len() {
            return Err(Error::Dimension(format!(
                "select_last needs [{}, m], got {:?}",
                idx.len(),
                src.shape()
            )));
        }
        let m = src.shape()[1];
        let mut d = Vec::with_capacity(idx.len());
        for (r, &k) in idx.iter().enumerate() {
            if k >= m {
                return Err(Error::Dimension(format!("class index {k} out of range for {m} classes")));
            }
            d.push(src.data()[r * m + k]);
        }
        Ok(self.tape.push(Tensor::from_parts(vec![idx.len()], d), Op::SelectLast(self.id, idx)))
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        let src = self.value();
        let m = last_dim(&src, "log_softmax")?;
        let mut d = Vec::with_capacity(src.numel());
        for row in src.data().chunks(m) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            d.extend(row.iter().map(|v| v - lse));
        }
        Ok(self.tape.push(Tensor::from_parts(src.shape().to_vec(), d), Op::LogSoftmax(self.id)))
    }

    /// Cosine similarity along the last axis; norms are clamped below by `eps`.
    pub fn cosine_last(self, other: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!("cosine of {:?} and {:?}", a.shape(), b.shape())));
        }
        let m = last_dim(&a, "cosine_last")?;
        let d: Vec<f64> = a
            .data()
            .chunks(m)
            .zip(b.data().chunks(m))
            .map(|(x, y)| {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let sq = |v: &[f64]| v.iter().map(|e| e * e).sum::<f64>().max(eps * eps);
                (dot / (sq(x) * sq(y)).sqrt()).clamp(-1.0, 1.0)
            })
            .collect();
        let shape = a.shape()[..a.rank() - 1].to_vec();
        Ok(self.tape.push(Tensor::from_parts(shape, d), Op::Cosine(self.id, other.id, eps)))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let m = last_dim(&x, "layer_norm")?;
        if gamma.shape() != [m] || beta.shape() != [m] {
            return Err(Error::Dimension(format!(
                "layer_norm affine shapes {:?}/{:?} for width {m}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        let mut d = Vec::with_capacity(x.numel());
        for row in x.data().chunks(m) {
            let (mean, rstd) = moments(row, eps);
            d.extend((0..m).map(|k| (row[k] - mean) * rstd * gv.data()[k] + bv.data()[k]));
        }
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), d),
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, eps },
        ))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self::Output {
        self.try_add(rhs).expect("add: incompatible shapes")
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.try_sub(rhs).expect("sub: incompatible shapes")
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.try_mul(rhs).expect("mul: incompatible shapes")
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self::Output {
        self.unary(Op::Neg, |v| -v)
    }
}
