//! Reverse-mode differentiation over 2-D `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! bound from a [`ParamStore`]; anything else enters as a constant leaf.
//! [`Graph::backward`] returns gradients only for trainable parameters.
//!
//! [`Graph::detach`] cuts gradient flow. Detached values are logged in call
//! order so a later forward pass can replay them verbatim, which lets finite
//! differences probe exactly the surrogate objective that backpropagation
//! differentiates.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::sparse::{GatherMap, SparseMap};
use ndarray::{s, Array2, Axis};
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Normalize(Var, f64),
    Sparse(Arc<SparseMap>, Var),
    Gather(Arc<GatherMap>, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    Focal { pred: Var, gt: Arc<Array2<f64>>, alpha: f64, gamma: f64, eps: f64 },
    Dice { pred: Var, gt: Arc<Array2<f64>>, smooth: f64 },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct DetachLog {
    values: Vec<Array2<f64>>,
}

impl DetachLog {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    detached: Vec<Array2<f64>>,
    replay: Option<DetachLog>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), detached: Vec::new(), replay: None }
    }

    /// A graph whose `detach` calls return the values recorded in `log`
    /// instead of the freshly computed ones.
    pub fn replaying(log: DetachLog) -> Self {
        Self { replay: Some(log), ..Self::new() }
    }

    pub fn detach_log(&self) -> DetachLog {
        DetachLog { values: self.detached.clone() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.iter().all(|v| !v.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        assert_eq!(x.dim(), (1, 1), "not a scalar");
        x[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Bind a stored tensor. Non-trainable tensors enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.push(store.get(id).clone(), Op::Param(id), trainable);
        self.bound.insert(id, v);
        v
    }

    /// Stop gradient flow through `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let k = self.detached.len();
        let value = match &self.replay {
            Some(log) => log.values.get(k).cloned().unwrap_or_else(|| self.value(v).clone()),
            None => self.value(v).clone(),
        };
        self.detached.push(value.clone());
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape");
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Broadcast-add a `1 × C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| gelu(x).0);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    /// Zero-mean, unit-variance normalisation of every row.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        let ng = self.ng(a);
        self.push(v, Op::Normalize(a, eps), ng)
    }

    pub fn sparse(&mut self, map: &Arc<SparseMap>, a: Var) -> Var {
        let v = map.apply(self.value(a).view());
        let ng = self.ng(a);
        self.push(v, Op::Sparse(Arc::clone(map), a), ng)
    }

    pub fn gather(&mut self, map: &Arc<GatherMap>, a: Var) -> Var {
        let v = map.apply(self.value(a).view());
        let ng = self.ng(a);
        self.push(v, Op::Gather(Arc::clone(map), a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows widths");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols heights");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// Mean sigmoid-focal loss of probabilities `pred` against binary `gt`.
    pub fn focal_loss(&mut self, pred: Var, gt: Arc<Array2<f64>>, alpha: f64, gamma: f64, eps: f64) -> Var {
        assert_eq!(self.shape(pred), gt.dim(), "focal shape");
        let p = self.value(pred);
        let total: f64 = p
            .iter()
            .zip(gt.iter())
            .map(|(&p, &g)| focal_term(p, g, alpha, gamma, eps).0)
            .sum();
        let v = Array2::from_elem((1, 1), total / p.len() as f64);
        let ng = self.ng(pred);
        self.push(v, Op::Focal { pred, gt, alpha, gamma, eps }, ng)
    }

    /// Smoothed soft-dice loss `1 − (2Σpg + s)/(Σp + Σg + s)`.
    pub fn dice_loss(&mut self, pred: Var, gt: Arc<Array2<f64>>, smooth: f64) -> Var {
        assert_eq!(self.shape(pred), gt.dim(), "dice shape");
        let p = self.value(pred);
        let (num, den) = dice_parts(p, &gt, smooth);
        let v = Array2::from_elem((1, 1), 1.0 - num / den);
        let ng = self.ng(pred);
        self.push(v, Op::Dice { pred, gt, smooth }, ng)
    }

    /// Gradients of the scalar `loss` with respect to every bound trainable
    /// parameter.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::zeros_like(store);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut send = |v: Var, d: Array2<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &d,
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.grads[id.0] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        send(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        send(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        send(*a, g.dot(self.value(*b)));
                    }
                    if self.ng(*b) {
                        send(*b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        send(*b, g.clone());
                    }
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        send(*b, -&g);
                    }
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        send(*a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        send(*b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    send(*a, g);
                }
                Op::MulRow(a, row) => {
                    if self.ng(*row) {
                        let d = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        send(*row, d);
                    }
                    if self.ng(*a) {
                        send(*a, &g * self.value(*row));
                    }
                }
                Op::Scale(a, s) => send(*a, g * *s),
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    send(*a, d);
                }
                Op::Gelu(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |d, &x| *d *= gelu(x).1);
                    send(*a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |d, &y| *d *= y * (1.0 - y));
                    send(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow.sum();
                        drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
                    }
                    send(*a, d);
                }
                Op::Normalize(a, eps) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let n = x.ncols() as f64;
                    let mut d = Array2::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let xr = x.row(r);
                        let mean = xr.sum() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let gmean = gr.sum() / n;
                        let gy = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..x.ncols() {
                            d[[r, c]] = inv * (gr[c] - gmean - yr[c] * gy);
                        }
                    }
                    send(*a, d);
                }
                Op::Sparse(map, a) => send(*a, map.apply_transpose(g.view())),
                Op::Gather(map, a) => send(*a, map.apply_transpose(g.view())),
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.shape(p).0;
                        if self.ng(p) {
                            send(p, g.slice(s![start..start + n, ..]).to_owned());
                        }
                        start += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    send(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.shape(p).1;
                        if self.ng(p) {
                            send(p, g.slice(s![.., start..start + n]).to_owned());
                        }
                        start += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    send(*a, d);
                }
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    send(*a, d);
                }
                Op::Focal { pred, gt, alpha, gamma, eps } => {
                    let p = self.value(*pred);
                    let scale = g[[0, 0]] / p.len() as f64;
                    let mut d = Array2::zeros(p.dim());
                    ndarray::Zip::from(&mut d).and(p).and(gt.as_ref()).for_each(|d, &p, &t| {
                        *d = scale * focal_term(p, t, *alpha, *gamma, *eps).1;
                    });
                    send(*pred, d);
                }
                Op::Dice { pred, gt, smooth } => {
                    let p = self.value(*pred);
                    let (num, den) = dice_parts(p, gt, *smooth);
                    let gs = g[[0, 0]];
                    let d = gt.mapv(|t| -gs * (2.0 * t * den - num) / (den * den));
                    send(*pred, d);
                }
            }
        }
        out
    }
}

/// `(gelu(x), gelu'(x))`.
fn gelu(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let t = (K * (x + A * x * x * x)).tanh();
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel focal value and its derivative with respect to the predicted
/// foreground probability. Probabilities outside `[eps, 1 − eps]` are clamped
/// and carry zero derivative.
fn focal_term(p: f64, t: f64, alpha: f64, gamma: f64, eps: f64) -> (f64, f64) {
    let clamped = p < eps || p > 1.0 - eps;
    let p = p.clamp(eps, 1.0 - eps);
    let (pt, alpha_t, sign) = if t >= 0.5 { (p, alpha, 1.0) } else { (1.0 - p, 1.0 - alpha, -1.0) };
    let q = 1.0 - pt;
    let lg = pt.ln();
    let value = -alpha_t * q.powf(gamma) * lg;
    if clamped {
        return (value, 0.0);
    }
    let dpt = -alpha_t * (-gamma * q.powf(gamma - 1.0) * lg + q.powf(gamma) / pt);
    (value, sign * dpt)
}

fn dice_parts(p: &Array2<f64>, gt: &Array2<f64>, smooth: f64) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (&a, &b) in p.iter().zip(gt.iter()) {
        inter += a * b;
        sp += a;
        sg += b;
    }
    (2.0 * inter + smooth, sp + sg + smooth)
}
