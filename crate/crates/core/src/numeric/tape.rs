//! Reverse-mode differentiation over a closed set of operations.
//!
//! Every forward call appends a node holding its output value and whatever
//! the backward rule needs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients for every node that depends on a trainable leaf.

use std::rc::Rc;

use rand::Rng;

use super::params::{ParamId, ParameterStore};
use super::relpos::DistanceTable;
use super::tensor::{gemm, Float, MatMut, MatRef, Tensor};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One independent attention block: queries `q_start..q_start+q_len` attend
/// keys `k_start..k_start+k_len`. Bias entries are indexed by local offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnGroup {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    pub groups: Vec<AttnGroup>,
    pub heads: usize,
    /// Local key `j` is visible to local query `i` only when `j <= i`.
    pub causal: bool,
}

enum Op<T> {
    Leaf { param: Option<ParamId> },
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sum(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Embedding { table: Var, ids: Vec<u32> },
    GatherRows { x: Var, rows: Vec<Option<usize>> },
    RelBias { w: Var, table: Rc<DistanceTable> },
    Attention { q: Var, k: Var, v: Var, bias: Option<Var>, layout: Rc<AttnLayout>, probs: Vec<T>, scale: T },
    CrossEntropy { logits: Var, targets: Vec<Option<u32>>, probs: Vec<T>, losses: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], one slot per node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn grad_slot<'a, T: Float>(grads: &'a mut [Option<Tensor<T>>], shape: &[usize], v: Var) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf holding a copy of a stored parameter; frozen parameters get no gradient.
    pub fn param(&mut self, store: &ParameterStore<T>, id: ParamId) -> Var {
        let needs = !store.is_frozen(id);
        self.push(store.tensor(id).clone(), Op::Leaf { param: Some(id) }, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(av.shape().len() == 2 && bv.shape().len() == 2, "matmul needs 2-d operands");
        let bm = if trans_b { bv.as_mat().t() } else { bv.as_mat() };
        ensure!(av.cols() == bm.rows, "matmul shape mismatch {:?} x {:?}{}", av.shape(), bv.shape(), if trans_b { "^T" } else { "" });
        let mut out = Tensor::zeros(&[av.rows(), bm.cols]);
        gemm(T::one(), av.as_mat(), bm, T::zero(), out.as_mat_mut());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(av.shape() == bv.shape(), "add shape mismatch {:?} vs {:?}", av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(av.shape() == bv.shape(), "mul shape mismatch {:?} vs {:?}", av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let out = self.value(a).map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Normalizes each row by its root mean square and multiplies by `gain`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.cols();
        ensure!(gv.numel() == d, "rmsnorm gain has {} entries for rows of {d}", gv.numel());
        let eps = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut out = Tensor::zeros(xv.shape());
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &g) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(row).zip(gv.data()) {
                *o = v * inv * g;
            }
        }
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        let d = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            ensure!((id as usize) < tv.rows(), "token id {id} outside embedding table of {} rows", tv.rows());
            data.extend_from_slice(tv.row(id as usize));
        }
        let out = Tensor::from_vec(&[ids.len(), d], data)?;
        let ng = self.ng(table);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Output row `r` is `x[rows[r]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<Option<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Tensor::zeros(&[rows.len(), d]);
        for (r, src) in rows.iter().enumerate() {
            if let Some(s) = *src {
                ensure!(s < xv.rows(), "gather row {s} out of range {}", xv.rows());
                out.data_mut()[r * d..(r + 1) * d].copy_from_slice(xv.row(s));
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows { x, rows }, ng))
    }

    /// Positional logits `[heads, rows, cols]` with entry
    /// `w[h] . features(dist(i, j))`.
    pub fn rel_bias(&mut self, w: Var, table: Rc<DistanceTable>) -> Result<Var> {
        let wv = self.value(w);
        ensure!(wv.shape().len() == 2 && wv.cols() == table.features, "relative weights must be [heads, {}]", table.features);
        let heads = wv.rows();
        let nd = table.num_distances();
        let f = table.features;
        let mut per_dist = vec![T::zero(); heads * nd];
        for h in 0..heads {
            for di in 0..nd {
                let mut s = T::zero();
                for k in 0..f {
                    s += wv.data()[h * f + k] * T::from_f64(table.basis[di * f + k]);
                }
                per_dist[h * nd + di] = s;
            }
        }
        let cells = table.rows * table.cols;
        let mut out = Tensor::zeros(&[heads, table.rows, table.cols]);
        for h in 0..heads {
            for (o, &d) in out.data_mut()[h * cells..(h + 1) * cells].iter_mut().zip(&table.dist) {
                *o = per_dist[h * nd + (d - table.min) as usize];
            }
        }
        let ng = self.ng(w);
        Ok(self.push(out, Op::RelBias { w, table }, ng))
    }

    /// Multi-head scaled dot-product attention over independent groups.
    /// `q`, `k`, `v` are `[rows, heads * head_dim]`; `bias` is
    /// `[heads, bq, bk]` and is indexed by local offsets inside each group.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>, layout: Rc<AttnLayout>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let c = qv.cols();
        let heads = layout.heads;
        ensure!(heads >= 1 && c % heads == 0, "width {c} not divisible into {heads} heads");
        ensure!(kv.cols() == c && vv.cols() == c, "q/k/v widths differ: {c}, {}, {}", kv.cols(), vv.cols());
        ensure!(kv.rows() == vv.rows(), "keys and values have different row counts");
        let hd = c / heads;
        let (bq, bk) = match bias {
            Some(b) => {
                let s = self.value(b).shape();
                ensure!(s.len() == 3 && s[0] == heads, "bias must be [heads, rows, cols], got {s:?}");
                (s[1], s[2])
            }
            None => (usize::MAX, usize::MAX),
        };
        for g in &layout.groups {
            ensure!(g.q_start + g.q_len <= qv.rows() && g.k_start + g.k_len <= kv.rows(), "attention group {g:?} out of range");
            ensure!(g.q_len <= bq && g.k_len <= bk, "attention group {g:?} larger than bias block {bq}x{bk}");
        }
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let total: usize = layout.groups.iter().map(|g| g.q_len * g.k_len).sum::<usize>() * heads;
        let mut probs = vec![T::zero(); total];
        let mut out = Tensor::zeros(&[qv.rows(), c]);
        let bias_data = bias.map(|b| self.value(b).data());
        let mut off = 0;
        for g in &layout.groups {
            if g.q_len == 0 || g.k_len == 0 {
                continue;
            }
            for h in 0..heads {
                let p = &mut probs[off..off + g.q_len * g.k_len];
                let qm = MatRef::rows(&qv.data()[g.q_start * c + h * hd..], g.q_len, hd, c);
                let km = MatRef::rows(&kv.data()[g.k_start * c + h * hd..], g.k_len, hd, c);
                gemm(scale, qm, km.t(), T::zero(), MatMut::rows(p, g.q_len, g.k_len, g.k_len));
                for i in 0..g.q_len {
                    let allowed = if layout.causal { (i + 1).min(g.k_len) } else { g.k_len };
                    let row = &mut p[i * g.k_len..(i + 1) * g.k_len];
                    if let Some(bd) = bias_data {
                        let brow = &bd[(h * bq + i) * bk..];
                        for j in 0..allowed {
                            row[j] += brow[j];
                        }
                    }
                    let mx = row[..allowed].iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let mut s = T::zero();
                    for x in row[..allowed].iter_mut() {
                        *x = (*x - mx).exp();
                        s += *x;
                    }
                    let inv = T::one() / s;
                    for x in row[..allowed].iter_mut() {
                        *x *= inv;
                    }
                    for x in row[allowed..].iter_mut() {
                        *x = T::zero();
                    }
                }
                let vm = MatRef::rows(&vv.data()[g.k_start * c + h * hd..], g.k_len, hd, c);
                let om = MatMut::rows(&mut out.data_mut()[g.q_start * c + h * hd..], g.q_len, hd, c);
                gemm(T::one(), MatRef::rows(p, g.q_len, g.k_len, g.k_len), vm, T::one(), om);
                off += g.q_len * g.k_len;
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Attention { q, k, v, bias, layout, probs, scale }, ng))
    }

    /// Sum over scored rows of `-log softmax(logits[r])[target[r]]`, in nats.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.cols();
        ensure!(lv.rows() == targets.len(), "{} logit rows for {} targets", lv.rows(), targets.len());
        let mut probs = vec![T::zero(); lv.numel()];
        let mut losses = vec![T::zero(); targets.len()];
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            let pr = &mut probs[r * vocab..(r + 1) * vocab];
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - mx).exp();
                s += *p;
            }
            let inv = T::one() / s;
            for p in pr.iter_mut() {
                *p *= inv;
            }
            if let Some(t) = *t {
                ensure!((t as usize) < vocab, "target {t} outside vocabulary {vocab}");
                let loss = s.ln() + mx - row[t as usize];
                losses[r] = loss;
                total += loss;
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(total), Op::CrossEntropy { logits, targets: targets.to_vec(), probs, losses }, ng))
    }

    /// Per-row losses of a [`Tape::cross_entropy`] node (zero on unscored rows).
    pub fn row_losses(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::CrossEntropy { losses, .. } => Some(losses),
            _ => None,
        }
    }

    /// Softmax probabilities saved by a [`Tape::cross_entropy`] node.
    pub fn row_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::CrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        ensure!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        ensure!(self.value(loss).numel() == 1, "backward needs a scalar, got shape {:?}", self.value(loss).shape());
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = grad_slot(grads, av.shape(), *a);
                    let bm = if *trans_b { bv.as_mat() } else { bv.as_mat().t() };
                    gemm(T::one(), g.as_mat(), bm, T::one(), ga.as_mat_mut());
                }
                if self.ng(*b) {
                    let gb = grad_slot(grads, bv.shape(), *b);
                    if *trans_b {
                        gemm(T::one(), g.as_mat().t(), av.as_mat(), T::one(), gb.as_mat_mut());
                    } else {
                        gemm(T::one(), av.as_mat().t(), g.as_mat(), T::one(), gb.as_mat_mut());
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.ng(*v) {
                        grad_slot(grads, g.shape(), *v).add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                for (v, other) in [(a, &bv), (b, &av)] {
                    if self.ng(*v) {
                        let gs = grad_slot(grads, g.shape(), *v);
                        for ((o, &gg), &y) in gs.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
                            *o += gg * y;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.ng(*a) {
                    let gs = grad_slot(grads, g.shape(), *a);
                    for (o, &gg) in gs.data_mut().iter_mut().zip(g.data()) {
                        *o += gg * *s;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let c = T::from_f64(GELU_C);
                    let k = T::from_f64(GELU_A);
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    let xv = self.value(*a);
                    let gs = grad_slot(grads, g.shape(), *a);
                    for ((o, &gg), &x) in gs.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        *o += gg * d;
                    }
                }
            }
            Op::Sum(a) => {
                if self.ng(*a) {
                    let gg = g.data()[0];
                    let shape = self.value(*a).shape().to_vec();
                    let gs = grad_slot(grads, &shape, *a);
                    for o in gs.data_mut() {
                        *o += gg;
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.cols();
                let inv_d = T::from_f64(1.0 / d as f64);
                if self.ng(*gain) {
                    let gg = grad_slot(grads, gv.shape(), *gain);
                    for r in 0..xv.rows() {
                        for j in 0..d {
                            gg.data_mut()[j] += g.data()[r * d + j] * xv.data()[r * d + j] * inv_rms[r];
                        }
                    }
                }
                if self.ng(*x) {
                    let gx = grad_slot(grads, xv.shape(), *x);
                    for r in 0..xv.rows() {
                        let inv = inv_rms[r];
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot += g.data()[r * d + j] * gv.data()[j] * xv.data()[r * d + j] * inv;
                        }
                        dot *= inv_d;
                        for j in 0..d {
                            let xhat = xv.data()[r * d + j] * inv;
                            gx.data_mut()[r * d + j] += inv * (g.data()[r * d + j] * gv.data()[j] - xhat * dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.ng(*table) {
                    let shape = self.value(*table).shape().to_vec();
                    let d = shape[1];
                    let gt = grad_slot(grads, &shape, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt.data_mut()[id as usize * d..(id as usize + 1) * d];
                        for (o, &gg) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *o += gg;
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if self.ng(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let d = g.cols();
                    let gx = grad_slot(grads, &shape, *x);
                    for (r, src) in rows.iter().enumerate() {
                        if let Some(s) = *src {
                            let dst = &mut gx.data_mut()[s * d..(s + 1) * d];
                            for (o, &gg) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                                *o += gg;
                            }
                        }
                    }
                }
            }
            Op::RelBias { w, table } => {
                if self.ng(*w) {
                    let shape = self.value(*w).shape().to_vec();
                    let heads = shape[0];
                    let f = table.features;
                    let nd = table.num_distances();
                    let cells = table.rows * table.cols;
                    let mut per_dist = vec![T::zero(); heads * nd];
                    for h in 0..heads {
                        for (&gg, &d) in g.data()[h * cells..(h + 1) * cells].iter().zip(&table.dist) {
                            per_dist[h * nd + (d - table.min) as usize] += gg;
                        }
                    }
                    let gw = grad_slot(grads, &shape, *w);
                    for h in 0..heads {
                        for di in 0..nd {
                            let pd = per_dist[h * nd + di];
                            for k in 0..f {
                                gw.data_mut()[h * f + k] += pd * T::from_f64(table.basis[di * f + k]);
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, bias, layout, probs, scale } => {
                self.backprop_attention(*q, *k, *v, *bias, layout, probs, *scale, g, grads);
            }
            Op::CrossEntropy { logits, targets, probs, .. } => {
                if self.ng(*logits) {
                    let gg = g.data()[0];
                    let shape = self.value(*logits).shape().to_vec();
                    let vocab = shape[1];
                    let gl = grad_slot(grads, &shape, *logits);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let dst = &mut gl.data_mut()[r * vocab..(r + 1) * vocab];
                            for (o, &p) in dst.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                                *o += gg * p;
                            }
                            dst[t as usize] -= gg;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.ng(*x) {
                    let gx = grad_slot(grads, g.shape(), *x);
                    for ((o, &gg), &m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *o += gg * m;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        layout: &AttnLayout,
        probs: &[T],
        scale: T,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let c = qv.cols();
        let heads = layout.heads;
        let hd = c / heads;
        let bias_shape = bias.map(|b| self.value(b).shape().to_vec());
        let mut dq = self.ng(q).then(|| Tensor::zeros(qv.shape()));
        let mut dk = self.ng(k).then(|| Tensor::zeros(kv.shape()));
        let mut dv = self.ng(v).then(|| Tensor::zeros(vv.shape()));
        let mut dbias = match (bias, &bias_shape) {
            (Some(b), Some(s)) if self.ng(b) => Some(Tensor::zeros(s)),
            _ => None,
        };
        let mut off = 0;
        let mut ds = Vec::new();
        for gr in &layout.groups {
            if gr.q_len == 0 || gr.k_len == 0 {
                continue;
            }
            for h in 0..heads {
                let n = gr.q_len * gr.k_len;
                let p = &probs[off..off + n];
                let go = MatRef::rows(&g.data()[gr.q_start * c + h * hd..], gr.q_len, hd, c);
                if let Some(dv) = dv.as_mut() {
                    let dvm = MatMut::rows(&mut dv.data_mut()[gr.k_start * c + h * hd..], gr.k_len, hd, c);
                    gemm(T::one(), MatRef::rows(p, gr.q_len, gr.k_len, gr.k_len).t(), go, T::one(), dvm);
                }
                ds.clear();
                ds.resize(n, T::zero());
                let vm = MatRef::rows(&vv.data()[gr.k_start * c + h * hd..], gr.k_len, hd, c);
                gemm(T::one(), go, vm.t(), T::zero(), MatMut::rows(&mut ds, gr.q_len, gr.k_len, gr.k_len));
                for i in 0..gr.q_len {
                    let row = &mut ds[i * gr.k_len..(i + 1) * gr.k_len];
                    let prow = &p[i * gr.k_len..(i + 1) * gr.k_len];
                    let dot: T = row.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (x, &pp) in row.iter_mut().zip(prow) {
                        *x = pp * (*x - dot);
                    }
                }
                if let (Some(db), Some(s)) = (dbias.as_mut(), &bias_shape) {
                    let (bq, bk) = (s[1], s[2]);
                    for i in 0..gr.q_len {
                        let dst = &mut db.data_mut()[(h * bq + i) * bk..(h * bq + i) * bk + gr.k_len];
                        for (o, &x) in dst.iter_mut().zip(&ds[i * gr.k_len..(i + 1) * gr.k_len]) {
                            *o += x;
                        }
                    }
                }
                let dsm = MatRef::rows(&ds, gr.q_len, gr.k_len, gr.k_len);
                if let Some(dq) = dq.as_mut() {
                    let km = MatRef::rows(&kv.data()[gr.k_start * c + h * hd..], gr.k_len, hd, c);
                    let dqm = MatMut::rows(&mut dq.data_mut()[gr.q_start * c + h * hd..], gr.q_len, hd, c);
                    gemm(scale, dsm, km, T::one(), dqm);
                }
                if let Some(dk) = dk.as_mut() {
                    let qm = MatRef::rows(&qv.data()[gr.q_start * c + h * hd..], gr.q_len, hd, c);
                    let dkm = MatMut::rows(&mut dk.data_mut()[gr.k_start * c + h * hd..], gr.k_len, hd, c);
                    gemm(scale, dsm.t(), qm, T::one(), dkm);
                }
                off += n;
            }
        }
        for (var, t) in [(Some(q), dq), (Some(k), dk), (Some(v), dv), (bias, dbias)] {
            if let (Some(var), Some(t)) = (var, t) {
                grad_slot(grads, t.shape(), var).add_assign(&t);
            }
        }
    }

    /// Sums leaf gradients per parameter id (a parameter may appear in several leaves).
    pub fn param_grads(&self, grads: &Grads<T>, num_params: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..num_params).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, &grads.grads[i]) {
                match &mut out[id.0] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

/// Row-wise softmax of a matrix, max-subtracted.
pub fn softmax_rows<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}
