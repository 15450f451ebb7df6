//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a flat tape of nodes built per training step (or per
//! evaluation when only values are needed). Ops compute forward values
//! eagerly through the kernels in [`crate::tensor`]; `backward` walks the
//! tape in reverse and accumulates gradients for the parameter leaves.
//!
//! The engine is deliberately small: matrices only, no broadcasting rules
//! beyond the row broadcast used for biases, and a fused interval-attention
//! op so the attention arithmetic is shared with the cached decoding path.

use std::collections::HashMap;
use std::rc::Rc;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{
    self, interval_attention, layer_norm_rows, matmul, matmul_at, matmul_bt, sigmoid, zeros, Mat,
};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const LN_FLOOR: f64 = 1e-300;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    LayerNorm(usize, f64),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        lo: Rc<Vec<usize>>,
        hi: Rc<Vec<usize>>,
    },
    RowSoftmax(usize),
    Ln(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize, usize),
    MeanRows(usize),
    SumAll(usize),
    MeanAll(usize),
    SignSte(usize),
    PairCrossEntropy(usize, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
    /// Saved per-head attention probabilities / layer-norm row stats.
    aux_probs: Option<Vec<Mat>>,
    aux_rows: Option<(Vec<f64>, Vec<f64>)>,
}

/// Gradient tape. Build ops, then call [`Graph::backward`] on a scalar node.
pub struct Graph {
    nodes: Vec<Node>,
    param_of: Vec<(usize, ParamId)>,
    seen_params: HashMap<ParamId, usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_of: Vec::new(),
            seen_params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            aux_probs: None,
            aux_rows: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `[1,1]` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[(0, 0)]
    }

    /// Constant leaf: participates in forward only.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable parameter leaf. Repeated requests for the same parameter
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.seen_params.get(&id) {
            return NodeId(n);
        }
        let node = self.push(store.value(id).clone(), Op::Leaf, true);
        self.seen_params.insert(id, node.0);
        self.param_of.push((node.0, id));
        node
    }

    /// Parameter used as a frozen constant (e.g. the tokenizer during AR
    /// training).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.constant(store.value(id).clone())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a.0, b.0), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    /// `[m,n] + [1,n]` row broadcast (bias add).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, n) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, n), "add_row: bias shape");
        let v = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a.0, row.0), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        let ng = self.needs(a);
        self.push(v, Op::Scale(a.0, c), ng)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = tensor::silu_mat(self.value(a));
        let ng = self.needs(a);
        self.push(v, Op::Silu(a.0), ng)
    }

    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let (v, means, rstds) = layer_norm_rows(self.value(a), eps);
        let ng = self.needs(a);
        let id = self.push(v, Op::LayerNorm(a.0, eps), ng);
        self.nodes[id.0].aux_rows = Some((means, rstds));
        id
    }

    /// Fused multi-head attention over per-row visibility intervals.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        lo: Rc<Vec<usize>>,
        hi: Rc<Vec<usize>>,
    ) -> NodeId {
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let (out, probs) =
            interval_attention(self.value(q), self.value(k), self.value(v), heads, &lo, &hi, ng);
        let id = self.push(
            out,
            Op::Attention { q: q.0, k: k.0, v: v.0, heads, lo, hi },
            ng,
        );
        self.nodes[id.0].aux_probs = probs;
        id
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (m, n) = x.dim();
        let mut v = zeros(m, n);
        for i in 0..m {
            let row = x.row(i);
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - maxv).exp();
                v[(i, j)] = e;
                denom += e;
            }
            for j in 0..n {
                v[(i, j)] /= denom;
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::RowSoftmax(a.0), ng)
    }

    /// Natural log with a 1e-300 floor so probabilities that underflow to
    /// exactly zero stay finite (0 * ln(eps) = 0 instead of NaN).
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(LN_FLOOR).ln());
        let ng = self.needs(a);
        self.push(v, Op::Ln(a.0), ng)
    }

    pub fn gather_rows(&mut self, src: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let s = self.value(src);
        let (_, n) = s.dim();
        let mut v = zeros(idx.len(), n);
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&s.row(r));
        }
        let ng = self.needs(src);
        self.push(v, Op::GatherRows(src.0, idx), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).dim().1;
        let m: usize = parts.iter().map(|&p| self.value(p).dim().0).sum();
        let mut v = zeros(m, n);
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            let rows = pv.dim().0;
            v.slice_mut(ndarray::s![at..at + rows, ..]).assign(pv);
            at += rows;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), ng)
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let v = self
            .value(src)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let ng = self.needs(src);
        self.push(v, Op::SliceRows(src.0, start, len), ng)
    }

    /// Column means: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (m, n) = x.dim();
        let mut v = zeros(1, n);
        for i in 0..m {
            for j in 0..n {
                v[(0, j)] += x[(i, j)];
            }
        }
        v /= m as f64;
        let ng = self.needs(a);
        self.push(v, Op::MeanRows(a.0), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Mat::from_elem((1, 1), s), Op::SumAll(a.0), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let s = x.sum() / (x.len() as f64);
        let ng = self.needs(a);
        self.push(Mat::from_elem((1, 1), s), Op::MeanAll(a.0), ng)
    }

    /// Sign with straight-through gradient: forward `sign(x)` with
    /// `sign(0) = +1`, backward identity.
    pub fn sign_ste(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(crate::binq::sign_unit);
        let ng = self.needs(a);
        self.push(v, Op::SignSte(a.0), ng)
    }

    /// Mean two-way cross-entropy over logit pairs.
    ///
    /// `logits` is `[m, 2d]` (pair `(2b, 2b+1)` scores `-1` / `+1` for bit b),
    /// `targets` is `[m, d]` with entries in {-1, +1}. Returns `[1,1]`.
    pub fn pair_cross_entropy(&mut self, logits: NodeId, targets: Mat) -> NodeId {
        let l = self.value(logits);
        let (m, two_d) = l.dim();
        let d = two_d / 2;
        assert_eq!(targets.dim(), (m, d), "pair_cross_entropy: target shape");
        let mut loss = 0.0;
        for i in 0..m {
            for b in 0..d {
                let (ln_, lp) = (l[(i, 2 * b)], l[(i, 2 * b + 1)]);
                let maxv = ln_.max(lp);
                let z = (ln_ - maxv).exp() + (lp - maxv).exp();
                let picked = if targets[(i, b)] > 0.0 { lp } else { ln_ };
                loss += -(picked - maxv) + z.ln();
            }
        }
        loss /= (m * d) as f64;
        let ng = self.needs(logits);
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::PairCrossEntropy(logits.0, targets),
            ng,
        )
    }

    /// Linear layer helper: `x @ w + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Run reverse accumulation from a scalar node and return per-parameter
    /// gradients (zero matrices for parameters the loss does not reach).
    pub fn backward(&mut self, loss: NodeId) -> Vec<(ParamId, Mat)> {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward: loss must be [1,1]");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        self.param_of
            .iter()
            .map(|&(node, pid)| {
                let g = grads[node]
                    .take()
                    .unwrap_or_else(|| zeros(self.nodes[node].value.dim().0, self.nodes[node].value.dim().1));
                (pid, g)
            })
            .collect()
    }

    fn accum(grads: &mut [Option<Mat>], idx: usize, add: Mat) {
        match &mut grads[idx] {
            Some(g) => *g += &add,
            slot @ None => *slot = Some(add),
        }
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[*a].needs_grad {
                    Self::accum(grads, *a, matmul_bt(g, &self.nodes[*b].value));
                }
                if self.nodes[*b].needs_grad {
                    Self::accum(grads, *b, matmul_at(&self.nodes[*a].value, g));
                }
            }
            Op::Add(a, b) => {
                if self.nodes[*a].needs_grad {
                    Self::accum(grads, *a, g.clone());
                }
                if self.nodes[*b].needs_grad {
                    Self::accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[*a].needs_grad {
                    Self::accum(grads, *a, g.clone());
                }
                if self.nodes[*b].needs_grad {
                    Self::accum(grads, *b, -g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].needs_grad {
                    Self::accum(grads, *a, g * &self.nodes[*b].value);
                }
                if self.nodes[*b].needs_grad {
                    Self::accum(grads, *b, g * &self.nodes[*a].value);
                }
            }
            Op::AddRow(a, row) => {
                if self.nodes[*a].needs_grad {
                    Self::accum(grads, *a, g.clone());
                }
                if self.nodes[*row].needs_grad {
                    let (m, n) = g.dim();
                    let mut rg = zeros(1, n);
                    for r in 0..m {
                        for c in 0..n {
                            rg[(0, c)] += g[(r, c)];
                        }
                    }
                    Self::accum(grads, *row, rg);
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[*a].needs_grad {
                    Self::accum(grads, *a, g * *c);
                }
            }
            Op::Silu(a) => {
                if self.nodes[*a].needs_grad {
                    let x = &self.nodes[*a].value;
                    let dx = ndarray::Zip::from(g).and(x).map_collect(|&gv, &xv| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (1.0 - s))
                    });
                    Self::accum(grads, *a, dx);
                }
            }
            Op::LayerNorm(a, _eps) => {
                if self.nodes[*a].needs_grad {
                    let y = &node.value;
                    let (_, rstds) = {
                        let aux = node.aux_rows.as_ref().expect("layernorm aux");
                        (&aux.0, &aux.1)
                    };
                    let (m, n) = y.dim();
                    let nf = n as f64;
                    let mut dx = zeros(m, n);
                    for r in 0..m {
                        let mut mean_g = 0.0;
                        let mut mean_gy = 0.0;
                        for c in 0..n {
                            mean_g += g[(r, c)];
                            mean_gy += g[(r, c)] * y[(r, c)];
                        }
                        mean_g /= nf;
                        mean_gy /= nf;
                        for c in 0..n {
                            dx[(r, c)] = rstds[r] * (g[(r, c)] - mean_g - y[(r, c)] * mean_gy);
                        }
                    }
                    Self::accum(grads, *a, dx);
                }
            }
            Op::Attention { q, k, v, heads, lo, hi } => {
                let probs = node.aux_probs.as_ref().expect("attention probs");
                let qv = &self.nodes[*q].value;
                let kv = &self.nodes[*k].value;
                let vv = &self.nodes[*v].value;
                let (qm, width) = qv.dim();
                let km = kv.dim().0;
                let hd = width / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = zeros(qm, width);
                let mut dk = zeros(km, width);
                let mut dv = zeros(km, width);
                for h in 0..*heads {
                    let off = h * hd;
                    let p = &probs[h];
                    let go = g.slice(ndarray::s![.., off..off + hd]).to_owned();
                    let qh = qv.slice(ndarray::s![.., off..off + hd]).to_owned();
                    let kh = kv.slice(ndarray::s![.., off..off + hd]).to_owned();
                    let vh = vv.slice(ndarray::s![.., off..off + hd]).to_owned();
                    // dV_h = P^T dO_h
                    let dvh = matmul_at(p, &go);
                    // dP = dO_h V_h^T; restricted to the interval (P is zero
                    // outside so the softmax backward stays correct).
                    let dp = matmul_bt(&go, &vh);
                    let mut dlogit = zeros(qm, km);
                    for i in 0..qm {
                        let mut dot = 0.0;
                        for j in lo[i]..hi[i] {
                            dot += dp[(i, j)] * p[(i, j)];
                        }
                        for j in lo[i]..hi[i] {
                            dlogit[(i, j)] = p[(i, j)] * (dp[(i, j)] - dot);
                        }
                    }
                    let dqh = matmul(&dlogit, &kh) * scale;
                    let dkh = matmul_at(&dlogit, &qh) * scale;
                    dq.slice_mut(ndarray::s![.., off..off + hd]).assign(&dqh);
                    dk.slice_mut(ndarray::s![.., off..off + hd]).assign(&dkh);
                    dv.slice_mut(ndarray::s![.., off..off + hd]).assign(&dvh);
                }
                if self.nodes[*q].needs_grad {
                    Self::accum(grads, *q, dq);
                }
                if self.nodes[*k].needs_grad {
                    Self::accum(grads, *k, dk);
                }
                if self.nodes[*v].needs_grad {
                    Self::accum(grads, *v, dv);
                }
            }
            Op::RowSoftmax(a) => {
                if self.nodes[*a].needs_grad {
                    let y = &node.value;
                    let (m, n) = y.dim();
                    let mut dx = zeros(m, n);
                    for r in 0..m {
                        let mut dot = 0.0;
                        for c in 0..n {
                            dot += g[(r, c)] * y[(r, c)];
                        }
                        for c in 0..n {
                            dx[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    Self::accum(grads, *a, dx);
                }
            }
            Op::Ln(a) => {
                if self.nodes[*a].needs_grad {
                    let x = &self.nodes[*a].value;
                    let dx = ndarray::Zip::from(g)
                        .and(x)
                        .map_collect(|&gv, &xv| gv / xv.max(LN_FLOOR));
                    Self::accum(grads, *a, dx);
                }
            }
            Op::GatherRows(src, idx) => {
                if self.nodes[*src].needs_grad {
                    let (sm, sn) = self.nodes[*src].value.dim();
                    let mut ds = zeros(sm, sn);
                    for (i, &r) in idx.iter().enumerate() {
                        for c in 0..sn {
                            ds[(r, c)] += g[(i, c)];
                        }
                    }
                    Self::accum(grads, *src, ds);
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.dim().0;
                    if self.nodes[p].needs_grad {
                        let gp = g.slice(ndarray::s![at..at + rows, ..]).to_owned();
                        Self::accum(grads, p, gp);
                    }
                    at += rows;
                }
            }
            Op::SliceRows(src, start, len) => {
                if self.nodes[*src].needs_grad {
                    let (sm, sn) = self.nodes[*src].value.dim();
                    let mut ds = zeros(sm, sn);
                    ds.slice_mut(ndarray::s![*start..*start + *len, ..]).assign(g);
                    Self::accum(grads, *src, ds);
                }
            }
            Op::MeanRows(a) => {
                if self.nodes[*a].needs_grad {
                    let (m, n) = self.nodes[*a].value.dim();
                    let mut dx = zeros(m, n);
                    for r in 0..m {
                        for c in 0..n {
                            dx[(r, c)] = g[(0, c)] / m as f64;
                        }
                    }
                    Self::accum(grads, *a, dx);
                }
            }
            Op::SumAll(a) => {
                if self.nodes[*a].needs_grad {
                    let (m, n) = self.nodes[*a].value.dim();
                    Self::accum(grads, *a, Mat::from_elem((m, n), g[(0, 0)]));
                }
            }
            Op::MeanAll(a) => {
                if self.nodes[*a].needs_grad {
                    let (m, n) = self.nodes[*a].value.dim();
                    let c = g[(0, 0)] / ((m * n) as f64);
                    Self::accum(grads, *a, Mat::from_elem((m, n), c));
                }
            }
            Op::SignSte(a) => {
                if self.nodes[*a].needs_grad {
                    Self::accum(grads, *a, g.clone());
                }
            }
            Op::PairCrossEntropy(logits, targets) => {
                if self.nodes[*logits].needs_grad {
                    let l = &self.nodes[*logits].value;
                    let (m, two_d) = l.dim();
                    let d = two_d / 2;
                    let scale = g[(0, 0)] / ((m * d) as f64);
                    let mut dl = zeros(m, two_d);
                    for i in 0..m {
                        for b in 0..d {
                            let (ln_, lp) = (l[(i, 2 * b)], l[(i, 2 * b + 1)]);
                            let maxv = ln_.max(lp);
                            let en = (ln_ - maxv).exp();
                            let ep = (lp - maxv).exp();
                            let z = en + ep;
                            let (pn, pp) = (en / z, ep / z);
                            let pos = targets[(i, b)] > 0.0;
                            dl[(i, 2 * b)] = scale * (pn - if pos { 0.0 } else { 1.0 });
                            dl[(i, 2 * b + 1)] = scale * (pp - if pos { 1.0 } else { 0.0 });
                        }
                    }
                    Self::accum(grads, *logits, dl);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_grads, GradCheck};
    use crate::nn::randn_mat;
    use ndarray::array;

    #[test]
    fn matmul_add_backward_matches_fd() {
        let mut store = ParamStore::new();
        let w = store.add("w", randn_mat(&mut crate::rng::stream(1, 0), 3, 4, 0.5));
        let b = store.add("b", randn_mat(&mut crate::rng::stream(1, 1), 1, 4, 0.5));
        let x = randn_mat(&mut crate::rng::stream(1, 2), 5, 3, 1.0);
        let report = check_param_grads(
            &mut store,
            &[w, b],
            |g, s| {
                let xn = g.constant(x.clone());
                let wn = g.param(s, w);
                let bn = g.param(s, b);
                let h = g.linear(xn, wn, bn);
                let h = g.silu(h);
                g.mean_all(h)
            },
            GradCheck::default(),
        );
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn layer_norm_softmax_backward_matches_fd() {
        let mut store = ParamStore::new();
        let w = store.add("w", randn_mat(&mut crate::rng::stream(2, 0), 4, 4, 0.5));
        let x = randn_mat(&mut crate::rng::stream(2, 1), 6, 4, 1.0);
        let report = check_param_grads(
            &mut store,
            &[w],
            |g, s| {
                let xn = g.constant(x.clone());
                let wn = g.param(s, w);
                let h = g.matmul(xn, wn);
                let h = g.layer_norm(h, 1e-6);
                let sm = g.row_softmax(h);
                let lsm = g.ln(sm);
                let prod = g.mul(sm, lsm);
                g.sum_all(prod)
            },
            GradCheck::default(),
        );
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn attention_backward_matches_fd() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(3, 0);
        let wq = store.add("wq", randn_mat(&mut rng, 4, 4, 0.5));
        let wk = store.add("wk", randn_mat(&mut rng, 4, 4, 0.5));
        let wv = store.add("wv", randn_mat(&mut rng, 4, 4, 0.5));
        let x = randn_mat(&mut rng, 5, 4, 1.0);
        let lo = Rc::new(vec![0usize; 5]);
        let hi = Rc::new(vec![1usize, 2, 3, 4, 5]);
        let report = check_param_grads(
            &mut store,
            &[wq, wk, wv],
            |g, s| {
                let xn = g.constant(x.clone());
                let (wqn, wkn, wvn) = (g.param(s, wq), g.param(s, wk), g.param(s, wv));
                let q = g.matmul(xn, wqn);
                let k = g.matmul(xn, wkn);
                let v = g.matmul(xn, wvn);
                let o = g.attention(q, k, v, 2, lo.clone(), hi.clone());
                g.mean_all(o)
            },
            GradCheck::default(),
        );
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn gather_concat_slice_backward_matches_fd() {
        let mut store = ParamStore::new();
        let emb = store.add("emb", randn_mat(&mut crate::rng::stream(4, 0), 6, 3, 0.5));
        let idx = Rc::new(vec![0usize, 2, 2, 5]);
        let report = check_param_grads(
            &mut store,
            &[emb],
            |g, s| {
                let e = g.param(s, emb);
                let rows = g.gather_rows(e, idx.clone());
                let top = g.slice_rows(rows, 0, 2);
                let both = g.concat_rows(&[top, rows]);
                let m = g.mean_rows(both);
                g.sum_all(m)
            },
            GradCheck::default(),
        );
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn pair_cross_entropy_backward_matches_fd() {
        let mut store = ParamStore::new();
        let w = store.add("w", randn_mat(&mut crate::rng::stream(5, 0), 3, 8, 0.5));
        let z = randn_mat(&mut crate::rng::stream(5, 1), 2, 3, 1.0);
        let targets = array![[1.0, -1.0, 1.0, 1.0], [-1.0, -1.0, 1.0, -1.0]];
        let report = check_param_grads(
            &mut store,
            &[w],
            |g, s| {
                let zn = g.constant(z.clone());
                let wn = g.param(s, w);
                let logits = g.matmul(zn, wn);
                g.pair_cross_entropy(logits, targets.clone())
            },
            GradCheck::default(),
        );
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn sign_ste_passes_gradient_through() {
        let mut store = ParamStore::new();
        let p = store.add("p", array![[0.3, -0.7]]);
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let q = g.sign_ste(x);
        assert_eq!(g.value(q), &array![[1.0, -1.0]]);
        let s = g.sum_all(q);
        let grads = g.backward(s);
        assert_eq!(grads[0].1, array![[1.0, 1.0]]);
    }

    #[test]
    fn duplicate_param_requests_share_a_node() {
        let mut store = ParamStore::new();
        let p = store.add("p", array![[2.0]]);
        let mut g = Graph::new();
        let a = g.param(&store, p);
        let b = g.param(&store, p);
        assert_eq!(a, b);
        let prod = g.mul(a, b);
        let s = g.sum_all(prod);
        let grads = g.backward(s);
        // d(p^2)/dp = 2p = 4
        assert_eq!(grads[0].1, array![[4.0]]);
    }
}
