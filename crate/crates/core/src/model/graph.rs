//! A small reverse-mode tape over 2-D matrices.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a valid topological order for the backward pass. Parameter nodes borrow
//! their values from a [`ParamStore`] instead of copying them.

use std::collections::HashMap;

use rand::Rng;

use super::tensor::{gemm, layer_norm_forward, log_softmax, matmul, softmax_prefix, Float, Matrix, View};

pub type NodeId = usize;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Matrix<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    /// Registers a tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, m: Matrix<T>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(m);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: usize) -> &Matrix<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Matrix<T> {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix<T>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.id(name).map(move |i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix<T>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Zero-filled gradient buffers matching every tensor.
    pub fn zeros_like(&self) -> Vec<Matrix<T>> {
        self.tensors.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Matrix::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Shape and masking of one multi-head attention call. Queries and keys are
/// stacked per batch item: rows `b * q_len .. (b + 1) * q_len` of the query
/// matrix belong to item `b`.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Number of real (unpadded) keys per batch item.
    pub key_lens: Vec<usize>,
    /// Query `i` may only see keys `0..=i`.
    pub causal: bool,
}

impl AttentionSpec {
    fn visible(&self, b: usize, i: usize) -> usize {
        let kl = self.key_lens[b].min(self.k_len);
        if self.causal {
            kl.min(i + 1)
        } else {
            kl
        }
    }

    fn probs_offset(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.q_len * self.k_len
    }
}

enum Op<T> {
    Input,
    Param(usize),
    Gather {
        table: NodeId,
        ids: Vec<u32>,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    /// `x · w[..rows]ᵀ`
    MatMulRowsT {
        x: NodeId,
        w: NodeId,
        rows: usize,
    },
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        g: NodeId,
        b: NodeId,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttentionSpec,
        probs: Vec<T>,
        keep: Option<Vec<T>>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        weights: Vec<T>,
        smoothing: T,
        probs: Matrix<T>,
    },
}

struct Node<T> {
    value: Option<Matrix<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Float> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<usize, NodeId>,
}

fn keep_mask<T: Float, R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<T> {
    let scale = T::from_f64(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
        .collect()
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        let node = &self.nodes[id];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(i)) => self.params.get(*i),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, m: Matrix<T>) -> NodeId {
        self.nodes.push(Node {
            value: Some(m),
            op: Op::Input,
            requires_grad: false,
        });
        self.nodes.len() - 1
    }

    /// A parameter node; repeated requests share one node.
    pub fn param(&mut self, id: usize) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let n = self.nodes.len() - 1;
        self.param_nodes.insert(id, n);
        n
    }

    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i as usize));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, f: T) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale(f);
        self.push(out, Op::Scale(a, f), &[a])
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let out = super::tensor::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn matmul_rows_t(&mut self, x: NodeId, w: NodeId, rows: usize) -> NodeId {
        let wv = self.value(w);
        assert!(rows <= wv.rows);
        let out = matmul(self.value(x).view(), wv.rows_view(0, rows).t());
        self.push(out, Op::MatMulRowsT { x, w, rows }, &[x, w])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: NodeId, g: NodeId, b: NodeId) -> NodeId {
        let (y, xhat, inv_std) = layer_norm_forward(self.value(x), self.value(g), self.value(b));
        self.push(y, Op::LayerNorm { x, g, b, xhat, inv_std }, &[x, g, b])
    }

    /// Inverted dropout; a no-op (returns `x`) when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, rng: &mut R) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let mask: Vec<T> = keep_mask(self.value(x).len(), p, rng);
        let mut out = self.value(x).clone();
        for (v, m) in out.data.iter_mut().zip(&mask) {
            *v *= *m;
        }
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Scaled dot-product multi-head attention over stacked batches, with
    /// optional dropout on the attention weights.
    pub fn attention<R: Rng>(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttentionSpec,
        dropout: f64,
        rng: &mut R,
    ) -> NodeId {
        let keep = (dropout > 0.0).then(|| keep_mask(spec.batch * spec.heads * spec.q_len * spec.k_len, dropout, rng));
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), &spec, keep.as_deref());
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
                keep,
            },
            &[q, k, v],
        )
    }

    /// Attention weights (before dropout) of an attention node, laid out as
    /// `[batch][head][q_len][k_len]`.
    pub fn attention_probs(&self, id: NodeId) -> Option<(&AttentionSpec, &[T])> {
        match &self.nodes[id].op {
            Op::Attention { spec, probs, .. } => Some((spec, probs)),
            _ => None,
        }
    }

    /// Summed label-smoothed cross-entropy. Rows with weight zero (padding)
    /// contribute nothing. The smoothing mass is spread uniformly over all
    /// logit columns.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32], weights: &[T], smoothing: f64) -> NodeId {
        let z = self.value(logits);
        assert_eq!(z.rows, targets.len());
        assert_eq!(z.rows, weights.len());
        let v = z.cols;
        let eps = T::from_f64(smoothing);
        let conf = T::one() - eps;
        let uni = T::from_f64(smoothing / v as f64);
        let mut probs = Matrix::zeros(z.rows, v);
        let mut total = T::zero();
        for r in 0..z.rows {
            let logp = log_softmax(z.row(r));
            for (p, lp) in probs.row_mut(r).iter_mut().zip(&logp) {
                *p = lp.exp();
            }
            if weights[r] == T::zero() {
                continue;
            }
            let mut sum_logp = T::zero();
            for &lp in &logp {
                sum_logp += lp;
            }
            let nll = -(conf * logp[targets[r] as usize]) - uni * sum_logp;
            total += weights[r] * nll;
        }
        let out = Matrix::from_vec(1, 1, vec![total]);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smoothing: eps,
                probs,
            },
            &[logits],
        )
    }

    /// Back-propagates `seed · d(node)` and adds the resulting parameter
    /// gradients into `param_grads` (indexed like the [`ParamStore`]).
    pub fn backward(&self, node: NodeId, seed: T, param_grads: &mut [Matrix<T>]) {
        let out = self.value(node);
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut g0 = Matrix::zeros(out.rows, out.cols);
        g0.data.iter_mut().for_each(|v| *v = seed);
        grads[node] = Some(g0);

        for id in (0..=node).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param(p) => param_grads[*p].add_assign(&g),
                Op::Gather { table, ids } => {
                    let gt = self.grad_slot(&mut grads, *table);
                    for (r, &i) in ids.iter().enumerate() {
                        let row = gt.row_mut(i as usize);
                        for (a, b) in row.iter_mut().zip(g.row(r)) {
                            *a += *b;
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &g);
                    self.accumulate(&mut grads, *b, &g);
                }
                Op::Scale(a, f) => {
                    let mut s = g.clone();
                    s.scale(*f);
                    self.accumulate(&mut grads, *a, &s);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.nodes[*x].requires_grad {
                        let gx = self.grad_slot(&mut grads, *x);
                        gemm(T::one(), g.view(), wv.view().t(), T::one(), gx.view_mut());
                    }
                    if self.nodes[*w].requires_grad {
                        let gw = self.grad_slot(&mut grads, *w);
                        gemm(T::one(), xv.view().t(), g.view(), T::one(), gw.view_mut());
                    }
                    if let Some(b) = b {
                        let gb = self.grad_slot(&mut grads, *b);
                        for r in 0..g.rows {
                            for (a, v) in gb.data.iter_mut().zip(g.row(r)) {
                                *a += *v;
                            }
                        }
                    }
                }
                Op::MatMulRowsT { x, w, rows } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.nodes[*x].requires_grad {
                        let gx = self.grad_slot(&mut grads, *x);
                        gemm(T::one(), g.view(), wv.rows_view(0, *rows), T::one(), gx.view_mut());
                    }
                    if self.nodes[*w].requires_grad {
                        let gw = self.grad_slot(&mut grads, *w);
                        let cols = gw.cols;
                        gemm(T::one(), g.view().t(), xv.view(), T::one(), gw.block_mut(0, *rows, 0, cols));
                    }
                }
                Op::Relu(x) => {
                    let y = self.value(id);
                    let mut gx = g.clone();
                    for (d, &v) in gx.data.iter_mut().zip(&y.data) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::LayerNorm { x, g: gain, b, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    let n = xhat.cols;
                    let inv_n = T::from_f64(1.0 / n as f64);
                    let mut dx = Matrix::zeros(g.rows, n);
                    let mut dgain = vec![T::zero(); n];
                    let mut dbias = vec![T::zero(); n];
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..n {
                            dgain[j] += gr[j] * xr[j];
                            dbias[j] += gr[j];
                            dxhat[j] = gr[j] * gv.data[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xr[j];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        let is = inv_std[r];
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = is * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                    self.accumulate(&mut grads, *gain, &Matrix::from_vec(1, n, dgain));
                    self.accumulate(&mut grads, *b, &Matrix::from_vec(1, n, dbias));
                }
                Op::Dropout { x, mask } => {
                    let mut gx = g.clone();
                    for (d, m) in gx.data.iter_mut().zip(mask) {
                        *d *= *m;
                    }
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    probs,
                    keep,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        spec,
                        probs,
                        keep.as_deref(),
                        &g,
                    );
                    self.accumulate(&mut grads, *q, &dq);
                    self.accumulate(&mut grads, *k, &dk);
                    self.accumulate(&mut grads, *v, &dv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    smoothing,
                    probs,
                } => {
                    let seed = g.data[0];
                    let v = probs.cols;
                    let conf = T::one() - *smoothing;
                    let uni = *smoothing / T::from_f64(v as f64);
                    let mut dz = Matrix::zeros(probs.rows, v);
                    for r in 0..probs.rows {
                        let w = weights[r];
                        if w == T::zero() {
                            continue;
                        }
                        let f = seed * w;
                        let row = dz.row_mut(r);
                        for (d, &p) in row.iter_mut().zip(probs.row(r)) {
                            *d = f * (p - uni);
                        }
                        row[targets[r] as usize] -= f * conf;
                    }
                    self.accumulate(&mut grads, *logits, &dz);
                }
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Matrix<T>>], id: NodeId) -> &'g mut Matrix<T> {
        let v = self.value(id);
        grads[id].get_or_insert_with(|| Matrix::zeros(v.rows, v.cols))
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], id: NodeId, g: &Matrix<T>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(m) => m.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

fn head_view<T: Float>(m: &Matrix<T>, b: usize, len: usize, h: usize, dh: usize) -> View<'_, T> {
    m.block(b * len, len, h * dh, dh)
}

/// Forward multi-head attention. Returns the output and the attention
/// weights `[batch][head][q_len][k_len]`.
pub fn attention_forward<T: Float>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    spec: &AttentionSpec,
    keep: Option<&[T]>,
) -> (Matrix<T>, Vec<T>) {
    let d = q.cols;
    assert_eq!(d % spec.heads, 0, "model dim must divide into heads");
    assert_eq!(q.rows, spec.batch * spec.q_len);
    assert_eq!(k.rows, spec.batch * spec.k_len);
    let dh = d / spec.heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let (lq, lk) = (spec.q_len, spec.k_len);
    let mut probs = vec![T::zero(); spec.batch * spec.heads * lq * lk];
    let mut out = Matrix::zeros(q.rows, d);
    let mut dropped = vec![T::zero(); if keep.is_some() { lq * lk } else { 0 }];
    for b in 0..spec.batch {
        for h in 0..spec.heads {
            let off = spec.probs_offset(b, h);
            {
                let s = super::tensor::ViewMut {
                    data: &mut probs,
                    offset: off,
                    rows: lq,
                    cols: lk,
                    rs: lk,
                    cs: 1,
                };
                gemm(scale, head_view(q, b, lq, h, dh), head_view(k, b, lk, h, dh).t(), T::zero(), s);
            }
            for i in 0..lq {
                let row = &mut probs[off + i * lk..off + (i + 1) * lk];
                softmax_prefix(row, spec.visible(b, i));
            }
            let weights: View<'_, T> = match keep {
                Some(mask) => {
                    for (j, o) in dropped.iter_mut().enumerate() {
                        *o = probs[off + j] * mask[off + j];
                    }
                    View {
                        data: &dropped,
                        offset: 0,
                        rows: lq,
                        cols: lk,
                        rs: lk,
                        cs: 1,
                    }
                }
                None => View {
                    data: &probs,
                    offset: off,
                    rows: lq,
                    cols: lk,
                    rs: lk,
                    cs: 1,
                },
            };
            gemm(T::one(), weights, head_view(v, b, lk, h, dh), T::zero(), out.block_mut(b * lq, lq, h * dh, dh));
        }
    }
    (out, probs)
}

#[allow(clippy::type_complexity)]
fn attention_backward<T: Float>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    spec: &AttentionSpec,
    probs: &[T],
    keep: Option<&[T]>,
    g: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let d = q.cols;
    let dh = d / spec.heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let (lq, lk) = (spec.q_len, spec.k_len);
    let mut dq = Matrix::zeros(q.rows, d);
    let mut dk = Matrix::zeros(k.rows, d);
    let mut dv = Matrix::zeros(v.rows, d);
    let mut pd = vec![T::zero(); lq * lk];
    let mut dp = Matrix::zeros(lq, lk);
    for b in 0..spec.batch {
        for h in 0..spec.heads {
            let off = spec.probs_offset(b, h);
            let p = &probs[off..off + lq * lk];
            match keep {
                Some(mask) => {
                    for j in 0..lq * lk {
                        pd[j] = p[j] * mask[off + j];
                    }
                }
                None => pd.copy_from_slice(p),
            }
            let pd_view = View {
                data: &pd,
                offset: 0,
                rows: lq,
                cols: lk,
                rs: lk,
                cs: 1,
            };
            let go = head_view(g, b, lq, h, dh);
            gemm(T::one(), pd_view.t(), go, T::one(), dv.block_mut(b * lk, lk, h * dh, dh));
            gemm(T::one(), go, head_view(v, b, lk, h, dh).t(), T::zero(), dp.view_mut());
            if let Some(mask) = keep {
                for j in 0..lq * lk {
                    dp.data[j] *= mask[off + j];
                }
            }
            // softmax backward, in place: dS = P ⊙ (dP − Σ P dP)
            for i in 0..lq {
                let prow = &p[i * lk..(i + 1) * lk];
                let drow = dp.row_mut(i);
                let mut dot = T::zero();
                for (a, b) in prow.iter().zip(drow.iter()) {
                    dot += *a * *b;
                }
                for (dd, &pp) in drow.iter_mut().zip(prow) {
                    *dd = pp * (*dd - dot);
                }
            }
            gemm(scale, dp.view(), head_view(k, b, lk, h, dh), T::one(), dq.block_mut(b * lq, lq, h * dh, dh));
            gemm(scale, dp.view().t(), head_view(q, b, lq, h, dh), T::one(), dk.block_mut(b * lk, lk, h * dh, dh));
        }
    }
    (dq, dk, dv)
}
