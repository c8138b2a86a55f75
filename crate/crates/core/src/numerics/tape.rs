//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records operations in execution order; every node stores its
//! forward value plus what its backward rule needs. [`Tape::backward`] walks
//! the nodes in reverse, which is a reverse topological order because inputs
//! always precede their consumers. Nodes that do not depend on a
//! gradient-requiring leaf are skipped entirely, so frozen weights never
//! receive (or cost) a gradient.
//!
//! Fused operations (RMS norm, rotary embedding, causal grouped-query
//! attention, cross-entropy, tempered KL) keep the graph small for the
//! transformer workloads this crate trains.

use alloc::vec;
use alloc::vec::Vec;

use super::matrix::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Matrix, Real};
use crate::error::{shape_err, value_err};
use crate::Result;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `a ⊙ v` with `v` a 1×cols row broadcast over rows.
    MulRow(Var, Var),
    Sigmoid(Var),
    Silu(Var),
    RmsNorm {
        x: Var,
        weight: Var,
        eps: T,
    },
    Rope {
        x: Var,
        head_dim: usize,
        base: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        n_kv_heads: usize,
        head_dim: usize,
    },
    Embedding {
        table: Var,
        tokens: Vec<usize>,
    },
    /// Mean next-token NLL over rows with a target.
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
    },
    /// `τ²/|Ω| Σ_{t∈Ω} KL(softmax(teacher_t/τ) ‖ softmax(z_t/τ))`.
    TemperedKl {
        logits: Var,
        teacher_probs: Matrix<T>,
        tau: T,
        mask: Vec<bool>,
    },
}

#[derive(Debug, Clone)]
enum Saved<T> {
    None,
    /// Per-row `1/rms`.
    InvRms(Vec<T>),
    /// Attention probabilities, one T×T matrix per query head.
    Probs(Vec<Matrix<T>>),
    /// Row softmax of the (tempered) logits.
    Softmax(Matrix<T>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    saved: Saved<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that did not require one.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Matrix<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            saved: Saved::None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.leaf(value, false)
    }

    fn record(&mut self, op: Op<T>) -> Result<Var> {
        let requires_grad = inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        let (value, saved) = evaluate(&op, |v| &self.nodes[v.0].value)?;
        self.nodes.push(Node {
            value,
            op,
            saved,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// `a · bᵀ`; with `b` a `d_out×d_in` weight this is the linear map `x Wᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMulBT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.record(Op::Scale(a, s))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::MulRow(a, row))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Silu(a))
    }

    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: T) -> Result<Var> {
        self.record(Op::RmsNorm { x, weight, eps })
    }

    /// Rotary position embedding over consecutive `head_dim`-wide column
    /// blocks; row `t` is position `t`.
    pub fn rope(&mut self, x: Var, head_dim: usize, base: f64) -> Result<Var> {
        self.record(Op::Rope { x, head_dim, base })
    }

    /// Causal softmax attention where each group of `n_heads / n_kv_heads`
    /// query heads shares one key/value head.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        n_kv_heads: usize,
        head_dim: usize,
    ) -> Result<Var> {
        self.record(Op::Attention {
            q,
            k,
            v,
            n_heads,
            n_kv_heads,
            head_dim,
        })
    }

    pub fn embedding(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        self.record(Op::Embedding {
            table,
            tokens: tokens.to_vec(),
        })
    }

    /// Mean NLL over the rows that carry a target; errors if none do.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        self.record(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        })
    }

    /// Tempered KL against fixed teacher logits (no gradient flows to them).
    pub fn tempered_kl(
        &mut self,
        logits: Var,
        teacher_logits: &Matrix<T>,
        tau: T,
        mask: &[bool],
    ) -> Result<Var> {
        if !(tau > T::zero()) {
            return Err(value_err!("temperature must be positive"));
        }
        let teacher_probs = softmax_rows(teacher_logits, tau);
        self.record(Op::TemperedKl {
            logits,
            teacher_probs,
            tau,
            mask: mask.to_vec(),
        })
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Matrix<T>>> {
        let mut values: Vec<Matrix<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => evaluate(op, |v| &values[v.0])?.0,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Gradients of the scalar (1×1) node `loss` with respect to every
    /// gradient-requiring node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(shape_err!("backward needs a 1x1 loss"));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            // Interior gradients are not needed after propagation; keep the
            // slot filled so callers can still inspect it.
            grads[idx] = Some(dy);
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, dy: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    let g = slot(grads, a, val(a).shape());
                    gemm_nt(dy, val(b), g);
                }
                if self.wants(b) {
                    let g = slot(grads, b, val(b).shape());
                    gemm_tn(val(a), dy, g);
                }
            }
            &Op::MatMulBT(a, b) => {
                if self.wants(a) {
                    let g = slot(grads, a, val(a).shape());
                    gemm_nn(dy, val(b), g);
                }
                if self.wants(b) {
                    let g = slot(grads, b, val(b).shape());
                    gemm_tn(dy, val(a), g);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        slot(grads, v, dy.shape()).add_assign(dy);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let g = slot(grads, a, dy.shape());
                    for ((gi, &d), &bv) in g.data_mut().iter_mut().zip(dy.data()).zip(val(b).data()) {
                        *gi += d * bv;
                    }
                }
                if self.wants(b) {
                    let g = slot(grads, b, dy.shape());
                    for ((gi, &d), &av) in g.data_mut().iter_mut().zip(dy.data()).zip(val(a).data()) {
                        *gi += d * av;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if self.wants(a) {
                    let g = slot(grads, a, dy.shape());
                    axpy(s, dy.data(), g.data_mut());
                }
            }
            &Op::MulRow(a, r) => {
                let (rows, cols) = dy.shape();
                if self.wants(a) {
                    let rv = val(r).data();
                    let g = slot(grads, a, dy.shape());
                    for i in 0..rows {
                        for ((gi, &d), &w) in g.row_mut(i).iter_mut().zip(dy.row(i)).zip(rv) {
                            *gi += d * w;
                        }
                    }
                }
                if self.wants(r) {
                    let av = val(a);
                    let g = slot(grads, r, (1, cols));
                    for i in 0..rows {
                        for ((gi, &d), &x) in g.data_mut().iter_mut().zip(dy.row(i)).zip(av.row(i)) {
                            *gi += d * x;
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if self.wants(a) {
                    let g = slot(grads, a, dy.shape());
                    for ((gi, &d), &y) in g.data_mut().iter_mut().zip(dy.data()).zip(node.value.data()) {
                        *gi += d * y * (T::one() - y);
                    }
                }
            }
            &Op::Silu(a) => {
                if self.wants(a) {
                    let g = slot(grads, a, dy.shape());
                    for ((gi, &d), &x) in g.data_mut().iter_mut().zip(dy.data()).zip(val(a).data()) {
                        let s = sigmoid(x);
                        *gi += d * s * (T::one() + x * (T::one() - s));
                    }
                }
            }
            &Op::RmsNorm { x, weight, .. } => {
                let Saved::InvRms(inv) = &node.saved else { unreachable!() };
                let xv = val(x);
                let w = val(weight).data();
                let (rows, cols) = xv.shape();
                let n = T::cast(cols as f64);
                if self.wants(x) {
                    let g = slot(grads, x, xv.shape());
                    for i in 0..rows {
                        let r = inv[i];
                        let xr = xv.row(i);
                        let dr = dy.row(i);
                        let mut proj = T::zero();
                        for j in 0..cols {
                            proj += dr[j] * w[j] * xr[j];
                        }
                        let c = r * r * r * proj / n;
                        for (j, gi) in g.row_mut(i).iter_mut().enumerate() {
                            *gi += r * dr[j] * w[j] - c * xr[j];
                        }
                    }
                }
                if self.wants(weight) {
                    let g = slot(grads, weight, (1, cols));
                    for i in 0..rows {
                        let r = inv[i];
                        for ((gi, &d), &xj) in g.data_mut().iter_mut().zip(dy.row(i)).zip(xv.row(i)) {
                            *gi += d * xj * r;
                        }
                    }
                }
            }
            &Op::Rope { x, head_dim, base } => {
                if self.wants(x) {
                    let g = slot(grads, x, dy.shape());
                    rope_apply(dy, head_dim, base, true, g);
                }
            }
            &Op::Attention {
                q,
                k,
                v,
                n_heads,
                n_kv_heads,
                head_dim,
            } => {
                let Saved::Probs(probs) = &node.saved else { unreachable!() };
                self.attention_backward(
                    (q, k, v),
                    (n_heads, n_kv_heads, head_dim),
                    probs,
                    dy,
                    grads,
                );
            }
            Op::Embedding { table, tokens } => {
                let table = *table;
                if self.wants(table) {
                    let g = slot(grads, table, val(table).shape());
                    for (i, &t) in tokens.iter().enumerate() {
                        axpy(T::one(), dy.row(i), g.row_mut(t));
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let logits = *logits;
                let Saved::Softmax(p) = &node.saved else { unreachable!() };
                if self.wants(logits) {
                    let count = targets.iter().filter(|t| t.is_some()).count();
                    let scale = dy.get(0, 0) / T::cast(count as f64);
                    let g = slot(grads, logits, p.shape());
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let grow = g.row_mut(i);
                        axpy(scale, p.row(i), grow);
                        grow[t] -= scale;
                    }
                }
            }
            Op::TemperedKl {
                logits,
                teacher_probs,
                tau,
                mask,
            } => {
                let logits = *logits;
                let Saved::Softmax(q) = &node.saved else { unreachable!() };
                if self.wants(logits) {
                    let count = mask.iter().filter(|&&m| m).count();
                    // d/dz [τ² KL(p ‖ softmax(z/τ))] = τ (q − p)
                    let scale = dy.get(0, 0) * *tau / T::cast(count as f64);
                    let g = slot(grads, logits, q.shape());
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        let grow = g.row_mut(i);
                        axpy(scale, q.row(i), grow);
                        axpy(-scale, teacher_probs.row(i), grow);
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        (q, k, v): (Var, Var, Var),
        (n_heads, n_kv_heads, hd): (usize, usize, usize),
        probs: &[Matrix<T>],
        dy: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
    ) {
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let t_len = qv.rows();
        let group = n_heads / n_kv_heads;
        let scale = T::one() / T::cast(hd as f64).sqrt();
        let mut dq = Matrix::zeros(t_len, qv.cols());
        let mut dk = Matrix::zeros(t_len, kv.cols());
        let mut dv = Matrix::zeros(t_len, vv.cols());
        for h in 0..n_heads {
            let g = h / group;
            let qh = qv.columns(h * hd..(h + 1) * hd);
            let kh = kv.columns(g * hd..(g + 1) * hd);
            let vh = vv.columns(g * hd..(g + 1) * hd);
            let doh = dy.columns(h * hd..(h + 1) * hd);
            let p = &probs[h];
            // dP = dO Vᵀ (causal part only), dS = P ⊙ (dP − rowsum(P ⊙ dP))
            let mut ds = Matrix::zeros(t_len, t_len);
            for i in 0..t_len {
                let prow = p.row(i);
                let mut acc = T::zero();
                let dsrow = ds.row_mut(i);
                for j in 0..=i {
                    let dp = dot(doh.row(i), vh.row(j));
                    dsrow[j] = dp;
                    acc += prow[j] * dp;
                }
                for j in 0..=i {
                    dsrow[j] = prow[j] * (dsrow[j] - acc) * scale;
                }
            }
            let mut dqh = Matrix::zeros(t_len, hd);
            gemm_nn(&ds, &kh, &mut dqh);
            let mut dkh = Matrix::zeros(t_len, hd);
            gemm_tn(&ds, &qh, &mut dkh);
            let mut dvh = Matrix::zeros(t_len, hd);
            gemm_tn(p, &doh, &mut dvh);
            for i in 0..t_len {
                axpy(T::one(), dqh.row(i), &mut dq.row_mut(i)[h * hd..(h + 1) * hd]);
                axpy(T::one(), dkh.row(i), &mut dk.row_mut(i)[g * hd..(g + 1) * hd]);
                axpy(T::one(), dvh.row(i), &mut dv.row_mut(i)[g * hd..(g + 1) * hd]);
            }
        }
        for (var, m) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                slot(grads, var, m.shape()).add_assign(&m);
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Matrix<T>>], v: Var, shape: (usize, usize)) -> &mut Matrix<T> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => Vec::new(),
        &Op::MatMul(a, b) | &Op::MatMulBT(a, b) | &Op::Add(a, b) | &Op::Mul(a, b) | &Op::MulRow(a, b) => {
            vec![a, b]
        }
        &Op::Scale(a, _) | &Op::Sigmoid(a) | &Op::Silu(a) => vec![a],
        &Op::RmsNorm { x, weight, .. } => vec![x, weight],
        &Op::Rope { x, .. } => vec![x],
        &Op::Attention { q, k, v, .. } => vec![q, k, v],
        Op::Embedding { table, .. } => vec![*table],
        Op::CrossEntropy { logits, .. } | Op::TemperedKl { logits, .. } => vec![*logits],
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Row softmax of `m / tau`, accumulated in `f64`.
pub(crate) fn softmax_rows<T: Real>(m: &Matrix<T>, tau: T) -> Matrix<T> {
    let inv = 1.0 / tau.as_f64();
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x.as_f64() * inv));
        let exps: Vec<f64> = row.iter().map(|&x| libm::exp(x.as_f64() * inv - mx)).collect();
        let z: f64 = exps.iter().sum();
        for (o, e) in out.row_mut(i).iter_mut().zip(exps) {
            *o = T::cast(e / z);
        }
    }
    out
}

/// Row log-softmax of `m / tau` in `f64`.
pub fn log_softmax_rows<T: Real>(m: &Matrix<T>, tau: f64) -> Matrix<f64> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x.as_f64() / tau));
        let lz = mx + libm::log(row.iter().map(|&x| libm::exp(x.as_f64() / tau - mx)).sum::<f64>());
        for (o, &x) in out.row_mut(i).iter_mut().zip(row) {
            *o = x.as_f64() / tau - lz;
        }
    }
    out
}

fn rope_apply<T: Real>(x: &Matrix<T>, head_dim: usize, base: f64, inverse: bool, out: &mut Matrix<T>) {
    let half = head_dim / 2;
    let heads = x.cols() / head_dim;
    for t in 0..x.rows() {
        let xr = x.row(t);
        let orow = out.row_mut(t);
        for i in 0..half {
            let freq = libm::pow(base, -2.0 * i as f64 / head_dim as f64);
            let angle = t as f64 * freq;
            let c = T::cast(libm::cos(angle));
            let s = if inverse {
                -T::cast(libm::sin(angle))
            } else {
                T::cast(libm::sin(angle))
            };
            for h in 0..heads {
                let a = h * head_dim + i;
                let b = a + half;
                let (x1, x2) = (xr[a], xr[b]);
                orow[a] += x1 * c - x2 * s;
                orow[b] += x1 * s + x2 * c;
            }
        }
    }
}

fn evaluate<'a, T: Real>(
    op: &Op<T>,
    val: impl Fn(Var) -> &'a Matrix<T>,
) -> Result<(Matrix<T>, Saved<T>)> {
    let none = |m: Matrix<T>| Ok((m, Saved::None));
    match op {
        Op::Leaf => Err(shape_err!("leaf nodes are not evaluated")),
        &Op::MatMul(a, b) => none(val(a).matmul(val(b))?),
        &Op::MatMulBT(a, b) => none(val(a).matmul_bt(val(b))?),
        &Op::Add(a, b) => none(val(a).add(val(b))?),
        &Op::Mul(a, b) => none(val(a).hadamard(val(b))?),
        &Op::Scale(a, s) => none(val(a).scale(s)),
        &Op::MulRow(a, r) => {
            let (a, r) = (val(a), val(r));
            if r.rows() != 1 || r.cols() != a.cols() {
                return Err(shape_err!("row broadcast {}x{} over {}x{}", r.rows(), r.cols(), a.rows(), a.cols()));
            }
            let mut out = a.clone();
            for i in 0..a.rows() {
                for (o, &w) in out.row_mut(i).iter_mut().zip(r.data()) {
                    *o *= w;
                }
            }
            none(out)
        }
        &Op::Sigmoid(a) => none(val(a).map(sigmoid)),
        &Op::Silu(a) => none(val(a).map(|x| x * sigmoid(x))),
        &Op::RmsNorm { x, weight, eps } => {
            let (x, w) = (val(x), val(weight));
            if w.rows() != 1 || w.cols() != x.cols() {
                return Err(shape_err!("norm weight {}x{} for width {}", w.rows(), w.cols(), x.cols()));
            }
            let n = T::cast(x.cols() as f64);
            let mut out = Matrix::zeros(x.rows(), x.cols());
            let mut inv = Vec::with_capacity(x.rows());
            for i in 0..x.rows() {
                let xr = x.row(i);
                let ms = dot(xr, xr) / n;
                let r = T::one() / (ms + eps).sqrt();
                inv.push(r);
                for ((o, &xj), &wj) in out.row_mut(i).iter_mut().zip(xr).zip(w.data()) {
                    *o = xj * r * wj;
                }
            }
            Ok((out, Saved::InvRms(inv)))
        }
        &Op::Rope { x, head_dim, base } => {
            let x = val(x);
            if head_dim == 0 || head_dim % 2 != 0 || x.cols() % head_dim != 0 {
                return Err(shape_err!("rope head_dim {head_dim} for width {}", x.cols()));
            }
            let mut out = Matrix::zeros(x.rows(), x.cols());
            rope_apply(x, head_dim, base, false, &mut out);
            none(out)
        }
        &Op::Attention {
            q,
            k,
            v,
            n_heads,
            n_kv_heads,
            head_dim: hd,
        } => {
            let (q, k, v) = (val(q), val(k), val(v));
            if n_kv_heads == 0
                || n_heads % n_kv_heads != 0
                || q.cols() != n_heads * hd
                || k.cols() != n_kv_heads * hd
                || v.shape() != k.shape()
                || q.rows() != k.rows()
            {
                return Err(shape_err!(
                    "attention q {:?} k {:?} v {:?} with {n_heads}/{n_kv_heads} heads of {hd}",
                    q.shape(),
                    k.shape(),
                    v.shape()
                ));
            }
            let t_len = q.rows();
            let group = n_heads / n_kv_heads;
            let scale = T::one() / T::cast(hd as f64).sqrt();
            let mut out = Matrix::zeros(t_len, q.cols());
            let mut probs = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let g = h / group;
                let qh = q.columns(h * hd..(h + 1) * hd);
                let kh = k.columns(g * hd..(g + 1) * hd);
                let vh = v.columns(g * hd..(g + 1) * hd);
                let mut p = Matrix::zeros(t_len, t_len);
                for i in 0..t_len {
                    let prow = p.row_mut(i);
                    let mut mx = T::neg_infinity();
                    for j in 0..=i {
                        let s = dot(qh.row(i), kh.row(j)) * scale;
                        prow[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = T::zero();
                    for pj in prow[..=i].iter_mut() {
                        *pj = (*pj - mx).exp();
                        z += *pj;
                    }
                    for pj in prow[..=i].iter_mut() {
                        *pj /= z;
                    }
                }
                let mut oh = Matrix::zeros(t_len, hd);
                gemm_nn(&p, &vh, &mut oh);
                for i in 0..t_len {
                    out.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(oh.row(i));
                }
                probs.push(p);
            }
            Ok((out, Saved::Probs(probs)))
        }
        Op::Embedding { table, tokens } => {
            let table = val(*table);
            let mut data = Vec::with_capacity(tokens.len() * table.cols());
            for &t in tokens {
                if t >= table.rows() {
                    return Err(value_err!("token {t} outside vocabulary of {}", table.rows()));
                }
                data.extend_from_slice(table.row(t));
            }
            none(Matrix::from_raw(tokens.len(), table.cols(), data))
        }
        Op::CrossEntropy { logits, targets } => {
            let z = val(*logits);
            if targets.len() != z.rows() {
                return Err(shape_err!("{} targets for {} rows", targets.len(), z.rows()));
            }
            let count = targets.iter().filter(|t| t.is_some()).count();
            if count == 0 {
                return Err(value_err!("cross-entropy over an empty position set"));
            }
            if !z.is_finite() {
                return Err(value_err!("non-finite logits"));
            }
            let lp = log_softmax_rows(z, 1.0);
            let mut total = 0.0;
            for (i, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    if t >= z.cols() {
                        return Err(value_err!("target {t} outside vocabulary of {}", z.cols()));
                    }
                    total -= lp.get(i, t);
                }
            }
            let p = lp.map(libm::exp).cast();
            Ok((Matrix::filled(1, 1, T::cast(total / count as f64)), Saved::Softmax(p)))
        }
        Op::TemperedKl {
            logits,
            teacher_probs,
            tau,
            mask,
        } => {
            let z = val(*logits);
            if z.shape() != teacher_probs.shape() || mask.len() != z.rows() {
                return Err(shape_err!(
                    "KD logits {:?} vs teacher {:?} with mask of {}",
                    z.shape(),
                    teacher_probs.shape(),
                    mask.len()
                ));
            }
            let count = mask.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(value_err!("KD loss over an empty position set"));
            }
            if !z.is_finite() || !teacher_probs.is_finite() {
                return Err(value_err!("non-finite logits"));
            }
            let tau64 = tau.as_f64();
            let lq = log_softmax_rows(z, tau64);
            let mut total = 0.0;
            for (i, &m) in mask.iter().enumerate() {
                if !m {
                    continue;
                }
                for j in 0..z.cols() {
                    let p = teacher_probs.get(i, j).as_f64();
                    if p > 0.0 {
                        total += p * (libm::log(p) - lq.get(i, j));
                    }
                }
            }
            let q = lq.map(libm::exp).cast();
            let value = tau64 * tau64 * total / count as f64;
            Ok((Matrix::filled(1, 1, T::cast(value)), Saved::Softmax(q)))
        }
    }
}
