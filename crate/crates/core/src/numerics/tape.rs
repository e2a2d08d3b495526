//! Operation recording and reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! append nodes in execution order, so the node list is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Epsilon inside the rmsnorm square root.
pub const RMSNORM_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        offset: usize,
        probs: Vec<f64>,
    },
    RowWhere {
        mask: Vec<bool>,
        keep: Var,
        other: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SumAll(Var),
    Scale(Var, f64),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation so it can be differentiated afterwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.matrix_dims("matmul")?;
        let (k2, n) = tb.matrix_dims("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x[m×k] · w[n×k]ᵀ`, the layout used for every weight matrix.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (m, k) = tx.matrix_dims("linear")?;
        let (n, k2) = tw.matrix_dims("linear")?;
        if k != k2 {
            return Err(mismatch("linear", tx, tw));
        }
        let out = kernels::matmul_bt(tx.data(), tw.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::Linear(x, w), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (_, n) = ta.matrix_dims("add_row")?;
        if tb.numel() != n {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut value = ta.clone();
        let c = tb.data();
        for row in value.data_mut().chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(c) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Scales row `i` of `a[m×n]` by `col[i]`, where `col` is `[m, 1]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (m, n) = ta.matrix_dims("mul_col")?;
        if tc.shape() != [m, 1] {
            return Err(mismatch("mul_col", ta, tc));
        }
        let mut value = ta.clone();
        if n > 0 {
            for (row, s) in value.data_mut().chunks_exact_mut(n).zip(tc.data()) {
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
        let rg = self.rg(&[a, col]);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    /// Elementwise logistic function.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, kernels::gelu, Op::Gelu(x))
    }

    /// Max-stabilized softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || t.cols() == 0 {
            return Err(Error::Rank {
                op: "softmax_lastdim",
                expected: 1,
                shape: t.shape().to_vec(),
            });
        }
        let mut value = t.clone();
        let n = value.cols();
        for row in value.data_mut().chunks_exact_mut(n) {
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// `x / sqrt(mean(x²) + eps) * gain` over the last dimension.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let h = tx.cols();
        if h == 0 || tg.numel() != h {
            return Err(mismatch("rmsnorm", tx, tg));
        }
        let mut value = tx.clone();
        let g = tg.data();
        let mut inv_rms = Vec::with_capacity(value.rows());
        for row in value.data_mut().chunks_exact_mut(h) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / h as f64;
            let r = 1.0 / (ms + RMSNORM_EPS).sqrt();
            for (v, gv) in row.iter_mut().zip(g) {
                *v *= r * gv;
            }
            inv_rms.push(r);
        }
        let rg = self.rg(&[x, gain]);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Multi-head causal attention.
    ///
    /// `q` is `[s, h]`, `k` and `v` are `[t, h]`. Query row `i` sits at
    /// absolute position `offset + i` and attends to key rows `0..=offset + i`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        offset: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (s, h) = tq.matrix_dims("causal_attention")?;
        let (t, hk) = tk.matrix_dims("causal_attention")?;
        if hk != h || tv.shape() != tk.shape() {
            return Err(mismatch("causal_attention", tq, tk));
        }
        if heads == 0 || h % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {h} not divisible by {heads} heads"
            )));
        }
        if offset + s > t {
            return Err(Error::CacheInconsistent(format!(
                "{s} queries at offset {offset} but only {t} keys"
            )));
        }
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * s * t];
        let mut out = vec![0.0; s * h];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for hd in 0..heads {
            let c0 = hd * dh;
            for i in 0..s {
                let qi = &qd[i * h + c0..i * h + c0 + dh];
                let visible = offset + i + 1;
                let p = &mut probs[(hd * s + i) * t..(hd * s + i) * t + visible];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = kernels::dot(qi, &kd[j * h + c0..j * h + c0 + dh]) * scale;
                }
                kernels::softmax_in_place(p);
                let oi = &mut out[i * h + c0..i * h + c0 + dh];
                for (j, pj) in p.iter().enumerate() {
                    kernels::axpy(*pj, &vd[j * h + c0..j * h + c0 + dh], oi);
                }
            }
        }
        let value = Tensor::new(vec![s, h], out)?;
        let rg = self.rg(&[q, k, v]);
        if !rg {
            probs = Vec::new();
        }
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                offset,
                probs,
            },
            rg,
        ))
    }

    /// Row `i` is taken from `keep` where `mask[i]` is set, else from `other`.
    /// Rows are copied, never recomputed, so kept rows are bit-identical.
    pub fn row_where(&mut self, mask: &[bool], keep: Var, other: Var) -> Result<Var> {
        let (tk, to) = (self.value(keep), self.value(other));
        if tk.shape() != to.shape() {
            return Err(mismatch("row_where", tk, to));
        }
        if tk.rows() != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "row_where",
                lhs: tk.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut value = to.clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                value.row_mut(i).copy_from_slice(tk.row(i));
            }
        }
        let rg = self.rg(&[keep, other]);
        Ok(self.push(
            value,
            Op::RowWhere {
                mask: mask.to_vec(),
                keep,
                other,
            },
            rg,
        ))
    }

    /// Embedding lookup: stacks `table` rows selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, c) = tt.matrix_dims("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(Error::InvalidToken {
                    id: id as u32,
                    vocab: n,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), c], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            let (r, pc) = t.matrix_dims("concat_rows")?;
            if pc != c {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            data.extend_from_slice(t.data());
            rows += r;
        }
        let value = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    /// Mean negative log-likelihood over rows whose `mask` entry is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (t, vsize) = tl.matrix_dims("cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut total = 0.0;
        let mut probs = vec![0.0; t * vsize];
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let target = targets[i];
            if target >= vsize {
                return Err(Error::InvalidToken {
                    id: target as u32,
                    vocab: vsize,
                });
            }
            let row = tl.row(i);
            let lse = kernels::log_sum_exp(row);
            total += lse - row[target];
            let pr = &mut probs[i * vsize..(i + 1) * vsize];
            for (p, l) in pr.iter_mut().zip(row) {
                *p = (l - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Reverse sweep from a scalar `loss`, filling gradients of every
    /// node that requires them. Gradients from fan-out add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarBackward(lt.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[f64]) {
        // Each arm reads the forward values it needs, then accumulates.
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.value(a).matrix_dims("matmul").unwrap();
                let n = self.value(b).cols();
                let da = kernels::matmul_bt(g, self.value(b).data(), m, n, k);
                let mut db = vec![0.0; k * n];
                kernels::matmul_at_acc(self.value(a).data(), g, m, k, n, &mut db);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Linear(x, w) => {
                let (x, w) = (*x, *w);
                let (m, k) = self.value(x).matrix_dims("linear").unwrap();
                let n = self.value(w).rows();
                let dx = kernels::matmul(g, self.value(w).data(), m, n, k);
                let mut dw = vec![0.0; n * k];
                if self.nodes[w.0].requires_grad {
                    kernels::matmul_at_acc(g, self.value(x).data(), m, n, k, &mut dw);
                }
                self.accumulate(x, dx);
                self.accumulate(w, dw);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            Op::AddRow(a, bias) => {
                let (a, bias) = (*a, *bias);
                let n = self.value(bias).numel();
                let mut db = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                self.accumulate(a, g.to_vec());
                self.accumulate(bias, db);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::MulCol(a, col) => {
                let (a, col) = (*a, *col);
                let n = self.value(a).cols();
                let cv = self.value(col).data();
                let av = self.value(a).data();
                let mut da = vec![0.0; g.len()];
                let mut dc = vec![0.0; cv.len()];
                for i in 0..cv.len() {
                    let gr = &g[i * n..(i + 1) * n];
                    for (d, gv) in da[i * n..(i + 1) * n].iter_mut().zip(gr) {
                        *d = gv * cv[i];
                    }
                    dc[i] = kernels::dot(gr, &av[i * n..(i + 1) * n]);
                }
                self.accumulate(a, da);
                self.accumulate(col, dc);
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                self.accumulate(x, dx);
            }
            Op::Tanh(x) => {
                let x = *x;
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(x, dx);
            }
            Op::Gelu(x) => {
                let x = *x;
                let dx = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(gv, xv)| gv * kernels::gelu_grad(*xv))
                    .collect();
                self.accumulate(x, dx);
            }
            Op::Softmax(x) => {
                let x = *x;
                let n = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for ((d, gr), y) in dx
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(node.value.data().chunks_exact(n))
                {
                    let s = kernels::dot(gr, y);
                    for ((dv, gv), yv) in d.iter_mut().zip(gr).zip(y) {
                        *dv = yv * (gv - s);
                    }
                }
                self.accumulate(x, dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let xv = self.value(x).data();
                let gv = self.value(gain).data();
                let h = gv.len();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; h];
                for (r, &ir) in inv_rms.iter().enumerate() {
                    let xr = &xv[r * h..(r + 1) * h];
                    let gr = &g[r * h..(r + 1) * h];
                    let mut proj = 0.0;
                    for j in 0..h {
                        proj += gr[j] * gv[j] * xr[j];
                        dg[j] += gr[j] * xr[j] * ir;
                    }
                    let coef = ir * ir * ir * proj / h as f64;
                    for j in 0..h {
                        dx[r * h + j] = ir * gv[j] * gr[j] - xr[j] * coef;
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(gain, dg);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                offset,
                probs,
            } => {
                let (q, k, v, heads, offset) = (*q, *k, *v, *heads, *offset);
                let (s, h) = self.value(q).matrix_dims("attention").unwrap();
                let t = self.value(k).rows();
                let dh = h / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(q).data(),
                    self.value(k).data(),
                    self.value(v).data(),
                );
                let mut dq = vec![0.0; s * h];
                let mut dk = vec![0.0; t * h];
                let mut dv = vec![0.0; t * h];
                let mut dp = vec![0.0; t];
                for hd in 0..heads {
                    let c0 = hd * dh;
                    for i in 0..s {
                        let visible = offset + i + 1;
                        let p = &probs[(hd * s + i) * t..(hd * s + i) * t + visible];
                        let go = &g[i * h + c0..i * h + c0 + dh];
                        let mut weighted = 0.0;
                        for j in 0..visible {
                            dp[j] = kernels::dot(go, &vd[j * h + c0..j * h + c0 + dh]);
                            weighted += p[j] * dp[j];
                            kernels::axpy(p[j], go, &mut dv[j * h + c0..j * h + c0 + dh]);
                        }
                        let qi = &qd[i * h + c0..i * h + c0 + dh];
                        for j in 0..visible {
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            if ds != 0.0 {
                                kernels::axpy(
                                    ds,
                                    &kd[j * h + c0..j * h + c0 + dh],
                                    &mut dq[i * h + c0..i * h + c0 + dh],
                                );
                                kernels::axpy(ds, qi, &mut dk[j * h + c0..j * h + c0 + dh]);
                            }
                        }
                    }
                }
                self.accumulate(q, dq);
                self.accumulate(k, dk);
                self.accumulate(v, dv);
            }
            Op::RowWhere { mask, keep, other } => {
                let (keep, other) = (*keep, *other);
                let n = node.value.cols();
                let mut dk = vec![0.0; g.len()];
                let mut dother = vec![0.0; g.len()];
                for (i, &m) in mask.iter().enumerate() {
                    let dst = if m { &mut dk } else { &mut dother };
                    dst[i * n..(i + 1) * n].copy_from_slice(&g[i * n..(i + 1) * n]);
                }
                self.accumulate(keep, dk);
                self.accumulate(other, dother);
            }
            Op::Gather { table, ids } => {
                let table = *table;
                let c = node.value.cols();
                let mut dt = vec![0.0; self.value(table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    kernels::axpy(1.0, &g[r * c..(r + 1) * c], &mut dt[id * c..(id + 1) * c]);
                }
                self.accumulate(table, dt);
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut start = 0;
                for p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(p, g[start..start + len].to_vec());
                    start += len;
                }
            }
            Op::SumAll(x) => {
                let x = *x;
                let n = self.value(x).numel();
                self.accumulate(x, vec![g[0]; n]);
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                self.accumulate(x, g.iter().map(|v| v * c).collect());
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let logits = *logits;
                let vsize = self.value(logits).cols();
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (i, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    let row = &mut dl[i * vsize..(i + 1) * vsize];
                    for (d, p) in row.iter_mut().zip(&probs[i * vsize..(i + 1) * vsize]) {
                        *d = p * scale;
                    }
                    row[targets[i]] -= scale;
                }
                self.accumulate(logits, dl);
            }
        }
    }
}
