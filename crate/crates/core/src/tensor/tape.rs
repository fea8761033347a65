use std::collections::HashMap;

use super::{dot, gemm, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a query row, a key row and a relative-position entry combine into
/// one attention logit (before the `1/√d` scale).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitForm {
    /// `q·k`
    Vanilla,
    /// `q·(k + a)`
    Shaw,
    /// `(q + u)·k + (q + v)·a`
    Xlnet,
    /// `(q·k)·a` with scalar `a`
    Multiplicative,
    /// `Σ q⊙k⊙a`
    Gated,
    /// `q·k + q·a + k·a`
    Pairwise,
    /// `(q + a)·(k + a) − a·a`, the expanded rewrite of `Pairwise`
    PairwiseExpanded,
}

impl LogitForm {
    fn needs_table(self) -> bool {
        !matches!(self, LogitForm::Vanilla)
    }
}

/// Arguments of a fused relative-logit node.
///
/// `rows[i * L + j]` names the table row used for the pair `(i, j)`; row `r`
/// occupies `table[offset + r*width .. offset + (r+1)*width]`.
#[derive(Debug, Clone)]
pub struct RelLogits {
    pub form: LogitForm,
    pub table: Option<Var>,
    pub offset: usize,
    pub width: usize,
    pub rows: Vec<usize>,
    /// Content bias `u` (Xlnet form only).
    pub content_bias: Option<Var>,
    /// Position bias `v` (Xlnet form only).
    pub position_bias: Option<Var>,
}

impl RelLogits {
    pub fn vanilla() -> Self {
        Self {
            form: LogitForm::Vanilla,
            table: None,
            offset: 0,
            width: 0,
            rows: Vec::new(),
            content_bias: None,
            position_bias: None,
        }
    }
}

#[derive(Debug)]
struct RelNode {
    q: Var,
    k: Var,
    len: usize,
    d: usize,
    scale: f64,
    spec: RelLogits,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    GatherRows { table: Var, idx: Vec<usize> },
    AddRowBias(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    SumProd3(Var, Var, Var),
    Sum(Var),
    SliceRows { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Tensor },
    RelLogits(Box<RelNode>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of one forward pass. Dropped after `backward`; nothing is kept
/// across batches.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar root with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a value that is differentiated but not a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Alias of [`Tape::leaf`] for values whose gradient is never read.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// Selects rows of a matrix, e.g. an embedding lookup. Rows may repeat.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = t.dims2()?;
        if idx.is_empty() {
            return Err(Error::Usage("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            if r >= rows {
                return Err(Error::Bounds(format!("row {r} of a {rows}-row table")));
            }
            out.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(&[idx.len(), cols], out)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (r, c) = xv.dims2()?;
        if bv.numel() != c {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(&[r, c], out)?;
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, e: Var) -> Result<Var> {
        let out = softmax_rows(self.value(e))?;
        Ok(self.push(out, Op::SoftmaxRows(e)))
    }

    /// `Σₜ a[t]·b[t]·c[t]` as a scalar.
    pub fn sum_prod3(&mut self, a: Var, b: Var, c: Var) -> Result<Var> {
        let (av, bv, cv) = (self.value(a), self.value(b), self.value(c));
        av.ensure_same_shape(bv, "sum_prod3")?;
        av.ensure_same_shape(cv, "sum_prod3")?;
        let s = sum_prod3(av.data(), bv.data(), cv.data());
        Ok(self.push(Tensor::scalar(s), Op::SumProd3(a, b, c)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Rows `start .. start + len` of a matrix.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        let (rows, cols) = t.dims2()?;
        if len == 0 || start + len > rows {
            return Err(Error::Bounds(format!(
                "rows {start}..{} of a {rows}-row matrix",
                start + len
            )));
        }
        let out = Tensor::new(&[len, cols], t.data()[start * cols..(start + len) * cols].to_vec())?;
        Ok(self.push(out, Op::SliceRows { src, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let rows = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[rows, total], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let cols = self.value(*first).dims2()?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, cols], out)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Weighted mean negative log-likelihood of `targets` under row-wise
    /// softmax of `logits`. Rows with weight 0 do not contribute; if every
    /// weight is 0 the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = lv.dims2()?;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Bounds(format!("target {t} with {cols} classes")));
        }
        let probs = softmax_rows(lv)?;
        let total: f64 = weights.iter().sum();
        let mut loss = 0.0;
        if total > 0.0 {
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if w != 0.0 {
                    loss -= w * probs.at(r, t).ln();
                }
            }
            loss /= total;
        }
        if !loss.is_finite() {
            return Err(Error::Numeric {
                op: "cross_entropy",
                detail: format!("loss = {loss}"),
            });
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Fused attention logits for one head over a length-`L` sequence.
    /// Produces the `L×L` matrix `e[i][j] = form(q_i, k_j, a_ij) / √d`.
    pub fn rel_logits(&mut self, q: Var, k: Var, spec: RelLogits) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        let (len, d) = qv.dims2()?;
        if kv.shape() != qv.shape() {
            return Err(Error::Dimension {
                op: "logits",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        if spec.form.needs_table() {
            let table = spec
                .table
                .ok_or_else(|| Error::Usage(format!("{:?} logits need a position table", spec.form)))?;
            let want_width = if spec.form == LogitForm::Multiplicative { 1 } else { d };
            if spec.width != want_width {
                return Err(Error::Dimension {
                    op: "logits table width",
                    lhs: vec![spec.width],
                    rhs: vec![want_width],
                });
            }
            if spec.rows.len() != len * len {
                return Err(Error::Dimension {
                    op: "logits row map",
                    lhs: vec![spec.rows.len()],
                    rhs: vec![len, len],
                });
            }
            let numel = self.value(table).numel();
            let max_row = spec.rows.iter().copied().max().unwrap_or(0);
            if spec.offset + (max_row + 1) * spec.width > numel {
                return Err(Error::Bounds(format!(
                    "position row {max_row} beyond table of {numel} elements"
                )));
            }
        }
        for b in [spec.content_bias, spec.position_bias].into_iter().flatten() {
            if self.value(b).numel() != d {
                return Err(Error::Dimension {
                    op: "logits bias",
                    lhs: self.value(b).shape().to_vec(),
                    rhs: vec![d],
                });
            }
        }
        let node = RelNode {
            q,
            k,
            len,
            d,
            scale: 1.0 / (d as f64).sqrt(),
            spec,
        };
        let out = self.rel_forward(&node);
        Ok(self.push(out, Op::RelLogits(Box::new(node))))
    }

    fn rel_forward(&self, n: &RelNode) -> Tensor {
        let (len, d) = (n.len, n.d);
        let q = self.value(n.q).data();
        let k = self.value(n.k).data();
        let table = n.spec.table.map(|t| self.value(t).data());
        let zeros = vec![0.0; d];
        let u = n.spec.content_bias.map_or(&zeros[..], |b| self.value(b).data());
        let v = n.spec.position_bias.map_or(&zeros[..], |b| self.value(b).data());
        let mut out = vec![0.0; len * len];
        for i in 0..len {
            let qi = &q[i * d..(i + 1) * d];
            for j in 0..len {
                let kj = &k[j * d..(j + 1) * d];
                let a = table.map(|t| {
                    let r = n.spec.offset + n.spec.rows[i * len + j] * n.spec.width;
                    &t[r..r + n.spec.width]
                });
                let e = match n.spec.form {
                    LogitForm::Vanilla => dot(qi, kj),
                    LogitForm::Shaw => {
                        let a = a.unwrap();
                        qi.iter().zip(kj).zip(a).map(|((q, k), a)| q * (k + a)).sum()
                    }
                    LogitForm::Xlnet => {
                        let a = a.unwrap();
                        let mut s = 0.0;
                        for t in 0..d {
                            s += (qi[t] + u[t]) * kj[t] + (qi[t] + v[t]) * a[t];
                        }
                        s
                    }
                    LogitForm::Multiplicative => dot(qi, kj) * a.unwrap()[0],
                    LogitForm::Gated => sum_prod3(qi, kj, a.unwrap()),
                    LogitForm::Pairwise => {
                        let a = a.unwrap();
                        dot(qi, kj) + dot(qi, a) + dot(kj, a)
                    }
                    LogitForm::PairwiseExpanded => {
                        let a = a.unwrap();
                        let mut s = 0.0;
                        for t in 0..d {
                            s += (qi[t] + a[t]) * (kj[t] + a[t]);
                        }
                        s - dot(a, a)
                    }
                };
                out[i * len + j] = e * n.scale;
            }
        }
        Tensor::new(&[len, len], out).expect("square logits")
    }

    /// Runs reverse-mode differentiation from a scalar `loss`, adding
    /// `∂loss/∂value` into the gradient of every parameter on the tape.
    ///
    /// The tape is left intact, so calling this twice accumulates twice.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.backprop_node(idx, g, lower)?;
        }
        for (id, var) in &self.params {
            if let Some(Some(g)) = grads.get(var.0) {
                store.accumulate_grad(*id, g)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q) = av.dims2()?;
                let r = bv.dims2()?.1;
                // dA = G·Bᵀ, dB = Aᵀ·G
                let mut da = vec![0.0; p * q];
                gemm(p, r, q, g.data(), false, bv.data(), true, &mut da, 0.0);
                accumulate(grads, *a, Tensor::new(&[p, q], da)?)?;
                let mut db = vec![0.0; q * r];
                gemm(q, p, r, av.data(), true, g.data(), false, &mut db, 0.0);
                accumulate(grads, *b, Tensor::new(&[q, r], db)?)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(self.value(*b))?)?;
                accumulate(grads, *b, g.mul(self.value(*a))?)?;
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s))?,
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()?)?,
            Op::GatherRows { table, idx: rows } => {
                let t = self.value(*table);
                let cols = t.cols();
                let mut dt = Tensor::zeros(t.shape());
                let dd = dt.data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    for (d, gv) in dd[r * cols..(r + 1) * cols].iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                accumulate(grads, *table, dt)?;
            }
            Op::AddRowBias(x, b) => {
                accumulate(grads, *x, g.clone())?;
                let bv = self.value(*b);
                let c = bv.numel();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (d, gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                accumulate(grads, *b, Tensor::new(bv.shape(), db)?)?;
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx = Tensor::new(
                    xv.shape(),
                    xv.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                )?;
                accumulate(grads, *x, dx)?;
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.data().chunks(c)).zip(dx.chunks_mut(c)) {
                    let inner = dot(yr, gr);
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - inner);
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape(), dx)?)?;
            }
            Op::SumProd3(a, b, c) => {
                let s = g.data()[0];
                let (av, bv, cv) = (self.value(*a), self.value(*b), self.value(*c));
                accumulate(grads, *a, bv.mul(cv)?.scale(s))?;
                accumulate(grads, *b, av.mul(cv)?.scale(s))?;
                accumulate(grads, *c, av.mul(bv)?.scale(s))?;
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                accumulate(grads, *x, Tensor::full(self.value(*x).shape(), s))?;
            }
            Op::SliceRows { src, start } => {
                let sv = self.value(*src);
                let cols = sv.cols();
                let mut ds = Tensor::zeros(sv.shape());
                let off = start * cols;
                ds.data_mut()[off..off + g.numel()].copy_from_slice(g.data());
                accumulate(grads, *src, ds)?;
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2()?;
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        dp.extend_from_slice(&g.data()[i * total + col..i * total + col + w]);
                    }
                    accumulate(grads, p, Tensor::new(&[rows, w], dp)?)?;
                    col += w;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut row = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let dp = g.data()[row * cols..(row + r) * cols].to_vec();
                    accumulate(grads, p, Tensor::new(&[r, cols], dp)?)?;
                    row += r;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let total: f64 = weights.iter().sum();
                let cols = probs.cols();
                let mut dl = vec![0.0; probs.numel()];
                if total > 0.0 {
                    let s = g.data()[0] / total;
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let row = &mut dl[r * cols..(r + 1) * cols];
                        for (d, &p) in row.iter_mut().zip(probs.row(r)) {
                            *d = s * w * p;
                        }
                        row[t] -= s * w;
                    }
                }
                accumulate(grads, *logits, Tensor::new(probs.shape(), dl)?)?;
            }
            Op::RelLogits(n) => self.rel_backward(n, g, grads)?,
        }
        Ok(())
    }

    fn rel_backward(&self, n: &RelNode, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let (len, d) = (n.len, n.d);
        let q = self.value(n.q).data();
        let k = self.value(n.k).data();
        let table = n.spec.table.map(|t| self.value(t));
        let zeros = vec![0.0; d];
        let u = n.spec.content_bias.map_or(&zeros[..], |b| self.value(b).data());
        let v = n.spec.position_bias.map_or(&zeros[..], |b| self.value(b).data());
        let mut dq = vec![0.0; len * d];
        let mut dk = vec![0.0; len * d];
        let mut dtable = table.map(|t| vec![0.0; t.numel()]);
        let mut du = vec![0.0; d];
        let mut dv = vec![0.0; d];
        let width = n.spec.width;
        for i in 0..len {
            for j in 0..len {
                let gs = g.data()[i * len + j] * n.scale;
                if gs == 0.0 {
                    continue;
                }
                let qi = &q[i * d..(i + 1) * d];
                let kj = &k[j * d..(j + 1) * d];
                let r = table.map(|_| n.spec.offset + n.spec.rows[i * len + j] * width);
                let a = match (table, r) {
                    (Some(t), Some(r)) => &t.data()[r..r + width],
                    _ => &zeros[..],
                };
                let (dqi, dkj) = (i * d, j * d);
                match n.spec.form {
                    LogitForm::Vanilla => {
                        for t in 0..d {
                            dq[dqi + t] += gs * kj[t];
                            dk[dkj + t] += gs * qi[t];
                        }
                    }
                    LogitForm::Shaw => {
                        let da = &mut dtable.as_mut().unwrap()[r.unwrap()..r.unwrap() + width];
                        for t in 0..d {
                            dq[dqi + t] += gs * (kj[t] + a[t]);
                            dk[dkj + t] += gs * qi[t];
                            da[t] += gs * qi[t];
                        }
                    }
                    LogitForm::Xlnet => {
                        let da = &mut dtable.as_mut().unwrap()[r.unwrap()..r.unwrap() + width];
                        for t in 0..d {
                            dq[dqi + t] += gs * (kj[t] + a[t]);
                            dk[dkj + t] += gs * (qi[t] + u[t]);
                            da[t] += gs * (qi[t] + v[t]);
                            du[t] += gs * kj[t];
                            dv[t] += gs * a[t];
                        }
                    }
                    LogitForm::Multiplicative => {
                        let w = a[0];
                        for t in 0..d {
                            dq[dqi + t] += gs * w * kj[t];
                            dk[dkj + t] += gs * w * qi[t];
                        }
                        dtable.as_mut().unwrap()[r.unwrap()] += gs * dot(qi, kj);
                    }
                    LogitForm::Gated => {
                        let da = &mut dtable.as_mut().unwrap()[r.unwrap()..r.unwrap() + width];
                        for t in 0..d {
                            dq[dqi + t] += gs * kj[t] * a[t];
                            dk[dkj + t] += gs * qi[t] * a[t];
                            da[t] += gs * qi[t] * kj[t];
                        }
                    }
                    LogitForm::Pairwise => {
                        let da = &mut dtable.as_mut().unwrap()[r.unwrap()..r.unwrap() + width];
                        for t in 0..d {
                            dq[dqi + t] += gs * (kj[t] + a[t]);
                            dk[dkj + t] += gs * (qi[t] + a[t]);
                            da[t] += gs * (qi[t] + kj[t]);
                        }
                    }
                    LogitForm::PairwiseExpanded => {
                        let da = &mut dtable.as_mut().unwrap()[r.unwrap()..r.unwrap() + width];
                        for t in 0..d {
                            let (qa, ka) = (qi[t] + a[t], kj[t] + a[t]);
                            dq[dqi + t] += gs * ka;
                            dk[dkj + t] += gs * qa;
                            da[t] += gs * (ka + qa - 2.0 * a[t]);
                        }
                    }
                }
            }
        }
        accumulate(grads, n.q, Tensor::new(&[len, d], dq)?)?;
        accumulate(grads, n.k, Tensor::new(&[len, d], dk)?)?;
        if let (Some(tv), Some(dt)) = (n.spec.table, dtable) {
            accumulate(grads, tv, Tensor::new(self.value(tv).shape(), dt)?)?;
        }
        if let Some(b) = n.spec.content_bias {
            accumulate(grads, b, Tensor::new(self.value(b).shape(), du)?)?;
        }
        if let Some(b) = n.spec.position_bias {
            accumulate(grads, b, Tensor::new(self.value(b).shape(), dv)?)?;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn sum_prod3(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    a.iter().zip(b).zip(c).map(|((a, b), c)| a * b * c).sum()
}

pub(crate) fn softmax_rows(e: &Tensor) -> Result<Tensor> {
    if !e.all_finite() {
        return Err(Error::Numeric {
            op: "softmax_rows",
            detail: "non-finite input".into(),
        });
    }
    let (_, c) = e.dims2()?;
    let mut out = e.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    Tensor::new(e.shape(), out)
}
