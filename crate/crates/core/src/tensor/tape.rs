use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused causal attention call over `batch` sequences of
/// `seq` positions each; q/k/v are `[batch*seq, heads*d_head]`.
#[derive(Clone, Copy, Debug)]
struct AttnLayout {
    batch: usize,
    seq: usize,
    heads: usize,
    d_head: usize,
}

enum Op {
    Leaf,
    Identity(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { a: Var, row: Var, coefs: Vec<f64> },
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    SliceCols { src: Var, start: usize },
    SliceRows { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    RmsNorm { x: Var, gamma: Var, inv_rms: Vec<f64> },
    SoftmaxRows(Var),
    Gelu(Var),
    Attention {
        q: Option<Var>,
        k: Option<Var>,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    Gather { table: Var, ids: Vec<usize> },
    LogSoftmaxDot { logits: Var, weights: Tensor, log_probs: Vec<f64> },
    PickSum { src: Var, picks: Vec<(usize, f64)> },
    Sum(Var),
    LogSigmoid(Var),
}

struct Record {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of tensor operations supporting one or more
/// reverse sweeps.
///
/// Each call to [`Tape::backward`] overwrites stored gradients;
/// [`Tape::backward_accumulate`] adds the new leaf gradients to the old.
#[derive(Default)]
pub struct Tape {
    records: Vec<Record>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.records.push(Record {
            value,
            op,
            requires_grad,
        });
        Var(self.records.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.records[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.records[v.0].requires_grad
    }

    /// Gradient left by the most recent reverse sweep, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Saved attention probabilities `[batch, heads, seq, seq]` of an
    /// attention output, when the attention was computed (not fixed).
    pub fn attention_probs(&self, out: Var) -> Option<&[f64]> {
        match &self.records[out.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.records[v.0].requires_grad
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn check_matrix(&self, a: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "{what} needs a matrix, got {:?}",
                t.shape()
            )));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn identity(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        let rg = self.rg(a);
        self.push(value, Op::Identity(a), rg)
    }

    /// Copy of `a` that always receives a gradient, even when nothing
    /// upstream of it is differentiable. Gradients still flow on into `a`.
    pub fn watch(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Identity(a), true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds the vector `row` to every row of matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let m = self.value(a).rows();
        self.add_row_scaled(a, row, vec![1.0; m])
    }

    /// Adds `coefs[i] * row` to row `i` of matrix `a`.
    pub fn add_row_scaled(&mut self, a: Var, row: Var, coefs: Vec<f64>) -> Result<Var> {
        let (m, n) = self.check_matrix(a, "add_row")?;
        if self.value(row).len() != n || coefs.len() != m {
            return Err(Error::Dimension(format!(
                "add_row: row of {} and {} coefficients for {m}x{n}",
                self.value(row).len(),
                coefs.len()
            )));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for (i, &c) in coefs.iter().enumerate() {
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += c * x;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRow { a, row, coefs }, rg))
    }

    /// Multiplies every row of `a` elementwise by the vector `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.check_matrix(a, "mul_row")?;
        if self.value(row).len() != n {
            return Err(Error::Dimension(format!(
                "mul_row: row of {} for {n} columns",
                self.value(row).len()
            )));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o *= x;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MulRow(a, row), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check_matrix(a, "slice_cols")?;
        let value = self.value(a).slice_cols(start, len)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols { src: a, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check_matrix(a, "slice_rows")?;
        let value = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows { src: a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let (m, _) = self.check_matrix(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.check_matrix(p, "concat_cols")?;
            if pm != m {
                return Err(Error::Dimension(format!("concat_cols rows {pm} vs {m}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(m, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Row-wise RMS normalisation scaled by `gamma`.
    pub fn rmsnorm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.check_matrix(x, "rmsnorm")?;
        if self.value(gamma).len() != n {
            return Err(Error::Dimension(format!(
                "rmsnorm: gamma of {} for width {n}",
                self.value(gamma).len()
            )));
        }
        if eps < 0.0 {
            return Err(Error::Contract(format!("rmsnorm eps {eps} < 0")));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let mut out = vec![0.0; m * n];
        let mut inv_rms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for j in 0..n {
                out[i * n + j] = row[j] * r * g[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::RmsNorm { x, gamma, inv_rms },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.check_matrix(x, "softmax_rows")?;
        if !self.value(x).is_finite() {
            return Err(Error::Numeric("softmax_rows on non-finite input".into()));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(super::softmax(self.value(x).row(i)));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::SoftmaxRows(x), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Fused causal multi-head attention: per sequence and head,
    /// `softmax(q kᵀ / sqrt(d_head) + causal mask) · v`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
    ) -> Result<Var> {
        let layout = self.attn_layout(v, batch, heads)?;
        self.check_same(q, v, "attention q")?;
        self.check_same(k, v, "attention k")?;
        let probs = causal_probs(self.value(q).data(), self.value(k).data(), layout);
        let z = attend(&probs, self.value(v).data(), layout);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            z,
            Op::Attention {
                q: Some(q),
                k: Some(k),
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Attention with externally supplied probabilities
    /// `[batch, heads, seq, seq]`; no gradient reaches queries or keys.
    pub fn attention_fixed(
        &mut self,
        probs: Vec<f64>,
        v: Var,
        batch: usize,
        heads: usize,
    ) -> Result<Var> {
        let layout = self.attn_layout(v, batch, heads)?;
        let expect = batch * heads * layout.seq * layout.seq;
        if probs.len() != expect {
            return Err(Error::Dimension(format!(
                "fixed attention probabilities: {} values, expected {expect}",
                probs.len()
            )));
        }
        let z = attend(&probs, self.value(v).data(), layout);
        let rg = self.rg(v);
        Ok(self.push(
            z,
            Op::Attention {
                q: None,
                k: None,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    fn attn_layout(&self, v: Var, batch: usize, heads: usize) -> Result<AttnLayout> {
        let (rows, width) = self.check_matrix(v, "attention")?;
        if batch == 0 || heads == 0 || rows % batch != 0 || width % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention layout: {rows}x{width} with batch {batch}, heads {heads}"
            )));
        }
        Ok(AttnLayout {
            batch,
            seq: rows / batch,
            heads,
            d_head: width / heads,
        })
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.check_matrix(table, "gather")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("token id {id} outside table of {v}")));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Scalar `Σ weights ⊙ log_softmax(logits)`; with one-hot weights
    /// this is a (negated, unnormalised) cross-entropy.
    pub fn log_softmax_dot(&mut self, logits: Var, weights: Tensor) -> Result<Var> {
        let (m, n) = self.check_matrix(logits, "log_softmax_dot")?;
        if weights.shape() != [m, n] {
            return Err(Error::Dimension(format!(
                "log_softmax_dot weights {:?} for logits {m}x{n}",
                weights.shape()
            )));
        }
        let mut log_probs = Vec::with_capacity(m * n);
        for i in 0..m {
            log_probs.extend(super::log_softmax(self.value(logits).row(i)));
        }
        let total: f64 = weights
            .data()
            .iter()
            .zip(&log_probs)
            .filter(|(w, _)| **w != 0.0)
            .map(|(w, lp)| w * lp)
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::LogSoftmaxDot {
                logits,
                weights,
                log_probs,
            },
            rg,
        ))
    }

    /// Scalar `Σ coef · src[flat_index]`.
    pub fn pick_sum(&mut self, src: Var, picks: Vec<(usize, f64)>) -> Result<Var> {
        let n = self.value(src).len();
        if let Some(&(bad, _)) = picks.iter().find(|(i, _)| *i >= n) {
            return Err(Error::Dimension(format!("pick index {bad} of {n}")));
        }
        let data = self.value(src).data();
        let total: f64 = picks.iter().map(|&(i, c)| c * data[i]).sum();
        let rg = self.rg(src);
        Ok(self.push(Tensor::scalar(total), Op::PickSum { src, picks }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// Elementwise `log σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(log_sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::LogSigmoid(a), rg)
    }

    /// Reverse sweep from the scalar `loss`; previous gradients are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let grads = self.sweep(loss)?;
        self.grads = grads;
        Ok(())
    }

    /// Reverse sweep whose leaf gradients are added to those already held.
    pub fn backward_accumulate(&mut self, loss: Var) -> Result<()> {
        let mut grads = self.sweep(loss)?;
        let old = std::mem::take(&mut self.grads);
        for (i, prev) in old.into_iter().enumerate() {
            let Some(prev) = prev else { continue };
            if !matches!(self.records[i].op, Op::Leaf) {
                continue;
            }
            match &mut grads[i] {
                Some(g) => g.add_assign(&prev)?,
                slot @ None => *slot = Some(prev),
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn sweep(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.records.len()];
        if !self.rg(loss) {
            return Ok(grads);
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let rec = &self.records[i];
            if !rec.requires_grad || matches!(rec.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&rec.op, &rec.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Identity(a) => self.accumulate(grads, *a, g.clone())?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.rg(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::AddRow { a, row, coefs } => {
                self.accumulate(grads, *a, g.clone())?;
                if self.rg(*row) {
                    let n = g.cols();
                    let mut gr = vec![0.0; n];
                    for (i, &c) in coefs.iter().enumerate() {
                        for (acc, x) in gr.iter_mut().zip(g.row(i)) {
                            *acc += c * x;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, gr)?)?;
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row).data();
                let (m, n) = (g.rows(), g.cols());
                if self.rg(*a) {
                    let mut ga = g.data().to_vec();
                    for i in 0..m {
                        for (x, s) in ga[i * n..(i + 1) * n].iter_mut().zip(r) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, Tensor::matrix(m, n, ga)?)?;
                }
                if self.rg(*row) {
                    let xa = self.value(*a).data();
                    let mut gr = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gr[j] += g.data()[i * n + j] * xa[i * n + j];
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, gr)?)?;
                }
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), n, 1, bv.data(), 1, n, &mut ga, k, 0.0);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, ga)?)?;
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), 1, k, g.data(), n, 1, &mut gb, n, 0.0);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, gb)?)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::SliceCols { src, start } => {
                let sv = self.value(*src);
                let (m, n) = (sv.rows(), sv.cols());
                let w = g.cols();
                let mut gs = vec![0.0; m * n];
                for i in 0..m {
                    gs[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *src, Tensor::matrix(m, n, gs)?)?;
            }
            Op::SliceRows { src, start } => {
                let sv = self.value(*src);
                let n = sv.cols();
                let mut gs = vec![0.0; sv.len()];
                gs[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *src, Tensor::new(sv.shape().to_vec(), gs)?)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice_cols(offset, w)?)?;
                    }
                    offset += w;
                }
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let (m, n) = (g.rows(), g.cols());
                if self.rg(*x) {
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        let r = inv_rms[i];
                        let row = &xv[i * n..(i + 1) * n];
                        let dy = &g.data()[i * n..(i + 1) * n];
                        let s: f64 = (0..n).map(|j| dy[j] * gv[j] * row[j]).sum();
                        let coef = r * r * r * s / n as f64;
                        for j in 0..n {
                            gx[i * n + j] = r * gv[j] * dy[j] - row[j] * coef;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::matrix(m, n, gx)?)?;
                }
                if self.rg(*gamma) {
                    let mut gg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g.data()[i * n + j] * xv[i * n + j] * inv_rms[i];
                        }
                    }
                    let shape = self.value(*gamma).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(shape, gg)?)?;
                }
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = (g.rows(), g.cols());
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let p = out.row(i);
                    let dy = g.row(i);
                    let s: f64 = p.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = p[j] * (dy[j] - s);
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(m, n, gx)?)?;
            }
            Op::Gelu(x) => {
                let gx = self.value(*x).zip_map(g, |xi, gi| gi * gelu_grad(xi))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, *layout, probs, g, grads)?,
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut gt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, x) in gt[id * d..(id + 1) * d].iter_mut().zip(g.row(r)) {
                        *acc += x;
                    }
                }
                self.accumulate(grads, *table, Tensor::matrix(tv.rows(), d, gt)?)?;
            }
            Op::LogSoftmaxDot {
                logits,
                weights,
                log_probs,
            } => {
                let scale = g.item();
                let (m, n) = (weights.rows(), weights.cols());
                let mut gl = vec![0.0; m * n];
                for i in 0..m {
                    let w = weights.row(i);
                    let total: f64 = w.iter().sum();
                    if total == 0.0 && w.iter().all(|x| *x == 0.0) {
                        continue;
                    }
                    for j in 0..n {
                        let p = log_probs[i * n + j].exp();
                        gl[i * n + j] = scale * (w[j] - p * total);
                    }
                }
                self.accumulate(grads, *logits, Tensor::matrix(m, n, gl)?)?;
            }
            Op::PickSum { src, picks } => {
                let sv = self.value(*src);
                let mut gs = vec![0.0; sv.len()];
                let scale = g.item();
                for &(i, c) in picks {
                    gs[i] += scale * c;
                }
                self.accumulate(grads, *src, Tensor::new(sv.shape().to_vec(), gs)?)?;
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()))?;
            }
            Op::LogSigmoid(a) => {
                let ga = self.value(*a).zip_map(g, |x, gi| gi * sigmoid(-x))?;
                self.accumulate(grads, *a, ga)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Option<Var>,
        k: Option<Var>,
        v: Var,
        layout: AttnLayout,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let AttnLayout {
            batch,
            seq,
            heads,
            d_head,
        } = layout;
        let width = heads * d_head;
        let rows = batch * seq;
        let scale = 1.0 / (d_head as f64).sqrt();
        let vv = self.value(v).data();
        let need_qk = q.is_some_and(|q| self.rg(q)) || k.is_some_and(|k| self.rg(k));
        let mut gv = vec![0.0; rows * width];
        let mut gq = vec![0.0; if need_qk { rows * width } else { 0 }];
        let mut gk = vec![0.0; if need_qk { rows * width } else { 0 }];
        let mut dp = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * width + h * d_head;
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // dV = Pᵀ · dZ
                gemm(
                    seq,
                    seq,
                    d_head,
                    p,
                    1,
                    seq,
                    &g.data()[off..],
                    width,
                    1,
                    &mut gv[off..],
                    width,
                    1.0,
                );
                if !need_qk {
                    continue;
                }
                // dP = dZ · Vᵀ
                gemm(
                    seq,
                    d_head,
                    seq,
                    &g.data()[off..],
                    width,
                    1,
                    &vv[off..],
                    1,
                    width,
                    &mut dp,
                    seq,
                    0.0,
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale.
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let s: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..seq {
                        dr[j] = pr[j] * (dr[j] - s) * scale;
                    }
                }
                let qv = self.value(q.expect("computed attention has q")).data();
                let kv = self.value(k.expect("computed attention has k")).data();
                // dQ = dS · K
                gemm(
                    seq,
                    seq,
                    d_head,
                    &dp,
                    seq,
                    1,
                    &kv[off..],
                    width,
                    1,
                    &mut gq[off..],
                    width,
                    1.0,
                );
                // dK = dSᵀ · Q
                gemm(
                    seq,
                    seq,
                    d_head,
                    &dp,
                    1,
                    seq,
                    &qv[off..],
                    width,
                    1,
                    &mut gk[off..],
                    width,
                    1.0,
                );
            }
        }
        self.accumulate(grads, v, Tensor::matrix(rows, width, gv)?)?;
        if need_qk {
            if let Some(q) = q {
                self.accumulate(grads, q, Tensor::matrix(rows, width, gq)?)?;
            }
            if let Some(k) = k {
                self.accumulate(grads, k, Tensor::matrix(rows, width, gk)?)?;
            }
        }
        Ok(())
    }
}

fn causal_probs(q: &[f64], k: &[f64], layout: AttnLayout) -> Vec<f64> {
    let AttnLayout {
        batch,
        seq,
        heads,
        d_head,
    } = layout;
    let width = heads * d_head;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut probs = vec![0.0; batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq * width + h * d_head;
            let block = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            // S = Q · Kᵀ
            gemm(
                seq, d_head, seq, &q[off..], width, 1, &k[off..], 1, width, block, seq, 0.0,
            );
            for i in 0..seq {
                let row = &mut block[i * seq..(i + 1) * seq];
                let mut max = f64::NEG_INFINITY;
                for x in row[..=i].iter_mut() {
                    *x *= scale;
                    max = max.max(*x);
                }
                let mut z = 0.0;
                for x in row[..=i].iter_mut() {
                    *x = (*x - max).exp();
                    z += *x;
                }
                for x in row[..=i].iter_mut() {
                    *x /= z;
                }
                for x in row[i + 1..].iter_mut() {
                    *x = 0.0;
                }
            }
        }
    }
    probs
}

fn attend(probs: &[f64], v: &[f64], layout: AttnLayout) -> Tensor {
    let AttnLayout {
        batch,
        seq,
        heads,
        d_head,
    } = layout;
    let width = heads * d_head;
    let mut z = vec![0.0; batch * seq * width];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq * width + h * d_head;
            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            gemm(
                seq,
                seq,
                d_head,
                p,
                seq,
                1,
                &v[off..],
                width,
                1,
                &mut z[off..],
                width,
                0.0,
            );
        }
    }
    Tensor {
        shape: vec![batch * seq, width],
        data: z,
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Disagreement between a tape gradient and its central difference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradError {
    /// `max |analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
    pub elementwise: f64,
    /// `‖analytic − numeric‖₂`.
    pub diff_norm: f64,
    /// `‖numeric‖₂`.
    pub numeric_norm: f64,
}

impl GradError {
    /// `‖analytic − numeric‖₂ / ‖numeric‖₂`; 0 when both vanish.
    pub fn normwise(&self) -> f64 {
        if self.diff_norm == 0.0 {
            0.0
        } else {
            self.diff_norm / self.numeric_norm
        }
    }
}

/// Largest elementwise relative disagreement between the tape gradient
/// of `f` at `x` and a central difference with the given `step`.
///
/// `f` must build a scalar on the tape from the supplied input variable.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    Ok(grad_error(f, x, step)?.elementwise)
}

/// Elementwise and norm measures of the same comparison. The elementwise
/// one is dominated by round-off on partials near zero; norms can be
/// pooled over several inputs.
pub fn grad_error<F>(f: F, x: &Tensor, step: f64) -> Result<GradError>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("grad_check step {step} must be > 0")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(point.clone());
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };
    let mut worst: f64 = 0.0;
    let (mut diff_sq, mut num_sq) = (0.0, 0.0);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
        diff_sq += (a - numeric).powi(2);
        num_sq += numeric * numeric;
    }
    Ok(GradError {
        elementwise: worst,
        diff_norm: diff_sq.sqrt(),
        numeric_norm: num_sq.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rmsnorm_hand_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 4, vec![1.0; 4]).unwrap());
        let g = t.constant(Tensor::vector(vec![1.0; 4]));
        let y = t.rmsnorm(x, g, 0.0).unwrap();
        assert_eq!(t.value(y).data(), &[1.0; 4]);

        let x = t.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let g = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let y = t.rmsnorm(x, g, 0.0).unwrap();
        let expect = [3.0 / 12.5f64.sqrt(), 4.0 / 12.5f64.sqrt()];
        for (a, b) in t.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((t.value(y).data()[0] - 0.8485).abs() < 1e-4);
        assert!((t.value(y).data()[1] - 1.1314).abs() < 1e-4);

        let g2 = t.constant(Tensor::vector(vec![2.0, 0.0]));
        let y2 = t.rmsnorm(x, g2, 0.0).unwrap();
        assert!((t.value(y2).data()[0] - 1.6971).abs() < 1e-4);
        assert_eq!(t.value(y2).data()[1], 0.0);
    }

    #[test]
    fn rmsnorm_rejects_mismatched_gamma() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 3, vec![1.0; 3]).unwrap());
        let g = t.constant(Tensor::vector(vec![1.0; 2]));
        assert!(matches!(t.rmsnorm(x, g, 1e-6), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_rows_rejects_non_finite() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(t.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let zero = t.scale(x, 0.0);
        let loss = t.sum(zero);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_overwrites_unless_accumulating() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0]);
        t.backward_accumulate(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn watch_collects_gradient_without_differentiable_inputs() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = t.watch(x);
        let y = t.mul(w, w).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[2.0, 4.0]);
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn rmsnorm_matches_finite_differences() {
        let x = Tensor::matrix(1, 5, vec![0.3, -1.2, 0.7, 2.0, -0.4]).unwrap();
        let err = grad_check(
            |t, x| {
                let g = t.constant(Tensor::vector(vec![1.0; 5]));
                let y = t.rmsnorm(x, g, 1e-6)?;
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sum_of_squares_grad_check() {
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
        assert!(grad_check(|t, x| Ok(t.sum(x)), &x, 0.0).is_err());
    }

    /// Weighted scalar readout so every output element matters.
    fn readout(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(t.value(y).shape(), &mut rng);
        let w = t.constant(w);
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let row = random(&[4], &mut rng);
        let check = |name: &str, f: &dyn Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor| {
            let err = grad_check(f, x, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        };
        check(
            "matmul-lhs",
            &|t, x| {
                let bb = t.constant(b.clone());
                let y = t.matmul(x, bb)?;
                readout(t, y, 1)
            },
            &a,
        );
        check(
            "matmul-rhs",
            &|t, x| {
                let aa = t.constant(a.clone());
                let y = t.matmul(aa, x)?;
                readout(t, y, 2)
            },
            &b,
        );
        check(
            "transpose",
            &|t, x| {
                let y = t.transpose(x)?;
                readout(t, y, 3)
            },
            &a,
        );
        check(
            "slice+concat",
            &|t, x| {
                let l = t.slice_cols(x, 0, 1)?;
                let r = t.slice_cols(x, 1, 3)?;
                let y = t.concat_cols(&[r, l])?;
                readout(t, y, 4)
            },
            &a,
        );
        check(
            "rmsnorm-x",
            &|t, x| {
                let g = t.constant(row.clone());
                let y = t.rmsnorm(x, g, 1e-6)?;
                readout(t, y, 5)
            },
            &a,
        );
        check(
            "rmsnorm-gamma",
            &|t, g| {
                let x = t.constant(a.clone());
                let y = t.rmsnorm(x, g, 1e-6)?;
                readout(t, y, 6)
            },
            &row,
        );
        check(
            "softmax",
            &|t, x| {
                let y = t.softmax_rows(x)?;
                readout(t, y, 7)
            },
            &a,
        );
        check(
            "gelu",
            &|t, x| {
                let y = t.gelu(x);
                readout(t, y, 8)
            },
            &a,
        );
        check(
            "add_row",
            &|t, r| {
                let x = t.constant(a.clone());
                let y = t.add_row(x, r)?;
                let y = t.mul(y, y)?;
                readout(t, y, 9)
            },
            &row,
        );
        check(
            "add_row_scaled",
            &|t, r| {
                let x = t.constant(a.clone());
                let y = t.add_row_scaled(x, r, vec![0.5, -1.0, 2.0])?;
                let y = t.mul(y, y)?;
                readout(t, y, 14)
            },
            &row,
        );
        check(
            "slice_rows+watch",
            &|t, x| {
                let y = t.slice_rows(x, 1, 2)?;
                let y = t.watch(y);
                let y = t.mul(y, y)?;
                readout(t, y, 15)
            },
            &a,
        );
        check(
            "mul_row",
            &|t, r| {
                let x = t.constant(a.clone());
                let y = t.mul_row(x, r)?;
                readout(t, y, 10)
            },
            &row,
        );
        check(
            "gather",
            &|t, table| {
                let y = t.gather(table, &[2, 0, 2])?;
                readout(t, y, 11)
            },
            &a,
        );
        check(
            "log_softmax_dot",
            &|t, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(12);
                let w = random(&[3, 4], &mut rng);
                t.log_softmax_dot(x, w)
            },
            &a,
        );
        check(
            "log_sigmoid",
            &|t, x| {
                let y = t.log_sigmoid(x);
                readout(t, y, 13)
            },
            &a,
        );
        check(
            "pick_sum",
            &|t, x| {
                let y = t.mul(x, x)?;
                t.pick_sum(y, vec![(0, 1.0), (5, -2.0), (11, 0.5)])
            },
            &a,
        );
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // batch 2, seq 3, heads 2, d_head 2
        let q = random(&[6, 4], &mut rng);
        let k = random(&[6, 4], &mut rng);
        let v = random(&[6, 4], &mut rng);
        for which in 0..3 {
            let (q, k, v) = (q.clone(), k.clone(), v.clone());
            let x = [&q, &k, &v][which].clone();
            let err = grad_check(
                move |t, x| {
                    let mut vars = [t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone())];
                    vars[which] = x;
                    let z = t.attention(vars[0], vars[1], vars[2], 2, 2)?;
                    readout(t, z, 30)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "input {which}: {err}");
        }
    }

    #[test]
    fn attention_is_causal_and_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let q = t.constant(random(&[4, 2], &mut rng));
        let k = t.constant(random(&[4, 2], &mut rng));
        let v = t.param(random(&[4, 2], &mut rng));
        let z = t.attention(q, k, v, 1, 1).unwrap();
        let p = t.attention_probs(z).unwrap();
        for i in 0..4 {
            let row = &p[i * 4..(i + 1) * 4];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&x| x == 0.0));
        }
        // first position only sees itself
        assert_eq!(t.value(z).row(0), t.value(v).row(0));
    }

    #[test]
    fn fixed_attention_routes_no_gradient_to_scores() {
        let mut t = Tape::new();
        let v = t.param(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
        let z = t.attention_fixed(vec![1.0, 0.0, 0.5, 0.5], v, 1, 1).unwrap();
        assert_eq!(t.value(z).data(), &[1.0, 2.0]);
        let loss = t.sum(z);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(v).unwrap().data(), &[1.5, 0.5]);
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut t = Tape::new();
            let x = t.param(random(&[5, 4], &mut rng));
            let w = t.param(random(&[4, 4], &mut rng));
            let g = t.constant(Tensor::vector(vec![1.0; 4]));
            let h = t.rmsnorm(x, g, 1e-6).unwrap();
            let y = t.matmul(h, w).unwrap();
            let y = t.gelu(y);
            let s = t.softmax_rows(y).unwrap();
            let loss = t.sum(s);
            let loss = t.scale(loss, 0.5);
            t.backward(loss).unwrap();
            (
                t.value(y).clone(),
                t.grad(x).unwrap().clone(),
                t.grad(w).unwrap().clone(),
            )
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
        assert_eq!(a.2.data(), b.2.data());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let n = xs.len();
            let mut t = Tape::new();
            let x = t.constant(Tensor::matrix(1, n, xs).unwrap());
            let y = t.softmax_rows(x).unwrap();
            let s: f64 = t.value(y).data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(t.value(y).data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn rmsnorm_is_scale_invariant(
            xs in proptest::collection::vec(-2.0f64..2.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(xs.iter().any(|x| x.abs() > 1e-3));
            let mut t = Tape::new();
            let g = t.constant(Tensor::vector(vec![0.5, 1.0, -2.0, 3.0]));
            let x = t.constant(Tensor::matrix(1, 4, xs.clone()).unwrap());
            let cx = t.constant(Tensor::matrix(1, 4, xs.iter().map(|v| v * c).collect()).unwrap());
            let a = t.rmsnorm(x, g, 0.0).unwrap();
            let b = t.rmsnorm(cx, g, 0.0).unwrap();
            prop_assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-10);
        }

        #[test]
        fn matmul_and_norm_gradients_agree_with_differences(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[3, 4], &mut rng);
            let w = random(&[4, 3], &mut rng);
            let err = grad_check(|t, x| {
                let g = t.constant(Tensor::vector(vec![1.0; 4]));
                let h = t.rmsnorm(x, g, 1e-6)?;
                let ww = t.constant(w.clone());
                let y = t.matmul(h, ww)?;
                let y = t.gelu(y);
                readout(t, y, seed)
            }, &x, 1e-5).unwrap();
            prop_assert!(err < 1e-4, "{}", err);
        }
    }
}
