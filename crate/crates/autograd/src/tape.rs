use std::borrow::Cow;
use std::cell::{Ref, RefCell};

use crate::matrix::Matrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which entries of each row take part in a row softmax.
#[derive(Clone, Copy, Debug)]
pub enum SoftmaxMask<'m> {
    /// Every column.
    Full,
    /// Row `i` sees columns `0..=i + offset`.
    Causal { offset: usize },
    /// Row `i` sees exactly the listed columns.
    Lists(&'m [Vec<usize>]),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation over matrices so it can be differentiated in
/// reverse. Parameters may be borrowed for the lifetime `'a` instead of
/// copied onto the tape.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: RefCell<Vec<Node<'a>>>,
}

/// Gradients of a scalar with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&self, value: Cow<'a, Matrix>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn derived(&self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let rg = self.needs(inputs);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A trainable leaf borrowed from outside the tape.
    pub fn param(&self, value: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// A trainable leaf owned by the tape.
    pub fn var(&self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(&self.value(b));
        self.derived(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(&self.value(b));
        self.derived(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.derived(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.derived(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        self.derived(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds the 1 x cols `row` to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let v = {
            let av = self.value(a);
            let rv = self.value(row);
            assert_eq!(rv.rows(), 1, "add_row expects a row vector");
            assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
            let mut out = av.clone();
            for r in 0..out.rows() {
                for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                    *o += b;
                }
            }
            out
        };
        self.derived(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.derived(v, Op::Scale(a, s), &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.derived(v, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.derived(v, Op::LeakyRelu(a, slope), &[a])
    }

    /// Which side of zero every rectifier input falls on, in tape order.
    /// Two tapes with equal patterns sit on the same linear piece of every
    /// rectifier.
    pub fn rectifier_pattern(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut pattern = Vec::new();
        for node in nodes.iter() {
            if let Op::Relu(a) | Op::LeakyRelu(a, _) = node.op {
                pattern.extend(nodes[a.0].value.data().iter().map(|&x| x > 0.0));
            }
        }
        pattern
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.derived(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.derived(v, Op::Tanh(a), &[a])
    }

    /// Row-wise softmax. Entries excluded by `mask` are exactly zero.
    pub fn softmax(&self, a: Var, mask: SoftmaxMask<'_>) -> Var {
        let v = softmax_rows(&self.value(a), mask);
        self.derived(v, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (out, xhat, inv_std) = {
            let xv = self.value(x);
            let g = self.value(gain);
            let b = self.value(bias);
            let (rows, cols) = xv.shape();
            assert_eq!(g.shape(), (1, cols), "layer norm gain shape");
            assert_eq!(b.shape(), (1, cols), "layer norm bias shape");
            let mut xhat = Matrix::zeros(rows, cols);
            let mut out = Matrix::zeros(rows, cols);
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = xv.row(r);
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for c in 0..cols {
                    let h = (row[c] - mean) * is;
                    xhat.set(r, c, h);
                    out.set(r, c, h * g.data()[c] + b.data()[c]);
                }
            }
            (out, xhat, inv_std)
        };
        self.derived(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let v = {
            let vals: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
            let rows = vals[0].rows();
            let cols: usize = vals.iter().map(|m| m.cols()).sum();
            let mut out = Matrix::zeros(rows, cols);
            for r in 0..rows {
                let mut off = 0;
                for m in &vals {
                    assert_eq!(m.rows(), rows, "concat_cols row mismatch");
                    out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
                    off += m.cols();
                }
            }
            out
        };
        self.derived(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let v = {
            let av = self.value(a);
            assert!(start <= end && end <= av.cols(), "column slice out of range");
            let mut out = Matrix::zeros(av.rows(), end - start);
            for r in 0..av.rows() {
                out.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
            }
            out
        };
        self.derived(v, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let v = {
            let vals: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
            let cols = vals[0].cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for m in &vals {
                assert_eq!(m.cols(), cols, "concat_rows column mismatch");
                data.extend_from_slice(m.data());
                rows += m.rows();
            }
            Matrix::from_vec(rows, cols, data)
        };
        self.derived(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let v = {
            let av = self.value(a);
            assert!(start <= end && end <= av.rows(), "row slice out of range");
            let cols = av.cols();
            Matrix::from_vec(end - start, cols, av.data()[start * cols..end * cols].to_vec())
        };
        self.derived(v, Op::SliceRows(a, start), &[a])
    }

    /// Row `indices[i]` of `table` becomes row `i` of the result.
    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Var {
        let v = {
            let t = self.value(table);
            let mut out = Matrix::zeros(indices.len(), t.cols());
            for (i, &ix) in indices.iter().enumerate() {
                assert!(ix < t.rows(), "gather index {ix} out of range for {} rows", t.rows());
                out.row_mut(i).copy_from_slice(t.row(ix));
            }
            out
        };
        self.derived(v, Op::Gather(table, indices.to_vec()), &[table])
    }

    /// Summed negative log-likelihood of `targets[i]` under the softmax of
    /// row `i` of `logits`. Returns a 1x1 value.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Var {
        let (loss, probs) = {
            let l = self.value(logits);
            assert_eq!(l.rows(), targets.len(), "one target per logit row");
            let probs = softmax_rows(&l, SoftmaxMask::Full);
            let mut loss = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                loss -= log_softmax_at(l.row(r), t);
            }
            (loss, probs)
        };
        self.derived(
            Matrix::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.derived(v, Op::Sum(a), &[a])
    }

    /// Reverse pass from a 1x1 output.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[output.0] = Some(Matrix::scalar(1.0));

        for id in (0..=output.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |v: Var| nodes[v.0].value.as_ref();
            let wants = |v: Var| nodes[v.0].requires_grad;
            let send = |v: Var, delta: Matrix, grads: &mut Vec<Option<Matrix>>| {
                if wants(v) {
                    accumulate(&mut grads[v.0], delta);
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        send(*a, g.matmul_t(val(*b)), &mut grads);
                    }
                    if wants(*b) {
                        send(*b, val(*a).t_matmul(&g), &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    if wants(*a) {
                        send(*a, g.matmul(val(*b)), &mut grads);
                    }
                    if wants(*b) {
                        send(*b, g.t_matmul(val(*a)), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        send(*a, g.clone(), &mut grads);
                    }
                    send(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        send(*a, g.clone(), &mut grads);
                    }
                    send(*b, g.map(|x| -x), &mut grads);
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        send(*a, g.zip_map(val(*b), |x, y| x * y), &mut grads);
                    }
                    if wants(*b) {
                        send(*b, g.zip_map(val(*a), |x, y| x * y), &mut grads);
                    }
                }
                Op::AddRow(a, row) => {
                    if wants(*row) {
                        send(*row, g.column_sums(), &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Scale(a, s) => send(*a, g.map(|x| x * s), &mut grads),
                Op::Relu(a) => {
                    send(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 }), &mut grads)
                }
                Op::LeakyRelu(a, slope) => send(
                    *a,
                    g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { slope * d }),
                    &mut grads,
                ),
                Op::Sigmoid(a) => {
                    send(*a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y)), &mut grads)
                }
                Op::Tanh(a) => send(*a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y)), &mut grads),
                Op::Softmax(a) => {
                    let y = node.value.as_ref();
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (p, q)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (q - dot);
                        }
                    }
                    send(*a, dx, &mut grads);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = val(*gain);
                    let (rows, cols) = xhat.shape();
                    if wants(*gain) {
                        send(*gain, g.zip_map(xhat, |d, h| d * h).column_sums(), &mut grads);
                    }
                    if wants(*bias) {
                        send(*bias, g.column_sums(), &mut grads);
                    }
                    if wants(*x) {
                        let mut dx = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            let dh: Vec<f64> =
                                g.row(r).iter().zip(gv.data()).map(|(d, w)| d * w).collect();
                            let hr = xhat.row(r);
                            let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                            let mean_dh_h =
                                dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                            for c in 0..cols {
                                dx.set(r, c, inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h));
                            }
                        }
                        send(*x, dx, &mut grads);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).cols();
                        if wants(*p) {
                            let mut piece = Matrix::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                piece.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                            }
                            send(*p, piece, &mut grads);
                        }
                        off += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = val(*a);
                    let mut full = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        full.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    send(*a, full, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let h = val(*p).rows();
                        if wants(*p) {
                            let piece =
                                Matrix::from_vec(h, cols, g.data()[off * cols..(off + h) * cols].to_vec());
                            send(*p, piece, &mut grads);
                        }
                        off += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = val(*a);
                    let mut full = Matrix::zeros(src.rows(), src.cols());
                    let cols = src.cols();
                    full.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                    send(*a, full, &mut grads);
                }
                Op::Gather(table, indices) => {
                    let t = val(*table);
                    let mut full = Matrix::zeros(t.rows(), t.cols());
                    for (i, &ix) in indices.iter().enumerate() {
                        for (o, d) in full.row_mut(ix).iter_mut().zip(g.row(i)) {
                            *o += d;
                        }
                    }
                    send(*table, full, &mut grads);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g.item();
                    let mut dl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let cell = dl.get(r, t);
                        dl.set(r, t, cell - 1.0);
                    }
                    dl.scale_in_place(scale);
                    send(*logits, dl, &mut grads);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, Matrix::filled(r, c, g.item()), &mut grads);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        Some(existing) => existing.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log softmax(row)[target]`, computed stably.
pub fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row[target] - lse
}

/// Log-probabilities of a single row of logits.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x - lse).collect()
}

pub fn softmax_rows(m: &Matrix, mask: SoftmaxMask<'_>) -> Matrix {
    let (rows, cols) = m.shape();
    let mut out = Matrix::zeros(rows, cols);
    let mut full: Vec<usize> = Vec::new();
    for r in 0..rows {
        let allowed: &[usize] = match mask {
            SoftmaxMask::Full => {
                if full.len() != cols {
                    full = (0..cols).collect();
                }
                &full
            }
            SoftmaxMask::Causal { offset } => {
                let upto = (r + offset + 1).min(cols);
                if full.len() != cols {
                    full = (0..cols).collect();
                }
                &full[..upto]
            }
            SoftmaxMask::Lists(lists) => &lists[r],
        };
        assert!(!allowed.is_empty(), "softmax row {r} has no admissible entries");
        let row = m.row(r);
        let max = allowed.iter().map(|&c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &c in allowed {
            let e = (row[c] - max).exp();
            out.set(r, c, e);
            z += e;
        }
        for &c in allowed {
            let v = out.get(r, c) / z;
            out.set(r, c, v);
        }
    }
    out
}
