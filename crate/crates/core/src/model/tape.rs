//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Grouped ops treat a `(n·g) × c` matrix as `n` consecutive groups of `g`
//! rows; this is how per-query neighbourhoods are batched.

use nalgebra::DMatrix;

pub type Mat = DMatrix<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Keeps the sigmoid of the input for the backward pass.
    Silu(Var, Mat),
    Transpose(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Var, Var),
    SliceCols(Var, usize),
    SegmentMax(Var, Vec<usize>),
    GroupedDot(Var, Var),
    GroupedSum(Var, Var),
    Reshape(Var),
    Softmax(Var),
    /// Keeps the row probabilities for the backward pass.
    LogSoftmax(Var, Mat),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat, inv_std: Vec<f64> },
    MeanRows(Var),
    Nll(Var, Vec<usize>),
    RowNorm(Var),
    Sum(Var),
}

#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Mat>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let needs = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            other => parents(other).iter().any(|p| self.needs_grad[p.0]),
        };
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][(0, 0)]
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Constant)
    }

    /// Leaf whose gradient is reported under slot `id` by [`Graph::param_grads`].
    pub fn param(&mut self, id: usize, m: Mat) -> Var {
        self.push(m, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a + 1·row`, broadcasting a `1 × c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut v = self.value(a).clone();
        let r = self.value(row);
        for (j, col) in cols_mut(&mut v).enumerate() {
            let b = r[(0, j)];
            col.iter_mut().for_each(|x| *x += b);
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sig = x.map(sigmoid);
        let v = x.component_mul(&sig);
        self.push(v, Op::Silu(a, sig))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros(idx.len(), src.ncols());
        for (out, col) in cols_mut(&mut v).zip(src.column_iter()) {
            let col = col.as_slice();
            for (o, &k) in out.iter_mut().zip(&idx) {
                *o = col[k];
            }
        }
        self.push(v, Op::Gather(a, idx))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let m = self.value(*p);
            v.columns_mut(at, m.ncols()).copy_from(m);
            at += m.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let mut v = Mat::zeros(x.nrows() + y.nrows(), x.ncols());
        v.rows_mut(0, x.nrows()).copy_from(x);
        v.rows_mut(x.nrows(), y.nrows()).copy_from(y);
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).columns(start, len).into_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// Column-wise maximum over each group of `group` rows.
    pub fn segment_max(&mut self, a: Var, group: usize) -> Var {
        let src = self.value(a);
        let n = src.nrows() / group;
        let mut arg = vec![0usize; n * src.ncols()];
        let mut v = Mat::zeros(n, src.ncols());
        for c in 0..src.ncols() {
            let col = src.column(c);
            for i in 0..n {
                let mut best = i * group;
                for r in i * group + 1..(i + 1) * group {
                    if col[r] > col[best] {
                        best = r;
                    }
                }
                arg[c * n + i] = best;
                v[(i, c)] = col[best];
            }
        }
        self.push(v, Op::SegmentMax(a, arg))
    }

    /// `out[i, j] = keys[i·g + j, :] · q[i, :]` with `g = keys.rows / q.rows`.
    pub fn grouped_dot(&mut self, keys: Var, q: Var) -> Var {
        let (k, qm) = (self.value(keys), self.value(q));
        let n = qm.nrows();
        let g = k.nrows() / n;
        // accumulate row-major, transpose once at the end
        let mut t = vec![0.0; n * g];
        for c in 0..qm.ncols() {
            let (kc, qc) = (k.column(c), qm.column(c));
            let (kc, qc) = (kc.as_slice(), qc.as_slice());
            for i in 0..n {
                let qi = qc[i];
                for (o, kv) in t[i * g..(i + 1) * g].iter_mut().zip(&kc[i * g..(i + 1) * g]) {
                    *o += kv * qi;
                }
            }
        }
        let v = Mat::from_row_slice(n, g, &t);
        self.push(v, Op::GroupedDot(keys, q))
    }

    /// `out[i, :] = Σ_j w[i, j] · values[i·g + j, :]`.
    pub fn grouped_sum(&mut self, w: Var, values: Var) -> Var {
        let (wm, vm) = (self.value(w), self.value(values));
        let (n, g) = (wm.nrows(), wm.ncols());
        let wt = wm.transpose();
        let wt = wt.as_slice();
        let mut v = Mat::zeros(n, vm.ncols());
        for (out, vc) in cols_mut(&mut v).zip(vm.column_iter()) {
            let vc = vc.as_slice();
            for (i, o) in out.iter_mut().enumerate() {
                *o = wt[i * g..(i + 1) * g].iter().zip(&vc[i * g..(i + 1) * g]).map(|(a, b)| a * b).sum();
            }
        }
        self.push(v, Op::GroupedSum(w, values))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = reshape_row_major(self.value(a), rows, cols);
        self.push(v, Op::Reshape(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        let p = v.map(f64::exp);
        self.push(v, Op::LogSoftmax(a, p))
    }

    /// Per-row normalization over the columns, then `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xm = self.value(x);
        let (n, c) = (xm.nrows(), xm.ncols());
        let mut xhat = Mat::zeros(n, c);
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = xm.row(i);
            let mu = row.mean();
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            inv_std[i] = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                xhat[(i, j)] = (xm[(i, j)] - mu) * inv_std[i];
            }
        }
        let (gm, bm) = (self.value(gain), self.value(bias));
        let v = Mat::from_fn(n, c, |i, j| xhat[(i, j)] * gm[(0, j)] + bm[(0, j)]);
        self.push(v, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::from_fn(1, m.ncols(), |_, j| m.column(j).mean());
        self.push(v, Op::MeanRows(a))
    }

    /// `−Σ_i logp[i, labels[i]]` as a `1 × 1` value.
    pub fn nll(&mut self, logp: Var, labels: Vec<usize>) -> Var {
        let m = self.value(logp);
        let s: f64 = labels.iter().enumerate().map(|(i, &l)| -m[(i, l)]).sum();
        self.push(Mat::from_element(1, 1, s), Op::Nll(logp, labels))
    }

    /// Euclidean norm of every row, as a column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::from_fn(m.nrows(), 1, |i, _| m.row(i).norm());
        self.push(v, Op::RowNorm(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Mat::from_element(1, 1, s), Op::Sum(a))
    }

    /// Gradients of the scalar `root` for every node.
    pub fn backward(&self, root: Var) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = vec![None; self.values.len()];
        grads[root.0] = Some(Mat::from_element(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        grads
    }

    /// Gradients of `root` collected per parameter slot (`None` when unused).
    pub fn param_grads(&self, root: Var, slots: usize) -> Vec<Option<Mat>> {
        let grads = self.backward(root);
        let mut out = vec![None; slots];
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Param(id) = op {
                if let Some(g) = &grads[i] {
                    accumulate(&mut out[*id], g.clone());
                }
            }
        }
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    fn backprop_node(&self, i: usize, dy: &Mat, grads: &mut [Option<Mat>]) {
        let val = &self.values[i];
        match &self.ops[i] {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], dy * self.value(*b).transpose());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).transpose() * dy);
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], dy.clone());
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], dy.clone());
                }
                if self.wants(*row) {
                    accumulate(&mut grads[row.0], Mat::from_fn(1, dy.ncols(), |_, j| dy.column(j).sum()));
                }
            }
            Op::Scale(a, s) => accumulate(&mut grads[a.0], dy * *s),
            Op::Silu(a, sig) => {
                let x = self.value(*a);
                let mut g = dy.component_mul(sig);
                for ((gv, &x), &s) in g.iter_mut().zip(x.iter()).zip(sig.iter()) {
                    *gv *= 1.0 + x * (1.0 - s);
                }
                accumulate(&mut grads[a.0], g);
            }
            Op::Transpose(a) => accumulate(&mut grads[a.0], dy.transpose()),
            Op::Gather(a, idx) => {
                let src = self.value(*a);
                let mut g = Mat::zeros(src.nrows(), src.ncols());
                for (gc, dc) in cols_mut(&mut g).zip(dy.column_iter()) {
                    for (&d, &k) in dc.as_slice().iter().zip(idx) {
                        gc[k] += d;
                    }
                }
                accumulate(&mut grads[a.0], g);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], dy.columns(at, w).into_owned());
                    }
                    at += w;
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).nrows();
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], dy.rows(0, na).into_owned());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], dy.rows(na, dy.nrows() - na).into_owned());
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut g = Mat::zeros(src.nrows(), src.ncols());
                g.columns_mut(*start, dy.ncols()).copy_from(dy);
                accumulate(&mut grads[a.0], g);
            }
            Op::SegmentMax(a, arg) => {
                let src = self.value(*a);
                let n = dy.nrows();
                let mut g = Mat::zeros(src.nrows(), src.ncols());
                for (c, (gc, dc)) in cols_mut(&mut g).zip(dy.column_iter()).enumerate() {
                    for (&d, &k) in dc.as_slice().iter().zip(&arg[c * n..(c + 1) * n]) {
                        gc[k] += d;
                    }
                }
                accumulate(&mut grads[a.0], g);
            }
            Op::GroupedDot(keys, q) => {
                let (k, qm) = (self.value(*keys), self.value(*q));
                let (n, gsz) = (dy.nrows(), dy.ncols());
                // dyt holds dy row-major so each group is contiguous
                let dyt = dy.transpose();
                let dyt = dyt.as_slice();
                if self.wants(*keys) {
                    let mut dk = Mat::zeros(k.nrows(), k.ncols());
                    for (dc, qc) in cols_mut(&mut dk).zip(qm.column_iter()) {
                        let (dc, qc) = (dc, qc.as_slice());
                        for i in 0..n {
                            for (o, d) in dc[i * gsz..(i + 1) * gsz].iter_mut().zip(&dyt[i * gsz..(i + 1) * gsz]) {
                                *o = d * qc[i];
                            }
                        }
                    }
                    accumulate(&mut grads[keys.0], dk);
                }
                if self.wants(*q) {
                    let mut dq = Mat::zeros(n, qm.ncols());
                    for (dc, kc) in cols_mut(&mut dq).zip(k.column_iter()) {
                        let kc = kc.as_slice();
                        for (i, o) in dc.iter_mut().enumerate() {
                            *o = dyt[i * gsz..(i + 1) * gsz].iter().zip(&kc[i * gsz..(i + 1) * gsz]).map(|(a, b)| a * b).sum();
                        }
                    }
                    accumulate(&mut grads[q.0], dq);
                }
            }
            Op::GroupedSum(w, values) => {
                let (wm, vm) = (self.value(*w), self.value(*values));
                let (n, gsz) = (wm.nrows(), wm.ncols());
                if self.wants(*w) {
                    // row-major accumulation, transposed once at the end
                    let mut t = vec![0.0; n * gsz];
                    for (dc, vc) in dy.column_iter().zip(vm.column_iter()) {
                        let (dc, vc) = (dc.as_slice(), vc.as_slice());
                        for i in 0..n {
                            let d = dc[i];
                            for (o, v) in t[i * gsz..(i + 1) * gsz].iter_mut().zip(&vc[i * gsz..(i + 1) * gsz]) {
                                *o += d * v;
                            }
                        }
                    }
                    accumulate(&mut grads[w.0], Mat::from_row_slice(n, gsz, &t));
                }
                if self.wants(*values) {
                    let wt = wm.transpose();
                    let wt = wt.as_slice();
                    let mut dv = Mat::zeros(vm.nrows(), vm.ncols());
                    for (out, dc) in cols_mut(&mut dv).zip(dy.column_iter()) {
                        let (out, dc) = (out, dc.as_slice());
                        for i in 0..n {
                            let d = dc[i];
                            for (o, w) in out[i * gsz..(i + 1) * gsz].iter_mut().zip(&wt[i * gsz..(i + 1) * gsz]) {
                                *o = w * d;
                            }
                        }
                    }
                    accumulate(&mut grads[values.0], dv);
                }
            }
            Op::Reshape(a) => {
                let src = self.value(*a);
                accumulate(&mut grads[a.0], reshape_row_major(dy, src.nrows(), src.ncols()));
            }
            Op::Softmax(a) => {
                let mut g = dy.component_mul(val);
                let s = row_sums(&g);
                for (gc, vc) in cols_mut(&mut g).zip(val.column_iter()) {
                    for ((o, v), sv) in gc.iter_mut().zip(vc.as_slice()).zip(&s) {
                        *o -= v * sv;
                    }
                }
                accumulate(&mut grads[a.0], g);
            }
            Op::LogSoftmax(a, p) => {
                let s = row_sums(dy);
                let mut g = dy.clone();
                for (gc, pc) in cols_mut(&mut g).zip(p.column_iter()) {
                    for ((o, pv), sv) in gc.iter_mut().zip(pc.as_slice()).zip(&s) {
                        *o -= pv * sv;
                    }
                }
                accumulate(&mut grads[a.0], g);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gm = self.value(*gain);
                let (n, c) = (dy.nrows(), dy.ncols());
                if self.wants(*x) {
                    let mut dx = Mat::zeros(n, c);
                    for i in 0..n {
                        let dxhat: Vec<f64> = (0..c).map(|j| dy[(i, j)] * gm[(0, j)]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().enumerate().map(|(j, d)| d * xhat[(i, j)]).sum();
                        for j in 0..c {
                            dx[(i, j)] = inv_std[i] / c as f64 * (c as f64 * dxhat[j] - s1 - xhat[(i, j)] * s2);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(*gain) {
                    let dg = Mat::from_fn(1, c, |_, j| (0..n).map(|i| dy[(i, j)] * xhat[(i, j)]).sum());
                    accumulate(&mut grads[gain.0], dg);
                }
                if self.wants(*bias) {
                    accumulate(&mut grads[bias.0], Mat::from_fn(1, c, |_, j| dy.column(j).sum()));
                }
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).nrows();
                let g = Mat::from_fn(n, dy.ncols(), |_, j| dy[(0, j)] / n as f64);
                accumulate(&mut grads[a.0], g);
            }
            Op::Nll(logp, labels) => {
                let src = self.value(*logp);
                let mut g = Mat::zeros(src.nrows(), src.ncols());
                for (i, &l) in labels.iter().enumerate() {
                    g[(i, l)] = -dy[(0, 0)];
                }
                accumulate(&mut grads[logp.0], g);
            }
            Op::RowNorm(a) => {
                let src = self.value(*a);
                let mut g = Mat::zeros(src.nrows(), src.ncols());
                for i in 0..src.nrows() {
                    let norm = val[(i, 0)];
                    if norm > 0.0 {
                        for j in 0..src.ncols() {
                            g[(i, j)] = dy[(i, 0)] * src[(i, j)] / norm;
                        }
                    }
                }
                accumulate(&mut grads[a.0], g);
            }
            Op::Sum(a) => {
                let src = self.value(*a);
                accumulate(&mut grads[a.0], Mat::from_element(src.nrows(), src.ncols(), dy[(0, 0)]));
            }
        }
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Constant | Op::Param(_) => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::ConcatRows(a, b) => vec![*a, *b],
        Op::GroupedDot(a, b) | Op::GroupedSum(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Silu(a, _)
        | Op::Transpose(a)
        | Op::Gather(a, _)
        | Op::SliceCols(a, _)
        | Op::SegmentMax(a, _)
        | Op::Reshape(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a, _)
        | Op::MeanRows(a)
        | Op::Nll(a, _)
        | Op::RowNorm(a)
        | Op::Sum(a) => vec![*a],
        Op::ConcatCols(parts) => parts.clone(),
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn reshape_row_major(m: &Mat, rows: usize, cols: usize) -> Mat {
    assert_eq!(m.nrows() * m.ncols(), rows * cols, "reshape size");
    let src_cols = m.ncols();
    Mat::from_fn(rows, cols, |r, c| {
        let flat = r * cols + c;
        m[(flat / src_cols, flat % src_cols)]
    })
}

/// Mutable columns of a column-major matrix as contiguous slices.
fn cols_mut(m: &mut Mat) -> std::slice::ChunksMut<'_, f64> {
    let r = m.nrows().max(1);
    m.as_mut_slice().chunks_mut(r)
}

fn row_sums(m: &Mat) -> Vec<f64> {
    let mut s = vec![0.0; m.nrows()];
    for c in m.column_iter() {
        for (acc, v) in s.iter_mut().zip(c.as_slice()) {
            *acc += v;
        }
    }
    s
}

// Row-wise ops run on the transpose so that every row is contiguous.

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut t = m.transpose();
    for col in cols_mut(&mut t) {
                let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in col.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        col.iter_mut().for_each(|v| *v /= s);
    }
    t.transpose()
}

pub fn log_softmax_rows(m: &Mat) -> Mat {
    let mut t = m.transpose();
    for col in cols_mut(&mut t) {
                let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        col.iter_mut().for_each(|v| *v -= lse);
    }
    t.transpose()
}
