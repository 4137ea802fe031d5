//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar node with respect to every node that requires one. Leaves created
//! with [`Graph::constant`] never receive gradients, and operations whose
//! inputs are all constant are skipped during the backward sweep.
//!
//! Sequences are laid out with one row per time step or token and one column
//! per feature.

use crate::tensor::{gemm, matmul, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN10: f64 = std::f64::consts::LN_10;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow { a: NodeId, bias: NodeId },
    Scale(NodeId, f64),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Log1p(NodeId),
    Square(NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Matrix, inv_std: Vec<f64> },
    SliceCols { a: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SliceRows { a: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    MeanRows(NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    Frame { a: NodeId, starts: Vec<isize> },
    OverlapAdd { a: NodeId, starts: Vec<isize> },
    Conv1d { x: NodeId, w: NodeId, dilation: usize, cols: Matrix },
    CosineDistanceMean { a: NodeId, b: NodeId, eps: f64 },
    NegSiSdr { est: NodeId, reference: Vec<f64>, eps: f64 },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads[id.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.data()[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// A differentiable input.
    pub fn variable(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// `op(a) · op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> NodeId {
        let v = matmul(self.value(a), ta, self.value(b), tb);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, false, b, false)
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(va.rows(), va.cols(), data)
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Matrix {
        let va = self.value(a);
        Matrix::from_vec(va.rows(), va.cols(), va.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Adds a `1 × cols` bias to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(bias));
        assert_eq!(vb.shape(), (1, va.cols()), "bias must be 1x{}", va.cols());
        let mut v = va.clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push(v, Op::AddRow { a, bias }, rg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.map(a, |x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn log1p(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, f64::ln_1p);
        let rg = self.rg(&[a]);
        self.push(v, Op::Log1p(a), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    /// Row-wise layer normalization with `1 × cols` scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, cols));
        assert_eq!(b.shape(), (1, cols));
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
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
        let rg = self.rg(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "column slice out of range");
        let v = Matrix::from_fn(va.rows(), len, |r, c| va.get(r, start + c));
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceCols { a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + vp.cols()].copy_from_slice(vp.row(r));
            }
            off += vp.cols();
        }
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.rows(), "row slice out of range");
        let v = va.rows_range(start, len);
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceRows { a, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let rg = self.rg(parts);
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Mean over rows, producing `1 × cols`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let n = va.rows() as f64;
        let v = Matrix::from_fn(1, va.cols(), |_, c| (0..va.rows()).map(|r| va.get(r, c)).sum::<f64>() / n);
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanRows(a), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    /// Gathers `starts.len()` windows of `len` consecutive elements from the
    /// flattened input; positions outside the input read as zero.
    pub fn frame(&mut self, a: NodeId, starts: Vec<isize>, len: usize) -> NodeId {
        let src = self.value(a).data();
        let n = src.len() as isize;
        let mut v = Matrix::zeros(starts.len(), len);
        for (t, &s) in starts.iter().enumerate() {
            let row = v.row_mut(t);
            for (j, x) in row.iter_mut().enumerate() {
                let i = s + j as isize;
                if i >= 0 && i < n {
                    *x = src[i as usize];
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::Frame { a, starts }, rg)
    }

    /// Adjoint of [`Graph::frame`]: row `t` is added into an `out_len × 1`
    /// signal at offset `starts[t]`; samples falling outside are dropped.
    pub fn overlap_add(&mut self, a: NodeId, starts: Vec<isize>, out_len: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows(), starts.len());
        let mut out = vec![0.0; out_len];
        for (t, &s) in starts.iter().enumerate() {
            for (j, &x) in va.row(t).iter().enumerate() {
                let i = s + j as isize;
                if i >= 0 && (i as usize) < out_len {
                    out[i as usize] += x;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(Matrix::from_vec(out_len, 1, out), Op::OverlapAdd { a, starts }, rg)
    }

    /// Stride-1 dilated convolution with "same" zero padding over the row
    /// (time) axis. `x` is `T × C_in`; `w` is `(k · C_in) × C_out` with row
    /// `j · C_in + c` holding tap `j` of input channel `c`; `k` must be odd.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, dilation: usize) -> NodeId {
        let vx = self.value(x);
        let vw = self.value(w);
        let (t_len, c_in) = vx.shape();
        assert_eq!(vw.rows() % c_in, 0, "conv weight rows must be a multiple of input channels");
        let k = vw.rows() / c_in;
        assert!(k % 2 == 1, "conv kernel size must be odd");
        let half = (k / 2) as isize;
        let mut cols = Matrix::zeros(t_len, k * c_in);
        for t in 0..t_len {
            let row = cols.row_mut(t);
            for j in 0..k {
                let src = t as isize + (j as isize - half) * dilation as isize;
                if src >= 0 && (src as usize) < t_len {
                    row[j * c_in..(j + 1) * c_in].copy_from_slice(vx.row(src as usize));
                }
            }
        }
        let v = matmul(&cols, false, vw, false);
        let rg = self.rg(&[x, w]);
        self.push(v, Op::Conv1d { x, w, dilation, cols }, rg)
    }

    /// Mean cosine distance between paired rows of `a` and `b`, with `eps`
    /// added to each product of norms.
    pub fn cosine_distance_mean(&mut self, a: NodeId, b: NodeId, eps: f64) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "cosine distance shape mismatch");
        let m = va.rows();
        let total: f64 = (0..m)
            .map(|r| {
                let (x, y) = (va.row(r), vb.row(r));
                1.0 - dot(x, y) / (norm(x) * norm(y) + eps)
            })
            .sum();
        let rg = self.rg(&[a, b]);
        self.push(Matrix::scalar(total / m as f64), Op::CosineDistanceMean { a, b, eps }, rg)
    }

    /// Negative scale-invariant SDR (dB) of the flattened estimate against a
    /// fixed reference, with `eps` added to the residual energy.
    pub fn neg_si_sdr(&mut self, est: NodeId, reference: &[f64], eps: f64) -> NodeId {
        let e = self.value(est).data();
        assert_eq!(e.len(), reference.len(), "si-sdr length mismatch");
        let (p, n, _) = si_sdr_terms(reference, e);
        let v = -10.0 * (p / (n + eps)).log10();
        let rg = self.rg(&[est]);
        self.push(Matrix::scalar(v), Op::NegSiSdr { est, reference: reference.to_vec(), eps }, rg)
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: NodeId) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward requires a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let da = if ta { matmul(vb, tb, g, true) } else { matmul(g, false, vb, !tb) };
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = if tb { matmul(g, true, va, ta) } else { matmul(va, !ta, g, false) };
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                if self.wants(b) {
                    let neg = Matrix::from_vec(g.rows(), g.cols(), g.data().iter().map(|v| -v).collect());
                    self.accumulate(grads, b, neg);
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    self.accumulate(grads, a, hadamard(g, vb));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, hadamard(g, va));
                }
            }
            &Op::AddRow { a, bias } => {
                self.accumulate(grads, a, g.clone());
                if self.wants(bias) {
                    let db = Matrix::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g.get(r, c)).sum());
                    self.accumulate(grads, bias, db);
                }
            }
            &Op::Scale(a, s) => {
                let d = Matrix::from_vec(g.rows(), g.cols(), g.data().iter().map(|v| v * s).collect());
                self.accumulate(grads, a, d);
            }
            &Op::Gelu(a) => {
                let d = self.elementwise_grad(a, g, |x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let th = u.tanh();
                    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
                });
                self.accumulate(grads, a, d);
            }
            &Op::Sigmoid(a) => {
                let y = &node.value;
                let d = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(y.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect(),
                );
                self.accumulate(grads, a, d);
            }
            &Op::Log1p(a) => {
                let d = self.elementwise_grad(a, g, |x| 1.0 / (1.0 + x));
                self.accumulate(grads, a, d);
            }
            &Op::Square(a) => {
                let d = self.elementwise_grad(a, g, |x| 2.0 * x);
                self.accumulate(grads, a, d);
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for (c, out) in d.row_mut(r).iter_mut().enumerate() {
                        *out = yr[c] * (gr[c] - s);
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (rows, cols) = xhat.shape();
                let gam = self.value(*gamma);
                if self.wants(*gamma) {
                    let dg = Matrix::from_fn(1, cols, |_, c| (0..rows).map(|r| g.get(r, c) * xhat.get(r, c)).sum());
                    self.accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    let db = Matrix::from_fn(1, cols, |_, c| (0..rows).map(|r| g.get(r, c)).sum());
                    self.accumulate(grads, *beta, db);
                }
                if self.wants(*x) {
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..cols).map(|c| g.get(r, c) * gam.data()[c]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                            *out = inv_std[r] / n * (n * dxhat[c] - sum_d - xhat.get(r, c) * sum_dh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            &Op::SliceCols { a, start } => {
                let va = self.value(a);
                let mut d = Matrix::zeros(va.rows(), va.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let d = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                        self.accumulate(grads, p, d);
                    }
                    off += w;
                }
            }
            &Op::SliceRows { a, start } => {
                let va = self.value(a);
                let mut d = Matrix::zeros(va.rows(), va.cols());
                let cols = va.cols();
                d.data_mut()[start * cols..start * cols + g.data().len()].copy_from_slice(g.data());
                self.accumulate(grads, a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.wants(p) {
                        self.accumulate(grads, p, g.rows_range(off, h));
                    }
                    off += h;
                }
            }
            &Op::MeanRows(a) => {
                let va = self.value(a);
                let n = va.rows() as f64;
                let d = Matrix::from_fn(va.rows(), va.cols(), |_, c| g.get(0, c) / n);
                self.accumulate(grads, a, d);
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.transpose()),
            &Op::Sum(a) => {
                let va = self.value(a);
                let s = g.data()[0];
                self.accumulate(grads, a, Matrix::from_vec(va.rows(), va.cols(), vec![s; va.rows() * va.cols()]));
            }
            Op::Frame { a, starts } => {
                let va = self.value(*a);
                let n = va.data().len() as isize;
                let mut d = Matrix::zeros(va.rows(), va.cols());
                let dd = d.data_mut();
                for (t, &s) in starts.iter().enumerate() {
                    for (j, &gv) in g.row(t).iter().enumerate() {
                        let i = s + j as isize;
                        if i >= 0 && i < n {
                            dd[i as usize] += gv;
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::OverlapAdd { a, starts } => {
                let va = self.value(*a);
                let out_len = g.data().len() as isize;
                let gd = g.data();
                let mut d = Matrix::zeros(va.rows(), va.cols());
                for (t, &s) in starts.iter().enumerate() {
                    for (j, x) in d.row_mut(t).iter_mut().enumerate() {
                        let i = s + j as isize;
                        if i >= 0 && i < out_len {
                            *x = gd[i as usize];
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Conv1d { x, w, dilation, cols } => {
                let vw = self.value(*w);
                if self.wants(*w) {
                    self.accumulate(grads, *w, matmul(cols, true, g, false));
                }
                if self.wants(*x) {
                    let vx = self.value(*x);
                    let (t_len, c_in) = vx.shape();
                    let k = vw.rows() / c_in;
                    let half = (k / 2) as isize;
                    let mut dcols = Matrix::zeros(t_len, k * c_in);
                    gemm(1.0, g, false, vw, true, 0.0, &mut dcols);
                    let mut dx = Matrix::zeros(t_len, c_in);
                    for t in 0..t_len {
                        let row = dcols.row(t);
                        for j in 0..k {
                            let src = t as isize + (j as isize - half) * *dilation as isize;
                            if src >= 0 && (src as usize) < t_len {
                                for (o, v) in dx.row_mut(src as usize).iter_mut().zip(&row[j * c_in..(j + 1) * c_in]) {
                                    *o += v;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            &Op::CosineDistanceMean { a, b, eps } => {
                let (va, vb) = (self.value(a), self.value(b));
                let m = va.rows();
                let scale = -g.data()[0] / m as f64;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                let mut db = Matrix::zeros(vb.rows(), vb.cols());
                for r in 0..m {
                    let (x, y) = (va.row(r), vb.row(r));
                    let (nx, ny, d) = (norm(x), norm(y), dot(x, y));
                    let den = nx * ny + eps;
                    let ca = if nx > 0.0 { d * ny / (nx * den * den) } else { 0.0 };
                    let cb = if ny > 0.0 { d * nx / (ny * den * den) } else { 0.0 };
                    for c in 0..x.len() {
                        da.set(r, c, scale * (y[c] / den - ca * x[c]));
                        db.set(r, c, scale * (x[c] / den - cb * y[c]));
                    }
                }
                self.accumulate(grads, a, da);
                self.accumulate(grads, b, db);
            }
            Op::NegSiSdr { est, reference, eps } => {
                let ve = self.value(*est);
                let e = ve.data();
                let (p, n, alpha) = si_sdr_terms(reference, e);
                let coeff = -10.0 / LN10 * g.data()[0];
                // d(log P) = 2 α s / P ; d(log(N+eps)) = -2 r / (N+eps), r = α s - e
                let d: Vec<f64> = reference
                    .iter()
                    .zip(e)
                    .map(|(&s, &x)| {
                        let r = alpha * s - x;
                        coeff * (2.0 * alpha * s / p + 2.0 * r / (n + eps))
                    })
                    .collect();
                self.accumulate(grads, *est, Matrix::from_vec(ve.rows(), ve.cols(), d));
            }
        }
    }

    fn elementwise_grad(&self, a: NodeId, g: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
        let va = self.value(a);
        Matrix::from_vec(g.rows(), g.cols(), g.data().iter().zip(va.data()).map(|(gv, &x)| gv * f(x)).collect())
    }
}

/// Projection terms of SI-SDR: target energy, residual energy and the
/// optimal scale `α = ⟨e, s⟩ / ‖s‖²`.
pub(crate) fn si_sdr_terms(reference: &[f64], estimate: &[f64]) -> (f64, f64, f64) {
    let energy = dot(reference, reference);
    let alpha = dot(estimate, reference) / energy;
    let target = alpha * alpha * energy;
    let residual: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(&s, &e)| {
            let r = alpha * s - e;
            r * r
        })
        .sum();
    (target, residual, alpha)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_vec(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(w ⊙ f(x)))/dx against central differences for every
    /// coordinate of `x`.
    fn check(x: Matrix, build: impl Fn(&mut Graph, NodeId) -> NodeId) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |x: &Matrix, w: Option<&Matrix>| -> (f64, Option<Matrix>, Matrix) {
            let mut g = Graph::new();
            let xi = g.variable(x.clone());
            let y = build(&mut g, xi);
            let yv = g.value(y).clone();
            let w = w.cloned().unwrap_or_else(|| Matrix::from_fn(yv.rows(), yv.cols(), |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6));
            let wi = g.constant(w.clone());
            let prod = g.mul(y, wi);
            let s = g.sum(prod);
            let grads = g.backward(s);
            (g.scalar(s), grads.get(xi).cloned(), w)
        };
        let (_, grad, w) = eval(&x, None);
        let grad = grad.expect("gradient for input");
        let h = 1e-6;
        for _ in 0..x.data().len().min(40) {
            let i = rng.random_range(0..x.data().len());
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(&xp, Some(&w)).0 - eval(&xm, Some(&w)).0) / (2.0 * h);
            let an = grad.data()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "coord {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_matrix(&mut rng, 4, 5);
        check(x.clone(), |g, x| g.gelu(x));
        check(x.clone(), |g, x| g.sigmoid(x));
        check(x.clone(), |g, x| {
            let s = g.square(x);
            g.log1p(s)
        });
        check(x.clone(), |g, x| g.softmax(x));
        check(x.clone(), |g, x| g.mean_rows(x));
        check(x.clone(), |g, x| g.transpose(x));
        check(x.clone(), |g, x| {
            let a = g.slice_cols(x, 1, 3);
            let b = g.slice_rows(x, 2, 2);
            let at = g.transpose(a);
            let c = g.matmul(at, x);
            let d = g.concat_rows(&[c, b]);
            g.concat_cols(&[d, d])
        });
    }

    #[test]
    fn matmul_gradients_all_transpositions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_matrix(&mut rng, 3, 4);
        let b = rand_matrix(&mut rng, 4, 2);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let sa = if ta { a.transpose() } else { a.clone() };
            let sb = if tb { b.transpose() } else { b.clone() };
            let cb = sb.clone();
            check(sa.clone(), move |g, x| {
                let k = g.constant(cb.clone());
                g.matmul_t(x, ta, k, tb)
            });
            check(sb, move |g, y| {
                let k = g.constant(sa.clone());
                g.matmul_t(k, ta, y, tb)
            });
        }
    }

    #[test]
    fn layer_norm_gradient_through_input_and_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_matrix(&mut rng, 3, 6);
        let gam = rand_matrix(&mut rng, 1, 6);
        let bet = rand_matrix(&mut rng, 1, 6);
        let (g1, b1) = (gam.clone(), bet.clone());
        check(x.clone(), move |g, x| {
            let a = g.constant(g1.clone());
            let b = g.constant(b1.clone());
            g.layer_norm(x, a, b, 1e-5)
        });
        let xx = x.clone();
        check(gam, move |g, gm| {
            let xc = g.constant(xx.clone());
            let b = g.constant(bet.clone());
            g.layer_norm(xc, gm, b, 1e-5)
        });
    }

    #[test]
    fn framing_overlap_add_and_convolution_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sig = rand_matrix(&mut rng, 30, 1);
        check(sig.clone(), |g, x| g.frame(x, vec![-3, 0, 5, 12, 25], 8));
        let fr = rand_matrix(&mut rng, 5, 8);
        check(fr, |g, x| g.overlap_add(x, vec![-3, 0, 5, 12, 25], 30));
        let x = rand_matrix(&mut rng, 9, 3);
        let w = rand_matrix(&mut rng, 9, 2);
        let ww = w.clone();
        check(x.clone(), move |g, x| {
            let wc = g.constant(ww.clone());
            g.conv1d(x, wc, 2)
        });
        check(w, move |g, w| {
            let xc = g.constant(x.clone());
            g.conv1d(xc, w, 4)
        });
    }

    #[test]
    fn fused_losses_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_matrix(&mut rng, 4, 6);
        let b = rand_matrix(&mut rng, 4, 6);
        let bb = b.clone();
        check(a.clone(), move |g, x| {
            let bc = g.constant(bb.clone());
            g.cosine_distance_mean(x, bc, 1e-12)
        });
        check(b, move |g, y| {
            let ac = g.constant(a.clone());
            g.cosine_distance_mean(ac, y, 1e-12)
        });
        let reference: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let est = Matrix::from_fn(50, 1, |r, _| reference[r] + rng.random_range(-0.5..0.5));
        check(est, move |g, x| g.neg_si_sdr(x, &reference, 1e-8));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Matrix::scalar(2.0));
        let v = g.variable(Matrix::scalar(3.0));
        let p = g.mul(c, v);
        let grads = g.backward(p);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(v).unwrap().data()[0], 2.0);
    }
}
