//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of one forward pass. Handles are
//! plain indices ([`Var`]); the tape owns all values. Calling
//! [`Tape::backward`] walks the record in reverse and returns gradients for
//! every node that depends on a parameter leaf.

use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Abs(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<Option<usize>>),
    ScatterAddRows(usize, Vec<usize>),
    SelectRows(usize, usize, Vec<bool>),
    BroadcastRow(usize),
    MaskedSoftmax(usize),
    SegmentSoftmax(usize, Vec<usize>),
    RowDot(usize, usize),
    RowNorm(usize),
    SmoothL1(usize),
    Sum(usize),
    Mean(usize),
    Focal {
        logits: usize,
        labels: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary focal loss of one logit and its per-logit derivative.
///
/// `k = sigmoid(z)`, `k_t = k` for positives and `1 - k` otherwise,
/// `alpha_t = alpha` for positives and `1 - alpha` otherwise.
pub(crate) fn focal_with_grad(z: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let (s, alpha_t) = if y >= 0.5 { (1.0, alpha) } else { (-1.0, 1.0 - alpha) };
    let log_p = -softplus(-s * z);
    let p = sigmoid(s * z);
    let q = sigmoid(-s * z); // 1 - p without cancellation
    let qg = q.powf(gamma);
    let loss = -alpha_t * qg * log_p;
    let grad = -alpha_t * s * qg * (q - gamma * p * log_p);
    (loss, grad)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&v| f(v)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).unwrap()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).unwrap()
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert!(
        a.shape() == b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn v(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A differentiable leaf (model parameter or probed input).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.v(a), self.v(b));
        assert!(
            x.cols() == y.rows(),
            "matmul: shape mismatch {:?} vs {:?}",
            x.shape(),
            y.shape()
        );
        let mut out = Tensor::zeros(x.rows(), y.cols());
        gemm(1.0, x, false, y, false, 0.0, &mut out);
        let ng = self.ng(&[a.0, b.0]);
        self.push(out, Op::MatMul(a.0, b.0), ng)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.v(a), self.v(b));
        assert!(
            x.cols() == y.cols(),
            "matmul_t: shape mismatch {:?} vs {:?}",
            x.shape(),
            y.shape()
        );
        let mut out = Tensor::zeros(x.rows(), y.rows());
        gemm(1.0, x, false, y, true, 0.0, &mut out);
        let ng = self.ng(&[a.0, b.0]);
        self.push(out, Op::MatMulT(a.0, b.0), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape("add", self.v(a), self.v(b));
        let out = zip(self.v(a), self.v(b), |x, y| x + y);
        let ng = self.ng(&[a.0, b.0]);
        self.push(out, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape("sub", self.v(a), self.v(b));
        let out = zip(self.v(a), self.v(b), |x, y| x - y);
        let ng = self.ng(&[a.0, b.0]);
        self.push(out, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape("mul", self.v(a), self.v(b));
        let out = zip(self.v(a), self.v(b), |x, y| x * y);
        let ng = self.ng(&[a.0, b.0]);
        self.push(out, Op::Mul(a.0, b.0), ng)
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, r) = (self.v(a), self.v(b));
        assert!(
            r.rows() == 1 && r.cols() == x.cols(),
            "add_row: shape mismatch {:?} vs {:?}",
            x.shape(),
            r.shape()
        );
        let mut out = x.clone();
        let n = x.cols();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (o, b) in row.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let ng = self.ng(&[a.0, b.0]);
        self.push(out, Op::AddRow(a.0, b.0), ng)
    }

    /// Scales row `i` of `a` by `c[i]` (`c` is `m x 1`).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (x, s) = (self.v(a), self.v(c));
        assert!(
            s.cols() == 1 && s.rows() == x.rows(),
            "mul_col: shape mismatch {:?} vs {:?}",
            x.shape(),
            s.shape()
        );
        let mut out = x.clone();
        for i in 0..x.rows() {
            let k = s.get(i, 0);
            out.row_mut(i).iter_mut().for_each(|v| *v *= k);
        }
        let ng = self.ng(&[a.0, c.0]);
        self.push(out, Op::MulCol(a.0, c.0), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = map(self.v(a), |x| x * k);
        let ng = self.ng(&[a.0]);
        self.push(out, Op::Scale(a.0, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = map(self.v(a), |x| x + k);
        let ng = self.ng(&[a.0]);
        self.push(out, Op::AddScalar(a.0), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.v(a), sigmoid);
        let ng = self.ng(&[a.0]);
        self.push(out, Op::Sigmoid(a.0), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.v(a), f64::tanh);
        let ng = self.ng(&[a.0]);
        self.push(out, Op::Tanh(a.0), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.v(a), |x| x.max(0.0));
        let ng = self.ng(&[a.0]);
        self.push(out, Op::Relu(a.0), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = map(self.v(a), f64::abs);
        let ng = self.ng(&[a.0]);
        self.push(out, Op::Abs(a.0), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.v(parts[0]).rows();
        for p in parts {
            assert!(
                self.v(*p).rows() == rows,
                "concat_cols: shape mismatch {:?} vs {:?}",
                self.v(parts[0]).shape(),
                self.v(*p).shape()
            );
        }
        let cols: usize = parts.iter().map(|p| self.v(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.v(*p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        self.push(out, Op::ConcatCols(ids), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let cols = self.v(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.v(*p);
            assert!(
                t.cols() == cols,
                "concat_rows: shape mismatch {:?} vs {:?}",
                self.v(parts[0]).shape(),
                t.shape()
            );
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::from_vec(rows, cols, data).unwrap();
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        self.push(out, Op::ConcatRows(ids), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.v(a);
        assert!(start + len <= x.cols(), "slice_cols: out of range");
        let mut out = Tensor::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let ng = self.ng(&[a.0]);
        self.push(out, Op::SliceCols(a.0, start), ng)
    }

    /// Output row `r` is row `idx[r]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let x = self.v(a);
        let mut out = Tensor::zeros(idx.len(), x.cols());
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                out.row_mut(r).copy_from_slice(x.row(i));
            }
        }
        let ng = self.ng(&[a.0]);
        self.push(out, Op::GatherRows(a.0, idx), ng)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.gather_rows(a, vec![Some(i)])
    }

    /// Sums row `r` of `a` into output row `idx[r]` of an `n_out`-row result.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Vec<usize>, n_out: usize) -> Var {
        let x = self.v(a);
        assert_eq!(idx.len(), x.rows(), "scatter_add_rows: index length");
        let mut out = Tensor::zeros(n_out, x.cols());
        for (r, &i) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(i).iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let ng = self.ng(&[a.0]);
        self.push(out, Op::ScatterAddRows(a.0, idx), ng)
    }

    /// Row `i` from `a` where `mask[i]`, otherwise from `b`.
    pub fn select_rows(&mut self, a: Var, b: Var, mask: Vec<bool>) -> Var {
        same_shape("select_rows", self.v(a), self.v(b));
        assert_eq!(mask.len(), self.v(a).rows(), "select_rows: mask length");
        let mut out = self.v(b).clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(i).copy_from_slice(self.v(a).row(i));
            }
        }
        let ng = self.ng(&[a.0, b.0]);
        self.push(out, Op::SelectRows(a.0, b.0, mask), ng)
    }

    /// Repeats a `1 x n` row `m` times.
    pub fn broadcast_row(&mut self, a: Var, m: usize) -> Var {
        let x = self.v(a);
        assert_eq!(x.rows(), 1, "broadcast_row: expects one row");
        let data = x.data().repeat(m);
        let out = Tensor::from_vec(m, x.cols(), data).unwrap();
        let ng = self.ng(&[a.0]);
        self.push(out, Op::BroadcastRow(a.0), ng)
    }

    /// Row-wise softmax; entries with `mask == false` get zero weight and a
    /// row with no unmasked entry is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Var {
        let x = self.v(a);
        if let Some(m) = &mask {
            assert_eq!(m.len(), x.len(), "masked_softmax: mask length");
        }
        let (rows, cols) = x.shape();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let keep = |c: usize| mask.as_ref().is_none_or(|m| m[r * cols + c]);
            let mx = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| x.get(r, c))
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for c in 0..cols {
                if keep(c) {
                    let e = (x.get(r, c) - mx).exp();
                    out.set(r, c, e);
                    sum += e;
                }
            }
            out.row_mut(r).iter_mut().for_each(|v| *v /= sum);
        }
        let ng = self.ng(&[a.0]);
        self.push(out, Op::MaskedSoftmax(a.0), ng)
    }

    /// Softmax of an `E x 1` column within groups given by `seg`.
    pub fn segment_softmax(&mut self, a: Var, seg: Vec<usize>, n_seg: usize) -> Var {
        let x = self.v(a);
        assert!(x.cols() == 1 && seg.len() == x.rows(), "segment_softmax: shape");
        let mut mx = vec![f64::NEG_INFINITY; n_seg];
        for (e, &s) in seg.iter().enumerate() {
            mx[s] = mx[s].max(x.get(e, 0));
        }
        let mut sum = vec![0.0; n_seg];
        let mut out = Tensor::zeros(x.rows(), 1);
        for (e, &s) in seg.iter().enumerate() {
            let v = (x.get(e, 0) - mx[s]).exp();
            out.set(e, 0, v);
            sum[s] += v;
        }
        for (e, &s) in seg.iter().enumerate() {
            out.set(e, 0, out.get(e, 0) / sum[s]);
        }
        let ng = self.ng(&[a.0]);
        self.push(out, Op::SegmentSoftmax(a.0, seg), ng)
    }

    /// Per-row inner product, `m x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        same_shape("row_dot", self.v(a), self.v(b));
        let (x, y) = (self.v(a), self.v(b));
        let mut out = Tensor::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            out.set(r, 0, x.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum());
        }
        let ng = self.ng(&[a.0, b.0]);
        self.push(out, Op::RowDot(a.0, b.0), ng)
    }

    /// Euclidean norm of each row, `m x 1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let x = self.v(a);
        let mut out = Tensor::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            out.set(r, 0, x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        let ng = self.ng(&[a.0]);
        self.push(out, Op::RowNorm(a.0), ng)
    }

    /// Elementwise smooth-L1: `0.5 x^2` below 1, `|x| - 0.5` above.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let out = map(self.v(a), smooth_l1);
        let ng = self.ng(&[a.0]);
        self.push(out, Op::SmoothL1(a.0), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.v(a).data().iter().sum());
        let ng = self.ng(&[a.0]);
        self.push(out, Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.v(a);
        let n = x.len().max(1) as f64;
        let out = Tensor::scalar(x.data().iter().sum::<f64>() / n);
        let ng = self.ng(&[a.0]);
        self.push(out, Op::Mean(a.0), ng)
    }

    /// Per-element binary focal loss of logits `a` (`m x 1`) against labels.
    pub fn focal_loss(&mut self, a: Var, labels: Vec<f64>, alpha: f64, gamma: f64) -> Var {
        let x = self.v(a);
        assert!(x.cols() == 1 && labels.len() == x.rows(), "focal_loss: shape");
        let data = x
            .data()
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| focal_with_grad(z, y, alpha, gamma).0)
            .collect();
        let out = Tensor::from_vec(x.rows(), 1, data).unwrap();
        let ng = self.ng(&[a.0]);
        self.push(
            out,
            Op::Focal {
                logits: a.0,
                labels,
                alpha,
                gamma,
            },
            ng,
        )
    }

    /// Back-propagates from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward expects a scalar output");
        self.backward_with(out, Tensor::scalar(1.0))
    }

    /// Back-propagates an explicit output cotangent.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.shape(out), "backward seed shape");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let y = &nodes[i].value;
        let needs = |j: usize| nodes[j].needs_grad;
        macro_rules! acc {
            ($j:expr) => {{
                let j = $j;
                let shape = nodes[j].value.shape();
                grads[j].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    gemm(1.0, g, false, &nodes[*b].value, true, 1.0, acc!(*a));
                }
                if needs(*b) {
                    gemm(1.0, &nodes[*a].value, true, g, false, 1.0, acc!(*b));
                }
            }
            Op::MatMulT(a, b) => {
                if needs(*a) {
                    gemm(1.0, g, false, &nodes[*b].value, false, 1.0, acc!(*a));
                }
                if needs(*b) {
                    gemm(1.0, g, true, &nodes[*a].value, false, 1.0, acc!(*b));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc!(*a).add_assign(g);
                }
                if needs(*b) {
                    acc!(*b).add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc!(*a).add_assign(g);
                }
                if needs(*b) {
                    let t = acc!(*b);
                    for (o, v) in t.data_mut().iter_mut().zip(g.data()) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let other = &nodes[*b].value;
                    let t = acc!(*a);
                    for ((o, v), w) in t.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
                        *o += v * w;
                    }
                }
                if needs(*b) {
                    let other = &nodes[*a].value;
                    let t = acc!(*b);
                    for ((o, v), w) in t.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
                        *o += v * w;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    acc!(*a).add_assign(g);
                }
                if needs(*b) {
                    let t = acc!(*b);
                    for r in 0..g.rows() {
                        for (o, v) in t.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MulCol(a, c) => {
                if needs(*a) {
                    let s = &nodes[*c].value;
                    let t = acc!(*a);
                    for r in 0..g.rows() {
                        let k = s.get(r, 0);
                        for (o, v) in t.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += v * k;
                        }
                    }
                }
                if needs(*c) {
                    let x = &nodes[*a].value;
                    let t = acc!(*c);
                    for r in 0..g.rows() {
                        let d: f64 = g.row(r).iter().zip(x.row(r)).map(|(p, q)| p * q).sum();
                        t.data_mut()[r] += d;
                    }
                }
            }
            Op::Scale(a, k) => {
                if needs(*a) {
                    let t = acc!(*a);
                    for (o, v) in t.data_mut().iter_mut().zip(g.data()) {
                        *o += v * k;
                    }
                }
            }
            Op::AddScalar(a) => {
                if needs(*a) {
                    acc!(*a).add_assign(g);
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let t = acc!(*a);
                    for ((o, v), s) in t.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += v * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    let t = acc!(*a);
                    for ((o, v), s) in t.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += v * (1.0 - s * s);
                    }
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let x = &nodes[*a].value;
                    let t = acc!(*a);
                    for ((o, v), s) in t.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if *s > 0.0 {
                            *o += v;
                        }
                    }
                }
            }
            Op::Abs(a) => {
                if needs(*a) {
                    let x = &nodes[*a].value;
                    let t = acc!(*a);
                    for ((o, v), s) in t.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if *s > 0.0 {
                            *o += v;
                        } else if *s < 0.0 {
                            *o -= v;
                        }
                    }
                }
            }
            Op::ConcatCols(ids) => {
                let mut off = 0;
                for &p in ids {
                    let w = nodes[p].value.cols();
                    if needs(p) {
                        let t = acc!(p);
                        for r in 0..g.rows() {
                            for (o, v) in t.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += v;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                let cols = g.cols();
                for &p in ids {
                    let n = nodes[p].value.len();
                    if needs(p) {
                        let t = acc!(p);
                        for (o, v) in t.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *o += v;
                        }
                    }
                    off += n;
                    debug_assert!(cols == 0 || n % cols == 0);
                }
            }
            Op::SliceCols(a, start) => {
                if needs(*a) {
                    let t = acc!(*a);
                    let w = g.cols();
                    for r in 0..g.rows() {
                        for (o, v) in t.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if needs(*a) {
                    let t = acc!(*a);
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            for (o, v) in t.row_mut(i).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::ScatterAddRows(a, idx) => {
                if needs(*a) {
                    let t = acc!(*a);
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in t.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SelectRows(a, b, mask) => {
                for (src, want) in [(*a, true), (*b, false)] {
                    if needs(src) {
                        let t = acc!(src);
                        for (r, &m) in mask.iter().enumerate() {
                            if m == want {
                                for (o, v) in t.row_mut(r).iter_mut().zip(g.row(r)) {
                                    *o += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::BroadcastRow(a) => {
                if needs(*a) {
                    let t = acc!(*a);
                    for r in 0..g.rows() {
                        for (o, v) in t.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MaskedSoftmax(a) => {
                if needs(*a) {
                    let t = acc!(*a);
                    for r in 0..g.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, &yv), &gv) in t.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::SegmentSoftmax(a, seg) => {
                if needs(*a) {
                    let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; n_seg];
                    for (e, &s) in seg.iter().enumerate() {
                        dot[s] += y.get(e, 0) * g.get(e, 0);
                    }
                    let t = acc!(*a);
                    for (e, &s) in seg.iter().enumerate() {
                        t.data_mut()[e] += y.get(e, 0) * (g.get(e, 0) - dot[s]);
                    }
                }
            }
            Op::RowDot(a, b) => {
                for (src, other) in [(*a, *b), (*b, *a)] {
                    if needs(src) {
                        let o_val = &nodes[other].value;
                        let t = acc!(src);
                        for r in 0..g.rows() {
                            let k = g.get(r, 0);
                            for (o, v) in t.row_mut(r).iter_mut().zip(o_val.row(r)) {
                                *o += k * v;
                            }
                        }
                    }
                }
            }
            Op::RowNorm(a) => {
                if needs(*a) {
                    let x = &nodes[*a].value;
                    let t = acc!(*a);
                    for r in 0..g.rows() {
                        let n = y.get(r, 0);
                        if n > 0.0 {
                            let k = g.get(r, 0) / n;
                            for (o, v) in t.row_mut(r).iter_mut().zip(x.row(r)) {
                                *o += k * v;
                            }
                        }
                    }
                }
            }
            Op::SmoothL1(a) => {
                if needs(*a) {
                    let x = &nodes[*a].value;
                    let t = acc!(*a);
                    for ((o, v), s) in t.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        let d = if s.abs() < 1.0 { *s } else { s.signum() };
                        *o += v * d;
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let k = g.item();
                    acc!(*a).data_mut().iter_mut().for_each(|o| *o += k);
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let n = nodes[*a].value.len().max(1) as f64;
                    let k = g.item() / n;
                    acc!(*a).data_mut().iter_mut().for_each(|o| *o += k);
                }
            }
            Op::Focal {
                logits,
                labels,
                alpha,
                gamma,
            } => {
                if needs(*logits) {
                    let x = &nodes[*logits].value;
                    let t = acc!(*logits);
                    for e in 0..x.rows() {
                        let (_, d) = focal_with_grad(x.get(e, 0), labels[e], *alpha, *gamma);
                        t.data_mut()[e] += g.get(e, 0) * d;
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(sum(w .* f(x)))/dx for a unary builder.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x: Tensor, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let out = build(&mut tape, xv);
        let w = rand_t(&mut rng, tape.shape(out).0, tape.shape(out).1);
        let scalarize = |t: &Tensor| t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
        let grads = tape.backward_with(out, w.clone());
        let analytic = grads.get(xv).cloned().unwrap_or(Tensor::zeros(x.rows(), x.cols()));
        let h = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let eval = |inp: Tensor| {
                let mut t = Tape::new();
                let v = t.param(inp);
                let o = build(&mut t, v);
                scalarize(t.value(o))
            };
            let num = (eval(xp) - eval(xm)) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            assert!(err < tol, "element {k}: analytic {a} numeric {num}");
        }
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = rand_t(&mut rng, 4, 3);
        let row = rand_t(&mut rng, 1, 3);
        let col = rand_t(&mut rng, 5, 1);
        let other = rand_t(&mut rng, 5, 4);
        let x = rand_t(&mut rng, 5, 4);

        check_unary(|t, v| { let c = t.constant(b.clone()); t.matmul(v, c) }, x.clone(), 1e-6);
        check_unary(|t, v| { let c = t.constant(other.clone()); t.matmul_t(v, c) }, x.clone(), 1e-6);
        check_unary(|t, v| t.matmul_t(v, v), x.clone(), 1e-6);
        check_unary(|t, v| { let c = t.constant(other.clone()); let m = t.mul(v, c); t.sub(m, v) }, x.clone(), 1e-6);
        check_unary(|t, v| { let s = t.slice_cols(v, 1, 3); let r = t.constant(row.clone()); t.add_row(s, r) }, x.clone(), 1e-6);
        check_unary(|t, v| { let c = t.constant(col.clone()); t.mul_col(v, c) }, x.clone(), 1e-6);
        check_unary(|t, v| { let c = t.slice_cols(v, 0, 1); t.mul_col(v, c) }, x.clone(), 1e-6);
        check_unary(|t, v| { let s = t.sigmoid(v); let h = t.tanh(s); t.scale(h, 1.7) }, x.clone(), 1e-6);
        check_unary(|t, v| { let a = t.add_scalar(v, 0.3); t.abs(a) }, x.clone(), 1e-6);
        check_unary(|t, v| { let a = t.add_scalar(v, 0.05); t.relu(a) }, x.clone(), 1e-6);
        check_unary(|t, v| { let s = t.scale(v, 2.0); let a = t.concat_cols(&[v, s]); t.concat_rows(&[a, a]) }, x.clone(), 1e-6);
        check_unary(|t, v| t.gather_rows(v, vec![Some(2), None, Some(2), Some(0)]), x.clone(), 1e-6);
        check_unary(|t, v| t.scatter_add_rows(v, vec![1, 0, 1, 2, 1], 3), x.clone(), 1e-6);
        check_unary(|t, v| { let s = t.scale(v, -3.0); t.select_rows(v, s, vec![true, false, true, false, false]) }, x.clone(), 1e-6);
        check_unary(|t, v| { let r = t.row(v, 3); t.broadcast_row(r, 4) }, x.clone(), 1e-6);
        check_unary(|t, v| t.masked_softmax(v, None), x.clone(), 1e-6);
        let mask: Vec<bool> = (0..20).map(|i| i % 3 != 0 && i < 16).collect();
        check_unary(|t, v| t.masked_softmax(v, Some(mask.clone())), x.clone(), 1e-6);
        check_unary(|t, v| { let c = t.slice_cols(v, 2, 1); t.segment_softmax(c, vec![0, 1, 0, 2, 1], 3) }, x.clone(), 1e-6);
        check_unary(|t, v| { let c = t.constant(other.clone()); t.row_dot(v, c) }, x.clone(), 1e-6);
        check_unary(|t, v| t.row_norm(v), x.clone(), 1e-6);
        check_unary(|t, v| { let s = t.scale(v, 3.0); t.smooth_l1(s) }, x.clone(), 1e-6);
        check_unary(|t, v| t.sum(v), x.clone(), 1e-6);
        check_unary(|t, v| t.mean(v), x.clone(), 1e-6);
        check_unary(|t, v| { let c = t.slice_cols(v, 0, 1); let s = t.scale(c, 4.0); t.focal_loss(s, vec![1.0, 0.0, 1.0, 0.0, 0.0], 0.5, 2.0) }, x, 1e-6);
    }

    #[test]
    fn masked_softmax_all_masked_row_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.masked_softmax(x, Some(vec![false, false, true, false]));
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::filled(2, 2, 1.0));
        let p = t.param(Tensor::filled(2, 2, 2.0));
        let m = t.matmul(c, p);
        let s = t.sum(m);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn focal_values() {
        let (l, _) = focal_with_grad(0.0, 1.0, 0.5, 2.0);
        assert!((l - 0.5 * 0.25 * 2f64.ln()).abs() < 1e-15);
        let (l0, _) = focal_with_grad(0.0, 0.0, 0.5, 2.0);
        assert_eq!(l, l0);
        let (big, g) = focal_with_grad(60.0, 1.0, 0.5, 2.0);
        assert!(big.abs() < 1e-30 && g.abs() < 1e-30);
    }
}
