//! Minimal reverse-mode autodiff over dense double-precision matrices.
//!
//! A [`Tape`] records operations define-by-run; [`Tape::backward`] seeds the
//! scalar loss with gradient one and walks the record in reverse, so every
//! update rule in this crate gets exact derivatives. Operation ordering is
//! deterministic, which keeps whole trials bit-reproducible.

use rand::Rng;
use rand_distr::StandardNormal;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn row(values: &[f64]) -> Self {
        Matrix::from_vec(1, values.len(), values.to_vec())
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn randn<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        Matrix::from_fn(rows, cols, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    EMulConst(NodeId, Matrix),
    EMul(NodeId, NodeId),
    PowConst(NodeId, f64),
    Softplus(NodeId),
    Exp(NodeId),
    MatMul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    WindowMax(NodeId, Vec<usize>),
    WindowAvg(NodeId, usize),
    SoftmaxChunks(NodeId, usize),
    RepeatEntries(NodeId, usize),
    WeightedSum {
        weights: NodeId,
        terms: Vec<NodeId>,
    },
    EntryScale {
        matrix: NodeId,
        scales: NodeId,
        idx: usize,
    },
    ConcatCols(Vec<NodeId>),
    SumList(Vec<NodeId>),
    NormalizeChunks(NodeId, usize),
    LogSumExpMinusMean(NodeId),
    StraightThrough(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    AddRowBroadcast {
        matrix: NodeId,
        row: NodeId,
    },
}

struct Node {
    op: Op,
    value: Matrix,
    grad: Matrix,
}

/// Gradient tape: a linear record of operations over matrices.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let grad = Matrix::zeros(value.rows, value.cols);
        self.nodes.push(Node { op, value, grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers an input or parameter matrix.
    pub fn leaf(&mut self, m: Matrix) -> NodeId {
        self.push(Op::Leaf, m)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(va.same_shape(vb), "add shape mismatch");
        let value = Matrix::from_vec(
            va.rows,
            va.cols,
            va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect(),
        );
        self.push(Op::Add(a, b), value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Matrix::from_vec(va.rows, va.cols, va.data.iter().map(|x| x * c).collect());
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_const(&mut self, a: NodeId, k: &Matrix) -> NodeId {
        let va = &self.nodes[a.0].value;
        assert!(va.same_shape(k), "add_const shape mismatch");
        let value = Matrix::from_vec(
            va.rows,
            va.cols,
            va.data.iter().zip(&k.data).map(|(x, y)| x + y).collect(),
        );
        self.push(Op::AddConst(a), value)
    }

    pub fn emul_const(&mut self, a: NodeId, k: Matrix) -> NodeId {
        let va = &self.nodes[a.0].value;
        assert!(va.same_shape(&k), "emul_const shape mismatch");
        let value = Matrix::from_vec(
            va.rows,
            va.cols,
            va.data.iter().zip(&k.data).map(|(x, y)| x * y).collect(),
        );
        self.push(Op::EMulConst(a, k), value)
    }

    pub fn emul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(va.same_shape(vb), "emul shape mismatch");
        let value = Matrix::from_vec(
            va.rows,
            va.cols,
            va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
        );
        self.push(Op::EMul(a, b), value)
    }

    /// Elementwise power for strictly positive inputs.
    pub fn pow_const(&mut self, a: NodeId, p: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Matrix::from_vec(va.rows, va.cols, va.data.iter().map(|x| x.powf(p)).collect());
        self.push(Op::PowConst(a, p), value)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Matrix::from_vec(va.rows, va.cols, va.data.iter().map(|&x| softplus(x)).collect());
        self.push(Op::Softplus(a), value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Matrix::from_vec(va.rows, va.cols, va.data.iter().map(|x| x.exp()).collect());
        self.push(Op::Exp(a), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.cols, vb.rows, "matmul inner dimension mismatch");
        let mut value = Matrix::zeros(va.rows, vb.cols);
        for r in 0..va.rows {
            for k in 0..va.cols {
                let x = va.get(r, k);
                if x == 0.0 {
                    continue;
                }
                for c in 0..vb.cols {
                    value.data[r * vb.cols + c] += x * vb.get(k, c);
                }
            }
        }
        self.push(Op::MatMul(a, b), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Matrix::from_vec(va.rows, va.cols, va.data.iter().map(|x| x.tanh()).collect());
        self.push(Op::Tanh(a), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Matrix::from_vec(
            va.rows,
            va.cols,
            va.data.iter().map(|&x| crate::relax::sigmoid(x)).collect(),
        );
        self.push(Op::Sigmoid(a), value)
    }

    /// Sliding-window maximum over columns with clamped boundaries.
    pub fn window_max(&mut self, a: NodeId, width: usize) -> NodeId {
        let va = &self.nodes[a.0].value;
        let half = width / 2;
        let mut value = Matrix::zeros(va.rows, va.cols);
        let mut arg = vec![0usize; va.rows * va.cols];
        for r in 0..va.rows {
            for c in 0..va.cols {
                let lo = c.saturating_sub(half);
                let hi = (c + half).min(va.cols - 1);
                let mut best = lo;
                for j in lo..=hi {
                    if va.get(r, j) > va.get(r, best) {
                        best = j;
                    }
                }
                value.set(r, c, va.get(r, best));
                arg[r * va.cols + c] = best;
            }
        }
        self.push(Op::WindowMax(a, arg), value)
    }

    /// Sliding-window mean over columns; boundary windows average over the
    /// columns actually present.
    pub fn window_avg(&mut self, a: NodeId, width: usize) -> NodeId {
        let va = &self.nodes[a.0].value;
        let half = width / 2;
        let mut value = Matrix::zeros(va.rows, va.cols);
        for r in 0..va.rows {
            for c in 0..va.cols {
                let lo = c.saturating_sub(half);
                let hi = (c + half).min(va.cols - 1);
                let mut sum = 0.0;
                for j in lo..=hi {
                    sum += va.get(r, j);
                }
                value.set(r, c, sum / (hi - lo + 1) as f64);
            }
        }
        self.push(Op::WindowAvg(a, width), value)
    }

    /// Softmax over every consecutive chunk of `chunk` columns, per row.
    /// `chunk` equal to the column count gives a plain row softmax.
    pub fn softmax_chunks(&mut self, a: NodeId, chunk: usize) -> NodeId {
        let va = &self.nodes[a.0].value;
        assert!(chunk > 0 && va.cols % chunk == 0, "chunk must divide columns");
        let mut value = va.clone();
        for r in 0..va.rows {
            for start in (0..va.cols).step_by(chunk) {
                let slice = &mut value.data[r * va.cols + start..r * va.cols + start + chunk];
                softmax_in_place(slice);
            }
        }
        self.push(Op::SoftmaxChunks(a, chunk), value)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let cols = self.nodes[a.0].value.cols;
        self.softmax_chunks(a, cols)
    }

    /// Repeats each entry of a row vector `times` times in place:
    /// `(1, n) -> (1, n * times)`.
    pub fn repeat_entries(&mut self, a: NodeId, times: usize) -> NodeId {
        let va = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(va.rows * va.cols * times);
        for r in 0..va.rows {
            for c in 0..va.cols {
                for _ in 0..times {
                    data.push(va.get(r, c));
                }
            }
        }
        let value = Matrix::from_vec(va.rows, va.cols * times, data);
        self.push(Op::RepeatEntries(a, times), value)
    }

    /// Linear combination of equally shaped terms with coefficients taken
    /// from a `(1, k)` weight node: `sum_k w[k] * term_k`.
    pub fn weighted_sum(&mut self, weights: NodeId, terms: &[NodeId]) -> NodeId {
        let vw = &self.nodes[weights.0].value;
        assert_eq!(vw.rows, 1, "weights must be a row vector");
        assert_eq!(vw.cols, terms.len(), "one weight per term required");
        assert!(!terms.is_empty(), "weighted_sum needs terms");
        let shape = {
            let t0 = &self.nodes[terms[0].0].value;
            (t0.rows, t0.cols)
        };
        let mut value = Matrix::zeros(shape.0, shape.1);
        for (k, t) in terms.iter().enumerate() {
            let vt = &self.nodes[t.0].value;
            assert!(vt.rows == shape.0 && vt.cols == shape.1, "term shape mismatch");
            let w = vw.data[k];
            for (o, x) in value.data.iter_mut().zip(&vt.data) {
                *o += w * x;
            }
        }
        self.push(
            Op::WeightedSum {
                weights,
                terms: terms.to_vec(),
            },
            value,
        )
    }

    /// Scales a matrix by entry `idx` of a `(1, k)` node.
    pub fn entry_scale(&mut self, matrix: NodeId, scales: NodeId, idx: usize) -> NodeId {
        let s = self.nodes[scales.0].value.data[idx];
        let vm = &self.nodes[matrix.0].value;
        let value = Matrix::from_vec(vm.rows, vm.cols, vm.data.iter().map(|x| x * s).collect());
        self.push(
            Op::EntryScale {
                matrix,
                scales,
                idx,
            },
            value,
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat needs parts");
        let rows = self.nodes[parts[0].0].value.rows;
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let vp = &self.nodes[p.0].value;
            assert_eq!(vp.rows, rows, "concat row mismatch");
            for r in 0..rows {
                for c in 0..vp.cols {
                    value.set(r, offset + c, vp.get(r, c));
                }
            }
            offset += vp.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), value)
    }

    pub fn sum_list(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "sum needs parts");
        let first = &self.nodes[parts[0].0].value;
        let mut value = Matrix::zeros(first.rows, first.cols);
        for p in parts {
            let vp = &self.nodes[p.0].value;
            assert!(vp.same_shape(&value), "sum shape mismatch");
            for (o, x) in value.data.iter_mut().zip(&vp.data) {
                *o += x;
            }
        }
        self.push(Op::SumList(parts.to_vec()), value)
    }

    /// Divides every chunk of `chunk` columns by its sum, per row. Inputs
    /// must be positive so the result lies on the simplex.
    pub fn normalize_chunks(&mut self, a: NodeId, chunk: usize) -> NodeId {
        let va = &self.nodes[a.0].value;
        assert!(chunk > 0 && va.cols % chunk == 0, "chunk must divide columns");
        let mut value = va.clone();
        for r in 0..va.rows {
            for start in (0..va.cols).step_by(chunk) {
                let slice = &mut value.data[r * va.cols + start..r * va.cols + start + chunk];
                let s: f64 = slice.iter().sum();
                for x in slice.iter_mut() {
                    *x /= s;
                }
            }
        }
        self.push(Op::NormalizeChunks(a, chunk), value)
    }

    /// `logsumexp(x) - mean(x)` of a row vector, a nonnegative confidence
    /// penalty that vanishes exactly at uniform logits.
    pub fn log_sum_exp_minus_mean(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rows, 1, "penalty input must be a row vector");
        let max = va.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + va.data.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let mean = va.data.iter().sum::<f64>() / va.cols as f64;
        let value = Matrix::from_vec(1, 1, vec![lse - mean]);
        self.push(Op::LogSumExpMinusMean(a), value)
    }

    /// Forwards `hard` while routing gradients to `soft` unchanged.
    pub fn straight_through(&mut self, soft: NodeId, hard: Matrix) -> NodeId {
        assert!(
            self.nodes[soft.0].value.same_shape(&hard),
            "straight-through shape mismatch"
        );
        self.push(Op::StraightThrough(soft), hard)
    }

    /// Mean softmax cross-entropy over the batch, as a `(1, 1)` scalar.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let vl = &self.nodes[logits.0].value;
        assert_eq!(vl.rows, labels.len(), "one label per batch row required");
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            assert!(label < vl.cols, "label out of range");
            let row = &vl.data[r * vl.cols..(r + 1) * vl.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let value = Matrix::from_vec(1, 1, vec![total / labels.len() as f64]);
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            value,
        )
    }

    /// Adds a `(1, c)` row vector to every row of a `(b, c)` matrix.
    pub fn add_row_broadcast(&mut self, matrix: NodeId, row: NodeId) -> NodeId {
        let (vm, vr) = (&self.nodes[matrix.0].value, &self.nodes[row.0].value);
        assert!(vr.rows == 1 && vr.cols == vm.cols, "broadcast shape mismatch");
        let mut value = vm.clone();
        for r in 0..vm.rows {
            for c in 0..vm.cols {
                value.data[r * vm.cols + c] += vr.data[c];
            }
        }
        self.push(Op::AddRowBroadcast { matrix, row }, value)
    }

    /// Reverse pass from a scalar node: seeds its gradient with one and
    /// accumulates exact derivatives into every ancestor.
    pub fn backward(&mut self, loss: NodeId) {
        {
            let v = &self.nodes[loss.0].value;
            assert!(v.rows == 1 && v.cols == 1, "backward needs a scalar loss");
        }
        for n in &mut self.nodes {
            n.grad.data.fill(0.0);
        }
        self.nodes[loss.0].grad.data[0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            let grad = self.nodes[i].grad.clone();
            if grad.data.iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            match &op {
                Op::Leaf => {}
                &Op::Add(a, b) => {
                    accumulate(&mut self.nodes[a.0].grad, &grad.data);
                    accumulate(&mut self.nodes[b.0].grad, &grad.data);
                }
                &Op::Scale(a, c) => {
                    let scaled: Vec<f64> = grad.data.iter().map(|g| g * c).collect();
                    accumulate(&mut self.nodes[a.0].grad, &scaled);
                }
                &Op::AddConst(a) => {
                    accumulate(&mut self.nodes[a.0].grad, &grad.data);
                }
                Op::EMulConst(a, k) => {
                    let scaled: Vec<f64> =
                        grad.data.iter().zip(&k.data).map(|(g, kk)| g * kk).collect();
                    accumulate(&mut self.nodes[a.0].grad, &scaled);
                }
                &Op::EMul(a, b) => {
                    let vb: Vec<f64> = self.nodes[b.0].value.data.clone();
                    let va: Vec<f64> = self.nodes[a.0].value.data.clone();
                    let da: Vec<f64> = grad.data.iter().zip(&vb).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = grad.data.iter().zip(&va).map(|(g, x)| g * x).collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                    accumulate(&mut self.nodes[b.0].grad, &db);
                }
                &Op::PowConst(a, p) => {
                    let va: Vec<f64> = self.nodes[a.0].value.data.clone();
                    let da: Vec<f64> = grad
                        .data
                        .iter()
                        .zip(&va)
                        .map(|(g, x)| g * p * x.powf(p - 1.0))
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                &Op::Softplus(a) => {
                    let va: Vec<f64> = self.nodes[a.0].value.data.clone();
                    let da: Vec<f64> = grad
                        .data
                        .iter()
                        .zip(&va)
                        .map(|(g, x)| g * crate::relax::sigmoid(*x))
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                &Op::Exp(a) => {
                    let v: Vec<f64> = self.nodes[i].value.data.clone();
                    let da: Vec<f64> = grad.data.iter().zip(&v).map(|(g, y)| g * y).collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                &Op::MatMul(a, b) => {
                    let va = self.nodes[a.0].value.clone();
                    let vb = self.nodes[b.0].value.clone();
                    let mut da = vec![0.0; va.data.len()];
                    for r in 0..va.rows {
                        for k in 0..va.cols {
                            let mut acc = 0.0;
                            for c in 0..vb.cols {
                                acc += grad.data[r * vb.cols + c] * vb.get(k, c);
                            }
                            da[r * va.cols + k] = acc;
                        }
                    }
                    let mut db = vec![0.0; vb.data.len()];
                    for k in 0..vb.rows {
                        for c in 0..vb.cols {
                            let mut acc = 0.0;
                            for r in 0..va.rows {
                                acc += va.get(r, k) * grad.data[r * vb.cols + c];
                            }
                            db[k * vb.cols + c] = acc;
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &da);
                    accumulate(&mut self.nodes[b.0].grad, &db);
                }
                &Op::Tanh(a) => {
                    let v: Vec<f64> = self.nodes[i].value.data.clone();
                    let da: Vec<f64> = grad
                        .data
                        .iter()
                        .zip(&v)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                &Op::Sigmoid(a) => {
                    let v: Vec<f64> = self.nodes[i].value.data.clone();
                    let da: Vec<f64> = grad
                        .data
                        .iter()
                        .zip(&v)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::WindowMax(a, arg) => {
                    let a = *a;
                    let cols = grad.cols;
                    let mut da = vec![0.0; self.nodes[a.0].value.data.len()];
                    for r in 0..grad.rows {
                        for c in 0..cols {
                            da[r * cols + arg[r * cols + c]] += grad.data[r * cols + c];
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                &Op::WindowAvg(a, width) => {
                    let half = width / 2;
                    let cols = grad.cols;
                    let mut da = vec![0.0; self.nodes[a.0].value.data.len()];
                    for r in 0..grad.rows {
                        for c in 0..cols {
                            let lo = c.saturating_sub(half);
                            let hi = (c + half).min(cols - 1);
                            let share = grad.data[r * cols + c] / (hi - lo + 1) as f64;
                            for j in lo..=hi {
                                da[r * cols + j] += share;
                            }
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                &Op::SoftmaxChunks(a, chunk) => {
                    let v = self.nodes[i].value.clone();
                    let cols = v.cols;
                    let mut da = vec![0.0; v.data.len()];
                    for r in 0..v.rows {
                        for start in (0..cols).step_by(chunk) {
                            let base = r * cols + start;
                            let mut dot = 0.0;
                            for j in 0..chunk {
                                dot += grad.data[base + j] * v.data[base + j];
                            }
                            for j in 0..chunk {
                                da[base + j] = v.data[base + j] * (grad.data[base + j] - dot);
                            }
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                &Op::RepeatEntries(a, times) => {
                    let src_cols = self.nodes[a.0].value.cols;
                    let mut da = vec![0.0; self.nodes[a.0].value.data.len()];
                    for r in 0..grad.rows {
                        for c in 0..src_cols {
                            let mut acc = 0.0;
                            for t in 0..times {
                                acc += grad.data[r * grad.cols + c * times + t];
                            }
                            da[r * src_cols + c] += acc;
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::WeightedSum { weights, terms } => {
                    let weights = *weights;
                    let terms = terms.clone();
                    let vw = self.nodes[weights.0].value.clone();
                    let mut dw = vec![0.0; vw.data.len()];
                    for (k, t) in terms.iter().enumerate() {
                        let vt: Vec<f64> = self.nodes[t.0].value.data.clone();
                        let dt: Vec<f64> =
                            grad.data.iter().map(|g| g * vw.data[k]).collect();
                        accumulate(&mut self.nodes[t.0].grad, &dt);
                        dw[k] = grad.data.iter().zip(&vt).map(|(g, x)| g * x).sum();
                    }
                    accumulate(&mut self.nodes[weights.0].grad, &dw);
                }
                &Op::EntryScale {
                    matrix,
                    scales,
                    idx,
                } => {
                    let s = self.nodes[scales.0].value.data[idx];
                    let vm: Vec<f64> = self.nodes[matrix.0].value.data.clone();
                    let dm: Vec<f64> = grad.data.iter().map(|g| g * s).collect();
                    accumulate(&mut self.nodes[matrix.0].grad, &dm);
                    let ds: f64 = grad.data.iter().zip(&vm).map(|(g, x)| g * x).sum();
                    self.nodes[scales.0].grad.data[idx] += ds;
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = {
                            let vp = &self.nodes[p.0].value;
                            (vp.rows, vp.cols)
                        };
                        let mut dp = vec![0.0; rows * cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                dp[r * cols + c] = grad.data[r * grad.cols + offset + c];
                            }
                        }
                        accumulate(&mut self.nodes[p.0].grad, &dp);
                        offset += cols;
                    }
                }
                Op::SumList(parts) => {
                    let parts = parts.clone();
                    for p in parts {
                        accumulate(&mut self.nodes[p.0].grad, &grad.data);
                    }
                }
                &Op::NormalizeChunks(a, chunk) => {
                    let y = self.nodes[i].value.clone();
                    let va = self.nodes[a.0].value.clone();
                    let cols = y.cols;
                    let mut da = vec![0.0; va.data.len()];
                    for r in 0..y.rows {
                        for start in (0..cols).step_by(chunk) {
                            let base = r * cols + start;
                            let s: f64 = va.data[base..base + chunk].iter().sum();
                            let mut dot = 0.0;
                            for j in 0..chunk {
                                dot += grad.data[base + j] * y.data[base + j];
                            }
                            for j in 0..chunk {
                                da[base + j] = (grad.data[base + j] - dot) / s;
                            }
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                &Op::LogSumExpMinusMean(a) => {
                    let va = self.nodes[a.0].value.clone();
                    let g0 = grad.data[0];
                    let max = va.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = va.data.iter().map(|x| (x - max).exp()).sum();
                    let n = va.cols as f64;
                    let da: Vec<f64> = va
                        .data
                        .iter()
                        .map(|x| g0 * ((x - max).exp() / z - 1.0 / n))
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                &Op::StraightThrough(soft) => {
                    accumulate(&mut self.nodes[soft.0].grad, &grad.data);
                }
                Op::CrossEntropy { logits, labels } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let vl = self.nodes[logits.0].value.clone();
                    let g0 = grad.data[0];
                    let b = labels.len() as f64;
                    let mut dl = vec![0.0; vl.data.len()];
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &vl.data[r * vl.cols..(r + 1) * vl.cols];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        for c in 0..vl.cols {
                            let p = (row[c] - max).exp() / z;
                            let target = if c == label { 1.0 } else { 0.0 };
                            dl[r * vl.cols + c] = g0 * (p - target) / b;
                        }
                    }
                    accumulate(&mut self.nodes[logits.0].grad, &dl);
                }
                &Op::AddRowBroadcast { matrix, row } => {
                    accumulate(&mut self.nodes[matrix.0].grad, &grad.data);
                    let cols = grad.cols;
                    let mut dr = vec![0.0; cols];
                    for r in 0..grad.rows {
                        for c in 0..cols {
                            dr[c] += grad.data[r * cols + c];
                        }
                    }
                    accumulate(&mut self.nodes[row.0].grad, &dr);
                }
            }
            self.nodes[i].op = op;
        }
    }
}

fn accumulate(grad: &mut Matrix, delta: &[f64]) {
    debug_assert_eq!(grad.data.len(), delta.len());
    for (g, d) in grad.data.iter_mut().zip(delta) {
        *g += d;
    }
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference gradient of a scalar-valued closure with
    /// respect to one entry of one input matrix.
    fn fd_probe(
        inputs: &[Matrix],
        which: usize,
        entry: usize,
        h: f64,
        f: &dyn Fn(&[Matrix]) -> f64,
    ) -> f64 {
        let mut plus = inputs.to_vec();
        plus[which].data[entry] += h;
        let mut minus = inputs.to_vec();
        minus[which].data[entry] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()).max(1e-8))
    }

    #[test]
    fn scalar_product_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(1, 1, vec![3.0]));
        let w = tape.leaf(Matrix::from_vec(1, 1, vec![2.0]));
        let y = tape.matmul(x, w);
        tape.backward(y);
        assert_eq!(tape.grad(w).data[0], 3.0);
        assert_eq!(tape.grad(x).data[0], 2.0);
    }

    #[test]
    fn identity_passes_upstream_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let two = tape.scale(x, 2.0);
        let y = tape.sum_list(&[x, two]);
        let labelsum = tape.cross_entropy(y, &[0, 1]);
        tape.backward(labelsum);
        assert!(tape.grad(x).data.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn softmax_cross_entropy_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Matrix::randn(1, 10, 1.0, &mut rng);
        let f = |inputs: &[Matrix]| {
            let mut tape = Tape::new();
            let l = tape.leaf(inputs[0].clone());
            let loss = tape.cross_entropy(l, &[3]);
            tape.value(loss).data[0]
        };
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone());
        let loss = tape.cross_entropy(l, &[3]);
        tape.backward(loss);
        for entry in 0..10 {
            let fd = fd_probe(&[logits.clone()], 0, entry, 1e-6, &f);
            let an = tape.grad(l).data[entry];
            assert!(rel_err(fd, an) < 1e-6, "entry {entry}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::randn(3, 6, 1.0, &mut rng);
        let w = Matrix::randn(6, 6, 0.5, &mut rng);
        let a = Matrix::randn(1, 3, 0.3, &mut rng);
        let build = |inputs: &[Matrix]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(inputs[0].clone());
            let w = tape.leaf(inputs[1].clone());
            let alog = tape.leaf(inputs[2].clone());
            let aw = tape.softmax_rows(alog);
            let lin = tape.matmul(x, w);
            let t = tape.tanh(lin);
            let mx = tape.window_max(x, 3);
            let av = tape.window_avg(x, 3);
            let mix = tape.weighted_sum(aw, &[t, mx, av]);
            let sg = tape.sigmoid(mix);
            let loss = tape.cross_entropy(sg, &[0, 1, 2]);
            tape.value(loss).data[0]
        };
        let inputs = vec![x.clone(), w.clone(), a.clone()];
        let mut tape = Tape::new();
        let xl = tape.leaf(x);
        let wl = tape.leaf(w);
        let al = tape.leaf(a);
        let aw = tape.softmax_rows(al);
        let lin = tape.matmul(xl, wl);
        let t = tape.tanh(lin);
        let mx = tape.window_max(xl, 3);
        let av = tape.window_avg(xl, 3);
        let mix = tape.weighted_sum(aw, &[t, mx, av]);
        let sg = tape.sigmoid(mix);
        let loss = tape.cross_entropy(sg, &[0, 1, 2]);
        tape.backward(loss);
        let grads = [tape.grad(xl).clone(), tape.grad(wl).clone(), tape.grad(al).clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        use rand::Rng;
        for _ in 0..30 {
            let which = rng.random_range(0..3usize);
            let entry = rng.random_range(0..inputs[which].data.len());
            let fd = fd_probe(&inputs, which, entry, 1e-5, &build);
            let an = grads[which].data[entry];
            assert!(
                rel_err(fd, an) < 1e-5,
                "input {which} entry {entry}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn chunked_softmax_and_normalize_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let logits = Matrix::randn(1, 12, 0.8, &mut rng);
        let eps = Matrix::randn(1, 12, 1.0, &mut rng);
        let target = Matrix::randn(1, 12, 1.0, &mut rng);
        let build = |inputs: &[Matrix]| -> f64 {
            let mut tape = Tape::new();
            let l = tape.leaf(inputs[0].clone());
            let sm = tape.softmax_chunks(l, 4);
            let conc = tape.exp(l);
            let inv = tape.pow_const(conc, -1.0);
            let halfinv = tape.pow_const(conc, -0.5);
            let t1 = tape.scale(inv, -1.0 / 9.0);
            let t2 = tape.emul_const(halfinv, eps.clone());
            let t12 = tape.add(t1, t2);
            let ones = Matrix::filled(1, 12, 1.0);
            let t = tape.add_const(t12, &ones);
            let ts = tape.scale(t, 20.0);
            let sp = tape.softplus(ts);
            let tsafe = tape.scale(sp, 1.0 / 20.0);
            let sq = tape.emul(tsafe, tsafe);
            let cube = tape.emul(sq, tsafe);
            let g = tape.emul(conc, cube);
            let w = tape.normalize_chunks(g, 4);
            let both = tape.add(sm, w);
            let diff = tape.add_const(both, &target);
            let per = tape.emul(diff, diff);
            let rep = tape.log_sum_exp_minus_mean(per);
            tape.value(rep).data[0]
        };
        let base = build(&[logits.clone()]);
        assert!(base.is_finite());
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone());
        let sm = tape.softmax_chunks(l, 4);
        let conc = tape.exp(l);
        let inv = tape.pow_const(conc, -1.0);
        let halfinv = tape.pow_const(conc, -0.5);
        let t1 = tape.scale(inv, -1.0 / 9.0);
        let t2 = tape.emul_const(halfinv, eps.clone());
        let t12 = tape.add(t1, t2);
        let ones = Matrix::filled(1, 12, 1.0);
        let t = tape.add_const(t12, &ones);
        let ts = tape.scale(t, 20.0);
        let sp = tape.softplus(ts);
        let tsafe = tape.scale(sp, 1.0 / 20.0);
        let sq = tape.emul(tsafe, tsafe);
        let cube = tape.emul(sq, tsafe);
        let g = tape.emul(conc, cube);
        let w = tape.normalize_chunks(g, 4);
        let both = tape.add(sm, w);
        let diff = tape.add_const(both, &target);
        let per = tape.emul(diff, diff);
        let rep = tape.log_sum_exp_minus_mean(per);
        tape.backward(rep);
        for entry in 0..12 {
            let fd = fd_probe(&[logits.clone()], 0, entry, 1e-6, &build);
            let an = tape.grad(l).data[entry];
            assert!(rel_err(fd, an) < 1e-5, "entry {entry}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn straight_through_routes_gradient_to_soft() {
        let mut tape = Tape::new();
        let l = tape.leaf(Matrix::row(&[0.3, 0.9, 0.1]));
        let soft = tape.softmax_rows(l);
        let hard = Matrix::row(&[0.0, 1.0, 0.0]);
        let st = tape.straight_through(soft, hard.clone());
        assert_eq!(tape.value(st), &hard);
        let probe = tape.leaf(Matrix::row(&[1.0, 2.0, 3.0]));
        let prod = tape.emul(st, probe);
        let ones = Matrix::row(&[0.0; 3]);
        let keep = tape.add_const(prod, &ones);
        let score = tape.log_sum_exp_minus_mean(keep);
        tape.backward(score);
        assert!(tape.grad(l).data.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn concat_and_broadcast_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(Matrix::from_vec(2, 3, vec![5.0; 6]));
        let cat = tape.concat_cols(&[a, b]);
        assert_eq!(tape.value(cat).cols, 5);
        assert_eq!(tape.value(cat).get(1, 0), 3.0);
        assert_eq!(tape.value(cat).get(0, 2), 5.0);
        let bias = tape.leaf(Matrix::row(&[1.0, 1.0, 1.0, 1.0, 1.0]));
        let shifted = tape.add_row_broadcast(cat, bias);
        assert_eq!(tape.value(shifted).get(0, 0), 2.0);
        let loss = tape.cross_entropy(shifted, &[0, 1]);
        tape.backward(loss);
        let bias_grad: f64 = tape.grad(bias).data.iter().sum();
        assert!(bias_grad.abs() < 1e-12);
    }

    #[test]
    fn repeat_entries_round_trip() {
        let mut tape = Tape::new();
        let p = tape.leaf(Matrix::row(&[0.25, 0.75]));
        let rep = tape.repeat_entries(p, 3);
        assert_eq!(tape.value(rep).data, vec![0.25, 0.25, 0.25, 0.75, 0.75, 0.75]);
        let probe = Matrix::row(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let weighted = tape.emul_const(rep, probe);
        let score = tape.log_sum_exp_minus_mean(weighted);
        tape.backward(score);
        assert!(tape.grad(p).data.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn entry_scale_gradients() {
        let mut tape = Tape::new();
        let gates = tape.leaf(Matrix::row(&[0.5, 2.0]));
        let x = tape.leaf(Matrix::from_vec(1, 2, vec![3.0, 4.0]));
        let scaled = tape.entry_scale(x, gates, 1);
        assert_eq!(tape.value(scaled).data, vec![6.0, 8.0]);
        let loss = tape.log_sum_exp_minus_mean(scaled);
        tape.backward(loss);
        assert_eq!(tape.grad(gates).data[0], 0.0);
        assert!(tape.grad(gates).data[1] != 0.0);
    }

    #[test]
    fn weighted_sum_weight_gradient_is_inner_product() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::row(&[0.3, 0.7]));
        let t1 = tape.leaf(Matrix::from_vec(1, 2, vec![1.0, 2.0]));
        let t2 = tape.leaf(Matrix::from_vec(1, 2, vec![5.0, 1.0]));
        let mix = tape.weighted_sum(w, &[t1, t2]);
        assert_eq!(tape.value(mix).data, vec![0.3 + 3.5, 0.6 + 0.7]);
        let lab = tape.cross_entropy(mix, &[0]);
        tape.backward(lab);
        let up = tape.grad(mix).data.clone();
        let expected_w0 = up[0] * 1.0 + up[1] * 2.0;
        assert!((tape.grad(w).data[0] - expected_w0).abs() < 1e-12);
    }
}
