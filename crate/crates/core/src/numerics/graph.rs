//! Tape of tensor operations with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates
//! vector-Jacobian products into the nodes that depend on a trainable leaf.
//!
//! The arithmetic primitives are matmul, broadcasting add, broadcasting
//! element-wise multiply, layer normalization, masked softmax, row-wise
//! log-sum-exp, depthwise 1-D convolution, swish, gated linear unit,
//! embedding gather and cross-entropy. Everything else on the tape is either
//! shape plumbing (slicing, concatenation, transpose, reshape, sum) or a
//! [`Graph::scalar_loss`] node whose gradient was computed by a dedicated
//! algorithm (the CTC forward-backward pass).

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which logits take part in a softmax.
#[derive(Clone, Debug, PartialEq)]
pub enum SoftmaxMask {
    None,
    /// Row `i` may attend to columns `0..=i`.
    Causal,
    /// One flag per column, shared by every row.
    Columns(Vec<bool>),
}

impl SoftmaxMask {
    fn allows(&self, row: usize, col: usize) -> bool {
        match self {
            SoftmaxMask::None => true,
            SoftmaxMask::Causal => col <= row,
            SoftmaxMask::Columns(flags) => flags[col],
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, rstd: Vec<f64> },
    MaskedSoftmax(Var),
    LogSumExp(Var),
    DepthwiseConv { x: Var, w: Var },
    Swish(Var),
    Glu(Var),
    Gather { table: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    ScalarLoss { input: Var, grad: Box<[f64]> },
    Transpose(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::LogSumExp(..) => "log_sum_exp",
            Op::DepthwiseConv { .. } => "depthwise_conv1d",
            Op::Swish(..) => "swish",
            Op::Glu(..) => "glu",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ScalarLoss { .. } => "scalar_loss",
            Op::Transpose(..) => "transpose",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    num_params: usize,
    /// Node index and name of the first non-finite operation.
    fault: Option<(usize, &'static str)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), num_params: 0, fault: None }
    }

    /// Binds every parameter of `store` as a leaf, in store order, so that
    /// [`Graph::param`] is a constant-time lookup. With `track` false no
    /// leaf requires a gradient and the tape only evaluates values.
    pub fn with_params(store: &ParamStore, track: bool) -> Self {
        let mut graph = Self::new();
        graph.nodes.reserve(store.len() * 4);
        for entry in store.entries() {
            graph.nodes.push(Node { value: entry.value.clone(), op: Op::Leaf, needs_grad: track && entry.trainable });
        }
        graph.num_params = store.len();
        graph
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.0 < self.num_params, "parameter {} is not bound to this graph", id.0);
        Var(id.0)
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First operation that produced a non-finite value, if any.
    pub fn fault(&self) -> Option<&'static str> {
        self.fault.map(|(_, op)| op)
    }

    /// Drops every node recorded after the first `len`. Parameter leaves
    /// are never dropped.
    pub fn truncate(&mut self, len: usize) {
        let len = len.max(self.num_params);
        self.nodes.truncate(len);
        if self.fault.is_some_and(|(at, _)| at >= len) {
            self.fault = None;
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.fault() {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ---- arithmetic primitives ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions differ: {m}x{k} · {k2}x{n}");
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let g = self.any_grad(&[a, b]);
        self.push(Tensor::from_parts(m, n, out), Op::MatMul(a, b), g)
    }

    /// `a + b` where `b` has the shape of `a` or broadcasts along rows,
    /// columns, or both.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), g)
    }

    /// Element-wise `a * b` with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), g)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::from_parts(x.rows(), x.cols(), x.data().iter().map(|v| v * factor).collect());
        let g = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, factor), g)
    }

    /// Row-wise normalization to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        let mut out = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in t.iter_rows() {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            out.extend(row.iter().map(|v| (v - mean) * r));
            rstd.push(r);
        }
        let g = self.any_grad(&[x]);
        self.push(Tensor::from_parts(rows, cols, out), Op::LayerNorm { x, rstd }, g)
    }

    /// Row-wise softmax where masked logits are treated as negative
    /// infinity, so their probabilities are exactly zero. A row with no
    /// admissible entry is a fault.
    pub fn masked_softmax(&mut self, x: Var, mask: &SoftmaxMask) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        if let SoftmaxMask::Columns(flags) = mask {
            assert_eq!(flags.len(), cols, "softmax mask width {} for {} columns", flags.len(), cols);
        }
        let mut out = vec![0.0; rows * cols];
        let mut empty_row = false;
        for (r, row) in t.iter_rows().enumerate() {
            let o = &mut out[r * cols..(r + 1) * cols];
            empty_row |= !masked_softmax_row(row, |c| mask.allows(r, c), o);
        }
        let g = self.any_grad(&[x]);
        let v = self.push(Tensor::from_parts(rows, cols, out), Op::MaskedSoftmax(x), g);
        if empty_row && self.fault.is_none() {
            self.fault = Some((v.0, "masked_softmax"));
        }
        v
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.masked_softmax(x, &SoftmaxMask::None)
    }

    /// Row-wise `log Σ exp`, producing a column.
    pub fn log_sum_exp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.iter_rows().map(log_sum_exp_slice).collect();
        let rows = t.rows();
        let g = self.any_grad(&[x]);
        self.push(Tensor::from_parts(rows, 1, out), Op::LogSumExp(x), g)
    }

    /// `x - logsumexp(x)` per row.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let lse = self.log_sum_exp(x);
        let neg = self.scale(lse, -1.0);
        self.add(x, neg)
    }

    /// Per-channel convolution along time with zero "same" padding.
    /// `x` is `T × C`, `w` is `K × C` with odd `K`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Var {
        let (t_len, channels) = self.shape(x);
        let (k, c2) = self.shape(w);
        assert_eq!(channels, c2, "depthwise kernel has {c2} channels, input has {channels}");
        assert!(k % 2 == 1, "depthwise kernel size must be odd");
        let pad = k / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; t_len * channels];
        for t in 0..t_len {
            let o = &mut out[t * channels..(t + 1) * channels];
            for tap in 0..k {
                let src = t + tap;
                if src < pad || src - pad >= t_len {
                    continue;
                }
                let xr = &xv[(src - pad) * channels..(src - pad + 1) * channels];
                let wr = &wv[tap * channels..(tap + 1) * channels];
                for c in 0..channels {
                    o[c] += wr[c] * xr[c];
                }
            }
        }
        let g = self.any_grad(&[x, w]);
        self.push(Tensor::from_parts(t_len, channels, out), Op::DepthwiseConv { x, w }, g)
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v * sigmoid(v)).collect();
        let (r, c) = t.shape();
        let g = self.any_grad(&[x]);
        self.push(Tensor::from_parts(r, c, out), Op::Swish(x), g)
    }

    /// Splits columns in half and returns `first · sigmoid(second)`.
    pub fn glu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        assert!(cols % 2 == 0, "glu needs an even number of columns");
        let half = cols / 2;
        let mut out = Vec::with_capacity(rows * half);
        for row in t.iter_rows() {
            let (a, b) = row.split_at(half);
            out.extend(a.iter().zip(b).map(|(&a, &b)| a * sigmoid(b)));
        }
        let g = self.any_grad(&[x]);
        self.push(Tensor::from_parts(rows, half, out), Op::Glu(x), g)
    }

    /// Rows of `table` selected by `indices`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let cols = t.cols();
        assert!(!indices.is_empty(), "gather needs at least one index");
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            assert!(i < t.rows(), "gather index {i} out of range for {} rows", t.rows());
            out.extend_from_slice(t.row(i));
        }
        let g = self.any_grad(&[table]);
        self.push(Tensor::from_parts(indices.len(), cols, out), Op::Gather { table, indices: indices.to_vec() }, g)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let t = self.value(logits);
        let (rows, cols) = t.shape();
        assert_eq!(rows, targets.len(), "cross_entropy has {rows} rows and {} targets", targets.len());
        let mut probs = Vec::with_capacity(rows * cols);
        let mut total = 0.0;
        for (row, &target) in t.iter_rows().zip(targets) {
            assert!(target < cols, "cross_entropy target {target} out of range");
            let lse = log_sum_exp_slice(row);
            total += lse - row[target];
            probs.extend(row.iter().map(|v| libm::exp(v - lse)));
        }
        let g = self.any_grad(&[logits]);
        self.push(Tensor::scalar(total / rows as f64), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, g)
    }

    /// Scalar node whose value and input gradient were computed outside the
    /// tape. `grad` must have the shape of `input`.
    pub fn scalar_loss(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Var {
        assert_eq!(grad.len(), self.value(input).len(), "scalar_loss gradient shape mismatch");
        let g = self.any_grad(&[input]);
        self.push(Tensor::scalar(value), Op::ScalarLoss { input, grad: grad.into_boxed_slice() }, g)
    }

    // ---- shape plumbing ----

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let g = self.any_grad(&[x]);
        self.push(Tensor::from_parts(c, r, out), Op::Transpose(x), g)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        assert!(len > 0 && start + len <= r, "row slice {start}+{len} out of {r}");
        let out = t.data()[start * c..(start + len) * c].to_vec();
        let g = self.any_grad(&[x]);
        self.push(Tensor::from_parts(len, c, out), Op::SliceRows { x, start }, g)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let c = t.cols();
        assert!(len > 0 && start + len <= c, "column slice {start}+{len} out of {c}");
        let mut out = Vec::with_capacity(t.rows() * len);
        for row in t.iter_rows() {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rows = t.rows();
        let g = self.any_grad(&[x]);
        self.push(Tensor::from_parts(rows, len, out), Op::SliceCols { x, start }, g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let g = self.any_grad(parts);
        self.push(Tensor::from_parts(rows, cols, out), Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                out.extend_from_slice(t.row(r));
            }
        }
        let g = self.any_grad(parts);
        self.push(Tensor::from_parts(rows, cols, out), Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), rows * cols, "reshape changes element count");
        let out = t.data().to_vec();
        let g = self.any_grad(&[x]);
        self.push(Tensor::from_parts(rows, cols, out), Op::Reshape(x), g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    // ---- composites ----

    /// `x · w + b` for a row-major `in × out` weight and `1 × out` bias.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add(y, b)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let s = self.scale(v, w);
            acc = Some(match acc {
                Some(a) => self.add(a, s),
                None => s,
            });
        }
        acc.expect("weighted_sum of nothing")
    }

    // ---- reverse pass ----

    /// Gradients of the scalar `root` with respect to every node that needs
    /// one. Entry `i` of the result belongs to node `i`.
    pub fn backward(&self, root: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::NonScalar { rows: shape.0, cols: shape.1 });
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(grads)
    }

    /// Gradients with respect to the bound parameters, as tensors in store
    /// order. Non-trainable parameters get `None`; trainable parameters the
    /// root does not depend on get zeros.
    pub fn param_grads(&self, root: Var) -> Result<Vec<Option<Tensor>>> {
        let mut grads = self.backward(root)?;
        Ok((0..self.num_params)
            .map(|i| {
                let node = &self.nodes[i];
                node.needs_grad.then(|| {
                    let (r, c) = node.value.shape();
                    let g = grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| vec![0.0; r * c]);
                    Tensor::from_parts(r, c, g)
                })
            })
            .collect())
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.grad_slot(grads, *a);
                    for i in 0..m {
                        let go = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += dot(go, br);
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    let gb = self.grad_slot(grads, *b);
                    for i in 0..m {
                        let go = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = av[i * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            let row = &mut gb[p * n..(p + 1) * n];
                            for (g, &o) in row.iter_mut().zip(go) {
                                *g += s * o;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                let (rows, cols) = out.shape();
                if self.requires_grad(*a) {
                    let ga = self.grad_slot(grads, *a);
                    for (g, o) in ga.iter_mut().zip(gout) {
                        *g += o;
                    }
                }
                if self.requires_grad(*b) {
                    let (br, bc) = self.shape(*b);
                    let gb = self.grad_slot(grads, *b);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[bidx(r, c, br, bc)] += gout[r * cols + c];
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (rows, cols) = out.shape();
                let (br, bc) = self.shape(*b);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let ga = self.grad_slot(grads, *a);
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += gout[r * cols + c] * bv[bidx(r, c, br, bc)];
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let gb = self.grad_slot(grads, *b);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[bidx(r, c, br, bc)] += gout[r * cols + c] * av[r * cols + c];
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                let ga = self.grad_slot(grads, *a);
                for (g, o) in ga.iter_mut().zip(gout) {
                    *g += o * f;
                }
            }
            Op::LayerNorm { x, rstd } => {
                let cols = out.cols();
                let y = out.data();
                let gx = self.grad_slot(grads, *x);
                for (r, &rs) in rstd.iter().enumerate() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let mean_g = gr.iter().sum::<f64>() / cols as f64;
                    let mean_gy = dot(gr, yr) / cols as f64;
                    for c in 0..cols {
                        gx[r * cols + c] += rs * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let cols = out.cols();
                let y = out.data();
                let gx = self.grad_slot(grads, *x);
                for r in 0..out.rows() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let s = dot(gr, yr);
                    for c in 0..cols {
                        gx[r * cols + c] += yr[c] * (gr[c] - s);
                    }
                }
            }
            Op::LogSumExp(x) => {
                let xt = self.value(*x);
                let cols = xt.cols();
                let lse = out.data();
                let xv = xt.data();
                let gx = self.grad_slot(grads, *x);
                for r in 0..xt.rows() {
                    for c in 0..cols {
                        gx[r * cols + c] += gout[r] * libm::exp(xv[r * cols + c] - lse[r]);
                    }
                }
            }
            Op::DepthwiseConv { x, w } => {
                let (t_len, channels) = self.shape(*x);
                let k = self.shape(*w).0;
                let pad = k / 2;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.requires_grad(*x) {
                    let gx = self.grad_slot(grads, *x);
                    for t in 0..t_len {
                        for tap in 0..k {
                            let src = t + tap;
                            if src < pad || src - pad >= t_len {
                                continue;
                            }
                            let s = src - pad;
                            for c in 0..channels {
                                gx[s * channels + c] += wv[tap * channels + c] * gout[t * channels + c];
                            }
                        }
                    }
                }
                if self.requires_grad(*w) {
                    let gw = self.grad_slot(grads, *w);
                    for t in 0..t_len {
                        for tap in 0..k {
                            let src = t + tap;
                            if src < pad || src - pad >= t_len {
                                continue;
                            }
                            let s = src - pad;
                            for c in 0..channels {
                                gw[tap * channels + c] += xv[s * channels + c] * gout[t * channels + c];
                            }
                        }
                    }
                }
            }
            Op::Swish(x) => {
                let xv = self.value(*x).data();
                let gx = self.grad_slot(grads, *x);
                for ((g, &v), o) in gx.iter_mut().zip(xv).zip(gout) {
                    let s = sigmoid(v);
                    *g += o * (s + v * s * (1.0 - s));
                }
            }
            Op::Glu(x) => {
                let xt = self.value(*x);
                let cols = xt.cols();
                let half = cols / 2;
                let xv = xt.data();
                let gx = self.grad_slot(grads, *x);
                for r in 0..xt.rows() {
                    for c in 0..half {
                        let a = xv[r * cols + c];
                        let s = sigmoid(xv[r * cols + half + c]);
                        let o = gout[r * half + c];
                        gx[r * cols + c] += o * s;
                        gx[r * cols + half + c] += o * a * s * (1.0 - s);
                    }
                }
            }
            Op::Gather { table, indices } => {
                let cols = self.shape(*table).1;
                let gt = self.grad_slot(grads, *table);
                for (j, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        gt[i * cols + c] += gout[j * cols + c];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = self.shape(*logits).1;
                let n = targets.len() as f64;
                let gl = self.grad_slot(grads, *logits);
                let scale = gout[0] / n;
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..cols {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        gl[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                    }
                }
            }
            Op::ScalarLoss { input, grad } => {
                let gi = self.grad_slot(grads, *input);
                for (g, d) in gi.iter_mut().zip(grad.iter()) {
                    *g += gout[0] * d;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.shape(*x);
                let gx = self.grad_slot(grads, *x);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += gout[j * r + i];
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                let gx = self.grad_slot(grads, *x);
                for (g, o) in gx[start * c..start * c + gout.len()].iter_mut().zip(gout) {
                    *g += o;
                }
            }
            Op::SliceCols { x, start } => {
                let len = out.cols();
                let c = self.shape(*x).1;
                let gx = self.grad_slot(grads, *x);
                for r in 0..out.rows() {
                    for j in 0..len {
                        gx[r * c + start + j] += gout[r * len + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.requires_grad(p) {
                        let gp = self.grad_slot(grads, p);
                        for (g, o) in gp.iter_mut().zip(&gout[offset..offset + n]) {
                            *g += o;
                        }
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let (rows, c) = self.shape(p);
                    if self.requires_grad(p) {
                        let gp = self.grad_slot(grads, p);
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += gout[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Reshape(x) => {
                let gx = self.grad_slot(grads, *x);
                for (g, o) in gx.iter_mut().zip(gout) {
                    *g += o;
                }
            }
            Op::Sum(x) => {
                let gx = self.grad_slot(grads, *x);
                for g in gx.iter_mut() {
                    *g += gout[0];
                }
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

#[inline]
fn bidx(r: usize, c: usize, br: usize, bc: usize) -> usize {
    let i = if br == 1 { 0 } else { r };
    let j = if bc == 1 { 0 } else { c };
    i * bc + j
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, cols) = a.shape();
    let (br, bc) = b.shape();
    assert!((br == rows || br == 1) && (bc == cols || bc == 1), "cannot broadcast {br}x{bc} onto {rows}x{cols}");
    let av = a.data();
    let bv = b.data();
    let out = if (br, bc) == (rows, cols) {
        av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(f(av[r * cols + c], bv[bidx(r, c, br, bc)]));
            }
        }
        out
    };
    Tensor::from_parts(rows, cols, out)
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (x, &y) in o.iter_mut().zip(br) {
                *x += s * y;
            }
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

pub(crate) fn log_sum_exp_slice(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

/// Softmax of `row` restricted to admissible columns; the others get
/// exactly zero. Returns false when no column is admissible.
pub(crate) fn masked_softmax_row(row: &[f64], admit: impl Fn(usize) -> bool, out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (c, &v) in row.iter().enumerate() {
        if admit(c) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = f64::NAN);
        return false;
    }
    let mut total = 0.0;
    for (c, &v) in row.iter().enumerate() {
        let e = if admit(c) { libm::exp(v - max) } else { 0.0 };
        out[c] = e;
        total += e;
    }
    out.iter_mut().for_each(|o| *o /= total);
    true
}
