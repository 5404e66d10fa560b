//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! Everything trainable in this crate is expressed as [`Tape`] operations over
//! [`Tensor`] values. The tape is rebuilt for every forward pass
//! (discretize-then-differentiate), which keeps the engine small and lets the
//! integration tests validate gradients against central finite differences.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use rand::Rng;

use crate::graph::DiffusionGraph;

/// Row-major dense tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            // Box-Muller transform; rand_distr is avoided to keep the
            // dependency surface minimal.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            data.push(z * std);
        }
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single element of a `[1]` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let flat = self.flat_index(idx);
        self.data[flat] = value;
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, &d) in idx.iter().enumerate() {
            assert!(d < self.shape[i], "index {:?} out of range for {:?}", idx, self.shape);
            flat = flat * self.shape[i] + d;
        }
        flat
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("node {0:?} holds a non-scalar value; backward roots must be scalar")]
    NonScalarRoot(Vec<usize>),
    #[error("attention over an empty neighborhood at node {node}")]
    EmptyNeighborhood { node: usize },
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Tanh(Var),
    Abs(Var),
    /// Matrix product of `[m, k] x [k, n]`.
    MatMul(Var, Var),
    /// `[n, c]` matrix plus `[c]` row vector broadcast over rows.
    AddRow(Var, Var),
    /// NHWC convolution; weights `[kh, kw, cin, cout]`, bias `[cout]`.
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize, cols: Vec<f64> },
    /// `[n, h, w, c] -> [n, c]` arithmetic mean over spatial cells.
    SpatialMean(Var),
    /// Concatenation along the last axis of equal-row matrices.
    ConcatCols(Vec<Var>),
    /// Row gather: output row r = input row `indices[r]`.
    GatherRows(Var, Rc<Vec<usize>>),
    /// Column slice `[n, c] -> [n, len]` starting at `start`.
    SliceCols { x: Var, start: usize, len: usize },
    /// Per-node softmax attention over graph neighborhoods (one head).
    /// Saves the attention weights for the backward pass.
    GraphAttention { m: Var, graph: Rc<DiffusionGraph>, scale: f64, weights: Vec<Vec<f64>> },
    /// Full reduction to a `[1]` scalar.
    SumAll(Var),
    /// Sum over rows of per-row L2 norms of an `[n, c]` matrix.
    L2RowNormSum(Var),
    Reshape(Var, Vec<usize>),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zero tensor if the
    /// variable does not influence the root.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(var).shape()),
        }
    }
}

/// A single forward computation graph.
///
/// Nodes are appended through the op methods and hold their forward values;
/// `backward` walks the tape in reverse. Tapes are cheap to create and are
/// meant to live for one forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    fn push(&self, op: Op, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Register a leaf value (parameter or input) on the tape.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, var: Var) -> Tensor {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    fn with_value<T>(&self, var: Var, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.nodes.borrow()[var.0].value)
    }

    fn binary_elementwise(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var, TapeError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(TapeError::ShapeMismatch {
                    op: name,
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)
        };
        Ok(self.push(op(a, b), value))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.with_value(a, |t| {
            Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect())
        });
        self.push(op, value)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(TapeError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            matmul_raw(ta.data(), tb.data(), sa[0], sa[1], sb[1])
        };
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add_row(&self, a: Var, row: Var) -> Result<Var, TapeError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tr) = (&nodes[a.0].value, &nodes[row.0].value);
            let (sa, sr) = (ta.shape(), tr.shape());
            if sa.len() != 2 || sr.len() != 1 || sa[1] != sr[0] {
                return Err(TapeError::ShapeMismatch {
                    op: "add_row",
                    lhs: sa.to_vec(),
                    rhs: sr.to_vec(),
                });
            }
            let c = sa[1];
            let mut data = ta.data().to_vec();
            for (i, v) in data.iter_mut().enumerate() {
                *v += tr.data()[i % c];
            }
            Tensor::new(sa, data)
        };
        Ok(self.push(Op::AddRow(a, row), value))
    }

    /// NHWC convolution. `x: [n, h, w, cin]`, `w: [kh, kw, cin, cout]`,
    /// `b: [cout]`. Implemented as im2col + matmul; the unfolded columns are
    /// retained for the backward pass.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TapeError> {
        let (value, cols) = {
            let nodes = self.nodes.borrow();
            let (tx, tw, tb) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let (sx, sw) = (tx.shape(), tw.shape());
            if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] || tb.shape() != [sw[3]] {
                return Err(TapeError::ShapeMismatch {
                    op: "conv2d",
                    lhs: sx.to_vec(),
                    rhs: sw.to_vec(),
                });
            }
            conv2d_forward(tx, tw, tb, stride, pad)
        };
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad, cols }, value))
    }

    pub fn spatial_mean(&self, a: Var) -> Result<Var, TapeError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let s = t.shape();
            if s.len() != 4 {
                return Err(TapeError::ShapeMismatch {
                    op: "spatial_mean",
                    lhs: s.to_vec(),
                    rhs: vec![],
                });
            }
            let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
            let cells = (h * w) as f64;
            let mut out = vec![0.0; n * c];
            for i in 0..n {
                for cell in 0..h * w {
                    let base = (i * h * w + cell) * c;
                    for ch in 0..c {
                        out[i * c + ch] += t.data()[base + ch];
                    }
                }
            }
            for v in out.iter_mut() {
                *v /= cells;
            }
            Tensor::new(&[n, c], out)
        };
        Ok(self.push(Op::SpatialMean(a), value))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, TapeError> {
        assert!(!parts.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.shape()[0];
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let s = nodes[p.0].value.shape();
                if s.len() != 2 || s[0] != rows {
                    return Err(TapeError::ShapeMismatch {
                        op: "concat_cols",
                        lhs: nodes[parts[0].0].value.shape().to_vec(),
                        rhs: s.to_vec(),
                    });
                }
                widths.push(s[1]);
            }
            let total: usize = widths.iter().sum();
            let mut out = vec![0.0; rows * total];
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = nodes[p.0].value.data();
                for r in 0..rows {
                    out[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                offset += w;
            }
            Tensor::new(&[rows, total], out)
        };
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var, TapeError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let s = t.shape();
            if s.len() != 2 {
                return Err(TapeError::ShapeMismatch {
                    op: "gather_rows",
                    lhs: s.to_vec(),
                    rhs: vec![],
                });
            }
            let c = s[1];
            let mut out = Vec::with_capacity(indices.len() * c);
            for &r in indices {
                assert!(r < s[0], "gather_rows index {} out of range {}", r, s[0]);
                out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
            Tensor::new(&[indices.len(), c], out)
        };
        Ok(self.push(Op::GatherRows(a, Rc::new(indices.to_vec())), value))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var, TapeError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let s = t.shape();
            if s.len() != 2 || start + len > s[1] {
                return Err(TapeError::ShapeMismatch {
                    op: "slice_cols",
                    lhs: s.to_vec(),
                    rhs: vec![start, len],
                });
            }
            let c = s[1];
            let mut out = Vec::with_capacity(s[0] * len);
            for r in 0..s[0] {
                out.extend_from_slice(&t.data()[r * c + start..r * c + start + len]);
            }
            Tensor::new(&[s[0], len], out)
        };
        Ok(self.push(Op::SliceCols { x: a, start, len }, value))
    }

    /// Softmax dot-product attention for one head over graph neighborhoods.
    ///
    /// `m` is the `[n, d]` matrix of per-node head features. Output row i is
    /// the attention-weighted sum of neighbor rows; `scale` multiplies the
    /// dot-product logits (1.0 for the unscaled form).
    pub fn graph_attention(
        &self,
        m: Var,
        graph: Rc<DiffusionGraph>,
        scale: f64,
    ) -> Result<Var, TapeError> {
        let (value, weights) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[m.0].value;
            let s = t.shape();
            if s.len() != 2 || s[0] != graph.num_nodes() {
                return Err(TapeError::ShapeMismatch {
                    op: "graph_attention",
                    lhs: s.to_vec(),
                    rhs: vec![graph.num_nodes()],
                });
            }
            attention_forward(t.data(), s[0], s[1], &graph, scale)?
        };
        Ok(self.push(Op::GraphAttention { m, graph, scale, weights }, value))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = self.with_value(a, |t| Tensor::scalar(t.data().iter().sum()));
        self.push(Op::SumAll(a), value)
    }

    /// Sum of per-row Euclidean norms of an `[n, c]` matrix.
    pub fn l2_row_norm_sum(&self, a: Var) -> Result<Var, TapeError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let s = t.shape();
            if s.len() != 2 {
                return Err(TapeError::ShapeMismatch {
                    op: "l2_row_norm_sum",
                    lhs: s.to_vec(),
                    rhs: vec![],
                });
            }
            let c = s[1];
            let mut total = 0.0;
            for r in 0..s[0] {
                let row = &t.data()[r * c..(r + 1) * c];
                total += row.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            Tensor::scalar(total)
        };
        Ok(self.push(Op::L2RowNormSum(a), value))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let old = self.shape(a);
        let value = self.with_value(a, |t| t.clone().reshaped(shape));
        self.push(Op::Reshape(a, old), value)
    }

    /// Reverse-mode sweep from a scalar root. Returns per-variable gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients, TapeError> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.numel() != 1 {
            return Err(TapeError::NonScalarRoot(nodes[root.0].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, &nodes);
                    accumulate(&mut grads, *b, &g, &nodes);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g, &nodes);
                    let neg = Tensor::new(g.shape(), g.data().iter().map(|v| -v).collect());
                    accumulate(&mut grads, *b, &neg, &nodes);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = Tensor::new(
                        g.shape(),
                        g.data().iter().zip(tb.data()).map(|(&gv, &bv)| gv * bv).collect(),
                    );
                    let gb = Tensor::new(
                        g.shape(),
                        g.data().iter().zip(ta.data()).map(|(&gv, &av)| gv * av).collect(),
                    );
                    accumulate(&mut grads, *a, &ga, &nodes);
                    accumulate(&mut grads, *b, &gb, &nodes);
                }
                Op::Neg(a) => {
                    let ga = Tensor::new(g.shape(), g.data().iter().map(|v| -v).collect());
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
                Op::Scale(a, c) => {
                    let ga = Tensor::new(g.shape(), g.data().iter().map(|v| c * v).collect());
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, &g, &nodes),
                Op::Exp(a) => {
                    let out = &nodes[idx].value;
                    let ga = Tensor::new(
                        g.shape(),
                        g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect(),
                    );
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
                Op::Tanh(a) => {
                    let out = &nodes[idx].value;
                    let ga = Tensor::new(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(out.data())
                            .map(|(&gv, &y)| gv * (1.0 - y * y))
                            .collect(),
                    );
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
                Op::Abs(a) => {
                    let input = &nodes[a.0].value;
                    // Subgradient 0 at the kink.
                    let ga = Tensor::new(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(input.data())
                            .map(|(&gv, &x)| gv * sign(x))
                            .collect(),
                    );
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    // dA = g . B^T, dB = A^T . g
                    let ga = matmul_nt(g.data(), tb.data(), m, n, k);
                    let gb = matmul_tn(ta.data(), g.data(), m, k, n);
                    accumulate(&mut grads, *a, &ga, &nodes);
                    accumulate(&mut grads, *b, &gb, &nodes);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *a, &g, &nodes);
                    let c = nodes[row.0].value.shape()[0];
                    let mut gr = vec![0.0; c];
                    for (i, &v) in g.data().iter().enumerate() {
                        gr[i % c] += v;
                    }
                    accumulate(&mut grads, *row, &Tensor::new(&[c], gr), &nodes);
                }
                Op::Conv2d { x, w, b, stride, pad, cols } => {
                    let (gx, gw, gb) = conv2d_backward(
                        &nodes[x.0].value,
                        &nodes[w.0].value,
                        &g,
                        *stride,
                        *pad,
                        cols,
                    );
                    accumulate(&mut grads, *x, &gx, &nodes);
                    accumulate(&mut grads, *w, &gw, &nodes);
                    accumulate(&mut grads, *b, &gb, &nodes);
                }
                Op::SpatialMean(a) => {
                    let s = nodes[a.0].value.shape().to_vec();
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let inv = 1.0 / (h * w) as f64;
                    let mut ga = vec![0.0; n * h * w * c];
                    for i in 0..n {
                        for cell in 0..h * w {
                            let base = (i * h * w + cell) * c;
                            for ch in 0..c {
                                ga[base + ch] = g.data()[i * c + ch] * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &Tensor::new(&s, ga), &nodes);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.shape()[0];
                    let total = g.shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.shape()[1];
                        let mut gp = vec![0.0; rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads, *p, &Tensor::new(&[rows, w], gp), &nodes);
                        offset += w;
                    }
                }
                Op::GatherRows(a, indices) => {
                    let s = nodes[a.0].value.shape().to_vec();
                    let c = s[1];
                    let mut ga = vec![0.0; s[0] * c];
                    for (r, &src) in indices.iter().enumerate() {
                        for ch in 0..c {
                            ga[src * c + ch] += g.data()[r * c + ch];
                        }
                    }
                    accumulate(&mut grads, *a, &Tensor::new(&s, ga), &nodes);
                }
                Op::SliceCols { x, start, len } => {
                    let s = nodes[x.0].value.shape().to_vec();
                    let c = s[1];
                    let mut ga = vec![0.0; s[0] * c];
                    for r in 0..s[0] {
                        for j in 0..*len {
                            ga[r * c + start + j] = g.data()[r * len + j];
                        }
                    }
                    accumulate(&mut grads, *x, &Tensor::new(&s, ga), &nodes);
                }
                Op::GraphAttention { m, graph, scale, weights } => {
                    let t = &nodes[m.0].value;
                    let gm = attention_backward(
                        t.data(),
                        t.shape()[0],
                        t.shape()[1],
                        graph,
                        *scale,
                        weights,
                        g.data(),
                    );
                    accumulate(&mut grads, *m, &gm, &nodes);
                }
                Op::SumAll(a) => {
                    let s = nodes[a.0].value.shape().to_vec();
                    let ga = Tensor::full(&s, g.item());
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
                Op::L2RowNormSum(a) => {
                    let t = &nodes[a.0].value;
                    let s = t.shape().to_vec();
                    let c = s[1];
                    let gv = g.item();
                    let mut ga = vec![0.0; t.numel()];
                    for r in 0..s[0] {
                        let row = &t.data()[r * c..(r + 1) * c];
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > 1e-12 {
                            for j in 0..c {
                                ga[r * c + j] = gv * row[j] / norm;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &Tensor::new(&s, ga), &nodes);
                }
                Op::Reshape(a, old_shape) => {
                    let ga = g.clone().reshaped(old_shape);
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            } else if idx == root.0 {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: &Tensor, nodes: &[Node]) {
    debug_assert_eq!(nodes[var.0].value.shape(), g.shape());
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        None => grads[var.0] = Some(g.clone()),
    }
}

/// `[m, k] x [k, n]` row-major matrix product (ikj loop order).
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Tensor {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `g [m, n] x B^T [n, k] -> [m, k]`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Tensor {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                acc += g[i * n + j] * b[p * n + j];
            }
            out[i * k + p] = acc;
        }
    }
    Tensor::new(&[m, k], out)
}

/// `A^T [k, m] x g [m, n] -> [k, n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Tensor {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let g_row = &g[i * n..(i + 1) * n];
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
    Tensor::new(&[k, n], out)
}

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// im2col + matmul convolution. Returns the output tensor and the unfolded
/// column buffer `[n * ho * wo, kh * kw * cin]` reused by the backward pass.
fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Vec<f64>) {
    let (n, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wd, kw, stride, pad);
    let patch = kh * kw * cin;
    let rows = n * ho * wo;

    let mut cols = vec![0.0; rows * patch];
    let xd = x.data();
    for img in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (img * ho + oy) * wo + ox;
                let dst = &mut cols[row * patch..(row + 1) * patch];
                let mut di = 0;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < wd {
                            let src = ((img * h + iy as usize) * wd + ix as usize) * cin;
                            dst[di..di + cin].copy_from_slice(&xd[src..src + cin]);
                        }
                        di += cin;
                    }
                }
            }
        }
    }

    // cols [rows, patch] x w [patch, cout]
    let mut out = matmul_raw(&cols, w.data(), rows, patch, cout).into_data();
    for (i, v) in out.iter_mut().enumerate() {
        *v += b.data()[i % cout];
    }
    (Tensor::new(&[n, ho, wo, cout], out), cols)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    cols: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let (n, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (g.shape()[1], g.shape()[2]);
    let patch = kh * kw * cin;
    let rows = n * ho * wo;

    // dW = cols^T . g
    let gw = matmul_tn(cols, g.data(), rows, patch, cout);

    // db = column sums of g
    let mut gb = vec![0.0; cout];
    for (i, &v) in g.data().iter().enumerate() {
        gb[i % cout] += v;
    }

    // d cols = g . W^T, then fold back into the input layout.
    let gcols = matmul_nt(g.data(), w.data(), rows, cout, patch);
    let mut gx = vec![0.0; x.numel()];
    let gc = gcols.data();
    for img in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (img * ho + oy) * wo + ox;
                let src = &gc[row * patch..(row + 1) * patch];
                let mut si = 0;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < wd {
                            let dst = ((img * h + iy as usize) * wd + ix as usize) * cin;
                            for ch in 0..cin {
                                gx[dst + ch] += src[si + ch];
                            }
                        }
                        si += cin;
                    }
                }
            }
        }
    }

    (
        Tensor::new(x.shape(), gx),
        gw.reshaped(w.shape()),
        Tensor::new(&[cout], gb),
    )
}

/// Shared attention math: softmax over each node's neighborhood of scaled
/// dot-product logits, then the weighted sum of neighbor features.
///
/// Used by both the tape op and the value-level `attention_weights` helper so
/// the two cannot diverge.
pub(crate) fn attention_forward(
    m: &[f64],
    n: usize,
    d: usize,
    graph: &DiffusionGraph,
    scale: f64,
) -> Result<(Tensor, Vec<Vec<f64>>), TapeError> {
    let mut out = vec![0.0; n * d];
    let mut all_weights = Vec::with_capacity(n);
    for i in 0..n {
        let nbrs = graph.neighbors(i);
        if nbrs.is_empty() {
            return Err(TapeError::EmptyNeighborhood { node: i });
        }
        let mi = &m[i * d..(i + 1) * d];
        let mut logits = Vec::with_capacity(nbrs.len());
        for &j in nbrs {
            let mj = &m[j * d..(j + 1) * d];
            let dot: f64 = mi.iter().zip(mj).map(|(a, b)| a * b).sum();
            logits.push(dot * scale);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (&j, &a) in nbrs.iter().zip(&weights) {
            let mj = &m[j * d..(j + 1) * d];
            for (o, &v) in oi.iter_mut().zip(mj) {
                *o += a * v;
            }
        }
        all_weights.push(weights);
    }
    Ok((Tensor::new(&[n, d], out), all_weights))
}

fn attention_backward(
    m: &[f64],
    n: usize,
    d: usize,
    graph: &DiffusionGraph,
    scale: f64,
    weights: &[Vec<f64>],
    g: &[f64],
) -> Tensor {
    let mut gm = vec![0.0; n * d];
    for i in 0..n {
        let nbrs = graph.neighbors(i);
        let w = &weights[i];
        let gi = &g[i * d..(i + 1) * d];
        let mi = &m[i * d..(i + 1) * d];

        // dL/da_j = g_i . m_j
        let mut ga: Vec<f64> = nbrs
            .iter()
            .map(|&j| {
                let mj = &m[j * d..(j + 1) * d];
                gi.iter().zip(mj).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();

        // Softmax Jacobian: dl_j = a_j * (ga_j - sum_k a_k ga_k)
        let inner: f64 = w.iter().zip(&ga).map(|(&a, &v)| a * v).sum();
        for (gaj, &a) in ga.iter_mut().zip(w) {
            *gaj = a * (*gaj - inner);
        }

        for ((&j, &a), &gl) in nbrs.iter().zip(w).zip(&ga) {
            let mj = &m[j * d..(j + 1) * d];
            for ch in 0..d {
                // Output path: out_i += a * m_j
                gm[j * d + ch] += a * gi[ch];
                // Logit path: l_j = scale * m_i . m_j
                gm[i * d + ch] += gl * scale * mj[ch];
                gm[j * d + ch] += gl * scale * mi[ch];
            }
        }
    }
    Tensor::new(&[n, d], gm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_complete_graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + eps;
            let plus = f(&xp);
            xp[i] = x[i] - eps;
            let minus = f(&xp);
            xp[i] = x[i];
            grad[i] = (plus - minus) / (2.0 * eps);
        }
        grad
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom < tol,
                "{} mismatch at {}: {} vs {}",
                what,
                i,
                x,
                y
            );
        }
    }

    #[test]
    fn matmul_matches_hand_result() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(Tensor::new(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = Tensor::randn(&mut rng, &[3, 4], 1.0);
        let b0 = Tensor::randn(&mut rng, &[4, 2], 1.0);

        let tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let c = tape.matmul(a, b).unwrap();
        let sq = tape.mul(c, c).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();

        let eval = |av: &[f64], bv: &[f64]| {
            let t = Tape::new();
            let a = t.leaf(Tensor::new(&[3, 4], av.to_vec()));
            let b = t.leaf(Tensor::new(&[4, 2], bv.to_vec()));
            let c = t.matmul(a, b).unwrap();
            let sq = t.mul(c, c).unwrap();
            t.value(t.sum_all(sq)).item()
        };
        let fd_a = finite_diff(|av| eval(av, b0.data()), a0.data(), 1e-6);
        let fd_b = finite_diff(|bv| eval(a0.data(), bv), b0.data(), 1e-6);
        assert_close(grads.wrt(&tape, a).data(), &fd_a, 1e-6, "dA");
        assert_close(grads.wrt(&tape, b).data(), &fd_b, 1e-6, "dB");
    }

    #[test]
    fn conv2d_shape_and_known_value() {
        // 1x3x3x1 input, 2x2 kernel, stride 1, no padding.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(
            &[1, 3, 3, 1],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        ));
        let w = tape.leaf(Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(Tensor::new(&[1], vec![0.5]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 2, 2, 1]);
        // Each output = x[y][x] + x[y+1][x+1] + 0.5
        assert_eq!(v.data(), &[6.5, 8.5, 12.5, 14.5]);
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::randn(&mut rng, &[2, 5, 4, 2], 1.0);
        let w0 = Tensor::randn(&mut rng, &[3, 3, 2, 3], 0.5);
        let b0 = Tensor::randn(&mut rng, &[3], 0.5);

        let eval = |xv: &[f64], wv: &[f64], bv: &[f64]| {
            let t = Tape::new();
            let x = t.leaf(Tensor::new(&[2, 5, 4, 2], xv.to_vec()));
            let w = t.leaf(Tensor::new(&[3, 3, 2, 3], wv.to_vec()));
            let b = t.leaf(Tensor::new(&[3], bv.to_vec()));
            let y = t.conv2d(x, w, b, 2, 1).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.value(t.sum_all(sq)).item()
        };

        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let w = tape.leaf(w0.clone());
        let b = tape.leaf(b0.clone());
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();

        let fd_x = finite_diff(|v| eval(v, w0.data(), b0.data()), x0.data(), 1e-6);
        let fd_w = finite_diff(|v| eval(x0.data(), v, b0.data()), w0.data(), 1e-6);
        let fd_b = finite_diff(|v| eval(x0.data(), w0.data(), v), b0.data(), 1e-6);
        assert_close(grads.wrt(&tape, x).data(), &fd_x, 1e-5, "dx");
        assert_close(grads.wrt(&tape, w).data(), &fd_w, 1e-5, "dw");
        assert_close(grads.wrt(&tape, b).data(), &fd_b, 1e-5, "db");
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m0 = Tensor::randn(&mut rng, &[4, 3], 1.0);
        let graph = Rc::new(build_complete_graph(4).unwrap());

        let eval = |mv: &[f64]| {
            let t = Tape::new();
            let m = t.leaf(Tensor::new(&[4, 3], mv.to_vec()));
            let y = t.graph_attention(m, graph.clone(), 1.0).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.value(t.sum_all(sq)).item()
        };

        let tape = Tape::new();
        let m = tape.leaf(m0.clone());
        let y = tape.graph_attention(m, graph.clone(), 1.0).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();

        let fd = finite_diff(eval, m0.data(), 1e-6);
        assert_close(grads.wrt(&tape, m).data(), &fd, 1e-5, "dm");
    }

    #[test]
    fn scaled_attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m0 = Tensor::randn(&mut rng, &[3, 4], 1.0);
        let graph = Rc::new(build_complete_graph(3).unwrap());
        let scale = 0.5;

        let eval = |mv: &[f64]| {
            let t = Tape::new();
            let m = t.leaf(Tensor::new(&[3, 4], mv.to_vec()));
            let y = t.graph_attention(m, graph.clone(), scale).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.value(t.sum_all(sq)).item()
        };

        let tape = Tape::new();
        let m = tape.leaf(m0.clone());
        let y = tape.graph_attention(m, graph.clone(), scale).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let fd = finite_diff(eval, m0.data(), 1e-6);
        assert_close(grads.wrt(&tape, m).data(), &fd, 1e-5, "dm scaled");
    }

    #[test]
    fn composite_ops_gradients_match_finite_differences() {
        // Exercises tanh, exp, abs, add_row, spatial_mean, concat, gather,
        // slice and l2 row norms in one graph.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::randn(&mut rng, &[2, 2, 2, 3], 1.0);
        let r0 = Tensor::randn(&mut rng, &[3], 1.0);

        let eval = |xv: &[f64], rv: &[f64]| {
            let t = Tape::new();
            let x = t.leaf(Tensor::new(&[2, 2, 2, 3], xv.to_vec()));
            let r = t.leaf(Tensor::new(&[3], rv.to_vec()));
            let pooled = t.spatial_mean(x).unwrap(); // [2, 3]
            let shifted = t.add_row(pooled, r).unwrap();
            let th = t.tanh(shifted);
            let gathered = t.gather_rows(th, &[1, 0, 1]).unwrap(); // [3, 3]
            let cat = t.concat_cols(&[gathered, gathered]).unwrap(); // [3, 6]
            let sl = t.slice_cols(cat, 2, 3).unwrap(); // [3, 3]
            let ab = t.abs(sl);
            let l2 = t.l2_row_norm_sum(ab).unwrap();
            let e = t.exp(t.scale(l2, 0.1));
            t.value(e).item()
        };

        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let r = tape.leaf(r0.clone());
        let pooled = tape.spatial_mean(x).unwrap();
        let shifted = tape.add_row(pooled, r).unwrap();
        let th = tape.tanh(shifted);
        let gathered = tape.gather_rows(th, &[1, 0, 1]).unwrap();
        let cat = tape.concat_cols(&[gathered, gathered]).unwrap();
        let sl = tape.slice_cols(cat, 2, 3).unwrap();
        let ab = tape.abs(sl);
        let l2 = tape.l2_row_norm_sum(ab).unwrap();
        let e = tape.exp(tape.scale(l2, 0.1));
        let grads = tape.backward(e).unwrap();

        let fd_x = finite_diff(|v| eval(v, r0.data()), x0.data(), 1e-6);
        let fd_r = finite_diff(|v| eval(x0.data(), v), r0.data(), 1e-6);
        assert_close(grads.wrt(&tape, x).data(), &fd_x, 1e-5, "dx composite");
        assert_close(grads.wrt(&tape, r).data(), &fd_r, 1e-5, "dr composite");
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(a), Err(TapeError::NonScalarRoot(_))));
    }

    #[test]
    fn reused_variable_accumulates_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(a, a).unwrap(); // y = a^2, dy/da = 2a = 6
        let grads = tape.backward(tape.sum_all(y)).unwrap();
        assert_eq!(grads.wrt(&tape, a).item(), 6.0);
    }
}
