//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Each
//! node keeps its value, so [`Graph::backward`] can walk the tape in reverse
//! and accumulate exact vector-Jacobian products into the parents.
//!
//! The primitive set is deliberately small: affine maps and matrix
//! products, elementwise `exp`/`log`/`tanh`/`sigmoid`, row softmax (and its
//! log form), concatenation, slicing/gathering, reductions, and causal 1-D
//! convolution. Everything else in the crate is composed from these.
//!
//! Broadcasting is limited to two explicit forms: [`Graph::add_row`] adds a
//! `1×n` row to every row of an `m×n` matrix, and [`Graph::mul_col`] scales
//! every column of an `m×n` matrix by an `m×1` column.

use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulCol { a: Var, col: Var },
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, index: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    CausalConv {
        x: Var,
        w: Var,
        b: Option<Var>,
        kernel: usize,
        dilation: usize,
        cols: Vec<f64>,
    },
    SlidingWindows { x: Var, width: usize },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::MulCol { .. } => "mul_col",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::SoftmaxRows(..) => "softmax",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::CausalConv { .. } => "causal_conv",
            Op::SlidingWindows { .. } => "sliding_windows",
            Op::Reshape(..) => "reshape",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::AddRow { a, row } => vec![*a, *row],
            Op::MulCol { a, col } => vec![*a, *col],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumCols(a)
            | Op::Reshape(a) => vec![*a],
            Op::SliceRows { a, .. } | Op::SliceCols { a, .. } | Op::GatherRows { a, .. } => {
                vec![*a]
            }
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
            Op::CausalConv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::SlidingWindows { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. Create one per forward pass and drop it afterwards.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    failure: Option<(String, String)>,
}

/// Gradients of a scalar with respect to every differentiable leaf.
pub struct LeafGradients {
    grads: HashMap<Var, Tensor>,
}

impl LeafGradients {
    /// Gradient for `leaf`, or `None` when the loss does not depend on it.
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub(crate) fn take(&mut self, leaf: Var) -> Option<Tensor> {
        self.grads.remove(&leaf)
    }
}

/// `c = op(a)·op(b) + beta·c` for row-major operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked against (m, k, n) above and the
    // strides address exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn col_sums(data: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
}

fn softmax_row(input: &[f64], out: &mut [f64]) {
    let max = input.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(input) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row(input: &[f64], out: &mut [f64]) {
    let max = input.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + input.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(input) {
        *o = v - lse;
    }
}

fn im2col(x: &[f64], t_len: usize, c_in: usize, kernel: usize, dilation: usize) -> Vec<f64> {
    let width = kernel * c_in;
    let mut cols = vec![0.0; t_len * width];
    for t in 0..t_len {
        for j in 0..kernel {
            let back = (kernel - 1 - j) * dilation;
            if back > t {
                continue;
            }
            let src = (t - back) * c_in;
            let dst = t * width + j * c_in;
            cols[dst..dst + c_in].copy_from_slice(&x[src..src + c_in]);
        }
    }
    cols
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        if self.failure.is_none() && !value.is_finite() {
            let bad = value.data().iter().find(|v| !v.is_finite()).copied();
            self.failure = Some((
                op.name().to_string(),
                format!("produced {bad:?} in output of shape {:?}", value.shape()),
            ));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        let value = if value.shape().len() == 2 {
            value
        } else {
            let (r, c) = dims(&value);
            Tensor::from_parts(vec![r, c], value.into_data())
        };
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    /// First non-finite value seen during the forward pass, as an error
    /// naming the primitive that produced it.
    pub fn check_finite(&self) -> Result<()> {
        match &self.failure {
            None => Ok(()),
            Some((primitive, detail)) => Err(Error::Numeric {
                primitive: primitive.clone(),
                detail: detail.clone(),
            }),
        }
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ------------------------------------------------------------------
    // primitives

    /// `x·w + b`, with `b` a `1×out` row broadcast over the rows of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (m, k) = self.shape(x);
        let (k2, n) = self.shape(w);
        assert_eq!(k, k2, "affine: input has {k} columns, weight expects {k2}");
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            assert_eq!(self.shape(b), (1, n), "affine: bias must be 1×{n}");
            let bias = self.data(b);
            for row in out.chunks_mut(n.max(1)) {
                row.copy_from_slice(bias);
            }
        }
        gemm(m, k, n, self.data(x), false, self.data(w), false, &mut out, 1.0);
        self.push(Tensor::from_parts(vec![m, n], out), Op::Affine { x, w, b })
    }

    /// `a·b`, or `a·bᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (m, k) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul: inner dimensions {k} and {k2} differ");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), trans_b, &mut out, 0.0);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, trans_b },
        )
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{}: operand shapes differ",
            op.name()
        );
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row: row must be 1×{n}");
        let r = self.data(row);
        let mut data = self.data(a).to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (v, b) in chunk.iter_mut().zip(r) {
                *v += b;
            }
        }
        self.push(Tensor::from_parts(vec![m, n], data), Op::AddRow { a, row })
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(col), (m, 1), "mul_col: column must be {m}×1");
        let c = self.data(col);
        let mut data = self.data(a).to_vec();
        for (r, chunk) in data.chunks_mut(n.max(1)).enumerate().take(m) {
            chunk.iter_mut().for_each(|v| *v *= c[r]);
        }
        self.push(Tensor::from_parts(vec![m, n], data), Op::MulCol { a, col })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        self.push(value, op)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |v| v * factor, Op::Scale(a, factor))
    }

    /// `a + c` for a constant scalar `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v + c, Op::Offset(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; m * n];
        if n > 0 {
            for (src, dst) in self.data(a).chunks(n).zip(out.chunks_mut(n)) {
                softmax_row(src, dst);
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; m * n];
        if n > 0 {
            for (src, dst) in self.data(a).chunks(n).zip(out.chunks_mut(n)) {
                log_softmax_row(src, dst);
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::LogSoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.shape(p);
                assert_eq!(r, m, "concat_cols: row counts differ");
                c
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..m {
                out[r * n + off..r * n + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let n = self.shape(parts[0]).1;
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(self.shape(p).1, n, "concat_rows: column counts differ");
            out.extend_from_slice(self.data(p));
        }
        let m = out.len() / n.max(1);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start <= end && end <= m, "slice_rows {start}..{end} of {m}");
        let data = self.data(a)[start * n..end * n].to_vec();
        self.push(
            Tensor::from_parts(vec![end - start, n], data),
            Op::SliceRows { a, start },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start <= end && end <= n, "slice_cols {start}..{end} of {n}");
        let w = end - start;
        let src = self.data(a);
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        self.push(
            Tensor::from_parts(vec![m, w], data),
            Op::SliceCols { a, start },
        )
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let (m, n) = self.shape(a);
        let src = self.data(a);
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            assert!(i < m, "gather_rows: index {i} out of {m}");
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        self.push(
            Tensor::from_parts(vec![index.len(), n], data),
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        assert!(!d.is_empty(), "mean of empty tensor");
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Per-row sum: `m×n → m×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data: Vec<f64> = if n == 0 {
            vec![0.0; m]
        } else {
            self.data(a).chunks(n).map(|r| r.iter().sum()).collect()
        };
        self.push(Tensor::from_parts(vec![m, 1], data), Op::SumCols(a))
    }

    /// Causal 1-D convolution along rows.
    ///
    /// `x` is `T×C_in`; `w` is `(kernel·C_in)×C_out` where row block `j`
    /// multiplies `x[t − (kernel−1−j)·dilation]`. Positions before the first
    /// row read zeros, so output row `t` depends only on rows `≤ t`.
    pub fn causal_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        kernel: usize,
        dilation: usize,
    ) -> Var {
        assert!(kernel >= 1 && dilation >= 1, "causal_conv: kernel and dilation must be ≥ 1");
        let (t_len, c_in) = self.shape(x);
        let (wr, c_out) = self.shape(w);
        assert_eq!(
            wr,
            kernel * c_in,
            "causal_conv: weight rows {wr} != kernel {kernel} × channels {c_in}"
        );
        let cols = im2col(self.data(x), t_len, c_in, kernel, dilation);
        let mut out = vec![0.0; t_len * c_out];
        if let Some(b) = b {
            assert_eq!(self.shape(b), (1, c_out), "causal_conv: bias must be 1×{c_out}");
            let bias = self.data(b);
            for row in out.chunks_mut(c_out.max(1)) {
                row.copy_from_slice(bias);
            }
        }
        gemm(t_len, kernel * c_in, c_out, &cols, false, self.data(w), false, &mut out, 1.0);
        self.push(
            Tensor::from_parts(vec![t_len, c_out], out),
            Op::CausalConv {
                x,
                w,
                b,
                kernel,
                dilation,
                cols,
            },
        )
    }

    /// Trailing windows per channel: `T×C → (T·C)×width`.
    ///
    /// Output row `t·C + c` holds `x[t−width+1 ..= t, c]`, left-padded with
    /// zeros where the window starts before row 0.
    pub fn sliding_windows(&mut self, x: Var, width: usize) -> Var {
        assert!(width >= 1, "sliding_windows: width must be ≥ 1");
        let (t_len, c) = self.shape(x);
        let src = self.data(x);
        let mut out = vec![0.0; t_len * c * width];
        for t in 0..t_len {
            for j in 0..width {
                let back = width - 1 - j;
                if back > t {
                    continue;
                }
                let s = t - back;
                for ch in 0..c {
                    out[(t * c + ch) * width + j] = src[s * c + ch];
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![t_len * c, width], out),
            Op::SlidingWindows { x, width },
        )
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(m * n, rows * cols, "reshape {m}×{n} into {rows}×{cols}");
        let data = self.data(a).to_vec();
        self.push(Tensor::from_parts(vec![rows, cols], data), Op::Reshape(a))
    }

    // ------------------------------------------------------------------
    // composites used throughout

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `1 − a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.offset(n, 1.0)
    }

    // ------------------------------------------------------------------

    /// Reverse pass from a `1×1` loss. Returns gradients for every leaf
    /// created with [`Graph::variable`] that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<LeafGradients> {
        self.check_finite()?;
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    primitive: node.op.name().to_string(),
                    detail: "non-finite gradient".into(),
                });
            }
            self.propagate(i, g, &mut grads, &mut leaves);
        }
        Ok(LeafGradients { grads: leaves })
    }

    fn propagate(
        &self,
        i: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaves: &mut HashMap<Var, Tensor>,
    ) {
        let node = &self.nodes[i];
        let out = &node.value;
        let (m, n) = dims(out);

        // Accumulation buffer for parent `p`, allocated on first use.
        macro_rules! buf {
            ($p:expr) => {{
                let p: Var = $p;
                let len = self.nodes[p.0].value.len();
                grads[p.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        let wants = |p: Var| self.nodes[p.0].needs_grad;

        match &node.op {
            Op::Leaf => {
                leaves.insert(Var(i), Tensor::from_parts(out.shape().to_vec(), g));
            }
            Op::Affine { x, w, b } => {
                let (_, k) = self.shape(*x);
                if wants(*x) {
                    let wd = self.data(*w);
                    gemm(m, n, k, &g, false, wd, true, buf!(*x), 1.0);
                }
                if wants(*w) {
                    let xd = self.data(*x);
                    gemm(k, m, n, xd, true, &g, false, buf!(*w), 1.0);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        col_sums(&g, m, n, buf!(*b));
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (_, k) = self.shape(*a);
                if wants(*a) {
                    // dA = dC · op(B)ᵀ
                    let bd = self.data(*b);
                    gemm(m, n, k, &g, false, bd, !trans_b, buf!(*a), 1.0);
                }
                if wants(*b) {
                    let ad = self.data(*a);
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, &g, true, ad, false, buf!(*b), 1.0);
                    } else {
                        gemm(k, m, n, ad, true, &g, false, buf!(*b), 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if wants(p) {
                        buf!(p).iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    buf!(*a).iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                }
                if wants(*b) {
                    buf!(*b).iter_mut().zip(&g).for_each(|(d, v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bd = self.data(*b);
                    let buf = buf!(*a);
                    for ((d, gv), bv) in buf.iter_mut().zip(&g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if wants(*b) {
                    let ad = self.data(*a);
                    let buf = buf!(*b);
                    for ((d, gv), av) in buf.iter_mut().zip(&g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddRow { a, row } => {
                if wants(*a) {
                    buf!(*a).iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                }
                if wants(*row) {
                    col_sums(&g, m, n, buf!(*row));
                }
            }
            Op::MulCol { a, col } => {
                if wants(*a) {
                    let c = self.data(*col);
                    let buf = buf!(*a);
                    for r in 0..m {
                        for j in 0..n {
                            buf[r * n + j] += g[r * n + j] * c[r];
                        }
                    }
                }
                if wants(*col) {
                    let ad = self.data(*a);
                    let buf = buf!(*col);
                    for r in 0..m {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[r * n + j] * ad[r * n + j];
                        }
                        buf[r] += s;
                    }
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    buf!(*a).iter_mut().zip(&g).for_each(|(d, v)| *d += v * f);
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if wants(*a) {
                    buf!(*a).iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    let y = out.data();
                    let buf = buf!(*a);
                    for ((d, gv), yv) in buf.iter_mut().zip(&g).zip(y) {
                        *d += gv * yv;
                    }
                }
            }
            Op::Log(a) => {
                if wants(*a) {
                    let x = self.data(*a);
                    let buf = buf!(*a);
                    for ((d, gv), xv) in buf.iter_mut().zip(&g).zip(x) {
                        *d += gv / xv;
                    }
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let y = out.data();
                    let buf = buf!(*a);
                    for ((d, gv), yv) in buf.iter_mut().zip(&g).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let y = out.data();
                    let buf = buf!(*a);
                    for ((d, gv), yv) in buf.iter_mut().zip(&g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) && n > 0 {
                    let y = out.data();
                    let buf = buf!(*a);
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            buf[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if wants(*a) && n > 0 {
                    let y = out.data();
                    let buf = buf!(*a);
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let total: f64 = g[row.clone()].iter().sum();
                        for j in row {
                            buf[j] += g[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if wants(p) {
                        let buf = buf!(p);
                        for r in 0..m {
                            for j in 0..w {
                                buf[r * w + j] += g[r * n + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if wants(p) {
                        buf!(p)
                            .iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(d, v)| *d += v);
                    }
                    off += len;
                }
            }
            Op::SliceRows { a, start } => {
                if wants(*a) {
                    let buf = buf!(*a);
                    buf[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(d, v)| *d += v);
                }
            }
            Op::SliceCols { a, start } => {
                if wants(*a) {
                    let pn = self.shape(*a).1;
                    let buf = buf!(*a);
                    for r in 0..m {
                        for j in 0..n {
                            buf[r * pn + start + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::GatherRows { a, index } => {
                if wants(*a) {
                    let buf = buf!(*a);
                    for (r, &src) in index.iter().enumerate() {
                        for j in 0..n {
                            buf[src * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if wants(*a) {
                    buf!(*a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if wants(*a) {
                    let buf = buf!(*a);
                    let s = g[0] / buf.len() as f64;
                    buf.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumCols(a) => {
                if wants(*a) {
                    let pn = self.shape(*a).1;
                    let buf = buf!(*a);
                    for r in 0..m {
                        for j in 0..pn {
                            buf[r * pn + j] += g[r];
                        }
                    }
                }
            }
            Op::CausalConv {
                x,
                w,
                b,
                kernel,
                dilation,
                cols,
            } => {
                let (t_len, c_in) = self.shape(*x);
                let width = kernel * c_in;
                if wants(*w) {
                    gemm(width, t_len, n, cols, true, &g, false, buf!(*w), 1.0);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        col_sums(&g, m, n, buf!(*b));
                    }
                }
                if wants(*x) {
                    let mut dcols = vec![0.0; t_len * width];
                    gemm(t_len, n, width, &g, false, self.data(*w), true, &mut dcols, 0.0);
                    let buf = buf!(*x);
                    for t in 0..t_len {
                        for j in 0..*kernel {
                            let back = (kernel - 1 - j) * dilation;
                            if back > t {
                                continue;
                            }
                            let dst = (t - back) * c_in;
                            let src = t * width + j * c_in;
                            for ch in 0..c_in {
                                buf[dst + ch] += dcols[src + ch];
                            }
                        }
                    }
                }
            }
            Op::SlidingWindows { x, width } => {
                if wants(*x) {
                    let (t_len, c) = self.shape(*x);
                    let buf = buf!(*x);
                    for t in 0..t_len {
                        for j in 0..*width {
                            let back = width - 1 - j;
                            if back > t {
                                continue;
                            }
                            let s = t - back;
                            for ch in 0..c {
                                buf[s * c + ch] += g[(t * c + ch) * width + j];
                            }
                        }
                    }
                }
            }
        }
    }
}
