//! Wengert tape: every operation appends a node holding its output and the
//! information needed to push gradients back to its inputs. `backward`
//! walks the nodes in reverse execution order, visiting each at most once.

use crate::error::{Result, TensorError};
use crate::kernels::{self, axis_split};
use crate::tensor::{numel, validate_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of every differentiable operation a [`Tape`] records, as they
/// appear in error messages.
pub const REGISTERED_OPS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_row",
    "mul_col",
    "affine",
    "one_minus",
    "sigmoid",
    "gelu",
    "exp",
    "log_floor",
    "layer_norm",
    "concat",
    "slice",
    "reshape",
    "sum",
    "mean",
    "max_over_axis",
    "softmax",
    "cross_entropy",
    "gather_rows",
    "gather",
];

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, row: Var, cols: usize },
    MulCol { a: Var, col: Var, cols: usize },
    Affine { a: Var, scale: f64 },
    Sigmoid { a: Var },
    Gelu { a: Var },
    Exp { a: Var },
    LogFloor { a: Var, eps: f64 },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        cols: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat { inputs: Vec<Var>, sizes: Vec<usize>, outer: usize, inner: usize },
    Slice { a: Var, start: usize, src_len: usize, outer: usize, inner: usize },
    Sum { a: Var },
    Mean { a: Var },
    MaxAxis { a: Var, argmax: Vec<usize> },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, vocab: usize },
    GatherRows { table: Var, ids: Vec<usize>, cols: usize },
    Gather { table: Var, index: Vec<usize> },
    Reshape { a: Var },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient, kept for leaves only.
    grad: Option<Vec<f64>>,
}

/// Records operations for reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    /// Drops every node recorded after the first `len`. Vars created after
    /// that point become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        check_finite(op_name, &data)?;
        let requires_grad = self.op_requires_grad(&op);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul { a, b, .. } | Op::MatMulNt { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                rg(a) || rg(b)
            }
            Op::AddRow { a, row, .. } => rg(a) || rg(row),
            Op::MulCol { a, col, .. } => rg(a) || rg(col),
            Op::LayerNorm { x, gamma, beta, .. } => {
                rg(x) || gamma.as_ref().is_some_and(rg) || beta.as_ref().is_some_and(rg)
            }
            Op::Concat { inputs, .. } => inputs.iter().any(rg),
            Op::CrossEntropy { logits, .. } => rg(logits),
            Op::GatherRows { table, .. } | Op::Gather { table, .. } => rg(table),
            Op::Transpose { a, .. }
            | Op::Affine { a, .. }
            | Op::Sigmoid { a }
            | Op::Gelu { a }
            | Op::Exp { a }
            | Op::LogFloor { a, .. }
            | Op::Slice { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::MaxAxis { a, .. }
            | Op::Softmax { a, .. }
            | Op::Reshape { a } => rg(a),
        }
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Copies `t` onto the tape. Gradients are tracked if `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        validate_shape(&shape, data.len())?;
        check_finite("constant", &data)?;
        Ok(self.push_leaf(shape, data, false))
    }

    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        validate_shape(&shape, data.len())?;
        check_finite("variable", &data)?;
        Ok(self.push_leaf(shape, data, true))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ── accessors ───────────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape nodes hold valid shapes")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = &self.node(v)?.shape;
        if s.len() != 2 {
            return Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = &self.node(a)?.shape;
        let sb = &self.node(b)?.shape;
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(sa.clone())
    }

    fn check_axis(&self, v: Var, axis: usize) -> Result<()> {
        let s = &self.node(v)?.shape;
        if axis >= s.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                shape: s.clone(),
            });
        }
        Ok(())
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n })
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul_nt", a)?;
        let (n, k2) = self.rank2("matmul_nt", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        self.push("matmul_nt", vec![m, n], out, Op::MatMulNt { a, b, m, k, n })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rank2("transpose", a)?;
        let src = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        self.push("transpose", vec![cols, rows], out, Op::Transpose { a, rows, cols })
    }

    // ── elementwise ────────────────────────────────────────────────────

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.same_shape(name, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(name, shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds `row: [n]` to every row of `a: [m×n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.rank2("add_row", a)?;
        if self.node(row)?.data.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: vec![m, n],
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        self.push("add_row", vec![m, n], out, Op::AddRow { a, row, cols: n })
    }

    /// Scales row `i` of `a: [m×n]` by `col[i]` (`col` holds `m` values).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.rank2("mul_col", a)?;
        if self.node(col)?.data.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "mul_col",
                lhs: vec![m, n],
                rhs: self.shape(col).to_vec(),
            });
        }
        let c = self.value(col);
        let out = self
            .value(a)
            .chunks(n)
            .zip(c)
            .flat_map(|(chunk, &s)| chunk.iter().map(move |x| x * s))
            .collect();
        self.push("mul_col", vec![m, n], out, Op::MulCol { a, col, cols: n })
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let shape = self.node(a)?.shape.clone();
        let out = self.value(a).iter().map(|x| scale * x + shift).collect();
        self.push("affine", shape, out, Op::Affine { a, scale })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    /// `1 - a`, computed exactly as `1.0 - x`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let shape = self.node(a)?.shape.clone();
        let out = self.value(a).iter().map(|x| 1.0 - x).collect();
        self.push("one_minus", shape, out, Op::Affine { a, scale: -1.0 })
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.node(a)?.shape.clone();
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(name, shape, out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, kernels::sigmoid, Op::Sigmoid { a })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, kernels::gelu, Op::Gelu { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp { a })
    }

    /// `ln(max(a, eps))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.map("log_floor", a, |x| x.max(eps).ln(), Op::LogFloor { a, eps })
    }

    // ── normalization ──────────────────────────────────────────────────

    /// Normalizes each row over the last axis, then applies the optional
    /// affine `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let shape = self.node(x)?.shape.clone();
        let cols = *shape.last().ok_or(TensorError::Rank {
            op: "layer_norm",
            expected: 1,
            shape: shape.clone(),
        })?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.node(p)?.data.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x);
        let rows = src.len() / cols;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let g = self.value(g);
            for chunk in out.chunks_mut(cols) {
                chunk.iter_mut().zip(g).for_each(|(o, s)| *o *= s);
            }
        }
        if let Some(b) = beta {
            let b = self.value(b);
            for chunk in out.chunks_mut(cols) {
                chunk.iter_mut().zip(b).for_each(|(o, s)| *o += s);
            }
        }
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            },
        )
    }

    // ── shape ──────────────────────────────────────────────────────────

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::DataLength { len: 0, shape: vec![] })?;
        self.check_axis(first, axis)?;
        let base = self.node(first)?.shape.clone();
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = &self.node(v)?.shape;
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&sizes) {
                let block = len * inner;
                out.extend_from_slice(&self.value(v)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                sizes,
                outer,
                inner,
            },
        )
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.node(a)?.shape.clone();
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                bound: shape[axis],
            });
        }
        let (outer, src_len, inner) = axis_split(&shape, axis);
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * src_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        self.push(
            "slice",
            new_shape,
            out,
            Op::Slice {
                a,
                start,
                src_len,
                outer,
                inner,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let data = self.value(a).to_vec();
        validate_shape(&shape, data.len())?;
        self.push("reshape", shape, data, Op::Reshape { a })
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean { a })
    }

    /// Maximum along `axis`, removing that axis. Gradient flows to the first
    /// maximal element on ties.
    pub fn max_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.node(a)?.shape.clone();
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let mut best = (o * len) * inner + j;
                for i in 1..len {
                    let idx = (o * len + i) * inner + j;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let mut new_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        self.push("max_over_axis", new_shape, out, Op::MaxAxis { a, argmax })
    }

    // ── attention / loss ───────────────────────────────────────────────

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(a, axis, None)
    }

    /// Max-stabilized softmax along `axis`. Entries whose `mask` value is
    /// `false` get probability exactly zero; every softmax group needs at
    /// least one unmasked entry.
    pub fn softmax_masked(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.node(a)?.shape.clone();
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a);
        if let Some(m) = mask {
            if m.len() != src.len() {
                return Err(TensorError::DataLength {
                    len: m.len(),
                    shape: shape.clone(),
                });
            }
        }
        let allowed = |idx: usize| mask.is_none_or(|m| m[idx]);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let mut max = f64::NEG_INFINITY;
                for i in 0..len {
                    if allowed(idx(i)) && src[idx(i)] > max {
                        max = src[idx(i)];
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::NonFinite { op: "softmax (fully masked)" });
                }
                let mut total = 0.0;
                for i in 0..len {
                    if allowed(idx(i)) {
                        let e = (src[idx(i)] - max).exp();
                        out[idx(i)] = e;
                        total += e;
                    }
                }
                for i in 0..len {
                    out[idx(i)] /= total;
                }
            }
        }
        self.push("softmax", shape, out, Op::Softmax { a, outer, len, inner })
    }

    /// Mean token negative log-likelihood of `targets` under row-wise softmax
    /// of `logits: [T×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = self.rank2("cross_entropy", logits)?;
        if targets.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![t, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&x| x >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                bound: v,
            });
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[target];
            for (p, x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / t as f64;
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                vocab: v,
            },
        )
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rank2("gather_rows", table)?;
        if ids.is_empty() {
            return Err(TensorError::EmptyDimension(vec![0, cols]));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        self.push(
            "gather_rows",
            vec![ids.len(), cols],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
                cols,
            },
        )
    }

    /// Flat gather: `out[i] = table.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, table: Var, index: &[usize], shape: Vec<usize>) -> Result<Var> {
        validate_shape(&shape, index.len())?;
        let src = self.value(table);
        let mut out = Vec::with_capacity(index.len());
        for &ix in index {
            if ix >= src.len() {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: ix,
                    bound: src.len(),
                });
            }
            out.push(src[ix]);
        }
        self.push(
            "gather",
            shape,
            out,
            Op::Gather {
                table,
                index: index.to_vec(),
            },
        )
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Propagates `d loss / d node` to every leaf that requires gradients.
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.node(loss)?.shape.clone();
        if numel(&shape) != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match node.grad.as_mut() {
                    Some(acc) => add_into(acc, &g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Option<usize> {
            if self.nodes[v.0].requires_grad {
                let len = self.nodes[v.0].data.len();
                if grads[v.0].is_none() {
                    grads[v.0] = Some(vec![0.0; len]);
                }
                Some(v.0)
            } else {
                None
            }
        };
        macro_rules! buf {
            ($v:expr) => {
                match acc($v, grads) {
                    Some(i) => grads[i].as_mut(),
                    None => None,
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(da) = buf!(*a) {
                    kernels::gemm_nt(g, self.value(*b), da, m, n, k);
                }
                if let Some(db) = buf!(*b) {
                    kernels::gemm_tn(self.value(*a), g, db, m, k, n);
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(da) = buf!(*a) {
                    kernels::gemm_nn(g, self.value(*b), da, m, n, k);
                }
                if let Some(db) = buf!(*b) {
                    kernels::gemm_tn(g, self.value(*a), db, m, n, k);
                }
            }
            Op::Transpose { a, rows, cols } => {
                if let Some(da) = buf!(*a) {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            da[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = buf!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = buf!(*b) {
                    add_into(db, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = buf!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = buf!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(da) = buf!(*a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * vb[i];
                    }
                }
                if let Some(db) = buf!(*b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * va[i];
                    }
                }
            }
            Op::AddRow { a, row, cols } => {
                if let Some(da) = buf!(*a) {
                    add_into(da, g);
                }
                if let Some(dr) = buf!(*row) {
                    for chunk in g.chunks(*cols) {
                        add_into(dr, chunk);
                    }
                }
            }
            Op::MulCol { a, col, cols } => {
                let (va, vc) = (self.value(*a), self.value(*col));
                if let Some(da) = buf!(*a) {
                    for (i, chunk) in g.chunks(*cols).enumerate() {
                        for (j, gv) in chunk.iter().enumerate() {
                            da[i * cols + j] += gv * vc[i];
                        }
                    }
                }
                if let Some(dc) = buf!(*col) {
                    for (i, chunk) in g.chunks(*cols).enumerate() {
                        let row = &va[i * cols..(i + 1) * cols];
                        dc[i] += chunk.iter().zip(row).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            Op::Affine { a, scale } => {
                if let Some(da) = buf!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += scale * x);
                }
            }
            Op::Sigmoid { a } => {
                let y = &node.data;
                if let Some(da) = buf!(*a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Gelu { a } => {
                let x = self.value(*a);
                if let Some(da) = buf!(*a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * kernels::gelu_grad(x[i]);
                    }
                }
            }
            Op::Exp { a } => {
                let y = &node.data;
                if let Some(da) = buf!(*a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i];
                    }
                }
            }
            Op::LogFloor { a, eps } => {
                let x = self.value(*a);
                if let Some(da) = buf!(*a) {
                    for i in 0..g.len() {
                        if x[i] > *eps {
                            da[i] += g[i] / x[i];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            } => {
                let cols = *cols;
                let n = cols as f64;
                if let Some(gm) = gamma {
                    if let Some(dg) = buf!(*gm) {
                        for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for j in 0..cols {
                                dg[j] += gr[j] * xr[j];
                            }
                        }
                    }
                }
                if let Some(bt) = beta {
                    if let Some(db) = buf!(*bt) {
                        for gr in g.chunks(cols) {
                            add_into(db, gr);
                        }
                    }
                }
                let gamma_vals = gamma.map(|v| self.value(v).to_vec());
                if let Some(dx) = buf!(*x) {
                    let mut dxhat = vec![0.0; cols];
                    for (r, gr) in g.chunks(cols).enumerate() {
                        for j in 0..cols {
                            dxhat[j] = gr[j] * gamma_vals.as_ref().map_or(1.0, |gv| gv[j]);
                        }
                        let xr = &xhat[r * cols..(r + 1) * cols];
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        for j in 0..cols {
                            dx[r * cols + j] += inv / n * (n * dxhat[j] - sum_d - xr[j] * sum_dx);
                        }
                    }
                }
            }
            Op::Concat {
                inputs,
                sizes,
                outer,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&v, &len) in inputs.iter().zip(sizes) {
                    if let Some(dv) = buf!(v) {
                        let block = len * inner;
                        for o in 0..*outer {
                            let src = o * total * inner + offset * inner;
                            add_into(&mut dv[o * block..(o + 1) * block], &g[src..src + block]);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice {
                a,
                start,
                src_len,
                outer,
                inner,
            } => {
                let len = g.len() / (outer * inner);
                if let Some(da) = buf!(*a) {
                    for o in 0..*outer {
                        let dst = (o * src_len + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut da[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = buf!(*a) {
                    add_into(da, g);
                }
            }
            Op::Sum { a } => {
                if let Some(da) = buf!(*a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(da) = buf!(*a) {
                    let s = g[0] / da.len() as f64;
                    da.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MaxAxis { a, argmax } => {
                if let Some(da) = buf!(*a) {
                    for (gv, &src) in g.iter().zip(argmax) {
                        da[src] += gv;
                    }
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                let y = &node.data;
                let (outer, len, inner) = (*outer, *len, *inner);
                if let Some(da) = buf!(*a) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..len {
                                da[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                vocab,
            } => {
                let t = targets.len() as f64;
                if let Some(dl) = buf!(*logits) {
                    let s = g[0] / t;
                    for (i, &target) in targets.iter().enumerate() {
                        for j in 0..*vocab {
                            let onehot = if j == target { 1.0 } else { 0.0 };
                            dl[i * vocab + j] += s * (probs[i * vocab + j] - onehot);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids, cols } => {
                if let Some(dt) = buf!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Gather { table, index } => {
                if let Some(dt) = buf!(*table) {
                    for (gv, &ix) in g.iter().zip(index) {
                        dt[ix] += gv;
                    }
                }
            }
        }
    }
}
