//! Reverse-mode automatic differentiation on a flat tape of dense tensors.
//!
//! A [`Graph`] owns every tensor created during one forward pass. Operations
//! record their inputs so [`Graph::backward`] can walk the tape in reverse and
//! accumulate gradients into every leaf created with `param`. A graph is
//! confined to a single thread; independent graphs may run concurrently.

use thiserror::Error;

/// Floating point element type for the whole engine. Training runs in `f32`,
/// verification instantiates the same code with `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Layer-norm stabilizer on the normalized axis.
pub const LN_EPS: f64 = 1e-5;

/// Large finite value used to mask attention scores before softmax.
const MASK_NEG: f64 = -1e30;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a 2-d tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("row {row}: index {id} out of range for {limit} rows/classes")]
    IndexOutOfRange { row: usize, id: usize, limit: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called twice on the same tape")]
    BackwardTwice,
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to one tensor on a [`Graph`]'s tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    AddBias { x: TensorId, bias: TensorId },
    MulRows { x: TensorId, scale: TensorId },
    Scale { x: TensorId, factor: S },
    Gelu { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId },
    GatherRows { table: TensorId, indices: Vec<usize> },
    Reshape { x: TensorId },
    Transpose { x: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    SliceRows { x: TensorId, start: usize },
    SliceCols { x: TensorId, start: usize },
    SoftmaxRows { x: TensorId },
    CausalMask { x: TensorId },
    Rope { x: TensorId, positions: Vec<i64>, base: f64 },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    XentWSum { logits: TensorId, targets: Vec<u32>, weights: Vec<S> },
}

/// Tape of tensors in topological order. Inputs of an operation always
/// precede it; backward traverses in exact reverse.
pub struct Graph<S: Scalar> {
    datas: Vec<Vec<S>>,
    shapes: Vec<Vec<usize>>,
    ops: Vec<Op<S>>,
    wants_grad: Vec<bool>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
}

/// C[m x n] = A[m x k] * B[k x n], row-major. The k-outer loop keeps the
/// inner updates independent so the compiler can vectorize them.
pub fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for row in out.iter_mut() {
        *row = S::zero();
    }
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += aip * b_row[j];
            }
        }
    }
}

fn transposed<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut t = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let x = x.to_f64();
    let inner = GELU_C * (x + GELU_K * x * x * x);
    S::from_f64(0.5 * x * (1.0 + inner.tanh()))
}

fn gelu_bwd(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_K * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            datas: Vec::new(),
            shapes: Vec::new(),
            ops: Vec::new(),
            wants_grad: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, data: Vec<S>, shape: Vec<usize>, op: Op<S>, wants: bool) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        self.datas.push(data);
        self.shapes.push(shape);
        self.ops.push(op);
        self.wants_grad.push(wants);
        self.grads.push(None);
        TensorId(self.datas.len() - 1)
    }

    fn wants(&self, id: TensorId) -> bool {
        self.wants_grad[id.0]
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&mut self, data: Vec<S>, shape: Vec<usize>) -> TensorId {
        assert_eq!(data.len(), numel(&shape), "param data/shape mismatch");
        self.push(data, shape, Op::Leaf, true)
    }

    /// Leaf treated as a constant; no gradient is accumulated for it.
    pub fn constant(&mut self, data: Vec<S>, shape: Vec<usize>) -> TensorId {
        assert_eq!(data.len(), numel(&shape), "constant data/shape mismatch");
        self.push(data, shape, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &[S] {
        &self.datas[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn scalar_value(&self, id: TensorId) -> S {
        debug_assert_eq!(self.datas[id.0].len(), 1);
        self.datas[id.0][0]
    }

    /// Gradient buffer for `id`, populated after [`Graph::backward`].
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    pub fn len(&self) -> usize {
        self.datas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datas.is_empty()
    }

    fn rows_cols(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.shapes[id.0];
        if s.len() != 2 {
            return Err(TensorError::NotMatrix {
                op,
                shape: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ----- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shapes[a.0].clone(),
                right: self.shapes[b.0].clone(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nn(&self.datas[a.0], &self.datas[b.0], m, ka, n, &mut out);
        let wants = self.wants(a) || self.wants(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b }, wants))
    }

    fn zip_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        op_name: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<TensorId> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: self.shapes[a.0].clone(),
                right: self.shapes[b.0].clone(),
            });
        }
        let data: Vec<S> = self.datas[a.0]
            .iter()
            .zip(&self.datas[b.0])
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shapes[a.0].clone();
        let wants = self.wants(a) || self.wants(b);
        Ok(self.push(data, shape, op, wants))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_same_shape(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_same_shape(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// `[r x c] + [c]`, the bias broadcast over rows.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = self.rows_cols(x, "add_bias")?;
        if self.shapes[bias.0] != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.shapes[x.0].clone(),
                right: self.shapes[bias.0].clone(),
            });
        }
        let mut data = self.datas[x.0].clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.datas[bias.0][j];
            }
        }
        let wants = self.wants(x) || self.wants(bias);
        Ok(self.push(data, vec![r, c], Op::AddBias { x, bias }, wants))
    }

    /// `[r x c] * [r]`, each row scaled by its own factor (row masks).
    pub fn mul_rows(&mut self, x: TensorId, scale: TensorId) -> Result<TensorId> {
        let (r, c) = self.rows_cols(x, "mul_rows")?;
        if self.shapes[scale.0] != [r] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_rows",
                left: self.shapes[x.0].clone(),
                right: self.shapes[scale.0].clone(),
            });
        }
        let mut data = self.datas[x.0].clone();
        for i in 0..r {
            let s = self.datas[scale.0][i];
            for j in 0..c {
                data[i * c + j] *= s;
            }
        }
        let wants = self.wants(x) || self.wants(scale);
        Ok(self.push(data, vec![r, c], Op::MulRows { x, scale }, wants))
    }

    /// Multiply by a compile-time constant (not a tape tensor).
    pub fn scale(&mut self, x: TensorId, factor: S) -> Result<TensorId> {
        let data: Vec<S> = self.datas[x.0].iter().map(|&v| v * factor).collect();
        let shape = self.shapes[x.0].clone();
        let wants = self.wants(x);
        Ok(self.push(data, shape, Op::Scale { x, factor }, wants))
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<S> = self.datas[x.0].iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.shapes[x.0].clone();
        let wants = self.wants(x);
        Ok(self.push(data, shape, Op::Gelu { x }, wants))
    }

    /// Normalize the last axis, then apply learnable scale and shift.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let shape = self.shapes[x.0].clone();
        let d = *shape.last().ok_or(TensorError::NotMatrix {
            op: "layer_norm",
            shape: shape.clone(),
        })?;
        if self.shapes[gamma.0] != [d] || self.shapes[beta.0] != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: self.shapes[gamma.0].clone(),
            });
        }
        let src = &self.datas[x.0];
        let g = &self.datas[gamma.0];
        let b = &self.datas[beta.0];
        let rows = src.len() / d;
        let mut data = vec![S::zero(); src.len()];
        let dn = S::from_f64(d as f64);
        let eps = S::from_f64(LN_EPS);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<S>()
                / dn;
            let inv_std = (var + eps).sqrt().recip();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let wants = self.wants(x) || self.wants(gamma) || self.wants(beta);
        Ok(self.push(
            data,
            self.shapes[x.0].clone(),
            Op::LayerNorm { x, gamma, beta },
            wants,
        ))
    }

    /// Row gather: `out[i] = table[indices[i]]`. Serves as embedding lookup
    /// and as row-repeat; backward scatter-adds into the table.
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols(table, "gather_rows")?;
        let mut data = vec![S::zero(); indices.len() * cols];
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= rows {
                return Err(TensorError::IndexOutOfRange {
                    row: i,
                    id: idx,
                    limit: rows,
                });
            }
            data[i * cols..(i + 1) * cols]
                .copy_from_slice(&self.datas[table.0][idx * cols..(idx + 1) * cols]);
        }
        let wants = self.wants(table);
        Ok(self.push(
            data,
            vec![indices.len(), cols],
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            wants,
        ))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.datas[x.0].len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shapes[x.0].clone(),
                right: shape,
            });
        }
        let data = self.datas[x.0].clone();
        let wants = self.wants(x);
        Ok(self.push(data, shape, Op::Reshape { x }, wants))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.rows_cols(x, "transpose")?;
        let data = transposed(&self.datas[x.0], r, c);
        let wants = self.wants(x);
        Ok(self.push(data, vec![c, r], Op::Transpose { x }, wants))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_rows of zero parts".into()));
        }
        let (_, c) = self.rows_cols(parts[0], "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut wants = false;
        for &p in parts {
            let (r, pc) = self.rows_cols(p, "concat_rows")?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, c],
                    right: self.shapes[p.0].clone(),
                });
            }
            data.extend_from_slice(&self.datas[p.0]);
            rows += r;
            wants |= self.wants(p);
        }
        Ok(self.push(
            data,
            vec![rows, c],
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            wants,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_cols of zero parts".into()));
        }
        let (r, _) = self.rows_cols(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut wants = false;
        for &p in parts {
            let (pr, pc) = self.rows_cols(p, "concat_cols")?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shapes[parts[0].0].clone(),
                    right: self.shapes[p.0].clone(),
                });
            }
            widths.push(pc);
            total += pc;
            wants |= self.wants(p);
        }
        let mut data = vec![S::zero(); r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.datas[p.0][i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(
            data,
            vec![r, total],
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            wants,
        ))
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.rows_cols(x, "slice_rows")?;
        if start + len > r {
            return Err(TensorError::IndexOutOfRange {
                row: start,
                id: start + len,
                limit: r,
            });
        }
        let data = self.datas[x.0][start * c..(start + len) * c].to_vec();
        let wants = self.wants(x);
        Ok(self.push(data, vec![len, c], Op::SliceRows { x, start }, wants))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.rows_cols(x, "slice_cols")?;
        if start + len > c {
            return Err(TensorError::IndexOutOfRange {
                row: start,
                id: start + len,
                limit: c,
            });
        }
        let mut data = vec![S::zero(); r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.datas[x.0][i * c + start..i * c + start + len]);
        }
        let wants = self.wants(x);
        Ok(self.push(data, vec![r, len], Op::SliceCols { x, start }, wants))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.rows_cols(x, "softmax_rows")?;
        let mut data = self.datas[x.0].clone();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let wants = self.wants(x);
        Ok(self.push(data, vec![r, c], Op::SoftmaxRows { x }, wants))
    }

    /// Adds a large negative constant to strictly-upper-triangle entries so a
    /// following softmax assigns them zero probability.
    pub fn causal_mask(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.rows_cols(x, "causal_mask")?;
        if r != c {
            return Err(TensorError::ShapeMismatch {
                op: "causal_mask",
                left: vec![r, c],
                right: vec![r, r],
            });
        }
        let mut data = self.datas[x.0].clone();
        let neg = S::from_f64(MASK_NEG);
        for i in 0..r {
            for j in (i + 1)..c {
                data[i * c + j] += neg;
            }
        }
        let wants = self.wants(x);
        Ok(self.push(data, vec![r, c], Op::CausalMask { x }, wants))
    }

    /// Rotary position encoding on a `[n x d_head]` block. Row `i` is rotated
    /// pairwise by angles `positions[i] * base^(-2k/d_head)`.
    pub fn rope(&mut self, x: TensorId, positions: &[i64], base: f64) -> Result<TensorId> {
        let (n, dh) = self.rows_cols(x, "rope")?;
        if dh % 2 != 0 {
            return Err(TensorError::Contract(format!(
                "rope requires an even head dim, got {dh}"
            )));
        }
        if positions.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "rope",
                left: vec![n, dh],
                right: vec![positions.len()],
            });
        }
        let mut data = self.datas[x.0].clone();
        rope_apply(&mut data, n, dh, positions, base, false);
        let wants = self.wants(x);
        Ok(self.push(
            data,
            vec![n, dh],
            Op::Rope {
                x,
                positions: positions.to_vec(),
                base,
            },
            wants,
        ))
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: S = self.datas[x.0].iter().copied().sum();
        let wants = self.wants(x);
        Ok(self.push(vec![s], vec![1], Op::SumAll { x }, wants))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.datas[x.0].len();
        let s: S = self.datas[x.0].iter().copied().sum();
        let wants = self.wants(x);
        Ok(self.push(
            vec![s / S::from_f64(n as f64)],
            vec![1],
            Op::MeanAll { x },
            wants,
        ))
    }

    /// Weighted sum of per-row categorical negative log-likelihoods:
    /// `sum_r weights[r] * (-ln softmax(logits[r])[targets[r]])`.
    ///
    /// Weights are fixed constants, so arbitrary means are expressed by
    /// normalizing the weights up front.
    pub fn xent_wsum(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        weights: &[S],
    ) -> Result<TensorId> {
        let (r, c) = self.rows_cols(logits, "xent_wsum")?;
        if targets.len() != r || weights.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "xent_wsum",
                left: vec![r, c],
                right: vec![targets.len(), weights.len()],
            });
        }
        for (row, &t) in targets.iter().enumerate() {
            if t as usize >= c {
                return Err(TensorError::IndexOutOfRange {
                    row,
                    id: t as usize,
                    limit: c,
                });
            }
        }
        let mut total = S::zero();
        for i in 0..r {
            if weights[i] == S::zero() {
                continue;
            }
            let row = &self.datas[logits.0][i * c..(i + 1) * c];
            total += weights[i] * row_nll(row, targets[i] as usize);
        }
        let wants = self.wants(logits);
        Ok(self.push(
            vec![total],
            vec![1],
            Op::XentWSum {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            wants,
        ))
    }

    /// Mean over rows of `-ln softmax(logits)[target]`, in nats. With
    /// `row_weights`, a weighted mean over rows; an all-zero weighting is the
    /// empty mean, defined as 0.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        row_weights: Option<&[S]>,
    ) -> Result<TensorId> {
        let (r, _) = self.rows_cols(logits, "softmax_cross_entropy")?;
        let weights: Vec<S> = match row_weights {
            None => vec![S::one() / S::from_f64(r as f64); r],
            Some(w) => {
                if w.len() != r {
                    return Err(TensorError::ShapeMismatch {
                        op: "softmax_cross_entropy",
                        left: vec![r],
                        right: vec![w.len()],
                    });
                }
                let total: S = w.iter().copied().sum();
                if total == S::zero() {
                    vec![S::zero(); r]
                } else {
                    w.iter().map(|&v| v / total).collect()
                }
            }
        };
        self.xent_wsum(logits, targets, &weights)
    }

    // ----- backward -----------------------------------------------------

    /// Accumulates gradients for every `param` leaf reachable from `loss`.
    /// Gradients from shared subexpressions sum. Errors if the loss is not
    /// scalar or if called twice on the same tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.datas[loss.0].len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shapes[loss.0].clone(),
            });
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if !self.wants_grad[i] {
                continue;
            }
            let Some(g) = std::mem::take(&mut self.grads[i]) else {
                continue;
            };
            let op = self.ops[i].clone();
            self.propagate(&op, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, update: impl FnOnce(&mut [S])) {
        if !self.wants_grad[id.0] {
            return;
        }
        if self.grads[id.0].is_none() {
            self.grads[id.0] = Some(vec![S::zero(); self.datas[id.0].len()]);
        }
        update(self.grads[id.0].as_mut().unwrap());
    }

    fn propagate(&mut self, op: &Op<S>, out: usize, g: &[S]) {
        match op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (m, k) = (self.shapes[a.0][0], self.shapes[a.0][1]);
                let n = self.shapes[b.0][1];
                if self.wants(*a) {
                    // dA = G * B^T
                    let bt = transposed(&self.datas[b.0], k, n);
                    let mut da = vec![S::zero(); m * k];
                    matmul_nn(g, &bt, m, n, k, &mut da);
                    self.accumulate(*a, |dst| add_assign(dst, &da));
                }
                if self.wants(*b) {
                    // dB = A^T * G
                    let at = transposed(&self.datas[a.0], m, k);
                    let mut db = vec![S::zero(); k * n];
                    matmul_nn(&at, g, k, m, n, &mut db);
                    self.accumulate(*b, |dst| add_assign(dst, &db));
                }
            }

            Op::Add { a, b } => {
                self.accumulate(*a, |dst| add_assign(dst, g));
                self.accumulate(*b, |dst| add_assign(dst, g));
            }

            Op::Sub { a, b } => {
                self.accumulate(*a, |dst| add_assign(dst, g));
                self.accumulate(*b, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }

            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let da: Vec<S> = g
                        .iter()
                        .zip(&self.datas[b.0])
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.accumulate(*a, |dst| add_assign(dst, &da));
                }
                if self.wants(*b) {
                    let db: Vec<S> = g
                        .iter()
                        .zip(&self.datas[a.0])
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.accumulate(*b, |dst| add_assign(dst, &db));
                }
            }

            Op::AddBias { x, bias } => {
                self.accumulate(*x, |dst| add_assign(dst, g));
                if self.wants(*bias) {
                    let c = self.shapes[bias.0][0];
                    let mut db = vec![S::zero(); c];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % c] += gv;
                    }
                    self.accumulate(*bias, |dst| add_assign(dst, &db));
                }
            }

            Op::MulRows { x, scale } => {
                let (r, c) = (self.shapes[out][0], self.shapes[out][1]);
                if self.wants(*x) {
                    let mut dx = g.to_vec();
                    for i in 0..r {
                        let s = self.datas[scale.0][i];
                        for j in 0..c {
                            dx[i * c + j] *= s;
                        }
                    }
                    self.accumulate(*x, |dst| add_assign(dst, &dx));
                }
                if self.wants(*scale) {
                    let mut ds = vec![S::zero(); r];
                    for i in 0..r {
                        for j in 0..c {
                            ds[i] += g[i * c + j] * self.datas[x.0][i * c + j];
                        }
                    }
                    self.accumulate(*scale, |dst| add_assign(dst, &ds));
                }
            }

            Op::Scale { x, factor } => {
                let f = *factor;
                let dx: Vec<S> = g.iter().map(|&gv| gv * f).collect();
                self.accumulate(*x, |dst| add_assign(dst, &dx));
            }

            Op::Gelu { x } => {
                let dx: Vec<S> = g
                    .iter()
                    .zip(&self.datas[x.0])
                    .map(|(&gv, &xv)| gv * S::from_f64(gelu_bwd(xv.to_f64())))
                    .collect();
                self.accumulate(*x, |dst| add_assign(dst, &dx));
            }

            Op::LayerNorm { x, gamma, beta } => {
                let d = *self.shapes[x.0].last().unwrap();
                let rows = self.datas[x.0].len() / d;
                let eps = S::from_f64(LN_EPS);
                let dn = S::from_f64(d as f64);
                let mut dx = vec![S::zero(); self.datas[x.0].len()];
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                for r in 0..rows {
                    let xr = &self.datas[x.0][r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = xr.iter().copied().sum::<S>() / dn;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
                    let inv_std = (var + eps).sqrt().recip();
                    let xhat: Vec<S> = xr.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![S::zero(); d];
                    for j in 0..d {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * self.datas[gamma.0][j];
                    }
                    let sum_dxhat: S = dxhat.iter().copied().sum();
                    let sum_dxhat_xhat: S =
                        dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = inv_std / dn
                            * (dn * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(*x, |dst| add_assign(dst, &dx));
                self.accumulate(*gamma, |dst| add_assign(dst, &dgamma));
                self.accumulate(*beta, |dst| add_assign(dst, &dbeta));
            }

            Op::GatherRows { table, indices } => {
                if self.wants(*table) {
                    let c = self.shapes[table.0][1];
                    let mut dt = vec![S::zero(); self.datas[table.0].len()];
                    for (i, &idx) in indices.iter().enumerate() {
                        for j in 0..c {
                            dt[idx * c + j] += g[i * c + j];
                        }
                    }
                    self.accumulate(*table, |dst| add_assign(dst, &dt));
                }
            }

            Op::Reshape { x } => {
                self.accumulate(*x, |dst| add_assign(dst, g));
            }

            Op::Transpose { x } => {
                let (r, c) = (self.shapes[out][0], self.shapes[out][1]);
                let dx = transposed(g, r, c);
                self.accumulate(*x, |dst| add_assign(dst, &dx));
            }

            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.datas[p.0].len();
                    let gp = &g[off..off + len];
                    self.accumulate(p, |dst| add_assign(dst, gp));
                    off += len;
                }
            }

            Op::ConcatCols { parts } => {
                let total = self.shapes[out][1];
                let rows = self.shapes[out][0];
                let mut off = 0;
                for &p in parts {
                    let w = self.shapes[p.0][1];
                    if self.wants(p) {
                        let mut dp = vec![S::zero(); rows * w];
                        for i in 0..rows {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        self.accumulate(p, |dst| add_assign(dst, &dp));
                    }
                    off += w;
                }
            }

            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let c = self.shapes[x.0][1];
                    let mut dx = vec![S::zero(); self.datas[x.0].len()];
                    dx[start * c..start * c + g.len()].copy_from_slice(g);
                    self.accumulate(*x, |dst| add_assign(dst, &dx));
                }
            }

            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let (r, len) = (self.shapes[out][0], self.shapes[out][1]);
                    let c = self.shapes[x.0][1];
                    let mut dx = vec![S::zero(); self.datas[x.0].len()];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    self.accumulate(*x, |dst| add_assign(dst, &dx));
                }
            }

            Op::SoftmaxRows { x } => {
                let (r, c) = (self.shapes[out][0], self.shapes[out][1]);
                let y = &self.datas[out];
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(*x, |dst| add_assign(dst, &dx));
            }

            Op::CausalMask { x } => {
                // Constant additive mask: gradient passes through unchanged.
                self.accumulate(*x, |dst| add_assign(dst, g));
            }

            Op::Rope { x, positions, base } => {
                let (n, dh) = (self.shapes[out][0], self.shapes[out][1]);
                let mut dx = g.to_vec();
                rope_apply(&mut dx, n, dh, positions, *base, true);
                self.accumulate(*x, |dst| add_assign(dst, &dx));
            }

            Op::SumAll { x } => {
                let gv = g[0];
                self.accumulate(*x, |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }

            Op::MeanAll { x } => {
                let n = S::from_f64(self.datas[x.0].len() as f64);
                let gv = g[0] / n;
                self.accumulate(*x, |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }

            Op::XentWSum {
                logits,
                targets,
                weights,
            } => {
                if self.wants(*logits) {
                    let (r, c) = (self.shapes[logits.0][0], self.shapes[logits.0][1]);
                    let mut dl = vec![S::zero(); r * c];
                    let gv = g[0];
                    for i in 0..r {
                        if weights[i] == S::zero() {
                            continue;
                        }
                        let row = &self.datas[logits.0][i * c..(i + 1) * c];
                        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                        let mut sum = S::zero();
                        let mut probs = vec![S::zero(); c];
                        for j in 0..c {
                            probs[j] = (row[j] - max).exp();
                            sum += probs[j];
                        }
                        let w = gv * weights[i];
                        for j in 0..c {
                            let p = probs[j] / sum;
                            let y = if j == targets[i] as usize {
                                S::one()
                            } else {
                                S::zero()
                            };
                            dl[i * c + j] = w * (p - y);
                        }
                    }
                    self.accumulate(*logits, |dst| add_assign(dst, &dl));
                }
            }
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_assign<S: Scalar>(dst: &mut [S], src: &[S]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn row_nll<S: Scalar>(row: &[S], target: usize) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln() - row[target]
}

fn rope_apply<S: Scalar>(
    data: &mut [S],
    n: usize,
    dh: usize,
    positions: &[i64],
    base: f64,
    inverse: bool,
) {
    let half = dh / 2;
    for (i, &pos) in positions.iter().enumerate().take(n) {
        let row = &mut data[i * dh..(i + 1) * dh];
        for k in 0..half {
            let freq = base.powf(-2.0 * k as f64 / dh as f64);
            let mut angle = pos as f64 * freq;
            if inverse {
                angle = -angle;
            }
            let (sin, cos) = angle.sin_cos();
            let (sin, cos) = (S::from_f64(sin), S::from_f64(cos));
            let a = row[2 * k];
            let b = row[2 * k + 1];
            row[2 * k] = a * cos - b * sin;
            row[2 * k + 1] = a * sin + b * cos;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
                "element {i}: {x} vs {y}"
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let b = g.constant(vec![3.0, 4.0, 5.0, 6.0], vec![2, 2]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(vec![1.0, 2.0], vec![1, 2]);
        let b = g.constant(vec![3.0, 4.0], vec![2, 1]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(vec![0.0; 6], vec![2, 3]);
        let b = g.constant(vec![0.0; 8], vec![2, 4]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0], vec![2, 3]);
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_elementwise_square() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(vec![1.0, 2.0, 3.0], vec![1, 3]);
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(vec![1.0], vec![1]);
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(vec![1.0, 2.0], vec![1, 2]);
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn shared_subexpression_grads_accumulate() {
        // loss = sum(x + x) -> dx = 2 everywhere, two paths through the tape.
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(vec![1.0, 2.0], vec![1, 2]);
        let y = g.add(x, x).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn gelu_fixed_point_at_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![0.0], vec![1]);
        let y = g.gelu(x).unwrap();
        assert_eq!(g.value(y), &[0.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero_before_scale_shift() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![5.0; 4], vec![1, 4]);
        let gamma = g.constant(vec![1.0; 4], vec![4]);
        let beta = g.constant(vec![0.0; 4], vec![4]);
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for &v in g.value(y) {
            assert!(v.abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0], vec![2, 3]);
        let y = g.softmax_rows(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(y)[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(vec![0.7; 8], vec![2, 4]);
        let loss = g.softmax_cross_entropy(logits, &[0, 3], None).unwrap();
        let expected = 4.0f64.ln();
        assert!((g.scalar_value(loss) - expected).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_peaked_logit() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(vec![10.0, 0.0, 0.0], vec![1, 3]);
        let loss = g.softmax_cross_entropy(logits, &[0], None).unwrap();
        // -ln(e^10 / (e^10 + 2)) = ln(1 + 2e^-10)
        let expected = (1.0 + 2.0 * (-10.0f64).exp()).ln();
        assert!((g.scalar_value(loss) - expected).abs() < 1e-12);
        assert!((g.scalar_value(loss) - 9.08e-5).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_all_rows_masked_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let loss = g
            .softmax_cross_entropy(logits, &[0, 1], Some(&[0.0, 0.0]))
            .unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(vec![0.0; 4], vec![1, 4]);
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[4], None),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0, 4.0], vec![1, 4]);
        let y = g.rope(x, &[0], 10000.0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn rope_inverse_rotation_recovers_input() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![0.3, -1.2, 2.5, 0.9, 1.0, 0.0, -0.4, 0.8], vec![2, 4]);
        let y = g.rope(x, &[3, 7], 10000.0).unwrap();
        let z = g.rope(y, &[-3, -7], 10000.0).unwrap();
        assert_close(g.value(z), g.value(x), 1e-5);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![0.6, -0.8, 1.5, 2.0], vec![1, 4]);
        let y = g.rope(x, &[11], 10000.0).unwrap();
        let xv = g.value(x);
        let yv = g.value(y);
        for k in 0..2 {
            let nx = xv[2 * k].hypot(xv[2 * k + 1]);
            let ny = yv[2 * k].hypot(yv[2 * k + 1]);
            assert!((nx - ny).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_odd_head_dim_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![0.0; 3], vec![1, 3]);
        assert!(g.rope(x, &[0], 10000.0).is_err());
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut g: Graph<f64> = Graph::new();
        let t = g.constant(vec![0.0; 6], vec![3, 2]);
        assert!(matches!(
            g.gather_rows(t, &[0, 3]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn gather_rows_scatter_adds_duplicates() {
        let mut g: Graph<f64> = Graph::new();
        let t = g.param(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let y = g.gather_rows(t, &[1, 1, 0]).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(t).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn causal_mask_zeroes_future_probability() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![1.0; 9], vec![3, 3]);
        let m = g.causal_mask(x).unwrap();
        let p = g.softmax_rows(m).unwrap();
        let v = g.value(p);
        assert!((v[0] - 1.0).abs() < 1e-12); // row 0 attends only to col 0
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
        assert!((v[3] - 0.5).abs() < 1e-12);
        assert_eq!(v[5], 0.0);
    }

    #[test]
    fn f32_and_f64_forward_agree_on_unit_scale_inputs() {
        let vals: Vec<f64> = (0..12).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let mut g64: Graph<f64> = Graph::new();
        let x64 = g64.constant(vals.clone(), vec![3, 4]);
        let w64 = g64.constant(vals.iter().rev().cloned().collect(), vec![4, 3]);
        let y64 = g64.matmul(x64, w64).unwrap();
        let z64 = g64.gelu(y64).unwrap();
        let s64 = g64.mean_all(z64).unwrap();

        let mut g32: Graph<f32> = Graph::new();
        let x32 = g32.constant(vals.iter().map(|&v| v as f32).collect(), vec![3, 4]);
        let w32 = g32.constant(vals.iter().rev().map(|&v| v as f32).collect(), vec![4, 3]);
        let y32 = g32.matmul(x32, w32).unwrap();
        let z32 = g32.gelu(y32).unwrap();
        let s32 = g32.mean_all(z32).unwrap();

        let a = g64.scalar_value(s64);
        let b = g32.scalar_value(s32) as f64;
        assert!((a - b).abs() <= 1e-3 * (1.0 + a.abs()), "{a} vs {b}");
    }
}
