//! Dense row-major tensors and the raw compute kernels the tape records.
//!
//! Kernels are written so the hot inner loop is an axpy over a contiguous
//! output row (independent lanes), which keeps them auto-vectorizable without
//! floating-point reassociation.

use std::fmt;

use super::rng::Rng;
use super::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    Contract {
        op: &'static str,
        detail: String,
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            TensorError::InvalidShape { op, shape, reason } => {
                write!(f, "{op}: invalid shape {shape:?} ({reason})")
            }
            TensorError::Contract { op, detail } => write!(f, "{op}: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense row-major tensor. `grad` is populated by the tape after a backward
/// pass over a graph in which this tensor is a leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != values.len() {
            return Err(TensorError::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: format!("expected {} values, got {}", numel, values.len()),
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![T::zero(); numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![v; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    /// 2-D constructor from rows; rows must be equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let n = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.is_empty() || n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(TensorError::InvalidShape {
                op: "Tensor::from_rows",
                shape: vec![rows.len(), n],
                reason: "rows must be non-empty and rectangular".to_string(),
            });
        }
        let mut values = Vec::with_capacity(rows.len() * n);
        for row in rows {
            values.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), n], values)
    }

    /// Normal init with the given std; draws one value per element in
    /// row-major order from `rng`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let values = (0..numel)
            .map(|_| T::from_f64(rng.next_normal() * std))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        }
    }

    /// Uniform init on `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let values = (0..numel)
            .map(|_| T::from_f64(lo + (hi - lo) * rng.next_f64()))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Element access by multi-index; intended for tests and small tensors.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (d, (&i, &n)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < n, "index {i} out of bounds for dim {d} of size {n}");
            flat = flat * n + i;
        }
        self.values[flat]
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Accumulated gradient, or zeros when no backward pass touched this leaf.
    pub fn grad_or_zeros(&self) -> Vec<T> {
        self.grad
            .clone()
            .unwrap_or_else(|| vec![T::zero(); self.numel()])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }
}

/// Right-aligned broadcast of two shapes, NumPy-style: missing or size-1 dims
/// stretch to match.
pub fn broadcast_shapes(
    op: &'static str,
    left: &[usize],
    right: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = left.len().max(right.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let l = left
            .len()
            .checked_sub(rank - i)
            .map(|j| left[j])
            .unwrap_or(1);
        let r = right
            .len()
            .checked_sub(rank - i)
            .map(|j| right[j])
            .unwrap_or(1);
        out[i] = if l == r || r == 1 {
            l
        } else if l == 1 {
            r
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                left: left.to_vec(),
                right: right.to_vec(),
            });
        };
    }
    Ok(out)
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` as broadcast into `full`, with 0 on stretched dims.
pub fn broadcast_strides(shape: &[usize], full: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = full.len() - shape.len();
    let mut out = vec![0; full.len()];
    for i in 0..full.len() {
        if i >= offset && shape[i - offset] == full[i] {
            out[i] = own[i - offset];
        }
    }
    out
}

/// Applies `f` elementwise over the broadcast of `a` and `b` into `out`
/// (sized for `full_shape`).
pub fn broadcast_apply<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    full_shape: &[usize],
    out: &mut [T],
    f: impl Fn(T, T) -> T,
) {
    if a_shape == b_shape {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o = f(x, y);
        }
        return;
    }
    // bias pattern: trailing dim of `b` matches, everything else broadcast
    if b.len() == *full_shape.last().unwrap() && a.len() == out.len() {
        let n = b.len();
        for (row_o, row_a) in out.chunks_exact_mut(n).zip(a.chunks_exact(n)) {
            for ((o, &x), &y) in row_o.iter_mut().zip(row_a).zip(b) {
                *o = f(x, y);
            }
        }
        return;
    }
    let sa = broadcast_strides(a_shape, full_shape);
    let sb = broadcast_strides(b_shape, full_shape);
    let full_strides = strides(full_shape);
    for (flat, o) in out.iter_mut().enumerate() {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..full_shape.len() {
            let coord = (flat / full_strides[d]) % full_shape[d];
            ia += coord * sa[d];
            ib += coord * sb[d];
        }
        *o = f(a[ia], b[ib]);
    }
}

/// Sums `grad` (shaped `full`) down to `target` by collapsing broadcast dims.
pub fn reduce_grad_to_shape<T: Scalar>(grad: &[T], full: &[usize], target: &[usize]) -> Vec<T> {
    if full == target {
        return grad.to_vec();
    }
    let numel: usize = target.iter().product();
    let mut out = vec![T::zero(); numel];
    let st = broadcast_strides(target, full);
    let full_strides = strides(full);
    for (flat, &g) in grad.iter().enumerate() {
        let mut it = 0;
        for d in 0..full.len() {
            let coord = (flat / full_strides[d]) % full[d];
            it += coord * st[d];
        }
        out[it] += g;
    }
    out
}

/// out[m x n] (+)= A[m x k] . B[k x n]
pub fn gemm_nn<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !accumulate {
        out.fill(T::zero());
    }
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &coef) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += coef * bv;
            }
        }
    }
}

/// out[m x n] (+)= A[m x k] . B[n x k]^T
pub fn gemm_nt<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let d = dot(a_row, &b[j * k..(j + 1) * k]);
            if accumulate {
                out_row[j] += d;
            } else {
                out_row[j] = d;
            }
        }
    }
}

/// out[k x n] (+)= A[m x k]^T . B[m x n]
pub fn gemm_tn<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if !accumulate {
        out.fill(T::zero());
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &coef) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += coef * bv;
            }
        }
    }
}

/// Four-accumulator dot product; lanes are independent so the loop vectorizes.
#[inline]
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += x[i] * y[i];
        acc[1] += x[i + 1] * y[i + 1];
        acc[2] += x[i + 2] * y[i + 2];
        acc[3] += x[i + 3] * y[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..x.len() {
        tail += x[i] * y[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// 1-D convolution as cross-correlation over time with same zero padding.
///
/// x: [L x c_in], w: [k x c_in x c_out] (row-major), bias: [c_out],
/// out: [L x c_out]. k must be odd; stride is 1.
pub fn conv1d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: &[T],
    out: &mut [T],
    len: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    debug_assert!(k % 2 == 1);
    debug_assert_eq!(x.len(), len * c_in);
    debug_assert_eq!(w.len(), k * c_in * c_out);
    debug_assert_eq!(bias.len(), c_out);
    debug_assert_eq!(out.len(), len * c_out);
    let pad = (k - 1) / 2;
    for t in 0..len {
        let out_row = &mut out[t * c_out..(t + 1) * c_out];
        out_row.copy_from_slice(bias);
        for dk in 0..k {
            let src = t + dk;
            if src < pad || src - pad >= len {
                continue;
            }
            let x_row = &x[(src - pad) * c_in..(src - pad + 1) * c_in];
            for (ci, &coef) in x_row.iter().enumerate() {
                let w_row = &w[(dk * c_in + ci) * c_out..(dk * c_in + ci + 1) * c_out];
                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                    *o += coef * wv;
                }
            }
        }
    }
}

/// Gradients for [`conv1d_forward`]; any of the output slices may be empty to
/// skip that gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    d_out: &[T],
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
    len: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    let pad = (k - 1) / 2;
    if !db.is_empty() {
        for t in 0..len {
            let g_row = &d_out[t * c_out..(t + 1) * c_out];
            for (d, &g) in db.iter_mut().zip(g_row) {
                *d += g;
            }
        }
    }
    for t in 0..len {
        let g_row = &d_out[t * c_out..(t + 1) * c_out];
        for dk in 0..k {
            let src = t + dk;
            if src < pad || src - pad >= len {
                continue;
            }
            let s = src - pad;
            for ci in 0..c_in {
                let w_row = &w[(dk * c_in + ci) * c_out..(dk * c_in + ci + 1) * c_out];
                if !dx.is_empty() {
                    dx[s * c_in + ci] += dot(g_row, w_row);
                }
                if !dw.is_empty() {
                    let coef = x[s * c_in + ci];
                    let dw_row = &mut dw[(dk * c_in + ci) * c_out..(dk * c_in + ci + 1) * c_out];
                    for (d, &g) in dw_row.iter_mut().zip(g_row) {
                        *d += coef * g;
                    }
                }
            }
        }
    }
}

/// Row-wise softmax with max-shift for stability; rows of length `n`.
pub fn softmax_rows<T: Scalar>(x: &[T], out: &mut [T], n: usize) {
    for (row, out_row) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = T::one() / sum;
        for o in out_row.iter_mut() {
            *o *= inv;
        }
    }
}
