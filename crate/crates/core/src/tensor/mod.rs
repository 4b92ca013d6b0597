//! Dense row-major `f64` tensors and the numerical kernels the rest of the
//! crate is built from.
//!
//! Tensors are plain values: every kernel here is a pure function that
//! returns a fresh tensor, so they can be shared freely across threads.

mod fft;

pub use fft::{fft2, fft_inplace, ifft2, ifft2_real, ComplexTensor};

use crate::error::{Error, Result};

/// Dense tensor of 64-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape {
            shape: shape.to_vec(),
            reason: "rank must be at least 1".into(),
        });
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape {
            shape: shape.to_vec(),
            reason: "dimension sizes must be >= 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(Error::Shape {
                shape,
                reason: format!("shape implies {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape. Only for shapes known to be valid.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = checked_numel(shape).expect("invalid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Row-major matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data).expect("valid matrix")
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_same_shape(op, &self.shape, &other.shape)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        ensure_same_shape("add_assign", &self.shape, &other.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Sum over a trailing suffix `shape` broadcast: reduces every leading
    /// axis so the result has shape `suffix`.
    pub fn sum_to_suffix(&self, suffix: &[usize]) -> Result<Self> {
        let inner = checked_numel(suffix)?;
        if !self.shape.ends_with(suffix) {
            return Err(Error::Dimension {
                op: "sum_to_suffix",
                lhs: self.shape.clone(),
                rhs: suffix.to_vec(),
            });
        }
        let mut out = vec![0.0; inner];
        for chunk in self.data.chunks_exact(inner) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Tensor::new(suffix.to_vec(), out)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Shape {
                shape: self.shape.clone(),
                reason: format!("invalid permutation {axes:?}"),
            });
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let gather_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            out.push(self.data[src]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += gather_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= gather_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Tensor::new(out_shape, out)
    }

    /// Slab `i` along axis 0, keeping the remaining axes.
    pub fn index0(&self, i: usize) -> Result<Self> {
        if self.rank() < 2 || i >= self.shape[0] {
            return Err(Error::Shape {
                shape: self.shape.clone(),
                reason: format!("index {i} out of range along axis 0"),
            });
        }
        let inner = self.data.len() / self.shape[0];
        Tensor::new(
            self.shape[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyBatch("stack"))?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            ensure_same_shape("stack", &first.shape, &p.shape)?;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(shape, data)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn ensure_same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// `c[m,n] = Σ_k a[m,k]·b[k,n]` for 2-D operands.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Accumulates `a[m×k] · b[k×n]` into `out[m×n]`.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}

/// Accumulates `aᵀ · b` where `a` is `[m×k]` and `b` is `[m×n]`, into `out[k×n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Accumulates `a · bᵀ` where `a` is `[m×n]` and `b` is `[k×n]`, into `out[m×k]`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Numerically stable softmax along `axis` (max subtraction).
pub fn softmax(v: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= v.rank() {
        return Err(Error::Shape {
            shape: v.shape.clone(),
            reason: format!("softmax axis {axis} out of range"),
        });
    }
    if v.data.iter().any(|x| x.is_nan()) {
        return Err(Error::NumericInput {
            op: "softmax",
            reason: "NaN in input".into(),
        });
    }
    let (outer, len, inner) = axis_layout(&v.shape, axis);
    let mut out = v.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| v.data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..len {
                let e = (v.data[at(j)] - max).exp();
                out[at(j)] = e;
                denom += e;
            }
            for j in 0..len {
                out[at(j)] /= denom;
            }
        }
    }
    Tensor::new(v.shape.clone(), out)
}

/// In-place stable softmax over a contiguous slice.
pub(crate) fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
}

const GELU_C: f64 = 0.044_715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

/// Tanh-approximated GELU: `0.5x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (sqrt_2_over_pi() * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let k = sqrt_2_over_pi();
    let u = k * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Normalizes each row over the last axis, then applies `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape.last().expect("rank >= 1");
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(Error::Dimension {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(d) {
        let (mean, inv_std) = row_moments(row, eps);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv_std * gamma.data[j] + beta.data[j];
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Mean and `1/√(var + eps)` of a row, variance taken with the biased estimator.
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// `[B×C×H×W] → [B×C]`, mean over the spatial plane.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::Shape {
            shape: x.shape.clone(),
            reason: "global_avg_pool expects a 4-D tensor".into(),
        });
    }
    let (b, c) = (x.shape[0], x.shape[1]);
    let plane = x.shape[2] * x.shape[3];
    let data = x
        .data
        .chunks_exact(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(vec![b, c], data)
}
