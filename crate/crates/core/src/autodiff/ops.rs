use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{
    ensure_same_shape, gelu_derivative, gelu_scalar, gemm, gemm_nt, gemm_tn, row_moments, softmax_slice,
    ComplexTensor, Tensor,
};

/// User-supplied op with a hand-written adjoint.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// One gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

/// A recorded operation together with its (constant) parameters.
#[derive(Clone)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddBroadcast,
    MatMul,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Relu,
    Gelu,
    Softmax,
    LayerNorm { eps: f64 },
    Sum,
    MeanAxis(usize),
    Index0(usize),
    Stack0,
    GatherRows(Rc<[usize]>),
    ScatterAddRows { indices: Rc<[usize]>, rows: usize },
    ScaleRows,
    SelectEntries(Rc<[(usize, usize)]>),
    TopKRenorm(Rc<[Vec<usize>]>),
    Fft2,
    Ifft2Re,
    Attention { heads: usize },
    AttentionTiled { heads: usize, tile: usize },
    RelL2 { truth: Rc<Tensor>, eps: f64 },
    Custom(Rc<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind().name())
    }
}

/// Registry of op names. Every kind except `Leaf` and `Custom` has a
/// built-in adjoint covered by [`super::grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddBroadcast,
    MatMul,
    Reshape,
    Permute,
    Relu,
    Gelu,
    Softmax,
    LayerNorm,
    Sum,
    MeanAxis,
    Index0,
    Stack0,
    GatherRows,
    ScatterAddRows,
    ScaleRows,
    SelectEntries,
    TopKRenorm,
    Fft2,
    Ifft2Re,
    Attention,
    AttentionTiled,
    RelL2,
    Custom,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 26] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddBroadcast,
        OpKind::MatMul,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Sum,
        OpKind::MeanAxis,
        OpKind::Index0,
        OpKind::Stack0,
        OpKind::GatherRows,
        OpKind::ScatterAddRows,
        OpKind::ScaleRows,
        OpKind::SelectEntries,
        OpKind::TopKRenorm,
        OpKind::Fft2,
        OpKind::Ifft2Re,
        OpKind::Attention,
        OpKind::AttentionTiled,
        OpKind::RelL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddBroadcast => "add_broadcast",
            OpKind::MatMul => "matmul",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Sum => "sum",
            OpKind::MeanAxis => "mean_axis",
            OpKind::Index0 => "index0",
            OpKind::Stack0 => "stack0",
            OpKind::GatherRows => "gather_rows",
            OpKind::ScatterAddRows => "scatter_add_rows",
            OpKind::ScaleRows => "scale_rows",
            OpKind::SelectEntries => "select_entries",
            OpKind::TopKRenorm => "topk_renorm",
            OpKind::Fft2 => "fft2",
            OpKind::Ifft2Re => "ifft2_re",
            OpKind::Attention => "attention",
            OpKind::AttentionTiled => "attention_tiled",
            OpKind::RelL2 => "rel_l2",
            OpKind::Custom => "custom",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .chain(std::iter::once(OpKind::Custom))
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::UnknownOp(name.to_string()))
    }

    /// Fixed input count, or `None` for variadic ops.
    pub fn arity(self) -> Option<usize> {
        match self {
            OpKind::Leaf => Some(0),
            OpKind::Stack0 | OpKind::Custom => None,
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::AddBroadcast | OpKind::MatMul | OpKind::ScaleRows => {
                Some(2)
            }
            OpKind::LayerNorm | OpKind::Attention | OpKind::AttentionTiled => Some(3),
            _ => Some(1),
        }
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::AddBroadcast => OpKind::AddBroadcast,
            Op::MatMul => OpKind::MatMul,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute(_) => OpKind::Permute,
            Op::Relu => OpKind::Relu,
            Op::Gelu => OpKind::Gelu,
            Op::Softmax => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Sum => OpKind::Sum,
            Op::MeanAxis(_) => OpKind::MeanAxis,
            Op::Index0(_) => OpKind::Index0,
            Op::Stack0 => OpKind::Stack0,
            Op::GatherRows(_) => OpKind::GatherRows,
            Op::ScatterAddRows { .. } => OpKind::ScatterAddRows,
            Op::ScaleRows => OpKind::ScaleRows,
            Op::SelectEntries(_) => OpKind::SelectEntries,
            Op::TopKRenorm(_) => OpKind::TopKRenorm,
            Op::Fft2 => OpKind::Fft2,
            Op::Ifft2Re => OpKind::Ifft2Re,
            Op::Attention { .. } => OpKind::Attention,
            Op::AttentionTiled { .. } => OpKind::AttentionTiled,
            Op::RelL2 { .. } => OpKind::RelL2,
            Op::Custom(_) => OpKind::Custom,
        }
    }
}

fn shape_err(shape: &[usize], reason: impl Into<String>) -> Error {
    Error::Shape {
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

fn rows_of(t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() < 2 {
        return Err(shape_err(t.shape(), "expected rank >= 2"));
    }
    let rows = t.shape()[0];
    Ok((rows, t.len() / rows))
}

fn with_shape(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("kernel produced consistent shape")
}

pub(super) fn forward(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Leaf => Err(Error::Contract("leaf has no forward".into())),
        Op::Add => x[0].add(x[1]),
        Op::Sub => x[0].sub(x[1]),
        Op::Mul => x[0].mul(x[1]),
        Op::Scale(s) => Ok(x[0].scale(*s)),
        Op::AddBroadcast => {
            let (a, b) = (x[0], x[1]);
            if !a.shape().ends_with(b.shape()) {
                return Err(Error::Dimension {
                    op: "add_broadcast",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut out = a.data().to_vec();
            for chunk in out.chunks_exact_mut(b.len()) {
                for (o, v) in chunk.iter_mut().zip(b.data()) {
                    *o += v;
                }
            }
            Ok(with_shape(a.shape(), out))
        }
        Op::MatMul => {
            let (a, w) = (x[0], x[1]);
            let k = *a.shape().last().expect("rank >= 1");
            if w.rank() != 2 || w.shape()[0] != k {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            let n = w.shape()[1];
            let m = a.len() / k;
            let mut out = vec![0.0; m * n];
            gemm(a.data(), w.data(), &mut out, m, k, n);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().expect("rank >= 1") = n;
            Ok(with_shape(&shape, out))
        }
        Op::Reshape(shape) => x[0].reshape(shape),
        Op::Permute(axes) => x[0].permute(axes),
        Op::Relu => Ok(x[0].map(|v| v.max(0.0))),
        Op::Gelu => Ok(x[0].map(gelu_scalar)),
        Op::Softmax => {
            let d = *x[0].shape().last().expect("rank >= 1");
            if x[0].data().iter().any(|v| v.is_nan()) {
                return Err(Error::NumericInput {
                    op: "softmax",
                    reason: "NaN in input".into(),
                });
            }
            let mut out = x[0].data().to_vec();
            out.chunks_exact_mut(d).for_each(softmax_slice);
            Ok(with_shape(x[0].shape(), out))
        }
        Op::LayerNorm { eps } => crate::tensor::layer_norm(x[0], x[1], x[2], *eps),
        Op::Sum => Ok(Tensor::scalar(x[0].sum())),
        Op::MeanAxis(axis) => mean_axis(x[0], *axis),
        Op::Index0(i) => x[0].index0(*i),
        Op::Stack0 => Tensor::stack(x),
        Op::GatherRows(idx) => {
            let (rows, inner) = rows_of(x[0])?;
            if idx.is_empty() || idx.iter().any(|&r| r >= rows) {
                return Err(shape_err(x[0].shape(), format!("gather rows {idx:?} out of range")));
            }
            let mut out = Vec::with_capacity(idx.len() * inner);
            for &r in idx.iter() {
                out.extend_from_slice(&x[0].data()[r * inner..(r + 1) * inner]);
            }
            let mut shape = x[0].shape().to_vec();
            shape[0] = idx.len();
            Ok(with_shape(&shape, out))
        }
        Op::ScatterAddRows { indices, rows } => {
            let (m, inner) = rows_of(x[0])?;
            if m != indices.len() || indices.iter().any(|&r| r >= *rows) {
                return Err(shape_err(x[0].shape(), format!("scatter indices {indices:?} invalid")));
            }
            let mut out = vec![0.0; rows * inner];
            for (j, &r) in indices.iter().enumerate() {
                for (o, v) in out[r * inner..(r + 1) * inner]
                    .iter_mut()
                    .zip(&x[0].data()[j * inner..(j + 1) * inner])
                {
                    *o += v;
                }
            }
            let mut shape = x[0].shape().to_vec();
            shape[0] = *rows;
            Ok(with_shape(&shape, out))
        }
        Op::ScaleRows => {
            let (rows, inner) = rows_of(x[0])?;
            if x[1].shape() != [rows] {
                return Err(Error::Dimension {
                    op: "scale_rows",
                    lhs: x[0].shape().to_vec(),
                    rhs: x[1].shape().to_vec(),
                });
            }
            let mut out = x[0].data().to_vec();
            for (r, chunk) in out.chunks_exact_mut(inner).enumerate() {
                chunk.iter_mut().for_each(|v| *v *= x[1].data()[r]);
            }
            Ok(with_shape(x[0].shape(), out))
        }
        Op::SelectEntries(at) => {
            let t = x[0];
            if t.rank() != 2 || at.is_empty() {
                return Err(shape_err(t.shape(), "select_entries needs a 2-D input and >= 1 position"));
            }
            let cols = t.shape()[1];
            let mut out = Vec::with_capacity(at.len());
            for &(r, c) in at.iter() {
                if r >= t.shape()[0] || c >= cols {
                    return Err(shape_err(t.shape(), format!("entry ({r},{c}) out of range")));
                }
                out.push(t.data()[r * cols + c]);
            }
            Ok(with_shape(&[at.len()], out))
        }
        Op::TopKRenorm(sel) => {
            let t = x[0];
            if t.rank() != 2 || t.shape()[0] != sel.len() {
                return Err(shape_err(t.shape(), "topk_renorm needs one selection per row"));
            }
            let cols = t.shape()[1];
            let mut out = vec![0.0; t.len()];
            for (r, chosen) in sel.iter().enumerate() {
                let row = &t.data()[r * cols..(r + 1) * cols];
                if chosen.is_empty() || chosen.iter().any(|&c| c >= cols) {
                    return Err(shape_err(t.shape(), format!("bad selection {chosen:?} in row {r}")));
                }
                let denom: f64 = chosen.iter().map(|&c| row[c]).sum();
                for &c in chosen {
                    out[r * cols + c] = row[c] / denom;
                }
            }
            Ok(with_shape(t.shape(), out))
        }
        Op::Fft2 => {
            let spec = crate::tensor::fft2(x[0])?;
            Ok(pack(&spec))
        }
        Op::Ifft2Re => {
            let spec = unpack(x[0])?;
            Ok(spec.ifft2()?.real_part())
        }
        Op::Attention { heads } => {
            let dims = AttnDims::new(x, *heads)?;
            Ok(with_shape(x[0].shape(), attention_naive(x[0], x[1], x[2], &dims).0))
        }
        Op::AttentionTiled { heads, tile } => {
            let dims = AttnDims::new(x, *heads)?;
            if *tile == 0 {
                return Err(Error::Config("attention tile must be >= 1".into()));
            }
            Ok(with_shape(x[0].shape(), attention_tiled(x[0], x[1], x[2], &dims, *tile).0))
        }
        Op::RelL2 { truth, eps } => {
            ensure_same_shape("rel_l2", x[0].shape(), truth.shape())?;
            let (planes, _) = rel_l2_planes(x[0], truth, *eps)?;
            let n = planes.len() as f64;
            Ok(Tensor::scalar(planes.iter().map(|p| p.err_norm / p.denom).sum::<f64>() / n))
        }
        Op::Custom(c) => c.forward(x),
    }
}

pub(super) fn backward(op: &Op, x: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![g.clone(), g.clone()],
        Op::Sub => vec![g.clone(), g.scale(-1.0)],
        Op::Mul => vec![g.mul(x[1])?, g.mul(x[0])?],
        Op::Scale(s) => vec![g.scale(*s)],
        Op::AddBroadcast => vec![g.clone(), g.sum_to_suffix(x[1].shape())?],
        Op::MatMul => {
            let (a, w) = (x[0], x[1]);
            let (k, n) = (w.shape()[0], w.shape()[1]);
            let m = a.len() / k;
            let mut da = vec![0.0; m * k];
            gemm_nt(g.data(), w.data(), &mut da, m, n, k);
            let mut dw = vec![0.0; k * n];
            gemm_tn(a.data(), g.data(), &mut dw, m, k, n);
            vec![with_shape(a.shape(), da), with_shape(w.shape(), dw)]
        }
        Op::Reshape(_) => vec![g.reshape(x[0].shape())?],
        Op::Permute(axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            vec![g.permute(&inverse)?]
        }
        // Subgradient 1 at exactly zero, so zero-initialized pre-activations
        // still pass gradient.
        Op::Relu => vec![g.zip_map(x[0], "relu", |gv, xv| if xv >= 0.0 { gv } else { 0.0 })?],
        Op::Gelu => vec![g.zip_map(x[0], "gelu", |gv, xv| gv * gelu_derivative(xv))?],
        Op::Softmax => {
            let d = *out.shape().last().expect("rank >= 1");
            let mut dx = vec![0.0; out.len()];
            for ((dr, yr), gr) in dx
                .chunks_exact_mut(d)
                .zip(out.data().chunks_exact(d))
                .zip(g.data().chunks_exact(d))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..d {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![with_shape(out.shape(), dx)]
        }
        Op::LayerNorm { eps } => layer_norm_backward(x[0], x[1], g, *eps),
        Op::Sum => vec![Tensor::full(x[0].shape(), g.item())],
        Op::MeanAxis(axis) => {
            let shape = x[0].shape();
            let outer: usize = shape[..*axis].iter().product();
            let len = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut dx = vec![0.0; x[0].len()];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        dx[(o * len + j) * inner + i] = g.data()[o * inner + i] / len as f64;
                    }
                }
            }
            vec![with_shape(shape, dx)]
        }
        Op::Index0(i) => {
            let mut dx = vec![0.0; x[0].len()];
            let inner = g.len();
            dx[i * inner..(i + 1) * inner].copy_from_slice(g.data());
            vec![with_shape(x[0].shape(), dx)]
        }
        Op::Stack0 => (0..x.len()).map(|i| g.index0(i)).collect::<Result<_>>()?,
        Op::GatherRows(idx) => vec![forward(
            &Op::ScatterAddRows {
                indices: Rc::clone(idx),
                rows: x[0].shape()[0],
            },
            &[g],
        )?],
        Op::ScatterAddRows { indices, .. } => vec![forward(&Op::GatherRows(Rc::clone(indices)), &[g])?],
        Op::ScaleRows => {
            let (_, inner) = rows_of(x[0])?;
            let s = x[1].data();
            let mut dx = g.data().to_vec();
            let mut ds = vec![0.0; s.len()];
            for (r, (dchunk, xchunk)) in dx.chunks_exact_mut(inner).zip(x[0].data().chunks_exact(inner)).enumerate() {
                ds[r] = dchunk.iter().zip(xchunk).map(|(a, b)| a * b).sum();
                dchunk.iter_mut().for_each(|v| *v *= s[r]);
            }
            vec![with_shape(x[0].shape(), dx), with_shape(x[1].shape(), ds)]
        }
        Op::SelectEntries(at) => {
            let cols = x[0].shape()[1];
            let mut dx = vec![0.0; x[0].len()];
            for (j, &(r, c)) in at.iter().enumerate() {
                dx[r * cols + c] += g.data()[j];
            }
            vec![with_shape(x[0].shape(), dx)]
        }
        Op::TopKRenorm(sel) => {
            let cols = x[0].shape()[1];
            let mut dx = vec![0.0; x[0].len()];
            for (r, chosen) in sel.iter().enumerate() {
                let p = &x[0].data()[r * cols..(r + 1) * cols];
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let s: f64 = chosen.iter().map(|&c| p[c]).sum();
                let cross: f64 = chosen.iter().map(|&c| gr[c] * p[c]).sum::<f64>() / (s * s);
                for &c in chosen {
                    dx[r * cols + c] = gr[c] / s - cross;
                }
            }
            vec![with_shape(x[0].shape(), dx)]
        }
        Op::Fft2 => {
            let spec = unpack(g)?;
            let plane = plane_size(x[0].shape());
            let back = spec.ifft2()?.real_part().scale(plane as f64);
            vec![back]
        }
        Op::Ifft2Re => {
            let plane = plane_size(g.shape());
            let spec = crate::tensor::fft2(g)?;
            vec![pack(&spec).scale(1.0 / plane as f64)]
        }
        Op::Attention { heads } => {
            let dims = AttnDims::new(x, *heads)?;
            attention_naive_backward(x[0], x[1], x[2], g, &dims)
        }
        Op::AttentionTiled { heads, tile } => {
            let dims = AttnDims::new(x, *heads)?;
            attention_tiled_backward(x[0], x[1], x[2], out, g, &dims, *tile)
        }
        Op::RelL2 { truth, eps } => {
            let (planes, plane) = rel_l2_planes(x[0], truth, *eps)?;
            let scale = g.item() / planes.len() as f64;
            let mut dx = vec![0.0; x[0].len()];
            for (pi, p) in planes.iter().enumerate() {
                if p.err_norm == 0.0 {
                    continue;
                }
                let f = scale / (p.err_norm * p.denom);
                for i in pi * plane..(pi + 1) * plane {
                    dx[i] = f * (x[0].data()[i] - truth.data()[i]);
                }
            }
            vec![with_shape(x[0].shape(), dx)]
        }
        Op::Custom(c) => c.backward(x, out, g)?,
    })
}

fn mean_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= t.rank() || t.rank() < 2 {
        return Err(shape_err(t.shape(), format!("mean over axis {axis} needs rank >= 2")));
    }
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                out[o * inner + i] += t.data()[(o * len + j) * inner + i];
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= len as f64);
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    Ok(with_shape(&out_shape, out))
}

fn layer_norm_backward(x: &Tensor, gamma: &Tensor, g: &Tensor, eps: f64) -> Vec<Tensor> {
    let d = gamma.len();
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for ((xr, gr), dr) in x
        .data()
        .chunks_exact(d)
        .zip(g.data().chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let (mean, inv_std) = row_moments(xr, eps);
        for j in 0..d {
            xhat[j] = (xr[j] - mean) * inv_std;
            dxhat[j] = gr[j] * gamma.data()[j];
            dgamma[j] += gr[j] * xhat[j];
            dbeta[j] += gr[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dr[j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
    vec![
        with_shape(x.shape(), dx),
        with_shape(gamma.shape(), dgamma),
        with_shape(gamma.shape(), dbeta),
    ]
}

fn plane_size(shape: &[usize]) -> usize {
    let r = shape.len();
    shape[r - 2] * shape[r - 1]
}

fn pack(spec: &ComplexTensor) -> Tensor {
    let mut shape = vec![2];
    shape.extend_from_slice(spec.shape());
    let mut data = spec.re().to_vec();
    data.extend_from_slice(spec.im());
    with_shape(&shape, data)
}

fn unpack(t: &Tensor) -> Result<ComplexTensor> {
    if t.rank() < 3 || t.shape()[0] != 2 {
        return Err(shape_err(t.shape(), "packed spectrum must have shape [2, ..., H, W]"));
    }
    let half = t.len() / 2;
    ComplexTensor::new(
        t.shape()[1..].to_vec(),
        t.data()[..half].to_vec(),
        t.data()[half..].to_vec(),
    )
}

struct PlaneErr {
    err_norm: f64,
    denom: f64,
}

/// Per `(b, c)` plane: `‖pred − truth‖` and `max(‖truth‖, eps)`.
fn rel_l2_planes(pred: &Tensor, truth: &Tensor, eps: f64) -> Result<(Vec<PlaneErr>, usize)> {
    if pred.rank() < 3 {
        return Err(shape_err(pred.shape(), "rel_l2 expects [..., H, W] planes"));
    }
    let plane = plane_size(pred.shape());
    let planes = pred
        .data()
        .chunks_exact(plane)
        .zip(truth.data().chunks_exact(plane))
        .map(|(p, t)| {
            let err = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            PlaneErr {
                err_norm: err,
                denom: norm.max(eps),
            }
        })
        .collect();
    Ok((planes, plane))
}

pub(crate) struct AttnDims {
    batch: usize,
    tokens: usize,
    channels: usize,
    heads: usize,
    head_dim: usize,
}

impl AttnDims {
    fn new(x: &[&Tensor], heads: usize) -> Result<Self> {
        let q = x[0];
        if q.rank() != 3 {
            return Err(shape_err(q.shape(), "attention expects [B, N, C]"));
        }
        for t in &x[1..] {
            ensure_same_shape("attention", q.shape(), t.shape())?;
        }
        let (batch, tokens, channels) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide {channels} channels")));
        }
        Ok(Self {
            batch,
            tokens,
            channels,
            heads,
            head_dim: channels / heads,
        })
    }

    fn at(&self, b: usize, n: usize, h: usize) -> usize {
        (b * self.tokens + n) * self.channels + h * self.head_dim
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Exact attention; also returns the probability rows, `[B, H, N, N]`.
fn attention_naive(q: &Tensor, k: &Tensor, v: &Tensor, d: &AttnDims) -> (Vec<f64>, Vec<f64>) {
    let (n, hd) = (d.tokens, d.head_dim);
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; d.batch * d.heads * n * n];
    for b in 0..d.batch {
        for h in 0..d.heads {
            for i in 0..n {
                let qi = &q.data()[d.at(b, i, h)..d.at(b, i, h) + hd];
                let row = &mut probs[((b * d.heads + h) * n + i) * n..((b * d.heads + h) * n + i + 1) * n];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = dot(qi, &k.data()[d.at(b, j, h)..d.at(b, j, h) + hd]) * d.scale();
                }
                softmax_slice(row);
                let o = d.at(b, i, h);
                for (j, &p) in row.iter().enumerate() {
                    axpy(&mut out[o..o + hd], p, &v.data()[d.at(b, j, h)..d.at(b, j, h) + hd]);
                }
            }
        }
    }
    (out, probs)
}

fn attention_naive_backward(q: &Tensor, k: &Tensor, v: &Tensor, g: &Tensor, d: &AttnDims) -> Vec<Tensor> {
    let (n, hd) = (d.tokens, d.head_dim);
    let (_, probs) = attention_naive(q, k, v, d);
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; q.len()];
    let mut dv = vec![0.0; q.len()];
    let mut dp = vec![0.0; n];
    for b in 0..d.batch {
        for h in 0..d.heads {
            for i in 0..n {
                let p = &probs[((b * d.heads + h) * n + i) * n..((b * d.heads + h) * n + i + 1) * n];
                let gi = &g.data()[d.at(b, i, h)..d.at(b, i, h) + hd];
                for j in 0..n {
                    let vj = d.at(b, j, h);
                    dp[j] = dot(gi, &v.data()[vj..vj + hd]);
                    axpy(&mut dv[vj..vj + hd], p[j], gi);
                }
                let row_dot = dot(p, &dp);
                let qi = d.at(b, i, h);
                for j in 0..n {
                    let ds = p[j] * (dp[j] - row_dot) * d.scale();
                    let kj = d.at(b, j, h);
                    axpy(&mut dq[qi..qi + hd], ds, &k.data()[kj..kj + hd]);
                    axpy(&mut dk[kj..kj + hd], ds, &q.data()[qi..qi + hd]);
                }
            }
        }
    }
    vec![
        with_shape(q.shape(), dq),
        with_shape(q.shape(), dk),
        with_shape(q.shape(), dv),
    ]
}

/// Blocked attention with a running max and denominator per query row.
/// Returns the output and the per-row log-sum-exp, `[B, H, N]`.
fn attention_tiled(q: &Tensor, k: &Tensor, v: &Tensor, d: &AttnDims, tile: usize) -> (Vec<f64>, Vec<f64>) {
    let (n, hd) = (d.tokens, d.head_dim);
    let mut out = vec![0.0; q.len()];
    let mut lse = vec![0.0; d.batch * d.heads * n];
    let mut scores = vec![0.0; tile];
    let mut acc = vec![0.0; hd];
    for b in 0..d.batch {
        for h in 0..d.heads {
            for q0 in (0..n).step_by(tile) {
                for i in q0..(q0 + tile).min(n) {
                    let qi = &q.data()[d.at(b, i, h)..d.at(b, i, h) + hd];
                    let mut running_max = f64::NEG_INFINITY;
                    let mut denom = 0.0;
                    acc.fill(0.0);
                    for k0 in (0..n).step_by(tile) {
                        let k1 = (k0 + tile).min(n);
                        let block = &mut scores[..k1 - k0];
                        for (s, j) in block.iter_mut().zip(k0..k1) {
                            *s = dot(qi, &k.data()[d.at(b, j, h)..d.at(b, j, h) + hd]) * d.scale();
                        }
                        let block_max = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let new_max = running_max.max(block_max);
                        let rescale = (running_max - new_max).exp();
                        denom *= rescale;
                        acc.iter_mut().for_each(|a| *a *= rescale);
                        for (&s, j) in block.iter().zip(k0..k1) {
                            let e = (s - new_max).exp();
                            denom += e;
                            axpy(&mut acc, e, &v.data()[d.at(b, j, h)..d.at(b, j, h) + hd]);
                        }
                        running_max = new_max;
                    }
                    let o = d.at(b, i, h);
                    for (dst, a) in out[o..o + hd].iter_mut().zip(&acc) {
                        *dst = a / denom;
                    }
                    lse[(b * d.heads + h) * n + i] = running_max + denom.ln();
                }
            }
        }
    }
    (out, lse)
}

/// Recomputes probabilities block by block from the saved log-sum-exp,
/// using `Σ_j P_ij dP_ij = dO_i · O_i`.
fn attention_tiled_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    out: &Tensor,
    g: &Tensor,
    d: &AttnDims,
    tile: usize,
) -> Vec<Tensor> {
    let (n, hd) = (d.tokens, d.head_dim);
    let (_, lse) = attention_tiled(q, k, v, d, tile);
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; q.len()];
    let mut dv = vec![0.0; q.len()];
    for b in 0..d.batch {
        for h in 0..d.heads {
            for k0 in (0..n).step_by(tile) {
                let k1 = (k0 + tile).min(n);
                for i in 0..n {
                    let qi = d.at(b, i, h);
                    let gi = &g.data()[qi..qi + hd];
                    let row_dot = dot(gi, &out.data()[qi..qi + hd]);
                    let l = lse[(b * d.heads + h) * n + i];
                    for j in k0..k1 {
                        let kj = d.at(b, j, h);
                        let s = dot(&q.data()[qi..qi + hd], &k.data()[kj..kj + hd]) * d.scale();
                        let p = (s - l).exp();
                        let dp = dot(gi, &v.data()[kj..kj + hd]);
                        axpy(&mut dv[kj..kj + hd], p, gi);
                        let ds = p * (dp - row_dot) * d.scale();
                        axpy(&mut dq[qi..qi + hd], ds, &k.data()[kj..kj + hd]);
                        axpy(&mut dk[kj..kj + hd], ds, &q.data()[qi..qi + hd]);
                    }
                }
            }
        }
    }
    vec![
        with_shape(q.shape(), dq),
        with_shape(q.shape(), dk),
        with_shape(q.shape(), dv),
    ]
}
