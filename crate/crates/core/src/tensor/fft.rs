//! Radix-2 FFT over the last two axes.
//!
//! Forward transforms are unnormalized; inverse transforms divide by `H·W`.

use std::f64::consts::PI;

use super::{checked_numel, Tensor};
use crate::error::{Error, Result};

/// Complex tensor stored as separate real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: Vec<usize>, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if re.len() != n || im.len() != n {
            return Err(Error::Shape {
                shape,
                reason: format!("expected {n} values per part, got re={} im={}", re.len(), im.len()),
            });
        }
        Ok(Self { shape, re, im })
    }

    pub fn from_real(x: &Tensor) -> Self {
        Self {
            shape: x.shape().to_vec(),
            re: x.data().to_vec(),
            im: vec![0.0; x.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [f64] {
        &mut self.im
    }

    pub fn real_part(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.re.clone()).expect("same shape")
    }

    pub fn imag_part(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.im.clone()).expect("same shape")
    }

    pub fn norm_sq(&self) -> f64 {
        self.re.iter().chain(&self.im).map(|v| v * v).sum()
    }

    /// Unnormalized 2-D DFT of the last two axes.
    pub fn fft2(&self) -> Result<Self> {
        let mut out = self.clone();
        transform_planes(&mut out, false)?;
        Ok(out)
    }

    /// Inverse 2-D DFT of the last two axes, scaled by `1/(H·W)`.
    pub fn ifft2(&self) -> Result<Self> {
        let mut out = self.clone();
        transform_planes(&mut out, true)?;
        Ok(out)
    }
}

/// Unnormalized forward transform of a real field over its last two axes.
pub fn fft2(x: &Tensor) -> Result<ComplexTensor> {
    ComplexTensor::from_real(x).fft2()
}

pub fn ifft2(x: &ComplexTensor) -> Result<ComplexTensor> {
    x.ifft2()
}

/// Inverse transform of a spectrum that came from a real field.
///
/// Fails when the result carries an imaginary part larger than
/// `1e-9·max(1, max|re|)`, i.e. the spectrum was not conjugate-symmetric.
pub fn ifft2_real(x: &ComplexTensor) -> Result<Tensor> {
    let y = x.ifft2()?;
    let scale = y.re.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let max_im = y.im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_im > 1e-9 * scale {
        return Err(Error::NumericInput {
            op: "ifft2_real",
            reason: format!("imaginary residue {max_im:e} exceeds tolerance"),
        });
    }
    Ok(y.real_part())
}

fn transform_planes(x: &mut ComplexTensor, inverse: bool) -> Result<()> {
    let rank = x.shape.len();
    if rank < 2 {
        return Err(Error::Shape {
            shape: x.shape.clone(),
            reason: "fft2 needs at least two axes".into(),
        });
    }
    let (h, w) = (x.shape[rank - 2], x.shape[rank - 1]);
    for (size, _) in [(h, 0), (w, 1)] {
        if !size.is_power_of_two() {
            return Err(Error::UnsupportedSize { op: "fft2", size });
        }
    }
    let plane = h * w;
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    let twiddle_w = Twiddles::new(w, inverse);
    let twiddle_h = Twiddles::new(h, inverse);
    for (pre, pim) in x.re.chunks_exact_mut(plane).zip(x.im.chunks_exact_mut(plane)) {
        for r in 0..h {
            twiddle_w.apply(&mut pre[r * w..(r + 1) * w], &mut pim[r * w..(r + 1) * w]);
        }
        for c in 0..w {
            for r in 0..h {
                col_re[r] = pre[r * w + c];
                col_im[r] = pim[r * w + c];
            }
            twiddle_h.apply(&mut col_re, &mut col_im);
            for r in 0..h {
                pre[r * w + c] = col_re[r];
                pim[r * w + c] = col_im[r];
            }
        }
    }
    if inverse {
        let s = 1.0 / plane as f64;
        x.re.iter_mut().chain(x.im.iter_mut()).for_each(|v| *v *= s);
    }
    Ok(())
}

struct Twiddles {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddles {
    fn new(n: usize, inverse: bool) -> Self {
        let sign = if inverse { 1.0 } else { -1.0 };
        let half = (n / 2).max(1);
        let (cos, sin) = (0..half)
            .map(|k| {
                let a = sign * 2.0 * PI * k as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .unzip();
        Self { n, cos, sin }
    }

    fn apply(&self, re: &mut [f64], im: &mut [f64]) {
        fft_core(re, im, self.n, &self.cos, &self.sin);
    }
}

/// In-place unnormalized 1-D transform of a power-of-two length sequence.
/// `inverse` flips the exponent sign only; no scaling is applied.
pub fn fft_inplace(re: &mut [f64], im: &mut [f64], inverse: bool) -> Result<()> {
    let n = re.len();
    if n != im.len() {
        return Err(Error::Dimension {
            op: "fft",
            lhs: vec![n],
            rhs: vec![im.len()],
        });
    }
    if !n.is_power_of_two() {
        return Err(Error::UnsupportedSize { op: "fft", size: n });
    }
    Twiddles::new(n, inverse).apply(re, im);
    Ok(())
}

fn fft_core(re: &mut [f64], im: &mut [f64], n: usize, cos: &[f64], sin: &[f64]) {
    if n <= 1 {
        return;
    }
    // bit-reversal permutation
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (wr, wi) = (cos[k * step], sin[k * step]);
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}
