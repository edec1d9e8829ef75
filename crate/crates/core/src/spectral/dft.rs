//! One-dimensional discrete Fourier transforms along the token axis.
//!
//! Forward transforms are unnormalized, `X[k] = Σ_n x[n]·e^{−2πikn/N}`; the
//! inverse carries the `1/N`. Real inputs use the one-sided spectrum with
//! `F = ⌊N/2⌋ + 1` bins. Power-of-two lengths go through an iterative radix-2
//! kernel, every other length through the direct `O(N²)` sum.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Tensor};

/// Largest imaginary residue tolerated when inverting a one-sided spectrum.
pub const RESIDUE_TOLERANCE: f64 = 1e-6;

/// Number of retained one-sided bins for a real signal of length `n`.
pub fn one_sided_len(n: usize) -> usize {
    n / 2 + 1
}

/// `e^{2πi·m/n}` for `m in 0..n`, exact at multiples of a quarter turn.
fn twiddles(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|m| {
            if 4 * m % n == 0 {
                match 4 * m / n {
                    0 => Complex64::new(1.0, 0.0),
                    1 => Complex64::new(0.0, 1.0),
                    2 => Complex64::new(-1.0, 0.0),
                    _ => Complex64::new(0.0, -1.0),
                }
            } else {
                let theta = 2.0 * PI * m as f64 / n as f64;
                Complex64::new(theta.cos(), theta.sin())
            }
        })
        .collect()
}

/// Direct `O(N²)` transform. `inverse` flips the exponent sign; no scaling.
pub fn dft_reference(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = x.len();
    let tw = twiddles(n);
    (0..n)
        .map(|k| {
            let mut idx = 0;
            let mut acc = Complex64::default();
            for &v in x {
                let w = tw[idx];
                acc += v * if inverse { w } else { w.conj() };
                idx += k;
                if idx >= n {
                    idx -= n;
                }
            }
            acc
        })
        .collect()
}

/// In-place iterative radix-2 Cooley-Tukey transform. `buf.len()` must be a
/// power of two.
pub fn fft_radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "radix-2 length must be a power of two");
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let tw = twiddles(n);
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = tw[k * stride];
                let w = if inverse { w } else { w.conj() };
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Unnormalized complex transform using the fast path when available.
pub fn dft_complex(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
    if x.len().is_power_of_two() {
        let mut buf = x.to_vec();
        fft_radix2(&mut buf, inverse);
        buf
    } else {
        dft_reference(x, inverse)
    }
}

/// One-sided spectrum of the columns of a row-major `[n × c]` array, as
/// separate real and imaginary `[F × c]` arrays.
pub(crate) fn rdft_columns(x: &[f64], n: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let f = one_sided_len(n);
    let mut re = vec![0.0; f * c];
    let mut im = vec![0.0; f * c];
    if n.is_power_of_two() {
        let mut col = vec![Complex64::default(); n];
        for ch in 0..c {
            for (i, slot) in col.iter_mut().enumerate() {
                *slot = Complex64::new(x[i * c + ch], 0.0);
            }
            fft_radix2(&mut col, false);
            for k in 0..f {
                re[k * c + ch] = col[k].re;
                im[k * c + ch] = col[k].im;
            }
        }
        return (re, im);
    }
    let tw = twiddles(n);
    for k in 0..f {
        let (r, i) = (&mut re[k * c..(k + 1) * c], &mut im[k * c..(k + 1) * c]);
        let mut idx = 0;
        for row in x.chunks_exact(c) {
            let w = tw[idx];
            for ch in 0..c {
                r[ch] += w.re * row[ch];
                i[ch] -= w.im * row[ch];
            }
            idx += k;
            if idx >= n {
                idx -= n;
            }
        }
    }
    (re, im)
}

/// `y[j] = Σ_{k<F} (a_re[k]·cos(2πkj/n) − a_im[k]·sin(2πkj/n))` per column,
/// for `[F × c]` coefficient arrays.
pub(crate) fn synth_columns(a_re: &[f64], a_im: &[f64], n: usize, c: usize) -> Vec<f64> {
    let f = one_sided_len(n);
    let mut out = vec![0.0; n * c];
    if n.is_power_of_two() {
        let mut col = vec![Complex64::default(); n];
        for ch in 0..c {
            col.fill(Complex64::default());
            for k in 0..f {
                col[k] = Complex64::new(a_re[k * c + ch], a_im[k * c + ch]);
            }
            fft_radix2(&mut col, true);
            for j in 0..n {
                out[j * c + ch] = col[j].re;
            }
        }
        return out;
    }
    let tw = twiddles(n);
    for (j, row) in out.chunks_exact_mut(c).enumerate() {
        let mut idx = 0;
        for k in 0..f {
            let w = tw[idx];
            let (r, i) = (&a_re[k * c..(k + 1) * c], &a_im[k * c..(k + 1) * c]);
            for ch in 0..c {
                row[ch] += w.re * r[ch] - w.im * i[ch];
            }
            idx += j;
            if idx >= n {
                idx -= n;
            }
        }
    }
    out
}

/// One-sided spectrum of each column of a real `[N × C]` tensor.
pub fn dft_1d(x: &Tensor) -> ComplexTensor {
    let (n, c) = (x.rows(), x.cols());
    let f = one_sided_len(n);
    let (re, im) = rdft_columns(x.data(), n, c);
    ComplexTensor {
        re: Tensor::new([f, c], re).expect("shape"),
        im: Tensor::new([f, c], im).expect("shape"),
    }
}

/// Largest imaginary magnitude the Hermitian-extended inverse would carry.
///
/// Only the DC bin and, for even `n`, the Nyquist bin can contribute.
pub fn imaginary_residue(spec: &ComplexTensor, n: usize) -> f64 {
    let c = spec.re.cols();
    let im = spec.im.data();
    let nyq = (n % 2 == 0 && n > 0).then_some(n / 2);
    (0..c)
        .map(|ch| {
            let dc = im[ch].abs();
            let ny = nyq.map_or(0.0, |k| im[k * c + ch].abs());
            (dc + ny) / n as f64
        })
        .fold(0.0, f64::max)
}

/// Real inverse of a one-sided spectrum, keeping only the Hermitian part.
///
/// Imaginary parts at DC and Nyquist are ignored without checking.
pub fn irdft_columns(re: &Tensor, im: &Tensor, n: usize) -> Tensor {
    let c = re.cols();
    let f = one_sided_len(n);
    let mut a_re = re.data().to_vec();
    let mut a_im = im.data().to_vec();
    for k in 0..f {
        let edge = k == 0 || 2 * k == n;
        let w = if edge { 1.0 } else { 2.0 } / n as f64;
        for ch in 0..c {
            a_re[k * c + ch] *= w;
            a_im[k * c + ch] = if edge { 0.0 } else { a_im[k * c + ch] * w };
        }
    }
    Tensor::new([n, c], synth_columns(&a_re, &a_im, n, c)).expect("shape")
}

/// Inverse of [`dft_1d`] with `1/N` normalization.
///
/// Fails when the spectrum is not the one-sided transform of a real signal
/// of length `n`, i.e. on a bin count mismatch or an imaginary residue above
/// [`RESIDUE_TOLERANCE`].
pub fn idft_1d(spec: &ComplexTensor, n: usize) -> Result<Tensor> {
    if n == 0 || spec.re.rows() != one_sided_len(n) {
        return Err(Error::dim(
            "idft_1d",
            spec.shape(),
            &[one_sided_len(n), spec.re.cols()],
        ));
    }
    let residue = imaginary_residue(spec, n);
    if residue > RESIDUE_TOLERANCE {
        return Err(Error::Numerical(format!(
            "imaginary residue {residue:e} after inverse transform exceeds {RESIDUE_TOLERANCE:e}"
        )));
    }
    Ok(irdft_columns(&spec.re, &spec.im, n))
}
