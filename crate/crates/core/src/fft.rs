//! 1D and 2D discrete Fourier transforms.
//!
//! Power-of-two lengths use an iterative radix-2 transform. Short
//! non-power-of-two lengths use a table-driven direct DFT; longer ones use
//! recursive mixed-radix decimation in time, bottoming out in a direct DFT for
//! prime factors. The forward transform is unnormalized; the inverse divides
//! by the number of points.

use crate::error::TensorError;
use crate::tensor::{ComplexTensor, Tensor};
use std::f64::consts::PI;

/// Non-power-of-two lengths up to this use the direct transform.
const DIRECT_MAX: usize = 32;

/// Precomputed plan for a 1D transform of fixed length.
#[derive(Debug, Clone)]
pub struct Fft1d {
    n: usize,
    // e^{-2πik/n} for k in 0..n
    tw_re: Vec<f64>,
    tw_im: Vec<f64>,
}

impl Fft1d {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "fft length must be positive");
        let (tw_re, tw_im) = (0..n)
            .map(|k| {
                let theta = -2.0 * PI * k as f64 / n as f64;
                (theta.cos(), theta.sin())
            })
            .unzip();
        Fft1d { n, tw_re, tw_im }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Unnormalized in-place transform. `inverse` flips the exponent sign.
    pub fn process(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        assert_eq!(re.len(), self.n);
        assert_eq!(im.len(), self.n);
        if self.n == 1 {
            return;
        }
        if self.n.is_power_of_two() {
            self.radix2(re, im, inverse);
        } else if self.n <= DIRECT_MAX {
            let (out_re, out_im) = self.direct(re, im, 1, inverse);
            re.copy_from_slice(&out_re);
            im.copy_from_slice(&out_im);
        } else {
            let (out_re, out_im) = self.mixed(re, im, 1, inverse);
            re.copy_from_slice(&out_re);
            im.copy_from_slice(&out_im);
        }
    }

    #[inline]
    fn twiddle(&self, e: usize, inverse: bool) -> (f64, f64) {
        let k = e % self.n;
        let s = if inverse { -1.0 } else { 1.0 };
        (self.tw_re[k], s * self.tw_im[k])
    }

    fn radix2(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let n = self.n;
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
                for j in 0..half {
                    let (wr, wi) = self.twiddle(j * step, inverse);
                    let (a, b) = (start + j, start + j + half);
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

    /// Transform of the length-`n / stride` sequence held in `re`/`im`.
    /// Twiddles for the sub-length are read from the full table at `stride`.
    fn mixed(&self, re: &[f64], im: &[f64], stride: usize, inverse: bool) -> (Vec<f64>, Vec<f64>) {
        let n = re.len();
        let p = smallest_factor(n);
        if p == n {
            return self.direct(re, im, stride, inverse);
        }
        let m = n / p;
        let subs: Vec<(Vec<f64>, Vec<f64>)> = (0..p)
            .map(|r| {
                let sr: Vec<f64> = (0..m).map(|j| re[j * p + r]).collect();
                let si: Vec<f64> = (0..m).map(|j| im[j * p + r]).collect();
                self.mixed(&sr, &si, stride * p, inverse)
            })
            .collect();
        let mut out_re = vec![0.0; n];
        let mut out_im = vec![0.0; n];
        for q in 0..p {
            for k in 0..m {
                let idx = k + m * q;
                let (mut ar, mut ai) = (0.0, 0.0);
                for (r, (xr, xi)) in subs.iter().enumerate() {
                    let (wr, wi) = self.twiddle(r * idx * stride, inverse);
                    ar += xr[k] * wr - xi[k] * wi;
                    ai += xr[k] * wi + xi[k] * wr;
                }
                out_re[idx] = ar;
                out_im[idx] = ai;
            }
        }
        (out_re, out_im)
    }

    fn direct(&self, re: &[f64], im: &[f64], stride: usize, inverse: bool) -> (Vec<f64>, Vec<f64>) {
        let n = re.len();
        let mut out_re = vec![0.0; n];
        let mut out_im = vec![0.0; n];
        let s = if inverse { -1.0 } else { 1.0 };
        for k in 0..n {
            let (mut ar, mut ai) = (0.0, 0.0);
            let step = (k * stride) % self.n;
            let mut e = 0;
            for j in 0..n {
                let (wr, wi) = (self.tw_re[e], s * self.tw_im[e]);
                ar += re[j] * wr - im[j] * wi;
                ai += re[j] * wi + im[j] * wr;
                e += step;
                if e >= self.n {
                    e -= self.n;
                }
            }
            out_re[k] = ar;
            out_im[k] = ai;
        }
        (out_re, out_im)
    }
}

fn smallest_factor(n: usize) -> usize {
    if n.is_multiple_of(2) {
        return 2;
    }
    let mut f = 3;
    while f * f <= n {
        if n.is_multiple_of(f) {
            return f;
        }
        f += 2;
    }
    n
}

/// Grid side and channel count for a `[G, G]` or `[G, G, D]` shape.
pub(crate) fn grid_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match *shape {
        [a, b] if a == b => Ok((a, 1)),
        [a, b, d] if a == b => Ok((a, d)),
        _ => Err(TensorError::shape(
            op,
            format!("expected a square [G, G] or [G, G, D] grid, got {shape:?}"),
        )),
    }
}

/// Per-channel 2D transform of interleaved-free planes laid out as `[G, G, D]`.
/// Unnormalized in both directions.
pub(crate) fn dft2_planes(re: &mut [f64], im: &mut [f64], side: usize, channels: usize, inverse: bool) {
    let plan = Fft1d::new(side);
    if !side.is_power_of_two() && side <= DIRECT_MAX {
        direct2_planes(&plan, re, im, side, channels, inverse);
        return;
    }
    let mut lr = vec![0.0; side];
    let mut li = vec![0.0; side];
    // along axis 1 (within each grid row), then along axis 0
    for (outer, inner) in [(side, 1usize), (1usize, side)] {
        for fixed in 0..side {
            for ch in 0..channels {
                for t in 0..side {
                    let idx = (fixed * outer + t * inner) * channels + ch;
                    lr[t] = re[idx];
                    li[t] = im[idx];
                }
                plan.process(&mut lr, &mut li, inverse);
                for t in 0..side {
                    let idx = (fixed * outer + t * inner) * channels + ch;
                    re[idx] = lr[t];
                    im[idx] = li[t];
                }
            }
        }
    }
}

/// Direct transform along both grid axes, all channels of a line at once.
/// Same summation order per element as [`Fft1d::process`] on short lengths.
fn direct2_planes(plan: &Fft1d, re: &mut [f64], im: &mut [f64], side: usize, channels: usize, inverse: bool) {
    let s = if inverse { -1.0 } else { 1.0 };
    let mut yr = vec![0.0; side * channels];
    let mut yi = vec![0.0; side * channels];
    for (outer, inner) in [(side, 1usize), (1usize, side)] {
        for fixed in 0..side {
            let at = |t: usize| (fixed * outer + t * inner) * channels;
            yr.fill(0.0);
            yi.fill(0.0);
            for k in 0..side {
                let (or, oi) = (&mut yr[k * channels..(k + 1) * channels], &mut yi[k * channels..(k + 1) * channels]);
                let mut e = 0;
                for j in 0..side {
                    let (wr, wi) = (plan.tw_re[e], s * plan.tw_im[e]);
                    let (xr, xi) = (&re[at(j)..at(j) + channels], &im[at(j)..at(j) + channels]);
                    for c in 0..channels {
                        or[c] += xr[c] * wr - xi[c] * wi;
                        oi[c] += xr[c] * wi + xi[c] * wr;
                    }
                    e += k;
                    if e >= side {
                        e -= side;
                    }
                }
            }
            for t in 0..side {
                re[at(t)..at(t) + channels].copy_from_slice(&yr[t * channels..(t + 1) * channels]);
                im[at(t)..at(t) + channels].copy_from_slice(&yi[t * channels..(t + 1) * channels]);
            }
        }
    }
}

/// Forward 2D transform of a complex grid (unnormalized).
pub fn fft2_complex(x: &ComplexTensor) -> Result<ComplexTensor, TensorError> {
    let (side, channels) = grid_dims("fft2", x.shape())?;
    let mut out = x.clone();
    let (re, im) = out.planes_mut();
    dft2_planes(re, im, side, channels, false);
    Ok(out)
}

/// Inverse 2D transform of a complex grid, normalized by `1 / G²`.
pub fn ifft2_complex(f: &ComplexTensor) -> Result<ComplexTensor, TensorError> {
    let (side, channels) = grid_dims("ifft2", f.shape())?;
    let mut out = f.clone();
    let scale = 1.0 / (side * side) as f64;
    let (re, im) = out.planes_mut();
    dft2_planes(re, im, side, channels, true);
    re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= scale);
    Ok(out)
}

/// Frequency-domain representation of a real `[G, G, D]` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMap(pub(crate) ComplexTensor);

impl FrequencyMap {
    pub fn spectrum(&self) -> &ComplexTensor {
        &self.0
    }

    pub fn side(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Spatial result of an inverse transform: the real part plus the largest
/// discarded imaginary magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    pub values: Tensor,
    pub imag_residue: f64,
}

pub fn fft2(x: &Tensor) -> Result<FrequencyMap, TensorError> {
    fft2_complex(&ComplexTensor::from_real(x)).map(FrequencyMap)
}

pub fn ifft2(f: &FrequencyMap) -> Result<SpatialGrid, TensorError> {
    let out = ifft2_complex(&f.0)?;
    Ok(SpatialGrid {
        imag_residue: out.max_abs_imag(),
        values: out.real_part(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_dft(re: &[f64], im: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = re.len();
        (0..n)
            .map(|k| {
                (0..n).fold((0.0, 0.0), |(ar, ai), j| {
                    let th = -2.0 * PI * (j * k) as f64 / n as f64;
                    (ar + re[j] * th.cos() - im[j] * th.sin(), ai + re[j] * th.sin() + im[j] * th.cos())
                })
            })
            .unzip()
    }

    #[test]
    fn one_dimensional_lengths_match_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 3, 4, 5, 6, 7, 8, 9, 12, 15, 16, 18, 25, 30, 32, 36, 45, 49, 60, 64, 100] {
            let re: Vec<f64> = Tensor::uniform(&[n], -1.0, 1.0, &mut rng).into_data();
            let im: Vec<f64> = Tensor::uniform(&[n], -1.0, 1.0, &mut rng).into_data();
            let (er, ei) = naive_dft(&re, &im);
            let (mut r, mut i) = (re.clone(), im.clone());
            Fft1d::new(n).process(&mut r, &mut i, false);
            for k in 0..n {
                assert!((r[k] - er[k]).abs() < 1e-10 && (i[k] - ei[k]).abs() < 1e-10, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn non_square_grid_is_rejected() {
        assert!(fft2(&Tensor::zeros(&[4, 3, 2])).is_err());
        assert!(fft2(&Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn zero_map_inverts_to_zero() {
        let f = FrequencyMap(ComplexTensor::zeros(&[6, 6, 2]));
        let out = ifft2(&f).unwrap();
        assert!(out.values.data().iter().all(|&v| v == 0.0));
    }
}
