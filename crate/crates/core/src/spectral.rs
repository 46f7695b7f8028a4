//! Learnable frequency-domain filtering of patch-token grids.
//!
//! Patch tokens `H: N × D` are viewed as a `G × G` spatial grid with `D`
//! channels. The spectral prompt is
//! `S = Re(IFFT2(FFT2(H ⊙ g) ⊙ w))`, with the 2D transform applied to each
//! channel independently.

use crate::error::TensorError;
use crate::fft::FrequencyMap;
use crate::graph::{Graph, Var};
use crate::tensor::{ComplexTensor, Tensor};
use rand::Rng;

/// Complex filter over a `G × G × D` spectrum, stored interleaved as a real
/// `[G, G, D, 2]` tensor so it can be trained like any other parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFilter {
    weights: Tensor,
}

impl SpectralFilter {
    pub fn from_tensor(weights: Tensor) -> Result<Self, TensorError> {
        match *weights.shape() {
            [a, b, _, 2] if a == b => Ok(SpectralFilter { weights }),
            ref s => Err(TensorError::shape("spectral_filter", format!("expected [G, G, D, 2], got {s:?}"))),
        }
    }

    pub fn from_complex(c: &ComplexTensor) -> Result<Self, TensorError> {
        SpectralFilter::from_tensor(c.to_interleaved())
    }

    /// All-ones real part, zero imaginary part: filtering is a no-op.
    pub fn identity(side: usize, channels: usize) -> Self {
        let mut w = Tensor::zeros(&[side, side, channels, 2]);
        w.data_mut().iter_mut().step_by(2).for_each(|v| *v = 1.0);
        SpectralFilter { weights: w }
    }

    pub fn zeros(side: usize, channels: usize) -> Self {
        SpectralFilter {
            weights: Tensor::zeros(&[side, side, channels, 2]),
        }
    }

    /// Identity filter plus Gaussian noise of standard deviation `std` on
    /// both real and imaginary parts.
    pub fn init<R: Rng + ?Sized>(side: usize, channels: usize, std: f64, rng: &mut R) -> Self {
        let mut w = SpectralFilter::identity(side, channels);
        let noise = Tensor::randn(w.weights.shape(), std, rng);
        w.weights.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
        w
    }

    pub fn side(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.weights
    }

    pub fn into_tensor(self) -> Tensor {
        self.weights
    }

    pub fn to_complex(&self) -> ComplexTensor {
        ComplexTensor::from_interleaved(&self.weights).expect("validated on construction")
    }

    /// Pointwise product of a spectrum with this filter.
    pub fn apply(&self, f: &FrequencyMap) -> Result<FrequencyMap, TensorError> {
        let spec = f.spectrum();
        let w = self.to_complex();
        if spec.shape() != w.shape() {
            return Err(TensorError::dims("spectral_filter", spec.shape(), w.shape()));
        }
        let (mut re, mut im) = (spec.re().to_vec(), spec.im().to_vec());
        for i in 0..re.len() {
            let (a, b) = (re[i], im[i]);
            let (c, d) = (w.re()[i], w.im()[i]);
            re[i] = a * c - b * d;
            im[i] = a * d + b * c;
        }
        Ok(FrequencyMap(ComplexTensor::new(spec.shape(), re, im)?))
    }
}

/// Side of the square token grid holding `n` tokens.
pub fn grid_side(n: usize) -> Result<usize, TensorError> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || n == 0 {
        return Err(TensorError::shape("spectral_prompt", format!("{n} tokens do not form a square grid")));
    }
    Ok(side)
}

/// Records `S = Re(IFFT2(FFT2(H ⊙ g) ⊙ w))` on the graph.
///
/// `h: N × D`, `cls: D`, `filter: [G, G, D, 2]` with `G² = N`. Differentiable
/// in all three; gradients flow through the real part only.
pub fn spectral_prompt(g: &mut Graph, h: Var, cls: Var, filter: Var) -> Result<Var, TensorError> {
    let (n, d) = match *g.shape(h) {
        [n, d] => (n, d),
        ref s => return Err(TensorError::shape("spectral_prompt", format!("patch tokens must be N × D, got {s:?}"))),
    };
    let side = grid_side(n)?;
    if g.shape(filter) != [side, side, d, 2] {
        return Err(TensorError::dims("spectral_prompt", &[side, side, d, 2], g.shape(filter)));
    }
    let hg = g.mul(h, cls)?;
    let grid = g.reshape(hg, &[side, side, d])?;
    let c = g.to_complex(grid)?;
    let spec = g.dft2(c, false)?;
    let filtered = g.complex_mul(spec, filter)?;
    let back = g.dft2(filtered, true)?;
    let real = g.real_part(back)?;
    g.reshape(real, &[n, d])
}

/// Value-level convenience wrapper around [`spectral_prompt`].
pub fn spectral_prompt_values(h: &Tensor, cls: &Tensor, filter: &SpectralFilter) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let (hv, cv, fv) = (
        g.constant(h.clone()),
        g.constant(cls.clone()),
        g.constant(filter.tensor().clone()),
    );
    let s = spectral_prompt(&mut g, hv, cv, fv)?;
    Ok(g.value(s).clone())
}
