//! Dense row-major tensors and the small set of numeric kernels shared by the
//! autodiff graph.

use crate::error::TensorError;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// A dense n-dimensional array of `f64` values in row-major order.
///
/// Tensors are plain values. Gradient tracking happens in [`crate::graph::Graph`],
/// which owns one tensor per recorded node.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor without validation. Callers guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_parts(shape.to_vec(), data)
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

    /// Extent of axis 0 for a matrix.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all extents after axis 0.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(TensorError::dims("reshape", &self.shape, shape));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for extent {d}");
                acc * d + i
            })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Raw little-endian bytes of the payload, used for hashing and checkpoints.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::dims("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, &other.data, &mut out);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transpose needs a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        Tensor::from_parts(vec![c, r], transpose(&self.data, r, c))
    }
}

/// A complex tensor stored as separate real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: &[usize], re: Vec<f64>, im: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(TensorError::shape(
                "complex",
                format!("shape {shape:?} needs {n} values, got re={} im={}", re.len(), im.len()),
            ));
        }
        Ok(ComplexTensor {
            shape: shape.to_vec(),
            re,
            im,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        ComplexTensor {
            shape: shape.to_vec(),
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn from_real(t: &Tensor) -> Self {
        ComplexTensor {
            shape: t.shape().to_vec(),
            re: t.data().to_vec(),
            im: vec![0.0; t.len()],
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

    pub fn planes_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.re, &mut self.im)
    }

    pub fn real_part(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.re.clone())
    }

    pub fn max_abs_imag(&self) -> f64 {
        self.im.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Interleaves into a real tensor with a trailing axis of extent 2.
    pub fn to_interleaved(&self) -> Tensor {
        let mut shape = self.shape.clone();
        shape.push(2);
        let data = self.re.iter().zip(&self.im).flat_map(|(&r, &i)| [r, i]).collect();
        Tensor::from_parts(shape, data)
    }

    pub fn from_interleaved(t: &Tensor) -> Result<Self, TensorError> {
        match t.shape().split_last() {
            Some((2, rest)) if !rest.is_empty() => {
                let re = t.data().iter().step_by(2).copied().collect();
                let im = t.data().iter().skip(1).step_by(2).copied().collect();
                Ok(ComplexTensor {
                    shape: rest.to_vec(),
                    re,
                    im,
                })
            }
            _ => Err(TensorError::shape(
                "complex",
                format!("interleaved tensor needs trailing extent 2, got {:?}", t.shape()),
            )),
        }
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Accumulates over `k` in ascending order for every output element, so the
/// result is bit-identical to a naive triple loop.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm extents");
    const NR: usize = 4;
    let (m4, nb) = (m - m % 4, n / NR);
    let n4 = nb * NR;
    if m4 > 0 && nb > 0 && k > 0 {
        // column panels of b, each k × NR and contiguous
        let mut packed = vec![0.0; nb * k * NR];
        for (jb, panel) in packed.chunks_exact_mut(k * NR).enumerate() {
            for (p, dst) in panel.chunks_exact_mut(NR).enumerate() {
                dst.copy_from_slice(&b[p * n + jb * NR..][..NR]);
            }
        }
        for i in (0..m4).step_by(4) {
            let (a0, rest) = a[i * k..(i + 4) * k].split_at(k);
            let (a1, rest) = rest.split_at(k);
            let (a2, a3) = rest.split_at(k);
            for (jb, panel) in packed.chunks_exact(k * NR).enumerate() {
                let j = jb * NR;
                let mut acc = [[0.0; NR]; 4];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&c[(i + r) * n + j..][..NR]);
                }
                for ((((&x0, &x1), &x2), &x3), bp) in a0.iter().zip(a1).zip(a2).zip(a3).zip(panel.chunks_exact(NR)) {
                    let bp: &[f64; NR] = bp.try_into().unwrap();
                    for q in 0..NR {
                        acc[0][q] += x0 * bp[q];
                        acc[1][q] += x1 * bp[q];
                        acc[2][q] += x2 * bp[q];
                        acc[3][q] += x3 * bp[q];
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    c[(i + r) * n + j..][..NR].copy_from_slice(row);
                }
            }
        }
    }
    if n4 < n {
        gemm_tail(0..m4, n4..n, k, n, a, b, c);
    }
    gemm_tail(m4..m, 0..n, k, n, a, b, c);
}

fn gemm_tail(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in rows {
        let c_row = &mut c[i * n + cols.start..i * n + cols.end];
        for p in 0..k {
            let aip = a[i * k + p];
            for (x, &y) in c_row.iter_mut().zip(&b[p * n + cols.start..p * n + cols.end]) {
                *x += aip * y;
            }
        }
    }
}

pub(crate) fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}
