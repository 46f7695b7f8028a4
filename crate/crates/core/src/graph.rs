//! Taped reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node ids are a
//! topological order. [`Graph::backward`] walks the tape once in reverse.
//! Nodes whose inputs never require gradients are skipped.

use crate::error::TensorError;
use crate::fft::{dft2_planes, grid_dims};
use crate::tensor::{gemm, transpose, Tensor};
use std::sync::Arc;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Right-hand operand of [`Graph::elementwise`].
#[derive(Debug, Clone, Copy)]
pub enum Operand {
    /// Same shape as the left operand, or a vector matching its last extent
    /// (broadcast over every leading index, i.e. over tokens).
    Var(Var),
    Scalar(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    Binary { kind: ElementwiseOp, a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, s: f64 },
    ScaleRows { a: Var, s: Var },
    Gelu { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    GatherRows { a: Var, index: Arc<[usize]> },
    SliceCols { a: Var, start: usize },
    Reshape { a: Var },
    Attention(Box<AttentionSaved>),
    CosineGate { z: Var, xi: Var },
    Dft2 { x: Var, inverse: bool },
    ToComplex { a: Var },
    RealPart { a: Var },
    ComplexMul { a: Var, b: Var },
    Resize { a: Var, rows: Arc<AxisWeights>, cols: Arc<AxisWeights> },
    BoxMean { a: Var, k: usize },
    Focal { probs: Var, targets: Arc<[Option<usize>]>, gamma: f64, count: usize },
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    groups: usize,
    scale: f64,
    // per (group, head): tq × tk row-stochastic matrix
    probs: Vec<f64>,
}

/// Linear interpolation weights along one axis: output index → two taps.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisWeights {
    input: usize,
    taps: Vec<(usize, usize, f64, f64)>,
}

impl AxisWeights {
    /// Half-pixel-centred bilinear weights from `input` to `output` samples.
    pub fn bilinear(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let taps = (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(input - 1);
                let frac = src - i0 as f64;
                (i0, i1, 1.0 - frac, frac)
            })
            .collect();
        AxisWeights { input, taps }
    }

    pub fn output(&self) -> usize {
        self.taps.len()
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. One graph per forward pass; not shared across threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: gradient of the loss for every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is untracked or unreachable.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient for `v`, with untracked nodes reported as zeros.
    pub fn wrt_or_zero(&self, v: Var) -> Tensor {
        self.wrt(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul { a, b, b_transposed: false }, &[a, b])
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(TensorError::dims("matmul_nt", self.shape(a), self.shape(b)));
        }
        let bt = transpose(self.value(b).data(), n, k);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), &bt, &mut out);
        self.push(
            "matmul_nt",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, b_transposed: true },
            &[a, b],
        )
    }

    /// `x · w + bias` with the bias broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---------------------------------------------------------------- elementwise

    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, rhs: Operand) -> Result<Var, TensorError> {
        match rhs {
            Operand::Scalar(s) => match kind {
                ElementwiseOp::Add => self.add_scalar(a, s),
                ElementwiseOp::Sub => self.add_scalar(a, -s),
                ElementwiseOp::Mul => self.scale(a, s),
                ElementwiseOp::Div => {
                    if s == 0.0 {
                        return Err(TensorError::DivisionByZero { op: "div" });
                    }
                    self.scale(a, 1.0 / s)
                }
            },
            Operand::Var(b) => self.binary(kind, a, b),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(ElementwiseOp::Div, a, b)
    }

    fn binary(&mut self, kind: ElementwiseOp, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = match kind {
            ElementwiseOp::Add => "add",
            ElementwiseOp::Sub => "sub",
            ElementwiseOp::Mul => "mul",
            ElementwiseOp::Div => "div",
        };
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast = bv.rank() == 1 && av.rank() >= 2 && av.shape().last() == Some(&bv.len());
        if av.shape() != bv.shape() && !broadcast {
            return Err(TensorError::dims(name, av.shape(), bv.shape()));
        }
        if kind == ElementwiseOp::Div && bv.data().contains(&0.0) {
            return Err(TensorError::DivisionByZero { op: name });
        }
        let bd = bv.data();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_exact_mut(bd.len()) {
            let pairs = chunk.iter_mut().zip(bd);
            match kind {
                ElementwiseOp::Add => pairs.for_each(|(x, y)| *x += y),
                ElementwiseOp::Sub => pairs.for_each(|(x, y)| *x -= y),
                ElementwiseOp::Mul => pairs.for_each(|(x, y)| *x *= y),
                ElementwiseOp::Div => pairs.for_each(|(x, y)| *x /= y),
            }
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(name, out, Op::Binary { kind, a, b }, &[a, b])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x + s).collect());
        self.push("add_scalar", out, Op::AddScalar { a }, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect());
        self.push("scale", out, Op::MulScalar { a, s }, &[a])
    }

    /// Multiplies row `i` of matrix `a` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let (r, c) = self.matrix_dims("scale_rows", a)?;
        if self.shape(s) != [r] {
            return Err(TensorError::dims("scale_rows", self.shape(a), self.shape(s)));
        }
        let (av, sv) = (self.value(a).data(), self.value(s).data());
        let data = (0..r * c).map(|i| av[i] * sv[i / c]).collect();
        self.push("scale_rows", Tensor::from_parts(vec![r, c], data), Op::ScaleRows { a, s }, &[a, s])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| gelu(x).0).collect());
        self.push("gelu", out, Op::Gelu { a }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let m = v.sum() / v.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean { a }, &[a])
    }

    // ---------------------------------------------------------------- normalization

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * len + t) * inner + i;
                let max = (0..len).map(|t| x[at(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for t in 0..len {
                    let e = exp(x[at(t)] - max);
                    y[at(t)] = e;
                    total += e;
                }
                for t in 0..len {
                    y[at(t)] /= total;
                }
            }
        }
        self.push("softmax", Tensor::from_parts(shape, y), Op::Softmax { a, outer, len, inner }, &[a])
    }

    /// Normalizes each row of a matrix to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let (r, c) = self.matrix_dims("layer_norm", a)?;
        let x = self.value(a).data();
        let mut y = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for (row, out) in x.chunks_exact(c).zip(y.chunks_exact_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push("layer_norm", Tensor::from_parts(vec![r, c], y), Op::LayerNorm { a, inv_std }, &[a])
    }

    // ---------------------------------------------------------------- structure

    /// Stacks tensors along axis 0. All parts share trailing extents.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::shape("concat_rows", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(TensorError::dims("concat_rows", self.shape(*first), v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push("concat_rows", Tensor::from_parts(shape, data), Op::ConcatRows { parts: parts.to_vec() }, parts)
    }

    /// Concatenates matrices along axis 1.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::shape("concat_cols", "no inputs"))?;
        let (rows, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != rows {
                return Err(TensorError::dims("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols { parts: parts.to_vec() },
            parts,
        )
    }

    /// Output row `i` is row `index[i]` of `a` (axis 0).
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var, TensorError> {
        let v = self.value(a);
        let rows = v.shape()[0];
        let c = v.cols();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::shape("gather_rows", format!("row {bad} out of range for {rows} rows")));
        }
        if index.is_empty() {
            return Err(TensorError::shape("gather_rows", "empty index"));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = index.len();
        self.push("gather_rows", Tensor::from_parts(shape, data), Op::GatherRows { a, index }, &[a])
    }

    /// Rows `start..start + count` along axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var, TensorError> {
        let index: Arc<[usize]> = (start..start + count).collect();
        self.gather_rows(a, index)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let (r, c) = self.matrix_dims("slice_cols", a)?;
        if width == 0 || start + width > c {
            return Err(TensorError::shape("slice_cols", format!("columns {start}..{} of {c}", start + width)));
        }
        let v = self.value(a).data();
        let data = (0..r).flat_map(|row| v[row * c + start..row * c + start + width].iter().copied()).collect();
        self.push("slice_cols", Tensor::from_parts(vec![r, width], data), Op::SliceCols { a, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape { a }, &[a])
    }

    // ---------------------------------------------------------------- attention

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: Tq × (heads·dh)`, `k, v: Tk × (heads·dh)`. Rows are split into
    /// `groups` contiguous blocks and queries of block `i` attend only to keys
    /// of block `i`; with `groups == 1` this is ordinary attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: usize) -> Result<Var, TensorError> {
        let (tq, width) = self.matrix_dims("attention", q)?;
        let (tk, wk) = self.matrix_dims("attention", k)?;
        if self.shape(v) != [tk, wk] || wk != width {
            return Err(TensorError::dims("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || width % heads != 0 || groups == 0 || tq % groups != 0 || tk % groups != 0 {
            return Err(TensorError::shape(
                "attention",
                format!("width {width}, {heads} heads, {groups} groups over {tq}/{tk} rows"),
            ));
        }
        let dh = width / heads;
        let (bq, bk) = (tq / groups, tk / groups);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; tq * width];
        let mut probs = vec![0.0; groups * heads * bq * bk];
        let mut qh = vec![0.0; bq * dh];
        let mut kt = vec![0.0; dh * bk];
        let mut vh = vec![0.0; bk * dh];
        let mut oh = vec![0.0; bq * dh];
        for g in 0..groups {
            for h in 0..heads {
                copy_block(qd, width, g * bq, bq, h * dh, dh, &mut qh);
                for r in 0..bk {
                    for c in 0..dh {
                        kt[c * bk + r] = kd[(g * bk + r) * width + h * dh + c];
                    }
                }
                copy_block(vd, width, g * bk, bk, h * dh, dh, &mut vh);
                let p = &mut probs[(g * heads + h) * bq * bk..][..bq * bk];
                p.fill(0.0);
                gemm(bq, dh, bk, &qh, &kt, p);
                for row in p.chunks_exact_mut(bk) {
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                    let mut total = 0.0;
                    for x in row.iter_mut() {
                        *x = exp(*x * scale - max);
                        total += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= total);
                }
                oh.fill(0.0);
                gemm(bq, bk, dh, p, &vh, &mut oh);
                for r in 0..bq {
                    out[(g * bq + r) * width + h * dh..][..dh].copy_from_slice(&oh[r * dh..(r + 1) * dh]);
                }
            }
        }
        let saved = AttentionSaved {
            q,
            k,
            v,
            heads,
            groups,
            scale,
            probs,
        };
        self.push(
            "attention",
            Tensor::from_parts(vec![tq, width], out),
            Op::Attention(Box::new(saved)),
            &[q, k, v],
        )
    }

    /// Per-row gate `(cos(z_j, xi) + 1) / 2`; zero rows get 0.
    pub fn cosine_gate(&mut self, z: Var, xi: Var) -> Result<Var, TensorError> {
        let (n, d) = self.matrix_dims("cosine_gate", z)?;
        if self.shape(xi) != [d] {
            return Err(TensorError::dims("cosine_gate", self.shape(z), self.shape(xi)));
        }
        let xv = self.value(xi).data();
        let xi_norm = norm(xv);
        if xi_norm == 0.0 {
            return Err(TensorError::Contract("cosine_gate: task embedding has zero norm".into()));
        }
        let zv = self.value(z).data();
        let gate = zv
            .chunks_exact(d)
            .map(|row| {
                let zn = norm(row);
                if zn == 0.0 {
                    0.0
                } else {
                    (dot(row, xv) / (zn * xi_norm) + 1.0) / 2.0
                }
            })
            .collect();
        self.push("cosine_gate", Tensor::from_parts(vec![n], gate), Op::CosineGate { z, xi }, &[z, xi])
    }

    // ---------------------------------------------------------------- complex / spectral

    /// Real tensor → interleaved complex tensor (trailing extent 2, zero imaginary part).
    pub fn to_complex(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let mut shape = v.shape().to_vec();
        shape.push(2);
        let data = v.data().iter().flat_map(|&x| [x, 0.0]).collect();
        self.push("to_complex", Tensor::from_parts(shape, data), Op::ToComplex { a }, &[a])
    }

    /// Real part of an interleaved complex tensor.
    pub fn real_part(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let shape = complex_shape("real_part", v.shape())?;
        let data = v.data().iter().step_by(2).copied().collect();
        self.push("real_part", Tensor::from_parts(shape, data), Op::RealPart { a }, &[a])
    }

    /// Elementwise complex product of two interleaved tensors.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        complex_shape("complex_mul", av.shape())?;
        if av.shape() != bv.shape() {
            return Err(TensorError::dims("complex_mul", av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .chunks_exact(2)
            .zip(bv.data().chunks_exact(2))
            .flat_map(|(x, y)| [x[0] * y[0] - x[1] * y[1], x[0] * y[1] + x[1] * y[0]])
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("complex_mul", out, Op::ComplexMul { a, b }, &[a, b])
    }

    /// Per-channel 2D DFT of an interleaved `[G, G, D, 2]` tensor.
    /// Forward is unnormalized; inverse scales by `1 / G²`.
    pub fn dft2(&mut self, x: Var, inverse: bool) -> Result<Var, TensorError> {
        let name = if inverse { "ifft2" } else { "fft2" };
        let v = self.value(x);
        let grid = complex_shape(name, v.shape())?;
        let (side, channels) = grid_dims(name, &grid)?;
        let (mut re, mut im) = deinterleave(v.data());
        dft2_planes(&mut re, &mut im, side, channels, inverse);
        if inverse {
            let s = 1.0 / (side * side) as f64;
            re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= s);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), interleave(&re, &im));
        self.push(name, out, Op::Dft2 { x, inverse }, &[x])
    }

    // ---------------------------------------------------------------- image ops

    /// Separable resampling of `[C, H, W]` with precomputed per-axis weights.
    pub fn resize(&mut self, a: Var, rows: Arc<AxisWeights>, cols: Arc<AxisWeights>) -> Result<Var, TensorError> {
        let v = self.value(a);
        let [c, h, w] = *v.shape() else {
            return Err(TensorError::shape("resize", format!("expected [C, H, W], got {:?}", v.shape())));
        };
        if h != rows.input || w != cols.input {
            return Err(TensorError::shape("resize", format!("weights expect {}×{}, got {h}×{w}", rows.input, cols.input)));
        }
        let (oh, ow) = (rows.output(), cols.output());
        let x = v.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in rows.taps.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in cols.taps.iter().enumerate() {
                    out[(ch * oh + oy) * ow + ox] = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                        + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
                }
            }
        }
        self.push("resize", Tensor::from_parts(vec![c, oh, ow], out), Op::Resize { a, rows, cols }, &[a])
    }

    /// Mean over every fully contained `k × k` window of `[C, H, W]`.
    pub fn box_mean(&mut self, a: Var, k: usize) -> Result<Var, TensorError> {
        let v = self.value(a);
        let [c, h, w] = *v.shape() else {
            return Err(TensorError::shape("box_mean", format!("expected [C, H, W], got {:?}", v.shape())));
        };
        if k == 0 || k > h || k > w {
            return Err(TensorError::shape("box_mean", format!("window {k} does not fit {h}×{w}")));
        }
        let (oh, ow) = (h - k + 1, w - k + 1);
        let norm = 1.0 / (k * k) as f64;
        let x = v.data();
        let mut out = vec![0.0; c * oh * ow];
        let mut horiz = vec![0.0; h * ow];
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for ox in 0..ow {
                    horiz[y * ow + ox] = plane[y * w + ox..y * w + ox + k].iter().sum();
                }
            }
            for oy in 0..oh {
                for ox in 0..ow {
                    let s: f64 = (oy..oy + k).map(|y| horiz[y * ow + ox]).sum();
                    out[(ch * oh + oy) * ow + ox] = s * norm;
                }
            }
        }
        self.push("box_mean", Tensor::from_parts(vec![c, oh, ow], out), Op::BoxMean { a, k }, &[a])
    }

    /// Mean focal loss over pixels with a target. `probs: C × P`.
    pub fn focal_loss(&mut self, probs: Var, targets: Arc<[Option<usize>]>, gamma: f64) -> Result<Var, TensorError> {
        let (c, p) = self.matrix_dims("focal_loss", probs)?;
        if targets.len() != p {
            return Err(TensorError::shape("focal_loss", format!("{} targets for {p} pixels", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(TensorError::Contract(format!("focal_loss: label {bad} not below class count {c}")));
        }
        let pv = self.value(probs).data();
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total += focal_term(pv[t * p + i], gamma).0;
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            "focal_loss",
            Tensor::scalar(loss),
            Op::Focal { probs, targets, gamma, count },
            &[probs],
        )
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a scalar loss. Each node is visited once, in reverse
    /// tape order.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backprop(node, &g, &mut grads);
            if !g.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only keep gradients for nodes that asked for them.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |v: Var| self.value(v).len();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, b_transposed } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = node.value.shape()[1];
                if self.wants(a) {
                    // dA = G · Bᵀ  (B stored as k×n, or n×k when transposed)
                    let bt = if b_transposed {
                        self.value(b).data().to_vec()
                    } else {
                        transpose(self.value(b).data(), k, n)
                    };
                    gemm(m, n, k, g, &bt, accumulate(&mut grads[a.0], m * k));
                }
                if self.wants(b) {
                    let at = transpose(self.value(a).data(), m, k);
                    if b_transposed {
                        // dB = Gᵀ · A  (n×k)
                        let gt = transpose(g, m, n);
                        gemm(n, m, k, &gt, self.value(a).data(), accumulate(&mut grads[b.0], n * k));
                    } else {
                        // dB = Aᵀ · G  (k×n)
                        gemm(k, m, n, &at, g, accumulate(&mut grads[b.0], k * n));
                    }
                }
            }
            &Op::Binary { kind, a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let w = bv.len();
                if self.wants(a) {
                    let ga = accumulate(&mut grads[a.0], av.len());
                    for (o, gr) in ga.chunks_exact_mut(w).zip(g.chunks_exact(w)) {
                        let it = o.iter_mut().zip(gr).zip(bv);
                        match kind {
                            ElementwiseOp::Add | ElementwiseOp::Sub => it.for_each(|((o, gi), _)| *o += gi),
                            ElementwiseOp::Mul => it.for_each(|((o, gi), y)| *o += gi * y),
                            ElementwiseOp::Div => it.for_each(|((o, gi), y)| *o += gi / y),
                        }
                    }
                }
                if self.wants(b) {
                    let gb = accumulate(&mut grads[b.0], w);
                    for (gr, ar) in g.chunks_exact(w).zip(av.chunks_exact(w)) {
                        let it = gb.iter_mut().zip(gr).zip(ar.iter().zip(bv));
                        match kind {
                            ElementwiseOp::Add => it.for_each(|((o, gi), _)| *o += gi),
                            ElementwiseOp::Sub => it.for_each(|((o, gi), _)| *o -= gi),
                            ElementwiseOp::Mul => it.for_each(|((o, gi), (x, _))| *o += gi * x),
                            ElementwiseOp::Div => it.for_each(|((o, gi), (x, y))| *o += -gi * x / (y * y)),
                        }
                    }
                }
            }
            &Op::AddScalar { a } => add_into(accumulate(&mut grads[a.0], g.len()), g, 1.0),
            &Op::MulScalar { a, s } => add_into(accumulate(&mut grads[a.0], g.len()), g, s),
            &Op::ScaleRows { a, s } => {
                let (av, sv) = (self.value(a).data(), self.value(s).data());
                let c = av.len() / sv.len();
                if self.wants(a) {
                    let ga = accumulate(&mut grads[a.0], av.len());
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * sv[i / c];
                    }
                }
                if self.wants(s) {
                    let gs = accumulate(&mut grads[s.0], sv.len());
                    for (i, gi) in g.iter().enumerate() {
                        gs[i / c] += gi * av[i];
                    }
                }
            }
            &Op::Gelu { a } => {
                let av = self.value(a).data();
                let ga = accumulate(&mut grads[a.0], av.len());
                for ((o, &x), gi) in ga.iter_mut().zip(av).zip(g) {
                    *o += gi * gelu(x).1;
                }
            }
            &Op::Sum { a } => {
                let ga = accumulate(&mut grads[a.0], len(a));
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
            &Op::Mean { a } => {
                let n = len(a);
                let ga = accumulate(&mut grads[a.0], n);
                let s = g[0] / n as f64;
                ga.iter_mut().for_each(|o| *o += s);
            }
            &Op::Softmax { a, outer, len: l, inner } => {
                let y = node.value.data();
                let ga = accumulate(&mut grads[a.0], y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| (o * l + t) * inner + i;
                        let dot: f64 = (0..l).map(|t| g[at(t)] * y[at(t)]).sum();
                        for t in 0..l {
                            ga[at(t)] += y[at(t)] * (g[at(t)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let y = node.value.data();
                let c = y.len() / inv_std.len();
                let ga = accumulate(&mut grads[a.0], y.len());
                for (r, &is) in inv_std.iter().enumerate() {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        ga[r * c + j] += is * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = len(p);
                    if self.wants(p) {
                        add_into(accumulate(&mut grads[p.0], n), &g[offset..offset + n], 1.0);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        let gp = accumulate(&mut grads[p.0], rows * w);
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w], 1.0);
                        }
                    }
                    col += w;
                }
            }
            Op::GatherRows { a, index } => {
                let c = self.value(*a).cols();
                let ga = accumulate(&mut grads[a.0], len(*a));
                for (o, &i) in index.iter().enumerate() {
                    add_into(&mut ga[i * c..(i + 1) * c], &g[o * c..(o + 1) * c], 1.0);
                }
            }
            &Op::SliceCols { a, start } => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                let w = node.value.shape()[1];
                let ga = accumulate(&mut grads[a.0], r * c);
                for row in 0..r {
                    add_into(&mut ga[row * c + start..row * c + start + w], &g[row * w..(row + 1) * w], 1.0);
                }
            }
            &Op::Reshape { a } => add_into(accumulate(&mut grads[a.0], g.len()), g, 1.0),
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
            &Op::CosineGate { z, xi } => {
                let (zv, xv) = (self.value(z).data(), self.value(xi).data());
                let d = xv.len();
                let xn = norm(xv);
                let mut gz = self.wants(z).then(|| vec![0.0; zv.len()]);
                let mut gx = self.wants(xi).then(|| vec![0.0; d]);
                for (j, row) in zv.chunks_exact(d).enumerate() {
                    let zn = norm(row);
                    if zn == 0.0 {
                        continue;
                    }
                    let cos = dot(row, xv) / (zn * xn);
                    let s = 0.5 * g[j];
                    if let Some(gz) = gz.as_mut() {
                        for t in 0..d {
                            gz[j * d + t] += s * (xv[t] / (zn * xn) - cos * row[t] / (zn * zn));
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        for t in 0..d {
                            gx[t] += s * (row[t] / (zn * xn) - cos * xv[t] / (xn * xn));
                        }
                    }
                }
                if let Some(gz) = gz {
                    add_into(accumulate(&mut grads[z.0], zv.len()), &gz, 1.0);
                }
                if let Some(gx) = gx {
                    add_into(accumulate(&mut grads[xi.0], d), &gx, 1.0);
                }
            }
            &Op::Dft2 { x, inverse } => {
                // Adjoint of a DFT is the conjugate transform.
                let shape = self.shape(x);
                let (side, channels) = (shape[0], shape[2]);
                let (mut re, mut im) = deinterleave(g);
                dft2_planes(&mut re, &mut im, side, channels, !inverse);
                if inverse {
                    let s = 1.0 / (side * side) as f64;
                    re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= s);
                }
                add_into(accumulate(&mut grads[x.0], g.len()), &interleave(&re, &im), 1.0);
            }
            &Op::ToComplex { a } => {
                let ga = accumulate(&mut grads[a.0], len(a));
                for (o, pair) in ga.iter_mut().zip(g.chunks_exact(2)) {
                    *o += pair[0];
                }
            }
            &Op::RealPart { a } => {
                let ga = accumulate(&mut grads[a.0], len(a));
                for (pair, gi) in ga.chunks_exact_mut(2).zip(g) {
                    pair[0] += gi;
                }
            }
            &Op::ComplexMul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                // d/da = g · conj(b), d/db = g · conj(a)
                for (target, other) in [(a, bv), (b, av)] {
                    if !self.wants(target) {
                        continue;
                    }
                    let gt = accumulate(&mut grads[target.0], g.len());
                    for ((o, gp), y) in gt.chunks_exact_mut(2).zip(g.chunks_exact(2)).zip(other.chunks_exact(2)) {
                        o[0] += gp[0] * y[0] + gp[1] * y[1];
                        o[1] += gp[1] * y[0] - gp[0] * y[1];
                    }
                }
            }
            Op::Resize { a, rows, cols } => {
                let [c, h, w] = *self.shape(*a) else { unreachable!() };
                let (oh, ow) = (rows.output(), cols.output());
                let ga = accumulate(&mut grads[a.0], c * h * w);
                for ch in 0..c {
                    let plane = &mut ga[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, wy0, wy1)) in rows.taps.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in cols.taps.iter().enumerate() {
                            let gi = g[(ch * oh + oy) * ow + ox];
                            plane[y0 * w + x0] += gi * wy0 * wx0;
                            plane[y0 * w + x1] += gi * wy0 * wx1;
                            plane[y1 * w + x0] += gi * wy1 * wx0;
                            plane[y1 * w + x1] += gi * wy1 * wx1;
                        }
                    }
                }
            }
            &Op::BoxMean { a, k } => {
                let [c, h, w] = *self.shape(a) else { unreachable!() };
                let (oh, ow) = (h - k + 1, w - k + 1);
                let norm = 1.0 / (k * k) as f64;
                let ga = accumulate(&mut grads[a.0], c * h * w);
                let mut vert = vec![0.0; h * ow];
                for ch in 0..c {
                    vert.fill(0.0);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gi = g[(ch * oh + oy) * ow + ox] * norm;
                            for y in oy..oy + k {
                                vert[y * ow + ox] += gi;
                            }
                        }
                    }
                    let plane = &mut ga[ch * h * w..(ch + 1) * h * w];
                    for y in 0..h {
                        for ox in 0..ow {
                            let gi = vert[y * ow + ox];
                            plane[y * w + ox..y * w + ox + k].iter_mut().for_each(|v| *v += gi);
                        }
                    }
                }
            }
            Op::Focal { probs, targets, gamma, count } => {
                if *count == 0 {
                    return;
                }
                let pv = self.value(*probs).data();
                let p = targets.len();
                let scale = g[0] / *count as f64;
                let gp = accumulate(&mut grads[probs.0], pv.len());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        gp[t * p + i] += scale * focal_term(pv[t * p + i], *gamma).1;
                    }
                }
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (tq, width) = (self.shape(s.q)[0], self.shape(s.q)[1]);
        let tk = self.shape(s.k)[0];
        let dh = width / s.heads;
        let (bq, bk) = (tq / s.groups, tk / s.groups);
        let (qd, kd, vd) = (self.value(s.q).data(), self.value(s.k).data(), self.value(s.v).data());
        let mut dq = vec![0.0; tq * width];
        let mut dk = vec![0.0; tk * width];
        let mut dv = vec![0.0; tk * width];
        let mut go = vec![0.0; bq * dh];
        let mut qh = vec![0.0; bq * dh];
        let mut kh = vec![0.0; bk * dh];
        let mut vh = vec![0.0; bk * dh];
        let mut dp = vec![0.0; bq * bk];
        let mut blk_q = vec![0.0; bq * dh];
        let mut blk_kv = vec![0.0; bk * dh];
        for grp in 0..s.groups {
            for h in 0..s.heads {
                let p = &s.probs[(grp * s.heads + h) * bq * bk..][..bq * bk];
                copy_block(g, width, grp * bq, bq, h * dh, dh, &mut go);
                copy_block(qd, width, grp * bq, bq, h * dh, dh, &mut qh);
                copy_block(kd, width, grp * bk, bk, h * dh, dh, &mut kh);
                copy_block(vd, width, grp * bk, bk, h * dh, dh, &mut vh);
                // dP = dO · Vᵀ
                let vt = transpose(&vh, bk, dh);
                dp.fill(0.0);
                gemm(bq, dh, bk, &go, &vt, &mut dp);
                // dV = Pᵀ · dO
                let pt = transpose(p, bq, bk);
                blk_kv.fill(0.0);
                gemm(bk, bq, dh, &pt, &go, &mut blk_kv);
                scatter_block(&blk_kv, width, grp * bk, bk, h * dh, dh, &mut dv);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
                for (prow, drow) in p.chunks_exact(bk).zip(dp.chunks_exact_mut(bk)) {
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (d, &pv) in drow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot) * s.scale;
                    }
                }
                blk_q.fill(0.0);
                gemm(bq, bk, dh, &dp, &kh, &mut blk_q);
                scatter_block(&blk_q, width, grp * bq, bq, h * dh, dh, &mut dq);
                let dst = transpose(&dp, bq, bk);
                blk_kv.fill(0.0);
                gemm(bk, bq, dh, &dst, &qh, &mut blk_kv);
                scatter_block(&blk_kv, width, grp * bk, bk, h * dh, dh, &mut dk);
            }
        }
        for (v, d) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
            if self.wants(v) {
                add_into(accumulate(&mut grads[v.0], d.len()), &d, 1.0);
            }
        }
    }
}

fn copy_block(src: &[f64], width: usize, row0: usize, rows: usize, col0: usize, cols: usize, dst: &mut [f64]) {
    for r in 0..rows {
        dst[r * cols..(r + 1) * cols].copy_from_slice(&src[(row0 + r) * width + col0..][..cols]);
    }
}

fn scatter_block(src: &[f64], width: usize, row0: usize, rows: usize, col0: usize, cols: usize, dst: &mut [f64]) {
    for r in 0..rows {
        add_into(&mut dst[(row0 + r) * width + col0..][..cols], &src[r * cols..(r + 1) * cols], 1.0);
    }
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn complex_shape(op: &'static str, shape: &[usize]) -> Result<Vec<usize>, TensorError> {
    match shape.split_last() {
        Some((2, rest)) if !rest.is_empty() => Ok(rest.to_vec()),
        _ => Err(TensorError::shape(op, format!("expected trailing complex axis of extent 2, got {shape:?}"))),
    }
}

fn deinterleave(data: &[f64]) -> (Vec<f64>, Vec<f64>) {
    data.chunks_exact(2).map(|p| (p[0], p[1])).unzip()
}

fn interleave(re: &[f64], im: &[f64]) -> Vec<f64> {
    re.iter().zip(im).flat_map(|(&r, &i)| [r, i]).collect()
}

/// `e^x` by range reduction to `|r| <= ln2 / 2` and a degree-13 Taylor
/// polynomial. Within a few ulp of `f64::exp`, several times cheaper.
#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    if !(-708.0..=709.0).contains(&x) {
        return x.exp();
    }
    let k = (x * std::f64::consts::LOG2_E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for d in [479_001_600.0, 39_916_800.0, 3_628_800.0, 362_880.0, 40_320.0, 5040.0, 720.0, 120.0, 24.0, 6.0, 2.0, 1.0, 1.0] {
        p = p * r + 1.0 / d;
    }
    p * f64::from_bits(((k as i64 + 1023) as u64) << 52)
}

/// GELU value and derivative (tanh approximation).
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    // tanh(u) = 1 - 2 / (e^{2u} + 1); exp is markedly cheaper than tanh here
    let t = 1.0 - 2.0 / (exp(2.0 * u) + 1.0);
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (value, deriv)
}

pub(crate) const FOCAL_EPS: f64 = 1e-12;

/// Focal term `-(1 - p)^γ ln p` with `p` clamped to `[1e-12, 1]`, and its
/// derivative in `p` (zero where the clamp is active).
pub(crate) fn focal_term(p: f64, gamma: f64) -> (f64, f64) {
    let clamped = p.clamp(FOCAL_EPS, 1.0);
    let q = 1.0 - clamped;
    let log_p = clamped.ln();
    let value = -q.powf(gamma) * log_p;
    if !(FOCAL_EPS..=1.0).contains(&p) {
        return (value, 0.0);
    }
    let pow_term = if q == 0.0 || gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * log_p
    };
    (value, pow_term - q.powf(gamma) / clamped)
}
