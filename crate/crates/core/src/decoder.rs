//! Spectral-guided decoder: HiLo attention layers with frequency-guided token
//! selection, a class/image relationship descriptor, and mask logits
//! `t̂ · ẑᵀ`.

use crate::config::DecoderConfig;
use crate::encoder::transformer_block;
use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::metrics::LabelMap;
use crate::params::{Binder, ParamStore};
use crate::spectral::grid_side;
use crate::tensor::Tensor;
use rand::Rng;
use std::sync::Arc;

const LN_EPS: f64 = 1e-6;

fn layer_prefix(i: usize) -> String {
    format!("decoder.layer{i}")
}

fn linear_init<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    s.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng), true);
    s.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]), true);
}

/// HiLo attention weights under `prefix`.
pub fn init_hilo<R: Rng + ?Sized>(s: &mut ParamStore, prefix: &str, width: usize, heads: usize, high_heads: usize, rng: &mut R) {
    let dh = width / heads;
    let (hi, lo) = (high_heads * dh, (heads - high_heads) * dh);
    if hi > 0 {
        linear_init(s, &format!("{prefix}.hi.qkv"), width, 3 * hi, rng);
    }
    if lo > 0 {
        linear_init(s, &format!("{prefix}.lo.q"), width, lo, rng);
        linear_init(s, &format!("{prefix}.lo.kv"), width, 2 * lo, rng);
    }
    linear_init(s, &format!("{prefix}.out"), width, width, rng);
}

/// Trainable decoder parameters.
pub fn init_decoder<R: Rng + ?Sized>(cfg: &DecoderConfig, width: usize, rng: &mut R) -> ParamStore {
    let mut s = ParamStore::new();
    let hidden = width * cfg.mlp_ratio;
    let high = cfg.high_heads().expect("validated decoder config");
    for i in 1..=cfg.layers {
        let p = layer_prefix(i);
        for ln in ["ln1", "ln2"] {
            s.insert(format!("{p}.{ln}.g"), Tensor::ones(&[width]), true);
            s.insert(format!("{p}.{ln}.b"), Tensor::zeros(&[width]), true);
        }
        if cfg.spectral_guided {
            init_hilo(&mut s, &format!("{p}.hilo"), width, cfg.heads, high, rng);
            let xi = Tensor::randn(&[width], 1.0, rng);
            let norm = xi.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let xi = Tensor::from_parts(vec![width], xi.data().iter().map(|v| v / norm).collect());
            s.insert(format!("{p}.freq.xi"), xi, true);
            let mut proj = Tensor::randn(&[width, width], 0.02, rng);
            for j in 0..width {
                proj.data_mut()[j * width + j] += 1.0;
            }
            s.insert(format!("{p}.freq.p"), proj, true);
        } else {
            linear_init(&mut s, &format!("{p}.qkv"), width, 3 * width, rng);
            linear_init(&mut s, &format!("{p}.out"), width, width, rng);
        }
        linear_init(&mut s, &format!("{p}.fc1"), width, hidden, rng);
        linear_init(&mut s, &format!("{p}.fc2"), hidden, width, rng);
    }
    linear_init(&mut s, "decoder.phi", 2 * width, width, rng);
    s
}

/// Token order that lists each `window × window` block of a `side × side`
/// grid contiguously, blocks in row-major order.
pub fn window_order(side: usize, window: usize) -> Vec<usize> {
    let per = side / window;
    let mut order = Vec::with_capacity(side * side);
    for wy in 0..per {
        for wx in 0..per {
            for iy in 0..window {
                for ix in 0..window {
                    order.push((wy * window + iy) * side + wx * window + ix);
                }
            }
        }
    }
    order
}

fn inverse_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// `(side / window)² × side²` matrix averaging each window into one token.
pub fn window_pool_matrix(side: usize, window: usize) -> Tensor {
    let per = side / window;
    let n = side * side;
    let mut m = Tensor::zeros(&[per * per, n]);
    let w = 1.0 / (window * window) as f64;
    for (t, &tok) in window_order(side, window).iter().enumerate() {
        let win = t / (window * window);
        m.data_mut()[win * n + tok] = w;
    }
    m
}

fn check_grid(op: &'static str, g: &Graph, x: Var, window: usize) -> Result<(usize, usize), TensorError> {
    let [n, d] = *g.shape(x) else {
        return Err(TensorError::shape(op, format!("expected N × D tokens, got {:?}", g.shape(x))));
    };
    let side = grid_side(n).map_err(|_| TensorError::shape(op, format!("{n} tokens do not form a square grid")))?;
    if window == 0 || side % window != 0 {
        return Err(TensorError::shape(op, format!("grid side {side} not divisible by window {window}")));
    }
    Ok((side, d))
}

/// High-frequency branch: self-attention inside each non-overlapping window,
/// with `heads` heads of width `D / total_heads`. Output `N × heads·dh`.
fn high_branch(g: &mut Graph, b: &mut Binder, x: Var, heads: usize, window: usize, prefix: &str) -> Result<Var, TensorError> {
    let (side, _) = check_grid("hilo_attention", g, x, window)?;
    let (w, bias) = (b.var(g, &format!("{prefix}.hi.qkv.w"))?, b.var(g, &format!("{prefix}.hi.qkv.b"))?);
    let qkv = g.linear(x, w, Some(bias))?;
    let order = window_order(side, window);
    let inv: Arc<[usize]> = inverse_permutation(&order).into();
    let windowed = g.gather_rows(qkv, order.into())?;
    let width = g.shape(qkv)[1] / 3;
    let q = g.slice_cols(windowed, 0, width)?;
    let k = g.slice_cols(windowed, width, width)?;
    let v = g.slice_cols(windowed, 2 * width, width)?;
    let groups = (side / window) * (side / window);
    let out = g.attention(q, k, v, heads, groups)?;
    g.gather_rows(out, inv)
}

/// Low-frequency branch: queries from every token, keys and values from
/// window-averaged tokens. Output `N × heads·dh`.
fn low_branch(g: &mut Graph, b: &mut Binder, x: Var, heads: usize, window: usize, prefix: &str) -> Result<Var, TensorError> {
    let (side, _) = check_grid("hilo_attention", g, x, window)?;
    let pool = g.constant(window_pool_matrix(side, window));
    let pooled = g.matmul(pool, x)?;
    let (wq, bq) = (b.var(g, &format!("{prefix}.lo.q.w"))?, b.var(g, &format!("{prefix}.lo.q.b"))?);
    let q = g.linear(x, wq, Some(bq))?;
    let (wkv, bkv) = (b.var(g, &format!("{prefix}.lo.kv.w"))?, b.var(g, &format!("{prefix}.lo.kv.b"))?);
    let kv = g.linear(pooled, wkv, Some(bkv))?;
    let width = g.shape(q)[1];
    let k = g.slice_cols(kv, 0, width)?;
    let v = g.slice_cols(kv, width, width)?;
    g.attention(q, k, v, heads, 1)
}

fn project(g: &mut Graph, b: &mut Binder, z: Var, prefix: &str) -> Result<Var, TensorError> {
    let (w, bias) = (b.var(g, &format!("{prefix}.out.w"))?, b.var(g, &format!("{prefix}.out.b"))?);
    g.linear(z, w, Some(bias))
}

/// HiLo attention over `x: N × D` laid out on a square grid.
///
/// `high_heads` of the `heads` heads attend within `window × window` blocks;
/// the rest attend from every token to window-pooled tokens. Branch outputs
/// are concatenated on the channel axis and projected back to `D`.
pub fn hilo_attention(
    g: &mut Graph,
    b: &mut Binder,
    x: Var,
    heads: usize,
    high_heads: usize,
    window: usize,
    prefix: &str,
) -> Result<Var, TensorError> {
    if high_heads > heads {
        return Err(TensorError::Contract(format!("{high_heads} high heads exceed {heads} heads")));
    }
    let mut parts = Vec::with_capacity(2);
    if high_heads > 0 {
        parts.push(high_branch(g, b, x, high_heads, window, prefix)?);
    }
    if heads > high_heads {
        parts.push(low_branch(g, b, x, heads - high_heads, window, prefix)?);
    }
    let z = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
    project(g, b, z, prefix)
}

/// Windowed self-attention with every head (the `alpha = 1` case), standalone.
pub fn windowed_attention(g: &mut Graph, b: &mut Binder, x: Var, heads: usize, window: usize, prefix: &str) -> Result<Var, TensorError> {
    let z = high_branch(g, b, x, heads, window, prefix)?;
    project(g, b, z, prefix)
}

/// Pooled-key attention with every head (the `alpha = 0` case), standalone.
pub fn pooled_attention(g: &mut Graph, b: &mut Binder, x: Var, heads: usize, window: usize, prefix: &str) -> Result<Var, TensorError> {
    let z = low_branch(g, b, x, heads, window, prefix)?;
    project(g, b, z, prefix)
}

/// Frequency-guided selection: `ẑ_j = s_j · P z_j` with
/// `s_j = (cos(z_j, ξ) + 1) / 2`.
pub fn freq_select(g: &mut Graph, z: Var, xi: Var, proj: Var) -> Result<Var, TensorError> {
    let gate = g.cosine_gate(z, xi)?;
    let pz = g.matmul_nt(z, proj)?;
    g.scale_rows(pz, gate)
}

/// `t̂ = φ([t ⊙ g ; t])` for class embeddings `t: C × D` and cls feature `g: [D]`.
pub fn relationship_descriptor(g: &mut Graph, t: Var, cls: Var, w: Var, bias: Var) -> Result<Var, TensorError> {
    let tg = g.mul(t, cls)?;
    let cat = g.concat_cols(&[tg, t])?;
    g.linear(cat, w, Some(bias))
}

fn norm_affine(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str) -> Result<Var, TensorError> {
    let n = g.layer_norm(x, LN_EPS)?;
    let (gain, bias) = (b.var(g, &format!("{prefix}.g"))?, b.var(g, &format!("{prefix}.b"))?);
    let s = g.mul(n, gain)?;
    g.add(s, bias)
}

/// One spectral-guided decode layer: HiLo attention and MLP, both residual,
/// followed by frequency-guided selection.
pub fn decode_layer(g: &mut Graph, b: &mut Binder, cfg: &DecoderConfig, i: usize, z: Var) -> Result<Var, TensorError> {
    let p = layer_prefix(i);
    if !cfg.spectral_guided {
        return transformer_block(g, b, z, cfg.heads, &p);
    }
    let high = cfg
        .high_heads()
        .ok_or_else(|| TensorError::Contract(format!("alpha {} gives a fractional head split", cfg.alpha)))?;
    let y = norm_affine(g, b, z, &format!("{p}.ln1"))?;
    let att = hilo_attention(g, b, y, cfg.heads, high, cfg.window, &format!("{p}.hilo"))?;
    let x1 = g.add(z, att)?;
    let y2 = norm_affine(g, b, x1, &format!("{p}.ln2"))?;
    let (w1, b1) = (b.var(g, &format!("{p}.fc1.w"))?, b.var(g, &format!("{p}.fc1.b"))?);
    let hid = g.linear(y2, w1, Some(b1))?;
    let act = g.gelu(hid)?;
    let (w2, b2) = (b.var(g, &format!("{p}.fc2.w"))?, b.var(g, &format!("{p}.fc2.b"))?);
    let m = g.linear(act, w2, Some(b2))?;
    let x2 = g.add(x1, m)?;
    let xi = b.var(g, &format!("{p}.freq.xi"))?;
    let proj = b.var(g, &format!("{p}.freq.p"))?;
    freq_select(g, x2, xi, proj)
}

/// Mask logits `C × N` from encoder outputs and class embeddings `t: C × D`.
pub fn decode(g: &mut Graph, b: &mut Binder, cfg: &DecoderConfig, patches: Var, cls: Var, t: Var) -> Result<Var, TensorError> {
    if g.shape(t)[0] < 2 {
        return Err(TensorError::Contract("decode needs at least two classes".into()));
    }
    let mut z = patches;
    for i in 1..=cfg.layers {
        z = decode_layer(g, b, cfg, i, z)?;
    }
    let (w, bias) = (b.var(g, "decoder.phi.w")?, b.var(g, "decoder.phi.b")?);
    let t_hat = relationship_descriptor(g, t, cls, w, bias)?;
    g.matmul_nt(t_hat, z)
}

/// Per-patch argmax over `class_subset`, upsampled to pixels by nearest
/// neighbour. Ties go to the lowest class index.
pub fn predict(masks: &Tensor, class_subset: &[usize], patch: usize) -> Result<LabelMap, TensorError> {
    let [c, n] = *masks.shape() else {
        return Err(TensorError::shape("predict", format!("expected C × N logits, got {:?}", masks.shape())));
    };
    if class_subset.is_empty() {
        return Err(TensorError::Contract("predict: empty class subset".into()));
    }
    if let Some(&bad) = class_subset.iter().find(|&&k| k >= c) {
        return Err(TensorError::Contract(format!("predict: class {bad} outside {c} classes")));
    }
    let side = grid_side(n)?;
    let mut subset = class_subset.to_vec();
    subset.sort_unstable();
    subset.dedup();
    let patch_labels: Vec<usize> = (0..n)
        .map(|j| {
            let mut best = subset[0];
            for &k in &subset[1..] {
                if masks.data()[k * n + j] > masks.data()[best * n + j] {
                    best = k;
                }
            }
            best
        })
        .collect();
    let px = side * patch;
    let labels = (0..px * px)
        .map(|i| {
            let (y, x) = (i / px, i % px);
            patch_labels[(y / patch) * side + x / patch] as u8
        })
        .collect();
    Ok(LabelMap::new(px, px, labels))
}
