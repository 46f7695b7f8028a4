//! Frozen vision-transformer encoder with deep visual prompts and spectral
//! prompts in a configurable range of shallow layers.
//!
//! Layer `l` (1-based) consumes `[g, V, H + S]` when it carries a spectral
//! prompt and `[g, V, H]` otherwise, where `S` is computed from the incoming
//! `H` and `g`. The prompt slot of each layer's output is dropped and replaced
//! by the next layer's own prompt parameters.

use crate::config::EncoderConfig;
use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::params::{Binder, ParamStore};
use crate::spectral::{spectral_prompt, SpectralFilter};
use crate::tensor::Tensor;
use rand::Rng;

const LN_EPS: f64 = 1e-6;
const PROMPT_INIT_STD: f64 = 0.02;
const FILTER_INIT_STD: f64 = 0.02;

/// One layer's token state on a graph: cls token `g: [D]`, prompts `V: M × D`,
/// patch tokens `H: N × D`.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub cls: Var,
    pub prompts: Var,
    pub patches: Var,
}

pub fn prompt_name(layer: usize) -> String {
    format!("encoder.prompt.{layer}")
}

pub fn filter_name(layer: usize) -> String {
    format!("encoder.spt.{layer}")
}

fn layer_param(layer: usize, name: &str) -> String {
    format!("backbone.layer{layer}.{name}")
}

fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut pos = Tensor::zeros(&[n, d]);
    for p in 0..n {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * freq;
            pos.set(&[p, i], if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pos
}

/// Randomly initialized, frozen backbone weights.
pub fn init_backbone<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> ParamStore {
    let d = cfg.width;
    let patch_dim = cfg.patch_size * cfg.patch_size * 3;
    let hidden = d * cfg.mlp_ratio;
    let mut s = ParamStore::new();
    let mut frozen = |name: String, t: Tensor| s.insert(name, t, false);
    frozen("backbone.patch.w".into(), Tensor::randn(&[patch_dim, d], 1.0 / (patch_dim as f64).sqrt(), rng));
    frozen("backbone.patch.b".into(), Tensor::randn(&[d], 0.02, rng));
    frozen("backbone.cls".into(), Tensor::randn(&[d], 0.5, rng));
    frozen("backbone.pos".into(), sinusoidal_positions(cfg.num_patches(), d));
    let std_d = 1.0 / (d as f64).sqrt();
    for l in 1..=cfg.layers {
        frozen(layer_param(l, "ln1.g"), Tensor::ones(&[d]));
        frozen(layer_param(l, "ln1.b"), Tensor::zeros(&[d]));
        frozen(layer_param(l, "qkv.w"), Tensor::randn(&[d, 3 * d], std_d, rng));
        frozen(layer_param(l, "qkv.b"), Tensor::zeros(&[3 * d]));
        frozen(layer_param(l, "out.w"), Tensor::randn(&[d, d], std_d, rng));
        frozen(layer_param(l, "out.b"), Tensor::zeros(&[d]));
        frozen(layer_param(l, "ln2.g"), Tensor::ones(&[d]));
        frozen(layer_param(l, "ln2.b"), Tensor::zeros(&[d]));
        frozen(layer_param(l, "fc1.w"), Tensor::randn(&[d, hidden], std_d, rng));
        frozen(layer_param(l, "fc1.b"), Tensor::zeros(&[hidden]));
        frozen(layer_param(l, "fc2.w"), Tensor::randn(&[hidden, d], 1.0 / (hidden as f64).sqrt(), rng));
        frozen(layer_param(l, "fc2.b"), Tensor::zeros(&[d]));
    }
    frozen("backbone.norm.g".into(), Tensor::ones(&[d]));
    frozen("backbone.norm.b".into(), Tensor::zeros(&[d]));
    s
}

/// Trainable prompt parameters: one `M × D` prompt per layer and one spectral
/// filter per layer in the configured range.
pub fn init_prompts<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> ParamStore {
    let mut s = ParamStore::new();
    for l in 1..=cfg.layers {
        s.insert(prompt_name(l), Tensor::randn(&[cfg.prompt_len, cfg.width], PROMPT_INIT_STD, rng), true);
    }
    for l in cfg.spt_layers() {
        let f = SpectralFilter::init(cfg.grid_side(), cfg.width, FILTER_INIT_STD, rng);
        s.insert(filter_name(l), f.into_tensor(), true);
    }
    s
}

/// Splits an `H × W × 3` image into row-major flattened `P × P × 3` patches.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor, TensorError> {
    let [h, w, 3] = *image.shape() else {
        return Err(TensorError::shape("patch_embed", format!("expected H × W × 3 image, got {:?}", image.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(TensorError::shape(
            "patch_embed",
            format!("image {h}×{w} not divisible by patch size {patch}"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * 3;
    let px = image.data();
    let mut out = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for pxi in 0..gw {
            for dy in 0..patch {
                let row = (py * patch + dy) * w + pxi * patch;
                out.extend_from_slice(&px[row * 3..(row + patch) * 3]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![gh * gw, dim], out))
}

/// Linear patch projection plus fixed position encoding; cls from the frozen
/// embedding; prompts from the layer-1 prompt parameters.
pub fn patch_embed(g: &mut Graph, b: &mut Binder, cfg: &EncoderConfig, image: &Tensor) -> Result<TokenSequence, TensorError> {
    if image.shape() != [cfg.image_side, cfg.image_side, 3] {
        return Err(TensorError::shape(
            "patch_embed",
            format!("expected {0}×{0}×3 image, got {1:?}", cfg.image_side, image.shape()),
        ));
    }
    let patches = g.constant(patchify(image, cfg.patch_size)?);
    let w = b.var(g, "backbone.patch.w")?;
    let bias = b.var(g, "backbone.patch.b")?;
    let pos = b.var(g, "backbone.pos")?;
    let proj = g.linear(patches, w, Some(bias))?;
    let h = g.add(proj, pos)?;
    Ok(TokenSequence {
        cls: b.var(g, "backbone.cls")?,
        prompts: b.var(g, &prompt_name(1))?,
        patches: h,
    })
}

fn norm_affine(g: &mut Graph, b: &mut Binder, x: Var, gain: &str, bias: &str) -> Result<Var, TensorError> {
    let n = g.layer_norm(x, LN_EPS)?;
    let gv = b.var(g, gain)?;
    let bv = b.var(g, bias)?;
    let scaled = g.mul(n, gv)?;
    g.add(scaled, bv)
}

/// Pre-norm transformer block (global multi-head attention + MLP) over a
/// `T × D` token matrix, with weights under `prefix`.
pub(crate) fn transformer_block(
    g: &mut Graph,
    b: &mut Binder,
    x: Var,
    heads: usize,
    prefix: &str,
) -> Result<Var, TensorError> {
    let p = |n: &str| format!("{prefix}.{n}");
    let d = g.shape(x)[1];
    let y = norm_affine(g, b, x, &p("ln1.g"), &p("ln1.b"))?;
    let (wq, bq) = (b.var(g, &p("qkv.w"))?, b.var(g, &p("qkv.b"))?);
    let qkv = g.linear(y, wq, Some(bq))?;
    let q = g.slice_cols(qkv, 0, d)?;
    let k = g.slice_cols(qkv, d, d)?;
    let v = g.slice_cols(qkv, 2 * d, d)?;
    let att = g.attention(q, k, v, heads, 1)?;
    let (wo, bo) = (b.var(g, &p("out.w"))?, b.var(g, &p("out.b"))?);
    let o = g.linear(att, wo, Some(bo))?;
    let x1 = g.add(x, o)?;
    let y2 = norm_affine(g, b, x1, &p("ln2.g"), &p("ln2.b"))?;
    let (w1, b1) = (b.var(g, &p("fc1.w"))?, b.var(g, &p("fc1.b"))?);
    let hid = g.linear(y2, w1, Some(b1))?;
    let act = g.gelu(hid)?;
    let (w2, b2) = (b.var(g, &p("fc2.w"))?, b.var(g, &p("fc2.b"))?);
    let m = g.linear(act, w2, Some(b2))?;
    g.add(x1, m)
}

/// Runs encoder layer `l` (1-based). `spt` is the spectral filter for this
/// layer; supplying one outside the configured range is a contract error.
pub fn encoder_layer(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &EncoderConfig,
    l: usize,
    input: TokenSequence,
    spt: Option<Var>,
) -> Result<TokenSequence, TensorError> {
    if l == 0 || l > cfg.layers {
        return Err(TensorError::Contract(format!("layer {l} outside 1..={}", cfg.layers)));
    }
    if spt.is_some() && !cfg.has_spt(l) {
        return Err(TensorError::Contract(format!(
            "spectral prompt supplied to layer {l}, outside spt_range {:?}",
            cfg.spt_range
        )));
    }
    let d = cfg.width;
    let m = g.shape(input.prompts)[0];
    let n = g.shape(input.patches)[0];
    let patches = match spt {
        Some(w) => {
            let s = spectral_prompt(g, input.patches, input.cls, w)?;
            g.add(input.patches, s)?
        }
        None => input.patches,
    };
    let cls_row = g.reshape(input.cls, &[1, d])?;
    let x = g.concat_rows(&[cls_row, input.prompts, patches])?;
    let y = transformer_block(g, b, x, cfg.heads, &format!("backbone.layer{l}"))?;
    let cls_out = g.slice_rows(y, 0, 1)?;
    let cls = g.reshape(cls_out, &[d])?;
    let patches = g.slice_rows(y, 1 + m, n)?;
    let prompts = if l < cfg.layers {
        b.var(g, &prompt_name(l + 1))?
    } else {
        g.slice_rows(y, 1, m)?
    };
    Ok(TokenSequence { cls, prompts, patches })
}

/// Final cls feature `[D]` and patch features `N × D`.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub cls: Var,
    pub patches: Var,
}

/// Patch embedding, all layers, and the final frozen norm.
pub fn encode(g: &mut Graph, b: &mut Binder, cfg: &EncoderConfig, image: &Tensor) -> Result<Encoded, TensorError> {
    let mut tokens = patch_embed(g, b, cfg, image)?;
    for l in 1..=cfg.layers {
        let spt = if cfg.has_spt(l) && b.store().contains(&filter_name(l)) {
            Some(b.var(g, &filter_name(l))?)
        } else {
            None
        };
        tokens = encoder_layer(g, b, cfg, l, tokens, spt)?;
    }
    let d = cfg.width;
    let n = g.shape(tokens.patches)[0];
    let cls_row = g.reshape(tokens.cls, &[1, d])?;
    let all = g.concat_rows(&[cls_row, tokens.patches])?;
    let normed = norm_affine(g, b, all, "backbone.norm.g", "backbone.norm.b")?;
    let cls_out = g.slice_rows(normed, 0, 1)?;
    Ok(Encoded {
        cls: g.reshape(cls_out, &[d])?,
        patches: g.slice_rows(normed, 1, n)?,
    })
}

/// Value-level encode for inference.
pub fn encode_values(store: &ParamStore, cfg: &EncoderConfig, image: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
    let mut g = Graph::new();
    let mut b = Binder::new(store);
    let e = encode(&mut g, &mut b, cfg, image)?;
    Ok((g.value(e.cls).clone(), g.value(e.patches).clone()))
}
