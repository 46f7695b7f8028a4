//! Built-in oracle suites run by `sptseg verify`.
//!
//! Every check has a stable dotted id so a failure can be named on the
//! command line.

use crate::config::{DecoderConfig, EncoderConfig, LossConfig};
use crate::decoder::{
    decode, freq_select, hilo_attention, init_decoder, init_hilo, pooled_attention, relationship_descriptor, windowed_attention,
};
use crate::encoder::{encoder_layer, filter_name, init_backbone, init_prompts, prompt_name, TokenSequence};
use crate::error::TensorError;
use crate::fft::{fft2_complex, ifft2_complex};
use crate::gradcheck::{check_gradients, GradCheckOptions};
use crate::graph::{Graph, Var};
use crate::loss::{focal_loss, one_hot, pixel_probabilities, ssim_loss, total_loss};
use crate::metrics::{hiou, ConfusionMatrix, LabelMap};
use crate::params::{Binder, ParamStore};
use crate::spectral::spectral_prompt;
use crate::tensor::{ComplexTensor, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

pub const FFT_TOL: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-4;
pub const HIOU_TOL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Fft,
    Grad,
    Hilo,
    Metrics,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fft" => Ok(Suite::Fft),
            "grad" => Ok(Suite::Grad),
            "hilo" => Ok(Suite::Hilo),
            "metrics" => Ok(Suite::Metrics),
            "all" => Ok(Suite::All),
            other => Err(format!("unknown suite `{other}` (expected fft, grad, hilo, metrics or all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub id: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(id: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            id: id.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(id: impl Into<String>, r: Result<Check, TensorError>) -> Check {
        let id = id.into();
        match r {
            Ok(mut c) => {
                c.id = id;
                c
            }
            Err(e) => Check::new(id, false, format!("error: {e}")),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", if self.passed { "PASS" } else { "FAIL" }, self.id, self.detail)
    }
}

pub fn run(suite: Suite) -> Vec<Check> {
    match suite {
        Suite::Fft => fft_suite(),
        Suite::Grad => grad_suite(),
        Suite::Hilo => hilo_suite(),
        Suite::Metrics => metrics_suite(),
        Suite::All => [fft_suite(), grad_suite(), hilo_suite(), metrics_suite()].concat(),
    }
}

// ---- fft ----

fn random_grid(side: usize, channels: usize, rng: &mut ChaCha8Rng) -> ComplexTensor {
    let re = Tensor::uniform(&[side, side, channels], -1.0, 1.0, rng);
    let im = Tensor::uniform(&[side, side, channels], -1.0, 1.0, rng);
    let mut c = ComplexTensor::zeros(&[side, side, channels]);
    c.re_mut().copy_from_slice(re.data());
    c.im_mut().copy_from_slice(im.data());
    c
}

/// Quadruple-loop DFT, one channel at a time.
fn direct_dft2(x: &ComplexTensor) -> ComplexTensor {
    let (side, ch) = (x.shape()[0], x.shape()[2]);
    let mut out = ComplexTensor::zeros(x.shape());
    let n = side as f64;
    for c in 0..ch {
        for u in 0..side {
            for v in 0..side {
                let (mut sr, mut si) = (0.0, 0.0);
                for y in 0..side {
                    for xx in 0..side {
                        let idx = (y * side + xx) * ch + c;
                        let th = -2.0 * PI * ((u * y) as f64 / n + (v * xx) as f64 / n);
                        let (re, im) = (x.re()[idx], x.im()[idx]);
                        sr += re * th.cos() - im * th.sin();
                        si += re * th.sin() + im * th.cos();
                    }
                }
                let o = (u * side + v) * ch + c;
                out.re_mut()[o] = sr;
                out.im_mut()[o] = si;
            }
        }
    }
    out
}

fn max_diff(a: &ComplexTensor, b: &ComplexTensor) -> f64 {
    a.re()
        .iter()
        .zip(b.re())
        .chain(a.im().iter().zip(b.im()))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn fft_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    let (mut round, mut oracle, mut parseval) = (0.0f64, 0.0f64, 0.0f64);
    for side in 1..=12 {
        let x = random_grid(side, 3, &mut rng);
        let f = fft2_complex(&x).expect("square grid");
        let back = ifft2_complex(&f).expect("square grid");
        round = round.max(max_diff(&x, &back));
        oracle = oracle.max(max_diff(&f, &direct_dft2(&x)));
        let energy = |t: &ComplexTensor, c: usize| -> f64 {
            (0..side * side)
                .map(|i| {
                    let k = i * 3 + c;
                    t.re()[k] * t.re()[k] + t.im()[k] * t.im()[k]
                })
                .sum()
        };
        for c in 0..3 {
            let lhs = energy(&x, c);
            let rhs = energy(&f, c) / (side * side) as f64;
            parseval = parseval.max((lhs - rhs).abs());
        }
    }
    out.push(Check::new("fft.roundtrip", round < FFT_TOL, format!("max |x - ifft2(fft2(x))| = {round:.3e}, G = 1..12")));
    out.push(Check::new("fft.direct_oracle", oracle < FFT_TOL, format!("max deviation from direct DFT = {oracle:.3e}, G = 1..12")));
    out.push(Check::new("fft.parseval", parseval < FFT_TOL, format!("max energy mismatch = {parseval:.3e}")));
    out
}

// ---- grad ----

fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(g.shape(v), -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum(p)
}

/// Gradient check over `free` inputs plus the named store parameters, which
/// are rebound to the checked leaves.
fn grad_check<F>(store: &ParamStore, names: &[String], free: Vec<Tensor>, probes: Option<usize>, f: F) -> Result<Check, TensorError>
where
    F: Fn(&mut Graph, &mut Binder, &[Var]) -> Result<Var, TensorError>,
{
    let nfree = free.len();
    let mut inputs = free;
    for n in names {
        inputs.push(store.get(n)?.clone());
    }
    let report = check_gradients(
        |g, vars| {
            let mut b = Binder::new(store);
            for (n, &v) in names.iter().zip(&vars[nfree..]) {
                b.bind(n, v);
            }
            f(g, &mut b, &vars[..nfree])
        },
        &inputs,
        GradCheckOptions {
            step: 1e-5,
            max_probes: probes,
        },
    )?;
    let err = report.max_rel_error();
    Ok(Check::new(
        "",
        report.passes(GRAD_TOL),
        format!(
            "max rel. error {err:.3e} over {} inputs{}",
            report.inputs.len(),
            if report.non_finite { ", non-finite value seen" } else { "" }
        ),
    ))
}

fn names_with_prefix(store: &ParamStore, prefix: &str) -> Vec<String> {
    store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect()
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        width: 8,
        heads: 2,
        patch_size: 2,
        image_side: 8,
        prompt_len: 2,
        spt_range: vec![1, 1],
        mlp_ratio: 2,
    }
}

fn grad_spectral_prompt(rng: &mut ChaCha8Rng) -> Result<Check, TensorError> {
    let (n, d, side) = (16, 3, 4);
    let free = vec![
        Tensor::uniform(&[n, d], -1.0, 1.0, rng),
        Tensor::uniform(&[d], -1.0, 1.0, rng),
        Tensor::uniform(&[side, side, d, 2], -1.0, 1.0, rng),
    ];
    grad_check(&ParamStore::new(), &[], free, None, |g, _, v| {
        let s = spectral_prompt(g, v[0], v[1], v[2])?;
        weighted_sum(g, s, 1)
    })
}

fn grad_encoder_layer(rng: &mut ChaCha8Rng) -> Result<Check, TensorError> {
    let cfg = small_encoder();
    let mut store = init_backbone(&cfg, rng);
    store.merge(init_prompts(&cfg, rng));
    let (n, d, m) = (cfg.num_patches(), cfg.width, cfg.prompt_len);
    let mut names = names_with_prefix(&store, "backbone.layer1.");
    names.push(filter_name(1));
    names.push(prompt_name(1));
    let free = vec![Tensor::uniform(&[n, d], -1.0, 1.0, rng), Tensor::uniform(&[d], -1.0, 1.0, rng)];
    grad_check(&store, &names, free, Some(8), |g, b, v| {
        let prompts = b.var(g, &prompt_name(1))?;
        let spt = b.var(g, &filter_name(1))?;
        let input = TokenSequence {
            cls: v[1],
            prompts,
            patches: v[0],
        };
        let out = encoder_layer(g, b, &cfg, 1, input, Some(spt))?;
        debug_assert_eq!(g.shape(out.prompts), [m, d]);
        let a = weighted_sum(g, out.patches, 2)?;
        let c = weighted_sum(g, out.cls, 3)?;
        g.add(a, c)
    })
}

fn grad_hilo(rng: &mut ChaCha8Rng) -> Result<Check, TensorError> {
    let (side, d, heads, high, window) = (6, 8, 4, 2, 3);
    let mut store = ParamStore::new();
    init_hilo(&mut store, "t", d, heads, high, rng);
    let names = names_with_prefix(&store, "t.");
    let free = vec![Tensor::uniform(&[side * side, d], -1.0, 1.0, rng)];
    grad_check(&store, &names, free, Some(16), |g, b, v| {
        let y = hilo_attention(g, b, v[0], heads, high, window, "t")?;
        weighted_sum(g, y, 4)
    })
}

fn grad_freq_select(rng: &mut ChaCha8Rng) -> Result<Check, TensorError> {
    let (n, d) = (9, 5);
    let free = vec![
        Tensor::uniform(&[n, d], -1.0, 1.0, rng),
        Tensor::uniform(&[d], -1.0, 1.0, rng),
        Tensor::uniform(&[d, d], -1.0, 1.0, rng),
    ];
    grad_check(&ParamStore::new(), &[], free, None, |g, _, v| {
        let z = freq_select(g, v[0], v[1], v[2])?;
        weighted_sum(g, z, 5)
    })
}

fn grad_descriptor(rng: &mut ChaCha8Rng) -> Result<Check, TensorError> {
    let (c, d) = (4, 5);
    let free = vec![
        Tensor::uniform(&[c, d], -1.0, 1.0, rng),
        Tensor::uniform(&[d], -1.0, 1.0, rng),
        Tensor::uniform(&[2 * d, d], -1.0, 1.0, rng),
        Tensor::uniform(&[d], -1.0, 1.0, rng),
    ];
    grad_check(&ParamStore::new(), &[], free, None, |g, _, v| {
        let t = relationship_descriptor(g, v[0], v[1], v[2], v[3])?;
        weighted_sum(g, t, 6)
    })
}

fn small_decoder() -> DecoderConfig {
    DecoderConfig {
        heads: 2,
        alpha: 0.5,
        window: 3,
        layers: 2,
        spectral_guided: true,
        mlp_ratio: 2,
    }
}

fn grad_decode(rng: &mut ChaCha8Rng, with_loss: bool) -> Result<Check, TensorError> {
    let (side, d, c) = (12, 8, 4);
    let cfg = small_decoder();
    let store = init_decoder(&cfg, d, rng);
    let names: Vec<String> = store.names().map(String::from).collect();
    let free = vec![
        Tensor::uniform(&[side * side, d], -1.0, 1.0, rng),
        Tensor::uniform(&[d], -1.0, 1.0, rng),
        Tensor::uniform(&[c, d], -1.0, 1.0, rng),
    ];
    let out_side = 2 * side;
    let targets: Arc<[Option<usize>]> = (0..out_side * out_side)
        .map(|i| if i % 11 == 0 { None } else { Some(rng.random_range(0..c)) })
        .collect();
    let loss_cfg = LossConfig::default();
    grad_check(&store, &names, free, Some(6), |g, b, v| {
        let masks = decode(g, b, &cfg, v[0], v[1], v[2])?;
        if !with_loss {
            return weighted_sum(g, masks, 7);
        }
        let probs = pixel_probabilities(g, masks, side, out_side)?;
        let onehot = g.constant(one_hot(&targets, c, out_side, out_side));
        Ok(total_loss(g, probs, onehot, targets.clone(), &loss_cfg)?.total)
    })
}

fn grad_focal(rng: &mut ChaCha8Rng) -> Result<Check, TensorError> {
    let (c, p) = (3, 20);
    let targets: Arc<[Option<usize>]> = (0..p).map(|i| if i == 4 { None } else { Some(rng.random_range(0..c)) }).collect();
    let free = vec![Tensor::uniform(&[c, p], -2.0, 2.0, rng)];
    grad_check(&ParamStore::new(), &[], free, None, |g, _, v| {
        let probs = g.softmax(v[0], 0)?;
        focal_loss(g, probs, targets.clone(), 2.0)
    })
}

fn grad_ssim(rng: &mut ChaCha8Rng) -> Result<Check, TensorError> {
    let free = vec![Tensor::uniform(&[2, 9, 9], 0.0, 1.0, rng), Tensor::uniform(&[2, 9, 9], 0.0, 1.0, rng)];
    let cfg = LossConfig::default();
    grad_check(&ParamStore::new(), &[], free, None, |g, _, v| ssim_loss(g, v[0], v[1], &cfg))
}

fn grad_total(rng: &mut ChaCha8Rng) -> Result<Check, TensorError> {
    let (c, grid, side) = (3, 4, 12);
    let targets: Arc<[Option<usize>]> = (0..side * side)
        .map(|i| if i % 7 == 0 { None } else { Some(rng.random_range(0..c)) })
        .collect();
    let cfg = LossConfig::default();
    let free = vec![Tensor::uniform(&[c, grid * grid], -2.0, 2.0, rng)];
    grad_check(&ParamStore::new(), &[], free, None, |g, _, v| {
        let probs = pixel_probabilities(g, v[0], grid, side)?;
        let onehot = g.constant(one_hot(&targets, c, side, side));
        Ok(total_loss(g, probs, onehot, targets.clone(), &cfg)?.total)
    })
}

fn grad_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let rng = &mut rng;
    vec![
        Check::from_result("grad.spectral_prompt", grad_spectral_prompt(rng)),
        Check::from_result("grad.encoder_layer", grad_encoder_layer(rng)),
        Check::from_result("grad.hilo_attention", grad_hilo(rng)),
        Check::from_result("grad.freq_select", grad_freq_select(rng)),
        Check::from_result("grad.relationship_descriptor", grad_descriptor(rng)),
        Check::from_result("grad.decode", grad_decode(rng, false)),
        Check::from_result("grad.focal_loss", grad_focal(rng)),
        Check::from_result("grad.ssim_loss", grad_ssim(rng)),
        Check::from_result("grad.total_loss", grad_total(rng)),
        Check::from_result("grad.decode_with_loss", grad_decode(rng, true)),
    ]
}

// ---- hilo ----

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Runs HiLo with `high` of `heads` heads and the matching standalone branch
/// on the same weights, returning both outputs.
fn degenerate_pair(high: usize) -> Result<(Tensor, Tensor), TensorError> {
    let (side, d, heads, window) = (6, 8, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(31 + high as u64);
    let mut store = ParamStore::new();
    init_hilo(&mut store, "h", d, heads, high, &mut rng);
    let x = Tensor::uniform(&[side * side, d], -1.0, 1.0, &mut rng);
    let run = |standalone: bool| -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let xv = g.constant(x.clone());
        let y = match (standalone, high) {
            (false, _) => hilo_attention(&mut g, &mut b, xv, heads, high, window, "h")?,
            (true, 0) => pooled_attention(&mut g, &mut b, xv, heads, window, "h")?,
            (true, _) => windowed_attention(&mut g, &mut b, xv, heads, window, "h")?,
        };
        Ok(g.value(y).clone())
    };
    Ok((run(false)?, run(true)?))
}

fn hilo_suite() -> Vec<Check> {
    let mut out = Vec::new();
    for (id, high, what) in [("hilo.alpha_one_is_windowed", 4, "windowed"), ("hilo.alpha_zero_is_pooled", 0, "pooled-key")] {
        out.push(match degenerate_pair(high) {
            Ok((a, b)) => {
                let same = a.shape() == b.shape() && bits(&a) == bits(&b);
                Check::new(id, same, format!("bit-identical to standalone {what} attention: {same}"))
            }
            Err(e) => Check::new(id, false, format!("error: {e}")),
        });
    }
    // mixed split keeps the output width
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut store = ParamStore::new();
    init_hilo(&mut store, "h", 8, 4, 2, &mut rng);
    let mut g = Graph::new();
    let mut b = Binder::new(&store);
    let x = g.constant(Tensor::uniform(&[36, 8], -1.0, 1.0, &mut rng));
    let r = hilo_attention(&mut g, &mut b, x, 4, 2, 3, "h").map(|y| g.shape(y).to_vec());
    out.push(match r {
        Ok(shape) => Check::new("hilo.channel_split", shape == [36, 8], format!("output shape {shape:?}")),
        Err(e) => Check::new("hilo.channel_split", false, format!("error: {e}")),
    });
    out
}

// ---- metrics ----

/// Published `(mIoU(S), mIoU(U), hIoU)` triples for the method comparison
/// and the component ablation.
pub const PUBLISHED_TRIPLES: &[(&str, f64, f64, f64)] = &[
    ("comparison.voc.01", 78.0, 15.6, 26.1),
    ("comparison.coco.01", 35.2, 8.7, 14.0),
    ("comparison.voc.02", 77.3, 17.7, 28.7),
    ("comparison.coco.02", 34.7, 9.5, 15.0),
    ("comparison.voc.03", 78.4, 26.6, 39.7),
    ("comparison.coco.03", 33.5, 12.2, 18.2),
    ("comparison.voc.04", 75.4, 28.9, 41.7),
    ("comparison.coco.04", 32.3, 15.5, 20.9),
    ("comparison.voc.05", 77.7, 32.5, 45.9),
    ("comparison.voc.06", 86.4, 63.6, 73.3),
    ("comparison.coco.06", 36.6, 33.2, 34.8),
    ("comparison.voc.07", 83.5, 72.5, 77.5),
    ("comparison.coco.07", 39.3, 36.3, 37.8),
    ("comparison.voc.08", 91.9, 77.8, 84.3),
    ("comparison.coco.08", 40.2, 41.4, 40.8),
    ("comparison.voc.ours", 92.9, 87.4, 90.1),
    ("comparison.coco.ours", 40.6, 43.8, 42.1),
    ("comparison.voc.08_full", 92.4, 90.9, 91.6),
    ("comparison.coco.08_full", 40.7, 63.2, 49.6),
    ("comparison.voc.ours_full", 93.6, 92.9, 93.2),
    ("comparison.coco.ours_full", 41.6, 66.0, 51.0),
    ("ablation.baseline", 91.9, 77.8, 84.3),
    ("ablation.spt", 92.6, 86.7, 89.6),
    ("ablation.sgd", 92.0, 79.9, 85.5),
    ("ablation.spt_sgd", 92.9, 87.4, 90.1),
];

fn metrics_suite() -> Vec<Check> {
    let mut out: Vec<Check> = PUBLISHED_TRIPLES
        .iter()
        .map(|&(id, s, u, h)| {
            let got = hiou(s, u);
            Check::new(
                format!("metrics.hiou.{id}"),
                (got - h).abs() <= HIOU_TOL,
                format!("hiou({s}, {u}) = {got:.3}, published {h}"),
            )
        })
        .collect();
    out.push(Check::new("metrics.hiou.zero", hiou(0.0, 0.0) == 0.0, "hiou(0, 0) = 0"));
    // TP 6, FP 2, FN 2 for class 1
    let truth = LabelMap::new(4, 4, [1u8, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0].to_vec());
    let pred = LabelMap::new(4, 4, [1u8, 1, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0].to_vec());
    let mut cm = ConfusionMatrix::new(2);
    let iou = cm.add(&pred, &truth).ok().and_then(|_| cm.iou(1));
    out.push(Check::new(
        "metrics.iou.hand_counted",
        iou.is_some_and(|v| (v - 60.0).abs() < 1e-12),
        format!("IoU = {iou:?}, expected 60"),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for s in ["fft", "grad", "hilo", "metrics", "all"] {
            assert!(s.parse::<Suite>().is_ok());
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn fft_and_hilo_suites_pass() {
        for c in fft_suite().into_iter().chain(hilo_suite()) {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn direct_dft_of_impulse_is_flat() {
        let mut x = ComplexTensor::zeros(&[3, 3, 1]);
        x.re_mut()[0] = 1.0;
        let f = direct_dft2(&x);
        assert!(f.re().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(f.im().iter().all(|&v| v.abs() < 1e-12));
    }
}
