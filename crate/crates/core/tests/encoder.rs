use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sptseg::config::EncoderConfig;
use sptseg::encoder::{encoder_layer, filter_name, init_backbone, init_prompts, patch_embed, prompt_name};
use sptseg::model::{forward, init_model};
use sptseg::spectral::{spectral_prompt_values, SpectralFilter};
use sptseg::{Binder, Config, Graph, ParamStore, Tensor};

type Mat = Vec<Vec<f64>>;

fn store(cfg: &EncoderConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = init_backbone(cfg, &mut rng);
    s.merge(init_prompts(cfg, &mut rng));
    s
}

fn tiny_cfg(spt: bool) -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        width: 2,
        heads: 1,
        patch_size: 1,
        image_side: 2,
        prompt_len: 1,
        spt_range: if spt { vec![1, 1] } else { vec![] },
        mlp_ratio: 4,
    }
}

fn rows(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn param(s: &ParamStore, name: &str) -> Tensor {
    s.get(name).unwrap().clone()
}

fn layer_norm(x: &Mat, gain: &Tensor, bias: &Tensor) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-6).sqrt() * gain.data()[i] + bias.data()[i])
                .collect()
        })
        .collect()
}

fn linear(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (k, n) = (w.rows(), w.cols());
    x.iter()
        .map(|r| (0..n).map(|j| b.data()[j] + (0..k).map(|p| r[p] * w.get(&[p, j])).sum::<f64>()).collect())
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Pre-norm block with one attention head, written out longhand.
fn block_oracle(x: &Mat, s: &ParamStore) -> Mat {
    let p = |n: &str| param(s, &format!("backbone.layer1.{n}"));
    let d = x[0].len();
    let y = layer_norm(x, &p("ln1.g"), &p("ln1.b"));
    let qkv = linear(&y, &p("qkv.w"), &p("qkv.b"));
    let mut att = Vec::new();
    for qi in &qkv {
        let scores: Vec<f64> = qkv
            .iter()
            .map(|kj| (0..d).map(|c| qi[c] * kj[d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = scores.iter().map(|v| v.exp()).sum();
        let row: Vec<f64> = (0..d)
            .map(|c| qkv.iter().zip(&scores).map(|(vj, sc)| sc.exp() / z * vj[2 * d + c]).sum())
            .collect();
        att.push(row);
    }
    let x1 = add(x, &linear(&att, &p("out.w"), &p("out.b")));
    let y2 = layer_norm(&x1, &p("ln2.g"), &p("ln2.b"));
    let hid: Mat = linear(&y2, &p("fc1.w"), &p("fc1.b"))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    add(&x1, &linear(&hid, &p("fc2.w"), &p("fc2.b")))
}

fn check_against_oracle(spt: bool) {
    let cfg = tiny_cfg(spt);
    let mut s = store(&cfg, 17);
    // non-trivial norm and bias parameters so they are exercised too
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for n in ["ln1.g", "ln1.b", "ln2.g", "ln2.b", "qkv.b", "out.b", "fc1.b", "fc2.b"] {
        let t = s.get_mut(&format!("backbone.layer1.{n}")).unwrap();
        let noise = Tensor::randn(t.shape(), 0.3, &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
    let img = Tensor::uniform(&[2, 2, 3], 0.0, 1.0, &mut rng);

    let mut g = Graph::new();
    let mut b = Binder::new(&s);
    let t = patch_embed(&mut g, &mut b, &cfg, &img).unwrap();
    let (cls, prompt, patches) = (g.value(t.cls).clone(), g.value(t.prompts).clone(), g.value(t.patches).clone());
    let w = spt.then(|| b.var(&mut g, &filter_name(1)).unwrap());
    let out = encoder_layer(&mut g, &mut b, &cfg, 1, t, w).unwrap();

    let mut patch_rows = rows(&patches);
    if spt {
        let f = SpectralFilter::from_tensor(param(&s, &filter_name(1))).unwrap();
        let sp = spectral_prompt_values(&patches, &cls, &f).unwrap();
        patch_rows = add(&patch_rows, &rows(&sp));
    }
    let mut x = vec![cls.data().to_vec(), prompt.row(0).to_vec()];
    x.extend(patch_rows);
    let want = block_oracle(&x, &s);

    let got_cls = g.value(out.cls).data();
    let got_patches = rows(g.value(out.patches));
    let got_prompt = g.value(out.prompts).row(0);
    for c in 0..2 {
        assert!((got_cls[c] - want[0][c]).abs() < 1e-9);
        assert!((got_prompt[c] - want[1][c]).abs() < 1e-9, "last layer keeps its prompt output");
        for j in 0..4 {
            assert!((got_patches[j][c] - want[2 + j][c]).abs() < 1e-9, "patch {j} channel {c}");
        }
    }
}

#[test]
fn single_head_layer_matches_longhand_oracle() {
    check_against_oracle(false);
}

#[test]
fn spectral_layer_matches_longhand_oracle() {
    check_against_oracle(true);
}

#[test]
fn zero_filter_matches_layer_without_prompt() {
    let cfg = EncoderConfig::default();
    let s = store(&cfg, 2);
    let img = Tensor::uniform(&[48, 48, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let run = |zero: bool| {
        let mut g = Graph::new();
        let mut b = Binder::new(&s);
        let t = patch_embed(&mut g, &mut b, &cfg, &img).unwrap();
        let w = zero.then(|| g.constant(SpectralFilter::zeros(12, 32).into_tensor()));
        let out = encoder_layer(&mut g, &mut b, &cfg, 1, t, w).unwrap();
        g.value(out.patches).clone()
    };
    assert!(run(true).max_abs_diff(&run(false)) < 1e-12);
}

#[test]
fn middle_layer_swaps_in_next_prompt() {
    let cfg = EncoderConfig::default();
    let s = store(&cfg, 4);
    let mut g = Graph::new();
    let mut b = Binder::new(&s);
    let t = patch_embed(&mut g, &mut b, &cfg, &Tensor::zeros(&[48, 48, 3])).unwrap();
    let out = encoder_layer(&mut g, &mut b, &cfg, 1, t, None).unwrap();
    assert_eq!(g.value(out.prompts), s.get(&prompt_name(2)).unwrap());
    assert_eq!(g.shape(out.patches), &[144, 32]);
}

#[test]
fn layer_index_outside_depth_is_rejected() {
    let cfg = EncoderConfig::default();
    let s = store(&cfg, 5);
    let mut g = Graph::new();
    let mut b = Binder::new(&s);
    let t = patch_embed(&mut g, &mut b, &cfg, &Tensor::zeros(&[48, 48, 3])).unwrap();
    assert!(encoder_layer(&mut g, &mut b, &cfg, 5, t, None).is_err());
}

#[test]
fn only_prompt_side_parameters_receive_gradients() {
    let mut cfg = Config::default();
    cfg.encoder.image_side = 24;
    cfg.encoder.layers = 2;
    cfg.decoder.layers = 1;
    cfg.decoder.window = 2;
    let (_, s) = init_model(&cfg);
    let img = Tensor::uniform(&[24, 24, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    let mut g = Graph::new();
    let mut b = Binder::new(&s);
    let logits = forward(&mut g, &mut b, &cfg, &img, &[0, 1, 2]).unwrap();
    let sq = g.mul(logits, logits).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut saw_prompt = false;
    for name in s.names() {
        let Some(v) = b.bound(name) else { continue };
        let grad = grads.wrt(v);
        if name.starts_with("backbone.") || name.starts_with("class.") {
            assert!(grad.is_none(), "{name} must stay frozen");
        } else if name.starts_with("encoder.") {
            let gr = grad.unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(gr.data().iter().any(|&x| x != 0.0), "{name} gradient is all zero");
            saw_prompt = true;
        }
    }
    assert!(saw_prompt);
    assert!(b.bound(&filter_name(1)).is_some() && b.bound(&filter_name(2)).is_some());
}
