use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sptseg::config::DecoderConfig;
use sptseg::decoder::{decode, decode_layer, freq_select, hilo_attention, init_decoder, init_hilo, predict, relationship_descriptor};
use sptseg::{Binder, Graph, ParamStore, Tensor};

type Mat = Vec<Vec<f64>>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rows(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn linear(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    x.iter()
        .map(|r| (0..w.cols()).map(|j| b.data()[j] + (0..w.rows()).map(|p| r[p] * w.get(&[p, j])).sum::<f64>()).collect())
        .collect()
}

/// Single-head attention of `q` rows over `(k, v)` rows.
fn attend(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let s: Vec<f64> = keys.iter().map(|k| (q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale).exp()).collect();
    let z: f64 = s.iter().sum();
    (0..q.len()).map(|c| values.iter().zip(&s).map(|(v, w)| v[c] * w / z).sum()).collect()
}

fn perturbed(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        let noise = Tensor::randn(t.shape(), 0.2, &mut r);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
}

/// HiLo with one high and one low head, computed from window membership.
fn hilo_oracle(x: &Mat, s: &ParamStore, side: usize, window: usize) -> Mat {
    let p = |n: &str| s.get(&format!("h.{n}")).unwrap().clone();
    let dh = x[0].len() / 2;
    let win = |j: usize| ((j / side) / window, (j % side) / window);
    let qkv = linear(x, &p("hi.qkv.w"), &p("hi.qkv.b"));
    let n = x.len();
    let hi: Mat = (0..n)
        .map(|i| {
            let mates: Vec<usize> = (0..n).filter(|&j| win(j) == win(i)).collect();
            let keys: Mat = mates.iter().map(|&j| qkv[j][dh..2 * dh].to_vec()).collect();
            let vals: Mat = mates.iter().map(|&j| qkv[j][2 * dh..].to_vec()).collect();
            attend(&qkv[i][..dh], &keys, &vals)
        })
        .collect();
    let per = side / window;
    let pooled: Mat = (0..per * per)
        .map(|w| {
            let members: Vec<usize> = (0..n).filter(|&j| win(j) == (w / per, w % per)).collect();
            (0..x[0].len())
                .map(|c| members.iter().map(|&j| x[j][c]).sum::<f64>() / members.len() as f64)
                .collect()
        })
        .collect();
    let q = linear(x, &p("lo.q.w"), &p("lo.q.b"));
    let kv = linear(&pooled, &p("lo.kv.w"), &p("lo.kv.b"));
    let keys: Mat = kv.iter().map(|r| r[..dh].to_vec()).collect();
    let vals: Mat = kv.iter().map(|r| r[dh..].to_vec()).collect();
    let cat: Mat = (0..n)
        .map(|i| {
            let mut r = hi[i].clone();
            r.extend(attend(&q[i], &keys, &vals));
            r
        })
        .collect();
    linear(&cat, &p("out.w"), &p("out.b"))
}

#[test]
fn hilo_matches_window_membership_oracle() {
    for (side, window) in [(2, 2), (4, 2), (6, 3), (6, 2)] {
        let d = 4;
        let mut s = ParamStore::new();
        init_hilo(&mut s, "h", d, 2, 1, &mut rng(1));
        perturbed(&mut s, 2);
        let x = Tensor::randn(&[side * side, d], 1.0, &mut rng(3 + side as u64));
        let mut g = Graph::new();
        let mut b = Binder::new(&s);
        let xv = g.constant(x.clone());
        let y = hilo_attention(&mut g, &mut b, xv, 2, 1, window, "h").unwrap();
        let want = hilo_oracle(&rows(&x), &s, side, window);
        for (got, exp) in rows(g.value(y)).iter().zip(&want) {
            for (a, e) in got.iter().zip(exp) {
                assert!((a - e).abs() < 1e-9, "side {side} window {window}: {a} vs {e}");
            }
        }
    }
}

#[test]
fn hilo_rejects_indivisible_grid_and_bad_split() {
    let mut s = ParamStore::new();
    init_hilo(&mut s, "h", 4, 2, 1, &mut rng(1));
    let mut g = Graph::new();
    let mut b = Binder::new(&s);
    let x = g.constant(Tensor::zeros(&[25, 4]));
    assert!(hilo_attention(&mut g, &mut b, x, 2, 1, 2, "h").is_err());
    let x = g.constant(Tensor::zeros(&[16, 4]));
    assert!(hilo_attention(&mut g, &mut b, x, 2, 3, 2, "h").is_err());
}

fn select(z: &Tensor, xi: &Tensor, p: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let (zv, xv, pv) = (g.constant(z.clone()), g.constant(xi.clone()), g.constant(p.clone()));
    let out = freq_select(&mut g, zv, xv, pv).unwrap();
    g.value(out).clone()
}

#[test]
fn freq_select_gate_extremes() {
    let xi = Tensor::new(&[3], vec![1.0, 2.0, -1.0]).unwrap();
    let p = Tensor::randn(&[3, 3], 1.0, &mut rng(4));
    let z = Tensor::new(&[2, 3], vec![2.0, 4.0, -2.0, -1.0, -2.0, 1.0]).unwrap();
    let out = select(&z, &xi, &p);
    // parallel row: gate 1, so the row is P z
    for i in 0..3 {
        let pz: f64 = (0..3).map(|k| p.get(&[i, k]) * z.get(&[0, k])).sum();
        assert!((out.get(&[0, i]) - pz).abs() < 1e-12);
    }
    // antiparallel row: gate 0
    assert!(out.row(1).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn freq_select_matches_formula() {
    let z = Tensor::randn(&[5, 4], 1.0, &mut rng(5));
    let xi = Tensor::randn(&[4], 1.0, &mut rng(6));
    let p = Tensor::randn(&[4, 4], 1.0, &mut rng(7));
    let out = select(&z, &xi, &p);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for j in 0..5 {
        let zj = z.row(j);
        let cos = zj.iter().zip(xi.data()).map(|(a, b)| a * b).sum::<f64>() / (norm(zj) * norm(xi.data()));
        let gate = (cos + 1.0) / 2.0;
        for i in 0..4 {
            let pz: f64 = (0..4).map(|k| p.get(&[i, k]) * zj[k]).sum();
            assert!((out.get(&[j, i]) - gate * pz).abs() < 1e-12);
        }
    }
}

fn descriptor(t: &Tensor, cls: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let vars = [t, cls, w, bias].map(|x| g.constant(x.clone()));
    let out = relationship_descriptor(&mut g, vars[0], vars[1], vars[2], vars[3]).unwrap();
    g.value(out).clone()
}

/// `[I; 0]` or `[0; I]` as a `2D × D` weight.
fn stacked_identity(d: usize, top: bool) -> Tensor {
    let mut w = Tensor::zeros(&[2 * d, d]);
    let off = if top { 0 } else { d };
    for i in 0..d {
        w.set(&[off + i, i], 1.0);
    }
    w
}

#[test]
fn descriptor_with_selector_weights() {
    let t = Tensor::randn(&[3, 4], 1.0, &mut rng(8));
    let cls = Tensor::randn(&[4], 1.0, &mut rng(9));
    let zero = Tensor::zeros(&[4]);
    let gated = descriptor(&t, &cls, &stacked_identity(4, true), &zero);
    for c in 0..3 {
        for d in 0..4 {
            assert!((gated.get(&[c, d]) - t.get(&[c, d]) * cls.get(&[d])).abs() < 1e-15);
        }
    }
    assert_eq!(descriptor(&t, &Tensor::ones(&[4]), &stacked_identity(4, true), &zero), t);
    assert_eq!(descriptor(&t, &cls, &stacked_identity(4, false), &zero), t);
}

#[test]
fn descriptor_matches_formula() {
    let t = Tensor::randn(&[3, 2], 1.0, &mut rng(10));
    let cls = Tensor::randn(&[2], 1.0, &mut rng(11));
    let w = Tensor::randn(&[4, 2], 1.0, &mut rng(12));
    let bias = Tensor::randn(&[2], 1.0, &mut rng(13));
    let out = descriptor(&t, &cls, &w, &bias);
    for c in 0..3 {
        let cat = [t.get(&[c, 0]) * cls.get(&[0]), t.get(&[c, 1]) * cls.get(&[1]), t.get(&[c, 0]), t.get(&[c, 1])];
        for j in 0..2 {
            let want = bias.get(&[j]) + (0..4).map(|k| cat[k] * w.get(&[k, j])).sum::<f64>();
            assert!((out.get(&[c, j]) - want).abs() < 1e-12);
        }
    }
}

fn small_decoder(layers: usize) -> (DecoderConfig, ParamStore) {
    let cfg = DecoderConfig {
        heads: 2,
        alpha: 0.5,
        window: 2,
        layers,
        spectral_guided: true,
        mlp_ratio: 2,
    };
    let s = init_decoder(&cfg, 4, &mut rng(14));
    (cfg, s)
}

#[test]
fn decode_is_layers_then_class_scores() {
    let (cfg, mut s) = small_decoder(1);
    *s.get_mut("decoder.phi.w").unwrap() = stacked_identity(4, false);
    let z = Tensor::randn(&[16, 4], 1.0, &mut rng(15));
    let cls = Tensor::randn(&[4], 1.0, &mut rng(16));
    let t = Tensor::randn(&[3, 4], 1.0, &mut rng(17));

    let mut g = Graph::new();
    let mut b = Binder::new(&s);
    let (zv, cv, tv) = (g.constant(z.clone()), g.constant(cls), g.constant(t.clone()));
    let masks = decode(&mut g, &mut b, &cfg, zv, cv, tv).unwrap();
    assert_eq!(g.shape(masks), &[3, 16]);

    let mut g2 = Graph::new();
    let mut b2 = Binder::new(&s);
    let z2 = g2.constant(z);
    let zl = decode_layer(&mut g2, &mut b2, &cfg, 1, z2).unwrap();
    let zl = g2.value(zl).clone();
    for c in 0..3 {
        for j in 0..16 {
            let want: f64 = (0..4).map(|k| t.get(&[c, k]) * zl.get(&[j, k])).sum();
            assert!((g.value(masks).get(&[c, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn orthonormal_classes_score_their_aligned_tokens() {
    let (cfg, mut s) = small_decoder(2);
    *s.get_mut("decoder.phi.w").unwrap() = stacked_identity(4, false);
    let z = Tensor::randn(&[16, 4], 1.0, &mut rng(18));
    let mut g = Graph::new();
    let mut b = Binder::new(&s);
    let zv = g.constant(z.clone());
    let mut zl = zv;
    for i in 1..=2 {
        zl = decode_layer(&mut g, &mut b, &cfg, i, zl).unwrap();
    }
    let zl = g.value(zl).clone();
    // t is the standard basis, so class c's score for token j is z_L[j][c]
    let t = g.constant(Tensor::eye(4));
    let cls = g.constant(Tensor::ones(&[4]));
    let zv2 = g.constant(z);
    let masks = decode(&mut g, &mut b, &cfg, zv2, cls, t).unwrap();
    assert!(g.value(masks).max_abs_diff(&zl.transpose()) < 1e-12);
}

#[test]
fn decode_needs_two_classes() {
    let (cfg, s) = small_decoder(1);
    let mut g = Graph::new();
    let mut b = Binder::new(&s);
    let z = g.constant(Tensor::zeros(&[16, 4]));
    let cls = g.constant(Tensor::ones(&[4]));
    let t = g.constant(Tensor::ones(&[1, 4]));
    assert!(decode(&mut g, &mut b, &cfg, z, cls, t).is_err());
}

#[test]
fn predict_picks_the_hot_class_per_patch() {
    // 4 classes over a 2 × 2 grid, patch size 3
    let mut m = Tensor::zeros(&[4, 4]);
    for (j, c) in [3usize, 0, 2, 1].into_iter().enumerate() {
        m.set(&[c, j], 1.0);
    }
    let labels = predict(&m, &[0, 1, 2, 3], 3).unwrap();
    assert_eq!((labels.height(), labels.width()), (6, 6));
    for y in 0..6 {
        for x in 0..6 {
            let want = [3u8, 0, 2, 1][(y / 3) * 2 + x / 3];
            assert_eq!(labels.get(y, x), want);
        }
    }
}

#[test]
fn predict_breaks_ties_toward_lower_index() {
    let m = Tensor::full(&[3, 1], 0.5);
    assert_eq!(predict(&m, &[2, 1], 1).unwrap().labels(), &[1]);
    assert_eq!(predict(&m, &[0, 1, 2], 1).unwrap().labels(), &[0]);
}

#[test]
fn predict_restricted_to_subset_matches_loop() {
    let m = Tensor::randn(&[7, 9], 1.0, &mut rng(19));
    let labels = predict(&m, &[2, 5], 2).unwrap();
    for j in 0..9 {
        let want = if m.get(&[5, j]) > m.get(&[2, j]) { 5 } else { 2 };
        let (py, px) = (j / 3, j % 3);
        for dy in 0..2 {
            for dx in 0..2 {
                assert_eq!(labels.get(py * 2 + dy, px * 2 + dx), want);
            }
        }
    }
    assert!(predict(&m, &[7], 1).is_err());
    assert!(predict(&m, &[], 1).is_err());
}
