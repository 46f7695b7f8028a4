use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sptseg::{Graph, Tensor};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get(&[i, p]) * b.get(&[p, j]);
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matmul_by_identity_and_zero() {
    let a = rand_tensor(&[5, 7], 1);
    let i = Tensor::eye(7);
    assert_eq!(a.matmul(&i).unwrap(), a);
    let z = a.matmul(&Tensor::zeros(&[7, 3])).unwrap();
    assert_eq!(z.shape(), &[5, 3]);
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_triple_loop() {
    // sizes straddle the 4 × 4 register block
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (4, 4, 4), (9, 6, 11), (17, 13, 5)] {
        let a = rand_tensor(&[m, k], (m * 100 + k) as u64);
        let b = rand_tensor(&[k, n], (k * 100 + n) as u64);
        let c = a.matmul(&b).unwrap();
        assert!(max_diff(c.data(), &triple_loop(&a, &b)) < 1e-12, "{m}×{k}×{n}");
    }
}

#[test]
fn matmul_shape_mismatch_is_an_error() {
    assert!(rand_tensor(&[2, 3], 0).matmul(&rand_tensor(&[4, 2], 0)).is_err());
}

#[test]
fn row_broadcast_multiplication_matches_loop() {
    let a = rand_tensor(&[6, 4], 3);
    let v = rand_tensor(&[4], 4);
    let mut g = Graph::new();
    let (av, vv) = (g.constant(a.clone()), g.constant(v.clone()));
    let y = g.mul(av, vv).unwrap();
    let mut expect = Vec::new();
    for r in 0..6 {
        for c in 0..4 {
            expect.push(a.get(&[r, c]) * v.get(&[c]));
        }
    }
    assert_eq!(g.value(y).data(), &expect[..]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 5], 3.7));
    let y = g.softmax(x, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn softmax_of_one_large_logit_is_one_hot() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[3], vec![0.0, 800.0, 0.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    let p = g.value(y).data();
    assert!((p[1] - 1.0).abs() < 1e-15 && p[0] < 1e-300 && p[2] < 1e-300);
}

#[test]
fn softmax_matches_direct_formula_on_either_axis() {
    let t = rand_tensor(&[4, 6], 7);
    for axis in 0..2 {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = g.softmax(x, axis).unwrap();
        for r in 0..4 {
            for c in 0..6 {
                let z: f64 = if axis == 0 {
                    (0..4).map(|k| t.get(&[k, c]).exp()).sum()
                } else {
                    (0..6).map(|k| t.get(&[r, k]).exp()).sum()
                };
                let want = t.get(&[r, c]).exp() / z;
                assert!((g.value(y).get(&[r, c]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gradient_of_sum_of_squares() {
    let t = rand_tensor(&[3, 4], 9);
    let mut g = Graph::new();
    let x = g.param(t.clone());
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq).unwrap();
    let grads = g.backward(l).unwrap();
    let dx = grads.wrt(x).unwrap();
    for (d, v) in dx.data().iter().zip(t.data()) {
        assert!((d - 2.0 * v).abs() < 1e-14);
    }
}

#[test]
fn composite_gradient_matches_central_differences() {
    // sum(softmax(x W) * gelu(x)) over a 3 × 4 input
    let w = rand_tensor(&[4, 4], 11);
    let f = |x: &Tensor| -> (f64, Tensor) {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.constant(w.clone());
        let xw = g.matmul(xv, wv).unwrap();
        let s = g.softmax(xw, 1).unwrap();
        let a = g.gelu(xv).unwrap();
        let p = g.mul(s, a).unwrap();
        let l = g.sum(p).unwrap();
        let grad = g.backward(l).unwrap().wrt(xv).unwrap();
        (g.value(l).data()[0], grad)
    };
    let x = rand_tensor(&[3, 4], 12);
    let (_, grad) = f(&x);
    let h = 1e-6;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (f(&xp).0 - f(&xm).0) / (2.0 * h);
        assert!((fd - grad.data()[i]).abs() < 1e-7, "entry {i}: {fd} vs {}", grad.data()[i]);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], vals).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(g.value(y).row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn identity_is_neutral_for_matmul(vals in prop::collection::vec(-1e3f64..1e3, 15)) {
        let a = Tensor::new(&[3, 5], vals).unwrap();
        prop_assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a.clone());
        prop_assert_eq!(a.matmul(&Tensor::eye(5)).unwrap(), a);
    }

    #[test]
    fn transpose_reverses_products(seed in 0u64..1000) {
        let a = rand_tensor(&[3, 4], seed);
        let b = rand_tensor(&[4, 2], seed + 1);
        let left = a.matmul(&b).unwrap().transpose();
        let right = b.transpose().matmul(&a.transpose()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-12);
    }
}
