use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sptseg::fft::{fft2, fft2_complex, ifft2, ifft2_complex};
use sptseg::spectral::{spectral_prompt, spectral_prompt_values, SpectralFilter};
use sptseg::{ComplexTensor, Graph, Tensor};
use std::f64::consts::PI;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// O(G⁴) complex DFT over the two leading axes of a `[G, G, C]` grid.
fn naive_dft2(re: &[f64], im: &[f64], g: usize, c: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
    let mut or = vec![0.0; re.len()];
    let mut oi = vec![0.0; re.len()];
    for u in 0..g {
        for v in 0..g {
            for ch in 0..c {
                let (mut sr, mut si) = (0.0, 0.0);
                for y in 0..g {
                    for x in 0..g {
                        let th = sign * 2.0 * PI * ((u * y + v * x) % g) as f64 / g as f64;
                        let (a, b) = (re[(y * g + x) * c + ch], im[(y * g + x) * c + ch]);
                        sr += a * th.cos() - b * th.sin();
                        si += a * th.sin() + b * th.cos();
                    }
                }
                or[(u * g + v) * c + ch] = sr;
                oi[(u * g + v) * c + ch] = si;
            }
        }
    }
    (or, oi)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn constant_grid_puts_everything_in_the_dc_bin() {
    let f = fft2(&Tensor::full(&[4, 4, 1], 1.0)).unwrap();
    let s = f.spectrum();
    assert!((s.re()[0] - 16.0).abs() < 1e-12);
    assert!(s.re()[1..].iter().chain(s.im()).all(|v| v.abs() < 1e-12));
}

#[test]
fn roundtrip_recovers_real_grids() {
    for side in [1, 2, 3, 4, 5, 6, 7, 8, 9, 12, 16, 20] {
        let x = Tensor::randn(&[side, side, 3], 1.0, &mut rng(side as u64));
        let back = ifft2(&fft2(&x).unwrap()).unwrap();
        assert!(back.values.max_abs_diff(&x) < 1e-9, "side {side}");
        assert!(back.imag_residue < 1e-9);
    }
}

#[test]
fn forward_matches_naive_dft() {
    for side in [2, 3, 4, 6, 8, 12] {
        let x = Tensor::randn(&[side, side, 2], 1.0, &mut rng(40 + side as u64));
        let f = fft2(&x).unwrap();
        let (er, ei) = naive_dft2(x.data(), &vec![0.0; x.len()], side, 2, -1.0);
        assert!(max_diff(f.spectrum().re(), &er) < 1e-9, "side {side}");
        assert!(max_diff(f.spectrum().im(), &ei) < 1e-9, "side {side}");
    }
}

#[test]
fn inverse_of_dc_impulse_is_flat() {
    let mut c = ComplexTensor::zeros(&[3, 3, 1]);
    c.re_mut()[0] = 9.0;
    let x = ifft2_complex(&c).unwrap();
    assert!(x.re().iter().all(|v| (v - 1.0).abs() < 1e-12));
    assert!(x.im().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn complex_roundtrip_and_inverse_oracle() {
    let side = 5;
    let re = Tensor::randn(&[side, side, 2], 1.0, &mut rng(1)).into_data();
    let im = Tensor::randn(&[side, side, 2], 1.0, &mut rng(2)).into_data();
    let c = ComplexTensor::new(&[side, side, 2], re.clone(), im.clone()).unwrap();
    let inv = ifft2_complex(&c).unwrap();
    let (er, ei) = naive_dft2(&re, &im, side, 2, 1.0);
    let n = (side * side) as f64;
    assert!(max_diff(inv.re(), &er.iter().map(|v| v / n).collect::<Vec<_>>()) < 1e-9);
    assert!(max_diff(inv.im(), &ei.iter().map(|v| v / n).collect::<Vec<_>>()) < 1e-9);
    let back = fft2_complex(&inv).unwrap();
    assert!(max_diff(back.re(), &re) < 1e-9 && max_diff(back.im(), &im) < 1e-9);
}

#[test]
fn identity_filter_gives_gated_tokens() {
    let h = Tensor::randn(&[16, 3], 1.0, &mut rng(5));
    let cls = Tensor::randn(&[3], 1.0, &mut rng(6));
    let s = spectral_prompt_values(&h, &cls, &SpectralFilter::identity(4, 3)).unwrap();
    for j in 0..16 {
        for d in 0..3 {
            assert!((s.get(&[j, d]) - h.get(&[j, d]) * cls.get(&[d])).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_filter_gives_zero_prompt() {
    let h = Tensor::randn(&[9, 2], 1.0, &mut rng(7));
    let s = spectral_prompt_values(&h, &Tensor::ones(&[2]), &SpectralFilter::zeros(3, 2)).unwrap();
    assert!(s.data().iter().all(|&v| v == 0.0));
}

#[test]
fn random_filter_matches_naive_pipeline() {
    for (side, d) in [(3, 2), (4, 3), (6, 2)] {
        let n = side * side;
        let h = Tensor::randn(&[n, d], 1.0, &mut rng(10 + side as u64));
        let cls = Tensor::randn(&[d], 1.0, &mut rng(20 + side as u64));
        let w = Tensor::randn(&[side, side, d, 2], 1.0, &mut rng(30 + side as u64));
        let got = spectral_prompt_values(&h, &cls, &SpectralFilter::from_tensor(w.clone()).unwrap()).unwrap();

        let gated: Vec<f64> = (0..n * d).map(|i| h.data()[i] * cls.data()[i % d]).collect();
        let (fr, fi) = naive_dft2(&gated, &vec![0.0; n * d], side, d, -1.0);
        let (mut pr, mut pi) = (vec![0.0; n * d], vec![0.0; n * d]);
        for i in 0..n * d {
            let (c, e) = (w.data()[2 * i], w.data()[2 * i + 1]);
            pr[i] = fr[i] * c - fi[i] * e;
            pi[i] = fr[i] * e + fi[i] * c;
        }
        let (br, _) = naive_dft2(&pr, &pi, side, d, 1.0);
        let want: Vec<f64> = br.iter().map(|v| v / n as f64).collect();
        assert!(max_diff(got.data(), &want) < 1e-9, "G={side} D={d}");
    }
}

#[test]
fn graph_prompt_rejects_mismatched_filter() {
    let mut g = Graph::new();
    let h = g.constant(Tensor::zeros(&[16, 3]));
    let cls = g.constant(Tensor::ones(&[3]));
    let w = g.constant(Tensor::zeros(&[4, 4, 2, 2]));
    assert!(spectral_prompt(&mut g, h, cls, w).is_err());
    let h5 = g.constant(Tensor::zeros(&[5, 3]));
    let w5 = g.constant(Tensor::zeros(&[2, 2, 3, 2]));
    assert!(spectral_prompt(&mut g, h5, cls, w5).is_err());
}
