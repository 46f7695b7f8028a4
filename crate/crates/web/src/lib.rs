//! Browser bindings for three small demos: synthetic scene generation,
//! spectral filtering of a scene, and the hIoU calculator.
//!
//! Images cross the boundary as RGBA bytes ready for `ImageData`.

use sptseg::config::DataConfig;
use sptseg::data::{class_colors, generate_scene};
use sptseg::spectral::{spectral_prompt_values, SpectralFilter};
use sptseg::tensor::Tensor;
use wasm_bindgen::prelude::*;

pub const SIDE: usize = 48;

fn rgba(rgb: &[f64]) -> Vec<u8> {
    rgb.chunks_exact(3)
        .flat_map(|p| {
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [q(p[0]), q(p[1]), q(p[2]), 255]
        })
        .collect()
}

fn scene(seed: u64, include_unseen: bool) -> Result<(Tensor, sptseg::LabelMap), JsError> {
    let cfg = DataConfig::default();
    let top = if include_unseen { cfg.num_classes() } else { cfg.seen_classes };
    let allowed: Vec<usize> = (1..top).collect();
    generate_scene(&cfg, SIDE, &allowed, seed).map_err(|e| JsError::new(&e.to_string()))
}

/// A generated scene: image pixels and a colour rendering of its labels.
#[wasm_bindgen]
pub struct Scene {
    image: Vec<u8>,
    labels: Vec<u8>,
    classes: Vec<u8>,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, include_unseen: bool) -> Result<Scene, JsError> {
        let (image, labels) = scene(seed, include_unseen)?;
        let colors = class_colors(&DataConfig::default());
        let label_rgb: Vec<f64> = labels
            .labels()
            .iter()
            .flat_map(|&l| if l == 0 { [0.0; 3] } else { colors[l as usize] })
            .collect();
        Ok(Scene {
            image: rgba(image.data()),
            labels: rgba(&label_rgb),
            classes: labels.classes_present().into_iter().map(|c| c as u8).collect(),
        })
    }

    pub fn side(&self) -> usize {
        SIDE
    }

    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }

    /// Class ids present, background included.
    pub fn classes(&self) -> Vec<u8> {
        self.classes.clone()
    }
}

/// Radial band filter: gain 1 for frequencies with radius in `[low, high]`
/// (fractions of Nyquist), 0 elsewhere.
pub fn band_filter(side: usize, channels: usize, low: f64, high: f64) -> SpectralFilter {
    let mut w = Tensor::zeros(&[side, side, channels, 2]);
    let half = side as f64 / 2.0;
    for u in 0..side {
        for v in 0..side {
            let fu = u.min(side - u) as f64 / half;
            let fv = v.min(side - v) as f64 / half;
            let r = (fu * fu + fv * fv).sqrt();
            if (low..=high).contains(&r) {
                for c in 0..channels {
                    w.data_mut()[((u * side + v) * channels + c) * 2] = 1.0;
                }
            }
        }
    }
    SpectralFilter::from_tensor(w).expect("square filter")
}

/// Spectral prompt of a scene treated as a `48 × 48` grid with 3 channels:
/// `Re(IFFT2(FFT2(x ⊙ g) ⊙ w))` with `g = gain` on every channel and `w` a
/// radial band-pass. Returns RGBA bytes, offset by 0.5 when `centered`.
#[wasm_bindgen]
pub fn spectral_filter(seed: u64, low: f64, high: f64, gain: f64, centered: bool) -> Result<Vec<u8>, JsError> {
    let (image, _) = scene(seed, true)?;
    let tokens = Tensor::new(&[SIDE * SIDE, 3], image.into_data()).map_err(|e| JsError::new(&e.to_string()))?;
    let cls = Tensor::full(&[3], gain);
    let out = spectral_prompt_values(&tokens, &cls, &band_filter(SIDE, 3, low, high)).map_err(|e| JsError::new(&e.to_string()))?;
    let shift = if centered { 0.5 } else { 0.0 };
    let px: Vec<f64> = out.data().iter().map(|v| v + shift).collect();
    Ok(rgba(&px))
}

/// Harmonic mean of seen and unseen mIoU.
#[wasm_bindgen]
pub fn hiou(miou_seen: f64, miou_unseen: f64) -> f64 {
    sptseg::hiou(miou_seen, miou_unseen)
}
