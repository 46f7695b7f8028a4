//! Focal and SSIM training losses over per-pixel class probabilities.

use crate::config::LossConfig;
use crate::error::TensorError;
use crate::graph::{AxisWeights, Graph, Var};
use crate::tensor::Tensor;
use std::sync::Arc;

/// Mean focal loss `-(1 - p_t)^γ log p_t` over pixels that carry a target.
/// `probs: C × P`; `targets[i]` indexes a row of `probs` or is `None`.
pub fn focal_loss(g: &mut Graph, probs: Var, targets: Arc<[Option<usize>]>, gamma: f64) -> Result<Var, TensorError> {
    g.focal_loss(probs, targets, gamma)
}

/// `1 - mean SSIM` between two `[C, H, W]` fields, using local statistics
/// over every fully contained `window × window` block.
pub fn ssim_loss(g: &mut Graph, a: Var, b: Var, cfg: &LossConfig) -> Result<Var, TensorError> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::dims("ssim_loss", g.shape(a), g.shape(b)));
    }
    let k = cfg.ssim_window;
    let mu_a = g.box_mean(a, k)?;
    let mu_b = g.box_mean(b, k)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let ea2 = g.box_mean(aa, k)?;
    let eb2 = g.box_mean(bb, k)?;
    let eab = g.box_mean(ab, k)?;
    let ma2 = g.mul(mu_a, mu_a)?;
    let mb2 = g.mul(mu_b, mu_b)?;
    let mab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(ea2, ma2)?;
    let var_b = g.sub(eb2, mb2)?;
    let cov = g.sub(eab, mab)?;

    let l_num = g.scale(mab, 2.0)?;
    let l_num = g.add_scalar(l_num, cfg.ssim_c1)?;
    let c_num = g.scale(cov, 2.0)?;
    let c_num = g.add_scalar(c_num, cfg.ssim_c2)?;
    let l_den = g.add(ma2, mb2)?;
    let l_den = g.add_scalar(l_den, cfg.ssim_c1)?;
    let c_den = g.add(var_a, var_b)?;
    let c_den = g.add_scalar(c_den, cfg.ssim_c2)?;
    let num = g.mul(l_num, c_num)?;
    let den = g.mul(l_den, c_den)?;
    let ssim = g.div(num, den)?;
    let m = g.mean(ssim)?;
    let neg = g.scale(m, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub focal: Var,
    pub ssim: Var,
    pub total: Var,
}

/// `focal_weight · focal + ssim_weight · ssim`. `probs` is `[C, H, W]`,
/// `onehot` the matching target indicator, `targets` the per-pixel row index.
/// A term with zero weight is left out of the sum.
pub fn total_loss(
    g: &mut Graph,
    probs: Var,
    onehot: Var,
    targets: Arc<[Option<usize>]>,
    cfg: &LossConfig,
) -> Result<LossTerms, TensorError> {
    let [c, h, w] = *g.shape(probs) else {
        return Err(TensorError::shape("total_loss", format!("expected [C, H, W] probabilities, got {:?}", g.shape(probs))));
    };
    let flat = g.reshape(probs, &[c, h * w])?;
    let focal = focal_loss(g, flat, targets, cfg.focal_gamma)?;
    let ssim = ssim_loss(g, probs, onehot, cfg)?;
    let total = match (cfg.focal_weight != 0.0, cfg.ssim_weight != 0.0) {
        (true, true) => {
            let f = g.scale(focal, cfg.focal_weight)?;
            let s = g.scale(ssim, cfg.ssim_weight)?;
            g.add(f, s)?
        }
        (true, false) => g.scale(focal, cfg.focal_weight)?,
        (false, true) => g.scale(ssim, cfg.ssim_weight)?,
        (false, false) => g.scale(focal, 0.0)?,
    };
    Ok(LossTerms { focal, ssim, total })
}

/// One-hot `[C, H, W]` indicator for per-pixel row targets; pixels without a
/// target are zero in every channel.
pub fn one_hot(targets: &[Option<usize>], classes: usize, height: usize, width: usize) -> Tensor {
    let p = height * width;
    let mut t = Tensor::zeros(&[classes, height, width]);
    for (i, c) in targets.iter().enumerate() {
        if let Some(c) = *c {
            t.data_mut()[c * p + i] = 1.0;
        }
    }
    t
}

/// Patch-level class scores `C × N` to pixel probabilities `[C, H, W]`:
/// softmax over classes, then bilinear upsampling of the `G × G` grid.
pub fn pixel_probabilities(g: &mut Graph, logits: Var, grid: usize, out_side: usize) -> Result<Var, TensorError> {
    let c = g.shape(logits)[0];
    let p = g.softmax(logits, 0)?;
    let grid_probs = g.reshape(p, &[c, grid, grid])?;
    let axis = Arc::new(AxisWeights::bilinear(grid, out_side));
    g.resize(grid_probs, axis.clone(), axis)
}
