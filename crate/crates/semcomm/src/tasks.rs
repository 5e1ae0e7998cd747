//! Downstream task heads, the training loss triple, and every reported
//! quality metric.
//!
//! Reconstruction has no head (the decoder output is the prediction). The
//! detection proxy is per-patch binary occupancy from decoder features;
//! the keypoint head mean-pools decoder features into a normalized (x, y).

use crate::error::{Error, Result};
use crate::numcore::{gaussian_matrix, Matrix, RngStream, Tape, TensorStore, TId, VId};
use crate::vision::{BitGrid, Image};

/// PSNR reported for a zero-MSE pair.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Smoothing constant of the Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;
/// SSIM window (uniform weights, stride 1) and stabilizers on [0,1] range.
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

// ---------------------------------------------------------------------------
// Task heads
// ---------------------------------------------------------------------------

/// Non-negative weights of the multi-task loss.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub w_recon: f64,
    pub w_det: f64,
    pub w_kp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_recon: 1.0,
            w_det: 1.0,
            w_kp: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate_for_training(&self) -> Result<()> {
        if self.w_recon < 0.0 || self.w_det < 0.0 || self.w_kp < 0.0 {
            return Err(Error::config("loss weights must be non-negative".into()));
        }
        if self.w_recon == 0.0 && self.w_det == 0.0 && self.w_kp == 0.0 {
            return Err(Error::config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

struct HeadIx {
    det_w: TId,
    det_b: TId,
    kp_w: TId,
    kp_b: TId,
}

/// Trainable task heads over decoder features of width `d_dec`.
pub struct TaskHeads {
    pub d_dec: usize,
    pub store: TensorStore,
    ix: HeadIx,
}

pub fn init_heads(d_dec: usize, rng: &mut RngStream) -> Result<TaskHeads> {
    if d_dec == 0 {
        return Err(Error::config("task heads need d_dec > 0".into()));
    }
    let mut store = TensorStore::new();
    let det_w = store.add("det.w", gaussian_matrix(d_dec, 1, 0.02, rng), true);
    let det_b = store.add("det.b", Matrix::zeros(1, 1), true);
    let kp_w = store.add("kp.w", gaussian_matrix(d_dec, 2, 0.02, rng), true);
    let kp_b = store.add("kp.b", Matrix::zeros(1, 2), true);
    Ok(TaskHeads {
        d_dec,
        store,
        ix: HeadIx {
            det_w,
            det_b,
            kp_w,
            kp_b,
        },
    })
}

impl TaskHeads {
    pub fn from_store(d_dec: usize, store: TensorStore) -> Result<Self> {
        let rebuilt = init_heads(d_dec, &mut RngStream::new(0))?;
        if rebuilt.store.len() != store.len() {
            return Err(Error::config("task head store layout mismatch".into()));
        }
        Ok(TaskHeads {
            d_dec,
            store,
            ix: rebuilt.ix,
        })
    }
}

/// Head outputs on a tape: per-patch occupancy probabilities [N×1] and the
/// normalized keypoint [1×2].
pub fn heads_on_tape(
    tape: &mut Tape,
    dec_features: VId,
    heads: &TaskHeads,
    bound: &[VId],
) -> Result<(VId, VId)> {
    if tape.value(dec_features).cols() != heads.d_dec {
        return Err(Error::shape(format!(
            "task heads expect {}-dim features, got {}",
            heads.d_dec,
            tape.value(dec_features).cols()
        )));
    }
    let ix = &heads.ix;
    let det_logits = tape.linear(dec_features, bound[ix.det_w.0], bound[ix.det_b.0])?;
    let det_probs = tape.sigmoid(det_logits)?;
    let pooled = tape.mean_rows(dec_features)?;
    let kp_logits = tape.linear(pooled, bound[ix.kp_w.0], bound[ix.kp_b.0])?;
    let kp = tape.sigmoid(kp_logits)?;
    Ok((det_probs, kp))
}

// ---------------------------------------------------------------------------
// Pixel metrics
// ---------------------------------------------------------------------------

fn check_geometry(a: &Image, b: &Image) -> Result<()> {
    if !a.same_geometry(b) {
        return Err(Error::shape(format!(
            "image geometry mismatch: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

/// Mean squared pixel error.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_geometry(a, b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

/// Mean absolute pixel error.
pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    check_geometry(a, b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

/// PSNR from a precomputed MSE: 10·log10(peak²/mse), capped for mse = 0.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    10.0 * (peak * peak / mse).log10()
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// SSIM with uniform 8×8 windows at stride 1, averaged over all windows
/// and channels. Requires both image dimensions to be at least the window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_geometry(a, b)?;
    let w = SSIM_WINDOW;
    if a.height < w || a.width < w {
        return Err(Error::shape(format!(
            "image {}x{} smaller than SSIM window {w}",
            a.height, a.width
        )));
    }
    let npix = (w * w) as f64;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for c in 0..a.channels {
        for y0 in 0..=a.height - w {
            for x0 in 0..=a.width - w {
                let mut sa = 0.0f64;
                let mut sb = 0.0f64;
                let mut saa = 0.0f64;
                let mut sbb = 0.0f64;
                let mut sab = 0.0f64;
                for dy in 0..w {
                    for dx in 0..w {
                        let va = a.get(y0 + dy, x0 + dx, c) as f64;
                        let vb = b.get(y0 + dy, x0 + dx, c) as f64;
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let mu_a = sa / npix;
                let mu_b = sb / npix;
                let var_a = saa / npix - mu_a * mu_a;
                let var_b = sbb / npix - mu_b * mu_b;
                let cov = sab / npix - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Occupancy metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancyMetrics {
    pub iou: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Binarize predictions at `threshold` (p ≥ threshold counts as occupied)
/// and compare against truth. Empty-vs-empty counts as perfect agreement.
pub fn occupancy_metrics(
    pred: &[f32],
    truth: &BitGrid,
    threshold: f32,
) -> Result<OccupancyMetrics> {
    if pred.len() != truth.bits.len() {
        return Err(Error::shape(format!(
            "occupancy prediction length {} vs grid {}",
            pred.len(),
            truth.bits.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(&truth.bits) {
        match (p >= threshold, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let iou = ratio(tp, tp + fp + fn_);
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    Ok(OccupancyMetrics {
        iou,
        accuracy: (tp + tn) as f64 / pred.len() as f64,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1,
    })
}

// ---------------------------------------------------------------------------
// Loss values (pure; the tape ops carry the gradients)
// ---------------------------------------------------------------------------

/// Dice loss value over probability/bit slices.
pub fn dice_loss_value(pred: &[f32], truth: &[f32]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("dice loss geometry mismatch".into()));
    }
    let mut inter = 0.0f64;
    let mut sp = 0.0f64;
    let mut sg = 0.0f64;
    for (&p, &g) in pred.iter().zip(truth) {
        inter += p as f64 * g as f64;
        sp += p as f64;
        sg += g as f64;
    }
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + sg + DICE_SMOOTH))
}

/// Mean squared coordinate error between keypoints.
pub fn kp_mse(pred: (f64, f64), truth: (f64, f64)) -> f64 {
    let dx = pred.0 - truth.0;
    let dy = pred.1 - truth.1;
    (dx * dx + dy * dy) / 2.0
}

/// Weighted aggregation of the three task losses.
pub fn multi_task_loss(recon_l1: f64, det_dice: f64, keypoint_mse: f64, w: &LossWeights) -> f64 {
    w.w_recon * recon_l1 + w.w_det * det_dice + w.w_kp * keypoint_mse
}
