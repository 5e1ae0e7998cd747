//! Finite-difference verification of analytic gradients.
//!
//! The numeric side differences the f64 replay of the same forward, so the
//! comparison is limited by the truncation error of the central difference
//! and the f32 rounding of the analytic path, not by f32 cancellation in
//! the difference quotient.

use super::matrix::{Mat, Matrix};
use super::ops::{self, OpKind};
use super::rng::RngStream;
use super::tape::{Gradients, Tape, VId};
use crate::error::{Error, Result};

const REL_ERR_FLOOR: f64 = 1e-8;

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::config(format!(
            "grad_check eps {eps} outside [1e-5, 1e-2]"
        )));
    }
    Ok(())
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare the analytic backward of a single op against central finite
/// differences of its forward, projected through a fixed random upstream
/// weighting. Returns the maximum relative error over all coordinates of
/// the op's differentiable inputs.
pub fn grad_check(kind: &OpKind, inputs: &[Matrix], eps: f64) -> Result<f64> {
    check_eps(eps)?;
    for m in inputs {
        if !m.all_finite() {
            return Err(Error::numeric(format!(
                "grad_check '{}': non-finite input",
                kind.name()
            )));
        }
    }
    let input_refs: Vec<&Matrix> = inputs.iter().collect();
    let out = ops::forward(kind, &input_refs)?;
    if !out.all_finite() {
        return Err(Error::numeric(format!(
            "grad_check '{}': non-finite forward output",
            kind.name()
        )));
    }

    // Fixed upstream weighting with magnitudes bounded away from zero.
    let mut wrng = RngStream::labeled(0x6772_6164, "upstream");
    let mut upstream = Matrix::zeros(out.rows(), out.cols());
    for v in upstream.as_mut_slice() {
        let mag = wrng.uniform_in(0.25, 1.0);
        let sign = if wrng.below(2) == 0 { 1.0 } else { -1.0 };
        *v = (mag * sign) as f32;
    }

    let analytic = ops::backward(kind, &input_refs, &out, &upstream)?;

    // Scalar objective in f64: sum(U ⊙ forward(inputs)).
    let up64 = upstream.to_f64_mat();
    let base: Vec<Mat<f64>> = inputs.iter().map(|m| m.to_f64_mat()).collect();
    let objective = |mats: &[Mat<f64>]| -> Result<f64> {
        let refs: Vec<&Mat<f64>> = mats.iter().collect();
        let o = ops::forward(kind, &refs)?;
        if !o.all_finite() {
            return Err(Error::numeric(format!(
                "grad_check '{}': non-finite intermediate",
                kind.name()
            )));
        }
        Ok(o.as_slice()
            .iter()
            .zip(up64.as_slice())
            .map(|(&a, &b)| a * b)
            .sum())
    };

    let mut max_err = 0.0f64;
    for input_idx in kind.checked_inputs() {
        let coords = inputs[input_idx].len();
        for c in 0..coords {
            let mut probe = base.clone();
            let orig = probe[input_idx].as_slice()[c];
            probe[input_idx].as_mut_slice()[c] = orig + eps;
            let plus = objective(&probe)?;
            probe[input_idx].as_mut_slice()[c] = orig - eps;
            let minus = objective(&probe)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[input_idx].as_slice()[c] as f64;
            max_err = max_err.max(rel_err(a, numeric));
        }
    }
    Ok(max_err)
}

/// Finite-difference check of a scalar loss recorded on a tape, with
/// respect to one leaf. Probes up to `max_coords` coordinates (sampled
/// deterministically when the leaf is larger). The numeric side replays
/// the recorded graph in f64 with the perturbed leaf substituted.
pub fn tape_grad_check(
    tape: &Tape,
    loss: VId,
    leaf: VId,
    grads: &Gradients,
    eps: f64,
    max_coords: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    check_eps(eps)?;
    let base = tape.value(leaf).to_f64_mat();
    let n = base.len();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        idx.truncate(max_coords);
        idx
    };
    let analytic = grads.get(leaf).ok_or_else(|| {
        Error::numeric("tape_grad_check: leaf has no gradient (not trainable?)".to_string())
    })?;
    let mut max_err = 0.0f64;
    for &c in &coords {
        let mut probe = base.clone();
        probe.as_mut_slice()[c] += eps;
        let plus = tape.eval_f64(&[(leaf, probe.clone())], loss)?.get(0, 0);
        probe.as_mut_slice()[c] -= 2.0 * eps;
        let minus = tape.eval_f64(&[(leaf, probe)], loss)?.get(0, 0);
        let numeric = (plus - minus) / (2.0 * eps);
        max_err = max_err.max(rel_err(analytic.as_slice()[c] as f64, numeric));
    }
    Ok(max_err)
}
