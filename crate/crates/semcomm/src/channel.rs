//! Wireless link model: CSI, Shannon capacity, payload sizing, latency
//! accounting, and AWGN corruption of transmitted features.
//!
//! Two modes cover the two experimental regimes: `AnalogAwgn` adds
//! per-component Gaussian noise to the feature payload (quality metrics),
//! `BitBudget` delivers features unchanged and lets capacity constrain how
//! many patches fit a latency budget (rate accounting).

use crate::codec::FeatureFrame;
use crate::error::{Error, Result};
use crate::numcore::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    AnalogAwgn,
    BitBudget,
}

impl ChannelMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "analog-awgn" => Ok(ChannelMode::AnalogAwgn),
            "bit-budget" => Ok(ChannelMode::BitBudget),
            other => Err(Error::config(format!(
                "unknown channel mode '{other}' (expected analog-awgn or bit-budget)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelMode::AnalogAwgn => "analog-awgn",
            ChannelMode::BitBudget => "bit-budget",
        }
    }
}

/// CSI snapshot driving capacity, latency, and noise.
#[derive(Debug, Clone, Copy)]
pub struct ChannelState {
    pub snr_db: f64,
    pub bandwidth_hz: f64,
    pub mode: ChannelMode,
}

impl ChannelState {
    pub fn new(snr_db: f64, bandwidth_hz: f64, mode: ChannelMode) -> Result<Self> {
        if !snr_db.is_finite() {
            return Err(Error::config("snr_db must be finite".into()));
        }
        if !(bandwidth_hz > 0.0) {
            return Err(Error::config("bandwidth_hz must be positive".into()));
        }
        Ok(ChannelState {
            snr_db,
            bandwidth_hz,
            mode,
        })
    }

    pub fn snr_linear(&self) -> f64 {
        10f64.powf(self.snr_db / 10.0)
    }

    /// Block-fading hook: same link with the SNR offset applied. Defaults
    /// stay off; the harness draws per-image offsets only when configured.
    pub fn with_snr_offset(&self, offset_db: f64) -> ChannelState {
        ChannelState {
            snr_db: self.snr_db + offset_db,
            ..*self
        }
    }
}

/// Payload sizing parameters for the digital accounting.
#[derive(Debug, Clone, Copy)]
pub struct FrameGeometry {
    /// Feature components per kept patch.
    pub d_model: usize,
    /// Bits per feature component.
    pub quant_bits: usize,
    /// Total patches (determines index width).
    pub patch_count: usize,
}

impl FrameGeometry {
    pub fn new(d_model: usize, quant_bits: usize, patch_count: usize) -> Result<Self> {
        if d_model == 0 || quant_bits == 0 || patch_count == 0 {
            return Err(Error::config("frame geometry fields must be positive".into()));
        }
        Ok(FrameGeometry {
            d_model,
            quant_bits,
            patch_count,
        })
    }

    /// ceil(log2(patch_count)) bits to address one patch.
    pub fn index_bits(&self) -> u64 {
        if self.patch_count <= 1 {
            0
        } else {
            (usize::BITS - (self.patch_count - 1).leading_zeros()) as u64
        }
    }

    pub fn bits_per_patch(&self) -> u64 {
        (self.d_model * self.quant_bits) as u64 + self.index_bits()
    }
}

/// Shannon capacity: C = B · log2(1 + 10^(SNR_dB/10)) bits/s.
pub fn capacity(cs: &ChannelState) -> f64 {
    cs.bandwidth_hz * (1.0 + cs.snr_linear()).log2()
}

/// Payload size for `k` kept patches: k · (d·Q + index bits).
pub fn payload_bits(k: usize, geom: &FrameGeometry) -> Result<u64> {
    if k > geom.patch_count {
        return Err(Error::shape(format!(
            "kept count {k} exceeds patch count {}",
            geom.patch_count
        )));
    }
    Ok(k as u64 * geom.bits_per_patch())
}

/// Payload size for a real-valued kept count. The sweep's latency column
/// uses (1-ρ)·N directly so the latency ratio between mask ratios is the
/// exact (1-ρ) proportionality even when (1-ρ)·N is not an integer.
pub fn payload_bits_fractional(kept: f64, geom: &FrameGeometry) -> f64 {
    kept * geom.bits_per_patch() as f64
}

/// Transmission latency in seconds: bits / capacity.
pub fn latency_s(bits: f64, cs: &ChannelState) -> f64 {
    if bits == 0.0 {
        return 0.0;
    }
    bits / capacity(cs)
}

/// Largest kept count whose payload fits within `t_budget` seconds,
/// clamped to [1, N].
pub fn select_budget(cs: &ChannelState, t_budget_s: f64, geom: &FrameGeometry) -> Result<usize> {
    if !(t_budget_s > 0.0) {
        return Err(Error::config("t_budget_s must be positive".into()));
    }
    let raw = (capacity(cs) * t_budget_s / geom.bits_per_patch() as f64).floor();
    let k = if raw.is_finite() && raw >= 0.0 {
        raw as usize
    } else {
        0
    };
    Ok(k.clamp(1, geom.patch_count))
}

/// Whether the budget had to be clamped up to the single-patch minimum.
pub fn budget_underflows(cs: &ChannelState, t_budget_s: f64, geom: &FrameGeometry) -> bool {
    capacity(cs) * t_budget_s < geom.bits_per_patch() as f64
}

/// Send a frame across the link. In analog mode the features are
/// normalized to unit average power, corrupted with Gaussian noise of
/// variance 10^(-SNR_dB/10), and rescaled; indices arrive intact. In
/// bit-budget mode the payload is delivered unchanged. A zero-power frame
/// is delivered unchanged (nothing to scale against).
pub fn transmit(frame: &FeatureFrame, cs: &ChannelState, rng: &mut RngStream) -> Result<FeatureFrame> {
    if frame.kept.is_empty() {
        return Err(Error::shape("transmit of empty frame".into()));
    }
    match cs.mode {
        ChannelMode::BitBudget => Ok(frame.clone()),
        ChannelMode::AnalogAwgn => {
            let mean_sq = frame
                .features
                .as_slice()
                .iter()
                .map(|&v| v as f64 * v as f64)
                .sum::<f64>()
                / frame.features.len() as f64;
            if mean_sq == 0.0 {
                return Ok(frame.clone());
            }
            let g = 1.0 / mean_sq.sqrt();
            let sigma = 10f64.powf(-cs.snr_db / 20.0);
            let mut out = frame.clone();
            for v in out.features.as_mut_slice() {
                let scaled = *v as f64 * g;
                let noisy = scaled + rng.gaussian() * sigma;
                *v = (noisy / g) as f32;
            }
            Ok(out)
        }
    }
}
