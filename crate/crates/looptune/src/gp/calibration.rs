//! Confidence scaling for GP error bars.
//!
//! Posterior standard deviations are inflated by
//! `beta = B + R sqrt(gamma + 1 + ln(1/delta'))`, where `B` bounds the norm
//! of the target function in the kernel's function space, `R` is the
//! sub-Gaussian noise scale, `gamma` the information gain of the training
//! set, and `delta'` the admissible failure probability. With that scaling
//! the true function stays inside `mean +/- beta * std` with probability at
//! least `1 - delta'` jointly over all queries.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    /// Bound on the function norm in the kernel's reproducing space.
    pub rkhs_bound: f64,
    /// Sub-Gaussian scale of the observation noise.
    pub noise_scale: f64,
    /// Information gain of the training data.
    pub info_gain: f64,
    /// Admissible failure probability, in (0, 1).
    pub confidence: f64,
}

/// Confidence multiplier for one output.
pub fn calibration_beta(cfg: &CalibrationConfig) -> Result<f64> {
    if !(cfg.confidence > 0.0 && cfg.confidence < 1.0) {
        return Err(Error::invalid(format!(
            "failure probability must lie in (0, 1), got {}",
            cfg.confidence
        )));
    }
    if !(cfg.rkhs_bound >= 0.0) || !(cfg.noise_scale >= 0.0) || !(cfg.info_gain >= 0.0) {
        return Err(Error::invalid(
            "norm bound, noise scale and information gain must be nonnegative",
        ));
    }
    Ok(cfg.rkhs_bound + cfg.noise_scale * (cfg.info_gain + 1.0 + (1.0 / cfg.confidence).ln()).sqrt())
}

/// Per-output failure probability that makes `outputs` simultaneous bounds
/// hold jointly with probability `1 - delta`.
pub fn per_output_confidence(delta: f64, outputs: usize) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if outputs == 0 {
        return Err(Error::invalid("need at least one output"));
    }
    Ok(1.0 - (1.0 - delta).powf(1.0 / outputs as f64))
}
