//! Analog device update rules.
//!
//! The asymmetric linear device updates a weight entry as
//!
//! ```text
//! w' = w - α·g - α·(1/τ)·|g|·w
//! ```
//!
//! where τ is the device constant. The `|g|·w` term is the asymmetric bias:
//! increments shrink as an entry moves toward `-τ·sign(g)` and vanish there.
//! τ is stored as `inv_tau = 1/τ` so the digital limit (τ → ∞) is the exact
//! value `inv_tau = 0` and the decay term is exactly zero, not merely small.
//!
//! Evaluation order is fixed (two sequential subtractions, products grouped
//! left to right) so trajectories are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// What to do when the saturation degree reaches the configured limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SaturationPolicy {
    Warn,
    Abort,
}

/// Device parameters for one run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DeviceConfig {
    inv_tau: f64,
    /// Allowed `‖W‖_∞/τ` ratio before the policy fires. Must be in (0,1).
    pub saturation_limit: f64,
    pub policy: SaturationPolicy,
}

impl DeviceConfig {
    /// Digital device: no asymmetric bias (`inv_tau = 0` exactly).
    pub fn digital() -> Self {
        Self {
            inv_tau: 0.0,
            saturation_limit: 0.9,
            policy: SaturationPolicy::Warn,
        }
    }

    /// Analog device with constant `tau` (finite, > 0).
    pub fn analog(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::config(format!(
                "analog device requires finite tau > 0, got {tau}"
            )));
        }
        Ok(Self {
            inv_tau: 1.0 / tau,
            saturation_limit: 0.9,
            policy: SaturationPolicy::Warn,
        })
    }

    pub fn with_saturation(mut self, limit: f64, policy: SaturationPolicy) -> Result<Self> {
        if !(limit > 0.0 && limit < 1.0) {
            return Err(Error::config(format!(
                "saturation_limit must be in (0,1), got {limit}"
            )));
        }
        self.saturation_limit = limit;
        self.policy = policy;
        Ok(self)
    }

    pub fn inv_tau(&self) -> f64 {
        self.inv_tau
    }

    pub fn is_digital(&self) -> bool {
        self.inv_tau == 0.0
    }

    /// τ for display; `f64::INFINITY` for a digital device.
    pub fn tau(&self) -> f64 {
        if self.is_digital() {
            f64::INFINITY
        } else {
            1.0 / self.inv_tau
        }
    }
}

/// Counters accumulated over one run.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub max_inf_norm_seen: f64,
    pub saturation_events: u64,
    pub updates_applied: u64,
}

/// Outcome of a saturation check.
#[derive(Debug, Clone, Copy)]
pub struct SaturationCheck {
    /// `‖W‖_∞ / τ` (0 for digital devices).
    pub degree: f64,
    pub triggered: bool,
}

/// One device update event: `W' = W - α·G - α·inv_tau·(|G| ⊙ W)`.
///
/// With `inv_tau = 0` this is exactly digital SGD. Entries at
/// `w = -τ·sign(g)` receive exactly zero increment.
pub fn analog_update(w: &Matrix, g: &Matrix, alpha: f64, dev: &DeviceConfig) -> Result<Matrix> {
    assert_eq!(
        (w.rows(), w.cols()),
        (g.rows(), g.cols()),
        "analog_update: shape mismatch"
    );
    assert!(alpha > 0.0, "analog_update: alpha must be positive");
    let inv_tau = dev.inv_tau;
    let data: Vec<f64> = w
        .as_slice()
        .iter()
        .zip(g.as_slice())
        .map(|(&wv, &gv)| wv - alpha * gv - alpha * inv_tau * gv.abs() * wv)
        .collect();
    let out = Matrix::new(w.rows(), w.cols(), data);
    if !out.all_finite() {
        return Err(Error::run(format!(
            "non-finite weight after device update (alpha={alpha}, tau={}, |W|_inf={}, |G|_inf={})",
            dev.tau(),
            w.inf_norm(),
            g.inf_norm()
        )));
    }
    Ok(out)
}

/// Sequential micro-batch accumulation: applies the `B` gradients (all
/// computed at `w_start`) one by one with step `alpha/B`, the decay term
/// using the evolving weight. Returns the weight after the B-th sub-step.
///
/// In digital mode this telescopes to one mini-batch SGD step
/// `w_start - (alpha/B)·ΣG_b`.
pub fn minibatch_analog_update(
    w_start: &Matrix,
    grads: &[Matrix],
    alpha: f64,
    dev: &DeviceConfig,
) -> Result<Matrix> {
    assert!(!grads.is_empty(), "minibatch_analog_update: empty gradient list");
    let step = alpha / grads.len() as f64;
    let mut w = w_start.clone();
    for g in grads {
        w = analog_update(&w, g, step, dev)?;
    }
    Ok(w)
}

/// Measure the saturation degree `‖W‖_∞/τ`, update the run counters, and
/// apply the device policy.
pub fn check_saturation(
    w: &Matrix,
    dev: &DeviceConfig,
    stats: &mut UpdateStats,
) -> Result<SaturationCheck> {
    let inf = w.inf_norm();
    if inf > stats.max_inf_norm_seen {
        stats.max_inf_norm_seen = inf;
    }
    let degree = inf * dev.inv_tau;
    let triggered = degree >= dev.saturation_limit;
    if triggered {
        stats.saturation_events += 1;
        if dev.policy == SaturationPolicy::Abort {
            return Err(Error::run(format!(
                "saturation degree {degree:.4} reached limit {} (|W|_inf={inf:.4}, tau={}) after {} updates",
                dev.saturation_limit,
                dev.tau(),
                stats.updates_applied
            )));
        }
    }
    Ok(SaturationCheck { degree, triggered })
}

/// Asymptotic-error amplification factor
/// `(1+u)·degree² / (1 - (1+u)·degree²)`.
///
/// `u = 0` gives the synchronous factor, `u > 0` the asynchronous one.
/// Defined only while `(1+u)·degree² < 1`.
pub fn amplification_factor(degree: f64, u: f64) -> Result<f64> {
    assert!(u >= 0.0, "amplification_factor: u must be non-negative");
    let s = (1.0 + u) * degree * degree;
    if s >= 1.0 {
        return Err(Error::run(format!(
            "device too saturated for the bound to apply: (1+u)·degree² = {s} >= 1"
        )));
    }
    Ok(s / (1.0 - s))
}

/// The factor as printed with a linear numerator,
/// `(degree/τ)·... = (W_max/τ²) / (1 - W_max/τ²)`; reported alongside the
/// squared form in diagnostics.
pub fn amplification_factor_linear(w_max: f64, inv_tau: f64) -> Result<f64> {
    let s = w_max * inv_tau * inv_tau;
    if s >= 1.0 {
        return Err(Error::run(
            "device too saturated for the bound to apply".to_string(),
        ));
    }
    Ok(s / (1.0 - s))
}
