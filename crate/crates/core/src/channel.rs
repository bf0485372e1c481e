//! Stochastic model of one simulated radio link.
//!
//! A link lengthens or perturbs the geometric path: zero-mean Gaussian
//! ranging noise, a constant excess when the link is non-line-of-sight, an
//! occasional multipath excess, and packet loss. Multipath and NLOS only ever
//! lengthen a path.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("channel parameter `{name}` = {value} is out of range ({expected})")]
    OutOfRange { name: &'static str, value: f64, expected: &'static str },
}

/// Per-link perturbation parameters. Distances in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelProfile {
    /// Std of the Gaussian added to the one-way path length.
    pub noise_sigma: f64,
    /// Constant excess applied while `nlos` is set.
    pub nlos_bias: f64,
    pub nlos: bool,
    /// Probability of a multipath outlier on a given draw.
    pub outlier_prob: f64,
    /// Excess path length of a multipath outlier.
    pub outlier_extra: f64,
    /// Probability that a message is dropped.
    pub loss_prob: f64,
    /// Draw poll and response paths independently instead of once per exchange.
    pub asymmetric: bool,
}

impl ChannelProfile {
    /// The identity channel: no noise, no bias, no loss.
    pub const IDEAL: ChannelProfile = ChannelProfile {
        noise_sigma: 0.0,
        nlos_bias: 0.0,
        nlos: false,
        outlier_prob: 0.0,
        outlier_extra: 0.0,
        loss_prob: 0.0,
        asymmetric: false,
    };

    /// Default line-of-sight link: 5 cm ranging noise, 1 % loss.
    ///
    /// The noise level is a calibration knob; it places the fused position
    /// scatter in the few-centimeter band seen on hardware.
    pub const LOS: ChannelProfile = ChannelProfile {
        noise_sigma: 0.05,
        loss_prob: 0.01,
        ..Self::IDEAL
    };

    pub fn with_nlos(mut self, bias: f64) -> Self {
        self.nlos = true;
        self.nlos_bias = bias;
        self
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let nonneg = |name, value: f64| {
            if value.is_finite() && value >= 0.0 {
                Ok(())
            } else {
                Err(ChannelError::OutOfRange { name, value, expected: "finite and >= 0" })
            }
        };
        let prob = |name, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(ChannelError::OutOfRange { name, value, expected: "within [0, 1]" })
            }
        };
        nonneg("noise_sigma", self.noise_sigma)?;
        nonneg("nlos_bias", self.nlos_bias)?;
        nonneg("outlier_extra", self.outlier_extra)?;
        prob("outlier_prob", self.outlier_prob)?;
        prob("loss_prob", self.loss_prob)?;
        Ok(())
    }

    /// Expected excess path length over the true distance, ignoring the
    /// clamp at zero.
    pub fn expected_bias(&self) -> f64 {
        let nlos = if self.nlos { self.nlos_bias } else { 0.0 };
        nlos + self.outlier_prob * self.outlier_extra
    }
}

impl Default for ChannelProfile {
    fn default() -> Self {
        Self::LOS
    }
}

/// Outcome of pushing one message over a link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathOutcome {
    /// Perturbed one-way path length in meters.
    Delivered(f64),
    Lost,
}

impl PathOutcome {
    pub fn length(self) -> Option<f64> {
        match self {
            PathOutcome::Delivered(d) => Some(d),
            PathOutcome::Lost => None,
        }
    }
}

/// Perturbs a true one-way distance according to `profile`.
///
/// Every call consumes the same three draws (loss, noise, outlier) whatever
/// the outcome, so two profiles that differ only in deterministic terms stay
/// aligned on the same stream.
pub fn perturb_path<R: Rng + ?Sized>(true_distance: f64, profile: &ChannelProfile, rng: &mut R) -> PathOutcome {
    debug_assert!(true_distance >= 0.0);
    let loss_draw: f64 = rng.random();
    let z: f64 = StandardNormal.sample(rng);
    let outlier_draw: f64 = rng.random();

    if loss_draw < profile.loss_prob {
        return PathOutcome::Lost;
    }
    let mut d = true_distance + profile.noise_sigma * z;
    if profile.nlos {
        d += profile.nlos_bias;
    }
    if outlier_draw < profile.outlier_prob {
        d += profile.outlier_extra;
    }
    PathOutcome::Delivered(d.max(0.0))
}
