//! Noise schedules `α_t` for the masking process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::check_time;

/// Keep-probability schedule with `α(0) = 1` and `α(1) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseSchedule {
    /// `α_t = 1 - t`.
    Linear,
    /// `α_t = exp(-σ(t))` with `σ(t) = σ_min^(1-t) σ_max^t`, endpoints pinned.
    LogLinear { sigma_min: f64, sigma_max: f64 },
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::Linear
    }
}

impl NoiseSchedule {
    pub fn log_linear(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "log-linear schedule needs 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
            )));
        }
        Ok(NoiseSchedule::LogLinear {
            sigma_min,
            sigma_max,
        })
    }

    /// The schedule used by the grid experiments: σ_min = 1e-4, σ_max = 20.
    pub fn default_log_linear() -> Self {
        NoiseSchedule::LogLinear {
            sigma_min: 1e-4,
            sigma_max: 20.0,
        }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.alpha_unchecked(t))
    }

    pub(crate) fn alpha_unchecked(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        if t >= 1.0 {
            return 0.0;
        }
        match *self {
            NoiseSchedule::Linear => 1.0 - t,
            NoiseSchedule::LogLinear {
                sigma_min,
                sigma_max,
            } => (-sigma(sigma_min, sigma_max, t)).exp(),
        }
    }

    /// `dα/dt` on the open interval.
    pub fn alpha_derivative(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(match *self {
            NoiseSchedule::Linear => -1.0,
            NoiseSchedule::LogLinear {
                sigma_min,
                sigma_max,
            } => {
                let s = sigma(sigma_min, sigma_max, t);
                -(-s).exp() * s * (sigma_max / sigma_min).ln()
            }
        })
    }

    /// ELBO weight `-α'_t / (1 - α_t)`; infinite where `α_t = 1`.
    pub fn elbo_weight(&self, t: f64) -> Result<f64> {
        let a = self.alpha(t)?;
        let da = self.alpha_derivative(t)?;
        Ok(-da / (1.0 - a))
    }
}

fn sigma(sigma_min: f64, sigma_max: f64, t: f64) -> f64 {
    sigma_min.powf(1.0 - t) * sigma_max.powf(t)
}
