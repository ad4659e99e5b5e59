//! Numerical verification of the multi-channel contrastive bound.
//!
//! Synthetic jointly Gaussian channels with closed-form mutual information
//! let us check, by direct optimization, that the trained contrastive loss
//! respects `L >= sum_i(-I(x_i; c) + ln N)` and that aggregating neighbor
//! context raises the extracted information exactly when channels share a
//! latent source.
//!
//! Generative model per sample: a shared latent `s ~ N(0,1)`;
//! contexts `c_i = sqrt(rho_cross) s + sqrt(1 - rho_cross) u_i` (unit
//! variance, pairwise correlation `rho_cross`); futures
//! `x_i = rho_i c_i + g s + sigma_i eps_i` scaled to unit variance. Both
//! `I(x_i; c_i)` and `I(x_i; c)` are then analytic.

pub mod critic;

use crate::error::{Error, Result};

pub use critic::{multi_channel_cpc_bound, single_channel_cpc_bound, BoundPair, BoundReport};

/// Spec of one synthetic Gaussian channel set.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GaussianChannelSpec {
    pub n_channels: usize,
    /// Temporal context-future correlation per channel.
    pub rho_temporal: Vec<f64>,
    /// Pairwise correlation between channel contexts.
    pub rho_cross: f64,
    /// Coupling of the shared latent into every future sample.
    pub shared_gain: f64,
    pub samples_per_batch: usize,
}

impl GaussianChannelSpec {
    /// Independent channels with per-channel temporal correlation `rho`.
    pub fn independent(n_channels: usize, rho: f64, samples_per_batch: usize) -> Self {
        Self {
            n_channels,
            rho_temporal: vec![rho; n_channels],
            rho_cross: 0.0,
            shared_gain: 0.0,
            samples_per_batch,
        }
    }

    /// Residual noise variance of channel `i`'s future.
    pub fn noise_variance(&self, i: usize) -> f64 {
        let rho = self.rho_temporal[i];
        let g = self.shared_gain;
        1.0 - (rho * rho + g * g + 2.0 * rho * g * self.rho_cross.sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 || self.rho_temporal.len() != self.n_channels {
            return Err(Error::InvalidArgument(format!(
                "need one temporal rho per channel ({} != {})",
                self.rho_temporal.len(),
                self.n_channels
            )));
        }
        if !(0.0..1.0).contains(&self.rho_cross) {
            return Err(Error::InvalidArgument(format!(
                "rho_cross must lie in [0, 1), got {}",
                self.rho_cross
            )));
        }
        for (i, rho) in self.rho_temporal.iter().enumerate() {
            if rho.abs() >= 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "|rho| must be < 1, got {rho} for channel {i}"
                )));
            }
            if self.noise_variance(i) <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "channel {i}: rho/shared_gain leave no noise variance; \
                     the implied covariance is not positive definite"
                )));
            }
        }
        if self.samples_per_batch == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(())
    }

    /// Posterior variance of the shared latent given all contexts.
    pub fn latent_posterior_variance(&self) -> f64 {
        let k = self.rho_cross;
        (1.0 - k) / (1.0 - k + self.n_channels as f64 * k)
    }

    /// `I(x_i; c_i)`: what a self-only context can extract.
    pub fn channel_self_mi(&self, i: usize) -> f64 {
        let corr = self.rho_temporal[i] + self.shared_gain * self.rho_cross.sqrt();
        -0.5 * (1.0 - corr * corr).ln()
    }

    /// `I(x_i; c)`: the full-context mutual information. The pair
    /// `(c_i, mean of other contexts)` is a sufficient statistic, so this
    /// also equals the with-neighbors aggregate MI.
    pub fn channel_full_mi(&self, i: usize) -> f64 {
        let g = self.shared_gain;
        let cond_var = g * g * self.latent_posterior_variance() + self.noise_variance(i);
        -0.5 * cond_var.ln()
    }
}

/// Mutual information of a bivariate standard Gaussian pair, in nats.
pub fn analytic_gaussian_mi(rho: f64) -> Result<f64> {
    if rho.abs() >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "|rho| must be < 1, got {rho}"
        )));
    }
    Ok(-0.5 * (1.0 - rho * rho).ln())
}

/// Product-vs-power comparison behind the bound's approximation gap:
/// `prod_j p_j <= (mean_j p_j)^n`. Returns `(lhs, rhs, gap)`.
pub fn jensen_gap(p_values: &[f64]) -> Result<(f64, f64, f64)> {
    if p_values.is_empty() {
        return Err(Error::InvalidArgument("empty tuple".into()));
    }
    if let Some(bad) = p_values.iter().find(|v| **v <= 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "jensen gap needs positive inputs, got {bad}"
        )));
    }
    let n = p_values.len();
    let lhs: f64 = p_values.iter().product();
    let mean = p_values.iter().sum::<f64>() / n as f64;
    let rhs = mean.powi(n as i32);
    Ok((lhs, rhs, rhs - lhs))
}
