//! Online per-feature normalization to zero mean and unit variance, with a
//! variance floor so a near-constant feature cannot blow up after scaling.

use crate::error::{Error, Result};
use crate::flops;

/// Exponential running estimates of one feature's mean and variance.
///
/// The mean is updated first and the variance uses both the new and the old
/// mean: `var = beta * var + (1 - beta) * (mu_new - h)(mu_old - h)`. The
/// stored variance is clamped at zero; the recursion can dip slightly
/// negative on adversarial alternating streams.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMoments {
    pub mean: f64,
    pub var: f64,
    pub beta: f64,
    pub eps: f64,
    pub frozen: bool,
}

impl RunningMoments {
    /// Start at mean 0, variance 1.
    pub fn new(beta: f64, eps: f64) -> Self {
        assert!(beta > 0.0 && beta < 1.0, "decay must lie in (0,1)");
        assert!(eps > 0.0, "variance floor must be positive");
        Self {
            mean: 0.0,
            var: 1.0,
            beta,
            eps,
            frozen: false,
        }
    }

    /// Current normalization denominator, `max(eps, sigma)`.
    #[inline]
    pub fn denom(&self) -> f64 {
        self.var.sqrt().max(self.eps)
    }

    /// Update the moments with `h` (unless frozen) and return the normalized
    /// value `(h - mean) / max(eps, sigma)`.
    pub fn observe_and_normalize(&mut self, h: f64) -> Result<f64> {
        if !h.is_finite() {
            return Err(Error::NonFinite {
                context: "normalizer input",
            });
        }
        if !self.frozen {
            let old_mean = self.mean;
            let one_minus = 1.0 - self.beta;
            self.mean = self.beta.mul_add(old_mean, one_minus * h);
            let var = self
                .beta
                .mul_add(self.var, one_minus * ((self.mean - h) * (old_mean - h)));
            self.var = var.max(0.0);
            flops::add(7);
        }
        flops::add(2);
        Ok((h - self.mean) / self.denom())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }
}
