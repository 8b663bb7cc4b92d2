//! Time parametrizations: the linear β schedule of the VP forward process,
//! its closed-form contraction coefficients, and the linear slowdown
//! `t(s) = s / r`.

use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};

/// Linear noise rate `β(τ) = β_min + (β_max − β_min) τ / T` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule {
            beta_min: 0.1,
            beta_max: 20.0,
            horizon: 1.0,
        }
    }
}

/// Coefficients of `Y_τ = a_τ X_0 + γ_τ Z` for the VP forward process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpCoefficients {
    pub decay_a: f64,
    pub noise_gamma2: f64,
}

impl BetaSchedule {
    pub fn new(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self> {
        if !(beta_min >= 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
            return Err(Error::config(format!(
                "beta schedule needs 0 <= beta_min <= beta_max, got ({beta_min}, {beta_max})"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config(format!("horizon must be positive, got {horizon}")));
        }
        Ok(BetaSchedule {
            beta_min,
            beta_max,
            horizon,
        })
    }

    /// A schedule with `β ≡ 0`: the marginal path is frozen.
    pub fn frozen(horizon: f64) -> Self {
        BetaSchedule {
            beta_min: 0.0,
            beta_max: 0.0,
            horizon,
        }
    }

    pub fn beta_at(&self, tau: f64) -> Result<f64> {
        check_range("tau", tau, 0.0, self.horizon)?;
        Ok(self.beta_unchecked(tau))
    }

    #[inline]
    pub(crate) fn beta_unchecked(&self, tau: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * tau / self.horizon
    }

    /// `∫₀^τ β(s) ds`.
    #[inline]
    pub fn integrated_beta(&self, tau: f64) -> f64 {
        self.beta_min * tau + (self.beta_max - self.beta_min) * tau * tau / (2.0 * self.horizon)
    }

    pub fn vp_coefficients(&self, tau: f64) -> Result<VpCoefficients> {
        check_range("tau", tau, 0.0, self.horizon)?;
        Ok(self.vp_unchecked(tau))
    }

    #[inline]
    pub(crate) fn vp_unchecked(&self, tau: f64) -> VpCoefficients {
        let half = 0.5 * self.integrated_beta(tau);
        let decay_a = (-half).exp();
        // 1 − e^{−2h} via expm1 keeps γ² accurate for small τ.
        let noise_gamma2 = -(-2.0 * half).exp_m1();
        VpCoefficients {
            decay_a,
            noise_gamma2,
        }
    }
}

/// Linear slowdown `t(s) = s / r` over the slowed horizon `S = r T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeRescale {
    pub budget_r: f64,
    pub horizon: f64,
}

impl TimeRescale {
    pub fn new(budget_r: f64, horizon: f64) -> Result<Self> {
        if !(budget_r >= 1.0 && budget_r.is_finite()) {
            return Err(Error::config(format!("budget r must be >= 1, got {budget_r}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config(format!("horizon must be positive, got {horizon}")));
        }
        Ok(TimeRescale { budget_r, horizon })
    }

    pub fn slowed_horizon(&self) -> f64 {
        self.budget_r * self.horizon
    }

    /// `ṫ(s)`, constant for the linear map.
    pub fn rate(&self) -> f64 {
        1.0 / self.budget_r
    }

    pub fn slow_time(&self, s: f64) -> Result<f64> {
        check_range("s", s, 0.0, self.slowed_horizon())?;
        Ok(s / self.budget_r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_endpoints_and_midpoint() {
        let b = BetaSchedule::default();
        assert_eq!(b.beta_at(0.0).unwrap(), 0.1);
        assert_eq!(b.beta_at(1.0).unwrap(), 20.0);
        assert!((b.beta_at(0.5).unwrap() - 10.05).abs() < 1e-12);
        assert!(matches!(b.beta_at(1.5), Err(Error::Domain { .. })));
        assert!(b.beta_at(-1e-9).is_err());
    }

    #[test]
    fn vp_coefficients_closed_form() {
        let b = BetaSchedule::default();
        let c0 = b.vp_coefficients(0.0).unwrap();
        assert_eq!(c0.decay_a, 1.0);
        assert_eq!(c0.noise_gamma2, 0.0);

        let constant = BetaSchedule::new(2.0, 2.0, 1.0).unwrap();
        let c = constant.vp_coefficients(1.0).unwrap();
        assert!((c.decay_a - (-1.0f64).exp()).abs() < 1e-15);
        assert!((c.noise_gamma2 - (1.0 - (-2.0f64).exp())).abs() < 1e-15);
        assert!((c.noise_gamma2 - 0.8647).abs() < 1e-4);
        assert!(constant.vp_coefficients(1.01).is_err());
    }

    #[test]
    fn coefficients_monotone_and_variance_preserving() {
        let b = BetaSchedule::default();
        let mut prev = b.vp_coefficients(0.0).unwrap();
        for i in 1..=1000 {
            let c = b.vp_coefficients(i as f64 / 1000.0).unwrap();
            assert!(c.decay_a < prev.decay_a);
            assert!(c.noise_gamma2 > prev.noise_gamma2);
            assert!((c.decay_a * c.decay_a + c.noise_gamma2 - 1.0).abs() < 1e-12);
            prev = c;
        }
    }

    #[test]
    fn slow_time_examples() {
        assert_eq!(TimeRescale::new(1.0, 1.0).unwrap().slow_time(0.7).unwrap(), 0.7);
        assert_eq!(TimeRescale::new(100.0, 1.0).unwrap().slow_time(50.0).unwrap(), 0.5);
        let tr = TimeRescale::new(4.0, 1.0).unwrap();
        assert_eq!(tr.slow_time(tr.slowed_horizon()).unwrap(), 1.0);
        assert!(tr.slow_time(4.0001).is_err());
        assert!(tr.slow_time(-0.1).is_err());
        assert!(TimeRescale::new(0.5, 1.0).is_err());
        assert_eq!(tr.rate(), 0.25);
    }

    #[test]
    fn slowed_grid_is_reproducible_and_monotone() {
        let tr = TimeRescale::new(10.0, 1.0).unwrap();
        let eta = 0.001;
        let mut prev = -1.0;
        for k in 0..=10_000u64 {
            let t = tr.slow_time(k as f64 * eta).unwrap();
            assert_eq!(t, (k as f64 * eta) / 10.0);
            assert!(t > prev);
            prev = t;
        }
        assert_eq!(prev, 1.0);
    }
}
