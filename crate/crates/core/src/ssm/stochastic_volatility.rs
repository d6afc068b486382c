//! Stochastic volatility model with AR(1) log-volatility:
//! `X_t | x_{t-1} ~ N(phi * x_{t-1}, sigma^2)`,
//! `Y_t | x_t ~ N(0, beta^2 * exp(x_t))`.

use nalgebra::DVector;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gauss::log_normal_pdf;

use super::StateSpaceModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvParams {
    pub phi: f64,
    pub sigma: f64,
    pub beta: f64,
}

/// State transition `phi * x + sigma * z` for a standard-normal draw `z`.
pub fn sv_propagate(x: f64, params: &SvParams, z: f64) -> Result<f64> {
    if !x.is_finite() || !z.is_finite() {
        return Err(Error::Domain(format!(
            "sv_propagate requires finite inputs, got x={x}, z={z}"
        )));
    }
    Ok(params.phi * x + params.sigma * z)
}

/// Observation log-density `log N(y; 0, beta^2 * exp(x))`.
pub fn sv_log_obs(y: f64, x: f64, params: &SvParams) -> f64 {
    log_normal_pdf(y, 0.0, params.beta * params.beta * x.exp())
}

#[derive(Debug, Clone)]
pub struct StochasticVolatility {
    params: SvParams,
    initial_var: f64,
}

impl StochasticVolatility {
    /// The initial law is the stationary AR(1) distribution
    /// `N(0, sigma^2 / (1 - phi^2))` when `|phi| < 1`, else `N(0, sigma^2)`.
    pub fn new(phi: f64, sigma: f64, beta: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
        }
        if !(beta > 0.0) {
            return Err(Error::Domain(format!("beta must be > 0, got {beta}")));
        }
        if !phi.is_finite() {
            return Err(Error::Domain(format!("phi must be finite, got {phi}")));
        }
        let initial_var = if phi.abs() < 1.0 {
            sigma * sigma / (1.0 - phi * phi)
        } else {
            sigma * sigma
        };
        Ok(StochasticVolatility {
            params: SvParams { phi, sigma, beta },
            initial_var,
        })
    }

    pub fn params(&self) -> &SvParams {
        &self.params
    }
}

impl StateSpaceModel for StochasticVolatility {
    fn state_dim(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let z: f64 = StandardNormal.sample(rng);
        DVector::from_element(1, self.initial_var.sqrt() * z)
    }

    fn log_initial_density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(log_normal_pdf(x[0], 0.0, self.initial_var))
    }

    fn propagate_into(&self, x: &DVector<f64>, out: &mut DVector<f64>, rng: &mut dyn RngCore) {
        let z: f64 = StandardNormal.sample(rng);
        out[0] = self.params.phi * x[0] + self.params.sigma * z;
    }

    fn log_obs_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
        sv_log_obs(y[0], x[0], &self.params)
    }

    fn sample_obs(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let z: f64 = StandardNormal.sample(rng);
        DVector::from_element(1, self.params.beta * (0.5 * x[0]).exp() * z)
    }

    fn has_transition_density(&self) -> bool {
        true
    }

    fn log_trans_density(&self, x_next: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        Ok(log_normal_pdf(
            x_next[0],
            self.params.phi * x[0],
            self.params.sigma * self.params.sigma,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::LN_2PI;
    use approx::assert_relative_eq;

    fn params() -> SvParams {
        SvParams {
            phi: 0.9,
            sigma: 0.3,
            beta: 1.0,
        }
    }

    #[test]
    fn propagate_examples() {
        let p = params();
        assert_eq!(sv_propagate(0.0, &p, 0.0).unwrap(), 0.0);
        assert_relative_eq!(sv_propagate(1.0, &p, 0.0).unwrap(), 0.9, epsilon = 1e-15);
        // 0.9 * 1 + 0.3 * 2 = 1.5
        assert_relative_eq!(sv_propagate(1.0, &p, 2.0).unwrap(), 1.5, epsilon = 1e-15);
        assert!(sv_propagate(f64::NAN, &p, 0.0).is_err());
        assert!(sv_propagate(0.0, &p, f64::INFINITY).is_err());
    }

    #[test]
    fn log_obs_examples() {
        let p = params();
        // Standard normal at 0.
        assert_relative_eq!(sv_log_obs(0.0, 0.0, &p), -0.5 * LN_2PI, epsilon = 1e-14);
        // Variance e^2 at the mode: -ln(2pi)/2 - 1.
        assert_relative_eq!(sv_log_obs(0.0, 2.0, &p), -0.5 * LN_2PI - 1.0, epsilon = 1e-14);
        // Standard normal at 1.
        assert_relative_eq!(sv_log_obs(1.0, 0.0, &p), -0.5 * LN_2PI - 0.5, epsilon = 1e-14);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(StochasticVolatility::new(0.9, 0.0, 0.6).is_err());
        assert!(StochasticVolatility::new(0.9, -0.1, 0.6).is_err());
        assert!(StochasticVolatility::new(0.9, 0.3, 0.0).is_err());
    }

    #[test]
    fn transition_density_integrates_to_one() {
        // Trapezoid over an 8-sigma window around the transition mean.
        let model = StochasticVolatility::new(0.9, 0.3, 0.6).unwrap();
        let x = DVector::from_element(1, 0.7);
        let mean = 0.9 * 0.7;
        let sd = 0.3;
        let n = 20_000;
        let (lo, hi) = (mean - 8.0 * sd, mean + 8.0 * sd);
        let h = (hi - lo) / n as f64;
        let mut integral = 0.0;
        for k in 0..=n {
            let xp = DVector::from_element(1, lo + k as f64 * h);
            let v = model.log_trans_density(&xp, &x).unwrap().exp();
            let wt = if k == 0 || k == n { 0.5 } else { 1.0 };
            integral += wt * v * h;
        }
        assert!((integral - 1.0).abs() < 1e-6, "integral {integral}");
    }
}
