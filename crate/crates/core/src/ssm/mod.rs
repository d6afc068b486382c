//! State-space models: a latent Markov state observed through conditionally
//! independent noisy measurements.
//!
//! A model supplies an initial law, a transition sampler, and an observation
//! log-density. Transition *densities* are optional: deterministic dynamics
//! (Lorenz 96) have none, and algorithms that need them (backward smoothing,
//! ancestor sampling) fail with a capability error instead of approximating.

mod linear_gaussian;
mod lorenz96;
mod stochastic_volatility;

pub use linear_gaussian::{lg_propagate, LinearGaussian, LinearGaussianParams};
pub use lorenz96::{lorenz96_drift, rk4_step, Lorenz96, Lorenz96Params};
pub use stochastic_volatility::{sv_log_obs, sv_propagate, StochasticVolatility, SvParams};

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};

/// The state-space model interface used by every filter and smoother.
///
/// All sampling methods are pure functions of `(state, parameters, rng)`:
/// identical inputs give bit-identical outputs.
pub trait StateSpaceModel: Send + Sync {
    fn state_dim(&self) -> usize;

    fn obs_dim(&self) -> usize;

    /// Draws from the initial law `pi_0`.
    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64>;

    /// Log-density of `pi_0`, when available in closed form.
    fn log_initial_density(&self, x: &DVector<f64>) -> Result<f64>;

    /// Draws from the transition `P(. | x)`, writing into `out`.
    fn propagate_into(&self, x: &DVector<f64>, out: &mut DVector<f64>, rng: &mut dyn RngCore);

    fn propagate(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let mut out = DVector::zeros(self.state_dim());
        self.propagate_into(x, &mut out, rng);
        out
    }

    /// Observation log-density `log g(y | x)`.
    fn log_obs_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64;

    /// Draws an observation `Y | x`.
    fn sample_obs(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64>;

    /// Whether `log_trans_density` is available in closed form.
    fn has_transition_density(&self) -> bool {
        false
    }

    /// Log transition density `log p(x_next | x)`.
    fn log_trans_density(&self, _x_next: &DVector<f64>, _x: &DVector<f64>) -> Result<f64> {
        Err(Error::Capability(
            "model does not provide a transition density".into(),
        ))
    }

    /// Linear-Gaussian observation operator `(H, R)` when the model has one;
    /// required by the ensemble Kalman filter.
    fn linear_observation(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }
}

/// A forward draw from the model: ground truth for twin experiments.
#[derive(Debug, Clone)]
pub struct SimulatedTruth {
    /// Initial state `x_0`.
    pub initial: DVector<f64>,
    /// States `x_1 .. x_T`.
    pub states: Vec<DVector<f64>>,
    /// Observations `y_1 .. y_T`.
    pub observations: Vec<DVector<f64>>,
}

/// Simulates `(x_{0:T}, y_{1:T})` from the model's joint law.
pub fn simulate(
    model: &dyn StateSpaceModel,
    t_steps: usize,
    rng: &RngStream,
) -> SimulatedTruth {
    let initial = model.sample_initial(&mut rng.stream(0, 0, Purpose::Init));
    let mut states = Vec::with_capacity(t_steps);
    let mut observations = Vec::with_capacity(t_steps);
    let mut x = initial.clone();
    for t in 1..=t_steps {
        x = model.propagate(&x, &mut rng.stream(t as u64, 0, Purpose::Propagate));
        observations.push(model.sample_obs(&x, &mut rng.stream(t as u64, 0, Purpose::ObsNoise)));
        states.push(x.clone());
    }
    SimulatedTruth {
        initial,
        states,
        observations,
    }
}

pub(crate) fn check_finite(x: &DVector<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} contains non-finite entries")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn simulate_is_reproducible() {
        let model = StochasticVolatility::new(0.9, 0.3, 0.6).unwrap();
        let rng = RngStream::new(5);
        let a = simulate(&model, 20, &rng);
        let b = simulate(&model, 20, &rng);
        for (x, y) in a.states.iter().zip(&b.states) {
            assert_eq!(x, y);
        }
        for (x, y) in a.observations.iter().zip(&b.observations) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn sv_simulation_matches_stationary_variance() {
        // AR(1) stationary variance sigma^2 / (1 - phi^2).
        let (phi, sigma) = (0.9f64, 0.3f64);
        let model = StochasticVolatility::new(phi, sigma, 0.6).unwrap();
        let rng = RngStream::new(123);
        let t = 100_000;
        let truth = simulate(&model, t, &rng);
        let xs: Vec<f64> = truth.states.iter().map(|x| x[0]).collect();
        let mean = xs.iter().sum::<f64>() / t as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
        let target = sigma * sigma / (1.0 - phi * phi);
        // SE of the sample variance of an AR(1): var * sqrt(2/T_eff) with
        // T_eff = T (1-phi^2)/(1+phi^2) accounting for autocorrelation.
        let t_eff = t as f64 * (1.0 - phi * phi) / (1.0 + phi * phi);
        let se = target * (2.0 / t_eff).sqrt();
        assert!(
            (var - target).abs() < 4.0 * se,
            "sample variance {var} vs stationary {target} (se {se})"
        );
        assert_relative_eq!(mean, 0.0, epsilon = 6.0 * (target / t_eff).sqrt());
    }
}
