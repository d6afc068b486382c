//! Lorenz 96: a cyclic lattice of K variables with chaotic dynamics,
//! `dX_k/dt = (X_{k+1} - X_{k-2}) X_{k-1} - X_k + F`, observed every m-th
//! component with additive Gaussian noise.
//!
//! The dynamics are deterministic: the model exposes no transition density,
//! and inter-observation propagation integrates the ODE with classical RK4.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gauss::{log_normal_pdf, standard_normal_vector, LN_2PI};

use super::StateSpaceModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz96Params {
    /// Lattice size K (>= 4 for the stencil to make sense).
    pub dim: usize,
    /// Forcing term F.
    pub forcing: f64,
    /// Time between observations.
    pub delta: f64,
    /// RK4 substeps per observation interval (internal step h = delta / substeps).
    pub substeps: usize,
    /// Observation noise standard deviation.
    pub obs_sigma: f64,
    /// Every `obs_stride`-th component is observed.
    pub obs_stride: usize,
}

impl Default for Lorenz96Params {
    fn default() -> Self {
        Lorenz96Params {
            dim: 40,
            forcing: 8.0,
            delta: 0.05,
            substeps: 10,
            obs_sigma: 1.0,
            obs_stride: 2,
        }
    }
}

/// Drift of the cyclic Lorenz 96 system.
pub fn lorenz96_drift(x: &DVector<f64>, forcing: f64) -> Result<DVector<f64>> {
    let k = x.len();
    if k < 4 {
        return Err(Error::Domain(format!(
            "Lorenz 96 needs at least 4 components, got {k}"
        )));
    }
    let mut drift = DVector::zeros(k);
    for i in 0..k {
        let ip1 = (i + 1) % k;
        let im1 = (i + k - 1) % k;
        let im2 = (i + k - 2) % k;
        drift[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + forcing;
    }
    Ok(drift)
}

/// One classical 4th-order Runge-Kutta step of the Lorenz 96 ODE.
pub fn rk4_step(x: &DVector<f64>, h: f64, forcing: f64) -> Result<DVector<f64>> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step size must be > 0, got {h}")));
    }
    let k1 = lorenz96_drift(x, forcing)?;
    let k2 = lorenz96_drift(&(x + &k1 * (h / 2.0)), forcing)?;
    let k3 = lorenz96_drift(&(x + &k2 * (h / 2.0)), forcing)?;
    let k4 = lorenz96_drift(&(x + &k3 * h), forcing)?;
    let out = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::Numerical(
            "non-finite state in RK4 integration stage".into(),
        ))
    }
}

#[derive(Debug, Clone)]
pub struct Lorenz96 {
    params: Lorenz96Params,
    observed: Vec<usize>,
}

impl Lorenz96 {
    pub fn new(params: Lorenz96Params) -> Result<Self> {
        if params.dim < 4 {
            return Err(Error::Domain(format!(
                "Lorenz 96 needs at least 4 components, got {}",
                params.dim
            )));
        }
        if !(params.delta > 0.0) || params.substeps == 0 {
            return Err(Error::Domain(
                "delta must be > 0 and substeps >= 1".into(),
            ));
        }
        if !(params.obs_sigma > 0.0) {
            return Err(Error::Domain(format!(
                "obs_sigma must be > 0, got {}",
                params.obs_sigma
            )));
        }
        if params.obs_stride == 0 || params.obs_stride > params.dim {
            return Err(Error::Domain(format!(
                "obs_stride must be in 1..={}, got {}",
                params.dim, params.obs_stride
            )));
        }
        let observed: Vec<usize> = (0..params.dim).step_by(params.obs_stride).collect();
        Ok(Lorenz96 { params, observed })
    }

    pub fn params(&self) -> &Lorenz96Params {
        &self.params
    }

    /// Indices of the observed components.
    pub fn observed_components(&self) -> &[usize] {
        &self.observed
    }

    /// Integrates the ODE over one observation interval.
    pub fn step_deterministic(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let h = self.params.delta / self.params.substeps as f64;
        let mut state = x.clone();
        for _ in 0..self.params.substeps {
            state = rk4_step(&state, h, self.params.forcing)?;
        }
        Ok(state)
    }
}

impl StateSpaceModel for Lorenz96 {
    fn state_dim(&self) -> usize {
        self.params.dim
    }

    fn obs_dim(&self) -> usize {
        self.observed.len()
    }

    /// `N(F * 1, I)`: a unit-covariance ball around the forced equilibrium.
    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        DVector::from_element(self.params.dim, self.params.forcing)
            + standard_normal_vector(self.params.dim, rng)
    }

    fn log_initial_density(&self, x: &DVector<f64>) -> Result<f64> {
        let d = self.params.dim as f64;
        let quad: f64 = x
            .iter()
            .map(|v| (v - self.params.forcing).powi(2))
            .sum();
        Ok(-0.5 * (d * LN_2PI + quad))
    }

    fn propagate_into(&self, x: &DVector<f64>, out: &mut DVector<f64>, _rng: &mut dyn RngCore) {
        // Deterministic dynamics; a blow-up here is surfaced by the caller's
        // divergence check on the ensemble.
        match self.step_deterministic(x) {
            Ok(state) => out.copy_from(&state),
            Err(_) => out.fill(f64::NAN),
        }
    }

    fn log_obs_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let var = self.params.obs_sigma * self.params.obs_sigma;
        self.observed
            .iter()
            .enumerate()
            .map(|(j, &k)| log_normal_pdf(y[j], x[k], var))
            .sum()
    }

    fn sample_obs(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        DVector::from_fn(self.observed.len(), |j, _| {
            let z: f64 = StandardNormal.sample(rng);
            x[self.observed[j]] + self.params.obs_sigma * z
        })
    }

    fn linear_observation(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let q = self.observed.len();
        let mut h = DMatrix::zeros(q, self.params.dim);
        for (j, &k) in self.observed.iter().enumerate() {
            h[(j, k)] = 1.0;
        }
        let r = DMatrix::identity(q, q) * self.params.obs_sigma * self.params.obs_sigma;
        Some((h, r))
    }
}
