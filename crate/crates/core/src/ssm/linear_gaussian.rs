//! Linear-Gaussian state-space model: `x_t = Phi x_{t-1} + w_t`,
//! `y_t = H x_t + v_t` with Gaussian noise and a Gaussian initial law.
//! Exact inference for this model lives in [`crate::oracle`]; here it serves
//! as the validation target for every Monte Carlo algorithm.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::Distribution;

use crate::error::{Error, Result};
use crate::gauss::{PsdSqrt, Spd};

use super::{check_finite, StateSpaceModel};

/// Parameters of the linear-Gaussian model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianParams {
    /// Transition matrix (d x d).
    pub phi: DMatrix<f64>,
    /// State-noise covariance (d x d, PSD; zero allowed).
    pub q: DMatrix<f64>,
    /// Observation matrix (q x d).
    pub h: DMatrix<f64>,
    /// Observation-noise covariance (q x q, positive definite).
    pub r: DMatrix<f64>,
    /// Initial mean.
    pub m0: DVector<f64>,
    /// Initial covariance (d x d, PSD).
    pub p0: DMatrix<f64>,
}

impl LinearGaussianParams {
    /// Scalar model helper.
    pub fn scalar(phi: f64, q: f64, h: f64, r: f64, m0: f64, p0: f64) -> Self {
        LinearGaussianParams {
            phi: DMatrix::from_element(1, 1, phi),
            q: DMatrix::from_element(1, 1, q),
            h: DMatrix::from_element(1, 1, h),
            r: DMatrix::from_element(1, 1, r),
            m0: DVector::from_element(1, m0),
            p0: DMatrix::from_element(1, 1, p0),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.phi.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.phi.nrows();
        let q = self.h.nrows();
        if self.phi.ncols() != d {
            return Err(Error::Dimension("phi must be square".into()));
        }
        if self.q.nrows() != d || self.q.ncols() != d {
            return Err(Error::Dimension("q must be d x d".into()));
        }
        if self.h.ncols() != d {
            return Err(Error::Dimension("h must be q x d".into()));
        }
        if self.r.nrows() != q || self.r.ncols() != q {
            return Err(Error::Dimension("r must be q x q".into()));
        }
        if self.m0.len() != d {
            return Err(Error::Dimension("m0 must have length d".into()));
        }
        if self.p0.nrows() != d || self.p0.ncols() != d {
            return Err(Error::Dimension("p0 must be d x d".into()));
        }
        Ok(())
    }
}

/// Transition `Phi x + w` for a given noise draw `w`.
pub fn lg_propagate(x: &DVector<f64>, phi: &DMatrix<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    if phi.ncols() != x.len() || w.len() != phi.nrows() {
        return Err(Error::Dimension(format!(
            "lg_propagate: phi is {}x{}, x has length {}, w has length {}",
            phi.nrows(),
            phi.ncols(),
            x.len(),
            w.len()
        )));
    }
    Ok(phi * x + w)
}

/// Precomputed coefficients for the fully scalar (d = q = 1) model, keeping
/// the per-particle hot path free of matrix allocations.
#[derive(Debug, Clone, Copy)]
struct ScalarFast {
    phi: f64,
    q_sd: f64,
    q_var: f64,
    h: f64,
    r_var: f64,
}

#[derive(Debug, Clone)]
pub struct LinearGaussian {
    params: LinearGaussianParams,
    q_sqrt: PsdSqrt,
    p0_sqrt: PsdSqrt,
    r_spd: Spd,
    /// Present when Q is positive definite, enabling transition densities.
    q_spd: Option<Spd>,
    /// Present when P0 is positive definite.
    p0_spd: Option<Spd>,
    scalar: Option<ScalarFast>,
}

impl LinearGaussian {
    pub fn new(params: LinearGaussianParams) -> Result<Self> {
        params.validate()?;
        check_finite(&params.m0, "m0")?;
        let q_sqrt = PsdSqrt::new(&params.q)?;
        let p0_sqrt = PsdSqrt::new(&params.p0)?;
        let r_spd = Spd::new(&params.r)?;
        let q_spd = Spd::new(&params.q).ok();
        let p0_spd = Spd::new(&params.p0).ok();
        let scalar = (params.state_dim() == 1 && params.obs_dim() == 1).then(|| ScalarFast {
            phi: params.phi[(0, 0)],
            q_sd: params.q[(0, 0)].max(0.0).sqrt(),
            q_var: params.q[(0, 0)],
            h: params.h[(0, 0)],
            r_var: params.r[(0, 0)],
        });
        Ok(LinearGaussian {
            params,
            q_sqrt,
            p0_sqrt,
            r_spd,
            q_spd,
            p0_spd,
            scalar,
        })
    }

    pub fn params(&self) -> &LinearGaussianParams {
        &self.params
    }
}

impl StateSpaceModel for LinearGaussian {
    fn state_dim(&self) -> usize {
        self.params.state_dim()
    }

    fn obs_dim(&self) -> usize {
        self.params.obs_dim()
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        &self.params.m0 + self.p0_sqrt.sample(rng)
    }

    fn log_initial_density(&self, x: &DVector<f64>) -> Result<f64> {
        match &self.p0_spd {
            Some(spd) => Ok(spd.log_density(x, &self.params.m0)),
            None => Err(Error::Capability(
                "initial covariance is singular; no initial density".into(),
            )),
        }
    }

    fn propagate_into(&self, x: &DVector<f64>, out: &mut DVector<f64>, rng: &mut dyn RngCore) {
        if let Some(s) = &self.scalar {
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            out[0] = s.phi * x[0] + s.q_sd * z;
            return;
        }
        let w = self.q_sqrt.sample(rng);
        out.copy_from(&(&self.params.phi * x + w));
    }

    fn log_obs_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
        if let Some(s) = &self.scalar {
            return crate::gauss::log_normal_pdf(y[0], s.h * x[0], s.r_var);
        }
        self.r_spd.log_density(y, &(&self.params.h * x))
    }

    fn sample_obs(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        self.r_spd.sample(&(&self.params.h * x), rng)
    }

    fn has_transition_density(&self) -> bool {
        self.q_spd.is_some()
    }

    fn log_trans_density(&self, x_next: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        if self.q_spd.is_some() {
            if let Some(s) = &self.scalar {
                return Ok(crate::gauss::log_normal_pdf(x_next[0], s.phi * x[0], s.q_var));
            }
        }
        match &self.q_spd {
            Some(spd) => Ok(spd.log_density(x_next, &(&self.params.phi * x))),
            None => Err(Error::Capability(
                "state-noise covariance is singular; no transition density".into(),
            )),
        }
    }

    fn linear_observation(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        Some((self.params.h.clone(), self.params.r.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, RngStream};
    use approx::assert_relative_eq;

    #[test]
    fn lg_propagate_examples() {
        let x = DVector::from_row_slice(&[1.0, -2.0]);
        let zero = DVector::zeros(2);
        // Identity dynamics, zero noise.
        let id = DMatrix::identity(2, 2);
        assert_eq!(lg_propagate(&x, &id, &zero).unwrap(), x);
        // Zero dynamics.
        let z = DMatrix::zeros(2, 2);
        assert_eq!(lg_propagate(&x, &z, &zero).unwrap(), zero);
        // Scalar: 0.5 * 2 + 0.1 = 1.1.
        let out = lg_propagate(
            &DVector::from_element(1, 2.0),
            &DMatrix::from_element(1, 1, 0.5),
            &DVector::from_element(1, 0.1),
        )
        .unwrap();
        assert_relative_eq!(out[0], 1.1, epsilon = 1e-15);
        // Dimension mismatch.
        assert!(lg_propagate(&x, &DMatrix::zeros(3, 3), &zero).is_err());
    }

    #[test]
    fn zero_q_disables_transition_density() {
        let params = LinearGaussianParams::scalar(1.0, 0.0, 1.0, 1.0, 0.0, 1.0);
        let model = LinearGaussian::new(params).unwrap();
        assert!(!model.has_transition_density());
        assert!(model
            .log_trans_density(&DVector::zeros(1), &DVector::zeros(1))
            .is_err());
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let params = LinearGaussianParams::scalar(0.8, 0.5, 1.0, 0.2, 0.0, 1.0);
        let model = LinearGaussian::new(params).unwrap();
        let s = RngStream::new(42);
        let x = DVector::from_element(1, 0.3);
        let a = model.propagate(&x, &mut s.stream(1, 4, Purpose::Propagate));
        let b = model.propagate(&x, &mut s.stream(1, 4, Purpose::Propagate));
        assert_eq!(a, b);
    }

    #[test]
    fn transition_density_matches_scalar_formula() {
        let params = LinearGaussianParams::scalar(0.8, 0.5, 1.0, 0.2, 0.0, 1.0);
        let model = LinearGaussian::new(params).unwrap();
        let lp = model
            .log_trans_density(&DVector::from_element(1, 1.0), &DVector::from_element(1, 0.5))
            .unwrap();
        assert_relative_eq!(
            lp,
            crate::gauss::log_normal_pdf(1.0, 0.4, 0.5),
            epsilon = 1e-14
        );
    }
}
