//! Ensemble Kalman filters: the stochastic (perturbed-observation) update
//! and the deterministic square-root update in post-multiplication form,
//! with multiplicative inflation and Gaspari-Cohn covariance tapering as
//! stabilizers, plus the full assimilation loop for twin experiments.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gauss::{standard_normal_vector, symmetrize, Spd};
use crate::map_indexed;
use crate::rng::{Purpose, RngStream};
use crate::ssm::StateSpaceModel;

/// An unweighted sample approximation of the state distribution.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<DVector<f64>>,
    pub t: usize,
}

impl Ensemble {
    pub fn init(model: &dyn StateSpaceModel, n: usize, rng: &RngStream) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain("ensemble needs at least 2 members".into()));
        }
        let members =
            map_indexed(n, |i| model.sample_initial(&mut rng.stream(0, i as u64, Purpose::Init)));
        Ok(Ensemble { members, t: 0 })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.members[0].len()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.state_dim());
        for x in &self.members {
            m += x;
        }
        m / self.len() as f64
    }

    /// Per-component standard deviation with divisor N-1.
    pub fn spread(&self) -> DVector<f64> {
        let mean = self.mean();
        let mut acc = DVector::zeros(self.state_dim());
        for x in &self.members {
            let d = x - &mean;
            acc += d.component_mul(&d);
        }
        (acc / (self.len() - 1) as f64).map(f64::sqrt)
    }

    /// Deviation matrix with columns `x_i - mean`, scaled by `scale`.
    fn deviations(&self, mean: &DVector<f64>, scale: f64) -> DMatrix<f64> {
        let d = self.state_dim();
        let n = self.len();
        let mut dev = DMatrix::zeros(d, n);
        for (i, x) in self.members.iter().enumerate() {
            dev.set_column(i, &((x - mean) * scale));
        }
        dev
    }
}

/// Linear-Gaussian observation operator `y = H x + noise`, noise `~ N(0, R)`.
#[derive(Debug, Clone)]
pub struct ObservationOperator {
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    r_spd: Spd,
}

impl ObservationOperator {
    pub fn new(h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if r.nrows() != h.nrows() || r.ncols() != h.nrows() {
            return Err(Error::Dimension(format!(
                "R must be {q} x {q} to match H with {q} rows",
                q = h.nrows()
            )));
        }
        let r_spd = Spd::new(&r)?;
        Ok(ObservationOperator { h, r, r_spd })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }
}

/// Sample mean and (inflated, optionally tapered) covariance of an ensemble.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub inflation: f64,
    pub taper: Option<DMatrix<f64>>,
}

/// Sample mean and covariance (divisor N-1), with multiplicative inflation
/// of the deviations by `sqrt(inflation)` (equivalently `cov <- inflation *
/// cov`) and an optional elementwise (Schur) taper applied afterwards.
pub fn ensemble_mean_cov(
    e: &Ensemble,
    inflation: f64,
    taper: Option<&DMatrix<f64>>,
) -> Result<CovarianceEstimate> {
    if e.len() < 2 {
        return Err(Error::Domain("ensemble needs at least 2 members".into()));
    }
    if !(inflation >= 1.0) {
        return Err(Error::Domain(format!(
            "inflation factor must be >= 1, got {inflation}"
        )));
    }
    let mean = e.mean();
    let dev = e.deviations(&mean, 1.0);
    let mut cov = symmetrize(&(&dev * dev.transpose() / (e.len() - 1) as f64)) * inflation;
    if let Some(c) = taper {
        if c.nrows() != cov.nrows() || c.ncols() != cov.ncols() {
            return Err(Error::Dimension("taper matrix must be d x d".into()));
        }
        validate_correlation(c)?;
        cov.component_mul_assign(c);
    }
    Ok(CovarianceEstimate {
        mean,
        cov,
        inflation,
        taper: taper.cloned(),
    })
}

/// Checks unit diagonal and positive semi-definiteness of a taper matrix.
pub fn validate_correlation(c: &DMatrix<f64>) -> Result<()> {
    for i in 0..c.nrows() {
        if (c[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "taper diagonal entry {i} is {}, expected 1",
                c[(i, i)]
            )));
        }
    }
    if (c - c.transpose()).amax() > 1e-12 {
        return Err(Error::Domain("taper matrix is not symmetric".into()));
    }
    let eig = nalgebra::SymmetricEigen::new(c.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-10 {
        return Err(Error::Numerical(format!(
            "taper matrix is not PSD (min eigenvalue {min:.3e})"
        )));
    }
    Ok(())
}

/// Kalman gain `K = P H^T (H P H^T + R)^{-1}`, via a linear solve rather
/// than an explicit inverse.
pub fn kalman_gain(ce: &CovarianceEstimate, obs: &ObservationOperator) -> Result<DMatrix<f64>> {
    if obs.state_dim() != ce.cov.nrows() {
        return Err(Error::Dimension(format!(
            "observation operator expects state dimension {}, covariance is {}",
            obs.state_dim(),
            ce.cov.nrows()
        )));
    }
    let pht = &ce.cov * obs.h.transpose();
    let innov_cov = symmetrize(&(&obs.h * &pht + &obs.r));
    let spd = Spd::new(&innov_cov)?;
    Ok(spd.solve_mat(&pht.transpose()).transpose())
}

/// Stochastic EnKF update: each member is pulled toward the observation with
/// an independently perturbed innovation, `x_i + K (y - H x_i + eps_i)`,
/// `eps_i ~ N(0, R)` drawn from the `(t, i)` observation-noise streams.
pub fn stochastic_enkf_update(
    e: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationOperator,
    ce: &CovarianceEstimate,
    rng: &RngStream,
) -> Result<Ensemble> {
    let gain = kalman_gain(ce, obs)?;
    Ok(stochastic_update_with_gain(e, y, obs, &gain, rng))
}

fn stochastic_update_with_gain(
    e: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationOperator,
    gain: &DMatrix<f64>,
    rng: &RngStream,
) -> Ensemble {
    let t = e.t;
    let members = map_indexed(e.len(), |i| {
        let x = &e.members[i];
        let mut stream = rng.stream(t as u64, i as u64, Purpose::ObsNoise);
        let eps = obs.r_spd.lower() * standard_normal_vector(obs.obs_dim(), &mut stream);
        x + gain * (y - &obs.h * x + eps)
    });
    Ensemble { members, t }
}

/// Deterministic square-root update in post-multiplication form.
///
/// The mean moves by the Kalman update; the (inflated) deviations are
/// post-multiplied by the symmetric PSD square root `W` of
/// `I - S^T (S S^T + (N-1) R)^{-1} S` with `S = H * deviations`, so the
/// updated sample covariance equals `(I - K H) P` exactly. Tapered
/// covariances are not representable in this form and are rejected.
pub fn square_root_enkf_update(
    e: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationOperator,
    ce: &CovarianceEstimate,
) -> Result<Ensemble> {
    if ce.taper.is_some() {
        return Err(Error::Capability(
            "square-root update does not support covariance tapering; \
             use the stochastic variant"
                .into(),
        ));
    }
    let dev = e.deviations(&ce.mean, ce.inflation.sqrt());
    square_root_update_from_parts(&ce.mean, &dev, y, obs, e.t)
}

fn square_root_update_from_parts(
    mean: &DVector<f64>,
    dev: &DMatrix<f64>,
    y: &DVector<f64>,
    obs: &ObservationOperator,
    t: usize,
) -> Result<Ensemble> {
    let n = dev.ncols();
    let s = &obs.h * dev;
    let innov_cov = symmetrize(&(&s * s.transpose() + &obs.r * (n - 1) as f64));
    let innov_spd = Spd::new(&innov_cov)?;
    // Gain without materializing P: K = dev * S^T * (S S^T + (N-1) R)^{-1}.
    let gain = dev * innov_spd.solve_mat(&s).transpose();
    let new_mean = mean + &gain * (y - &obs.h * mean);

    // Constraint system M = I - S^T (S S^T + (N-1) R)^{-1} S, an N x N
    // symmetric PSD matrix; W is its symmetric square root.
    let m = symmetrize(&(DMatrix::identity(n, n) - s.transpose() * innov_spd.solve_mat(&s)));
    let eig = nalgebra::SymmetricEigen::new(m);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-8 {
        return Err(Error::Numerical(format!(
            "square-root constraint matrix not PSD (min eigenvalue {min:.3e})"
        )));
    }
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let w = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
    let new_dev = dev * w;

    let members = (0..n)
        .map(|i| &new_mean + new_dev.column(i))
        .collect::<Vec<_>>();
    Ok(Ensemble { members, t })
}

/// Which update the assimilation loop applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnkfVariant {
    Stochastic,
    SquareRoot,
}

/// Gaspari-Cohn taper specification on lattice distance.
#[derive(Debug, Clone, Copy)]
pub struct TaperSpec {
    /// Length scale c; correlations vanish beyond distance 2c.
    pub radius: f64,
    /// Wrap distances on the cyclic lattice.
    pub cyclic: bool,
}

#[derive(Debug, Clone)]
pub struct EnkfOptions {
    pub variant: EnkfVariant,
    pub inflation: f64,
    pub taper: Option<TaperSpec>,
    /// Any member component beyond this magnitude aborts with a divergence
    /// error.
    pub divergence_threshold: f64,
}

impl Default for EnkfOptions {
    fn default() -> Self {
        EnkfOptions {
            variant: EnkfVariant::Stochastic,
            inflation: 1.0,
            taper: None,
            divergence_threshold: 1e6,
        }
    }
}

/// The fifth-order piecewise-rational Gaspari-Cohn correlation function,
/// compactly supported on `[0, 2]` in the scaled distance `z = dist / c`.
pub fn gaspari_cohn(z: f64) -> f64 {
    let z = z.abs();
    if z >= 2.0 {
        0.0
    } else if z <= 1.0 {
        1.0 + z * z * (-5.0 / 3.0 + z * (5.0 / 8.0 + z * (0.5 - 0.25 * z)))
    } else {
        4.0 - 5.0 * z + z * z * (5.0 / 3.0 + z * (5.0 / 8.0 + z * (-0.5 + z / 12.0)))
            - 2.0 / (3.0 * z)
    }
}

/// Correlation matrix `C_ij = gc(dist(i, j) / radius)` on a (optionally
/// cyclic) 1-D lattice of the given dimension.
pub fn gaspari_cohn_taper(dim: usize, spec: &TaperSpec) -> Result<DMatrix<f64>> {
    if !(spec.radius > 0.0) {
        return Err(Error::Domain(format!(
            "taper radius must be > 0, got {}",
            spec.radius
        )));
    }
    let c = DMatrix::from_fn(dim, dim, |i, j| {
        let raw = (i as f64 - j as f64).abs();
        let dist = if spec.cyclic {
            raw.min(dim as f64 - raw)
        } else {
            raw
        };
        gaspari_cohn(dist / spec.radius)
    });
    validate_correlation(&c)?;
    Ok(c)
}

/// Per-step assimilation summary.
#[derive(Debug, Clone)]
pub struct EnkfStepSummary {
    pub t: usize,
    /// Analysis (post-update) ensemble mean.
    pub mean: DVector<f64>,
    /// Analysis ensemble spread per component.
    pub spread: DVector<f64>,
    /// Root-mean-square error of the analysis mean against the twin truth.
    pub rmse: Option<f64>,
    /// Frobenius norm of the Kalman gain used at this step.
    pub gain_norm: f64,
}

#[derive(Debug, Clone)]
pub struct EnkfRun {
    pub steps: Vec<EnkfStepSummary>,
    pub ensemble: Ensemble,
}

/// Full assimilation loop: alternate ensemble propagation through the model
/// dynamics with the chosen update. In twin mode, `truth` supplies the
/// states `x_1..x_T` for RMSE scoring.
pub fn run_enkf(
    model: &dyn StateSpaceModel,
    observations: &[DVector<f64>],
    n_members: usize,
    options: &EnkfOptions,
    truth: Option<&[DVector<f64>]>,
    rng: &RngStream,
) -> Result<EnkfRun> {
    let (h, r) = model.linear_observation().ok_or_else(|| {
        Error::Capability(
            "ensemble Kalman filtering requires a linear-Gaussian observation operator".into(),
        )
    })?;
    let obs_op = ObservationOperator::new(h, r)?;
    if options.variant == EnkfVariant::SquareRoot && options.taper.is_some() {
        return Err(Error::Capability(
            "square-root update does not support covariance tapering; \
             use the stochastic variant"
                .into(),
        ));
    }
    let taper = match &options.taper {
        Some(spec) => Some(gaspari_cohn_taper(model.state_dim(), spec)?),
        None => None,
    };
    if let Some(ts) = truth {
        if ts.len() < observations.len() {
            return Err(Error::Dimension(format!(
                "truth has {} states for {} observations",
                ts.len(),
                observations.len()
            )));
        }
    }

    let mut ensemble = Ensemble::init(model, n_members, rng)?;
    let mut steps = Vec::with_capacity(observations.len());
    for (idx, y) in observations.iter().enumerate() {
        let t = idx + 1;
        // Forecast.
        let members = map_indexed(ensemble.len(), |i| {
            model.propagate(
                &ensemble.members[i],
                &mut rng.stream(t as u64, i as u64, Purpose::Propagate),
            )
        });
        ensemble = Ensemble { members, t };
        check_divergence(&ensemble, options.divergence_threshold, t)?;

        // Analysis.
        let (updated, gain_norm) = if let Some(c) = &taper {
            let ce = ensemble_mean_cov(&ensemble, options.inflation, Some(c))?;
            let gain = kalman_gain(&ce, &obs_op).map_err(|e| e.at_step(t))?;
            let up = match options.variant {
                EnkfVariant::Stochastic => {
                    stochastic_update_with_gain(&ensemble, y, &obs_op, &gain, rng)
                }
                EnkfVariant::SquareRoot => unreachable!("rejected above"),
            };
            (up, gain.norm())
        } else {
            // Deviation-product route; the prediction covariance is never
            // materialized.
            let mean = ensemble.mean();
            let dev = ensemble.deviations(&mean, options.inflation.sqrt());
            let s = &obs_op.h * &dev;
            let innov_cov =
                symmetrize(&(&s * s.transpose() + &obs_op.r * (ensemble.len() - 1) as f64));
            let innov_spd = Spd::new(&innov_cov).map_err(|e| e.at_step(t))?;
            let gain = &dev * innov_spd.solve_mat(&s).transpose();
            let up = match options.variant {
                EnkfVariant::Stochastic => {
                    stochastic_update_with_gain(&ensemble, y, &obs_op, &gain, rng)
                }
                EnkfVariant::SquareRoot => {
                    square_root_update_from_parts(&mean, &dev, y, &obs_op, t)
                        .map_err(|e| e.at_step(t))?
                }
            };
            (up, gain.norm())
        };
        ensemble = updated;
        check_divergence(&ensemble, options.divergence_threshold, t)?;

        let mean = ensemble.mean();
        let rmse = truth.map(|ts| {
            let diff = &mean - &ts[idx];
            (diff.norm_squared() / diff.len() as f64).sqrt()
        });
        steps.push(EnkfStepSummary {
            t,
            mean,
            spread: ensemble.spread(),
            rmse,
            gain_norm,
        });
    }
    Ok(EnkfRun { steps, ensemble })
}

fn check_divergence(e: &Ensemble, threshold: f64, step: usize) -> Result<()> {
    for x in &e.members {
        let worst = x.amax();
        if !worst.is_finite() || worst > threshold {
            return Err(Error::Divergence {
                step,
                msg: format!("ensemble member magnitude {worst:.3e} exceeds {threshold:.1e}"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn vec1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn scalar_obs(r: f64) -> ObservationOperator {
        ObservationOperator::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, r))
            .unwrap()
    }

    #[test]
    fn mean_cov_examples() {
        // Identical members: zero covariance.
        let e = Ensemble {
            members: vec![vec1(3.0); 5],
            t: 0,
        };
        let ce = ensemble_mean_cov(&e, 1.0, None).unwrap();
        assert_relative_eq!(ce.cov[(0, 0)], 0.0, epsilon = 1e-14);

        // Two scalar members {0, 2}: mean 1, variance 2 with divisor N-1.
        let e = Ensemble {
            members: vec![vec1(0.0), vec1(2.0)],
            t: 0,
        };
        let ce = ensemble_mean_cov(&e, 1.0, None).unwrap();
        assert_relative_eq!(ce.mean[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(ce.cov[(0, 0)], 2.0, epsilon = 1e-15);

        // All-ones taper leaves the covariance unchanged.
        let ones = DMatrix::from_element(1, 1, 1.0);
        let ce_t = ensemble_mean_cov(&e, 1.0, Some(&ones)).unwrap();
        assert_relative_eq!(ce_t.cov[(0, 0)], 2.0, epsilon = 1e-15);

        // Inflation multiplies the covariance.
        let ce_i = ensemble_mean_cov(&e, 1.5, None).unwrap();
        assert_relative_eq!(ce_i.cov[(0, 0)], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn gain_examples() {
        // Scalar: p = 4, h = 1, r = 1 -> k = 0.8.
        let ce = CovarianceEstimate {
            mean: vec1(0.0),
            cov: DMatrix::from_element(1, 1, 4.0),
            inflation: 1.0,
            taper: None,
        };
        let k = kalman_gain(&ce, &scalar_obs(1.0)).unwrap();
        assert_relative_eq!(k[(0, 0)], 0.8, epsilon = 1e-14);

        // P = R, H = I -> K = I/2.
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let ce = CovarianceEstimate {
            mean: DVector::zeros(2),
            cov: p.clone(),
            inflation: 1.0,
            taper: None,
        };
        let obs = ObservationOperator::new(DMatrix::identity(2, 2), p).unwrap();
        let k = kalman_gain(&ce, &obs).unwrap();
        assert_relative_eq!((k - DMatrix::identity(2, 2) * 0.5).amax(), 0.0, epsilon = 1e-12);

        // Zero prior covariance -> zero gain.
        let ce = CovarianceEstimate {
            mean: vec1(0.0),
            cov: DMatrix::zeros(1, 1),
            inflation: 1.0,
            taper: None,
        };
        let k = kalman_gain(&ce, &scalar_obs(1.0)).unwrap();
        assert_relative_eq!(k[(0, 0)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn stochastic_update_degenerate_gains() {
        let rng = RngStream::new(5);
        let e = Ensemble {
            members: vec![vec1(1.0), vec1(3.0)],
            t: 2,
        };
        // Zero prior covariance: gain 0, ensemble unchanged.
        let ce = CovarianceEstimate {
            mean: vec1(2.0),
            cov: DMatrix::zeros(1, 1),
            inflation: 1.0,
            taper: None,
        };
        let up = stochastic_enkf_update(&e, &vec1(10.0), &scalar_obs(1.0), &ce, &rng).unwrap();
        assert_eq!(up.members, e.members);

        // R -> 0 with H = I: every member maps to the observation.
        let ce = CovarianceEstimate {
            mean: vec1(2.0),
            cov: DMatrix::from_element(1, 1, 4.0),
            inflation: 1.0,
            taper: None,
        };
        let up =
            stochastic_enkf_update(&e, &vec1(10.0), &scalar_obs(1e-16), &ce, &rng).unwrap();
        for m in &up.members {
            assert_relative_eq!(m[0], 10.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn stochastic_update_is_affine_for_fixed_gain() {
        // With H = I and a fixed gain, the map (x, eps) -> x + K(y - x + eps)
        // is affine; check additivity of the homogeneous part.
        let obs = scalar_obs(0.5);
        let gain = DMatrix::from_element(1, 1, 0.6);
        let y = vec1(0.0);
        let update = |x: f64, eps: f64| x + 0.6 * (0.0 - x + eps);
        let (x1, e1) = (1.3, -0.4);
        let (x2, e2) = (-0.7, 0.9);
        let (a, b) = (2.0, -1.5);
        let combined = update(a * x1 + b * x2, a * e1 + b * e2);
        assert_relative_eq!(
            combined,
            a * update(x1, e1) + b * update(x2, e2),
            epsilon = 1e-12
        );
        let _ = (obs, gain, y); // documents the map under test
    }

    #[test]
    fn square_root_scalar_example() {
        // Members {-2, 2, 0}: sample variance 4 (divisor N-1). With r = 1,
        // h = 1: gain 0.8, posterior variance 0.8, deviations scaled by
        // sqrt(0.8 / 4).
        let e = Ensemble {
            members: vec![vec1(-2.0), vec1(2.0), vec1(0.0)],
            t: 0,
        };
        let obs = scalar_obs(1.0);
        let ce = ensemble_mean_cov(&e, 1.0, None).unwrap();
        assert_relative_eq!(ce.cov[(0, 0)], 4.0, epsilon = 1e-14);
        // Zero innovation (y equals the prior mean): mean unchanged.
        let up = square_root_enkf_update(&e, &vec1(0.0), &obs, &ce).unwrap();
        let up_ce = ensemble_mean_cov(&up, 1.0, None).unwrap();
        assert_relative_eq!(up_ce.mean[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(up_ce.cov[(0, 0)], 0.8, epsilon = 1e-12);
        let scale = (0.8f64 / 4.0).sqrt();
        assert_relative_eq!(up.members[0][0], -2.0 * scale, epsilon = 1e-10);
        assert_relative_eq!(up.members[1][0], 2.0 * scale, epsilon = 1e-10);
        assert_relative_eq!(up.members[2][0], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn square_root_is_deterministic_and_matches_constraint() {
        let s = RngStream::new(77);
        let mut rng = s.stream(0, 0, Purpose::Init);
        let d = 5;
        let n = 12;
        let members: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(d, |_, _| rng.random::<f64>() * 4.0 - 2.0))
            .collect();
        let e = Ensemble { members, t: 0 };
        let h = DMatrix::from_fn(3, d, |i, j| if j == 2 * i { 1.0 } else { 0.0 });
        let r = DMatrix::identity(3, 3) * 0.5;
        let obs = ObservationOperator::new(h.clone(), r.clone()).unwrap();
        let ce = ensemble_mean_cov(&e, 1.2, None).unwrap();
        let y = DVector::from_fn(3, |i, _| i as f64 * 0.3);

        let up1 = square_root_enkf_update(&e, &y, &obs, &ce).unwrap();
        let up2 = square_root_enkf_update(&e, &y, &obs, &ce).unwrap();
        for (a, b) in up1.members.iter().zip(&up2.members) {
            assert_eq!(a, b);
        }

        // Empirical covariance of the output equals (I - K H) P.
        let gain = kalman_gain(&ce, &obs).unwrap();
        let target = (DMatrix::identity(d, d) - &gain * &h) * &ce.cov;
        let up_mean = up1.mean();
        let dev = up1.deviations(&up_mean, 1.0);
        let emp = &dev * dev.transpose() / (n - 1) as f64;
        assert!(
            (&emp - &target).amax() < 1e-8,
            "covariance mismatch {:.3e}",
            (&emp - &target).amax()
        );
    }

    #[test]
    fn square_root_rejects_taper() {
        let e = Ensemble {
            members: vec![vec1(-1.0), vec1(1.0)],
            t: 0,
        };
        let ce = CovarianceEstimate {
            mean: vec1(0.0),
            cov: DMatrix::from_element(1, 1, 1.0),
            inflation: 1.0,
            taper: Some(DMatrix::identity(1, 1)),
        };
        let err = square_root_enkf_update(&e, &vec1(0.0), &scalar_obs(1.0), &ce).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }

    #[test]
    fn gaspari_cohn_shape_and_validity() {
        assert_relative_eq!(gaspari_cohn(0.0), 1.0, epsilon = 1e-15);
        assert_relative_eq!(gaspari_cohn(2.0), 0.0, epsilon = 1e-15);
        assert_eq!(gaspari_cohn(2.5), 0.0);
        // Continuity at z = 1 and monotone decay on a sample grid.
        let left: f64 = gaspari_cohn(1.0 - 1e-12);
        let right: f64 = gaspari_cohn(1.0 + 1e-12);
        assert_relative_eq!(left, right, epsilon = 1e-9);
        let mut prev = 1.0;
        for k in 1..=40 {
            let v = gaspari_cohn(k as f64 * 0.05);
            assert!(v <= prev + 1e-12);
            prev = v;
        }

        // Valid correlation matrices across radii on the cyclic lattice.
        for radius in [1.0, 2.5, 4.0, 8.0] {
            let spec = TaperSpec {
                radius,
                cyclic: true,
            };
            let c = gaspari_cohn_taper(40, &spec).unwrap();
            validate_correlation(&c).unwrap();
            // Compact support: zero beyond 2 * radius in cyclic distance.
            let lim = (2.0 * radius).ceil() as usize;
            if lim < 20 {
                assert_eq!(c[(0, lim)], 0.0);
            }
        }
    }

    #[test]
    fn oracle_gain_agreement() {
        // The ensemble gain and the Kalman oracle gain agree on identical
        // (P, H, R).
        let p = DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.9]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, -0.5]);
        let r = DMatrix::from_element(1, 1, 0.7);
        let ce = CovarianceEstimate {
            mean: DVector::zeros(2),
            cov: p.clone(),
            inflation: 1.0,
            taper: None,
        };
        let obs = ObservationOperator::new(h.clone(), r.clone()).unwrap();
        let k1 = kalman_gain(&ce, &obs).unwrap();
        let k2 = crate::oracle::oracle_kalman_gain(&p, &h, &r).unwrap();
        assert!((k1 - k2).amax() < 1e-12);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        // Unstable scalar dynamics blow past the threshold.
        use crate::ssm::{LinearGaussian, LinearGaussianParams};
        let params = LinearGaussianParams::scalar(20.0, 0.1, 1.0, 1e6, 0.0, 1.0);
        let model = LinearGaussian::new(params).unwrap();
        let obs: Vec<DVector<f64>> = (0..8).map(|_| vec1(0.0)).collect();
        let options = EnkfOptions {
            divergence_threshold: 1e4,
            ..EnkfOptions::default()
        };
        let err = run_enkf(&model, &obs, 5, &options, None, &RngStream::new(3)).unwrap_err();
        match err {
            Error::Divergence { step, .. } => assert!(step >= 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn zero_observations_is_pure_forecast() {
        use crate::ssm::{LinearGaussian, LinearGaussianParams};
        let model =
            LinearGaussian::new(LinearGaussianParams::scalar(0.9, 0.3, 1.0, 1.0, 0.0, 1.0))
                .unwrap();
        let run = run_enkf(&model, &[], 10, &EnkfOptions::default(), None, &RngStream::new(4))
            .unwrap();
        assert!(run.steps.is_empty());
        assert_eq!(run.ensemble.len(), 10);
        assert_eq!(run.ensemble.t, 0);
    }

    #[test]
    fn enkf_rejects_models_without_linear_observation() {
        let model = crate::ssm::StochasticVolatility::new(0.9, 0.3, 0.6).unwrap();
        let err = run_enkf(
            &model,
            &[vec1(0.0)],
            5,
            &EnkfOptions::default(),
            None,
            &RngStream::new(5),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }

    #[test]
    fn mean_error_decays_like_sqrt_n() {
        // Error of the stochastic-update posterior mean against the exact
        // Kalman posterior decays consistently with 1/sqrt(N): log-log slope
        // -0.5 +/- 0.15 over N in {100, 1000, 10000}.
        use crate::oracle::oracle_kalman_gain;
        let d = 2;
        let prior_mean = DVector::from_row_slice(&[0.3, -0.2]);
        let prior_cov = DMatrix::from_row_slice(d, d, &[1.0, 0.4, 0.4, 0.8]);
        let h = DMatrix::identity(d, d);
        let r = DMatrix::identity(d, d) * 0.5;
        let obs = ObservationOperator::new(h.clone(), r.clone()).unwrap();
        let y = DVector::from_row_slice(&[0.8, 0.1]);
        let gain = oracle_kalman_gain(&prior_cov, &h, &r).unwrap();
        let exact_mean = &prior_mean + &gain * (&y - &h * &prior_mean);
        let prior = Spd::new(&prior_cov).unwrap();

        let s = RngStream::new(404);
        let mut errs = Vec::new();
        for (ni, &n) in [100usize, 1000, 10000].iter().enumerate() {
            let reps = 24;
            let mut acc = 0.0;
            for rep in 0..reps {
                let fam = s.child((ni * 1000 + rep) as u64);
                let members = map_indexed(n, |i| {
                    prior.sample(&prior_mean, &mut fam.stream(0, i as u64, Purpose::Init))
                });
                let e = Ensemble { members, t: 0 };
                let ce = ensemble_mean_cov(&e, 1.0, None).unwrap();
                let up = stochastic_enkf_update(&e, &y, &obs, &ce, &fam).unwrap();
                acc += (up.mean() - &exact_mean).norm();
            }
            errs.push((n as f64).ln());
            errs.push((acc / reps as f64).ln());
        }
        // Least-squares slope over the three (ln N, ln err) points.
        let xs = [errs[0], errs[2], errs[4]];
        let ys = [errs[1], errs[3], errs[5]];
        let xm = xs.iter().sum::<f64>() / 3.0;
        let ym = ys.iter().sum::<f64>() / 3.0;
        let slope = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - xm) * (y - ym))
            .sum::<f64>()
            / xs.iter().map(|x| (x - xm).powi(2)).sum::<f64>();
        assert!(
            (slope + 0.5).abs() < 0.15,
            "convergence slope {slope} outside -0.5 +/- 0.15"
        );
    }
}
