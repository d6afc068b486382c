//! Exact inference for linear-Gaussian models: Kalman filter with the exact
//! marginal likelihood, the RTS smoother, and grid posteriors over a scalar
//! parameter. Every Monte Carlo module in the crate is validated against
//! these closed-form results.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gauss::{symmetrize, Spd, LN_2PI};
use crate::ssm::LinearGaussianParams;

/// Exact Gaussian state belief `N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-10 * (1.0 + cov.amax()) {
            return Err(Error::Numerical(format!(
                "belief covariance asymmetric by {asym:.3e}"
            )));
        }
        let cov = symmetrize(&cov);
        let eig = nalgebra::SymmetricEigen::new(cov.clone());
        let scale = eig.eigenvalues.amax().max(1.0);
        if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
            return Err(Error::Numerical(
                "belief covariance has a negative eigenvalue".into(),
            ));
        }
        Ok(GaussianBelief { mean, cov })
    }
}

/// Output of a Kalman filter pass.
#[derive(Debug, Clone)]
pub struct KalmanRun {
    /// Predictive beliefs `pi_{t | t-1}` for t = 1..T.
    pub predicted: Vec<GaussianBelief>,
    /// Filter beliefs `pi_{t | t}`; index 0 is the initial law, index t the
    /// belief after absorbing `y_t`.
    pub filtered: Vec<GaussianBelief>,
    /// Per-step log-likelihoods `log p(y_t | y_{1:t-1})`.
    pub step_log_lik: Vec<f64>,
    /// Exact total log-likelihood `log p(y_{1:T})`.
    pub log_lik: f64,
}

/// Kalman gain `P H^T (H P H^T + R)^{-1}`, via a linear solve.
pub fn oracle_kalman_gain(
    p: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let pht = p * h.transpose();
    let innov_cov = symmetrize(&(h * &pht + r));
    let spd = Spd::new(&innov_cov)?;
    // K = P H^T S^{-1}  <=>  S K^T = H P^T.
    Ok(spd.solve_mat(&pht.transpose()).transpose())
}

/// Exact Kalman filter over the full observation record.
///
/// The covariance update uses the Joseph form
/// `(I - KH) P (I - KH)^T + K R K^T`, algebraically identical to
/// `(I - KH) P` but symmetric by construction.
pub fn kalman_filter(
    params: &LinearGaussianParams,
    observations: &[DVector<f64>],
) -> Result<KalmanRun> {
    params.validate()?;
    let d = params.state_dim();
    let mut filtered = vec![GaussianBelief::new(params.m0.clone(), params.p0.clone())?];
    let mut predicted = Vec::with_capacity(observations.len());
    let mut step_log_lik = Vec::with_capacity(observations.len());
    let mut log_lik = 0.0;
    let identity = DMatrix::<f64>::identity(d, d);

    for (idx, y) in observations.iter().enumerate() {
        let t = idx + 1;
        if y.len() != params.obs_dim() {
            return Err(Error::Dimension(format!(
                "observation at t={t} has length {}, expected {}",
                y.len(),
                params.obs_dim()
            )));
        }
        let prev = filtered.last().unwrap();
        // Predict.
        let m_pred = &params.phi * &prev.mean;
        let p_pred = symmetrize(&(&params.phi * &prev.cov * params.phi.transpose() + &params.q));

        // Innovation.
        let innov = y - &params.h * &m_pred;
        let innov_cov = symmetrize(&(&params.h * &p_pred * params.h.transpose() + &params.r));
        let innov_spd = Spd::new(&innov_cov).map_err(|e| e.at_step(t))?;
        let q_dim = params.obs_dim() as f64;
        let mut whitened = innov.clone();
        innov_spd
            .lower()
            .solve_lower_triangular_mut(&mut whitened);
        let ll = -0.5 * (q_dim * LN_2PI + innov_spd.log_det() + whitened.norm_squared());

        // Update (Joseph form).
        let gain = oracle_kalman_gain(&p_pred, &params.h, &params.r).map_err(|e| e.at_step(t))?;
        let m_filt = &m_pred + &gain * &innov;
        let i_kh = &identity - &gain * &params.h;
        let p_filt = symmetrize(
            &(&i_kh * &p_pred * i_kh.transpose() + &gain * &params.r * gain.transpose()),
        );

        predicted.push(GaussianBelief::new(m_pred, p_pred)?);
        filtered.push(GaussianBelief::new(m_filt, p_filt)?);
        step_log_lik.push(ll);
        log_lik += ll;
    }

    Ok(KalmanRun {
        predicted,
        filtered,
        step_log_lik,
        log_lik,
    })
}

/// Rauch-Tung-Striebel smoother: beliefs `pi_{s | T}` for s = 0..T.
pub fn rts_smoother(run: &KalmanRun, params: &LinearGaussianParams) -> Result<Vec<GaussianBelief>> {
    let t_max = run.predicted.len();
    let mut smoothed: Vec<GaussianBelief> = vec![run.filtered[t_max].clone()];
    for s in (0..t_max).rev() {
        let filt = &run.filtered[s];
        let pred_next = &run.predicted[s]; // pi_{s+1 | s}
        let next_smoothed = smoothed.last().unwrap();
        let pred_spd = Spd::new(&pred_next.cov)
            .map_err(|_| Error::Numerical(format!("singular predictive covariance at s={}", s + 1)))?;
        // Smoother gain G = P_s Phi^T P_{s+1|s}^{-1}.
        let cross = &filt.cov * params.phi.transpose();
        let gain = pred_spd.solve_mat(&cross.transpose()).transpose();
        let mean = &filt.mean + &gain * (&next_smoothed.mean - &pred_next.mean);
        let cov = symmetrize(
            &(&filt.cov + &gain * (&next_smoothed.cov - &pred_next.cov) * gain.transpose()),
        );
        smoothed.push(GaussianBelief::new(mean, cov)?);
    }
    smoothed.reverse();
    Ok(smoothed)
}

/// Normalized posterior density over a sorted grid of a scalar parameter:
/// `p(theta_g) * L_Kalman(theta_g)`, normalized by the trapezoidal rule.
///
/// A single-point grid returns the point mass `[1.0]`.
pub fn grid_posterior(
    log_prior: impl Fn(f64) -> f64,
    grid: &[f64],
    observations: &[DVector<f64>],
    theta_builder: impl Fn(f64) -> LinearGaussianParams,
) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::Domain("empty parameter grid".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("grid must be strictly increasing".into()));
    }
    if grid.len() == 1 {
        return Ok(vec![1.0]);
    }
    let mut log_dens = Vec::with_capacity(grid.len());
    for &g in grid {
        let lp = log_prior(g);
        if lp == f64::NEG_INFINITY {
            log_dens.push(f64::NEG_INFINITY);
            continue;
        }
        let run = kalman_filter(&theta_builder(g), observations)?;
        log_dens.push(lp + run.log_lik);
    }
    let max = log_dens.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Domain(
            "grid posterior has zero total mass".into(),
        ));
    }
    let dens: Vec<f64> = log_dens.iter().map(|l| (l - max).exp()).collect();
    let mass = trapezoid(grid, &dens);
    if !(mass > 0.0) {
        return Err(Error::Domain("grid posterior has zero total mass".into()));
    }
    Ok(dens.iter().map(|v| v / mass).collect())
}

/// Trapezoidal quadrature of sampled values over a sorted grid.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(x, v)| 0.5 * (x[1] - x[0]) * (v[0] + v[1]))
        .sum()
}
