//! Multivariate Gaussian helpers: Cholesky-backed densities and sampling,
//! and PSD square roots for possibly singular covariances.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Draws a vector of independent standard normals.
pub fn standard_normal_vector(dim: usize, rng: &mut dyn RngCore) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}

/// A symmetric positive-definite matrix held through its Cholesky factor.
#[derive(Debug, Clone)]
pub struct Spd {
    lower: DMatrix<f64>,
    log_det: f64,
}

impl Spd {
    /// Factorizes `m`; fails when `m` is not (numerically) positive definite.
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!(
                "expected square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let chol = nalgebra::Cholesky::new(m.clone()).ok_or_else(|| {
            Error::Numerical(format!(
                "Cholesky factorization failed; matrix of size {} is not positive definite \
                 (condition estimate {:.3e})",
                m.nrows(),
                condition_estimate(m)
            ))
        })?;
        let lower = chol.l();
        let log_det = 2.0 * lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Spd { lower, log_det })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Solves `M x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        self.lower.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// Solves `M X = B` columnwise.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        self.lower.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// Log-density of `N(mean, M)` at `x`.
    pub fn log_density(&self, x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let mut diff = x - mean;
        self.lower.solve_lower_triangular_mut(&mut diff);
        let quad = diff.norm_squared();
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + quad)
    }

    /// Draws from `N(mean, M)`.
    pub fn sample(&self, mean: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        mean + &self.lower * standard_normal_vector(self.dim(), rng)
    }
}

/// A PSD covariance usable for sampling; allows singular matrices (e.g. a
/// zero process-noise covariance) through a symmetric square root.
#[derive(Debug, Clone)]
pub struct PsdSqrt {
    root: DMatrix<f64>,
}

impl PsdSqrt {
    /// Symmetric PSD square root via eigendecomposition. Eigenvalues below
    /// `-1e-10 * max(|lambda|)` are rejected; small negatives are clamped.
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!(
                "expected square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let sym = symmetrize(m);
        if (&sym - m).amax() > 1e-8 * (1.0 + m.amax()) {
            return Err(Error::Domain("covariance matrix is not symmetric".into()));
        }
        let eig = nalgebra::SymmetricEigen::new(sym);
        let scale = eig.eigenvalues.amax().max(1.0);
        if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
            return Err(Error::Numerical(
                "covariance matrix has a significantly negative eigenvalue".into(),
            ));
        }
        let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let root = &eig.eigenvectors
            * DMatrix::from_diagonal(&sqrt_vals)
            * eig.eigenvectors.transpose();
        Ok(PsdSqrt { root })
    }

    pub fn dim(&self) -> usize {
        self.root.nrows()
    }

    pub fn root(&self) -> &DMatrix<f64> {
        &self.root
    }

    /// Draws from `N(0, M)`.
    pub fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        &self.root * standard_normal_vector(self.dim(), rng)
    }
}

/// `(M + M^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Crude condition estimate from the eigenvalue spread, for error messages.
fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = nalgebra::SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Scalar Gaussian log-density.
pub fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let diff = x - mean;
    -0.5 * (LN_2PI + var.ln() + diff * diff / var)
}
