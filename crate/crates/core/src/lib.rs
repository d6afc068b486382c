//! Sequential Monte Carlo and ensemble data assimilation for state-space models.
//!
//! The crate provides:
//!
//! - [`ssm`]: the state-space model abstraction and three reference models
//!   (linear-Gaussian, stochastic volatility, Lorenz 96),
//! - [`resample`]: weight normalization, ESS, and resampling schemes,
//! - [`pf`]: sequential importance sampling, the bootstrap filter, the
//!   auxiliary particle filter, and weight-collapse diagnostics,
//! - [`enkf`]: stochastic and square-root ensemble Kalman filters with
//!   inflation and covariance tapering,
//! - [`smooth`]: trajectory, fixed-lag, and forward-backward particle
//!   smoothers,
//! - [`pmcmc`]: particle marginal Metropolis-Hastings and particle Gibbs
//!   via the conditional particle filter,
//! - [`oracle`]: exact Kalman filtering, RTS smoothing, and grid posteriors
//!   for linear-Gaussian models, used to validate every stochastic algorithm.
//!
//! All randomness flows through [`rng::RngStream`], a counter-based keyed
//! generator: results depend only on the seed and the configuration, never
//! on evaluation order or thread count.

pub mod enkf;
pub mod error;
pub mod gauss;
pub mod oracle;
pub mod pf;
pub mod pmcmc;
pub mod resample;
pub mod rng;
pub mod smooth;
pub mod ssm;

pub use error::{Error, Result};

/// Maps `f(i)` over `0..n`, in parallel when the `parallel` feature is
/// enabled. Output order is always by index, so reductions over the result
/// are deterministic regardless of thread count.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    // Below this size the rayon dispatch overhead dominates.
    const PAR_THRESHOLD: usize = 512;
    #[cfg(feature = "parallel")]
    {
        if n >= PAR_THRESHOLD {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = PAR_THRESHOLD;
    (0..n).map(f).collect()
}
