//! Batch parameter estimation by particle MCMC: particle marginal
//! Metropolis-Hastings on an unbiased filter likelihood estimate, and
//! particle Gibbs through the conditional particle filter with optional
//! ancestor sampling.

use nalgebra::DVector;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::pf::{run_bootstrap_filter, FilterOptions, Storage};
use crate::resample::{categorical, conditional_multinomial_ancestors, normalize_log_weights};
use crate::rng::{Purpose, RngStream};
use crate::smooth::TrajectoryStore;
use crate::ssm::StateSpaceModel;

/// Prior over the parameter vector.
pub trait ParameterPrior: Send + Sync {
    fn log_density(&self, theta: &[f64]) -> f64;
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64>;
}

/// Independent uniform prior boxes.
#[derive(Debug, Clone)]
pub struct UniformPrior {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ParameterPrior for UniformPrior {
    fn log_density(&self, theta: &[f64]) -> f64 {
        let mut ld = 0.0;
        for ((&v, &lo), &hi) in theta.iter().zip(&self.low).zip(&self.high) {
            if v < lo || v > hi {
                return f64::NEG_INFINITY;
            }
            ld -= (hi - lo).ln();
        }
        ld
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(&lo, &hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }
}

/// Independent Gaussian prior per component.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl ParameterPrior for GaussianPrior {
    fn log_density(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .zip(&self.mean)
            .zip(&self.sd)
            .map(|((&v, &m), &s)| crate::gauss::log_normal_pdf(v, m, s * s))
            .sum()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.sd)
            .map(|(&m, &s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * z
            })
            .collect()
    }
}

/// Proposal kernel with a density evaluable in both directions.
pub trait ProposalKernel: Send + Sync {
    fn propose(&self, theta: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
    fn log_density(&self, to: &[f64], from: &[f64]) -> f64;
}

/// Componentwise Gaussian random walk (symmetric).
#[derive(Debug, Clone)]
pub struct GaussianRandomWalk {
    pub scales: Vec<f64>,
}

impl ProposalKernel for GaussianRandomWalk {
    fn propose(&self, theta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.scales)
            .map(|(&v, &s)| {
                let z: f64 = StandardNormal.sample(rng);
                v + s * z
            })
            .collect()
    }

    fn log_density(&self, to: &[f64], from: &[f64]) -> f64 {
        to.iter()
            .zip(from)
            .zip(&self.scales)
            .map(|((&a, &b), &s)| crate::gauss::log_normal_pdf(a, b, s * s))
            .sum()
    }
}

/// Chain state: the parameter, its stored likelihood estimate, and an
/// optional sampled state trajectory.
#[derive(Debug, Clone)]
pub struct McmcState {
    pub theta: Vec<f64>,
    pub log_lik_hat: f64,
    pub path: Option<Vec<DVector<f64>>>,
}

/// A likelihood estimate, optionally with a sampled trajectory.
#[derive(Debug, Clone)]
pub struct LikelihoodEstimate {
    pub log_lik: f64,
    pub path: Option<Vec<DVector<f64>>>,
}

/// Produces (estimates of) the likelihood at a parameter value. The particle
/// filter provides an unbiased estimate; the exact Kalman likelihood can be
/// substituted for linear-Gaussian models.
pub trait LogLikelihoodEstimator: Send + Sync {
    fn estimate(
        &self,
        theta: &[f64],
        rng: &RngStream,
        want_path: bool,
    ) -> Result<LikelihoodEstimate>;
}

/// Bootstrap-filter likelihood estimator.
pub struct BootstrapLikelihood<F> {
    pub builder: F,
    pub observations: Vec<DVector<f64>>,
    pub n_particles: usize,
    pub options: FilterOptions,
}

impl<F> BootstrapLikelihood<F>
where
    F: Fn(&[f64]) -> Result<Box<dyn StateSpaceModel>> + Send + Sync,
{
    pub fn new(builder: F, observations: Vec<DVector<f64>>, n_particles: usize) -> Self {
        BootstrapLikelihood {
            builder,
            observations,
            n_particles,
            options: FilterOptions::default(),
        }
    }
}

impl<F> LogLikelihoodEstimator for BootstrapLikelihood<F>
where
    F: Fn(&[f64]) -> Result<Box<dyn StateSpaceModel>> + Send + Sync,
{
    fn estimate(
        &self,
        theta: &[f64],
        rng: &RngStream,
        want_path: bool,
    ) -> Result<LikelihoodEstimate> {
        let model = (self.builder)(theta)?;
        let mut options = self.options;
        options.storage = if want_path { Storage::Paths } else { Storage::None };
        let run = run_bootstrap_filter(&*model, &self.observations, self.n_particles, &options, rng)?;
        let path = if want_path {
            let store = run.store.as_ref().expect("paths requested");
            let t = store.t_max();
            let mut r = rng.stream(t as u64, 0, Purpose::PathDraw);
            let idx = categorical(store.weights_at(t), r.random());
            Some(store.extract_trajectory(idx)?)
        } else {
            None
        };
        Ok(LikelihoodEstimate {
            log_lik: run.log_lik,
            path,
        })
    }
}

/// Exact-likelihood mode for linear-Gaussian models: the Kalman marginal
/// likelihood stands in for the particle estimate, turning PMMH into a
/// standard Metropolis-Hastings chain.
pub struct KalmanLikelihood<F> {
    pub builder: F,
    pub observations: Vec<DVector<f64>>,
}

impl<F> LogLikelihoodEstimator for KalmanLikelihood<F>
where
    F: Fn(&[f64]) -> Result<crate::ssm::LinearGaussianParams> + Send + Sync,
{
    fn estimate(
        &self,
        theta: &[f64],
        _rng: &RngStream,
        _want_path: bool,
    ) -> Result<LikelihoodEstimate> {
        let params = (self.builder)(theta)?;
        let run = crate::oracle::kalman_filter(&params, &self.observations)?;
        Ok(LikelihoodEstimate {
            log_lik: run.log_lik,
            path: None,
        })
    }
}

/// Log Metropolis-Hastings ratio for stored (possibly estimated) likelihoods.
/// Adding a constant to both stored log-likelihoods leaves it unchanged.
pub fn log_accept_ratio(
    log_prior_cur: f64,
    log_prior_prop: f64,
    log_q_cur_given_prop: f64,
    log_q_prop_given_cur: f64,
    log_lik_cur: f64,
    log_lik_prop: f64,
) -> f64 {
    (log_prior_prop + log_q_cur_given_prop + log_lik_prop)
        - (log_prior_cur + log_q_prop_given_cur + log_lik_cur)
}

/// Outcome bookkeeping for a PMMH step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub accepted: bool,
    /// The proposal's filter run failed and was treated as zero likelihood.
    pub filter_failed: bool,
}

/// One particle marginal Metropolis-Hastings step: propose, run a fresh
/// filter at the proposal, and accept with the standard MH probability
/// computed on the estimated likelihoods. A failed filter run at the
/// proposal counts as zero likelihood (automatic rejection).
pub fn pmmh_step(
    cur: &McmcState,
    prior: &dyn ParameterPrior,
    kernel: &dyn ProposalKernel,
    estimator: &dyn LogLikelihoodEstimator,
    store_paths: bool,
    iter: u64,
    rng: &RngStream,
) -> (McmcState, StepOutcome) {
    let proposed = kernel.propose(&cur.theta, &mut rng.stream(iter, 0, Purpose::ParamPropose));
    let log_prior_prop = prior.log_density(&proposed);
    if log_prior_prop == f64::NEG_INFINITY {
        return (
            cur.clone(),
            StepOutcome {
                accepted: false,
                filter_failed: false,
            },
        );
    }
    let (estimate, filter_failed) = match estimator.estimate(&proposed, &rng.child(iter), store_paths)
    {
        Ok(est) => (est, false),
        Err(_) => (
            LikelihoodEstimate {
                log_lik: f64::NEG_INFINITY,
                path: None,
            },
            true,
        ),
    };
    let ratio = log_accept_ratio(
        prior.log_density(&cur.theta),
        log_prior_prop,
        kernel.log_density(&cur.theta, &proposed),
        kernel.log_density(&proposed, &cur.theta),
        cur.log_lik_hat,
        estimate.log_lik,
    );
    let u: f64 = rng.stream(iter, 0, Purpose::AcceptTest).random();
    if u.ln() < ratio {
        (
            McmcState {
                theta: proposed,
                log_lik_hat: estimate.log_lik,
                path: estimate.path,
            },
            StepOutcome {
                accepted: true,
                filter_failed,
            },
        )
    } else {
        (
            cur.clone(),
            StepOutcome {
                accepted: false,
                filter_failed,
            },
        )
    }
}

/// One recorded chain state.
#[derive(Debug, Clone)]
pub struct McmcSample {
    pub iter: usize,
    pub theta: Vec<f64>,
    pub log_lik_hat: f64,
    pub accepted: bool,
}

/// A completed chain with acceptance and likelihood-noise diagnostics.
#[derive(Debug, Clone)]
pub struct McmcChain {
    /// Samples for iterations 0 (the initial state) through M.
    pub samples: Vec<McmcSample>,
    pub burn_in: usize,
    pub acceptance_rate: f64,
    /// Number of proposal filter runs that failed (treated as rejections).
    pub filter_failures: usize,
    /// Final chain state (with trajectory if path storage was on).
    pub final_state: McmcState,
}

impl McmcChain {
    /// Post-burn-in samples.
    pub fn kept(&self) -> &[McmcSample] {
        &self.samples[self.burn_in.min(self.samples.len())..]
    }
}

/// Runs a PMMH chain of `iterations` steps from `init_theta`.
pub fn run_pmmh(
    init_theta: Vec<f64>,
    iterations: usize,
    burn_in: usize,
    prior: &dyn ParameterPrior,
    kernel: &dyn ProposalKernel,
    estimator: &dyn LogLikelihoodEstimator,
    store_paths: bool,
    rng: &RngStream,
) -> Result<McmcChain> {
    if prior.log_density(&init_theta) == f64::NEG_INFINITY {
        return Err(Error::Domain(
            "initial parameter lies outside the prior support".into(),
        ));
    }
    let init_est = estimator
        .estimate(&init_theta, &rng.child(0), store_paths)
        .map_err(|e| e.at_step(0))?;
    let mut state = McmcState {
        theta: init_theta,
        log_lik_hat: init_est.log_lik,
        path: init_est.path,
    };
    let mut samples = Vec::with_capacity(iterations + 1);
    samples.push(McmcSample {
        iter: 0,
        theta: state.theta.clone(),
        log_lik_hat: state.log_lik_hat,
        accepted: false,
    });
    let mut accepted_count = 0usize;
    let mut filter_failures = 0usize;
    for iter in 1..=iterations {
        let (next, outcome) = pmmh_step(
            &state,
            prior,
            kernel,
            estimator,
            store_paths,
            iter as u64,
            rng,
        );
        state = next;
        if outcome.accepted {
            accepted_count += 1;
        }
        if outcome.filter_failed {
            filter_failures += 1;
        }
        samples.push(McmcSample {
            iter,
            theta: state.theta.clone(),
            log_lik_hat: state.log_lik_hat,
            accepted: outcome.accepted,
        });
    }
    Ok(McmcChain {
        samples,
        burn_in,
        acceptance_rate: if iterations == 0 {
            0.0
        } else {
            accepted_count as f64 / iterations as f64
        },
        filter_failures,
        final_state: state,
    })
}

/// Report of the likelihood-noise tuning helper.
#[derive(Debug, Clone)]
pub struct TuneReport {
    pub pilot_n: usize,
    pub replicates: usize,
    /// Sample variance of the replicate log-likelihood estimates.
    pub var_log_lik: f64,
    pub target_variance: f64,
    /// Particle count scaled to bring the variance to the target
    /// (`Var(log L-hat)` is approximately proportional to `1/N`).
    pub recommended_n: usize,
}

/// Estimates `Var(log L-hat)` at a pilot parameter from replicate filter
/// runs and recommends a particle count hitting `target_variance`.
pub fn tune_n(
    estimator: &dyn LogLikelihoodEstimator,
    theta: &[f64],
    pilot_n: usize,
    replicates: usize,
    target_variance: f64,
    rng: &RngStream,
) -> Result<TuneReport> {
    if replicates < 2 {
        return Err(Error::Domain("tuning needs at least 2 replicates".into()));
    }
    if !(target_variance > 0.0) {
        return Err(Error::Domain("target variance must be > 0".into()));
    }
    let mut values = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let est = estimator.estimate(theta, &rng.child(1_000_000 + r as u64), false)?;
        values.push(est.log_lik);
    }
    let mean = values.iter().sum::<f64>() / replicates as f64;
    let var =
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (replicates - 1) as f64;
    let recommended = ((pilot_n as f64 * var / target_variance).ceil() as usize).max(2);
    Ok(TuneReport {
        pilot_n,
        replicates,
        var_log_lik: var,
        target_variance,
        recommended_n: recommended,
    })
}

/// Conditional particle filter: particle 0 is pinned to the reference
/// trajectory at every time; resampling uses the conditional multinomial
/// scheme; the output trajectory is drawn from the final weights. With
/// ancestor sampling, the pinned particle's ancestor is redrawn after each
/// propagation with probabilities `w_{t-1}^j p(x_t_ref | x_{t-1}^j)`.
pub fn conditional_particle_filter(
    reference: &[DVector<f64>],
    model: &dyn StateSpaceModel,
    observations: &[DVector<f64>],
    n_particles: usize,
    ancestor_sampling: bool,
    rng: &RngStream,
) -> Result<(Vec<DVector<f64>>, TrajectoryStore)> {
    if n_particles < 2 {
        return Err(Error::Domain(
            "conditional particle filter needs at least 2 particles".into(),
        ));
    }
    if reference.len() != observations.len() + 1 {
        return Err(Error::Dimension(format!(
            "reference path has length {}, expected {} (observations + 1)",
            reference.len(),
            observations.len() + 1
        )));
    }
    if ancestor_sampling && !model.has_transition_density() {
        return Err(Error::Capability(
            "ancestor sampling requires a transition density".into(),
        ));
    }

    let n = n_particles;
    let mut store = TrajectoryStore::new(n, true);
    let mut particles: Vec<DVector<f64>> = crate::map_indexed(n, |i| {
        if i == 0 {
            reference[0].clone()
        } else {
            model.sample_initial(&mut rng.stream(0, i as u64, Purpose::Init))
        }
    });
    let mut weights = vec![1.0 / n as f64; n];
    store.push_initial(&particles, &weights);

    for (idx, y) in observations.iter().enumerate() {
        let t = idx + 1;
        let mut ancestors = conditional_multinomial_ancestors(
            &weights,
            &mut rng.stream(t as u64, 0, Purpose::Resample),
        );
        let prev = particles;
        particles = crate::map_indexed(n, |i| {
            if i == 0 {
                reference[t].clone()
            } else {
                model.propagate(
                    &prev[ancestors[i]],
                    &mut rng.stream(t as u64, i as u64, Purpose::Propagate),
                )
            }
        });
        if ancestor_sampling {
            let log_as: Vec<f64> = prev
                .iter()
                .zip(&weights)
                .map(|(xp, &w)| {
                    w.ln()
                        + model
                            .log_trans_density(&reference[t], xp)
                            .unwrap_or(f64::NEG_INFINITY)
                })
                .collect();
            let (as_w, _) = normalize_log_weights(&log_as).map_err(|e| e.at_step(t))?;
            let mut r = rng.stream(t as u64, 0, Purpose::AncestorSample);
            ancestors[0] = categorical(&as_w, r.random());
        }
        let log_g: Vec<f64> = particles
            .iter()
            .map(|x| model.log_obs_density(y, x))
            .collect();
        let (w, _) = normalize_log_weights(&log_g).map_err(|e| e.at_step(t))?;
        weights = w;
        store.push_step(ancestors, &particles, &weights);
    }

    let t_max = store.t_max();
    let mut r = rng.stream(t_max as u64, 0, Purpose::PathDraw);
    let out_idx = categorical(&weights, r.random());
    let path = store.extract_trajectory(out_idx)?;
    Ok((path, store))
}

/// The parameter move inside a particle Gibbs sweep.
pub enum ThetaUpdate<'a> {
    /// Keep the parameter fixed (pure path updates).
    Fixed,
    /// Random-walk Metropolis on the complete-data posterior
    /// `p(theta) p(x_{0:n} | theta) p(y_{1:n} | x, theta)`. Requires initial
    /// and transition densities.
    RandomWalk { scales: Vec<f64> },
    /// User-supplied sampler from the full conditional
    /// `p(theta | x_{0:n}, y_{1:n})`.
    Custom(&'a (dyn Fn(&[f64], &[DVector<f64>], &mut dyn RngCore) -> Vec<f64> + Send + Sync)),
}

/// Complete-data log-likelihood `log pi_0(x_0) + sum log p(x_t | x_{t-1}) +
/// sum log g(y_t | x_t)`.
pub fn complete_data_log_lik(
    model: &dyn StateSpaceModel,
    path: &[DVector<f64>],
    observations: &[DVector<f64>],
) -> Result<f64> {
    let mut ll = model.log_initial_density(&path[0])?;
    for t in 1..path.len() {
        ll += model.log_trans_density(&path[t], &path[t - 1])?;
        ll += model.log_obs_density(&observations[t - 1], &path[t]);
    }
    Ok(ll)
}

/// One particle Gibbs sweep: update the parameter given the current path,
/// then refresh the path with a conditional particle filter at the new
/// parameter. Returns the new state and whether the parameter move was
/// accepted (always true for `Fixed` and `Custom`).
pub fn particle_gibbs_sweep<F>(
    cur: &McmcState,
    theta_update: &ThetaUpdate,
    prior: &dyn ParameterPrior,
    builder: &F,
    observations: &[DVector<f64>],
    n_particles: usize,
    ancestor_sampling: bool,
    sweep: u64,
    rng: &RngStream,
) -> Result<(McmcState, bool)>
where
    F: Fn(&[f64]) -> Result<Box<dyn StateSpaceModel>>,
{
    let path = cur
        .path
        .as_ref()
        .ok_or_else(|| Error::Domain("particle Gibbs needs a current trajectory".into()))?;

    let (theta, theta_accepted) = match theta_update {
        ThetaUpdate::Fixed => (cur.theta.clone(), true),
        ThetaUpdate::Custom(f) => {
            let mut r = rng.stream(sweep, 0, Purpose::ThetaUpdate);
            (f(&cur.theta, path, &mut r), true)
        }
        ThetaUpdate::RandomWalk { scales } => {
            let mut r = rng.stream(sweep, 0, Purpose::ThetaUpdate);
            let proposed: Vec<f64> = cur
                .theta
                .iter()
                .zip(scales)
                .map(|(&v, &s)| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    v + s * z
                })
                .collect();
            let lp_prop = prior.log_density(&proposed);
            let accepted = if lp_prop > f64::NEG_INFINITY {
                let cur_model = builder(&cur.theta)?;
                let lp_cur = prior.log_density(&cur.theta)
                    + complete_data_log_lik(&*cur_model, path, observations)?;
                let prop_ll = builder(&proposed)
                    .and_then(|m| complete_data_log_lik(&*m, path, observations));
                match prop_ll {
                    Ok(ll) => {
                        let u: f64 = r.random();
                        u.ln() < (lp_prop + ll) - lp_cur
                    }
                    Err(_) => false,
                }
            } else {
                false
            };
            if accepted {
                (proposed, true)
            } else {
                (cur.theta.clone(), false)
            }
        }
    };

    let model = builder(&theta)?;
    let (new_path, _store) = conditional_particle_filter(
        path,
        &*model,
        observations,
        n_particles,
        ancestor_sampling,
        &rng.child(sweep),
    )?;
    Ok((
        McmcState {
            theta,
            log_lik_hat: f64::NAN,
            path: Some(new_path),
        },
        theta_accepted,
    ))
}

/// Runs a particle Gibbs chain. The initial path is drawn from an
/// unconditional bootstrap filter at the initial parameter.
#[allow(clippy::too_many_arguments)]
pub fn run_particle_gibbs<F>(
    init_theta: Vec<f64>,
    iterations: usize,
    burn_in: usize,
    theta_update: &ThetaUpdate,
    prior: &dyn ParameterPrior,
    builder: &F,
    observations: &[DVector<f64>],
    n_particles: usize,
    ancestor_sampling: bool,
    rng: &RngStream,
) -> Result<McmcChain>
where
    F: Fn(&[f64]) -> Result<Box<dyn StateSpaceModel>> + Send + Sync,
{
    if prior.log_density(&init_theta) == f64::NEG_INFINITY {
        return Err(Error::Domain(
            "initial parameter lies outside the prior support".into(),
        ));
    }
    let init_estimator = BootstrapLikelihood {
        builder: |theta: &[f64]| builder(theta),
        observations: observations.to_vec(),
        n_particles,
        options: FilterOptions::default(),
    };
    let init_est = init_estimator
        .estimate(&init_theta, &rng.child(0), true)
        .map_err(|e| e.at_step(0))?;
    let mut state = McmcState {
        theta: init_theta,
        log_lik_hat: f64::NAN,
        path: init_est.path,
    };
    let mut samples = Vec::with_capacity(iterations + 1);
    samples.push(McmcSample {
        iter: 0,
        theta: state.theta.clone(),
        log_lik_hat: f64::NAN,
        accepted: false,
    });
    let mut accepted_count = 0usize;
    for sweep in 1..=iterations {
        let (next, accepted) = particle_gibbs_sweep(
            &state,
            theta_update,
            prior,
            builder,
            observations,
            n_particles,
            ancestor_sampling,
            sweep as u64,
            rng,
        )
        .map_err(|e| e.at_step(sweep))?;
        state = next;
        if accepted {
            accepted_count += 1;
        }
        samples.push(McmcSample {
            iter: sweep,
            theta: state.theta.clone(),
            log_lik_hat: f64::NAN,
            accepted,
        });
    }
    Ok(McmcChain {
        samples,
        burn_in,
        acceptance_rate: if iterations == 0 {
            0.0
        } else {
            accepted_count as f64 / iterations as f64
        },
        filter_failures: 0,
        final_state: state,
    })
}
