//! Sequential importance sampling, the bootstrap filter, the auxiliary
//! particle filter, likelihood estimation, and weight-collapse diagnostics.
//!
//! Filter steps follow the resample / propagate / reweight / likelihood
//! pattern. Per-particle randomness is keyed by `(t, i)`, so propagation is
//! order-independent; normalization and resampling are the only serial
//! synchronization points, which keeps output independent of thread count.

use nalgebra::DVector;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::map_indexed;
use crate::resample::{draw_ancestors, ess, normalize_log_weights, ResamplingScheme};
use crate::rng::{Purpose, RngStream};
use crate::smooth::TrajectoryStore;
use crate::ssm::StateSpaceModel;

/// A weighted particle approximation of the filtering distribution, with the
/// running log-likelihood estimate `log p_hat(y_{1:t})`.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    pub particles: Vec<DVector<f64>>,
    /// Normalized weights.
    pub weights: Vec<f64>,
    /// Time index of the current particles.
    pub t: usize,
    /// Accumulated log-likelihood estimate.
    pub log_lik: f64,
}

impl ParticleSystem {
    /// Samples `n` particles from the initial law with uniform weights.
    pub fn init(model: &dyn StateSpaceModel, n: usize, rng: &RngStream) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("particle count must be >= 1".into()));
        }
        let particles =
            map_indexed(n, |i| model.sample_initial(&mut rng.stream(0, i as u64, Purpose::Init)));
        Ok(ParticleSystem {
            particles,
            weights: vec![1.0 / n as f64; n],
            t: 0,
            log_lik: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Weighted mean of the current particles.
    pub fn mean(&self) -> DVector<f64> {
        weighted_mean(&self.particles, &self.weights)
    }

    /// Sequential-importance-sampling step: propagate every particle without
    /// resampling and multiply its weight by the observation likelihood.
    /// The log-likelihood increment is `log sum_i w_i g(y | x_i)`.
    pub fn sis_step(
        &mut self,
        model: &dyn StateSpaceModel,
        y: &DVector<f64>,
        rng: &RngStream,
    ) -> Result<()> {
        let t_new = self.t + 1;
        let moved = propagate_and_weight(model, &self.particles, None, y, t_new, rng);
        let log_unnorm: Vec<f64> = moved
            .iter()
            .zip(&self.weights)
            .map(|((_, lg), w)| lg + w.ln())
            .collect();
        let (weights, log_mean) =
            normalize_log_weights(&log_unnorm).map_err(|e| e.at_step(t_new))?;
        // log sum_i W_i = log_mean + log N.
        self.log_lik += log_mean + (self.len() as f64).ln();
        self.particles = moved.into_iter().map(|(x, _)| x).collect();
        self.weights = weights;
        self.t = t_new;
        Ok(())
    }

    /// Bootstrap filter step: resample, propagate, reweight by the
    /// observation likelihood, and accumulate `log mean_i g(y | x_i)`.
    /// Returns the ancestor indices used by the resampling step.
    pub fn bootstrap_step(
        &mut self,
        model: &dyn StateSpaceModel,
        y: &DVector<f64>,
        scheme: ResamplingScheme,
        rng: &RngStream,
    ) -> Result<Vec<usize>> {
        let t_new = self.t + 1;
        let ancestors = draw_ancestors(
            scheme,
            &self.weights,
            &mut rng.stream(t_new as u64, 0, Purpose::Resample),
        );
        let moved = propagate_and_weight(model, &self.particles, Some(&ancestors), y, t_new, rng);
        let log_g: Vec<f64> = moved.iter().map(|(_, lg)| *lg).collect();
        let (weights, log_mean) = normalize_log_weights(&log_g).map_err(|e| e.at_step(t_new))?;
        self.log_lik += log_mean;
        self.particles = moved.into_iter().map(|(x, _)| x).collect();
        self.weights = weights;
        self.t = t_new;
        Ok(ancestors)
    }

    /// Auxiliary particle filter step: resample with observation-informed
    /// first-stage weights, propagate with the proposal transition, and
    /// correct with the two-stage importance weight. Requires a closed-form
    /// transition density.
    pub fn auxiliary_step(
        &mut self,
        model: &dyn StateSpaceModel,
        y: &DVector<f64>,
        proposal: &dyn AuxiliaryProposal,
        scheme: ResamplingScheme,
        rng: &RngStream,
    ) -> Result<Vec<usize>> {
        if !model.has_transition_density() {
            return Err(Error::Capability(
                "auxiliary filter requires a transition density for the weight ratio".into(),
            ));
        }
        let t_new = self.t + 1;
        let n = self.len();

        let log_first: Vec<f64> = map_indexed(n, |i| {
            self.weights[i].ln() + proposal.log_first_stage_weight(&self.particles[i], y)
        });
        let (first_stage, _) = normalize_log_weights(&log_first).map_err(|e| e.at_step(t_new))?;

        let ancestors = draw_ancestors(
            scheme,
            &first_stage,
            &mut rng.stream(t_new as u64, 0, Purpose::Resample),
        );

        let moved: Vec<(DVector<f64>, f64)> = map_indexed(n, |i| {
            let a = ancestors[i];
            let parent = &self.particles[a];
            let x = proposal.propose(
                parent,
                y,
                &mut rng.stream(t_new as u64, i as u64, Purpose::Propagate),
            );
            // w_{t-1}^A / w~_{t-1}^A * P(x | x_A) g(y | x) / P~(x | x_A, y),
            // in log space.
            let log_w = self.weights[a].ln() - first_stage[a].ln()
                + model.log_trans_density(&x, parent).unwrap_or(f64::NEG_INFINITY)
                + model.log_obs_density(y, &x)
                - proposal.log_proposal_density(&x, parent, y);
            (x, log_w)
        });
        let log_w: Vec<f64> = moved.iter().map(|(_, lw)| *lw).collect();
        let (weights, log_mean) = normalize_log_weights(&log_w).map_err(|e| e.at_step(t_new))?;
        self.log_lik += log_mean;
        self.particles = moved.into_iter().map(|(x, _)| x).collect();
        self.weights = weights;
        self.t = t_new;
        Ok(ancestors)
    }

    /// Propagates the system `steps` times without correction, yielding the
    /// multi-step prediction sample.
    pub fn predict(
        &mut self,
        model: &dyn StateSpaceModel,
        steps: usize,
        rng: &RngStream,
    ) {
        for _ in 0..steps {
            let t_new = self.t + 1;
            self.particles = map_indexed(self.len(), |i| {
                model.propagate(
                    &self.particles[i],
                    &mut rng.stream(t_new as u64, i as u64, Purpose::Propagate),
                )
            });
            self.t = t_new;
        }
    }
}

/// Propagate particles (optionally through resampled ancestors) and evaluate
/// observation log-densities, in parallel when enabled.
fn propagate_and_weight(
    model: &dyn StateSpaceModel,
    particles: &[DVector<f64>],
    ancestors: Option<&[usize]>,
    y: &DVector<f64>,
    t_new: usize,
    rng: &RngStream,
) -> Vec<(DVector<f64>, f64)> {
    map_indexed(particles.len(), |i| {
        let parent = match ancestors {
            Some(anc) => &particles[anc[i]],
            None => &particles[i],
        };
        let x = model.propagate(
            parent,
            &mut rng.stream(t_new as u64, i as u64, Purpose::Propagate),
        );
        let lg = model.log_obs_density(y, &x);
        (x, lg)
    })
}

/// Proposal machinery of the auxiliary particle filter: first-stage weights
/// preferring particles consistent with the next observation, and a proposal
/// transition whose density must dominate the model transition.
pub trait AuxiliaryProposal: Send + Sync {
    /// Log of the first-stage weight multiplier for particle `x`.
    fn log_first_stage_weight(&self, x: &DVector<f64>, y_next: &DVector<f64>) -> f64;

    /// Draws from the proposal transition given the parent state.
    fn propose(
        &self,
        x: &DVector<f64>,
        y_next: &DVector<f64>,
        rng: &mut dyn RngCore,
    ) -> DVector<f64>;

    /// Log-density of the proposal transition.
    fn log_proposal_density(
        &self,
        x_new: &DVector<f64>,
        x: &DVector<f64>,
        y_next: &DVector<f64>,
    ) -> f64;
}

/// The trivial proposal: first-stage weights equal to the filter weights and
/// the model transition itself. The auxiliary step then reproduces the
/// bootstrap step draw for draw.
pub struct BootstrapProposal<'a> {
    model: &'a dyn StateSpaceModel,
}

impl<'a> BootstrapProposal<'a> {
    pub fn new(model: &'a dyn StateSpaceModel) -> Self {
        BootstrapProposal { model }
    }
}

impl AuxiliaryProposal for BootstrapProposal<'_> {
    fn log_first_stage_weight(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> f64 {
        0.0
    }

    fn propose(&self, x: &DVector<f64>, _y: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        self.model.propagate(x, rng)
    }

    fn log_proposal_density(&self, x_new: &DVector<f64>, x: &DVector<f64>, _y: &DVector<f64>) -> f64 {
        self.model
            .log_trans_density(x_new, x)
            .unwrap_or(f64::NEG_INFINITY)
    }
}

/// Weight degeneracy summary.
#[derive(Debug, Clone, Copy)]
pub struct CollapseDiagnostic {
    /// Largest normalized weight.
    pub max_weight: f64,
    /// Ratio of the largest to the second-largest weight.
    pub ratio_top2: f64,
    /// Effective sample size.
    pub ess: f64,
}

/// Largest weight, top-two ratio, and ESS of a normalized weight vector.
pub fn collapse_diagnostic(w: &[f64]) -> Result<CollapseDiagnostic> {
    if w.len() < 2 {
        return Err(Error::Domain(
            "collapse diagnostic needs at least two weights".into(),
        ));
    }
    let mut top = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in w {
        if v > top {
            second = top;
            top = v;
        } else if v > second {
            second = v;
        }
    }
    Ok(CollapseDiagnostic {
        max_weight: top,
        ratio_top2: top / second,
        ess: ess(w),
    })
}

/// When to resample within a filter run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResamplePolicy {
    /// Resample at every step (the basic bootstrap filter).
    Always,
    /// Resample only when `ESS < fraction * N`.
    EssBelow(f64),
    /// Never resample (pure sequential importance sampling).
    Never,
}

/// How much history a filter run keeps for smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    None,
    /// Ancestor indices and weights only: O(N T).
    Ancestry,
    /// Ancestors, weights, and per-step particle values: O(N T d).
    Paths,
}

#[derive(Debug, Clone, Copy)]
pub struct FilterOptions {
    pub scheme: ResamplingScheme,
    pub policy: ResamplePolicy,
    pub storage: Storage,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            scheme: ResamplingScheme::Systematic,
            policy: ResamplePolicy::Always,
            storage: Storage::Ancestry,
        }
    }
}

/// Per-step filter summary row.
#[derive(Debug, Clone)]
pub struct StepSummary {
    pub t: usize,
    pub mean: DVector<f64>,
    pub q05: DVector<f64>,
    pub q95: DVector<f64>,
    pub ess: f64,
    pub max_weight: f64,
    /// Per-step estimate `log p_hat(y_t | y_{1:t-1})`. Unlike the total, the
    /// per-step estimate is biased in general.
    pub log_step_lik: f64,
    pub log_lik_cum: f64,
}

/// A completed filter run.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub summaries: Vec<StepSummary>,
    pub system: ParticleSystem,
    pub store: Option<TrajectoryStore>,
    pub log_lik: f64,
}

/// Runs the bootstrap filter (or SIS / adaptive-resampling variants per the
/// policy) over the observation record.
pub fn run_bootstrap_filter(
    model: &dyn StateSpaceModel,
    observations: &[DVector<f64>],
    n: usize,
    options: &FilterOptions,
    rng: &RngStream,
) -> Result<FilterRun> {
    run_filter_impl(model, observations, n, options, None, rng)
}

/// Runs the auxiliary particle filter with the supplied proposal.
pub fn run_auxiliary_filter(
    model: &dyn StateSpaceModel,
    observations: &[DVector<f64>],
    n: usize,
    proposal: &dyn AuxiliaryProposal,
    options: &FilterOptions,
    rng: &RngStream,
) -> Result<FilterRun> {
    run_filter_impl(model, observations, n, options, Some(proposal), rng)
}

fn run_filter_impl(
    model: &dyn StateSpaceModel,
    observations: &[DVector<f64>],
    n: usize,
    options: &FilterOptions,
    proposal: Option<&dyn AuxiliaryProposal>,
    rng: &RngStream,
) -> Result<FilterRun> {
    if n < 2 {
        return Err(Error::Domain("filter runs need at least 2 particles".into()));
    }
    let mut system = ParticleSystem::init(model, n, rng)?;
    let mut store = match options.storage {
        Storage::None => None,
        Storage::Ancestry => Some(TrajectoryStore::new(n, false)),
        Storage::Paths => Some(TrajectoryStore::new(n, true)),
    };
    if let Some(s) = store.as_mut() {
        s.push_initial(&system.particles, &system.weights);
    }

    let mut summaries = Vec::with_capacity(observations.len());
    for (idx, y) in observations.iter().enumerate() {
        let t = idx + 1;
        let log_lik_before = system.log_lik;
        let resample_now = match options.policy {
            ResamplePolicy::Always => true,
            ResamplePolicy::Never => false,
            ResamplePolicy::EssBelow(frac) => ess(&system.weights) < frac * n as f64,
        };
        let ancestors = if let Some(p) = proposal {
            system.auxiliary_step(model, y, p, options.scheme, rng)?
        } else if resample_now {
            system.bootstrap_step(model, y, options.scheme, rng)?
        } else {
            system.sis_step(model, y, rng)?;
            (0..n).collect()
        };
        if let Some(s) = store.as_mut() {
            s.push_step(ancestors, &system.particles, &system.weights);
        }
        summaries.push(summarize_step(t, &system, system.log_lik - log_lik_before));
    }

    let log_lik = system.log_lik;
    Ok(FilterRun {
        summaries,
        system,
        store,
        log_lik,
    })
}

fn summarize_step(t: usize, system: &ParticleSystem, log_step_lik: f64) -> StepSummary {
    let d = system.particles[0].len();
    let mean = system.mean();
    let mut q05 = DVector::zeros(d);
    let mut q95 = DVector::zeros(d);
    for k in 0..d {
        let mut pairs: Vec<(f64, f64)> = system
            .particles
            .iter()
            .zip(&system.weights)
            .map(|(x, &w)| (x[k], w))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        q05[k] = weighted_quantile_sorted(&pairs, 0.05);
        q95[k] = weighted_quantile_sorted(&pairs, 0.95);
    }
    StepSummary {
        t,
        mean,
        q05,
        q95,
        ess: ess(&system.weights),
        max_weight: system.weights.iter().cloned().fold(0.0, f64::max),
        log_step_lik,
        log_lik_cum: system.log_lik,
    }
}

/// Weighted mean of a particle set.
pub fn weighted_mean(particles: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
    let mut mean = DVector::zeros(particles[0].len());
    for (x, &w) in particles.iter().zip(weights) {
        mean.axpy(w, x, 1.0);
    }
    mean
}

/// Quantile by linear interpolation of the weighted ECDF through the points
/// `(x_(i), c_i)` with `c_i` the cumulative weight at the sorted values.
/// Input pairs must be sorted by value; probabilities outside the covered
/// range clamp to the extreme values.
pub fn weighted_quantile_sorted(sorted_pairs: &[(f64, f64)], prob: f64) -> f64 {
    debug_assert!(!sorted_pairs.is_empty());
    let mut cum = 0.0;
    let mut prev_x = sorted_pairs[0].0;
    let mut prev_c = 0.0;
    for &(x, w) in sorted_pairs {
        cum += w;
        if prob <= cum {
            if cum == prev_c {
                return x;
            }
            // First point: the ECDF starts at (x_(0), w_0); clamp below.
            if prev_c == 0.0 {
                return x;
            }
            let frac = (prob - prev_c) / (cum - prev_c);
            return prev_x + frac * (x - prev_x);
        }
        prev_x = x;
        prev_c = cum;
    }
    sorted_pairs.last().unwrap().0
}


/// Exact optimal auxiliary proposal for a linear-Gaussian model: first-stage
/// weights `p(y_t | x_{t-1})` and the conditional transition
/// `P(x_t | x_{t-1}, y_t)`, both closed-form Gaussians. Makes the
/// second-stage weights constant.
pub struct LgOptimalProposal {
    phi: nalgebra::DMatrix<f64>,
    h: nalgebra::DMatrix<f64>,
    /// Predictive observation covariance H Q H^T + R.
    pred_spd: crate::gauss::Spd,
    /// Conditional covariance (Q^{-1} + H^T R^{-1} H)^{-1}.
    cond_spd: crate::gauss::Spd,
    /// Q^{-1}.
    q_inv: nalgebra::DMatrix<f64>,
    /// H^T R^{-1}.
    ht_r_inv: nalgebra::DMatrix<f64>,
}

impl LgOptimalProposal {
    pub fn new(model: &crate::ssm::LinearGaussian) -> Result<Self> {
        let p = model.params();
        let d = p.state_dim();
        let q_spd = crate::gauss::Spd::new(&p.q).map_err(|_| {
            Error::Capability(
                "optimal proposal requires a positive-definite state-noise covariance".into(),
            )
        })?;
        let r_spd = crate::gauss::Spd::new(&p.r)?;
        let identity = nalgebra::DMatrix::<f64>::identity(d, d);
        let q_inv = q_spd.solve_mat(&identity);
        let r_inv_h = r_spd.solve_mat(&p.h);
        let ht_r_inv = r_inv_h.transpose();
        let cond_prec = &q_inv + p.h.transpose() * &r_inv_h;
        let cond_cov = crate::gauss::Spd::new(&crate::gauss::symmetrize(&cond_prec))?
            .solve_mat(&identity);
        let cond_spd = crate::gauss::Spd::new(&crate::gauss::symmetrize(&cond_cov))?;
        let pred_cov = &p.h * &p.q * p.h.transpose() + &p.r;
        let pred_spd = crate::gauss::Spd::new(&crate::gauss::symmetrize(&pred_cov))?;
        Ok(LgOptimalProposal {
            phi: p.phi.clone(),
            h: p.h.clone(),
            pred_spd,
            cond_spd,
            q_inv,
            ht_r_inv,
        })
    }

    fn conditional_mean(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let prior_mean = &self.phi * x;
        let info = &self.q_inv * &prior_mean + &self.ht_r_inv * y;
        // cov * information vector; cov is held as an SPD factor.
        let l = self.cond_spd.lower();
        l * (l.transpose() * info)
    }
}

impl AuxiliaryProposal for LgOptimalProposal {
    fn log_first_stage_weight(&self, x: &DVector<f64>, y_next: &DVector<f64>) -> f64 {
        self.pred_spd.log_density(y_next, &(&self.h * (&self.phi * x)))
    }

    fn propose(
        &self,
        x: &DVector<f64>,
        y_next: &DVector<f64>,
        rng: &mut dyn RngCore,
    ) -> DVector<f64> {
        self.cond_spd.sample(&self.conditional_mean(x, y_next), rng)
    }

    fn log_proposal_density(
        &self,
        x_new: &DVector<f64>,
        x: &DVector<f64>,
        y_next: &DVector<f64>,
    ) -> f64 {
        self.cond_spd
            .log_density(x_new, &self.conditional_mean(x, y_next))
    }
}
