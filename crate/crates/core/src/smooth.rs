//! Particle smoothing: trajectory (ancestral-path) smoothing with degeneracy
//! diagnostics, fixed-lag approximation, backward trajectory simulation, and
//! marginal forward-backward reweighting.
//!
//! Backward methods require a closed-form transition density; all weight
//! recursions run in log space.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::resample::{categorical, logsumexp, normalize_log_weights};
use crate::rng::{Purpose, RngStream};
use crate::ssm::StateSpaceModel;

/// Per-step filter history: weights and ancestor indices for t = 0..T, plus
/// the particle values themselves when path storage is enabled.
#[derive(Debug, Clone)]
pub struct TrajectoryStore {
    n: usize,
    store_paths: bool,
    /// weights[t] are the normalized filter weights at time t (t = 0..=T).
    weights: Vec<Vec<f64>>,
    /// ancestors[t-1][i] is the index at time t-1 of particle i's parent.
    ancestors: Vec<Vec<usize>>,
    /// particles[t][i], kept only with path storage.
    particles: Vec<Vec<DVector<f64>>>,
}

impl TrajectoryStore {
    pub fn new(n: usize, store_paths: bool) -> Self {
        TrajectoryStore {
            n,
            store_paths,
            weights: Vec::new(),
            ancestors: Vec::new(),
            particles: Vec::new(),
        }
    }

    pub fn n_particles(&self) -> usize {
        self.n
    }

    /// Latest stored time index T.
    pub fn t_max(&self) -> usize {
        self.weights.len().saturating_sub(1)
    }

    pub fn has_paths(&self) -> bool {
        self.store_paths
    }

    pub fn push_initial(&mut self, particles: &[DVector<f64>], weights: &[f64]) {
        debug_assert!(self.weights.is_empty());
        self.weights.push(weights.to_vec());
        if self.store_paths {
            self.particles.push(particles.to_vec());
        }
    }

    pub fn push_step(&mut self, ancestors: Vec<usize>, particles: &[DVector<f64>], weights: &[f64]) {
        debug_assert_eq!(ancestors.len(), self.n);
        self.ancestors.push(ancestors);
        self.weights.push(weights.to_vec());
        if self.store_paths {
            self.particles.push(particles.to_vec());
        }
    }

    pub fn weights_at(&self, t: usize) -> &[f64] {
        &self.weights[t]
    }

    /// Ancestor indices used to produce the particles at time `t` (t >= 1).
    pub fn ancestors_at(&self, t: usize) -> &[usize] {
        &self.ancestors[t - 1]
    }

    /// Overwrites the recorded ancestor of one particle (ancestor sampling).
    pub fn set_ancestor(&mut self, t: usize, particle: usize, ancestor: usize) {
        self.ancestors[t - 1][particle] = ancestor;
    }

    pub fn particles_at(&self, t: usize) -> Result<&[DVector<f64>]> {
        if !self.store_paths {
            return Err(Error::Capability(
                "trajectory store has no particle values; rerun with path storage".into(),
            ));
        }
        Ok(&self.particles[t])
    }

    /// Walks the ancestry of `final_index` back from time T, returning the
    /// full path x_{0:T}. Requires path storage.
    pub fn extract_trajectory(&self, final_index: usize) -> Result<Vec<DVector<f64>>> {
        if final_index >= self.n {
            return Err(Error::Domain(format!(
                "particle index {final_index} out of range for N = {}",
                self.n
            )));
        }
        if !self.store_paths {
            return Err(Error::Capability(
                "trajectory store has no particle values; rerun with path storage".into(),
            ));
        }
        let t_max = self.t_max();
        let mut path = vec![DVector::zeros(0); t_max + 1];
        let mut idx = final_index;
        for t in (0..=t_max).rev() {
            path[t] = self.particles[t][idx].clone();
            if t > 0 {
                idx = self.ancestors[t - 1][idx];
            }
        }
        Ok(path)
    }

    /// Indices at time `s` of the ancestors of the time-T particles.
    pub fn ancestor_indices_at(&self, s: usize) -> Result<Vec<usize>> {
        self.trace_back(self.t_max(), s)
    }

    /// Traces the particles at time `from` back to their ancestors at `to`.
    pub fn trace_back(&self, from: usize, to: usize) -> Result<Vec<usize>> {
        if to > from || from > self.t_max() {
            return Err(Error::Domain(format!(
                "invalid trace range {to}..{from} for T = {}",
                self.t_max()
            )));
        }
        let mut idx: Vec<usize> = (0..self.n).collect();
        for t in ((to + 1)..=from).rev() {
            let anc = &self.ancestors[t - 1];
            for id in idx.iter_mut() {
                *id = anc[*id];
            }
        }
        Ok(idx)
    }

    /// Number of distinct time-`s` ancestors among the time-T particles.
    pub fn unique_path_count(&self, s: usize) -> Result<usize> {
        let mut idx = self.ancestor_indices_at(s)?;
        idx.sort_unstable();
        idx.dedup();
        Ok(idx.len())
    }

    /// Distinct-ancestor counts for every s = 0..=T in one backward sweep.
    /// Counts are non-increasing as s decreases (coalescing ancestry).
    pub fn unique_path_counts(&self) -> Vec<usize> {
        let t_max = self.t_max();
        let mut counts = vec![0usize; t_max + 1];
        let mut idx: Vec<usize> = (0..self.n).collect();
        let distinct = |v: &[usize]| {
            let mut s = v.to_vec();
            s.sort_unstable();
            s.dedup();
            s.len()
        };
        counts[t_max] = distinct(&idx);
        for t in (1..=t_max).rev() {
            let anc = &self.ancestors[t - 1];
            for id in idx.iter_mut() {
                *id = anc[*id];
            }
            counts[t - 1] = distinct(&idx);
        }
        counts
    }
}

/// Draws one trajectory from the smoothing distribution by backward
/// simulation: sample the final index from the filter weights, then walk
/// backwards reweighting by the transition density into the chosen state.
/// `path_tag` keys the random stream so that independently tagged paths are
/// independent. Cost O(T N).
pub fn backward_sample_trajectory(
    store: &TrajectoryStore,
    model: &dyn StateSpaceModel,
    path_tag: u64,
    rng: &RngStream,
) -> Result<Vec<DVector<f64>>> {
    if !model.has_transition_density() {
        return Err(Error::Capability(
            "backward simulation requires a transition density".into(),
        ));
    }
    let t_max = store.t_max();
    let n = store.n_particles();
    let mut path = vec![DVector::zeros(0); t_max + 1];

    let mut idx = {
        let mut r = rng.stream(t_max as u64, path_tag, Purpose::BackwardSample);
        categorical(store.weights_at(t_max), rand::Rng::random(&mut r))
    };
    path[t_max] = store.particles_at(t_max)?[idx].clone();

    for s in (0..t_max).rev() {
        let particles_s = store.particles_at(s)?;
        let weights_s = store.weights_at(s);
        let next = &path[s + 1];
        let log_bw: Vec<f64> = (0..n)
            .map(|i| {
                let lw = weights_s[i].ln();
                match model.log_trans_density(next, &particles_s[i]) {
                    Ok(lp) => lw + lp,
                    Err(_) => f64::NEG_INFINITY,
                }
            })
            .collect();
        let (bw, _) = normalize_log_weights(&log_bw).map_err(|e| match e {
            Error::DegenerateWeights(msg) => Error::DegenerateWeights(format!(
                "backward weights vanished at s={s}: {msg}"
            )),
            other => other,
        })?;
        let mut r = rng.stream(s as u64, path_tag, Purpose::BackwardSample);
        idx = categorical(&bw, rand::Rng::random(&mut r));
        path[s] = particles_s[idx].clone();
    }
    Ok(path)
}

/// One step of the marginal forward-backward reweighting: given the filter
/// particles and weights at time s, the filter particles and smoothing
/// weights at time s+1, produce the smoothing weights at time s.
///
/// `w_{s|t}^i = w_s^i * sum_j w_{s+1|t}^j p(x_{s+1}^j | x_s^i) /
///              sum_k w_s^k p(x_{s+1}^j | x_s^k)`, an O(N^2) pass.
pub fn marginal_smoothing_weights(
    particles_s: &[DVector<f64>],
    filter_weights_s: &[f64],
    particles_s1: &[DVector<f64>],
    smoothing_weights_s1: &[f64],
    model: &dyn StateSpaceModel,
) -> Result<Vec<f64>> {
    if !model.has_transition_density() {
        return Err(Error::Capability(
            "marginal smoothing requires a transition density".into(),
        ));
    }
    let n = particles_s.len();
    let m = particles_s1.len();

    // log p(x_{s+1}^j | x_s^i), row j, col i.
    let log_p = crate::map_indexed(m, |j| {
        let mut row = vec![f64::NEG_INFINITY; n];
        for (i, xi) in particles_s.iter().enumerate() {
            if let Ok(lp) = model.log_trans_density(&particles_s1[j], xi) {
                row[i] = lp;
            }
        }
        row
    });

    // Denominators D_j = log sum_k w_s^k p(x^j | x^k).
    let log_w_s: Vec<f64> = filter_weights_s.iter().map(|w| w.ln()).collect();
    let mut log_denom = vec![f64::NEG_INFINITY; m];
    for j in 0..m {
        let terms: Vec<f64> = (0..n).map(|k| log_w_s[k] + log_p[j][k]).collect();
        log_denom[j] = logsumexp(&terms);
        if log_denom[j] == f64::NEG_INFINITY && smoothing_weights_s1[j] > 0.0 {
            return Err(Error::DegenerateWeights(format!(
                "zero predictive density for particle j={j} at time s+1"
            )));
        }
    }

    let log_w_s1: Vec<f64> = smoothing_weights_s1.iter().map(|w| w.ln()).collect();
    let log_out: Vec<f64> = (0..n)
        .map(|i| {
            let terms: Vec<f64> = (0..m)
                .filter(|&j| log_denom[j] > f64::NEG_INFINITY)
                .map(|j| log_w_s1[j] + log_p[j][i] - log_denom[j])
                .collect();
            log_w_s[i] + logsumexp(&terms)
        })
        .collect();
    let (out, _) = normalize_log_weights(&log_out)?;
    Ok(out)
}

/// Full marginal forward-filtering backward-smoothing pass: smoothing weight
/// vectors over the filter particles for every s = 0..=T. O(T N^2).
pub fn marginal_smoother(
    store: &TrajectoryStore,
    model: &dyn StateSpaceModel,
) -> Result<Vec<Vec<f64>>> {
    let t_max = store.t_max();
    let mut all = vec![Vec::new(); t_max + 1];
    all[t_max] = store.weights_at(t_max).to_vec();
    for s in (0..t_max).rev() {
        all[s] = marginal_smoothing_weights(
            store.particles_at(s)?,
            store.weights_at(s),
            store.particles_at(s + 1)?,
            &all[s + 1],
            model,
        )
        .map_err(|e| e.at_step(s))?;
    }
    Ok(all)
}

/// Fixed-lag marginal at time s: the trajectory-smoother marginal frozen at
/// time `min(s + lag, T)`. Returned as indices into the time-s particles
/// with the weights of the freeze time.
#[derive(Debug, Clone)]
pub struct FixedLagMarginal {
    pub s: usize,
    /// Freeze time u = min(s + lag, T).
    pub frozen_at: usize,
    /// For each time-u particle, the index of its time-s ancestor.
    pub indices: Vec<usize>,
    /// The time-u filter weights.
    pub weights: Vec<f64>,
    /// Number of distinct time-s ancestors.
    pub unique_paths: usize,
}

/// Fixed-lag smoothing marginals for every s, by ancestry freezing.
pub fn fixed_lag_marginals(store: &TrajectoryStore, lag: usize) -> Result<Vec<FixedLagMarginal>> {
    let t_max = store.t_max();
    let mut out = Vec::with_capacity(t_max + 1);
    for s in 0..=t_max {
        let u = (s + lag).min(t_max);
        let indices = store.trace_back(u, s)?;
        let mut distinct = indices.clone();
        distinct.sort_unstable();
        distinct.dedup();
        out.push(FixedLagMarginal {
            s,
            frozen_at: u,
            indices,
            weights: store.weights_at(u).to_vec(),
            unique_paths: distinct.len(),
        });
    }
    Ok(out)
}

/// Weighted mean of the fixed-lag marginal over the stored particles.
pub fn fixed_lag_mean(store: &TrajectoryStore, marginal: &FixedLagMarginal) -> Result<DVector<f64>> {
    let particles = store.particles_at(marginal.s)?;
    let d = particles[0].len();
    let mut mean = DVector::zeros(d);
    for (idx, w) in marginal.indices.iter().zip(&marginal.weights) {
        mean.axpy(*w, &particles[*idx], 1.0);
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::log_normal_pdf;
    use crate::pf::{run_bootstrap_filter, FilterOptions, Storage};
    use crate::ssm::{simulate, StochasticVolatility};
    use approx::assert_relative_eq;
    use rand::RngCore;

    fn vec1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    /// Hand-built store: N = 3 particles, T = 2 steps with known ancestry.
    fn hand_store() -> TrajectoryStore {
        let mut store = TrajectoryStore::new(3, true);
        store.push_initial(
            &[vec1(10.0), vec1(11.0), vec1(12.0)],
            &[1.0 / 3.0; 3],
        );
        // t = 1: particle 0 <- 1, particle 1 <- 1, particle 2 <- 2.
        store.push_step(
            vec![1, 1, 2],
            &[vec1(20.0), vec1(21.0), vec1(22.0)],
            &[0.2, 0.5, 0.3],
        );
        // t = 2: particle 0 <- 0, particle 1 <- 2, particle 2 <- 2.
        store.push_step(
            vec![0, 2, 2],
            &[vec1(30.0), vec1(31.0), vec1(32.0)],
            &[0.1, 0.6, 0.3],
        );
        store
    }

    #[test]
    fn extract_trajectory_walks_ancestry() {
        let store = hand_store();
        // Final particle 1 at t=2 came from particle 2 at t=1, which came
        // from particle 2 at t=0.
        assert_eq!(
            store.extract_trajectory(1).unwrap(),
            vec![vec1(12.0), vec1(22.0), vec1(31.0)]
        );
        // Final particle 0: t=2 idx 0 <- t=1 idx 0 <- t=0 idx 1.
        assert_eq!(
            store.extract_trajectory(0).unwrap(),
            vec![vec1(11.0), vec1(20.0), vec1(30.0)]
        );
        assert!(store.extract_trajectory(3).is_err());
    }

    #[test]
    fn unique_path_counts_from_hand_ancestry() {
        let store = hand_store();
        // At s=2: indices {0,1,2} -> 3. At s=1: {0,2,2} -> 2. At s=0: {1,2,2} -> 2.
        assert_eq!(store.unique_path_counts(), vec![2, 2, 3]);
        assert_eq!(store.unique_path_count(0).unwrap(), 2);
        assert_eq!(store.unique_path_count(1).unwrap(), 2);
        assert_eq!(store.unique_path_count(2).unwrap(), 3);
    }

    #[test]
    fn counts_are_monotone_and_full_without_resampling() {
        // Identity ancestors everywhere: counts stay N.
        let mut store = TrajectoryStore::new(4, false);
        store.push_initial(&[], &[0.25; 4]);
        for _ in 0..5 {
            store.push_step(vec![0, 1, 2, 3], &[], &[0.25; 4]);
        }
        assert_eq!(store.unique_path_counts(), vec![4; 6]);

        // Real degenerate run: counts non-increasing backwards.
        let model = StochasticVolatility::new(0.9, 0.3, 0.6).unwrap();
        let rng = RngStream::new(41);
        let truth = simulate(&model, 60, &rng.child(1));
        let run = run_bootstrap_filter(&model, &truth.observations, 20, &FilterOptions::default(), &rng)
            .unwrap();
        let counts = run.store.unwrap().unique_path_counts();
        for w in counts.windows(2) {
            assert!(w[0] <= w[1], "counts must be non-increasing backwards");
        }
    }

    /// Gaussian random walk with unit observation noise; transition density
    /// available in closed form.
    struct Rw;
    impl StateSpaceModel for Rw {
        fn state_dim(&self) -> usize {
            1
        }
        fn obs_dim(&self) -> usize {
            1
        }
        fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64> {
            vec1(crate::gauss::standard_normal_vector(1, rng)[0])
        }
        fn log_initial_density(&self, x: &DVector<f64>) -> crate::Result<f64> {
            Ok(log_normal_pdf(x[0], 0.0, 1.0))
        }
        fn propagate_into(&self, x: &DVector<f64>, out: &mut DVector<f64>, rng: &mut dyn RngCore) {
            out[0] = x[0] + crate::gauss::standard_normal_vector(1, rng)[0];
        }
        fn log_obs_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
            log_normal_pdf(y[0], x[0], 1.0)
        }
        fn sample_obs(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
            vec1(x[0] + crate::gauss::standard_normal_vector(1, rng)[0])
        }
        fn has_transition_density(&self) -> bool {
            true
        }
        fn log_trans_density(&self, x_next: &DVector<f64>, x: &DVector<f64>) -> crate::Result<f64> {
            Ok(log_normal_pdf(x_next[0], x[0], 1.0))
        }
    }

    /// Same dynamics but with a constant transition density, which makes the
    /// backward weights collapse onto the filter weights.
    struct ConstTrans;
    impl StateSpaceModel for ConstTrans {
        fn state_dim(&self) -> usize {
            1
        }
        fn obs_dim(&self) -> usize {
            1
        }
        fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64> {
            vec1(crate::gauss::standard_normal_vector(1, rng)[0])
        }
        fn log_initial_density(&self, _x: &DVector<f64>) -> crate::Result<f64> {
            Ok(0.0)
        }
        fn propagate_into(&self, x: &DVector<f64>, out: &mut DVector<f64>, rng: &mut dyn RngCore) {
            out[0] = x[0] + crate::gauss::standard_normal_vector(1, rng)[0];
        }
        fn log_obs_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
            log_normal_pdf(y[0], x[0], 1.0)
        }
        fn sample_obs(&self, x: &DVector<f64>, _rng: &mut dyn RngCore) -> DVector<f64> {
            x.clone()
        }
        fn has_transition_density(&self) -> bool {
            true
        }
        fn log_trans_density(&self, _x_next: &DVector<f64>, _x: &DVector<f64>) -> crate::Result<f64> {
            Ok(-0.42)
        }
    }

    #[test]
    fn constant_transition_density_reduces_backward_weights_to_filter() {
        let model = ConstTrans;
        let rng = RngStream::new(50);
        let obs: Vec<DVector<f64>> = (0..6).map(|i| vec1((i as f64 * 0.9).sin())).collect();
        let opts = FilterOptions {
            storage: Storage::Paths,
            ..FilterOptions::default()
        };
        let run = run_bootstrap_filter(&model, &obs, 30, &opts, &rng).unwrap();
        let store = run.store.unwrap();
        // Marginal smoothing weights at every s equal the filter weights.
        let smooth = marginal_smoother(&store, &model).unwrap();
        for s in 0..=store.t_max() {
            for (a, b) in smooth[s].iter().zip(store.weights_at(s)) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_particle_backward_returns_stored_path() {
        let model = Rw;
        let rng = RngStream::new(51);
        let mut store = TrajectoryStore::new(1, true);
        store.push_initial(&[vec1(1.0)], &[1.0]);
        store.push_step(vec![0], &[vec1(2.0)], &[1.0]);
        store.push_step(vec![0], &[vec1(3.0)], &[1.0]);
        let path = backward_sample_trajectory(&store, &model, 0, &rng).unwrap();
        assert_eq!(path, vec![vec1(1.0), vec1(2.0), vec1(3.0)]);
    }

    #[test]
    fn backward_requires_transition_density() {
        let model = crate::ssm::Lorenz96::new(crate::ssm::Lorenz96Params::default()).unwrap();
        let store = TrajectoryStore::new(2, true);
        let err = backward_sample_trajectory(&store, &model, 0, &RngStream::new(1)).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }

    #[test]
    fn marginal_weights_hand_instance() {
        // N = 2, one backward step with hand-computed densities.
        struct TwoPoint;
        impl StateSpaceModel for TwoPoint {
            fn state_dim(&self) -> usize {
                1
            }
            fn obs_dim(&self) -> usize {
                1
            }
            fn sample_initial(&self, _rng: &mut dyn RngCore) -> DVector<f64> {
                DVector::zeros(1)
            }
            fn log_initial_density(&self, _x: &DVector<f64>) -> crate::Result<f64> {
                Ok(0.0)
            }
            fn propagate_into(
                &self,
                x: &DVector<f64>,
                out: &mut DVector<f64>,
                _rng: &mut dyn RngCore,
            ) {
                out.copy_from(x);
            }
            fn log_obs_density(&self, _y: &DVector<f64>, _x: &DVector<f64>) -> f64 {
                0.0
            }
            fn sample_obs(&self, x: &DVector<f64>, _rng: &mut dyn RngCore) -> DVector<f64> {
                x.clone()
            }
            fn has_transition_density(&self) -> bool {
                true
            }
            fn log_trans_density(
                &self,
                x_next: &DVector<f64>,
                x: &DVector<f64>,
            ) -> crate::Result<f64> {
                // p(0|0)=0.6, p(1|0)=0.4, p(0|1)=0.2, p(1|1)=0.8.
                let p = match (x[0] as i64, x_next[0] as i64) {
                    (0, 0) => 0.6,
                    (0, 1) => 0.4,
                    (1, 0) => 0.2,
                    (1, 1) => 0.8,
                    _ => unreachable!(),
                };
                Ok(f64::ln(p))
            }
        }
        // Filter at s: particles (0, 1), weights (0.5, 0.5).
        // At s+1: particles (0, 1), smoothing weights (0.3, 0.7).
        // Denominators: D_0 = .5*.6 + .5*.2 = .4; D_1 = .5*.4 + .5*.8 = .6.
        // w_0 = .5 * (.3*.6/.4 + .7*.4/.6) = .5 * (0.45 + 0.466667) = 0.458333.
        // w_1 = .5 * (.3*.2/.4 + .7*.8/.6) = .5 * (0.15 + 0.933333) = 0.541667.
        let model = TwoPoint;
        let ps: Vec<DVector<f64>> = vec![vec1(0.0), vec1(1.0)];
        let out = marginal_smoothing_weights(&ps, &[0.5, 0.5], &ps, &[0.3, 0.7], &model).unwrap();
        assert_relative_eq!(out[0], 0.458_333_333_333_333_3, epsilon = 1e-12);
        assert_relative_eq!(out[1], 0.541_666_666_666_666_7, epsilon = 1e-12);
    }

    #[test]
    fn fixed_lag_zero_equals_filter_marginals() {
        let model = Rw;
        let rng = RngStream::new(52);
        let truth = simulate(&model, 10, &rng.child(1));
        let opts = FilterOptions {
            storage: Storage::Paths,
            ..FilterOptions::default()
        };
        let run = run_bootstrap_filter(&model, &truth.observations, 25, &opts, &rng).unwrap();
        let store = run.store.unwrap();
        let marginals = fixed_lag_marginals(&store, 0).unwrap();
        for m in &marginals {
            assert_eq!(m.frozen_at, m.s);
            assert_eq!(m.indices, (0..25).collect::<Vec<_>>());
            let mean = fixed_lag_mean(&store, m).unwrap();
            let mut expect = DVector::zeros(1);
            for (x, &w) in store.particles_at(m.s).unwrap().iter().zip(store.weights_at(m.s)) {
                expect.axpy(w, x, 1.0);
            }
            assert_relative_eq!(mean[0], expect[0], epsilon = 1e-13);
        }
    }

    #[test]
    fn fixed_lag_beyond_t_equals_full_trajectory_smoother() {
        let model = Rw;
        let rng = RngStream::new(53);
        let truth = simulate(&model, 8, &rng.child(1));
        let opts = FilterOptions {
            storage: Storage::Paths,
            ..FilterOptions::default()
        };
        let run = run_bootstrap_filter(&model, &truth.observations, 20, &opts, &rng).unwrap();
        let store = run.store.unwrap();
        let marginals = fixed_lag_marginals(&store, 100).unwrap();
        for m in &marginals {
            assert_eq!(m.frozen_at, store.t_max());
            assert_eq!(m.indices, store.ancestor_indices_at(m.s).unwrap());
            assert_eq!(m.weights, store.weights_at(store.t_max()));
        }
    }
}
