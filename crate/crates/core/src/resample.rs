//! Weight normalization, effective sample size, and resampling schemes.
//!
//! All weight arithmetic is done in log-space with log-sum-exp. Ancestor
//! vectors use 0-based particle indices; every scheme guarantees the
//! offspring counts sum to the particle count.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};

/// Resampling schemes for the filter step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResamplingScheme {
    /// Independent categorical draws.
    Multinomial,
    /// Balanced scheme: offspring counts deviate from `N*w` by less than one.
    Systematic,
}

/// `log(sum_i exp(v_i))`, stable under large negative inputs.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes unnormalized log-weights.
///
/// Returns the normalized weights and `log_mean = logsumexp(lw) - ln N`,
/// which is the per-step log-likelihood increment when the inputs are the
/// particle observation log-densities.
///
/// Fails with a degenerate-weights error when every entry is `-inf` (total
/// particle failure) or any entry is `NaN`/`+inf`.
pub fn normalize_log_weights(log_w: &[f64]) -> Result<(Vec<f64>, f64)> {
    if log_w.is_empty() {
        return Err(Error::Domain("empty weight vector".into()));
    }
    if log_w.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Domain("log-weights must be < +inf and not NaN".into()));
    }
    let lse = logsumexp(log_w);
    if lse == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights(
            "all log-weights are -inf; every particle has zero likelihood".into(),
        ));
    }
    let w: Vec<f64> = log_w.iter().map(|v| (v - lse).exp()).collect();
    Ok((w, lse - (log_w.len() as f64).ln()))
}

/// Effective sample size `1 / sum_i w_i^2` of normalized weights.
pub fn ess(w: &[f64]) -> f64 {
    let sum_sq: f64 = w.iter().map(|v| v * v).sum();
    if sum_sq == 0.0 {
        0.0
    } else {
        1.0 / sum_sq
    }
}

/// Inverse-CDF draw from a categorical distribution with normalized weights.
pub(crate) fn categorical(w: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, &wj) in w.iter().enumerate() {
        acc += wj;
        if u < acc {
            return j;
        }
    }
    // u landed beyond the accumulated mass (rounding); take the last
    // positive-weight index.
    w.iter().rposition(|&wj| wj > 0.0).unwrap_or(w.len() - 1)
}

/// Multinomial resampling: `P(A(i) = j) = w_j`, i.i.d. over `i`.
pub fn multinomial_ancestors(w: &[f64], rng: &mut dyn RngCore) -> Vec<usize> {
    (0..w.len()).map(|_| categorical(w, rng.random())).collect()
}

/// Systematic (balanced) resampling driven by a single uniform `u in [0,1)`.
///
/// The interval `[0, N]` is partitioned into subintervals of length `N*w_j`;
/// offspring count `N_j` is the number of points `u, u+1, ..., u+N-1`
/// falling in subinterval `j`. Ancestors are emitted in subinterval order.
/// Subintervals are half-open on the right: a point landing exactly on a
/// boundary (measure-zero in exact reals) goes to the interval starting
/// there, which keeps `|N_j - N w_j| < 1` for every `u` in `[0, 1)`.
pub fn systematic_ancestors(w: &[f64], u: f64) -> Vec<usize> {
    systematic_ancestors_with_count(w, w.len(), u)
}

/// Systematic resampling drawing `n_out` ancestors from `len(w)` weights.
pub fn systematic_ancestors_with_count(w: &[f64], n_out: usize, u: f64) -> Vec<usize> {
    let m = w.len();
    debug_assert!((0.0..1.0).contains(&u), "u must lie in [0,1)");
    // cum[j] is the right edge of subinterval j on the [0, n_out] axis.
    let mut cum = Vec::with_capacity(m);
    let mut acc = 0.0;
    for &wj in w {
        acc += wj * n_out as f64;
        cum.push(acc);
    }
    // Guard against the accumulated sum falling a few ulps short of n_out.
    if let Some(last) = cum.last_mut() {
        *last = n_out as f64;
    }
    let mut ancestors = Vec::with_capacity(n_out);
    let mut j = 0;
    for k in 0..n_out {
        let p = u + k as f64;
        while j + 1 < m && cum[j] <= p {
            j += 1;
        }
        ancestors.push(j);
    }
    ancestors
}

/// Conditional multinomial resampling for the conditional particle filter:
/// `A(0) = 0` is pinned and the remaining ancestors are i.i.d. categorical.
pub fn conditional_multinomial_ancestors(w: &[f64], rng: &mut dyn RngCore) -> Vec<usize> {
    let mut ancestors = Vec::with_capacity(w.len());
    ancestors.push(0);
    for _ in 1..w.len() {
        ancestors.push(categorical(w, rng.random()));
    }
    ancestors
}

/// Draws ancestors with the chosen scheme, consuming draws from `rng`.
pub fn draw_ancestors(
    scheme: ResamplingScheme,
    w: &[f64],
    rng: &mut dyn RngCore,
) -> Vec<usize> {
    match scheme {
        ResamplingScheme::Multinomial => multinomial_ancestors(w, rng),
        ResamplingScheme::Systematic => systematic_ancestors(w, rng.random()),
    }
}

/// Offspring counts implied by an ancestor vector.
pub fn offspring_counts(ancestors: &[usize], n_particles: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_particles];
    for &a in ancestors {
        counts[a] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, RngStream};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn normalize_equal_weights() {
        let (w, log_mean) = normalize_log_weights(&[0.0; 4]).unwrap();
        assert_eq!(w, vec![0.25; 4]);
        assert_relative_eq!(log_mean, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn normalize_shifted_pair() {
        // (c, c + ln 3) -> (1/4, 3/4) for any c.
        for c in [-700.0, -3.0, 0.0, 5.0, 300.0] {
            let (w, _) = normalize_log_weights(&[c, c + 3.0_f64.ln()]).unwrap();
            assert_relative_eq!(w[0], 0.25, epsilon = 1e-12);
            assert_relative_eq!(w[1], 0.75, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalize_zero_weight_particle() {
        let (w, _) = normalize_log_weights(&[0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(w, vec![1.0, 0.0]);
    }

    #[test]
    fn normalize_all_neg_inf_is_degenerate() {
        let err = normalize_log_weights(&[f64::NEG_INFINITY; 3]).unwrap_err();
        assert!(matches!(err, Error::DegenerateWeights(_)));
    }

    #[test]
    fn ess_examples() {
        assert_relative_eq!(ess(&vec![0.01; 100]), 100.0, epsilon = 1e-9);
        let mut one_hot = vec![0.0; 10];
        one_hot[3] = 1.0;
        assert_relative_eq!(ess(&one_hot), 1.0, epsilon = 1e-15);
        assert_relative_eq!(ess(&[0.5, 0.5, 0.0, 0.0]), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn multinomial_point_mass() {
        let s = RngStream::new(7);
        let mut rng = s.stream(0, 0, Purpose::Resample);
        let mut w = vec![0.0; 5];
        w[0] = 1.0;
        let anc = multinomial_ancestors(&w, &mut rng);
        assert!(anc.iter().all(|&a| a == 0));
    }

    #[test]
    fn multinomial_single_particle_draw() {
        let s = RngStream::new(8);
        let w = [0.3, 0.7];
        let mut hits = [0usize; 2];
        for rep in 0..20_000 {
            let mut rng = s.child(rep).stream(0, 0, Purpose::Resample);
            hits[categorical(&w, rng.random())] += 1;
        }
        // Binomial CI: 3 standard errors around 0.3.
        let se = (0.3_f64 * 0.7 / 20_000.0).sqrt();
        let freq = hits[0] as f64 / 20_000.0;
        assert!((freq - 0.3).abs() < 3.0 * se, "freq {freq}");
    }

    #[test]
    fn multinomial_uniform_frequencies() {
        let n = 10;
        let w = vec![1.0 / n as f64; n];
        let s = RngStream::new(11);
        let draws = 100_000 / n;
        let mut counts = vec![0usize; n];
        for rep in 0..draws {
            let mut rng = s.child(rep as u64).stream(0, 0, Purpose::Resample);
            for &a in &multinomial_ancestors(&w, &mut rng) {
                counts[a] += 1;
            }
        }
        let total = (draws * n) as f64;
        let p = 1.0 / n as f64;
        let se = (total * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!(
                (c as f64 - total * p).abs() < 3.0 * se,
                "count {c} vs expected {}",
                total * p
            );
        }
    }

    #[test]
    fn systematic_counts_hand_example() {
        // Intervals [0,5), [5,8), [8,10) against points 0.05, 1.05, ..., 9.05.
        let anc = systematic_ancestors_with_count(&[0.5, 0.3, 0.2], 10, 0.05);
        assert_eq!(offspring_counts(&anc, 3), vec![5, 3, 2]);
    }

    #[test]
    fn systematic_uniform_weights_identity() {
        for &u in &[0.0, 0.2, 0.999] {
            let w = vec![0.125; 8];
            let anc = systematic_ancestors(&w, u);
            assert_eq!(anc, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn systematic_point_mass() {
        let anc = systematic_ancestors(&[1.0, 0.0], 0.7);
        assert_eq!(offspring_counts(&anc, 2), vec![2, 0]);
    }

    #[test]
    fn systematic_zero_leading_weight_with_zero_u() {
        let anc = systematic_ancestors(&[0.0, 1.0], 0.0);
        assert_eq!(offspring_counts(&anc, 2), vec![0, 2]);
    }

    #[test]
    fn conditional_multinomial_pins_first() {
        let s = RngStream::new(3);
        for rep in 0..50 {
            let mut rng = s.child(rep).stream(0, 0, Purpose::Resample);
            let anc = conditional_multinomial_ancestors(&[0.2, 0.5, 0.3], &mut rng);
            assert_eq!(anc[0], 0);
        }
        // w = (0, 1) forces A = (0, 1).
        let mut rng = s.stream(0, 0, Purpose::Resample);
        let anc = conditional_multinomial_ancestors(&[0.0, 1.0], &mut rng);
        assert_eq!(anc, vec![0, 1]);
    }

    #[test]
    fn conditional_multinomial_uniform_frequencies() {
        let n = 20;
        let w = vec![1.0 / n as f64; n];
        let s = RngStream::new(17);
        let reps = 5_000;
        let mut counts = vec![0usize; n];
        for rep in 0..reps {
            let mut rng = s.child(rep as u64).stream(0, 0, Purpose::Resample);
            for &a in &conditional_multinomial_ancestors(&w, &mut rng)[1..] {
                counts[a] += 1;
            }
        }
        let total = (reps * (n - 1)) as f64;
        let p = 1.0 / n as f64;
        let se = (total * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - total * p).abs() < 3.0 * se);
        }
    }

    #[test]
    fn resampling_unbiasedness_monte_carlo() {
        // E[N_j] = N * w_j for both schemes; 1e5 replicates, 4-SE tolerance.
        let w = [0.5, 0.3, 0.2];
        let n = w.len();
        let reps = 100_000u64;
        let s = RngStream::new(23);
        for scheme in [ResamplingScheme::Multinomial, ResamplingScheme::Systematic] {
            let mut sums = vec![0f64; n];
            let mut sums_sq = vec![0f64; n];
            for rep in 0..reps {
                let mut rng = s.child(rep).stream(0, 0, Purpose::Resample);
                let counts =
                    offspring_counts(&draw_ancestors(scheme, &w, &mut rng), n);
                for j in 0..n {
                    sums[j] += counts[j] as f64;
                    sums_sq[j] += (counts[j] * counts[j]) as f64;
                }
            }
            for j in 0..n {
                let mean = sums[j] / reps as f64;
                let var = sums_sq[j] / reps as f64 - mean * mean;
                let se = (var / reps as f64).sqrt().max(1e-12);
                let expected = n as f64 * w[j];
                assert!(
                    (mean - expected).abs() <= 4.0 * se,
                    "{scheme:?}: E[N_{j}] = {mean} vs {expected} (se {se})"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn systematic_counts_within_one_of_target(
            raw in proptest::collection::vec(0.0f64..1.0, 2..60),
            u in 0.0f64..1.0,
        ) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-3);
            let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let n = w.len();
            let anc = systematic_ancestors(&w, u);
            prop_assert_eq!(anc.len(), n);
            let counts = offspring_counts(&anc, n);
            for j in 0..n {
                let target = n as f64 * w[j];
                let c = counts[j] as f64;
                prop_assert!(
                    c == target.floor() || c == target.ceil(),
                    "count {} vs target {}", c, target
                );
            }
            // Deterministic given (w, u).
            prop_assert_eq!(anc, systematic_ancestors(&w, u));
        }

        #[test]
        fn normalization_is_shift_invariant(
            lw in proptest::collection::vec(-30.0f64..10.0, 1..40),
            shift in -20.0f64..20.0,
        ) {
            let (w0, _) = normalize_log_weights(&lw).unwrap();
            let shifted: Vec<f64> = lw.iter().map(|v| v + shift).collect();
            let (w1, _) = normalize_log_weights(&shifted).unwrap();
            let argmax0 = w0.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let argmax1 = w1.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            prop_assert_eq!(argmax0, argmax1);
            for (a, b) in w0.iter().zip(&w1) {
                prop_assert!((a - b).abs() <= 1e-14);
            }
            let sum: f64 = w1.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
