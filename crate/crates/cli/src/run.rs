//! Subcommand drivers: wire the validated config to the library and write
//! result files.

use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use serde_json::json;

use smcda::pf::{
    run_auxiliary_filter, run_bootstrap_filter, weighted_quantile_sorted, FilterOptions,
    LgOptimalProposal, ResamplePolicy, Storage,
};
use smcda::enkf::{run_enkf, EnkfOptions, EnkfVariant, TaperSpec};
use smcda::pmcmc::{
    run_particle_gibbs, run_pmmh, tune_n, BootstrapLikelihood, GaussianPrior, GaussianRandomWalk,
    ParameterPrior, ThetaUpdate, UniformPrior,
};
use smcda::rng::RngStream;
use smcda::smooth::{backward_sample_trajectory, fixed_lag_marginals, marginal_smoother};
use smcda::ssm::{simulate, StateSpaceModel};

use crate::config::{
    build_model, AlgorithmConfig, EnkfVariantConfig, ExperimentConfig, PriorConfig, SmoothMethod,
    theta_builder,
};
use crate::output::{
    ensure_dir, indexed_columns, read_observations, vector_cells, write_summary,
    write_truth_and_obs, Cell, CsvTable,
};
use crate::CliError;

pub struct RunContext {
    pub config: ExperimentConfig,
    pub out_dir: std::path::PathBuf,
}

/// Observations plus the twin-experiment truth when data was simulated.
struct DataSet {
    observations: Vec<DVector<f64>>,
    truth: Option<(DVector<f64>, Vec<DVector<f64>>)>,
}

/// Tag deriving the default truth seed from the main seed, so the twin
/// truth and the algorithm randomness never share streams.
const TRUTH_SEED_TAG: u64 = 0x7472_7574_68;

fn load_data(ctx: &RunContext, model: &dyn StateSpaceModel) -> Result<DataSet, CliError> {
    if let Some(sim) = &ctx.config.data.simulate {
        let truth_seed = sim
            .seed
            .unwrap_or_else(|| RngStream::new(ctx.config.seed).child(TRUTH_SEED_TAG).seed());
        let rng = RngStream::new(truth_seed);
        let truth = simulate(model, sim.steps, &rng);
        Ok(DataSet {
            observations: truth.observations.clone(),
            truth: Some((truth.initial, truth.states)),
        })
    } else {
        let path = ctx.config.data.obs_file.as_ref().expect("validated");
        let observations = read_observations(path)?;
        let q = model.obs_dim();
        if observations.iter().any(|y| y.len() != q) {
            return Err(CliError::Config(format!(
                "obs_file rows must have {q} observation columns for this model"
            )));
        }
        Ok(DataSet {
            observations,
            truth: None,
        })
    }
}

pub fn run_simulate(ctx: &RunContext) -> Result<(), CliError> {
    let started = Instant::now();
    let model = build_model(&ctx.config.model)?;
    let data = load_data(ctx, model.as_dyn())?;
    let Some((_, states)) = &data.truth else {
        return Err(CliError::Config(
            "the simulate subcommand needs a data.simulate block".into(),
        ));
    };
    ensure_dir(&ctx.out_dir)?;
    write_truth_and_obs(&ctx.out_dir, states, &data.observations)?;
    write_summary(
        &ctx.out_dir,
        &json!({
            "subcommand": "simulate",
            "seed": ctx.config.seed,
            "steps": data.observations.len(),
            "runtime_seconds": started.elapsed().as_secs_f64(),
        }),
    )
}

pub fn run_filter(ctx: &RunContext) -> Result<(), CliError> {
    let started = Instant::now();
    let model = build_model(&ctx.config.model)?;
    let data = load_data(ctx, model.as_dyn())?;
    let rng = RngStream::new(ctx.config.seed);

    let (run, label) = match algorithm(ctx)? {
        AlgorithmConfig::Bootstrap {
            particles,
            resampling,
            ess_threshold,
            store,
        } => {
            let options = FilterOptions {
                scheme: (*resampling).into(),
                policy: match ess_threshold {
                    Some(frac) => ResamplePolicy::EssBelow(*frac),
                    None => ResamplePolicy::Always,
                },
                storage: (*store).into(),
            };
            (
                run_bootstrap_filter(model.as_dyn(), &data.observations, *particles, &options, &rng)
                    .map_err(runtime_err)?,
                "bootstrap",
            )
        }
        AlgorithmConfig::Sis { particles, store } => {
            let options = FilterOptions {
                policy: ResamplePolicy::Never,
                storage: (*store).into(),
                ..FilterOptions::default()
            };
            (
                run_bootstrap_filter(model.as_dyn(), &data.observations, *particles, &options, &rng)
                    .map_err(runtime_err)?,
                "sis",
            )
        }
        AlgorithmConfig::Auxiliary {
            particles,
            resampling,
        } => {
            let lg = model.as_lg().ok_or_else(|| {
                CliError::Config("auxiliary filter requires the linear_gaussian model".into())
            })?;
            let proposal = LgOptimalProposal::new(lg).map_err(runtime_err)?;
            let options = FilterOptions {
                scheme: (*resampling).into(),
                ..FilterOptions::default()
            };
            (
                run_auxiliary_filter(
                    model.as_dyn(),
                    &data.observations,
                    *particles,
                    &proposal,
                    &options,
                    &rng,
                )
                .map_err(runtime_err)?,
                "auxiliary",
            )
        }
        other => {
            return Err(CliError::Config(format!(
                "the filter subcommand expects algorithm bootstrap, sis, or auxiliary, got `{}`",
                algorithm_name(other)
            )))
        }
    };

    ensure_dir(&ctx.out_dir)?;
    if let Some((_, states)) = &data.truth {
        write_truth_and_obs(&ctx.out_dir, states, &data.observations)?;
    }
    let d = model.as_dyn().state_dim();
    let mut header = vec!["t".to_string()];
    header.extend(indexed_columns("mean", d));
    header.extend(indexed_columns("q05", d));
    header.extend(indexed_columns("q95", d));
    header.extend(["ess".to_string(), "max_weight".to_string(), "log_lik_cum".to_string()]);
    let mut table = CsvTable::new(header);
    for s in &run.summaries {
        let mut row = vec![Cell::Int(s.t)];
        row.extend(vector_cells(&s.mean));
        row.extend(vector_cells(&s.q05));
        row.extend(vector_cells(&s.q95));
        row.push(Cell::Float(s.ess));
        row.push(Cell::Float(s.max_weight));
        row.push(Cell::Float(s.log_lik_cum));
        table.push_row(row);
    }
    table.write(&ctx.out_dir.join("filter.csv"))?;
    write_summary(
        &ctx.out_dir,
        &json!({
            "subcommand": "filter",
            "algorithm": label,
            "seed": ctx.config.seed,
            "final_log_lik": run.log_lik,
            "steps": run.summaries.len(),
            "runtime_seconds": started.elapsed().as_secs_f64(),
        }),
    )
}

pub fn run_smooth(ctx: &RunContext) -> Result<(), CliError> {
    let started = Instant::now();
    let model = build_model(&ctx.config.model)?;
    let data = load_data(ctx, model.as_dyn())?;
    let rng = RngStream::new(ctx.config.seed);
    let AlgorithmConfig::Smooth {
        particles,
        method,
        lag,
        paths,
        resampling,
    } = algorithm(ctx)?
    else {
        return Err(CliError::Config(
            "the smooth subcommand expects algorithm `smooth`".into(),
        ));
    };

    let options = FilterOptions {
        scheme: (*resampling).into(),
        policy: ResamplePolicy::Always,
        storage: Storage::Paths,
    };
    let run = run_bootstrap_filter(model.as_dyn(), &data.observations, *particles, &options, &rng)
        .map_err(runtime_err)?;
    let store = run.store.as_ref().expect("path storage requested");
    let d = model.as_dyn().state_dim();

    // Rows: s, weighted mean / quantiles of the smoothing marginal at s, and
    // the number of distinct paths supporting it.
    let mut header = vec!["s".to_string()];
    header.extend(indexed_columns("mean", d));
    header.extend(indexed_columns("q05", d));
    header.extend(indexed_columns("q95", d));
    header.push("unique_paths".to_string());
    let mut table = CsvTable::new(header);

    let label = match method {
        SmoothMethod::Kitagawa | SmoothMethod::FixedLag => {
            let lag_value = match method {
                SmoothMethod::Kitagawa => usize::MAX,
                _ => lag.expect("validated"),
            };
            let marginals = fixed_lag_marginals(store, lag_value).map_err(runtime_err)?;
            for m in &marginals {
                let particles_s = store.particles_at(m.s).map_err(runtime_err)?;
                let values: Vec<&DVector<f64>> =
                    m.indices.iter().map(|&i| &particles_s[i]).collect();
                push_weighted_row(&mut table, m.s, &values, &m.weights, m.unique_paths, d);
            }
            if matches!(method, SmoothMethod::Kitagawa) {
                "kitagawa"
            } else {
                "fixed_lag"
            }
        }
        SmoothMethod::Ffbs => {
            let weights = marginal_smoother(store, model.as_dyn()).map_err(runtime_err)?;
            for (s, w) in weights.iter().enumerate() {
                let particles_s = store.particles_at(s).map_err(runtime_err)?;
                let values: Vec<&DVector<f64>> = particles_s.iter().collect();
                let support = w.iter().filter(|&&x| x > 1e-12).count();
                push_weighted_row(&mut table, s, &values, w, support, d);
            }
            "ffbs"
        }
        SmoothMethod::Backward => {
            let n_paths = paths.expect("validated");
            let mut trajectories = Vec::with_capacity(n_paths);
            for p in 0..n_paths {
                trajectories.push(
                    backward_sample_trajectory(store, model.as_dyn(), p as u64, &rng)
                        .map_err(runtime_err)?,
                );
            }
            let w = vec![1.0 / n_paths as f64; n_paths];
            for s in 0..=store.t_max() {
                let values: Vec<&DVector<f64>> = trajectories.iter().map(|p| &p[s]).collect();
                let mut distinct: Vec<_> = values
                    .iter()
                    .map(|x| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                    .collect();
                distinct.sort();
                distinct.dedup();
                push_weighted_row(&mut table, s, &values, &w, distinct.len(), d);
            }
            "backward"
        }
    };

    ensure_dir(&ctx.out_dir)?;
    if let Some((_, states)) = &data.truth {
        write_truth_and_obs(&ctx.out_dir, states, &data.observations)?;
    }
    table.write(&ctx.out_dir.join("smooth.csv"))?;
    write_summary(
        &ctx.out_dir,
        &json!({
            "subcommand": "smooth",
            "method": label,
            "seed": ctx.config.seed,
            "final_log_lik": run.log_lik,
            "runtime_seconds": started.elapsed().as_secs_f64(),
        }),
    )
}

fn push_weighted_row(
    table: &mut CsvTable,
    s: usize,
    values: &[&DVector<f64>],
    weights: &[f64],
    unique_paths: usize,
    d: usize,
) {
    let mut mean = DVector::zeros(d);
    for (x, &w) in values.iter().zip(weights) {
        mean.axpy(w, *x, 1.0);
    }
    let mut q05 = DVector::zeros(d);
    let mut q95 = DVector::zeros(d);
    for k in 0..d {
        let mut pairs: Vec<(f64, f64)> = values
            .iter()
            .zip(weights)
            .map(|(x, &w)| (x[k], w))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        q05[k] = weighted_quantile_sorted(&pairs, 0.05);
        q95[k] = weighted_quantile_sorted(&pairs, 0.95);
    }
    let mut row = vec![Cell::Int(s)];
    row.extend(vector_cells(&mean));
    row.extend(vector_cells(&q05));
    row.extend(vector_cells(&q95));
    row.push(Cell::Int(unique_paths));
    table.push_row(row);
}

pub fn run_enkf_cmd(ctx: &RunContext) -> Result<(), CliError> {
    let started = Instant::now();
    let model = build_model(&ctx.config.model)?;
    let data = load_data(ctx, model.as_dyn())?;
    let rng = RngStream::new(ctx.config.seed);
    let AlgorithmConfig::Enkf {
        members,
        variant,
        inflation,
        taper_radius,
    } = algorithm(ctx)?
    else {
        return Err(CliError::Config(
            "the enkf subcommand expects algorithm `enkf`".into(),
        ));
    };
    let options = EnkfOptions {
        variant: match variant {
            EnkfVariantConfig::Stochastic => EnkfVariant::Stochastic,
            EnkfVariantConfig::SquareRoot => EnkfVariant::SquareRoot,
        },
        inflation: *inflation,
        taper: taper_radius.map(|radius| TaperSpec {
            radius,
            cyclic: matches!(ctx.config.model, crate::config::ModelConfig::Lorenz96 { .. }),
        }),
        ..EnkfOptions::default()
    };
    let truth_states = data.truth.as_ref().map(|(_, s)| s.as_slice());
    let run = run_enkf(
        model.as_dyn(),
        &data.observations,
        *members,
        &options,
        truth_states,
        &rng,
    )
    .map_err(runtime_err)?;

    ensure_dir(&ctx.out_dir)?;
    if let Some((_, states)) = &data.truth {
        write_truth_and_obs(&ctx.out_dir, states, &data.observations)?;
    }
    let d = model.as_dyn().state_dim();
    let mut header = vec!["t".to_string()];
    header.extend(indexed_columns("mean", d));
    header.extend(indexed_columns("spread", d));
    header.push("rmse".to_string());
    let mut table = CsvTable::new(header);
    for s in &run.steps {
        let mut row = vec![Cell::Int(s.t)];
        row.extend(vector_cells(&s.mean));
        row.extend(vector_cells(&s.spread));
        row.push(match s.rmse {
            Some(v) => Cell::Float(v),
            None => Cell::Missing,
        });
        table.push_row(row);
    }
    table.write(&ctx.out_dir.join("enkf.csv"))?;
    let mean_rmse = {
        let rmses: Vec<f64> = run.steps.iter().filter_map(|s| s.rmse).collect();
        if rmses.is_empty() {
            None
        } else {
            Some(rmses.iter().sum::<f64>() / rmses.len() as f64)
        }
    };
    write_summary(
        &ctx.out_dir,
        &json!({
            "subcommand": "enkf",
            "seed": ctx.config.seed,
            "members": members,
            "steps": run.steps.len(),
            "mean_rmse": mean_rmse,
            "runtime_seconds": started.elapsed().as_secs_f64(),
        }),
    )
}

fn build_prior(prior: &PriorConfig) -> Box<dyn ParameterPrior> {
    match prior {
        PriorConfig::Uniform { low, high } => Box::new(UniformPrior {
            low: vec![*low],
            high: vec![*high],
        }),
        PriorConfig::Gaussian { mean, sd } => Box::new(GaussianPrior {
            mean: vec![*mean],
            sd: vec![*sd],
        }),
    }
}

fn write_chain_csv(
    dir: &Path,
    samples: &[smcda::pmcmc::McmcSample],
) -> Result<(), CliError> {
    let p = samples.first().map_or(1, |s| s.theta.len());
    let mut header = vec!["iter".to_string()];
    header.extend(indexed_columns("theta", p));
    header.extend(["log_lik_hat".to_string(), "accepted".to_string()]);
    let mut table = CsvTable::new(header);
    for s in samples {
        let mut row = vec![Cell::Int(s.iter)];
        row.extend(s.theta.iter().map(|&v| Cell::Float(v)));
        row.push(if s.log_lik_hat.is_finite() {
            Cell::Float(s.log_lik_hat)
        } else {
            Cell::Missing
        });
        row.push(Cell::Int(usize::from(s.accepted)));
        table.push_row(row);
    }
    table.write(&dir.join("chain.csv"))
}

pub fn run_pmmh_cmd(ctx: &RunContext) -> Result<(), CliError> {
    let started = Instant::now();
    let model = build_model(&ctx.config.model)?;
    let data = load_data(ctx, model.as_dyn())?;
    let rng = RngStream::new(ctx.config.seed);
    let AlgorithmConfig::Pmmh {
        particles,
        iterations,
        burn_in,
        parameter,
        init,
        prior,
        kernel_scale,
    } = algorithm(ctx)?
    else {
        return Err(CliError::Config(
            "the pmmh subcommand expects algorithm `pmmh`".into(),
        ));
    };
    let prior = build_prior(prior);
    let kernel = GaussianRandomWalk {
        scales: vec![*kernel_scale],
    };
    let estimator = BootstrapLikelihood::new(
        theta_builder(&ctx.config.model, parameter),
        data.observations.clone(),
        *particles,
    );
    let chain = run_pmmh(
        vec![*init],
        *iterations,
        *burn_in,
        prior.as_ref(),
        &kernel,
        &estimator,
        false,
        &rng,
    )
    .map_err(runtime_err)?;

    ensure_dir(&ctx.out_dir)?;
    if let Some((_, states)) = &data.truth {
        write_truth_and_obs(&ctx.out_dir, states, &data.observations)?;
    }
    write_chain_csv(&ctx.out_dir, &chain.samples)?;
    write_summary(
        &ctx.out_dir,
        &json!({
            "subcommand": "pmmh",
            "parameter": parameter,
            "seed": ctx.config.seed,
            "iterations": iterations,
            "burn_in": burn_in,
            "acceptance_rate": chain.acceptance_rate,
            "filter_failures": chain.filter_failures,
            "runtime_seconds": started.elapsed().as_secs_f64(),
        }),
    )
}

pub fn run_pgibbs_cmd(ctx: &RunContext) -> Result<(), CliError> {
    let started = Instant::now();
    let model = build_model(&ctx.config.model)?;
    let data = load_data(ctx, model.as_dyn())?;
    let rng = RngStream::new(ctx.config.seed);
    let AlgorithmConfig::Pgibbs {
        particles,
        iterations,
        burn_in,
        parameter,
        init,
        prior,
        kernel_scale,
        ancestor_sampling,
    } = algorithm(ctx)?
    else {
        return Err(CliError::Config(
            "the pgibbs subcommand expects algorithm `pgibbs`".into(),
        ));
    };
    let prior = build_prior(prior);
    let builder = theta_builder(&ctx.config.model, parameter);
    let update = ThetaUpdate::RandomWalk {
        scales: vec![*kernel_scale],
    };
    let chain = run_particle_gibbs(
        vec![*init],
        *iterations,
        *burn_in,
        &update,
        prior.as_ref(),
        &builder,
        &data.observations,
        *particles,
        *ancestor_sampling,
        &rng,
    )
    .map_err(runtime_err)?;

    ensure_dir(&ctx.out_dir)?;
    if let Some((_, states)) = &data.truth {
        write_truth_and_obs(&ctx.out_dir, states, &data.observations)?;
    }
    write_chain_csv(&ctx.out_dir, &chain.samples)?;
    write_summary(
        &ctx.out_dir,
        &json!({
            "subcommand": "pgibbs",
            "parameter": parameter,
            "seed": ctx.config.seed,
            "iterations": iterations,
            "burn_in": burn_in,
            "theta_acceptance_rate": chain.acceptance_rate,
            "ancestor_sampling": ancestor_sampling,
            "runtime_seconds": started.elapsed().as_secs_f64(),
        }),
    )
}

pub fn run_tune_n(ctx: &RunContext) -> Result<(), CliError> {
    let started = Instant::now();
    let model = build_model(&ctx.config.model)?;
    let data = load_data(ctx, model.as_dyn())?;
    let rng = RngStream::new(ctx.config.seed);
    let AlgorithmConfig::TuneN {
        particles,
        replicates,
        target_variance,
    } = algorithm(ctx)?
    else {
        return Err(CliError::Config(
            "the tune-n subcommand expects algorithm `tune_n`".into(),
        ));
    };
    let estimator = BootstrapLikelihood::new(
        crate::config::identity_builder(&ctx.config.model),
        data.observations.clone(),
        *particles,
    );
    let report = tune_n(&estimator, &[], *particles, *replicates, *target_variance, &rng)
        .map_err(runtime_err)?;

    ensure_dir(&ctx.out_dir)?;
    write_summary(
        &ctx.out_dir,
        &json!({
            "subcommand": "tune-n",
            "seed": ctx.config.seed,
            "pilot_n": report.pilot_n,
            "replicates": report.replicates,
            "var_log_lik": report.var_log_lik,
            "target_variance": report.target_variance,
            "recommended_n": report.recommended_n,
            "runtime_seconds": started.elapsed().as_secs_f64(),
        }),
    )
}

fn algorithm(ctx: &RunContext) -> Result<&AlgorithmConfig, CliError> {
    ctx.config
        .algorithm
        .as_ref()
        .ok_or_else(|| CliError::Config("config is missing the algorithm block".into()))
}

fn algorithm_name(alg: &AlgorithmConfig) -> &'static str {
    match alg {
        AlgorithmConfig::Bootstrap { .. } => "bootstrap",
        AlgorithmConfig::Sis { .. } => "sis",
        AlgorithmConfig::Auxiliary { .. } => "auxiliary",
        AlgorithmConfig::Smooth { .. } => "smooth",
        AlgorithmConfig::Enkf { .. } => "enkf",
        AlgorithmConfig::Pmmh { .. } => "pmmh",
        AlgorithmConfig::Pgibbs { .. } => "pgibbs",
        AlgorithmConfig::TuneN { .. } => "tune_n",
    }
}

fn runtime_err(e: smcda::Error) -> CliError {
    CliError::Runtime(e.to_string())
}
