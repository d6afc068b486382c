//! Experiment configuration: JSON schema, validation, and model building.
//!
//! Validation happens before execution: unknown keys, missing blocks, and
//! capability mismatches (an algorithm asking for something the chosen model
//! cannot provide) are all config errors.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use smcda::pf::Storage;
use smcda::resample::ResamplingScheme;
use smcda::ssm::{
    LinearGaussian, LinearGaussianParams, Lorenz96, Lorenz96Params, StateSpaceModel,
    StochasticVolatility,
};

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub algorithm: Option<AlgorithmConfig>,
    pub data: DataConfig,
    #[serde(default)]
    pub output: Option<OutputConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Sv {
        phi: f64,
        sigma: f64,
        beta: f64,
    },
    LinearGaussian {
        phi: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        h: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
        m0: Vec<f64>,
        p0: Vec<Vec<f64>>,
    },
    Lorenz96 {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_forcing")]
        forcing: f64,
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default = "default_substeps")]
        substeps: usize,
        #[serde(default = "default_obs_sigma")]
        obs_sigma: f64,
        #[serde(default = "default_obs_stride")]
        obs_stride: usize,
    },
}

fn default_dim() -> usize {
    40
}
fn default_forcing() -> f64 {
    8.0
}
fn default_delta() -> f64 {
    0.05
}
fn default_substeps() -> usize {
    10
}
fn default_obs_sigma() -> f64 {
    1.0
}
fn default_obs_stride() -> usize {
    2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlgorithmConfig {
    Bootstrap {
        particles: usize,
        #[serde(default)]
        resampling: ResamplingConfig,
        /// Resample only when ESS drops below this fraction of N; omit to
        /// resample at every step.
        #[serde(default)]
        ess_threshold: Option<f64>,
        #[serde(default)]
        store: StorageConfig,
    },
    Sis {
        particles: usize,
        #[serde(default)]
        store: StorageConfig,
    },
    /// Auxiliary filter with the exact optimal proposal (linear-Gaussian
    /// models only).
    Auxiliary {
        particles: usize,
        #[serde(default)]
        resampling: ResamplingConfig,
    },
    Smooth {
        particles: usize,
        method: SmoothMethod,
        #[serde(default)]
        lag: Option<usize>,
        /// Number of backward-simulated trajectories (method = "backward").
        #[serde(default)]
        paths: Option<usize>,
        #[serde(default)]
        resampling: ResamplingConfig,
    },
    Enkf {
        members: usize,
        #[serde(default)]
        variant: EnkfVariantConfig,
        #[serde(default = "default_inflation")]
        inflation: f64,
        #[serde(default)]
        taper_radius: Option<f64>,
    },
    Pmmh {
        particles: usize,
        iterations: usize,
        #[serde(default)]
        burn_in: usize,
        parameter: String,
        init: f64,
        prior: PriorConfig,
        kernel_scale: f64,
    },
    Pgibbs {
        particles: usize,
        iterations: usize,
        #[serde(default)]
        burn_in: usize,
        parameter: String,
        init: f64,
        prior: PriorConfig,
        /// Scale of the random-walk Metropolis update on the complete-data
        /// posterior.
        kernel_scale: f64,
        #[serde(default)]
        ancestor_sampling: bool,
    },
    TuneN {
        particles: usize,
        #[serde(default = "default_replicates")]
        replicates: usize,
        #[serde(default = "default_target_variance")]
        target_variance: f64,
    },
}

fn default_inflation() -> f64 {
    1.0
}
fn default_replicates() -> usize {
    20
}
fn default_target_variance() -> f64 {
    1.5
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingConfig {
    #[default]
    Systematic,
    Multinomial,
}

impl From<ResamplingConfig> for ResamplingScheme {
    fn from(value: ResamplingConfig) -> Self {
        match value {
            ResamplingConfig::Systematic => ResamplingScheme::Systematic,
            ResamplingConfig::Multinomial => ResamplingScheme::Multinomial,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageConfig {
    None,
    #[default]
    Ancestry,
    Paths,
}

impl From<StorageConfig> for Storage {
    fn from(value: StorageConfig) -> Self {
        match value {
            StorageConfig::None => Storage::None,
            StorageConfig::Ancestry => Storage::Ancestry,
            StorageConfig::Paths => Storage::Paths,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SmoothMethod {
    Kitagawa,
    FixedLag,
    Ffbs,
    Backward,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum EnkfVariantConfig {
    #[default]
    Stochastic,
    SquareRoot,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    Uniform { low: f64, high: f64 },
    Gaussian { mean: f64, sd: f64 },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub obs_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub steps: usize,
    /// Truth seed; derived from the main seed when omitted.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

/// Parses and validates a config file.
pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let deserializer = &mut serde_json::Deserializer::from_str(&text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(deserializer)
        .map_err(|e| CliError::Config(format!("config key `{}`: {}", e.path(), e.inner())))?;
    validate(&config)?;
    Ok(config)
}

fn validate(config: &ExperimentConfig) -> Result<(), CliError> {
    match (&config.data.simulate, &config.data.obs_file) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "data block must set exactly one of `simulate` or `obs_file`, not both".into(),
            ))
        }
        (None, None) => {
            return Err(CliError::Config(
                "data block must set one of `simulate` or `obs_file`".into(),
            ))
        }
        _ => {}
    }
    if let Some(sim) = &config.data.simulate {
        if sim.steps == 0 {
            return Err(CliError::Config("data.simulate.steps must be >= 1".into()));
        }
    }
    if let Some(alg) = &config.algorithm {
        validate_algorithm(alg, &config.model)?;
    }
    Ok(())
}

fn validate_algorithm(alg: &AlgorithmConfig, model: &ModelConfig) -> Result<(), CliError> {
    let has_density = matches!(
        model,
        ModelConfig::Sv { .. } | ModelConfig::LinearGaussian { .. }
    );
    match alg {
        AlgorithmConfig::Bootstrap {
            particles,
            ess_threshold,
            ..
        } => {
            check_particles(*particles)?;
            if let Some(frac) = ess_threshold {
                if !(*frac > 0.0 && *frac <= 1.0) {
                    return Err(CliError::Config(format!(
                        "algorithm.ess_threshold must lie in (0, 1], got {frac}"
                    )));
                }
            }
        }
        AlgorithmConfig::Sis { particles, .. } => check_particles(*particles)?,
        AlgorithmConfig::Auxiliary { particles, .. } => {
            check_particles(*particles)?;
            if !matches!(model, ModelConfig::LinearGaussian { .. }) {
                return Err(CliError::Config(
                    "algorithm `auxiliary` uses the exact optimal proposal and requires the \
                     linear_gaussian model"
                        .into(),
                ));
            }
        }
        AlgorithmConfig::Smooth {
            particles,
            method,
            lag,
            paths,
            ..
        } => {
            check_particles(*particles)?;
            match method {
                SmoothMethod::FixedLag => {
                    if lag.is_none() {
                        return Err(CliError::Config(
                            "algorithm.lag is required for the fixed_lag smoother".into(),
                        ));
                    }
                }
                SmoothMethod::Ffbs | SmoothMethod::Backward => {
                    if !has_density {
                        return Err(CliError::Config(format!(
                            "algorithm.method `{method:?}` requires a model with a transition \
                             density (sv or linear_gaussian)"
                        )));
                    }
                    if *method == SmoothMethod::Backward && paths.unwrap_or(0) == 0 {
                        return Err(CliError::Config(
                            "algorithm.paths must be >= 1 for the backward smoother".into(),
                        ));
                    }
                }
                SmoothMethod::Kitagawa => {}
            }
        }
        AlgorithmConfig::Enkf {
            members,
            variant,
            inflation,
            taper_radius,
        } => {
            if *members < 2 {
                return Err(CliError::Config("algorithm.members must be >= 2".into()));
            }
            if matches!(model, ModelConfig::Sv { .. }) {
                return Err(CliError::Config(
                    "algorithm `enkf` requires a linear observation operator; the sv model has \
                     none"
                        .into(),
                ));
            }
            if !(*inflation >= 1.0) {
                return Err(CliError::Config(format!(
                    "algorithm.inflation must be >= 1, got {inflation}"
                )));
            }
            if let Some(r) = taper_radius {
                if !(*r > 0.0) {
                    return Err(CliError::Config(format!(
                        "algorithm.taper_radius must be > 0, got {r}"
                    )));
                }
                if *variant == EnkfVariantConfig::SquareRoot {
                    return Err(CliError::Config(
                        "algorithm.taper_radius is not supported by the square_root variant; \
                         use the stochastic variant"
                            .into(),
                    ));
                }
            }
        }
        AlgorithmConfig::Pmmh {
            particles,
            parameter,
            kernel_scale,
            ..
        } => {
            check_particles(*particles)?;
            check_parameter(parameter, model)?;
            if !(*kernel_scale > 0.0) {
                return Err(CliError::Config(format!(
                    "algorithm.kernel_scale must be > 0, got {kernel_scale}"
                )));
            }
        }
        AlgorithmConfig::Pgibbs {
            particles,
            parameter,
            kernel_scale,
            ..
        } => {
            check_particles(*particles)?;
            check_parameter(parameter, model)?;
            if !(*kernel_scale > 0.0) {
                return Err(CliError::Config(format!(
                    "algorithm.kernel_scale must be > 0, got {kernel_scale}"
                )));
            }
            if !has_density {
                return Err(CliError::Config(
                    "algorithm `pgibbs` updates parameters on the complete-data likelihood and \
                     requires a model with a transition density"
                        .into(),
                ));
            }
        }
        AlgorithmConfig::TuneN {
            particles,
            replicates,
            target_variance,
        } => {
            check_particles(*particles)?;
            if *replicates < 2 {
                return Err(CliError::Config("algorithm.replicates must be >= 2".into()));
            }
            if !(*target_variance > 0.0) {
                return Err(CliError::Config(format!(
                    "algorithm.target_variance must be > 0, got {target_variance}"
                )));
            }
        }
    }
    Ok(())
}

fn check_particles(n: usize) -> Result<(), CliError> {
    if n < 2 {
        Err(CliError::Config("algorithm.particles must be >= 2".into()))
    } else {
        Ok(())
    }
}

fn check_parameter(parameter: &str, model: &ModelConfig) -> Result<(), CliError> {
    match model {
        ModelConfig::Sv { .. } => {
            if !matches!(parameter, "phi" | "sigma" | "beta") {
                return Err(CliError::Config(format!(
                    "algorithm.parameter `{parameter}` not supported for the sv model \
                     (use phi, sigma, or beta)"
                )));
            }
        }
        ModelConfig::LinearGaussian { phi, .. } => {
            if parameter != "phi" {
                return Err(CliError::Config(format!(
                    "algorithm.parameter `{parameter}` not supported for the linear_gaussian \
                     model (use phi)"
                )));
            }
            if phi.len() != 1 {
                return Err(CliError::Config(
                    "algorithm.parameter `phi` requires a scalar (d = 1) linear_gaussian model"
                        .into(),
                ));
            }
        }
        ModelConfig::Lorenz96 { .. } => {
            return Err(CliError::Config(format!(
                "algorithm.parameter `{parameter}` not supported: the lorenz96 model has no \
                 estimable parameters in this driver"
            )));
        }
    }
    Ok(())
}

/// A constructed model, keeping the concrete type available where an
/// algorithm needs more than the trait (the auxiliary proposal, the oracle).
pub enum BuiltModel {
    Sv(StochasticVolatility),
    Lg(LinearGaussian),
    L96(Lorenz96),
}

impl BuiltModel {
    pub fn as_dyn(&self) -> &dyn StateSpaceModel {
        match self {
            BuiltModel::Sv(m) => m,
            BuiltModel::Lg(m) => m,
            BuiltModel::L96(m) => m,
        }
    }

    pub fn as_lg(&self) -> Option<&LinearGaussian> {
        match self {
            BuiltModel::Lg(m) => Some(m),
            _ => None,
        }
    }
}

pub fn build_model(config: &ModelConfig) -> Result<BuiltModel, CliError> {
    match config {
        ModelConfig::Sv { phi, sigma, beta } => Ok(BuiltModel::Sv(
            StochasticVolatility::new(*phi, *sigma, *beta).map_err(to_config_err)?,
        )),
        ModelConfig::LinearGaussian { .. } => Ok(BuiltModel::Lg(
            LinearGaussian::new(lg_params(config)?).map_err(to_config_err)?,
        )),
        ModelConfig::Lorenz96 {
            dim,
            forcing,
            delta,
            substeps,
            obs_sigma,
            obs_stride,
        } => Ok(BuiltModel::L96(
            Lorenz96::new(Lorenz96Params {
                dim: *dim,
                forcing: *forcing,
                delta: *delta,
                substeps: *substeps,
                obs_sigma: *obs_sigma,
                obs_stride: *obs_stride,
            })
            .map_err(to_config_err)?,
        )),
    }
}

/// Extracts linear-Gaussian parameters from the model block.
pub fn lg_params(config: &ModelConfig) -> Result<LinearGaussianParams, CliError> {
    let ModelConfig::LinearGaussian {
        phi,
        q,
        h,
        r,
        m0,
        p0,
    } = config
    else {
        return Err(CliError::Config(
            "this algorithm requires the linear_gaussian model".into(),
        ));
    };
    let params = LinearGaussianParams {
        phi: to_matrix(phi, "model.phi")?,
        q: to_matrix(q, "model.q")?,
        h: to_matrix(h, "model.h")?,
        r: to_matrix(r, "model.r")?,
        m0: DVector::from_vec(m0.clone()),
        p0: to_matrix(p0, "model.p0")?,
    };
    params.validate().map_err(to_config_err)?;
    Ok(params)
}

fn to_matrix(rows: &[Vec<f64>], key: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.is_empty() {
        return Err(CliError::Config(format!("{key} must not be empty")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Config(format!("{key} rows have unequal lengths")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

fn to_config_err(e: smcda::Error) -> CliError {
    CliError::Config(format!("model: {e}"))
}

/// Builds the theta-to-model closure for PMMH / particle Gibbs over a single
/// named parameter.
pub fn theta_builder(
    model: &ModelConfig,
    parameter: &str,
) -> impl Fn(&[f64]) -> smcda::Result<Box<dyn StateSpaceModel>> + Send + Sync + 'static {
    let model = model.clone();
    let parameter = parameter.to_string();
    move |theta: &[f64]| {
        let v = theta[0];
        match (&model, parameter.as_str()) {
            (ModelConfig::Sv { sigma, beta, .. }, "phi") => Ok(Box::new(
                StochasticVolatility::new(v, *sigma, *beta)?,
            )
                as Box<dyn StateSpaceModel>),
            (ModelConfig::Sv { phi, beta, .. }, "sigma") => {
                Ok(Box::new(StochasticVolatility::new(*phi, v, *beta)?))
            }
            (ModelConfig::Sv { phi, sigma, .. }, "beta") => {
                Ok(Box::new(StochasticVolatility::new(*phi, *sigma, v)?))
            }
            (ModelConfig::LinearGaussian { .. }, "phi") => {
                let mut params = lg_params(&model)
                    .map_err(|e| smcda::Error::Domain(e.to_string()))?;
                params.phi[(0, 0)] = v;
                Ok(Box::new(LinearGaussian::new(params)?))
            }
            _ => Err(smcda::Error::Domain(format!(
                "unsupported parameter `{parameter}`"
            ))),
        }
    }
}

/// The pilot parameter value for tune-n: the configured model's own value
/// of the (single) estimable parameter is irrelevant here; tuning runs the
/// filter at the configured model itself.
pub fn identity_builder(
    model: &ModelConfig,
) -> impl Fn(&[f64]) -> smcda::Result<Box<dyn StateSpaceModel>> + Send + Sync + 'static {
    let model = model.clone();
    move |_theta: &[f64]| {
        let built = build_model(&model).map_err(|e| smcda::Error::Domain(e.to_string()))?;
        Ok(match built {
            BuiltModel::Sv(m) => Box::new(m) as Box<dyn StateSpaceModel>,
            BuiltModel::Lg(m) => Box::new(m),
            BuiltModel::L96(m) => Box::new(m),
        })
    }
}
