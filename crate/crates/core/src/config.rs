//! Experiment configuration: one TOML file drives a run.
//!
//! Unknown keys are rejected rather than ignored — a typo like `cv.alpha`
//! should stop the run, not silently fall back to a default. Every default
//! that *is* applied gets logged and recorded on the parsed config, so a run
//! log always shows the full effective configuration.
//!
//! ```toml
//! [target]
//! type = "gaussian"        # gaussian | logistic | chain
//! dim = 2
//!
//! [estimator]
//! k = 50
//! m = 500
//! r = 32
//!
//! [cv]
//! approach = "empirical"   # none | empirical | bound | both
//! ```
//!
//! Relative `data_path`s are resolved against the directory containing the
//! config file.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::cv::CvApproach;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("{key}: {message}")]
    Invalid { key: &'static str, message: String },
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, message: message.into() }
}

/// What the chains target. The variants carry only what that target kind
/// actually uses; mixing keys across kinds is a config error, not a silently
/// dropped value.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    /// Standard normal in `dim` dimensions.
    Gaussian { dim: usize },
    /// Bayesian logistic regression on a design matrix loaded from
    /// `data_path`, with an isotropic normal prior.
    Logistic { dim: usize, data_path: PathBuf, prior_variance: f64 },
    /// Finite-state chain loaded from a plain-text matrix file, coupled
    /// synthetically with per-step meeting probability `meet_prob`.
    Chain { data_path: PathBuf, meet_prob: f64 },
}

impl TargetSpec {
    /// Coordinate count of the state vector handed to integrands.
    pub fn coordinates(&self) -> usize {
        match self {
            TargetSpec::Gaussian { dim } | TargetSpec::Logistic { dim, .. } => *dim,
            TargetSpec::Chain { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Rwm,
    Mala,
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelKind::Rwm => "rwm",
            KernelKind::Mala => "mala",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSection {
    pub kind: KernelKind,
    /// `None` means the per-kind dimension scaling is applied when the
    /// kernel is built (2.38/√d for RWM, d^{−1/6} for MALA).
    pub step_size: Option<f64>,
    pub max_iterations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimatorSection {
    pub k: usize,
    pub m: usize,
    pub r: usize,
}

/// Which control-variate strategies to run alongside the plain estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvChoice {
    None,
    Empirical,
    Bound,
    Both,
}

impl CvChoice {
    pub fn is_enabled(&self) -> bool {
        !matches!(self, CvChoice::None)
    }

    pub fn approaches(&self) -> Vec<CvApproach> {
        match self {
            CvChoice::None => vec![],
            CvChoice::Empirical => vec![CvApproach::Empirical],
            CvChoice::Bound => vec![CvApproach::Bound],
            CvChoice::Both => vec![CvApproach::Empirical, CvApproach::Bound],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvSection {
    pub choice: CvChoice,
    pub eta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub bandwidth: f64,
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub root_seed: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
}

/// Inputs for the bound-certification suite; only meaningful for chain
/// targets, where every premise has an exact counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificationSection {
    pub eta: f64,
    /// Integrand value per state.
    pub h: Vec<f64>,
    pub t_max: usize,
    pub n_starts: Vec<usize>,
    pub n_prime_max: usize,
    pub n_mc: usize,
    /// Replicates behind the empirical σ(h) in the main-bound check.
    pub replicates: usize,
    /// Multiplier applied to the exact contraction rate before certifying;
    /// 1 certifies the true constants, < 1 is deliberate falsification.
    pub delta_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub target: TargetSpec,
    pub kernel: KernelSection,
    pub estimator: EstimatorSection,
    pub cv: CvSection,
    pub run: RunSection,
    pub certification: Option<CertificationSection>,
    /// Human-readable record of every default that was filled in.
    pub defaults_applied: Vec<String>,
}

// ---------------------------------------------------------------------------
// Raw deserialization layer: everything optional, nothing validated yet.
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    target: RawTarget,
    kernel: Option<RawKernel>,
    estimator: RawEstimator,
    cv: Option<RawCv>,
    run: Option<RawRun>,
    certification: Option<RawCertification>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTarget {
    #[serde(rename = "type")]
    kind: String,
    dim: Option<usize>,
    data_path: Option<PathBuf>,
    prior_variance: Option<f64>,
    meet_prob: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawKernel {
    kind: Option<String>,
    step_size: Option<f64>,
    max_iterations: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEstimator {
    k: usize,
    m: usize,
    #[serde(alias = "R")]
    r: usize,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawCv {
    approach: Option<String>,
    eta: Option<f64>,
    lambda: Option<f64>,
    gamma: Option<f64>,
    bandwidth: Option<f64>,
    ridge: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawRun {
    root_seed: Option<u64>,
    workers: Option<usize>,
    out_dir: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCertification {
    eta: f64,
    h: Vec<f64>,
    t_max: Option<usize>,
    n_starts: Option<Vec<usize>>,
    n_prime_max: Option<usize>,
    n_mc: Option<usize>,
    replicates: Option<usize>,
    delta_scale: Option<f64>,
}

/// Records a filled-in default and returns the value, so resolution sites
/// stay one-liners.
struct Defaults(Vec<String>);

impl Defaults {
    fn apply<T: Copy + std::fmt::Display>(&mut self, key: &str, opt: Option<T>, default: T) -> T {
        match opt {
            Some(v) => v,
            None => {
                self.0.push(format!("{key} = {default}"));
                default
            }
        }
    }
}

fn positive(key: &'static str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("must be positive and finite, got {v}")))
    }
}

fn non_negative(key: &'static str, v: f64) -> Result<f64, ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("must be ≥ 0 and finite, got {v}")))
    }
}

fn forbid<T>(key: &'static str, opt: &Option<T>, target_kind: &str) -> Result<(), ConfigError> {
    if opt.is_some() {
        Err(invalid(key, format!("not meaningful for target type \"{target_kind}\"")))
    } else {
        Ok(())
    }
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig, ConfigError> {
    let mut defaults = Defaults(Vec::new());

    let target = match raw.target.kind.as_str() {
        "gaussian" => {
            forbid("target.data_path", &raw.target.data_path, "gaussian")?;
            forbid("target.prior_variance", &raw.target.prior_variance, "gaussian")?;
            forbid("target.meet_prob", &raw.target.meet_prob, "gaussian")?;
            let dim = raw
                .target
                .dim
                .ok_or_else(|| invalid("target.dim", "required for gaussian targets"))?;
            if dim == 0 {
                return Err(invalid("target.dim", "must be at least 1"));
            }
            TargetSpec::Gaussian { dim }
        }
        "logistic" => {
            forbid("target.meet_prob", &raw.target.meet_prob, "logistic")?;
            let dim = raw
                .target
                .dim
                .ok_or_else(|| invalid("target.dim", "required for logistic targets"))?;
            if dim == 0 {
                return Err(invalid("target.dim", "must be at least 1"));
            }
            let data_path = raw
                .target
                .data_path
                .ok_or_else(|| invalid("target.data_path", "required for logistic targets"))?;
            let prior_variance = positive(
                "target.prior_variance",
                defaults.apply("target.prior_variance", raw.target.prior_variance, 10.0),
            )?;
            TargetSpec::Logistic { dim, data_path, prior_variance }
        }
        "chain" => {
            forbid("target.prior_variance", &raw.target.prior_variance, "chain")?;
            forbid("target.dim", &raw.target.dim, "chain")?;
            let data_path = raw
                .target
                .data_path
                .ok_or_else(|| invalid("target.data_path", "required for chain targets"))?;
            let meet_prob = raw
                .target
                .meet_prob
                .ok_or_else(|| invalid("target.meet_prob", "required for chain targets"))?;
            if !(meet_prob > 0.0 && meet_prob <= 1.0) {
                return Err(invalid(
                    "target.meet_prob",
                    format!("must lie in (0, 1], got {meet_prob}"),
                ));
            }
            TargetSpec::Chain { data_path, meet_prob }
        }
        other => {
            return Err(invalid(
                "target.type",
                format!("unknown target type \"{other}\" (expected gaussian, logistic or chain)"),
            ))
        }
    };

    let raw_kernel = raw.kernel.unwrap_or_default();
    let kind = match defaults.apply("kernel.kind", raw_kernel.kind.as_deref(), "rwm") {
        "rwm" => KernelKind::Rwm,
        "mala" => KernelKind::Mala,
        other => {
            return Err(invalid(
                "kernel.kind",
                format!("unknown kernel \"{other}\" (expected rwm or mala)"),
            ))
        }
    };
    if let Some(s) = raw_kernel.step_size {
        positive("kernel.step_size", s)?;
    } else {
        defaults.0.push(format!("kernel.step_size = {kind} dimension scaling"));
    }
    let max_iterations =
        defaults.apply("kernel.max_iterations", raw_kernel.max_iterations, 100_000);
    if max_iterations == 0 {
        return Err(invalid("kernel.max_iterations", "must be at least 1"));
    }
    let kernel =
        KernelSection { kind, step_size: raw_kernel.step_size, max_iterations };

    let estimator =
        EstimatorSection { k: raw.estimator.k, m: raw.estimator.m, r: raw.estimator.r };
    if estimator.m < estimator.k {
        return Err(invalid(
            "estimator.m",
            format!("must satisfy m ≥ k, got m = {} with k = {}", estimator.m, estimator.k),
        ));
    }
    if estimator.r == 0 {
        return Err(invalid("estimator.r", "must be at least 1"));
    }

    let raw_cv = raw.cv.unwrap_or_default();
    let choice = match defaults.apply("cv.approach", raw_cv.approach.as_deref(), "none") {
        "none" => CvChoice::None,
        "empirical" => CvChoice::Empirical,
        "bound" => CvChoice::Bound,
        "both" => CvChoice::Both,
        other => {
            return Err(invalid(
                "cv.approach",
                format!("unknown approach \"{other}\" (expected none, empirical, bound or both)"),
            ))
        }
    };
    let cv = CvSection {
        choice,
        eta: positive("cv.eta", defaults.apply("cv.eta", raw_cv.eta, 0.1))?,
        lambda: non_negative("cv.lambda", defaults.apply("cv.lambda", raw_cv.lambda, 1e-3))?,
        gamma: positive("cv.gamma", defaults.apply("cv.gamma", raw_cv.gamma, 1e3))?,
        bandwidth: positive(
            "cv.bandwidth",
            defaults.apply("cv.bandwidth", raw_cv.bandwidth, 1.0),
        )?,
        ridge: non_negative("cv.ridge", defaults.apply("cv.ridge", raw_cv.ridge, 1e-6))?,
    };
    if choice.is_enabled() {
        if estimator.r < 4 {
            return Err(invalid(
                "estimator.r",
                format!(
                    "control variates need R ≥ 4 (half to fit on, at least two to estimate \
                     variance from), got {}",
                    estimator.r
                ),
            ));
        }
        if matches!(target, TargetSpec::Chain { .. }) {
            return Err(invalid(
                "cv.approach",
                "control variates need a differentiable target; chain targets have no score",
            ));
        }
    }

    let raw_run = raw.run.unwrap_or_default();
    let run = RunSection {
        root_seed: defaults.apply("run.root_seed", raw_run.root_seed, 0),
        workers: defaults.apply("run.workers", raw_run.workers, 1),
        out_dir: raw_run.out_dir.unwrap_or_else(|| {
            defaults.0.push("run.out_dir = out".into());
            PathBuf::from("out")
        }),
    };
    if run.workers == 0 {
        return Err(invalid("run.workers", "must be at least 1"));
    }

    let certification = match raw.certification {
        None => None,
        Some(c) => {
            if !matches!(target, TargetSpec::Chain { .. }) {
                return Err(invalid(
                    "certification",
                    "certification needs a chain target with exact premises",
                ));
            }
            positive("certification.eta", c.eta)?;
            if c.h.is_empty() {
                return Err(invalid("certification.h", "needs one value per state"));
            }
            let t_max = defaults.apply("certification.t_max", c.t_max, 20);
            let n_starts = c.n_starts.unwrap_or_else(|| {
                defaults.0.push("certification.n_starts = [0, 2, 5]".into());
                vec![0, 2, 5]
            });
            let n_prime_max = defaults.apply("certification.n_prime_max", c.n_prime_max, 30);
            if let Some(&bad) = n_starts.iter().find(|&&n| n >= n_prime_max) {
                return Err(invalid(
                    "certification.n_starts",
                    format!("start {bad} leaves no n' ≤ n_prime_max = {n_prime_max}"),
                ));
            }
            let n_mc = defaults.apply("certification.n_mc", c.n_mc, 100_000);
            if n_mc < 2 {
                return Err(invalid("certification.n_mc", "must be at least 2"));
            }
            let replicates = defaults.apply("certification.replicates", c.replicates, 100_000);
            if replicates < 2 {
                return Err(invalid("certification.replicates", "must be at least 2"));
            }
            let delta_scale =
                positive("certification.delta_scale", defaults.apply(
                    "certification.delta_scale",
                    c.delta_scale,
                    1.0,
                ))?;
            Some(CertificationSection {
                eta: c.eta,
                h: c.h,
                t_max,
                n_starts,
                n_prime_max,
                n_mc,
                replicates,
                delta_scale,
            })
        }
    };

    Ok(ExperimentConfig {
        target,
        kernel,
        estimator,
        cv,
        run,
        certification,
        defaults_applied: defaults.0,
    })
}

fn resolve_paths(config: &mut ExperimentConfig, base: &Path) {
    let rebase = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    match &mut config.target {
        TargetSpec::Logistic { data_path, .. } | TargetSpec::Chain { data_path, .. } => {
            rebase(data_path)
        }
        TargetSpec::Gaussian { .. } => {}
    }
}

/// Parses and validates a config from TOML text. `base` anchors relative
/// data paths (for a file this is its parent directory).
pub fn parse_config_str(text: &str, base: &Path) -> Result<ExperimentConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
        path: base.join("<inline>"),
        source: Box::new(source),
    })?;
    let mut config = resolve(raw)?;
    resolve_paths(&mut config, base);
    Ok(config)
}

/// Reads, parses and validates a config file, logging every applied default.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let raw: RawConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source: Box::new(source),
    })?;
    let mut config = resolve(raw)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    resolve_paths(&mut config, base);
    for line in &config.defaults_applied {
        log::info!("config default applied: {line}");
    }
    Ok(config)
}
