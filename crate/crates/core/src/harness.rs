//! Config-driven orchestration: the replicate/fit/estimate pipeline behind
//! `run`, the certification suite behind `certify`, and the smaller
//! `meeting-times` and `fit-cv` entry points.
//!
//! The experiment protocol, for each coordinate h_i(x) = x_i:
//!
//! * simulate R coupled replicates once, evaluating every coordinate and
//!   (when control variates are on) every score component in the same pass;
//! * fit θ per coordinate and approach on the first ⌊R/2⌋ replicates;
//! * report estimates for every strategy on the remaining replicates only.
//!
//! The split is what keeps the reported estimates unbiased: an estimate that
//! helped choose θ never contributes to a reported π̂(h). Because the
//! estimator is linear in its integrand, the with-CV estimates on the second
//! half are exact linear combinations of component estimates from the single
//! simulation pass — every strategy therefore shares replicates and seeds,
//! and variance-reduction factors compare like with like.
//!
//! Replicate seeds are derived as seed(i) = splitmix-mix(root_seed, i), and
//! results land in index-addressed slots, so reports are byte-identical for
//! any worker count.

use std::ops::Range;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::bound::{
    bound_rhs, certify_appendix_chain, certify_main_bound, AppendixGrid, BoundConstants,
    BoundError, CertificationReport, CheckRow, ExactPremises,
};
use crate::config::{
    CertificationSection, CvChoice, ExperimentConfig, KernelKind, TargetSpec,
};
use crate::coupling::{
    CoupledKernel, CoupledMala, CoupledRwm, CoupledState, CoupledTrajectory, KernelConfig,
    KernelError,
};
use crate::cv::{fit_cv_bound, fit_cv_empirical, CvApproach, CvError, CvFitReport};
use crate::discrete::{
    exact_d_bound_decomposition, exact_lambda, exact_moment_bound, exact_step_moments,
    make_synthetic_coupling, DBoundDecomposition, DiscreteError, FiniteChain, StateEmbedding,
};
use crate::estimator::{
    pi_hat, run_replicates, sigma_hat_full, EstimateBatch, EstimatorError, ReplicateRecord,
    UnbiasedEstimate,
};
use crate::rkhs::{KernelSpec, RkhsError};
use crate::rng::{derive_seed, stream, RngStream};
use crate::target::{make_gaussian, make_logistic_regression, RegressionData, TargetError, TargetModel};

/// Convergence horizon for the exact stationary-law computations (λ, D);
/// chains that have not mixed by then fail with the residual TV reported.
const LAW_HORIZON: usize = 20_000;
/// States harvested per fitting trajectory to approximate π for the
/// bound-minimising CV fit.
const PI_SAMPLES_PER_REPLICATE: usize = 8;
/// Initial-distribution sample count for the same objective's x₀ term.
const X0_SAMPLES: usize = 256;
/// Reserved stream indices so auxiliary draws never collide with replicate
/// streams (replicate i uses index i).
const AUX_STREAM: u64 = u64::MAX;
const CERT_APPENDIX_STREAM: u64 = u64::MAX - 1;
const CERT_SIGMA_STREAM: u64 = u64::MAX - 2;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Misuse of an otherwise valid config (e.g. `fit-cv` with cv disabled);
    /// the CLI treats this like a config error.
    #[error("{0}")]
    Usage(String),
    #[error(
        "{} of {} replicates did not meet within max_iterations; failing indices {:?}",
        .indices.len(), .total, .indices
    )]
    NotMet {
        indices: Vec<usize>,
        total: usize,
        /// `(replicate, tau)` for the replicates that did meet, so partial
        /// meeting-time output can still be flushed.
        partial: Vec<(usize, usize)>,
    },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Discrete(#[from] DiscreteError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Cv(#[from] CvError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Rkhs(#[from] RkhsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub replicate: usize,
    pub coordinate: usize,
    pub strategy: &'static str,
    pub estimate: f64,
    pub tau: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub coordinate: usize,
    pub strategy: &'static str,
    pub mean: f64,
    pub variance: f64,
    /// Replicate-variance ratio of the plain estimator to this strategy on
    /// the shared second-half replicates; 1 for the plain estimator itself.
    pub vr_factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvFitRow {
    pub coordinate: usize,
    pub approach: &'static str,
    pub objective_before: f64,
    pub objective_after: f64,
    pub theta_norm: f64,
}

#[derive(Debug)]
pub struct RunReport {
    /// One row per (coordinate, strategy, estimation replicate), ordered by
    /// coordinate, then strategy, then replicate.
    pub rows: Vec<EstimateRow>,
    pub summaries: Vec<SummaryRow>,
    pub cv_fits: Vec<CvFitRow>,
    /// τ for every simulated replicate, fitting half included.
    pub meeting_times: Vec<usize>,
    pub fitting_replicates: Range<usize>,
    pub estimation_replicates: Range<usize>,
    pub wall_clock: Duration,
}

impl RunReport {
    /// (min, median, max) of the meeting times.
    pub fn tau_summary(&self) -> Option<(usize, usize, usize)> {
        if self.meeting_times.is_empty() {
            return None;
        }
        let mut sorted = self.meeting_times.clone();
        sorted.sort_unstable();
        Some((sorted[0], sorted[sorted.len() / 2], sorted[sorted.len() - 1]))
    }
}

/// One fitted control variate, with the full coefficient vector (the CSV row
/// only carries its norm).
#[derive(Debug)]
pub struct FittedCv {
    pub coordinate: usize,
    pub approach: CvApproach,
    pub report: CvFitReport,
}

/// Everything `certify` needs to print and persist.
#[derive(Debug)]
pub struct CertificationOutcome {
    pub report: CertificationReport,
    pub consts: BoundConstants,
    pub decomposition: DBoundDecomposition,
    /// Right-hand side of the headline variance bound.
    pub rhs: f64,
    /// Empirical σ(h) from the k = m = 0 replicates.
    pub sigma_hat: f64,
}

fn strategy_label(approach: CvApproach) -> &'static str {
    match approach {
        CvApproach::Empirical => "cv-empirical",
        CvApproach::Bound => "cv-bound",
    }
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))
}

fn build_model(target: &TargetSpec) -> Result<Box<dyn TargetModel>, HarnessError> {
    match target {
        TargetSpec::Gaussian { dim } => {
            let model = make_gaussian(
                vec![0.0; *dim],
                nalgebra::DMatrix::identity(*dim, *dim),
            )?;
            Ok(Box::new(model))
        }
        TargetSpec::Logistic { dim, data_path, prior_variance } => {
            let data = RegressionData::from_csv(data_path)?;
            if data.p() != *dim {
                return Err(HarnessError::Usage(format!(
                    "target.dim = {} but {} has {} feature columns",
                    dim,
                    data_path.display(),
                    data.p()
                )));
            }
            Ok(Box::new(make_logistic_regression(data, *prior_variance)?))
        }
        TargetSpec::Chain { .. } => unreachable!("chain targets are built elsewhere"),
    }
}

/// RWM or MALA over a model, behind one type so the pipeline below is
/// monomorphic per target family.
enum ModelKernel<'a> {
    Rwm(CoupledRwm<'a, dyn TargetModel + 'a>),
    Mala(CoupledMala<'a, dyn TargetModel + 'a>),
}

impl<'a> ModelKernel<'a> {
    fn build(
        model: &'a dyn TargetModel,
        kind: KernelKind,
        step_size: Option<f64>,
    ) -> Result<Self, HarnessError> {
        let dim = model.dim();
        let config = match (kind, step_size) {
            (_, Some(s)) => KernelConfig::new(s)?,
            (KernelKind::Rwm, None) => KernelConfig::default_rwm(dim),
            (KernelKind::Mala, None) => KernelConfig::default_mala(dim),
        };
        Ok(match kind {
            KernelKind::Rwm => ModelKernel::Rwm(CoupledRwm::new(model, config)),
            KernelKind::Mala => ModelKernel::Mala(CoupledMala::new(model, config)),
        })
    }
}

impl CoupledKernel for ModelKernel<'_> {
    fn dim(&self) -> usize {
        match self {
            ModelKernel::Rwm(k) => k.dim(),
            ModelKernel::Mala(k) => k.dim(),
        }
    }

    fn step(&self, x: &[f64], rng: &mut RngStream) -> Vec<f64> {
        match self {
            ModelKernel::Rwm(k) => k.step(x, rng),
            ModelKernel::Mala(k) => k.step(x, rng),
        }
    }

    fn coupled_step(&self, state: &CoupledState, rng: &mut RngStream) -> CoupledState {
        match self {
            ModelKernel::Rwm(k) => k.coupled_step(state, rng),
            ModelKernel::Mala(k) => k.coupled_step(state, rng),
        }
    }
}

/// Runs the full experiment described by `cfg` and assembles the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let pool = build_pool(cfg.run.workers)?;
    pool.install(|| run_experiment_inner(cfg))
}

fn run_experiment_inner(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let started = Instant::now();
    match &cfg.target {
        TargetSpec::Chain { data_path, meet_prob } => {
            let chain = FiniteChain::from_file(data_path)?;
            let kernel = make_synthetic_coupling(&chain, *meet_prob)?;
            let init = |rng: &mut RngStream| chain.sample_init(rng);
            run_pipeline(cfg, &kernel, &init, None, 1, started)
        }
        _ => {
            let model = build_model(&cfg.target)?;
            let dim = model.dim();
            let kernel = ModelKernel::build(model.as_ref(), cfg.kernel.kind, cfg.kernel.step_size)?;
            let init = move |rng: &mut RngStream| -> Vec<f64> {
                (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
            };
            run_pipeline(cfg, &kernel, &init, Some(model.as_ref()), dim, started)
        }
    }
}

/// H is linear in its integrand, so an estimate of h − θᵀscore is the same
/// linear combination of the already-computed component estimates. Both parts
/// combine separately so the `value = mcmc + correction` invariant survives.
fn combine_linear(
    z: &UnbiasedEstimate,
    score_estimates: impl Iterator<Item = UnbiasedEstimate>,
    theta: &[f64],
) -> UnbiasedEstimate {
    let mut mcmc = z.mcmc_part;
    let mut corr = z.correction_part;
    for (t, s) in theta.iter().zip(score_estimates) {
        mcmc -= t * s.mcmc_part;
        corr -= t * s.correction_part;
    }
    UnbiasedEstimate {
        value: mcmc + corr,
        mcmc_part: mcmc,
        correction_part: corr,
        tau: z.tau,
        k: z.k,
        m: z.m,
    }
}

fn simulate<K, I>(
    cfg: &ExperimentConfig,
    kernel: &K,
    init: &I,
    model: Option<&dyn TargetModel>,
    coords: usize,
    want_pi_samples: bool,
) -> Result<Vec<ReplicateRecord<Vec<Vec<f64>>>>, HarnessError>
where
    K: CoupledKernel + ?Sized,
    I: Fn(&mut RngStream) -> Vec<f64> + Sync,
{
    let est = cfg.estimator;
    let cv_on = cfg.cv.choice.is_enabled();
    let q = coords + if cv_on { model.map_or(0, |m| m.dim()) } else { 0 };
    let h_vec = |x: &[f64]| -> Vec<f64> {
        let mut v = Vec::with_capacity(q);
        v.extend_from_slice(&x[..coords]);
        if cv_on {
            if let Some(m) = model {
                v.extend(m.score(x));
            }
        }
        v
    };
    let extract = |traj: &CoupledTrajectory| -> Vec<Vec<f64>> {
        if !want_pi_samples {
            return Vec::new();
        }
        let hi = est.m.min(traj.xs.len() - 1);
        let lo = est.k.min(hi);
        let stride = (hi - lo + 1).div_ceil(PI_SAMPLES_PER_REPLICATE).max(1);
        (lo..=hi).step_by(stride).map(|t| traj.xs[t].clone()).collect()
    };
    let results = run_replicates(
        kernel,
        init,
        &h_vec,
        q,
        est.k,
        est.m,
        est.r,
        cfg.run.root_seed,
        cfg.kernel.max_iterations,
        &extract,
    );
    let mut records = Vec::with_capacity(est.r);
    let mut not_met = Vec::new();
    let mut partial = Vec::new();
    for (idx, res) in results.into_iter().enumerate() {
        match res {
            Ok(rec) => {
                partial.push((idx, rec.tau));
                records.push(rec);
            }
            Err(EstimatorError::Kernel(KernelError::NotMet { .. })) => not_met.push(idx),
            Err(other) => return Err(other.into()),
        }
    }
    if !not_met.is_empty() {
        return Err(HarnessError::NotMet { indices: not_met, total: est.r, partial });
    }
    Ok(records)
}

fn run_pipeline<K, I>(
    cfg: &ExperimentConfig,
    kernel: &K,
    init: &I,
    model: Option<&dyn TargetModel>,
    coords: usize,
    started: Instant,
) -> Result<RunReport, HarnessError>
where
    K: CoupledKernel + ?Sized,
    I: Fn(&mut RngStream) -> Vec<f64> + Sync,
{
    let est = cfg.estimator;
    let approaches = cfg.cv.choice.approaches();
    let cv_on = !approaches.is_empty();
    let want_bound = approaches.contains(&CvApproach::Bound);
    let records = simulate(cfg, kernel, init, model, coords, want_bound)?;

    let fit_count = if cv_on { est.r / 2 } else { 0 };
    let meeting_times: Vec<usize> = records.iter().map(|rec| rec.tau).collect();

    let slice_batch = |component: usize, range: Range<usize>| EstimateBatch {
        estimates: records[range].iter().map(|rec| rec.estimates[component]).collect(),
        k: est.k,
        m: est.m,
        h_label: format!("h{component}"),
    };

    // Shared inputs for the bound-minimising fit: π approximated by states
    // harvested from the fitting trajectories, π₀ by fresh init draws.
    let bound_inputs = if want_bound {
        let pi_samples: Vec<Vec<f64>> = records[..fit_count]
            .iter()
            .flat_map(|rec| rec.extra.iter().cloned())
            .collect();
        let mut rng = stream(derive_seed(cfg.run.root_seed, AUX_STREAM), 0);
        let x0_samples: Vec<Vec<f64>> = (0..X0_SAMPLES).map(|_| init(&mut rng)).collect();
        // Only η, λ and γ drive the CV objective; the tail fields are unused.
        let consts = BoundConstants {
            eta: cfg.cv.eta,
            tail_c: 1.0,
            tail_delta: 0.5,
            moment_bound: 0.0,
            tv_sup: cfg.cv.lambda,
            gamma: cfg.cv.gamma,
        };
        let kspec = KernelSpec::new(cfg.cv.bandwidth)?;
        Some((pi_samples, x0_samples, consts, kspec))
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut cv_fits = Vec::new();

    for coordinate in 0..coords {
        let no_cv = slice_batch(coordinate, fit_count..est.r);
        let no_cv_variance = variance_or_nan(&no_cv);
        push_strategy_rows(&mut rows, &no_cv, coordinate, "no-cv", fit_count);
        summaries.push(SummaryRow {
            coordinate,
            strategy: "no-cv",
            mean: pi_hat(&no_cv)?,
            variance: no_cv_variance,
            vr_factor: 1.0,
        });
        if !cv_on {
            continue;
        }
        let model = model.expect("config validation requires a model for cv");
        let d = model.dim();
        let fit_h = slice_batch(coordinate, 0..fit_count);
        let score_fit: Vec<EstimateBatch> =
            (0..d).map(|j| slice_batch(coords + j, 0..fit_count)).collect();
        // Fitted even when only the bound approach is requested: it is the
        // search's starting point.
        let empirical = fit_cv_empirical(&fit_h, &score_fit)?;
        for &approach in &approaches {
            let report = match approach {
                CvApproach::Empirical => empirical.clone(),
                CvApproach::Bound => {
                    let (pi_samples, x0_samples, consts, kspec) =
                        bound_inputs.as_ref().expect("built when bound is requested");
                    fit_cv_bound(
                        model,
                        &|x: &[f64]| x[coordinate],
                        &empirical.theta,
                        pi_samples,
                        x0_samples,
                        consts,
                        kspec,
                        cfg.cv.ridge,
                    )?
                }
            };
            let strategy = strategy_label(approach);
            let theta = report.theta.theta();
            let cv_batch = EstimateBatch {
                estimates: records[fit_count..est.r]
                    .iter()
                    .map(|rec| {
                        combine_linear(
                            &rec.estimates[coordinate],
                            (0..d).map(|j| rec.estimates[coords + j]),
                            theta,
                        )
                    })
                    .collect(),
                k: est.k,
                m: est.m,
                h_label: format!("h{coordinate}-{strategy}"),
            };
            push_strategy_rows(&mut rows, &cv_batch, coordinate, strategy, fit_count);
            let cv_variance = variance_or_nan(&cv_batch);
            summaries.push(SummaryRow {
                coordinate,
                strategy,
                mean: pi_hat(&cv_batch)?,
                variance: cv_variance,
                vr_factor: vr_from_variances(no_cv_variance, cv_variance),
            });
            cv_fits.push(CvFitRow {
                coordinate,
                approach: strategy,
                objective_before: report.objective_before,
                objective_after: report.objective_after,
                theta_norm: report.theta.norm(),
            });
        }
    }

    Ok(RunReport {
        rows,
        summaries,
        cv_fits,
        meeting_times,
        fitting_replicates: 0..fit_count,
        estimation_replicates: fit_count..est.r,
        wall_clock: started.elapsed(),
    })
}

fn push_strategy_rows(
    rows: &mut Vec<EstimateRow>,
    batch: &EstimateBatch,
    coordinate: usize,
    strategy: &'static str,
    first_replicate: usize,
) {
    for (offset, e) in batch.estimates.iter().enumerate() {
        rows.push(EstimateRow {
            replicate: first_replicate + offset,
            coordinate,
            strategy,
            estimate: e.value,
            tau: e.tau,
        });
    }
}

fn variance_or_nan(batch: &EstimateBatch) -> f64 {
    if batch.r() >= 2 {
        sigma_hat_full(batch).expect("two or more replicates")
    } else {
        f64::NAN
    }
}

fn vr_from_variances(no_cv: f64, cv: f64) -> f64 {
    if no_cv == 0.0 && cv == 0.0 {
        1.0
    } else if cv == 0.0 {
        f64::INFINITY
    } else {
        no_cv / cv
    }
}

/// Fits control variates on the first ⌊R/2⌋ replicates and stops there —
/// the `fit-cv` subcommand. The fitting replicates use the same seeds they
/// would in a full run.
pub fn run_fit_cv(cfg: &ExperimentConfig) -> Result<Vec<FittedCv>, HarnessError> {
    let approaches = cfg.cv.choice.approaches();
    if approaches.is_empty() {
        return Err(HarnessError::Usage(
            "cv.approach is \"none\"; nothing to fit".into(),
        ));
    }
    let pool = build_pool(cfg.run.workers)?;
    pool.install(|| {
        let model = build_model(&cfg.target)?;
        let dim = model.dim();
        let kernel = ModelKernel::build(model.as_ref(), cfg.kernel.kind, cfg.kernel.step_size)?;
        let init = move |rng: &mut RngStream| -> Vec<f64> {
            (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let mut fit_cfg = cfg.clone();
        fit_cfg.estimator.r = cfg.estimator.r / 2;
        let want_bound = approaches.contains(&CvApproach::Bound);
        let records =
            simulate(&fit_cfg, &kernel, &init, Some(model.as_ref()), dim, want_bound)?;
        let fit_count = records.len();
        let est = cfg.estimator;

        let slice_batch = |component: usize| EstimateBatch {
            estimates: records.iter().map(|rec| rec.estimates[component]).collect(),
            k: est.k,
            m: est.m,
            h_label: format!("h{component}"),
        };
        let bound_inputs = if want_bound {
            let pi_samples: Vec<Vec<f64>> =
                records.iter().flat_map(|rec| rec.extra.iter().cloned()).collect();
            let mut rng = stream(derive_seed(cfg.run.root_seed, AUX_STREAM), 0);
            let x0_samples: Vec<Vec<f64>> = (0..X0_SAMPLES).map(|_| init(&mut rng)).collect();
            let consts = BoundConstants {
                eta: cfg.cv.eta,
                tail_c: 1.0,
                tail_delta: 0.5,
                moment_bound: 0.0,
                tv_sup: cfg.cv.lambda,
                gamma: cfg.cv.gamma,
            };
            let kspec = KernelSpec::new(cfg.cv.bandwidth)?;
            Some((pi_samples, x0_samples, consts, kspec))
        } else {
            None
        };

        let _ = fit_count;
        let mut fits = Vec::new();
        for coordinate in 0..dim {
            let fit_h = slice_batch(coordinate);
            let score_fit: Vec<EstimateBatch> = (0..dim).map(|j| slice_batch(dim + j)).collect();
            let empirical = fit_cv_empirical(&fit_h, &score_fit)?;
            for &approach in &approaches {
                let report = match approach {
                    CvApproach::Empirical => empirical.clone(),
                    CvApproach::Bound => {
                        let (pi_samples, x0_samples, consts, kspec) =
                            bound_inputs.as_ref().expect("built when bound is requested");
                        fit_cv_bound(
                            model.as_ref(),
                            &|x: &[f64]| x[coordinate],
                            &empirical.theta,
                            pi_samples,
                            x0_samples,
                            consts,
                            kspec,
                            cfg.cv.ridge,
                        )?
                    }
                };
                fits.push(FittedCv { coordinate, approach, report });
            }
        }
        Ok(fits)
    })
}

/// Simulates the configured replicates and returns `(replicate, tau)` pairs —
/// the `meeting-times` subcommand. Envelope fitting is left to the caller so
/// the τ samples can be persisted even when the fit cannot proceed.
pub fn run_meeting_times(cfg: &ExperimentConfig) -> Result<Vec<(usize, usize)>, HarnessError> {
    let pool = build_pool(cfg.run.workers)?;
    pool.install(|| {
        let mut tau_cfg = cfg.clone();
        // Only the coupling matters here; no estimation window to fill.
        tau_cfg.estimator.k = 0;
        tau_cfg.estimator.m = 0;
        tau_cfg.cv.choice = CvChoice::None;
        match &cfg.target {
            TargetSpec::Chain { data_path, meet_prob } => {
                let chain = FiniteChain::from_file(data_path)?;
                let kernel = make_synthetic_coupling(&chain, *meet_prob)?;
                let init = |rng: &mut RngStream| chain.sample_init(rng);
                let records = simulate(&tau_cfg, &kernel, &init, None, 1, false)?;
                Ok(records.iter().enumerate().map(|(i, rec)| (i, rec.tau)).collect())
            }
            _ => {
                let model = build_model(&cfg.target)?;
                let dim = model.dim();
                let kernel =
                    ModelKernel::build(model.as_ref(), cfg.kernel.kind, cfg.kernel.step_size)?;
                let init = move |rng: &mut RngStream| -> Vec<f64> {
                    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
                };
                let records = simulate(&tau_cfg, &kernel, &init, Some(model.as_ref()), dim, false)?;
                Ok(records.iter().enumerate().map(|(i, rec)| (i, rec.tau)).collect())
            }
        }
    })
}

/// Runs the full certification suite for a finite-chain config: the exact
/// premises (meeting tail, step moments, total variation), the simulated
/// coupled-difference and partial-sum conclusions, the moment-bound
/// decomposition, and the headline σ(h) bound.
///
/// The claimed meeting-tail envelope is C = 1, δ = (1 − meet_prob) ·
/// delta_scale. It is *claimed*, not fitted: with delta_scale < 1 the exact
/// survival rows expose the false premise and the run fails, which is the
/// falsification path.
pub fn run_certification(cfg: &ExperimentConfig) -> Result<CertificationOutcome, HarnessError> {
    let Some(cert) = &cfg.certification else {
        return Err(HarnessError::Usage(
            "certify needs a [certification] section".into(),
        ));
    };
    let TargetSpec::Chain { data_path, meet_prob } = &cfg.target else {
        return Err(HarnessError::Usage(
            "certification needs a chain target with exact premises".into(),
        ));
    };
    let pool = build_pool(cfg.run.workers)?;
    pool.install(|| certify_inner(cfg, cert, data_path, *meet_prob))
}

fn certify_inner(
    cfg: &ExperimentConfig,
    cert: &CertificationSection,
    data_path: &Path,
    meet_prob: f64,
) -> Result<CertificationOutcome, HarnessError> {
    let chain = FiniteChain::from_file(data_path)?;
    if cert.h.len() != chain.n() {
        return Err(HarnessError::Usage(format!(
            "certification.h has {} entries for a {}-state chain",
            cert.h.len(),
            chain.n()
        )));
    }
    let kernel = make_synthetic_coupling(&chain, meet_prob)?;
    let init = |rng: &mut RngStream| chain.sample_init(rng);
    let h = |x: &[f64]| cert.h[x[0] as usize];

    let lambda = exact_lambda(&chain, LAW_HORIZON)?;
    let moment_bound = exact_moment_bound(&chain, &cert.h, cert.eta, LAW_HORIZON)?;
    let claimed_delta = ((1.0 - meet_prob) * cert.delta_scale).max(f64::EPSILON);
    let consts = BoundConstants::from_tail(cert.eta, 1.0, claimed_delta, moment_bound, lambda)?;

    let grid = AppendixGrid {
        t_max: cert.t_max,
        n_starts: cert.n_starts.clone(),
        n_prime_max: cert.n_prime_max,
    };
    let premises = ExactPremises {
        survival: kernel.exact_survival(grid.t_max.max(grid.n_prime_max)),
        step_moments: exact_step_moments(&chain, &cert.h, cert.eta, grid.t_max)?,
        tv_sup: lambda,
    };
    let mut report = certify_appendix_chain(
        &kernel,
        &init,
        &h,
        &consts,
        &grid,
        cert.n_mc,
        derive_seed(cfg.run.root_seed, CERT_APPENDIX_STREAM),
        cfg.kernel.max_iterations,
        Some(&premises),
    )?;

    // Moment-bound decomposition D ≤ π(|h|^{2+η}) + λ_H · ‖|h|^{2+η}‖_H,
    // plus the kernel-vs-TV comparison feeding it. d_H ≤ 2·d_TV always; the
    // factor-one comparison additionally needs every pair of embedded states
    // within bandwidth·√(2 ln 2), where the kernel stays above one half.
    let embedding = StateEmbedding::line(chain.n());
    let decomposition =
        exact_d_bound_decomposition(&chain, &cert.h, cert.eta, &embedding, LAW_HORIZON)?;
    report.rows.push(CheckRow::exact(
        "d_decomposition",
        "-",
        moment_bound,
        decomposition.total(),
    ));
    report.rows.push(CheckRow::exact(
        "lambda_H",
        "vs 2*lambda",
        decomposition.lambda_h,
        2.0 * lambda,
    ));
    if embedding_diameter(&embedding) <= embedding.kernel().bandwidth() * (2.0 * 2f64.ln()).sqrt()
    {
        report.rows.push(CheckRow::exact(
            "lambda_H",
            "vs lambda",
            decomposition.lambda_h,
            lambda,
        ));
    }

    // Headline bound: empirical σ(h) at k = m = 0 against the assembled RHS.
    let x0_second_moment: f64 =
        chain.init().iter().zip(&cert.h).map(|(p, hv)| p * hv * hv).sum();
    let rhs = bound_rhs(decomposition.pi_term, decomposition.norm_term, x0_second_moment, &consts)?;
    let sigma_records = run_replicates(
        &kernel,
        &init,
        &|x: &[f64]| vec![h(x)],
        1,
        0,
        0,
        cert.replicates,
        derive_seed(cfg.run.root_seed, CERT_SIGMA_STREAM),
        cfg.kernel.max_iterations,
        &|_| (),
    );
    let mut estimates = Vec::with_capacity(cert.replicates);
    let mut not_met = Vec::new();
    let mut partial = Vec::new();
    for (idx, res) in sigma_records.into_iter().enumerate() {
        match res {
            Ok(rec) => {
                partial.push((idx, rec.tau));
                estimates.push(rec.estimates[0]);
            }
            Err(EstimatorError::Kernel(KernelError::NotMet { .. })) => not_met.push(idx),
            Err(other) => return Err(other.into()),
        }
    }
    if !not_met.is_empty() {
        return Err(HarnessError::NotMet { indices: not_met, total: cert.replicates, partial });
    }
    let sigma_batch = EstimateBatch { estimates, k: 0, m: 0, h_label: "h".into() };
    let sigma_hat = sigma_hat_full(&sigma_batch)?.sqrt();
    report.extend(certify_main_bound(&sigma_batch, rhs));

    Ok(CertificationOutcome { report, consts, decomposition, rhs, sigma_hat })
}

fn embedding_diameter(embedding: &StateEmbedding) -> f64 {
    let points = embedding.points();
    let mut diameter = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d2: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            diameter = diameter.max(d2.sqrt());
        }
    }
    diameter
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;
    use crate::output::write_run_report;
    use approx::assert_relative_eq;
    use std::path::PathBuf;

    fn fair_coin_file(dir: &Path) -> PathBuf {
        let path = dir.join("fair_coin.txt");
        std::fs::write(&path, "# fair coin\n0.5 0.5\n0.5 0.5\n1 0\n").unwrap();
        path
    }

    fn gaussian_cfg(extra: &str) -> ExperimentConfig {
        parse_config_str(
            &format!(
                "[target]\ntype = \"gaussian\"\ndim = 1\n\
                 [estimator]\nk = 0\nm = 50\nr = 64\n{extra}"
            ),
            Path::new("."),
        )
        .unwrap()
    }

    #[test]
    fn plain_gaussian_run_is_unbiased_and_fully_reported() {
        let cfg = gaussian_cfg("");
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.rows.len(), 64);
        assert_eq!(report.meeting_times.len(), 64);
        assert_eq!(report.estimation_replicates, 0..64);
        assert_eq!(report.fitting_replicates, 0..0);
        let s = &report.summaries[0];
        let se = (s.variance / 64.0).sqrt();
        assert!(s.mean.abs() <= 4.0 * se, "mean {} exceeds 4 se {se}", s.mean);
        assert_eq!(s.vr_factor, 1.0);
        assert!(report.cv_fits.is_empty());
        let (lo, _, hi) = report.tau_summary().unwrap();
        assert!(lo >= 1 && hi >= lo);
    }

    #[test]
    fn empirical_cv_annihilates_linear_coordinates() {
        let cfg = parse_config_str(
            "[target]\ntype = \"gaussian\"\ndim = 2\n\
             [estimator]\nk = 5\nm = 80\nr = 32\n\
             [cv]\napproach = \"empirical\"\n",
            Path::new("."),
        )
        .unwrap();
        let report = run_experiment(&cfg).unwrap();
        // 16 estimation replicates × 2 coordinates × 2 strategies.
        assert_eq!(report.rows.len(), 64);
        assert_eq!(report.fitting_replicates, 0..16);
        for row in &report.rows {
            assert!(
                row.replicate >= 16,
                "replicate {} from the fitting half leaked into the report",
                row.replicate
            );
        }
        assert_eq!(report.cv_fits.len(), 2);
        for coordinate in 0..2 {
            let vr = report
                .summaries
                .iter()
                .find(|s| s.coordinate == coordinate && s.strategy == "cv-empirical")
                .unwrap()
                .vr_factor;
            assert!(vr >= 100.0, "coordinate {coordinate}: vr = {vr}");
        }
    }

    #[test]
    fn chain_run_recovers_the_stationary_mean() {
        let dir = tempfile::tempdir().unwrap();
        let path = fair_coin_file(dir.path());
        let cfg = parse_config_str(
            &format!(
                "[target]\ntype = \"chain\"\ndata_path = {path:?}\nmeet_prob = 0.5\n\
                 [estimator]\nk = 2\nm = 20\nr = 400\n"
            ),
            Path::new("."),
        )
        .unwrap();
        let report = run_experiment(&cfg).unwrap();
        let s = &report.summaries[0];
        let se = (s.variance / 400.0).sqrt();
        assert!(
            (s.mean - 0.5).abs() <= 4.0 * se,
            "mean {} not within 4 se {se} of 0.5",
            s.mean
        );
    }

    #[test]
    fn worker_count_does_not_change_output_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut outputs = Vec::new();
        for workers in [1usize, 8] {
            let cfg = gaussian_cfg(&format!("[cv]\napproach = \"both\"\n[run]\nworkers = {workers}\n"));
            let report = run_experiment(&cfg).unwrap();
            let out = dir.path().join(format!("w{workers}"));
            write_run_report(&report, &out).unwrap();
            let bytes: Vec<Vec<u8>> = ["estimates.csv", "summary.csv", "cvfit.csv", "meeting_times.csv"]
                .iter()
                .map(|f| std::fs::read(out.join(f)).unwrap())
                .collect();
            outputs.push(bytes);
        }
        assert_eq!(outputs[0], outputs[1], "worker count changed CSV bytes");
    }

    #[test]
    fn unmet_replicates_abort_with_indices_and_partials() {
        let cfg = parse_config_str(
            "[target]\ntype = \"gaussian\"\ndim = 1\n\
             [kernel]\nmax_iterations = 1\n\
             [estimator]\nk = 0\nm = 0\nr = 16\n",
            Path::new("."),
        )
        .unwrap();
        match run_experiment(&cfg) {
            Err(HarnessError::NotMet { indices, total, partial }) => {
                assert_eq!(total, 16);
                assert!(!indices.is_empty());
                assert_eq!(indices.len() + partial.len(), 16);
            }
            other => panic!("expected NotMet, got {other:?}"),
        }
    }

    #[test]
    fn fit_cv_returns_the_linear_solution() {
        let cfg = gaussian_cfg("[cv]\napproach = \"empirical\"\n");
        let fits = run_fit_cv(&cfg).unwrap();
        assert_eq!(fits.len(), 1);
        let theta = fits[0].report.theta.theta();
        assert!(
            (theta[0] + 1.0).abs() <= 1e-6,
            "theta = {theta:?}, expected ≈ -1"
        );
        // Declining to fit is a usage error, not a silent no-op.
        let none = gaussian_cfg("");
        assert!(matches!(run_fit_cv(&none), Err(HarnessError::Usage(_))));
    }

    #[test]
    fn meeting_times_cover_every_replicate() {
        let cfg = gaussian_cfg("");
        let pairs = run_meeting_times(&cfg).unwrap();
        assert_eq!(pairs.len(), 64);
        for (i, (replicate, tau)) in pairs.iter().enumerate() {
            assert_eq!(*replicate, i);
            assert!(*tau >= 1);
        }
    }

    fn certification_cfg(path: &Path, extra: &str) -> ExperimentConfig {
        parse_config_str(
            &format!(
                "[target]\ntype = \"chain\"\ndata_path = {path:?}\nmeet_prob = 0.5\n\
                 [estimator]\nk = 0\nm = 0\nr = 8\n\
                 [certification]\neta = 2.0\nh = [0.0, 1.0]\nn_mc = 20000\nreplicates = 20000\n{extra}"
            ),
            Path::new("."),
        )
        .unwrap()
    }

    #[test]
    fn fair_coin_certification_passes_everywhere() {
        let dir = tempfile::tempdir().unwrap();
        let path = fair_coin_file(dir.path());
        let outcome = run_certification(&certification_cfg(&path, "")).unwrap();
        assert!(
            outcome.report.all_certified(),
            "uncertified rows: {:?}",
            outcome
                .report
                .rows
                .iter()
                .filter(|r| r.status != crate::bound::CheckStatus::Certified)
                .collect::<Vec<_>>()
        );
        // Exact constants for the two-state fair coin with p = 1/2 and
        // h = (0, 1): σ(h)² = 3/4, λ = 1/2, D = 1/2.
        assert_relative_eq!(outcome.sigma_hat, 0.75f64.sqrt(), max_relative = 0.05);
        assert_relative_eq!(outcome.consts.tv_sup, 0.5, epsilon = 1e-12);
        assert_relative_eq!(outcome.consts.moment_bound, 0.5, epsilon = 1e-12);
        assert!(outcome.rhs > outcome.sigma_hat);
        let sigma_row = outcome.report.rows.last().unwrap();
        assert_eq!(sigma_row.check, "sigma_bound");
        assert!(sigma_row.margin() > 0.0);
    }

    #[test]
    fn halved_delta_falsification_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = fair_coin_file(dir.path());
        let outcome =
            run_certification(&certification_cfg(&path, "delta_scale = 0.5\n")).unwrap();
        assert!(outcome.report.any_failed());
        // The exact survival premise is what catches it: P(τ > 1) = 1/2
        // against a claimed envelope of 1/4.
        let t1 = outcome
            .report
            .rows
            .iter()
            .find(|r| r.check == "meeting_tail" && r.index == "t=1")
            .unwrap();
        assert_eq!(t1.status, crate::bound::CheckStatus::Failed);
    }

    #[test]
    fn certification_without_the_section_is_a_usage_error() {
        let cfg = gaussian_cfg("");
        assert!(matches!(run_certification(&cfg), Err(HarnessError::Usage(_))));
    }
}
