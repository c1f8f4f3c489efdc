//! The asymptotic-variance bound and its certification.
//!
//! Under a geometric meeting-tail envelope P(τ > t) ≤ C·δ^t, a uniform
//! (2+η)-moment bound D on |h| along the chain, and a total-variation
//! envelope λ on the marginals, the replicate standard deviation σ(h) of the
//! k = m = 0 estimator satisfies
//!
//! ```text
//! σ(h) ≤ γ · ( π(|h|^{2+η}) + λ·‖|h|^{2+η}‖_H )^{1/(2+η)} + E[h(X₀)²]^{1/2}
//! γ²   = 4 C^{η/(2+η)} δ^{η/(2+η)} / (1 − δ^{η/(4+2η)})²
//! ```
//!
//! with ‖·‖_H the RKHS norm for a kernel with unit diagonal. The chained
//! intermediate inequalities have their own constants,
//!
//! ```text
//! E[Δ_t²]             ≤ C̃ δ̃^t        C̃ = 4 C^{η/(2+η)} D^{2/(2+η)},  δ̃ = δ^{η/(2+η)}
//! E[(H₀^{n'}−H₀^n)²]  ≤ C̄ δ̃^n        C̄ = C̃ δ̃ / (1 − δ̃^{1/2})² = γ² D^{2/(2+η)}
//! ```
//!
//! where Δ₀ = h(X₀), Δ_t = h(X_t) − h(Y_{t−1}) for t ≥ 1, and H₀^n is the
//! n-th partial sum of the Δ's.
//!
//! Certification separates *premises* from *conclusions*. When an exact
//! oracle supplies the meeting tail, step moments and TV distances, those
//! premises are compared with equality-tolerant exact arithmetic — several
//! hold with equality on natural oracles, where a one-sided Monte-Carlo
//! interval would reject half the time. The conclusions (which carry genuine
//! slack) are always checked by simulation with one-sided 99% intervals, and
//! a check whose standard error exceeds 20% of its bound is reported
//! inconclusive rather than certified.

use rayon::prelude::*;
use thiserror::Error;

use crate::coupling::{run_coupled, CoupledKernel, KernelError};
use crate::estimator::{EstimateBatch, EstimatorError};
use crate::rng::{stream, RngStream};

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("{name} must satisfy {requirement}, got {value}")]
    InvalidParameter { name: &'static str, requirement: &'static str, value: f64 },
    #[error("tail fitting needs at least 100 meeting times, got {got}")]
    TooFewMeetingTimes { got: usize },
    #[error("meeting times must be ≥ 1, found {got}")]
    InvalidMeetingTime { got: usize },
    #[error("grid start n = {n} must be below n_prime_max = {n_prime_max}")]
    BadGrid { n: usize, n_prime_max: usize },
    #[error("exact premises cover {got} steps, need t ≤ {needed}")]
    PremiseTooShort { got: usize, needed: usize },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// One-sided 99% normal quantile used by every Monte-Carlo check.
pub const Z_99: f64 = 2.3263478740408408;

fn require(name: &'static str, requirement: &'static str, value: f64, ok: bool)
    -> Result<(), BoundError>
{
    if ok {
        Ok(())
    } else {
        Err(BoundError::InvalidParameter { name, requirement, value })
    }
}

/// γ from the tail envelope (C, δ) and moment exponent η.
pub fn gamma_const(tail_c: f64, tail_delta: f64, eta: f64) -> Result<f64, BoundError> {
    require("tail_c", "> 0", tail_c, tail_c > 0.0 && tail_c.is_finite())?;
    require(
        "tail_delta",
        "in (0, 1)",
        tail_delta,
        tail_delta > 0.0 && tail_delta < 1.0,
    )?;
    require("eta", "> 0", eta, eta > 0.0 && eta.is_finite())?;
    let r = eta / (2.0 + eta);
    let half_r = eta / (4.0 + 2.0 * eta);
    let gamma_sq =
        4.0 * tail_c.powf(r) * tail_delta.powf(r) / (1.0 - tail_delta.powf(half_r)).powi(2);
    Ok(gamma_sq.sqrt())
}

/// δ̃ = δ^{η/(2+η)}, the decay rate of the squared-increment chain.
pub fn delta_tilde(tail_delta: f64, eta: f64) -> f64 {
    tail_delta.powf(eta / (2.0 + eta))
}

/// C̃ = 4 C^{η/(2+η)} D^{2/(2+η)}, the squared-increment prefactor.
pub fn c_tilde(tail_c: f64, moment_bound: f64, eta: f64) -> f64 {
    4.0 * tail_c.powf(eta / (2.0 + eta)) * moment_bound.powf(2.0 / (2.0 + eta))
}

/// C̄ = γ² D^{2/(2+η)}, the partial-sum-difference prefactor.
pub fn c_bar(gamma: f64, moment_bound: f64, eta: f64) -> f64 {
    gamma * gamma * moment_bound.powf(2.0 / (2.0 + eta))
}

/// The assumption set feeding the bound: tail envelope (C, δ), moment level
/// D ≥ sup_t E|h(X_t)|^{2+η}, TV envelope λ ≥ sup_t d_TV(π_t, π), and the
/// derived γ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    pub eta: f64,
    pub tail_c: f64,
    pub tail_delta: f64,
    pub moment_bound: f64,
    pub tv_sup: f64,
    pub gamma: f64,
}

impl BoundConstants {
    /// Validates the inputs and derives γ via [`gamma_const`].
    pub fn from_tail(
        eta: f64,
        tail_c: f64,
        tail_delta: f64,
        moment_bound: f64,
        tv_sup: f64,
    ) -> Result<Self, BoundError> {
        require(
            "moment_bound",
            "≥ 0 and finite",
            moment_bound,
            moment_bound >= 0.0 && moment_bound.is_finite(),
        )?;
        require("tv_sup", "≥ 0 and finite", tv_sup, tv_sup >= 0.0 && tv_sup.is_finite())?;
        let gamma = gamma_const(tail_c, tail_delta, eta)?;
        Ok(Self { eta, tail_c, tail_delta, moment_bound, tv_sup, gamma })
    }

    pub fn delta_tilde(&self) -> f64 {
        delta_tilde(self.tail_delta, self.eta)
    }

    pub fn c_tilde(&self) -> f64 {
        c_tilde(self.tail_c, self.moment_bound, self.eta)
    }

    pub fn c_bar(&self) -> f64 {
        c_bar(self.gamma, self.moment_bound, self.eta)
    }
}

/// A fitted geometric envelope for observed meeting times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricTailFit {
    pub tail_c: f64,
    pub tail_delta: f64,
    /// All observed τ were 1; the envelope is the degenerate C = 1, δ = ε.
    pub degenerate: bool,
}

/// Fits P(τ > t) ≤ C δ^t to observed meeting times: least squares on the log
/// survival over the well-populated range (counts ≥ 10), prefactor inflated
/// by 1.5 and then raised until the envelope dominates the empirical survival
/// at every observed t. Needs ≥ 100 observations.
pub fn fit_geometric_tail(meeting_times: &[usize]) -> Result<GeometricTailFit, BoundError> {
    let n = meeting_times.len();
    if n < 100 {
        return Err(BoundError::TooFewMeetingTimes { got: n });
    }
    let mut max_tau = 0usize;
    for &t in meeting_times {
        if t == 0 {
            return Err(BoundError::InvalidMeetingTime { got: 0 });
        }
        max_tau = max_tau.max(t);
    }
    if max_tau == 1 {
        return Ok(GeometricTailFit { tail_c: 1.0, tail_delta: f64::EPSILON, degenerate: true });
    }
    // counts[t] = #{τ > t} for t = 0..max_tau (survival is 0 from max_tau on).
    let mut exceed = vec![0u64; max_tau];
    for &t in meeting_times {
        // τ = t exceeds thresholds 0..t-1.
        let top = t.min(max_tau);
        for slot in exceed.iter_mut().take(top) {
            *slot += 1;
        }
    }
    let survival: Vec<f64> = exceed.iter().map(|c| *c as f64 / n as f64).collect();
    let mut fit_ts: Vec<usize> = (0..max_tau).filter(|&t| exceed[t] >= 10).collect();
    if fit_ts.len() < 2 {
        fit_ts = vec![0, 1];
    }
    let k = fit_ts.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &t in &fit_ts {
        let x = t as f64;
        let y = survival[t].ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let denom = k * sxx - sx * sx;
    let slope = (k * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / k;
    let tail_delta = slope.exp().clamp(f64::MIN_POSITIVE, 1.0 - 1e-9);
    let mut tail_c = intercept.exp() * 1.5;
    for (t, s) in survival.iter().enumerate() {
        let needed = s / tail_delta.powi(t as i32);
        if needed > tail_c {
            tail_c = needed;
        }
    }
    Ok(GeometricTailFit { tail_c, tail_delta, degenerate: false })
}

/// Right-hand side of the variance bound from an exact π-moment:
/// γ·(π(|h|^{2+η}) + λ·‖|h|^{2+η}‖_H)^{1/(2+η)} + √E[h(X₀)²].
///
/// Accepts η = 0 (the terms degenerate gracefully) so partially-degenerate
/// configurations remain expressible; [`BoundConstants::from_tail`] is where
/// strict positivity is enforced.
pub fn bound_rhs(
    pi_moment: f64,
    h_norm: f64,
    x0_second_moment: f64,
    consts: &BoundConstants,
) -> Result<f64, BoundError> {
    require("pi_moment", "≥ 0 and finite", pi_moment, pi_moment >= 0.0 && pi_moment.is_finite())?;
    require("h_norm", "≥ 0 and finite", h_norm, h_norm >= 0.0 && h_norm.is_finite())?;
    require(
        "x0_second_moment",
        "≥ 0 and finite",
        x0_second_moment,
        x0_second_moment >= 0.0 && x0_second_moment.is_finite(),
    )?;
    require("gamma", "≥ 0", consts.gamma, consts.gamma >= 0.0)?;
    require("tv_sup", "≥ 0", consts.tv_sup, consts.tv_sup >= 0.0)?;
    require("eta", "≥ 0", consts.eta, consts.eta >= 0.0)?;
    let inner = pi_moment + consts.tv_sup * h_norm;
    Ok(consts.gamma * inner.powf(1.0 / (2.0 + consts.eta)) + x0_second_moment.sqrt())
}

/// [`bound_rhs`] with π(|h|^{2+η}) replaced by its sample mean over supplied
/// π-samples of h.
pub fn bound_rhs_from_samples(
    h_values_on_pi: &[f64],
    h_norm: f64,
    x0_second_moment: f64,
    consts: &BoundConstants,
) -> Result<f64, BoundError> {
    if h_values_on_pi.is_empty() {
        return Err(BoundError::InvalidParameter {
            name: "h_values_on_pi",
            requirement: "non-empty",
            value: 0.0,
        });
    }
    let p = 2.0 + consts.eta;
    let moment =
        h_values_on_pi.iter().map(|v| v.abs().powf(p)).sum::<f64>() / h_values_on_pi.len() as f64;
    bound_rhs(moment, h_norm, x0_second_moment, consts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Certified,
    Failed,
    Inconclusive,
}

impl std::fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CheckStatus::Certified => "certified",
            CheckStatus::Failed => "failed",
            CheckStatus::Inconclusive => "inconclusive",
        };
        f.write_str(s)
    }
}

/// One certified inequality: `empirical` (with its standard error; zero for
/// exact rows) against `bound`. `margin` is bound − upper confidence limit.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub check: String,
    pub index: String,
    pub empirical: f64,
    pub se: f64,
    pub bound: f64,
    pub status: CheckStatus,
}

impl CheckRow {
    /// Exact-arithmetic comparison with a relative tolerance so premises that
    /// hold with equality certify deterministically.
    pub fn exact(check: impl Into<String>, index: impl Into<String>, empirical: f64, bound: f64) -> Self {
        let status = if empirical <= bound * (1.0 + 1e-12) + 1e-300 {
            CheckStatus::Certified
        } else {
            CheckStatus::Failed
        };
        Self { check: check.into(), index: index.into(), empirical, se: 0.0, bound, status }
    }

    /// One-sided Monte-Carlo comparison at 99%: fails when even the lower
    /// confidence limit clears the bound, certifies when the upper limit is
    /// below it *and* the standard error is at most 20% of the bound,
    /// otherwise stays inconclusive.
    pub fn monte_carlo(
        check: impl Into<String>,
        index: impl Into<String>,
        empirical: f64,
        se: f64,
        bound: f64,
    ) -> Self {
        let lcl = empirical - Z_99 * se;
        let ucl = empirical + Z_99 * se;
        let status = if lcl > bound {
            CheckStatus::Failed
        } else if ucl <= bound && se <= 0.2 * bound {
            CheckStatus::Certified
        } else {
            CheckStatus::Inconclusive
        };
        Self { check: check.into(), index: index.into(), empirical, se, bound, status }
    }

    pub fn margin(&self) -> f64 {
        self.bound - (self.empirical + Z_99 * self.se)
    }
}

/// All rows from one certification run.
#[derive(Debug, Clone, Default)]
pub struct CertificationReport {
    pub rows: Vec<CheckRow>,
}

impl CertificationReport {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.status == CheckStatus::Failed)
    }

    pub fn all_certified(&self) -> bool {
        self.rows.iter().all(|r| r.status == CheckStatus::Certified)
    }

    pub fn extend(&mut self, other: CertificationReport) {
        self.rows.extend(other.rows);
    }
}

/// Which lags and partial-sum pairs the appendix certification simulates.
#[derive(Debug, Clone)]
pub struct AppendixGrid {
    /// Δ_t² is checked for t = 0..=t_max.
    pub t_max: usize,
    /// Partial-sum differences start at each n here…
    pub n_starts: Vec<usize>,
    /// …and run over n' = n+1..=n_prime_max.
    pub n_prime_max: usize,
}

/// Exact premise values supplied by an oracle (index t = 0..=t_max).
#[derive(Debug, Clone)]
pub struct ExactPremises {
    /// P(τ > t) under the lag-1 protocol.
    pub survival: Vec<f64>,
    /// E|h(X_t)|^{2+η}.
    pub step_moments: Vec<f64>,
    /// sup_t d_TV(π_t, π).
    pub tv_sup: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    fn merge(a: Welford, b: Welford) -> Welford {
        if a.n == 0 {
            return b;
        }
        if b.n == 0 {
            return a;
        }
        let n = a.n + b.n;
        let d = b.mean - a.mean;
        let mean = a.mean + d * (b.n as f64 / n as f64);
        let m2 = a.m2 + b.m2 + d * d * (a.n as f64 * b.n as f64 / n as f64);
        Welford { n, mean, m2 }
    }

    fn se(&self) -> f64 {
        if self.n < 2 {
            return f64::INFINITY;
        }
        (self.m2 / (self.n - 1) as f64 / self.n as f64).max(0.0).sqrt()
    }
}

/// Fixed simulation chunk so the parallel Welford merge is performed in a
/// schedule-independent order.
const MC_CHUNK: usize = 4096;

struct McPass {
    delta_sq: Vec<Welford>,
    h_diff: Vec<Welford>,
    moment: Vec<Welford>,
    /// tail_counts[t] = #{replicates with τ > t}, t = 0..=t_max.
    tail_counts: Vec<u64>,
}

impl McPass {
    fn empty(t_max: usize, n_pairs: usize) -> Self {
        Self {
            delta_sq: vec![Welford::default(); t_max + 1],
            h_diff: vec![Welford::default(); n_pairs],
            moment: vec![Welford::default(); t_max + 1],
            tail_counts: vec![0; t_max + 1],
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn appendix_mc_pass<K, I, H>(
    kernel: &K,
    init: &I,
    h: &H,
    eta: f64,
    grid: &AppendixGrid,
    pairs: &[(usize, usize)],
    n_mc: usize,
    root_seed: u64,
    max_iterations: u64,
) -> Result<McPass, BoundError>
where
    K: CoupledKernel + ?Sized,
    I: Fn(&mut RngStream) -> Vec<f64> + Sync + ?Sized,
    H: Fn(&[f64]) -> f64 + Sync,
{
    let horizon = grid.t_max.max(grid.n_prime_max);
    let n_chunks = n_mc.div_ceil(MC_CHUNK);
    let chunk_results: Vec<Result<McPass, BoundError>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * MC_CHUNK;
            let hi = ((chunk + 1) * MC_CHUNK).min(n_mc);
            let mut acc = McPass::empty(grid.t_max, pairs.len());
            for idx in lo..hi {
                let mut rng = stream(root_seed, idx as u64);
                let traj = run_coupled(kernel, init, horizon, max_iterations, &mut rng)?;
                let hx: Vec<f64> = (0..=horizon).map(|t| h(&traj.xs[t])).collect();
                let mut partial = Vec::with_capacity(horizon + 1);
                let mut running = 0.0;
                for t in 0..=horizon {
                    let delta = if t == 0 {
                        hx[0]
                    } else if t < traj.tau {
                        hx[t] - h(&traj.ys[t - 1])
                    } else {
                        0.0
                    };
                    running += delta;
                    partial.push(running);
                    if t <= grid.t_max {
                        acc.delta_sq[t].push(delta * delta);
                        acc.moment[t].push(hx[t].abs().powf(2.0 + eta));
                    }
                }
                for (slot, &(n_lo, n_hi)) in pairs.iter().enumerate() {
                    let d = partial[n_hi] - partial[n_lo];
                    acc.h_diff[slot].push(d * d);
                }
                for (t, slot) in acc.tail_counts.iter_mut().enumerate() {
                    if traj.tau > t {
                        *slot += 1;
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = McPass::empty(grid.t_max, pairs.len());
    for res in chunk_results {
        let part = res?;
        for (a, b) in total.delta_sq.iter_mut().zip(part.delta_sq) {
            *a = Welford::merge(*a, b);
        }
        for (a, b) in total.h_diff.iter_mut().zip(part.h_diff) {
            *a = Welford::merge(*a, b);
        }
        for (a, b) in total.moment.iter_mut().zip(part.moment) {
            *a = Welford::merge(*a, b);
        }
        for (a, b) in total.tail_counts.iter_mut().zip(part.tail_counts) {
            *a += b;
        }
    }
    Ok(total)
}

/// Certifies the chained appendix inequalities for one coupled kernel.
///
/// Premise rows (`meeting_tail`, `moment_premise`, `tv_premise`) come from
/// `exact` when supplied; otherwise the meeting tail is checked against the
/// empirical survival of the simulated replicates and the moment premise
/// becomes a Monte-Carlo row (no TV row — total variation is not estimable
/// from forward samples alone). Conclusion rows (`delta_sq`, `h_diff`) are
/// always Monte-Carlo.
#[allow(clippy::too_many_arguments)]
pub fn certify_appendix_chain<K, I, H>(
    kernel: &K,
    init: &I,
    h: &H,
    consts: &BoundConstants,
    grid: &AppendixGrid,
    n_mc: usize,
    root_seed: u64,
    max_iterations: u64,
    exact: Option<&ExactPremises>,
) -> Result<CertificationReport, BoundError>
where
    K: CoupledKernel + ?Sized,
    I: Fn(&mut RngStream) -> Vec<f64> + Sync + ?Sized,
    H: Fn(&[f64]) -> f64 + Sync,
{
    for &n in &grid.n_starts {
        if n >= grid.n_prime_max {
            return Err(BoundError::BadGrid { n, n_prime_max: grid.n_prime_max });
        }
    }
    require("n_mc", "≥ 2", n_mc as f64, n_mc >= 2)?;
    if let Some(ex) = exact {
        if ex.survival.len() <= grid.t_max || ex.step_moments.len() <= grid.t_max {
            return Err(BoundError::PremiseTooShort {
                got: ex.survival.len().min(ex.step_moments.len()),
                needed: grid.t_max,
            });
        }
    }
    let pairs: Vec<(usize, usize)> = grid
        .n_starts
        .iter()
        .flat_map(|&n| ((n + 1)..=grid.n_prime_max).map(move |np| (n, np)))
        .collect();
    let pass = appendix_mc_pass(
        kernel,
        init,
        h,
        consts.eta,
        grid,
        &pairs,
        n_mc,
        root_seed,
        max_iterations,
    )?;

    let mut report = CertificationReport::default();
    match exact {
        Some(ex) => {
            for t in 0..=grid.t_max {
                let envelope = consts.tail_c * consts.tail_delta.powi(t as i32);
                report.rows.push(CheckRow::exact(
                    "meeting_tail",
                    format!("t={t}"),
                    ex.survival[t],
                    envelope,
                ));
            }
            for t in 0..=grid.t_max {
                report.rows.push(CheckRow::exact(
                    "moment_premise",
                    format!("t={t}"),
                    ex.step_moments[t],
                    consts.moment_bound,
                ));
            }
            report.rows.push(CheckRow::exact("tv_premise", "sup", ex.tv_sup, consts.tv_sup));
        }
        None => {
            // Empirical survival from the same simulated replicates; the
            // moment premise gets the one-sided MC treatment.
            for t in 0..=grid.t_max {
                let envelope = consts.tail_c * consts.tail_delta.powi(t as i32);
                report.rows.push(CheckRow::exact(
                    "meeting_tail",
                    format!("t={t}"),
                    pass.tail_counts[t] as f64 / n_mc as f64,
                    envelope,
                ));
            }
            for t in 0..=grid.t_max {
                let w = &pass.moment[t];
                report.rows.push(CheckRow::monte_carlo(
                    "moment_premise",
                    format!("t={t}"),
                    w.mean,
                    w.se(),
                    consts.moment_bound,
                ));
            }
        }
    }

    let c_tilde = consts.c_tilde();
    let d_tilde = consts.delta_tilde();
    for t in 0..=grid.t_max {
        let w = &pass.delta_sq[t];
        report.rows.push(CheckRow::monte_carlo(
            "delta_sq",
            format!("t={t}"),
            w.mean,
            w.se(),
            c_tilde * d_tilde.powi(t as i32),
        ));
    }
    let c_bar = consts.c_bar();
    for (slot, &(n, np)) in pairs.iter().enumerate() {
        let w = &pass.h_diff[slot];
        report.rows.push(CheckRow::monte_carlo(
            "h_diff",
            format!("n={n},n'={np}"),
            w.mean,
            w.se(),
            c_bar * d_tilde.powi(n as i32),
        ));
    }
    Ok(report)
}

/// Certifies the headline bound: the sample standard deviation of a batch of
/// k = m = 0 replicates against a right-hand side computed by [`bound_rhs`].
/// The standard error of the SD comes from the delta method.
pub fn certify_main_bound(batch: &EstimateBatch, rhs: f64) -> CertificationReport {
    let values: Vec<f64> = batch.values().collect();
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    let sd = var.sqrt();
    let mu4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / r;
    let se_var = ((mu4 - var * var).max(0.0) / r).sqrt();
    let se_sd = if sd > 0.0 { se_var / (2.0 * sd) } else { 0.0 };
    CertificationReport {
        rows: vec![CheckRow::monte_carlo("sigma_bound", "-", sd, se_sd, rhs)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{CoupledRwm, KernelConfig};
    use crate::target::Gaussian;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn gamma_const_worked_value() {
        // 4·√0.25 / (1 − 0.25^{1/4})² = 2 / (1 − 1/√2)².
        let g = gamma_const(1.0, 0.25, 2.0).unwrap();
        let direct = 2.0 / (1.0 - 1.0 / std::f64::consts::SQRT_2).powi(2);
        assert_abs_diff_eq!(g * g, direct, epsilon = 1e-12);
        assert_abs_diff_eq!(g * g, 23.313708498984763, epsilon = 1e-9);
    }

    #[test]
    fn gamma_const_scalings() {
        // At η = 2 the C-exponent is ½: scaling C by 16 scales γ² by 4.
        let base = gamma_const(1.0, 0.25, 2.0).unwrap();
        let scaled = gamma_const(16.0, 0.25, 2.0).unwrap();
        assert_relative_eq!(scaled * scaled, 4.0 * base * base, epsilon = 1e-12);
        // γ grows with δ.
        let lo = gamma_const(1.0, 0.1, 2.0).unwrap();
        let hi = gamma_const(1.0, 0.5, 2.0).unwrap();
        assert!(lo < hi);
    }

    #[test]
    fn gamma_const_domain() {
        assert!(gamma_const(0.0, 0.5, 1.0).is_err());
        assert!(gamma_const(1.0, 1.0, 1.0).is_err());
        assert!(gamma_const(1.0, 0.0, 1.0).is_err());
        assert!(gamma_const(1.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn c_tilde_worked_values() {
        assert_abs_diff_eq!(c_tilde(1.0, 1.0, 2.0), 4.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c_tilde(1.0, 16.0, 2.0), 16.0, epsilon = 1e-12);
    }

    /// C̄ = C̃·δ̃/(1−δ̃^{1/2})² across a parameter grid, to 1e−12 relative.
    #[test]
    fn constants_consistency_identity() {
        let cs = [0.5, 1.0, 2.0, 10.0, 100.0];
        let deltas = [0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99];
        let etas = [0.05, 0.1, 0.5, 1.0, 2.0, 5.0];
        let ds = [0.5, 3.0];
        let mut checked = 0;
        for &c in &cs {
            for &delta in &deltas {
                for &eta in &etas {
                    for &d in &ds {
                        let gamma = gamma_const(c, delta, eta).unwrap();
                        let lhs = c_bar(gamma, d, eta);
                        let dt = delta_tilde(delta, eta);
                        let rhs = c_tilde(c, d, eta) * dt / (1.0 - dt.sqrt()).powi(2);
                        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked >= 100);
    }

    #[test]
    fn from_tail_derives_gamma() {
        let c = BoundConstants::from_tail(2.0, 1.0, 0.5, 0.5, 0.5).unwrap();
        assert_eq!(c.gamma, gamma_const(1.0, 0.5, 2.0).unwrap());
        assert!(BoundConstants::from_tail(2.0, 1.0, 0.5, -1.0, 0.5).is_err());
    }

    #[test]
    fn tail_fit_recovers_geometric_rate() {
        let mut rng = crate::rng::stream(41, 0);
        let times: Vec<usize> = (0..100_000)
            .map(|_| {
                let u: f64 = rng.random();
                ((1.0 - u).ln() / 0.5f64.ln()).floor() as usize + 1
            })
            .collect();
        let fit = fit_geometric_tail(&times).unwrap();
        assert!(!fit.degenerate);
        assert!(
            (0.47..=0.53).contains(&fit.tail_delta),
            "fitted delta {}",
            fit.tail_delta
        );
        assert!(fit.tail_c >= 1.0 && fit.tail_c < 3.0, "fitted C {}", fit.tail_c);
    }

    #[test]
    fn tail_fit_degenerate_and_errors() {
        let ones = vec![1usize; 200];
        let fit = fit_geometric_tail(&ones).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.tail_c, 1.0);
        assert!(fit.tail_delta > 0.0 && fit.tail_delta < 1e-12);
        assert!(matches!(
            fit_geometric_tail(&[1, 2, 3]),
            Err(BoundError::TooFewMeetingTimes { got: 3 })
        ));
        assert!(matches!(
            fit_geometric_tail(&vec![0usize; 150]),
            Err(BoundError::InvalidMeetingTime { got: 0 })
        ));
    }

    proptest! {
        /// The fitted envelope dominates empirical survival at every t, for
        /// arbitrary meeting-time samples.
        #[test]
        fn tail_fit_envelope_dominates(times in prop::collection::vec(1usize..40, 100..400)) {
            let fit = fit_geometric_tail(&times).unwrap();
            prop_assume!(!fit.degenerate);
            let n = times.len() as f64;
            let max_tau = *times.iter().max().unwrap();
            for t in 0..max_tau {
                let survival = times.iter().filter(|&&tau| tau > t).count() as f64 / n;
                prop_assert!(survival <= fit.tail_c * fit.tail_delta.powi(t as i32) * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn bound_rhs_worked_example() {
        // λ = 0, γ = 1, η = 0, h ≡ 1, E[h(X₀)²] = 1 → 1 + 1.
        let consts = BoundConstants {
            eta: 0.0,
            tail_c: 1.0,
            tail_delta: 0.5,
            moment_bound: 1.0,
            tv_sup: 0.0,
            gamma: 1.0,
        };
        assert_abs_diff_eq!(bound_rhs(1.0, 5.0, 1.0, &consts).unwrap(), 2.0, epsilon = 1e-14);
        let via_samples =
            bound_rhs_from_samples(&[1.0, -1.0, 1.0], 5.0, 1.0, &consts).unwrap();
        assert_abs_diff_eq!(via_samples, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn bound_rhs_monotone_in_inputs() {
        let consts = BoundConstants::from_tail(1.0, 2.0, 0.5, 1.0, 0.3).unwrap();
        let base = bound_rhs(1.0, 1.0, 1.0, &consts).unwrap();
        assert!(bound_rhs(2.0, 1.0, 1.0, &consts).unwrap() > base);
        assert!(bound_rhs(1.0, 2.0, 1.0, &consts).unwrap() > base);
        assert!(bound_rhs(1.0, 1.0, 2.0, &consts).unwrap() > base);
        assert!(bound_rhs(-1.0, 1.0, 1.0, &consts).is_err());
    }

    #[test]
    fn exact_rows_tolerate_equality_only() {
        assert_eq!(CheckRow::exact("x", "t=0", 0.5, 0.5).status, CheckStatus::Certified);
        assert_eq!(
            CheckRow::exact("x", "t=0", 0.5 * (1.0 + 1e-13), 0.5).status,
            CheckStatus::Certified
        );
        assert_eq!(
            CheckRow::exact("x", "t=0", 0.5 * (1.0 + 1e-9), 0.5).status,
            CheckStatus::Failed
        );
        assert_eq!(CheckRow::exact("x", "t=0", 0.0, 0.0).status, CheckStatus::Certified);
    }

    #[test]
    fn monte_carlo_rows_three_way() {
        // Clear pass: mean well under bound, tiny SE.
        let pass = CheckRow::monte_carlo("x", "-", 0.5, 0.01, 1.0);
        assert_eq!(pass.status, CheckStatus::Certified);
        assert!(pass.margin() > 0.0);
        // Clear fail: even LCL above bound.
        let fail = CheckRow::monte_carlo("x", "-", 2.0, 0.01, 1.0);
        assert_eq!(fail.status, CheckStatus::Failed);
        // Upper limit straddles the bound.
        let straddle = CheckRow::monte_carlo("x", "-", 0.99, 0.05, 1.0);
        assert_eq!(straddle.status, CheckStatus::Inconclusive);
        // SE too large relative to the bound, despite UCL below it.
        let noisy = CheckRow::monte_carlo("x", "-", 0.1, 0.25, 1.0);
        assert_eq!(noisy.status, CheckStatus::Inconclusive);
        // Degenerate zero-vs-zero certifies.
        let zero = CheckRow::monte_carlo("x", "-", 0.0, 0.0, 0.0);
        assert_eq!(zero.status, CheckStatus::Certified);
    }

    #[test]
    fn welford_matches_direct_moments() {
        let mut rng = crate::rng::stream(42, 0);
        let values: Vec<f64> = (0..500).map(|_| rng.random_range(-2.0..5.0)).collect();
        let mut w = Welford::default();
        for v in &values {
            w.push(*v);
        }
        let mean = values.iter().sum::<f64>() / 500.0;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 499.0;
        assert_relative_eq!(w.mean, mean, epsilon = 1e-12);
        assert_relative_eq!(w.se(), (var / 500.0).sqrt(), epsilon = 1e-12);
        // Merging two halves reproduces the whole.
        let mut a = Welford::default();
        let mut b = Welford::default();
        for v in &values[..200] {
            a.push(*v);
        }
        for v in &values[200..] {
            b.push(*v);
        }
        let m = Welford::merge(a, b);
        assert_relative_eq!(m.mean, w.mean, epsilon = 1e-12);
        assert_relative_eq!(m.m2, w.m2, epsilon = 1e-9);
    }

    #[test]
    fn main_bound_certifies_and_fails_sanely() {
        let batch = |values: &[f64]| EstimateBatch {
            estimates: values
                .iter()
                .map(|v| crate::estimator::UnbiasedEstimate {
                    value: *v,
                    mcmc_part: *v,
                    correction_part: 0.0,
                    tau: 1,
                    k: 0,
                    m: 0,
                })
                .collect(),
            k: 0,
            m: 0,
            h_label: "h".into(),
        };
        // Zero spread against a positive bound: certified with full margin.
        let report = certify_main_bound(&batch(&[1.0; 50]), 2.0);
        assert_eq!(report.rows[0].status, CheckStatus::Certified);
        assert_abs_diff_eq!(report.rows[0].margin(), 2.0);
        // Spread far above a tiny bound: failed.
        let mut rng = crate::rng::stream(43, 0);
        let noisy: Vec<f64> = (0..400).map(|_| rng.random_range(-10.0..10.0)).collect();
        let report = certify_main_bound(&batch(&noisy), 0.1);
        assert_eq!(report.rows[0].status, CheckStatus::Failed);
        assert!(report.any_failed());
    }

    /// A zero integrand certifies every conclusion row outright, on a real
    /// coupled kernel.
    #[test]
    fn appendix_chain_zero_integrand() {
        let model = Gaussian::standard(1);
        let kernel = CoupledRwm::new(&model, KernelConfig::default_rwm(1));
        let init = |rng: &mut RngStream| -> Vec<f64> {
            vec![rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)]
        };
        let consts = BoundConstants::from_tail(1.0, 2.0, 0.9, 1.0, 1.0).unwrap();
        let grid = AppendixGrid { t_max: 3, n_starts: vec![0], n_prime_max: 5 };
        let report = certify_appendix_chain(
            &kernel,
            &init,
            &|_x: &[f64]| 0.0,
            &consts,
            &grid,
            256,
            5,
            100_000,
            None,
        )
        .unwrap();
        for row in report.rows.iter().filter(|r| r.check == "delta_sq" || r.check == "h_diff") {
            assert_eq!(row.status, CheckStatus::Certified, "row {row:?}");
            assert_eq!(row.empirical, 0.0);
        }
    }

    #[test]
    fn appendix_chain_validates_grid() {
        let model = Gaussian::standard(1);
        let kernel = CoupledRwm::new(&model, KernelConfig::default_rwm(1));
        let init = |_rng: &mut RngStream| vec![0.0];
        let consts = BoundConstants::from_tail(1.0, 1.0, 0.5, 1.0, 1.0).unwrap();
        let grid = AppendixGrid { t_max: 2, n_starts: vec![5], n_prime_max: 5 };
        assert!(matches!(
            certify_appendix_chain(
                &kernel,
                &init,
                &|x: &[f64]| x[0],
                &consts,
                &grid,
                16,
                1,
                1000,
                None
            ),
            Err(BoundError::BadGrid { n: 5, n_prime_max: 5 })
        ));
    }
}
