//! Coupled Markov kernels and the lag-1 trajectory runner.
//!
//! The pair (X, Y) runs two copies of the same MH kernel. Proposals are drawn
//! from a maximal coupling of the two proposal distributions and both chains
//! share the acceptance uniform, so each marginal is an exact MH chain while
//! the pair has a positive chance of proposing — and accepting — the *same*
//! point. Once the chains are bitwise equal they are advanced together and
//! never separate again (faithfulness).
//!
//! Meeting is defined with a lag of one: the runner advances X a single step
//! before coupling begins, and the meeting time is
//! τ = inf{ t ≥ 1 : X_t = Y_{t−1} }.

use rand::Rng;
use thiserror::Error;

use crate::rng::RngStream;
use crate::target::TargetModel;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("step_size must be positive and finite, got {0}")]
    InvalidStepSize(f64),
    #[error("maximal coupling rejection loop exceeded {attempts} attempts")]
    RejectionLoopExceeded { attempts: u64 },
    #[error("chains had not met after {steps} steps (max_iterations = {max_iterations})")]
    NotMet { steps: u64, max_iterations: u64 },
    #[error("state has length {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

/// Hard cap on the residual-sampling rejection loop; hitting it indicates a
/// broken proposal configuration rather than bad luck.
const MAX_REJECTION_ATTEMPTS: u64 = 1_000_000;

/// The coupled pair. `met` is sticky: once true, `x` and `y` are the same
/// bit pattern forever after.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub met: bool,
}

impl CoupledState {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let met = x == y;
        Self { x, y, met }
    }
}

/// A recorded coupled run: `xs[t] = X_t` for t = 0..=len, `ys[t] = Y_t` for
/// t = 0..len, and the meeting time τ (so `xs[tau] == ys[tau - 1]`).
#[derive(Debug, Clone)]
pub struct CoupledTrajectory {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    pub tau: usize,
}

impl CoupledTrajectory {
    /// Number of transitions recorded for the X chain.
    pub fn len(&self) -> usize {
        self.xs.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Random-walk / Langevin proposal scales.
#[derive(Debug, Clone, Copy)]
pub struct KernelConfig {
    pub step_size: f64,
}

impl KernelConfig {
    pub fn new(step_size: f64) -> Result<Self, KernelError> {
        if !(step_size > 0.0) || !step_size.is_finite() {
            return Err(KernelError::InvalidStepSize(step_size));
        }
        Ok(Self { step_size })
    }

    /// 2.38 / √d, the classic random-walk scaling.
    pub fn default_rwm(dim: usize) -> Self {
        Self { step_size: 2.38 / (dim.max(1) as f64).sqrt() }
    }

    /// d^{−1/6}, the usual Langevin scaling.
    pub fn default_mala(dim: usize) -> Self {
        Self { step_size: (dim.max(1) as f64).powf(-1.0 / 6.0) }
    }
}

/// Anything that can advance one chain, or the coupled pair, by one step.
pub trait CoupledKernel: Sync {
    fn dim(&self) -> usize;
    /// One marginal transition.
    fn step(&self, x: &[f64], rng: &mut RngStream) -> Vec<f64>;
    /// One coupled transition. Implementations must preserve the marginal law
    /// of each component and keep met pairs together.
    fn coupled_step(&self, state: &CoupledState, rng: &mut RngStream) -> CoupledState;
}

fn sample_standard_normal(dim: usize, rng: &mut RngStream) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// log N(v; mean, scale²I) up to the additive constant shared by equal scales.
fn log_kernel_density(v: &[f64], mean: &[f64], scale: f64) -> f64 {
    let mut q = 0.0;
    for (vi, mi) in v.iter().zip(mean) {
        let d = (vi - mi) / scale;
        q += d * d;
    }
    -0.5 * q
}

/// Samples a maximal coupling of N(mean_x, scale²I) and N(mean_y, scale²I)
/// by the reflection-free rejection construction: draw the X proposal, accept
/// it for both chains with probability q(v)/p(v) ∧ 1, otherwise rejection-
/// sample the Y proposal from the residual q − p ∧ q.
///
/// Returns `(proposal_x, proposal_y, coupled)`; `coupled` means the two
/// proposals are the same bit pattern. The probability of `coupled` equals
/// 1 − d_TV of the two proposal laws.
pub fn maximal_coupling_gaussians(
    mean_x: &[f64],
    mean_y: &[f64],
    scale: f64,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>, bool), KernelError> {
    if mean_x.len() != mean_y.len() {
        return Err(KernelError::DimensionMismatch {
            got: mean_y.len(),
            expected: mean_x.len(),
        });
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(KernelError::InvalidStepSize(scale));
    }
    let d = mean_x.len();
    let z = sample_standard_normal(d, rng);
    let xp: Vec<f64> = mean_x.iter().zip(&z).map(|(m, zi)| m + scale * zi).collect();
    let log_u: f64 = rng.random::<f64>().ln();
    if log_u + log_kernel_density(&xp, mean_x, scale) <= log_kernel_density(&xp, mean_y, scale) {
        return Ok((xp.clone(), xp, true));
    }
    for _ in 0..MAX_REJECTION_ATTEMPTS {
        let z = sample_standard_normal(d, rng);
        let yp: Vec<f64> = mean_y.iter().zip(&z).map(|(m, zi)| m + scale * zi).collect();
        let log_w: f64 = rng.random::<f64>().ln();
        if log_w + log_kernel_density(&yp, mean_y, scale) > log_kernel_density(&yp, mean_x, scale)
        {
            return Ok((xp, yp, false));
        }
    }
    Err(KernelError::RejectionLoopExceeded { attempts: MAX_REJECTION_ATTEMPTS })
}

/// Shared machinery for the two MH kernels: propose via maximal coupling,
/// accept with a single shared uniform.
fn coupled_mh_step<M: TargetModel + ?Sized>(
    model: &M,
    state: &CoupledState,
    scale: f64,
    drift: impl Fn(&[f64]) -> Vec<f64>,
    log_accept: impl Fn(&[f64], &[f64]) -> f64,
    rng: &mut RngStream,
) -> CoupledState {
    let _ = model;
    if state.met {
        // Advance together: one proposal, one uniform, identical decision.
        let mean = drift(&state.x);
        let z = sample_standard_normal(mean.len(), rng);
        let prop: Vec<f64> = mean.iter().zip(&z).map(|(m, zi)| m + scale * zi).collect();
        let log_u: f64 = rng.random::<f64>().ln();
        let next = if log_u <= log_accept(&state.x, &prop) { prop } else { state.x.clone() };
        return CoupledState { x: next.clone(), y: next, met: true };
    }
    let mean_x = drift(&state.x);
    let mean_y = drift(&state.y);
    let (prop_x, prop_y, _) = maximal_coupling_gaussians(&mean_x, &mean_y, scale, rng)
        .expect("proposal means and scale validated by kernel constructor");
    let log_u: f64 = rng.random::<f64>().ln();
    let new_x = if log_u <= log_accept(&state.x, &prop_x) { prop_x } else { state.x.clone() };
    let new_y = if log_u <= log_accept(&state.y, &prop_y) { prop_y } else { state.y.clone() };
    let met = new_x == new_y;
    CoupledState { x: new_x, y: new_y, met }
}

/// Coupled random-walk Metropolis: proposals N(x, step²I), maximally coupled;
/// the acceptance ratio needs only the target log densities.
pub struct CoupledRwm<'a, M: TargetModel + ?Sized> {
    model: &'a M,
    config: KernelConfig,
}

impl<'a, M: TargetModel + ?Sized> CoupledRwm<'a, M> {
    pub fn new(model: &'a M, config: KernelConfig) -> Self {
        Self { model, config }
    }
}

impl<M: TargetModel + ?Sized> CoupledKernel for CoupledRwm<'_, M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn step(&self, x: &[f64], rng: &mut RngStream) -> Vec<f64> {
        let scale = self.config.step_size;
        let z = sample_standard_normal(x.len(), rng);
        let prop: Vec<f64> = x.iter().zip(&z).map(|(xi, zi)| xi + scale * zi).collect();
        let log_u: f64 = rng.random::<f64>().ln();
        if log_u <= self.model.log_density(&prop) - self.model.log_density(x) {
            prop
        } else {
            x.to_vec()
        }
    }

    fn coupled_step(&self, state: &CoupledState, rng: &mut RngStream) -> CoupledState {
        coupled_rwm_step(self.model, state, self.config, rng)
    }
}

/// One coupled RWM transition. A met state stays met; an unmet state meets
/// exactly when the proposals couple and both chains accept.
pub fn coupled_rwm_step<M: TargetModel + ?Sized>(
    model: &M,
    state: &CoupledState,
    config: KernelConfig,
    rng: &mut RngStream,
) -> CoupledState {
    coupled_mh_step(
        model,
        state,
        config.step_size,
        |x| x.to_vec(),
        |cur, prop| model.log_density(prop) - model.log_density(cur),
        rng,
    )
}

fn mala_mean<M: TargetModel + ?Sized>(model: &M, x: &[f64], step: f64) -> Vec<f64> {
    let s = model.score(x);
    x.iter().zip(&s).map(|(xi, si)| xi + 0.5 * step * step * si).collect()
}

/// Coupled MALA: Langevin proposals N(x + ½ε²∇log π(x), ε²I) under the same
/// maximal-coupling / shared-uniform scheme; the acceptance ratio carries the
/// forward/reverse proposal densities.
pub struct CoupledMala<'a, M: TargetModel + ?Sized> {
    model: &'a M,
    config: KernelConfig,
}

impl<'a, M: TargetModel + ?Sized> CoupledMala<'a, M> {
    pub fn new(model: &'a M, config: KernelConfig) -> Self {
        Self { model, config }
    }
}

impl<M: TargetModel + ?Sized> CoupledKernel for CoupledMala<'_, M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn step(&self, x: &[f64], rng: &mut RngStream) -> Vec<f64> {
        let step = self.config.step_size;
        let mean = mala_mean(self.model, x, step);
        let z = sample_standard_normal(x.len(), rng);
        let prop: Vec<f64> = mean.iter().zip(&z).map(|(m, zi)| m + step * zi).collect();
        let log_u: f64 = rng.random::<f64>().ln();
        if log_u <= mala_log_accept(self.model, x, &prop, step) {
            prop
        } else {
            x.to_vec()
        }
    }

    fn coupled_step(&self, state: &CoupledState, rng: &mut RngStream) -> CoupledState {
        coupled_mala_step(self.model, state, self.config, rng)
    }
}

fn mala_log_accept<M: TargetModel + ?Sized>(
    model: &M,
    cur: &[f64],
    prop: &[f64],
    step: f64,
) -> f64 {
    let forward = log_kernel_density(prop, &mala_mean(model, cur, step), step);
    let reverse = log_kernel_density(cur, &mala_mean(model, prop, step), step);
    model.log_density(prop) - model.log_density(cur) + reverse - forward
}

/// One coupled MALA transition; see [`coupled_rwm_step`] for the met/unmet
/// contract.
pub fn coupled_mala_step<M: TargetModel + ?Sized>(
    model: &M,
    state: &CoupledState,
    config: KernelConfig,
    rng: &mut RngStream,
) -> CoupledState {
    let step = config.step_size;
    coupled_mh_step(
        model,
        state,
        step,
        |x| mala_mean(model, x, step),
        |cur, prop| mala_log_accept(model, cur, prop, step),
        rng,
    )
}

/// Runs the lag-1 coupled pair from `init` draws until both the horizon `m`
/// and the meeting time are reached, recording every state.
///
/// X is advanced one step before coupling starts; thereafter each iteration
/// advances the pair (X_{t+1}, Y_t) → (X_{t+2}, Y_{t+1}). The returned
/// trajectory has `max(m, τ)` X-transitions. If the chains have not met after
/// `max_iterations` coupled steps the run aborts with [`KernelError::NotMet`].
pub fn run_coupled<K: CoupledKernel + ?Sized>(
    kernel: &K,
    init: &(impl Fn(&mut RngStream) -> Vec<f64> + ?Sized),
    m: usize,
    max_iterations: u64,
    rng: &mut RngStream,
) -> Result<CoupledTrajectory, KernelError> {
    let x0 = init(rng);
    let y0 = init(rng);
    let x1 = kernel.step(&x0, rng);
    let mut state = CoupledState::new(x1, y0);
    let mut xs = vec![x0, state.x.clone()];
    let mut ys = vec![state.y.clone()];
    let mut tau: Option<usize> = if state.met { Some(1) } else { None };
    let mut t = 1usize;
    while tau.is_none() || t < m.max(tau.unwrap()) {
        if tau.is_none() && t as u64 > max_iterations {
            return Err(KernelError::NotMet { steps: t as u64, max_iterations });
        }
        state = kernel.coupled_step(&state, rng);
        t += 1;
        xs.push(state.x.clone());
        ys.push(state.y.clone());
        if tau.is_none() && state.met {
            tau = Some(t);
        }
    }
    Ok(CoupledTrajectory { xs, ys, tau: tau.expect("loop exits only once met") })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::target::{make_gaussian, Gaussian};
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn std_init(rng: &mut RngStream) -> Vec<f64> {
        vec![StandardNormal.sample(rng)]
    }

    #[test]
    fn identical_means_always_couple() {
        let mut rng = stream(1, 0);
        for _ in 0..200 {
            let (xp, yp, coupled) =
                maximal_coupling_gaussians(&[0.3, -1.0], &[0.3, -1.0], 0.7, &mut rng).unwrap();
            assert!(coupled);
            assert_eq!(xp, yp);
        }
    }

    /// P(couple) = 1 − d_TV(N(0,1), N(1,1)) = 2Φ(−1/2) ≈ 0.6170750774519738.
    #[test]
    fn coupling_probability_matches_total_variation() {
        let mut rng = stream(2, 0);
        let n = 100_000;
        let mut met = 0u64;
        for _ in 0..n {
            let (_, _, coupled) =
                maximal_coupling_gaussians(&[0.0], &[1.0], 1.0, &mut rng).unwrap();
            met += coupled as u64;
        }
        let p_hat = met as f64 / n as f64;
        let p = 0.6170750774519738;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((p_hat - p).abs() <= 4.0 * se, "p_hat = {p_hat}, want {p} ± {}", 4.0 * se);
    }

    /// Both marginals of the maximal coupling must be the advertised normals;
    /// checked by Kolmogorov–Smirnov against Φ at the 1e-3 level.
    #[test]
    fn maximal_coupling_marginals_pass_ks() {
        let mut rng = stream(3, 0);
        let n = 100_000usize;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let (xp, yp, _) =
                maximal_coupling_gaussians(&[0.0], &[1.5], 1.0, &mut rng).unwrap();
            xs.push(xp[0]);
            ys.push(yp[0] - 1.5);
        }
        // K-S critical value at α = 1e-3: √(ln(2/α) / 2n).
        let crit = ((2.0f64 / 1e-3).ln() / (2.0 * n as f64)).sqrt();
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        for sample in [&mut xs, &mut ys] {
            sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut ks: f64 = 0.0;
            for (i, v) in sample.iter().enumerate() {
                let cdf = statrs::distribution::ContinuousCDF::cdf(&normal, *v);
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                ks = ks.max((cdf - lo).abs()).max((hi - cdf).abs());
            }
            assert!(ks < crit, "KS statistic {ks} ≥ {crit}");
        }
    }

    #[test]
    fn met_state_stays_met_and_identical() {
        let model = Gaussian::standard(2);
        let config = KernelConfig::default_rwm(2);
        let mut rng = stream(4, 0);
        let mut state = CoupledState::new(vec![0.5, -0.5], vec![0.5, -0.5]);
        assert!(state.met);
        for _ in 0..100 {
            state = coupled_rwm_step(&model, &state, config, &mut rng);
            assert!(state.met);
            assert_eq!(state.x, state.y);
        }
        let mut state = CoupledState::new(vec![0.1, 0.2], vec![0.1, 0.2]);
        for _ in 0..100 {
            state = coupled_mala_step(&model, &state, config, &mut rng);
            assert!(state.met);
            assert_eq!(state.x, state.y);
        }
    }

    #[test]
    fn meeting_is_sticky_after_first_meeting() {
        let model = Gaussian::standard(1);
        let config = KernelConfig::default_rwm(1);
        let mut rng = stream(5, 0);
        let mut state = CoupledState::new(vec![3.0], vec![-3.0]);
        let mut met_at: Option<usize> = None;
        for t in 0..2_000 {
            state = coupled_rwm_step(&model, &state, config, &mut rng);
            if state.met && met_at.is_none() {
                met_at = Some(t);
            }
            if met_at.is_some() {
                assert_eq!(state.x, state.y);
            }
        }
        assert!(met_at.is_some(), "chains never met in 2000 steps");
    }

    /// The x-marginal of the coupled RWM chain is ordinary RWM: long-run mean
    /// and variance of N(0,1) within 4 standard errors.
    #[test]
    fn coupled_rwm_marginal_is_correct() {
        let model = Gaussian::standard(1);
        let config = KernelConfig::default_rwm(1);
        let mut rng = stream(6, 0);
        let mut state = CoupledState::new(vec![1.5], vec![-0.5]);
        let burn = 500;
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for t in 0..(burn + n) {
            state = coupled_rwm_step(&model, &state, config, &mut rng);
            if t >= burn {
                sum += state.x[0];
                sumsq += state.x[0] * state.x[0];
            }
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        // Effective sample size is roughly n/4 at this step size; allow 4 SE
        // with a conservative ESS of n/10.
        let se_mean = (10.0 / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * se_mean, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    /// MALA with a tiny step size has proposal mean ≈ current point.
    #[test]
    fn mala_drift_vanishes_with_step_size() {
        let model = Gaussian::standard(3);
        let x = vec![0.7, -1.3, 2.2];
        let mean = mala_mean(&model, &x, 1e-8);
        for (m, xi) in mean.iter().zip(&x) {
            assert_abs_diff_eq!(*m, *xi, epsilon = 1e-12);
        }
    }

    /// Long-run MALA variance on a correlated Gaussian within 5%.
    #[test]
    fn mala_marginal_variance() {
        let cov = nalgebra::DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let model = make_gaussian(vec![0.0, 0.0], cov).unwrap();
        let kernel = CoupledMala::new(&model, KernelConfig::new(0.9).unwrap());
        let mut rng = stream(7, 0);
        let mut x = vec![0.0, 0.0];
        let burn = 1_000;
        let n = 100_000;
        let mut sumsq = 0.0;
        for t in 0..(burn + n) {
            x = kernel.step(&x, &mut rng);
            if t >= burn {
                sumsq += x[0] * x[0];
            }
        }
        let var = sumsq / n as f64;
        assert!((var - 2.0).abs() / 2.0 < 0.05, "first-coordinate variance {var}, want 2.0");
    }

    /// RWM acceptance rate at the default scaling sits in the healthy band.
    #[test]
    fn rwm_acceptance_rate_in_band() {
        let model = Gaussian::standard(5);
        let kernel = CoupledRwm::new(&model, KernelConfig::default_rwm(5));
        let mut rng = stream(8, 0);
        let mut x = vec![0.0; 5];
        let mut accepted = 0u32;
        let n = 10_000;
        for _ in 0..n {
            let next = kernel.step(&x, &mut rng);
            if next != x {
                accepted += 1;
            }
            x = next;
        }
        let rate = accepted as f64 / n as f64;
        assert!((0.2..0.7).contains(&rate), "acceptance rate {rate}");
    }

    #[test]
    fn run_coupled_records_consistent_trajectory() {
        let model = Gaussian::standard(1);
        let kernel = CoupledRwm::new(&model, KernelConfig::default_rwm(1));
        let mut rng = stream(9, 0);
        for m in [0usize, 5, 50] {
            let traj = run_coupled(&kernel, &std_init, m, 100_000, &mut rng).unwrap();
            let t_end = traj.len();
            assert_eq!(t_end, m.max(traj.tau));
            assert_eq!(traj.xs.len(), t_end + 1);
            assert_eq!(traj.ys.len(), t_end);
            assert!(traj.tau >= 1);
            // Meeting and faithfulness in the recorded states.
            assert_eq!(traj.xs[traj.tau], traj.ys[traj.tau - 1]);
            for t in traj.tau..t_end {
                assert_eq!(traj.xs[t + 1], traj.ys[t]);
            }
            for t in 1..traj.tau {
                assert_ne!(traj.xs[t], traj.ys[t - 1]);
            }
        }
    }

    /// Every one of 1000 standard-normal RWM pairs meets well before 10⁵
    /// steps; meeting times on this easy target are typically tiny.
    #[test]
    fn standard_normal_pairs_always_meet() {
        let model = Gaussian::standard(1);
        let kernel = CoupledRwm::new(&model, KernelConfig::default_rwm(1));
        for r in 0..1_000u64 {
            let mut rng = stream(10, r);
            let traj = run_coupled(&kernel, &std_init, 0, 100_000, &mut rng).unwrap();
            assert!(traj.tau < 100_000);
        }
    }

    /// A deterministic identity kernel from identical inits meets at τ = 1
    /// and the trajectory stops immediately when m = 0.
    #[test]
    fn identity_kernel_meets_at_one() {
        struct Identity;
        impl CoupledKernel for Identity {
            fn dim(&self) -> usize {
                1
            }
            fn step(&self, x: &[f64], _rng: &mut RngStream) -> Vec<f64> {
                x.to_vec()
            }
            fn coupled_step(&self, state: &CoupledState, _rng: &mut RngStream) -> CoupledState {
                state.clone()
            }
        }
        let mut rng = stream(11, 0);
        let traj = run_coupled(&Identity, &|_: &mut RngStream| vec![2.5], 0, 10, &mut rng).unwrap();
        assert_eq!(traj.tau, 1);
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.xs, vec![vec![2.5], vec![2.5]]);
        assert_eq!(traj.ys, vec![vec![2.5]]);
    }

    /// A kernel that never meets must abort with the configured cap.
    #[test]
    fn never_meeting_kernel_reports_not_met() {
        struct Drift;
        impl CoupledKernel for Drift {
            fn dim(&self) -> usize {
                1
            }
            fn step(&self, x: &[f64], _rng: &mut RngStream) -> Vec<f64> {
                vec![x[0] + 1.0]
            }
            fn coupled_step(&self, state: &CoupledState, _rng: &mut RngStream) -> CoupledState {
                CoupledState::new(vec![state.x[0] + 1.0], vec![state.y[0] - 1.0])
            }
        }
        let mut rng = stream(12, 0);
        let err = run_coupled(&Drift, &|_: &mut RngStream| vec![0.0], 0, 50, &mut rng).unwrap_err();
        assert!(matches!(err, KernelError::NotMet { max_iterations: 50, .. }));
    }
}
