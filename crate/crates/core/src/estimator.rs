//! The coupled-chain unbiased estimator.
//!
//! For a trajectory with meeting time τ, window k..=m and integrand h,
//!
//! ```text
//! H_{k:m} = (m−k+1)⁻¹ Σ_{t=k}^{m} h(X_t)
//!         + Σ_{t=k+1}^{τ−1} min(1, (t−k)/(m−k+1)) · (h(X_t) − h(Y_{t−1}))
//! ```
//!
//! The first term is the usual MCMC time average; the second is the coupling
//! correction that removes its bias exactly, in expectation, for any k ≤ m and
//! any initial distribution. Averages of independent replicates of H are the
//! estimator π̂; their spread yields the variance estimates below.
//!
//! All sums here are compensated (Kahan); at the window lengths where it
//! matters (beyond ~10⁴ terms) plain summation visibly drifts, and below that
//! the cost is noise.

use rayon::prelude::*;
use thiserror::Error;

use crate::coupling::{run_coupled, CoupledKernel, CoupledTrajectory, KernelError};
use crate::rng::{stream, RngStream};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("window requires k ≤ m, got k = {k}, m = {m}")]
    InvalidWindow { k: usize, m: usize },
    #[error("trajectory records {len} transitions, need at least {needed}")]
    TrajectoryTooShort { len: usize, needed: usize },
    #[error("integrand returned {got} components, expected {expected}")]
    ComponentMismatch { got: usize, expected: usize },
    #[error("need at least {need} replicates, got {got}")]
    TooFewReplicates { got: usize, need: usize },
    #[error("replicates {indices:?} did not meet within max_iterations")]
    NotMet { indices: Vec<usize> },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// One replicate's estimate, split into its two terms (`value` is always
/// exactly `mcmc_part + correction_part`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnbiasedEstimate {
    pub value: f64,
    pub mcmc_part: f64,
    pub correction_part: f64,
    pub tau: usize,
    pub k: usize,
    pub m: usize,
}

/// R independent replicates of H_{k:m} for one scalar integrand.
#[derive(Debug, Clone)]
pub struct EstimateBatch {
    pub estimates: Vec<UnbiasedEstimate>,
    pub k: usize,
    pub m: usize,
    pub h_label: String,
}

impl EstimateBatch {
    pub fn r(&self) -> usize {
        self.estimates.len()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.estimates.iter().map(|e| e.value)
    }

    pub fn taus(&self) -> impl Iterator<Item = usize> + '_ {
        self.estimates.iter().map(|e| e.tau)
    }
}

#[derive(Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, v: f64) {
        let y = v - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    fn total(self) -> f64 {
        self.sum
    }
}

fn check_window(traj: &CoupledTrajectory, k: usize, m: usize) -> Result<(), EstimatorError> {
    if k > m {
        return Err(EstimatorError::InvalidWindow { k, m });
    }
    let needed = m.max(traj.tau);
    if traj.len() < needed {
        return Err(EstimatorError::TrajectoryTooShort { len: traj.len(), needed });
    }
    Ok(())
}

/// Evaluates H_{k:m} for a vector integrand, visiting each recorded state
/// once. `q` is the number of components `h_vec` must return.
pub fn h_km_vector(
    traj: &CoupledTrajectory,
    h_vec: impl Fn(&[f64]) -> Vec<f64>,
    q: usize,
    k: usize,
    m: usize,
) -> Result<Vec<UnbiasedEstimate>, EstimatorError> {
    check_window(traj, k, m)?;
    let span = (m - k + 1) as f64;
    let mut mcmc = vec![Kahan::default(); q];
    let mut corr = vec![Kahan::default(); q];
    let t_hi = m.max(traj.tau.saturating_sub(1));
    for t in k..=t_hi {
        let hx = h_vec(&traj.xs[t]);
        if hx.len() != q {
            return Err(EstimatorError::ComponentMismatch { got: hx.len(), expected: q });
        }
        if t <= m {
            for (acc, v) in mcmc.iter_mut().zip(&hx) {
                acc.add(*v);
            }
        }
        if t >= k + 1 && t + 1 <= traj.tau {
            let hy = h_vec(&traj.ys[t - 1]);
            if hy.len() != q {
                return Err(EstimatorError::ComponentMismatch { got: hy.len(), expected: q });
            }
            let weight = (((t - k) as f64) / span).min(1.0);
            for ((acc, vx), vy) in corr.iter_mut().zip(&hx).zip(&hy) {
                acc.add(weight * (vx - vy));
            }
        }
    }
    Ok((0..q)
        .map(|j| {
            let mcmc_part = mcmc[j].total() / span;
            let correction_part = corr[j].total();
            UnbiasedEstimate {
                value: mcmc_part + correction_part,
                mcmc_part,
                correction_part,
                tau: traj.tau,
                k,
                m,
            }
        })
        .collect())
}

/// Scalar-integrand version of [`h_km_vector`].
pub fn h_km(
    traj: &CoupledTrajectory,
    h: impl Fn(&[f64]) -> f64,
    k: usize,
    m: usize,
) -> Result<UnbiasedEstimate, EstimatorError> {
    let single = h_km_vector(traj, |x| vec![h(x)], 1, k, m)?;
    Ok(single[0])
}

/// A simulated replicate: its per-component estimates plus anything the
/// caller extracted from the raw trajectory before it was dropped.
pub struct ReplicateRecord<T> {
    pub estimates: Vec<UnbiasedEstimate>,
    pub tau: usize,
    pub extra: T,
}

/// Simulates replicates `0..r` in parallel, each on its own derived RNG
/// stream, and returns results ordered by replicate index regardless of which
/// worker ran what. `extract` sees each trajectory before it is discarded.
pub fn run_replicates<K, I, H, F, T>(
    kernel: &K,
    init: &I,
    h_vec: &H,
    q: usize,
    k: usize,
    m: usize,
    r: usize,
    root_seed: u64,
    max_iterations: u64,
    extract: &F,
) -> Vec<Result<ReplicateRecord<T>, EstimatorError>>
where
    K: CoupledKernel + ?Sized,
    I: Fn(&mut RngStream) -> Vec<f64> + Sync + ?Sized,
    H: Fn(&[f64]) -> Vec<f64> + Sync,
    F: Fn(&CoupledTrajectory) -> T + Sync,
    T: Send,
{
    (0..r)
        .into_par_iter()
        .map(|idx| {
            let mut rng = stream(root_seed, idx as u64);
            let traj = run_coupled(kernel, init, m, max_iterations, &mut rng)?;
            let estimates = h_km_vector(&traj, h_vec, q, k, m)?;
            let extra = extract(&traj);
            Ok(ReplicateRecord { estimates, tau: traj.tau, extra })
        })
        .collect()
}

/// Runs `r` replicates of H_{k:m} for a `q`-component integrand and groups
/// the results into one [`EstimateBatch`] per component (labelled `h0`,
/// `h1`, …; callers may relabel).
///
/// Any replicate that fails to meet aborts the whole batch: the error lists
/// every failing index so the caller can report or rerun them.
#[allow(clippy::too_many_arguments)]
pub fn replicate<K, I, H>(
    kernel: &K,
    init: &I,
    h_vec: &H,
    q: usize,
    k: usize,
    m: usize,
    r: usize,
    root_seed: u64,
    max_iterations: u64,
) -> Result<Vec<EstimateBatch>, EstimatorError>
where
    K: CoupledKernel + ?Sized,
    I: Fn(&mut RngStream) -> Vec<f64> + Sync + ?Sized,
    H: Fn(&[f64]) -> Vec<f64> + Sync,
{
    if k > m {
        return Err(EstimatorError::InvalidWindow { k, m });
    }
    let results =
        run_replicates(kernel, init, h_vec, q, k, m, r, root_seed, max_iterations, &|_| ());
    let mut records = Vec::with_capacity(r);
    let mut not_met = Vec::new();
    for (idx, res) in results.into_iter().enumerate() {
        match res {
            Ok(rec) => records.push(rec),
            Err(EstimatorError::Kernel(KernelError::NotMet { .. })) => not_met.push(idx),
            Err(other) => return Err(other),
        }
    }
    if !not_met.is_empty() {
        return Err(EstimatorError::NotMet { indices: not_met });
    }
    Ok((0..q)
        .map(|j| EstimateBatch {
            estimates: records.iter().map(|rec| rec.estimates[j]).collect(),
            k,
            m,
            h_label: format!("h{j}"),
        })
        .collect())
}

/// The point estimate: the average of the replicate values.
pub fn pi_hat(batch: &EstimateBatch) -> Result<f64, EstimatorError> {
    if batch.r() == 0 {
        return Err(EstimatorError::TooFewReplicates { got: 0, need: 1 });
    }
    let mut acc = Kahan::default();
    for v in batch.values() {
        acc.add(v);
    }
    Ok(acc.total() / batch.r() as f64)
}

/// The sample-splitting variance estimator: the variance of the first ⌊R/2⌋
/// replicate values with denominator ⌊R/2⌋, exactly as displayed in the
/// method. Needs R ≥ 4 so the fitting half has at least two points.
pub fn sigma_hat_split(batch: &EstimateBatch) -> Result<f64, EstimatorError> {
    sigma_hat_split_opts(batch, false)
}

/// [`sigma_hat_split`] with an optional unbiased (⌊R/2⌋ − 1) denominator.
/// Nothing in the harness uses the unbiased form by default; it exists for
/// comparison.
pub fn sigma_hat_split_opts(
    batch: &EstimateBatch,
    unbiased_denominator: bool,
) -> Result<f64, EstimatorError> {
    let half = batch.r() / 2;
    if half < 2 {
        return Err(EstimatorError::TooFewReplicates { got: batch.r(), need: 4 });
    }
    let first: Vec<f64> = batch.values().take(half).collect();
    let denom = if unbiased_denominator { half - 1 } else { half } as f64;
    Ok(biased_variance_with_denom(&first, denom))
}

fn biased_variance_with_denom(values: &[f64], denom: f64) -> f64 {
    let n = values.len() as f64;
    let mut mean = Kahan::default();
    for v in values {
        mean.add(*v);
    }
    let mean = mean.total() / n;
    let mut ss = Kahan::default();
    for v in values {
        let d = v - mean;
        ss.add(d * d);
    }
    ss.total() / denom
}

/// Plain sample variance over all R replicates (denominator R − 1), used for
/// reporting and variance-reduction ratios.
pub fn sigma_hat_full(batch: &EstimateBatch) -> Result<f64, EstimatorError> {
    if batch.r() < 2 {
        return Err(EstimatorError::TooFewReplicates { got: batch.r(), need: 2 });
    }
    let values: Vec<f64> = batch.values().collect();
    Ok(biased_variance_with_denom(&values, (values.len() - 1) as f64))
}

/// Variance over the given replicate values with the splitting convention's
/// denominator (n, not n − 1); used when the caller has already isolated the
/// fitting half.
pub fn fitting_half_variance(values: &[f64]) -> f64 {
    biased_variance_with_denom(values, values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{CoupledRwm, KernelConfig};
    use crate::target::Gaussian;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn batch_of(values: &[f64]) -> EstimateBatch {
        EstimateBatch {
            estimates: values
                .iter()
                .map(|v| UnbiasedEstimate {
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
        }
    }

    fn hand_trajectory() -> CoupledTrajectory {
        // τ = 2: X = (1, 2, 5), Y = (1, 5); X₁ ≠ Y₀ but X₂ = Y₁.
        CoupledTrajectory {
            xs: vec![vec![1.0], vec![2.0], vec![5.0]],
            ys: vec![vec![1.0], vec![5.0]],
            tau: 2,
        }
    }

    #[test]
    fn worked_example_k0_m0() {
        let traj = hand_trajectory();
        let e = h_km(&traj, |x| x[0], 0, 0).unwrap();
        assert_abs_diff_eq!(e.mcmc_part, 1.0);
        assert_abs_diff_eq!(e.correction_part, 1.0);
        assert_abs_diff_eq!(e.value, 2.0);
        assert_eq!(e.tau, 2);
    }

    #[test]
    fn correction_empty_once_tau_at_most_k_plus_one() {
        let traj = hand_trajectory();
        let e = h_km(&traj, |x| x[0], 1, 2).unwrap();
        assert_abs_diff_eq!(e.correction_part, 0.0);
        assert_abs_diff_eq!(e.value, (2.0 + 5.0) / 2.0);
    }

    #[test]
    fn constant_integrand_is_exact() {
        let traj = hand_trajectory();
        let e = h_km(&traj, |_| 3.25, 0, 1).unwrap();
        assert_eq!(e.value, 3.25);
        assert_eq!(e.correction_part, 0.0);
    }

    #[test]
    fn window_and_length_validation() {
        let traj = hand_trajectory();
        assert!(matches!(
            h_km(&traj, |x| x[0], 2, 1),
            Err(EstimatorError::InvalidWindow { k: 2, m: 1 })
        ));
        assert!(matches!(
            h_km(&traj, |x| x[0], 0, 7),
            Err(EstimatorError::TrajectoryTooShort { len: 2, needed: 7 })
        ));
    }

    #[test]
    fn vector_matches_scalar_components() {
        let model = Gaussian::standard(1);
        let kernel = CoupledRwm::new(&model, KernelConfig::default_rwm(1));
        let mut rng = crate::rng::stream(21, 0);
        let init = |rng: &mut RngStream| -> Vec<f64> { vec![StandardNormal.sample(rng)] };
        let traj = run_coupled(&kernel, &init, 30, 100_000, &mut rng).unwrap();
        let pair = h_km_vector(&traj, |x| vec![x[0], x[0] * x[0]], 2, 3, 30).unwrap();
        let first = h_km(&traj, |x| x[0], 3, 30).unwrap();
        let second = h_km(&traj, |x| x[0] * x[0], 3, 30).unwrap();
        assert_eq!(pair[0], first);
        assert_eq!(pair[1], second);
    }

    /// H is linear in the integrand, and value always equals the sum of its
    /// two parts. Checked over freshly simulated trajectories.
    #[test]
    fn linearity_over_simulated_trajectories() {
        let model = Gaussian::standard(2);
        let kernel = CoupledRwm::new(&model, KernelConfig::default_rwm(2));
        let init = |rng: &mut RngStream| -> Vec<f64> {
            vec![StandardNormal.sample(rng), StandardNormal.sample(rng)]
        };
        for seed in 0..40u64 {
            let mut rng = crate::rng::stream(22, seed);
            let traj = run_coupled(&kernel, &init, 25, 100_000, &mut rng).unwrap();
            let (k, m) = match seed % 3 {
                0 => (0, 0),
                1 => (0, 25),
                _ => (5, 20),
            };
            let f = |x: &[f64]| x[0];
            let g = |x: &[f64]| x[1] * x[1] - x[0];
            let hf = h_km(&traj, f, k, m).unwrap();
            let hg = h_km(&traj, g, k, m).unwrap();
            let combo = h_km(&traj, |x| 2.0 * f(x) + 3.0 * g(x), k, m).unwrap();
            assert_abs_diff_eq!(
                combo.value,
                2.0 * hf.value + 3.0 * hg.value,
                epsilon = 1e-12
            );
            assert_eq!(hf.value, hf.mcmc_part + hf.correction_part);
        }
    }

    #[test]
    fn sigma_hat_split_worked_examples() {
        // First half {1, 2}: mean 1.5, biased variance 0.25.
        assert_eq!(sigma_hat_split(&batch_of(&[1.0, 2.0, 3.0, 4.0])).unwrap(), 0.25);
        // First half {0, 2}: the later outliers are invisible to it.
        assert_eq!(sigma_hat_split(&batch_of(&[0.0, 2.0, 100.0, 100.0])).unwrap(), 1.0);
        assert!(matches!(
            sigma_hat_split(&batch_of(&[1.0, 2.0, 3.0])),
            Err(EstimatorError::TooFewReplicates { got: 3, need: 4 })
        ));
        // Unbiased-denominator variant doubles the n = 2 example.
        assert_eq!(
            sigma_hat_split_opts(&batch_of(&[1.0, 2.0, 3.0, 4.0]), true).unwrap(),
            0.5
        );
    }

    #[test]
    fn sigma_hat_full_and_pi_hat() {
        let b = batch_of(&[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(pi_hat(&b).unwrap(), 2.5);
        assert_abs_diff_eq!(sigma_hat_full(&b).unwrap(), 5.0 / 3.0, epsilon = 1e-15);
        assert!(sigma_hat_full(&batch_of(&[1.0])).is_err());
        assert!(pi_hat(&batch_of(&[])).is_err());
    }

    #[test]
    fn replicate_is_deterministic_and_ordered() {
        let model = Gaussian::standard(1);
        let kernel = CoupledRwm::new(&model, KernelConfig::default_rwm(1));
        let init = |rng: &mut RngStream| -> Vec<f64> { vec![StandardNormal.sample(rng)] };
        let h = |x: &[f64]| vec![x[0]];
        let a = replicate(&kernel, &init, &h, 1, 2, 20, 64, 99, 100_000).unwrap();
        let b = replicate(&kernel, &init, &h, 1, 2, 20, 64, 99, 100_000).unwrap();
        let va: Vec<f64> = a[0].values().collect();
        let vb: Vec<f64> = b[0].values().collect();
        assert_eq!(va, vb);
    }

    /// π̂ over N(0,1) with a deliberately offset init: the correction term
    /// must cancel the warm-up bias. 4-SE statistical tolerance.
    #[test]
    fn replicate_unbiased_from_offset_init() {
        let model = Gaussian::standard(1);
        let kernel = CoupledRwm::new(&model, KernelConfig::default_rwm(1));
        let init = |rng: &mut RngStream| -> Vec<f64> {
            let z: f64 = StandardNormal.sample(rng);
            vec![2.0 + z]
        };
        let h = |x: &[f64]| vec![x[0]];
        let batches = replicate(&kernel, &init, &h, 1, 0, 60, 400, 7, 100_000).unwrap();
        let b = &batches[0];
        let mean = pi_hat(b).unwrap();
        let se = (sigma_hat_full(b).unwrap() / b.r() as f64).sqrt();
        assert!(mean.abs() <= 4.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn non_meeting_replicates_abort_with_indices() {
        struct Drift;
        impl CoupledKernel for Drift {
            fn dim(&self) -> usize {
                1
            }
            fn step(&self, x: &[f64], _rng: &mut RngStream) -> Vec<f64> {
                vec![x[0] + 1.0]
            }
            fn coupled_step(
                &self,
                state: &crate::coupling::CoupledState,
                _rng: &mut RngStream,
            ) -> crate::coupling::CoupledState {
                crate::coupling::CoupledState::new(vec![state.x[0] + 1.0], vec![state.y[0] - 1.0])
            }
        }
        let init = |_: &mut RngStream| vec![0.0];
        let h = |x: &[f64]| vec![x[0]];
        match replicate(&Drift, &init, &h, 1, 0, 5, 3, 1, 40) {
            Err(EstimatorError::NotMet { indices }) => assert_eq!(indices, vec![0, 1, 2]),
            other => panic!("expected NotMet, got {other:?}"),
        }
    }
}
