//! Exact computations on small finite-state chains.
//!
//! Everything here exists to pin down ground truth. On a finite state space
//! the stationary distribution, total-variation mixing profile, asymptotic
//! variance, moment bounds, and kernel-embedding distances are all linear
//! algebra, so estimator and certification code can be tested against numbers
//! that carry no Monte Carlo error of their own. The synthetic coupling built
//! by [`make_synthetic_coupling`] closes the loop: it is a coupled kernel
//! whose meeting-tail constants are known *exactly*, which is something no
//! realistic sampler provides.
//!
//! States are labelled `0..n−1` and chain states travel through the generic
//! kernel interface as one-element vectors `[i as f64]`. None of this is meant
//! to scale: the constructions are dense (the coupling tables are cubic in the
//! state count at worst) and intended for oracle-sized chains.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use thiserror::Error;

use crate::coupling::{CoupledKernel, CoupledState};
use crate::rkhs::{self, KernelSpec, RkhsError};
use crate::rng::RngStream;

/// Tolerance for "this vector is a probability distribution" checks on
/// user-supplied data.
const ROW_SUM_TOL: f64 = 1e-12;
/// Looser tolerance for distributions that have been pushed through many
/// matrix–vector products before being compared.
const DIST_SUM_TOL: f64 = 1e-10;
/// Below this, convergence to stationarity is treated as complete.
const CONVERGENCE_TOL: f64 = 1e-12;
/// Transport masses below this are considered exhausted during construction.
const MASS_TOL: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum DiscreteError {
    #[error("transition matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("chain must have at least one state")]
    Empty,
    #[error("state count {0} exceeds 65535")]
    TooManyStates(usize),
    #[error("transition row {row} sums to {sum:.17}, expected 1")]
    RowSum { row: usize, sum: f64 },
    #[error("transition entry ({row},{col}) = {value} is not a probability")]
    InvalidEntry { row: usize, col: usize, value: f64 },
    #[error("initial distribution has {got} entries for {expected} states")]
    InitLength { got: usize, expected: usize },
    #[error("initial distribution sums to {sum:.17}, expected 1")]
    InitSum { sum: f64 },
    #[error("initial entry {index} = {value} is not a probability")]
    InvalidInitEntry { index: usize, value: f64 },
    #[error("no unique stationary distribution; chain looks reducible")]
    SingularChain,
    #[error("probability vectors have lengths {got} and {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("input sums to {sum:.17}, not a probability vector")]
    NotADistribution { sum: f64 },
    #[error("not converged by t_max = {t_max}: d_TV(pi, pi_t) = {tv:.3e}")]
    NotConverged { t_max: usize, tv: f64 },
    #[error("singular fundamental matrix; chain must be irreducible and aperiodic")]
    SingularFundamental,
    #[error("h has {got} values for {expected} states")]
    ValueLength { got: usize, expected: usize },
    #[error("eta must be finite and nonnegative, got {0}")]
    InvalidEta(f64),
    #[error("meet probability must lie in (0, 1], got {0}")]
    InvalidMeetProb(f64),
    #[error(
        "meet probability {p} exceeds the smallest pairwise row overlap \
         {max_feasible:.17} (rows {x} and {y}); a shared step that frequent \
         cannot preserve both marginals"
    )]
    InfeasibleMeetProb { p: f64, max_feasible: f64, x: usize, y: usize },
    #[error("embedding has {got} points for {expected} states")]
    EmbeddingSize { got: usize, expected: usize },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Rkhs(#[from] RkhsError),
}

/// A finite-state Markov chain: a row-stochastic transition matrix, an
/// initial distribution, and the stationary distribution (computed at
/// construction and guaranteed unique).
#[derive(Debug, Clone)]
pub struct FiniteChain {
    transition: DMatrix<f64>,
    init: Vec<f64>,
    stationary: Vec<f64>,
}

fn check_distribution(
    v: &[f64],
    tol: f64,
    mut bad_entry: impl FnMut(usize, f64) -> DiscreteError,
    bad_sum: impl FnOnce(f64) -> DiscreteError,
) -> Result<(), DiscreteError> {
    for (i, &p) in v.iter().enumerate() {
        if !p.is_finite() || p < 0.0 || p > 1.0 + ROW_SUM_TOL {
            return Err(bad_entry(i, p));
        }
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(bad_sum(sum));
    }
    Ok(())
}

impl FiniteChain {
    /// Validates the matrix and initial vector and solves for the stationary
    /// distribution. Fails if any row is not a probability vector or if the
    /// stationary system is singular (reducible chains).
    pub fn new(transition: DMatrix<f64>, init: Vec<f64>) -> Result<Self, DiscreteError> {
        let n = transition.nrows();
        if transition.ncols() != n {
            return Err(DiscreteError::NotSquare { rows: n, cols: transition.ncols() });
        }
        if n == 0 {
            return Err(DiscreteError::Empty);
        }
        if n > usize::from(u16::MAX) {
            return Err(DiscreteError::TooManyStates(n));
        }
        for row in 0..n {
            let r: Vec<f64> = transition.row(row).iter().copied().collect();
            check_distribution(
                &r,
                ROW_SUM_TOL,
                |col, value| DiscreteError::InvalidEntry { row, col, value },
                |sum| DiscreteError::RowSum { row, sum },
            )?;
        }
        if init.len() != n {
            return Err(DiscreteError::InitLength { got: init.len(), expected: n });
        }
        check_distribution(
            &init,
            ROW_SUM_TOL,
            |index, value| DiscreteError::InvalidInitEntry { index, value },
            |sum| DiscreteError::InitSum { sum },
        )?;
        let stationary = solve_stationary(&transition)?;
        Ok(Self { transition, init, stationary })
    }

    /// Convenience constructor from row slices.
    pub fn from_rows(rows: &[Vec<f64>], init: &[f64]) -> Result<Self, DiscreteError> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(DiscreteError::Format {
                    line: i + 1,
                    message: format!("row has {} entries, expected {}", r.len(), cols),
                });
            }
        }
        let m = DMatrix::from_fn(n, cols, |i, j| rows[i][j]);
        Self::new(m, init.to_vec())
    }

    /// Loads a chain from a plain-text file: `n` whitespace-separated
    /// transition rows followed by one initial-distribution line. Blank lines
    /// and lines starting with `#` are ignored. The state count is inferred
    /// from the first row.
    ///
    /// ```text
    /// # two-state chain
    /// 0.7 0.3
    /// 0.2 0.8
    /// 1 0
    /// ```
    pub fn from_file(path: &Path) -> Result<Self, DiscreteError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| DiscreteError::Io { path: path.to_path_buf(), source })?;
        Self::from_text(&text)
    }

    /// The parser behind [`FiniteChain::from_file`], split out so errors can
    /// be tested without touching the filesystem.
    pub fn from_text(text: &str) -> Result<Self, DiscreteError> {
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut vals = Vec::new();
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| DiscreteError::Format {
                    line: idx + 1,
                    message: format!("cannot parse {tok:?} as a number"),
                })?;
                vals.push(v);
            }
            rows.push((idx + 1, vals));
        }
        let Some(&(first_line, ref first)) = rows.first() else {
            return Err(DiscreteError::Format { line: 1, message: "empty file".into() });
        };
        let n = first.len();
        if n == 0 {
            return Err(DiscreteError::Format {
                line: first_line,
                message: "first row has no entries".into(),
            });
        }
        if rows.len() != n + 1 {
            let line = rows.last().map_or(first_line, |&(l, _)| l);
            return Err(DiscreteError::Format {
                line,
                message: format!(
                    "expected {} transition rows plus one initial line, found {} rows",
                    n,
                    rows.len()
                ),
            });
        }
        for &(line, ref vals) in &rows {
            if vals.len() != n {
                return Err(DiscreteError::Format {
                    line,
                    message: format!("row has {} entries, expected {}", vals.len(), n),
                });
            }
        }
        let m = DMatrix::from_fn(n, n, |i, j| rows[i].1[j]);
        let init = rows[n].1.clone();
        Self::new(m, init)
    }

    pub fn n(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn init(&self) -> &[f64] {
        &self.init
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// The law of the chain after `t` steps, π₀Pᵗ.
    pub fn distribution_at(&self, t: usize) -> Vec<f64> {
        let mut d = self.init.clone();
        for _ in 0..t {
            d = self.push_forward(&d);
        }
        d
    }

    /// All laws π₀, π₁, …, π_{t_max} in one sweep.
    pub fn distributions_to(&self, t_max: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(t_max + 1);
        out.push(self.init.clone());
        for _ in 0..t_max {
            let next = self.push_forward(out.last().unwrap());
            out.push(next);
        }
        out
    }

    fn push_forward(&self, d: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut next = vec![0.0; n];
        for i in 0..n {
            let w = d[i];
            if w == 0.0 {
                continue;
            }
            for j in 0..n {
                next[j] += w * self.transition[(i, j)];
            }
        }
        next
    }

    /// Draws a state from the initial distribution, in the one-element-vector
    /// convention used by the kernel interface.
    pub fn sample_init(&self, rng: &mut RngStream) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let n = self.n();
        for (i, &p) in self.init.iter().enumerate() {
            acc += p;
            if u < acc {
                return vec![i as f64];
            }
        }
        vec![(n - 1) as f64]
    }

    /// The smallest overlap Σ_z min(P(x,z), P(y,z)) over distinct row pairs.
    /// A shared-step coupling can fire at most this often per transition; 1.0
    /// for a single-state chain.
    pub fn min_row_overlap(&self) -> f64 {
        self.argmin_row_overlap().0
    }

    fn argmin_row_overlap(&self) -> (f64, usize, usize) {
        let n = self.n();
        let mut best = (1.0, 0, 0);
        for x in 0..n {
            for y in x + 1..n {
                let mut ov = 0.0;
                for z in 0..n {
                    ov += self.transition[(x, z)].min(self.transition[(y, z)]);
                }
                if ov < best.0 {
                    best = (ov, x, y);
                }
            }
        }
        best
    }
}

/// Solves πᵀP = πᵀ, Σπ = 1 by replacing the last balance equation with the
/// normalisation constraint.
fn solve_stationary(p: &DMatrix<f64>) -> Result<Vec<f64>, DiscreteError> {
    let n = p.nrows();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let mut a = p.transpose();
    for i in 0..n {
        a[(i, i)] -= 1.0;
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = nalgebra::DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let sol = a.lu().solve(&rhs).ok_or(DiscreteError::SingularChain)?;
    let mut pi: Vec<f64> = sol.iter().copied().collect();
    for v in &mut pi {
        if *v < 0.0 {
            if *v < -1e-9 {
                return Err(DiscreteError::SingularChain);
            }
            *v = 0.0;
        }
    }
    let total: f64 = pi.iter().sum();
    for v in &mut pi {
        *v /= total;
    }
    // A reducible chain can slip through LU with a spurious solution; the
    // balance residual catches it.
    for j in 0..n {
        let mut bal = 0.0;
        for i in 0..n {
            bal += pi[i] * p[(i, j)];
        }
        if (bal - pi[j]).abs() > DIST_SUM_TOL {
            return Err(DiscreteError::SingularChain);
        }
    }
    Ok(pi)
}

/// Total-variation distance ½·Σ|pᵢ − qᵢ| between two probability vectors.
pub fn exact_tv(p: &[f64], q: &[f64]) -> Result<f64, DiscreteError> {
    if p.len() != q.len() {
        return Err(DiscreteError::LengthMismatch { got: p.len(), expected: q.len() });
    }
    for v in [p, q] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > DIST_SUM_TOL {
            return Err(DiscreteError::NotADistribution { sum });
        }
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Checks that the chain has mixed by `t_max` and returns the full sequence
/// of laws π₀..π_{t_max}; the shared precondition of every sup-over-t oracle.
fn converged_laws(chain: &FiniteChain, t_max: usize) -> Result<Vec<Vec<f64>>, DiscreteError> {
    let laws = chain.distributions_to(t_max);
    let tv = exact_tv(chain.stationary(), laws.last().unwrap())?;
    if tv >= CONVERGENCE_TOL {
        return Err(DiscreteError::NotConverged { t_max, tv });
    }
    Ok(laws)
}

/// The worst total-variation distance to stationarity along the run,
/// sup_{t≥0} d_TV(π, π_t), computed as a max over `0..=t_max` after verifying
/// that the chain has converged by `t_max` (the tail is then below 1e−12).
pub fn exact_lambda(chain: &FiniteChain, t_max: usize) -> Result<f64, DiscreteError> {
    let laws = converged_laws(chain, t_max)?;
    let mut lambda: f64 = 0.0;
    for law in &laws {
        lambda = lambda.max(exact_tv(chain.stationary(), law)?);
    }
    Ok(lambda)
}

/// The MCMC asymptotic variance Var_π(h) + 2·Σ_{t≥1} Cov_π(h(X₀), h(X_t)),
/// in closed form through the fundamental matrix Z = (I − P + 1πᵀ)⁻¹:
/// v = Σᵢ πᵢ h̃ᵢ (2(Zh̃)ᵢ − h̃ᵢ) with h̃ the π-centred values.
pub fn exact_asymptotic_variance(chain: &FiniteChain, h: &[f64]) -> Result<f64, DiscreteError> {
    let n = chain.n();
    if h.len() != n {
        return Err(DiscreteError::ValueLength { got: h.len(), expected: n });
    }
    let pi = chain.stationary();
    let mean: f64 = pi.iter().zip(h).map(|(p, v)| p * v).sum();
    let centred: Vec<f64> = h.iter().map(|v| v - mean).collect();
    let mut a = DMatrix::from_fn(n, n, |i, j| {
        let eye = if i == j { 1.0 } else { 0.0 };
        eye - chain.transition[(i, j)] + pi[j]
    });
    // Solve A z = h̃ rather than inverting; A is nonsingular exactly when the
    // chain is irreducible and aperiodic.
    let rhs = nalgebra::DVector::from_column_slice(&centred);
    let z = std::mem::take(&mut a).lu().solve(&rhs).ok_or(DiscreteError::SingularFundamental)?;
    let mut v = 0.0;
    for i in 0..n {
        v += pi[i] * centred[i] * (2.0 * z[i] - centred[i]);
    }
    Ok(v)
}

fn abs_power(h: &[f64], eta: f64) -> Vec<f64> {
    h.iter().map(|v| v.abs().powf(2.0 + eta)).collect()
}

fn validated_h_eta(chain: &FiniteChain, h: &[f64], eta: f64) -> Result<Vec<f64>, DiscreteError> {
    if h.len() != chain.n() {
        return Err(DiscreteError::ValueLength { got: h.len(), expected: chain.n() });
    }
    if !eta.is_finite() || eta < 0.0 {
        return Err(DiscreteError::InvalidEta(eta));
    }
    Ok(abs_power(h, eta))
}

fn dot(p: &[f64], f: &[f64]) -> f64 {
    p.iter().zip(f).map(|(a, b)| a * b).sum()
}

/// The running moments E|h(X_t)|^{2+η} for t = 0..=t_max, with no convergence
/// requirement. Each entry is an exact expectation under π₀Pᵗ.
pub fn exact_step_moments(
    chain: &FiniteChain,
    h: &[f64],
    eta: f64,
    t_max: usize,
) -> Result<Vec<f64>, DiscreteError> {
    let f = validated_h_eta(chain, h, eta)?;
    Ok(chain.distributions_to(t_max).iter().map(|law| dot(law, &f)).collect())
}

/// The exact uniform moment bound D = sup_{t≥0} E|h(X_t)|^{2+η}: the max over
/// t ≤ t_max together with the stationary moment, which dominates the tail
/// once convergence by `t_max` has been verified.
pub fn exact_moment_bound(
    chain: &FiniteChain,
    h: &[f64],
    eta: f64,
    t_max: usize,
) -> Result<f64, DiscreteError> {
    let f = validated_h_eta(chain, h, eta)?;
    let laws = converged_laws(chain, t_max)?;
    let mut d = dot(chain.stationary(), &f);
    for law in &laws {
        d = d.max(dot(law, &f));
    }
    Ok(d)
}

/// Where each state lives for kernel-embedding computations, plus the kernel
/// itself. Any injective embedding works; the default puts state i at the
/// real value i with unit bandwidth.
#[derive(Debug, Clone)]
pub struct StateEmbedding {
    points: Vec<Vec<f64>>,
    kernel: KernelSpec,
}

impl StateEmbedding {
    /// States on the integer line with unit bandwidth.
    pub fn line(n: usize) -> Self {
        Self {
            points: (0..n).map(|i| vec![i as f64]).collect(),
            kernel: KernelSpec::new(1.0).expect("unit bandwidth is valid"),
        }
    }

    pub fn new(points: Vec<Vec<f64>>, kernel: KernelSpec) -> Self {
        Self { points, kernel }
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }
}

/// The three exact ingredients of the moment-bound decomposition
/// D ≤ π(|h|^{2+η}) + ‖|h|^{2+η}‖_H · λ_H.
#[derive(Debug, Clone, Copy)]
pub struct DBoundDecomposition {
    pub pi_term: f64,
    pub norm_term: f64,
    pub lambda_h: f64,
}

impl DBoundDecomposition {
    /// The assembled upper bound on D.
    pub fn total(&self) -> f64 {
        self.pi_term + self.norm_term * self.lambda_h
    }
}

/// Splits the moment bound into its stationary part, the RKHS norm of
/// |h|^{2+η} (as a function on the embedded states), and the worst kernel
/// distance to stationarity λ_H = max_{t≤t_max} d_H(π, π_t). All three are
/// exact finite-dimensional computations: d_H(π, π_t)² = (π−π_t)ᵀG(π−π_t)
/// with G the Gram matrix on the embedding, and the norm comes from the
/// ridge-free interpolant (so a singular Gram — duplicate embedding points —
/// is an error rather than a silent shrinkage).
pub fn exact_d_bound_decomposition(
    chain: &FiniteChain,
    h: &[f64],
    eta: f64,
    kernel_on_states: &StateEmbedding,
    t_max: usize,
) -> Result<DBoundDecomposition, DiscreteError> {
    let n = chain.n();
    let f = validated_h_eta(chain, h, eta)?;
    if kernel_on_states.points.len() != n {
        return Err(DiscreteError::EmbeddingSize {
            got: kernel_on_states.points.len(),
            expected: n,
        });
    }
    let laws = converged_laws(chain, t_max)?;
    let gram = rkhs::gram(&kernel_on_states.points, &kernel_on_states.kernel)?;
    let pi_term = dot(chain.stationary(), &f);
    let norm_term =
        rkhs::rkhs_norm_interpolant(&kernel_on_states.points, &f, &kernel_on_states.kernel, 0.0)?;
    let mut lambda_h: f64 = 0.0;
    for law in &laws {
        lambda_h = lambda_h.max(rkhs::mmd_exact_discrete(chain.stationary(), law, &gram)?);
    }
    Ok(DBoundDecomposition { pi_term, norm_term, lambda_h })
}

/// One cell of a sampled joint move: cumulative mass then the target pair.
#[derive(Debug, Clone, Copy)]
struct JointCell {
    cum: f64,
    zx: u16,
    zy: u16,
}

fn build_cdf(cells: Vec<(u16, u16, f64)>) -> Vec<JointCell> {
    let mut cdf = Vec::with_capacity(cells.len());
    let mut acc = 0.0;
    for (zx, zy, mass) in cells {
        if mass > 0.0 {
            acc += mass;
            cdf.push(JointCell { cum: acc, zx, zy });
        }
    }
    cdf
}

/// Draws from a cumulative table; `u` is uniform on [0, 1).
fn draw_cdf(cdf: &[JointCell], u: f64) -> (usize, usize) {
    let total = cdf.last().expect("table must be nonempty").cum;
    let target = u * total;
    let idx = cdf.partition_point(|c| c.cum <= target).min(cdf.len() - 1);
    (usize::from(cdf[idx].zx), usize::from(cdf[idx].zy))
}

/// Joint move table for one unordered pair of distinct states.
#[derive(Debug, Clone)]
struct PairTable {
    /// Shared-step component: both chains land on `zx == zy`. Total mass is
    /// the meet probability.
    shared: Vec<JointCell>,
    /// Residual component, total mass 1 − p. Off-diagonal except for the
    /// unavoidable-leftover cells flagged below.
    residual: Vec<JointCell>,
    /// True when the residual never touches the diagonal, so this pair meets
    /// with probability exactly p per step.
    exact: bool,
}

/// Builds the residual transport for one pair. Greedy off-diagonal matching
/// is completed by rerouting through existing cells; mass that provably
/// cannot leave the diagonal (the two rows pile more than 1−p onto one state)
/// is placed there and flagged.
fn build_pair_table(row_x: &[f64], row_y: &[f64], p: f64) -> PairTable {
    let n = row_x.len();
    let mut shared_cells = Vec::new();
    let overlap: f64 = row_x.iter().zip(row_y).map(|(a, b)| a.min(*b)).sum();
    for z in 0..n {
        let m = row_x[z].min(row_y[z]);
        if m > 0.0 {
            shared_cells.push((z as u16, z as u16, p * m / overlap));
        }
    }
    let shared = build_cdf(shared_cells);

    // Residual marginals after removing the shared component.
    let nu = |z: usize| p * row_x[z].min(row_y[z]) / overlap;
    let mut a: Vec<f64> = (0..n).map(|z| (row_x[z] - nu(z)).max(0.0)).collect();
    let mut b: Vec<f64> = (0..n).map(|z| (row_y[z] - nu(z)).max(0.0)).collect();

    let mut cells: Vec<(u16, u16, f64)> = Vec::new();
    let mut exact = true;
    loop {
        let Some(i) = (0..n).find(|&s| a[s] > MASS_TOL) else { break };
        if let Some(j) = (0..n).find(|&s| s != i && b[s] > MASS_TOL) {
            let d = a[i].min(b[j]);
            cells.push((i as u16, j as u16, d));
            a[i] -= d;
            b[j] -= d;
        } else if let Some(i2) = (0..n).find(|&s| s != i && a[s] > MASS_TOL) {
            // Column mass survives only at i itself; serve it from another row.
            let d = a[i2].min(b[i]);
            cells.push((i2 as u16, i as u16, d));
            a[i2] -= d;
            b[i] -= d;
        } else {
            // Both leftovers sit on state i. Reroute through off-diagonal
            // cells that avoid i: J(b,c) → J(i,c) + J(b,i) keeps all four
            // marginals intact and re-homes the stranded mass off-diagonal.
            let mut alpha = a[i].min(b[i]);
            a[i] -= alpha;
            b[i] -= alpha;
            let mut c = 0;
            while alpha > MASS_TOL && c < cells.len() {
                let (cx, cy, mass) = cells[c];
                if usize::from(cx) != i && usize::from(cy) != i && mass > MASS_TOL {
                    let d = alpha.min(mass);
                    cells[c].2 -= d;
                    cells.push((i as u16, cy, d));
                    cells.push((cx, i as u16, d));
                    alpha -= d;
                }
                c += 1;
            }
            if alpha > MASS_TOL {
                cells.push((i as u16, i as u16, alpha));
                exact = false;
            }
            break;
        }
    }
    PairTable { shared, residual: build_cdf(cells), exact }
}

/// A coupled kernel on a finite chain whose meeting behaviour is known in
/// closed form: every off-diagonal pair takes a shared step (and meets) with
/// probability exactly `meet_prob`, otherwise moves through a residual joint
/// law, and both marginals are the transition matrix exactly. Met pairs move
/// in lockstep forever.
///
/// This deliberately ignores sampling realism — it exists so that the
/// geometric meeting-tail constants (C = 1, δ = 1 − p per coupled step) are
/// exact inputs for certification tests rather than estimates.
#[derive(Debug, Clone)]
pub struct CoupledFiniteKernel {
    n: usize,
    meet_prob: f64,
    rows: Vec<Vec<f64>>,
    init: Vec<f64>,
    row_cdf: Vec<Vec<JointCell>>,
    /// Tables for unordered pairs x < y, indexed x·n + y.
    tables: Vec<Option<PairTable>>,
    exact_tails: bool,
}

/// Builds the synthetic coupling. Errors if `meet_prob` is outside (0, 1] or
/// exceeds the smallest pairwise row overlap — beyond that, no shared-step
/// mixture can keep both marginals equal to the transition matrix.
pub fn make_synthetic_coupling(
    chain: &FiniteChain,
    meet_prob: f64,
) -> Result<CoupledFiniteKernel, DiscreteError> {
    if !meet_prob.is_finite() || meet_prob <= 0.0 || meet_prob > 1.0 {
        return Err(DiscreteError::InvalidMeetProb(meet_prob));
    }
    let (max_feasible, x, y) = chain.argmin_row_overlap();
    if meet_prob > max_feasible + ROW_SUM_TOL {
        return Err(DiscreteError::InfeasibleMeetProb { p: meet_prob, max_feasible, x, y });
    }
    let n = chain.n();
    let rows: Vec<Vec<f64>> =
        (0..n).map(|i| chain.transition().row(i).iter().copied().collect()).collect();
    let row_cdf = rows
        .iter()
        .map(|r| {
            build_cdf(
                r.iter().enumerate().map(|(z, &m)| (z as u16, z as u16, m)).collect::<Vec<_>>(),
            )
        })
        .collect();
    let mut tables = vec![None; n * n];
    let mut exact_tails = true;
    for x in 0..n {
        for y in x + 1..n {
            let table = build_pair_table(&rows[x], &rows[y], meet_prob);
            exact_tails &= table.exact;
            tables[x * n + y] = Some(table);
        }
    }
    Ok(CoupledFiniteKernel {
        n,
        meet_prob,
        rows,
        init: chain.init().to_vec(),
        row_cdf,
        tables,
        exact_tails,
    })
}

impl CoupledFiniteKernel {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn meet_prob(&self) -> f64 {
        self.meet_prob
    }

    /// True when every pair's residual avoids the diagonal, making the
    /// per-step meeting probability exactly `meet_prob`. When false (some
    /// rows pile too much mass on one state), extra meetings only shorten
    /// meeting times, so C = 1, δ = 1 − p stays a valid envelope.
    pub fn exact_tails(&self) -> bool {
        self.exact_tails
    }

    fn state_of(v: &[f64]) -> usize {
        v[0].round() as usize
    }

    fn table(&self, x: usize, y: usize) -> (&PairTable, bool) {
        if x < y {
            (self.tables[x * self.n + y].as_ref().expect("pair table exists"), false)
        } else {
            (self.tables[y * self.n + x].as_ref().expect("pair table exists"), true)
        }
    }

    /// The full joint one-step law from the pair (x, y) as a dense matrix:
    /// entry (zx, zy) is the probability both moves happen together. Rows sum
    /// to the x-row of the transition matrix, columns to the y-row.
    pub fn joint_row(&self, x: usize, y: usize) -> DMatrix<f64> {
        let n = self.n;
        let mut m = DMatrix::zeros(n, n);
        if x == y {
            for (z, &mass) in self.rows[x].iter().enumerate() {
                m[(z, z)] = mass;
            }
            return m;
        }
        let (table, swapped) = self.table(x, y);
        let shared_total = table.shared.last().map_or(0.0, |c| c.cum);
        let mut prev = 0.0;
        for c in &table.shared {
            let z = usize::from(c.zx);
            m[(z, z)] += self.meet_prob * (c.cum - prev) / shared_total;
            prev = c.cum;
        }
        if let Some(last) = table.residual.last() {
            let res_total = last.cum;
            let mut prev = 0.0;
            for c in &table.residual {
                let (mut zx, mut zy) = (usize::from(c.zx), usize::from(c.zy));
                if swapped {
                    std::mem::swap(&mut zx, &mut zy);
                }
                m[(zx, zy)] += (1.0 - self.meet_prob) * (c.cum - prev) / res_total;
                prev = c.cum;
            }
        }
        m
    }

    /// Exact run-level survival probabilities P(τ > t) for t = 0..=t_max,
    /// where τ compares X_{t} against Y_{t−1}: the first entry is 1, the
    /// second is P(X₁ ≠ Y₀) with X₁ one transition past an initial draw and
    /// Y₀ an independent initial draw, and later entries evolve the
    /// off-diagonal pair mass through the residual tables.
    pub fn exact_survival(&self, t_max: usize) -> Vec<f64> {
        let n = self.n;
        let mut out = Vec::with_capacity(t_max + 1);
        out.push(1.0);
        if t_max == 0 {
            return out;
        }
        // Law of X₁ = one step from π₀.
        let mut x1 = vec![0.0; n];
        for (i, &w) in self.init.iter().enumerate() {
            for z in 0..n {
                x1[z] += w * self.rows[i][z];
            }
        }
        // Off-diagonal pair mass ρ(a, b) = P(X_t = a, Y_{t−1} = b, τ > t).
        let mut rho = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    rho[a * n + b] = x1[a] * self.init[b];
                }
            }
        }
        out.push(rho.iter().sum());
        for _ in 2..=t_max {
            let mut next = vec![0.0; n * n];
            for a in 0..n {
                for b in 0..n {
                    let mass = rho[a * n + b];
                    if a == b || mass == 0.0 {
                        continue;
                    }
                    let (table, swapped) = self.table(a, b);
                    let Some(last) = table.residual.last() else { continue };
                    let res_total = last.cum;
                    let mut prev = 0.0;
                    for c in &table.residual {
                        let (mut zx, mut zy) = (usize::from(c.zx), usize::from(c.zy));
                        if swapped {
                            std::mem::swap(&mut zx, &mut zy);
                        }
                        if zx != zy {
                            next[zx * n + zy] +=
                                mass * (1.0 - self.meet_prob) * (c.cum - prev) / res_total;
                        }
                        prev = c.cum;
                    }
                }
            }
            rho = next;
            out.push(rho.iter().sum());
        }
        out
    }
}

impl CoupledKernel for CoupledFiniteKernel {
    fn dim(&self) -> usize {
        1
    }

    fn step(&self, x: &[f64], rng: &mut RngStream) -> Vec<f64> {
        let s = Self::state_of(x);
        let u: f64 = rng.random();
        let (z, _) = draw_cdf(&self.row_cdf[s], u);
        vec![z as f64]
    }

    fn coupled_step(&self, state: &CoupledState, rng: &mut RngStream) -> CoupledState {
        let sx = Self::state_of(&state.x);
        let sy = Self::state_of(&state.y);
        if state.met || sx == sy {
            let u: f64 = rng.random();
            let (z, _) = draw_cdf(&self.row_cdf[sx], u);
            return CoupledState::new(vec![z as f64], vec![z as f64]);
        }
        let (table, swapped) = self.table(sx, sy);
        let branch: f64 = rng.random();
        let u: f64 = rng.random();
        if branch < self.meet_prob {
            let (z, _) = draw_cdf(&table.shared, u);
            CoupledState::new(vec![z as f64], vec![z as f64])
        } else {
            let (mut zx, mut zy) = draw_cdf(&table.residual, u);
            if swapped {
                std::mem::swap(&mut zx, &mut zy);
            }
            CoupledState::new(vec![zx as f64], vec![zy as f64])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bound::fit_geometric_tail;
    use crate::estimator::{pi_hat, replicate, sigma_hat_full};
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_state(a: f64, b: f64, init: [f64; 2]) -> FiniteChain {
        FiniteChain::from_rows(
            &[vec![1.0 - a, a], vec![b, 1.0 - b]],
            &init,
        )
        .unwrap()
    }

    fn fair_coin() -> FiniteChain {
        two_state(0.5, 0.5, [1.0, 0.0])
    }

    #[test]
    fn constructor_rejects_bad_input() {
        let rect = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        assert!(matches!(
            FiniteChain::new(rect, vec![1.0]),
            Err(DiscreteError::NotSquare { rows: 1, cols: 2 })
        ));
        assert!(matches!(
            FiniteChain::from_rows(&[vec![0.6, 0.3], vec![0.2, 0.8]], &[1.0, 0.0]),
            Err(DiscreteError::RowSum { row: 0, .. })
        ));
        assert!(matches!(
            FiniteChain::from_rows(&[vec![1.2, -0.2], vec![0.2, 0.8]], &[1.0, 0.0]),
            Err(DiscreteError::InvalidEntry { row: 0, col: 0, .. })
        ));
        assert!(matches!(
            FiniteChain::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8]], &[1.0]),
            Err(DiscreteError::InitLength { got: 1, expected: 2 })
        ));
        assert!(matches!(
            FiniteChain::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8]], &[0.7, 0.7]),
            Err(DiscreteError::InitSum { .. })
        ));
    }

    #[test]
    fn stationary_two_state_closed_form() {
        let chain = two_state(0.3, 0.2, [1.0, 0.0]);
        // π = (b, a)/(a+b)
        assert_relative_eq!(chain.stationary()[0], 0.4, epsilon = 1e-13);
        assert_relative_eq!(chain.stationary()[1], 0.6, epsilon = 1e-13);
    }

    #[test]
    fn reducible_chain_is_rejected() {
        let eye = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            FiniteChain::new(eye, vec![0.5, 0.5]),
            Err(DiscreteError::SingularChain)
        ));
    }

    #[test]
    fn text_format_round_trips() {
        let text = "# demo\n0.7 0.3\n\n0.2 0.8\n1 0\n";
        let chain = FiniteChain::from_text(text).unwrap();
        assert_eq!(chain.n(), 2);
        assert_eq!(chain.init(), &[1.0, 0.0]);
        assert_relative_eq!(chain.transition()[(1, 0)], 0.2);

        let err = FiniteChain::from_text("0.7 0.3\n0.2 0.8 0.1\n1 0\n").unwrap_err();
        assert!(matches!(err, DiscreteError::Format { line: 2, .. }), "{err}");
        let err = FiniteChain::from_text("0.7 0.3\n0.2 0.8\n").unwrap_err();
        assert!(matches!(err, DiscreteError::Format { .. }), "{err}");
        let err = FiniteChain::from_text("0.7 x\n0.2 0.8\n1 0\n").unwrap_err();
        assert!(matches!(err, DiscreteError::Format { line: 1, .. }), "{err}");
    }

    #[test]
    fn file_loading_matches_programmatic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.txt");
        std::fs::write(&path, "0.7 0.3\n0.2 0.8\n0.5 0.5\n").unwrap();
        let chain = FiniteChain::from_file(&path).unwrap();
        assert_eq!(chain.transition(), two_state(0.3, 0.2, [0.5, 0.5]).transition());
        let missing = dir.path().join("nope.txt");
        assert!(matches!(FiniteChain::from_file(&missing), Err(DiscreteError::Io { .. })));
    }

    #[test]
    fn tv_worked_examples() {
        let p = [0.25, 0.75];
        assert_eq!(exact_tv(&p, &p).unwrap(), 0.0);
        assert_relative_eq!(exact_tv(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_relative_eq!(
            exact_tv(&[0.7, 0.3], &[0.4, 0.6]).unwrap(),
            0.3,
            epsilon = 1e-15
        );
        assert!(matches!(
            exact_tv(&[1.0], &[0.5, 0.5]),
            Err(DiscreteError::LengthMismatch { got: 1, expected: 2 })
        ));
        assert!(matches!(
            exact_tv(&[0.9, 0.0], &[0.5, 0.5]),
            Err(DiscreteError::NotADistribution { .. })
        ));
    }

    #[test]
    fn lambda_examples() {
        let stationary_start = two_state(0.3, 0.2, [0.4, 0.6]);
        assert!(exact_lambda(&stationary_start, 100).unwrap() < 1e-12);

        // The fair coin mixes in one step, so the sup is the t=0 distance.
        assert_relative_eq!(exact_lambda(&fair_coin(), 10).unwrap(), 0.5, epsilon = 1e-14);

        let flip = FiniteChain::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]], &[1.0, 0.0]).unwrap();
        assert!(matches!(
            exact_lambda(&flip, 500),
            Err(DiscreteError::NotConverged { t_max: 500, .. })
        ));
    }

    #[test]
    fn asymptotic_variance_examples() {
        let chain = two_state(0.3, 0.2, [1.0, 0.0]);
        assert!(exact_asymptotic_variance(&chain, &[2.5, 2.5]).unwrap().abs() < 1e-12);
        // ab(2−a−b)/(a+b)³ for the indicator of state 1.
        assert_relative_eq!(
            exact_asymptotic_variance(&chain, &[0.0, 1.0]).unwrap(),
            0.72,
            epsilon = 1e-10
        );

        // An i.i.d. chain has zero autocovariance, so v = Var_π(h).
        let pi = [0.2, 0.3, 0.5];
        let rows: Vec<Vec<f64>> = (0..3).map(|_| pi.to_vec()).collect();
        let iid = FiniteChain::from_rows(&rows, &pi).unwrap();
        let h = [1.0, -2.0, 4.0];
        let mean: f64 = pi.iter().zip(&h).map(|(p, v)| p * v).sum();
        let var: f64 = pi.iter().zip(&h).map(|(p, v)| p * (v - mean) * (v - mean)).sum();
        assert_relative_eq!(exact_asymptotic_variance(&iid, &h).unwrap(), var, epsilon = 1e-10);

        // Perfect alternation averages out exactly: zero asymptotic variance.
        let flip = FiniteChain::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]], &[1.0, 0.0]).unwrap();
        assert!(exact_asymptotic_variance(&flip, &[0.0, 1.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn moment_bound_examples() {
        let chain = two_state(0.3, 0.2, [1.0, 0.0]);
        for eta in [0.0, 0.7, 2.0] {
            assert_relative_eq!(
                exact_moment_bound(&chain, &[1.0, 1.0], eta, 200).unwrap(),
                1.0,
                epsilon = 1e-12
            );
        }
        let stationary_start = two_state(0.3, 0.2, [0.4, 0.6]);
        let h = [0.5, -1.5];
        let f: f64 = 0.4 * 0.5f64.powi(4) + 0.6 * 1.5f64.powi(4);
        assert_relative_eq!(
            exact_moment_bound(&stationary_start, &h, 2.0, 200).unwrap(),
            f,
            epsilon = 1e-12
        );
        // Fair coin from a point mass: E|h(X_t)|⁴ is 0 at t=0 and 0.5 after.
        assert_relative_eq!(
            exact_moment_bound(&fair_coin(), &[0.0, 1.0], 2.0, 50).unwrap(),
            0.5,
            epsilon = 1e-14
        );
    }

    #[test]
    fn d_bound_decomposition_examples() {
        let coin = fair_coin();
        let emb = StateEmbedding::line(2);

        let zero = exact_d_bound_decomposition(&coin, &[0.0, 0.0], 2.0, &emb, 50).unwrap();
        assert_eq!(zero.pi_term, 0.0);
        assert!(zero.norm_term.abs() < 1e-12);
        assert!(zero.lambda_h > 0.0);

        let stationary_start = two_state(0.3, 0.2, [0.4, 0.6]);
        let dec = exact_d_bound_decomposition(&stationary_start, &[0.0, 1.0], 2.0, &emb, 200)
            .unwrap();
        assert!(dec.lambda_h < 1e-12);
        assert_relative_eq!(dec.total(), dec.pi_term, epsilon = 1e-12);

        // Fair coin: λ_H = |π−π₀|_G at t=0, i.e. √(½(1−K(0,1))) for states
        // embedded at 0 and 1 with unit bandwidth.
        let dec = exact_d_bound_decomposition(&coin, &[0.0, 1.0], 2.0, &emb, 50).unwrap();
        let expected = (0.5 * (1.0 - (-0.5f64).exp())).sqrt();
        assert_relative_eq!(dec.lambda_h, expected, epsilon = 1e-12);
        let d = exact_moment_bound(&coin, &[0.0, 1.0], 2.0, 50).unwrap();
        assert!(dec.total() >= d - 1e-12, "{} < {}", dec.total(), d);
    }

    #[test]
    fn embedding_size_is_checked() {
        let coin = fair_coin();
        let emb = StateEmbedding::line(3);
        assert!(matches!(
            exact_d_bound_decomposition(&coin, &[0.0, 1.0], 2.0, &emb, 50),
            Err(DiscreteError::EmbeddingSize { got: 3, expected: 2 })
        ));
    }

    #[test]
    fn duplicate_embedding_points_error_without_ridge() {
        let coin = fair_coin();
        let emb = StateEmbedding::new(
            vec![vec![0.0], vec![0.0]],
            KernelSpec::new(1.0).unwrap(),
        );
        assert!(matches!(
            exact_d_bound_decomposition(&coin, &[0.0, 1.0], 2.0, &emb, 50),
            Err(DiscreteError::Rkhs(RkhsError::SingularSystem { .. }))
        ));
    }

    fn small_chain_strategy(
        n: usize,
        floor: f64,
    ) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
        let row = proptest::collection::vec(floor..1.0f64, n).prop_map(move |raw| {
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        });
        (proptest::collection::vec(row.clone(), n), row)
    }

    proptest! {
        #[test]
        fn lambda_is_at_most_one((rows, init) in small_chain_strategy(3, 0.05)) {
            let chain = FiniteChain::from_rows(&rows, &init).unwrap();
            let lambda = exact_lambda(&chain, 800).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&lambda));
        }

        #[test]
        fn d_bound_dominates_moment_bound(
            (rows, init) in small_chain_strategy(4, 0.05),
            h in proptest::collection::vec(-2.0f64..2.0, 4),
            eta in prop_oneof![Just(0.5), Just(1.0), Just(2.0)],
        ) {
            let chain = FiniteChain::from_rows(&rows, &init).unwrap();
            let emb = StateEmbedding::line(4);
            let dec = exact_d_bound_decomposition(&chain, &h, eta, &emb, 600).unwrap();
            let d = exact_moment_bound(&chain, &h, eta, 600).unwrap();
            prop_assert!(dec.total() >= d - 1e-9 * d.max(1.0),
                "decomposition {} < moment bound {}", dec.total(), d);
        }

        // With adjacent integer embeddings at unit bandwidth the kernel
        // distance is dominated by total variation, so the sups order too.
        #[test]
        fn lambda_h_below_lambda_on_two_states((rows, init) in small_chain_strategy(2, 0.02)) {
            let chain = FiniteChain::from_rows(&rows, &init).unwrap();
            let lambda = exact_lambda(&chain, 2000).unwrap();
            let dec = exact_d_bound_decomposition(
                &chain, &[0.0, 1.0], 1.0, &StateEmbedding::line(2), 2000).unwrap();
            prop_assert!(dec.lambda_h <= lambda + 1e-12,
                "lambda_H {} > lambda {}", dec.lambda_h, lambda);
        }

        #[test]
        fn synthetic_coupling_marginals_are_exact(
            (rows, init) in small_chain_strategy(4, 0.01),
            p_frac in 0.05f64..1.0,
        ) {
            let chain = FiniteChain::from_rows(&rows, &init).unwrap();
            let p = p_frac * chain.min_row_overlap();
            let kernel = make_synthetic_coupling(&chain, p).unwrap();
            for x in 0..4 {
                for y in 0..4 {
                    let joint = kernel.joint_row(x, y);
                    for zx in 0..4 {
                        let row_sum: f64 = (0..4).map(|zy| joint[(zx, zy)]).sum();
                        prop_assert!((row_sum - rows[x][zx]).abs() < 1e-12,
                            "pair ({x},{y}): x-marginal at {zx} is {row_sum}, want {}", rows[x][zx]);
                    }
                    for zy in 0..4 {
                        let col_sum: f64 = (0..4).map(|zx| joint[(zx, zy)]).sum();
                        prop_assert!((col_sum - rows[y][zy]).abs() < 1e-12,
                            "pair ({x},{y}): y-marginal at {zy} is {col_sum}, want {}", rows[y][zy]);
                    }
                    for zx in 0..4 {
                        for zy in 0..4 {
                            prop_assert!(joint[(zx, zy)] >= -1e-15);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_meet_probability_is_rejected() {
        let chain = two_state(0.3, 0.2, [1.0, 0.0]);
        assert_relative_eq!(chain.min_row_overlap(), 0.5, epsilon = 1e-15);
        let err = make_synthetic_coupling(&chain, 0.6).unwrap_err();
        assert!(matches!(err, DiscreteError::InfeasibleMeetProb { x: 0, y: 1, .. }), "{err}");
        assert!(make_synthetic_coupling(&chain, 0.5).is_ok());
        assert!(matches!(
            make_synthetic_coupling(&chain, 0.0),
            Err(DiscreteError::InvalidMeetProb(_))
        ));
        assert!(matches!(
            make_synthetic_coupling(&chain, 1.5),
            Err(DiscreteError::InvalidMeetProb(_))
        ));
    }

    #[test]
    fn certain_meeting_takes_one_coupled_step() {
        let kernel = make_synthetic_coupling(&fair_coin(), 1.0).unwrap();
        assert!(kernel.exact_tails());
        let mut rng = stream(7, 0);
        for x in 0..2u16 {
            for y in 0..2u16 {
                if x == y {
                    continue;
                }
                for _ in 0..200 {
                    let state =
                        CoupledState::new(vec![f64::from(x)], vec![f64::from(y)]);
                    let next = kernel.coupled_step(&state, &mut rng);
                    assert!(next.met, "p = 1 must glue the pair in one step");
                }
            }
        }
        // Survival collapses after the first comparison.
        let s = kernel.exact_survival(4);
        assert_eq!(s[0], 1.0);
        assert_relative_eq!(s[1], 0.5, epsilon = 1e-14);
        assert_eq!(&s[2..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn diagonal_pairs_stay_glued() {
        let chain = two_state(0.3, 0.2, [1.0, 0.0]);
        let kernel = make_synthetic_coupling(&chain, 0.4).unwrap();
        let mut rng = stream(11, 0);
        let mut state = CoupledState::new(vec![1.0], vec![1.0]);
        assert!(state.met);
        for _ in 0..100 {
            state = kernel.coupled_step(&state, &mut rng);
            assert!(state.met);
            assert_eq!(state.x, state.y);
        }
    }

    #[test]
    fn fair_coin_survival_is_exactly_geometric() {
        let kernel = make_synthetic_coupling(&fair_coin(), 0.5).unwrap();
        assert!(kernel.exact_tails());
        let s = kernel.exact_survival(8);
        for (t, &st) in s.iter().enumerate() {
            assert_relative_eq!(st, 0.5f64.powi(t as i32), epsilon = 1e-14);
        }
    }

    /// Empirical check of the advertised meeting-tail: for the fair coin at
    /// p = ½ the run-level survival is exactly (1−p)ᵗ, so the observed
    /// P(τ > 3) over 10⁵ runs must sit within 3 binomial SEs of 0.125.
    #[test]
    fn empirical_meeting_tail_matches_geometric() {
        let chain = fair_coin();
        let kernel = make_synthetic_coupling(&chain, 0.5).unwrap();
        let n = 100_000;
        let batches = replicate(
            &kernel,
            &|rng: &mut RngStream| chain.sample_init(rng),
            &|_: &[f64]| vec![0.0],
            1,
            0,
            0,
            n,
            2024,
            10_000,
        )
        .unwrap();
        let exceed = batches[0].taus().filter(|&t| t > 3).count() as f64 / n as f64;
        let se = (0.125 * 0.875 / n as f64).sqrt();
        assert!(
            (exceed - 0.125).abs() <= 3.0 * se,
            "P(tau > 3) = {exceed}, want 0.125 ± {}",
            3.0 * se
        );

        let taus: Vec<usize> = batches[0].taus().collect();
        let fit = fit_geometric_tail(&taus).unwrap();
        assert!(
            (fit.tail_delta - 0.5).abs() <= 0.03,
            "fitted delta {} should recover 0.5",
            fit.tail_delta
        );
    }

    /// A pair whose rows pile > 1−p of residual mass onto one state cannot
    /// keep its residual off the diagonal; the kernel must say so, and its
    /// exact survival must still sit below the (1−p)ᵗ envelope.
    #[test]
    fn leftover_diagonal_is_flagged_and_conservative() {
        let chain = two_state(0.3, 0.2, [1.0, 0.0]);
        let kernel = make_synthetic_coupling(&chain, 0.4).unwrap();
        assert!(!kernel.exact_tails());
        // Marginals stay exact even with the diagonal leftover.
        let joint = kernel.joint_row(0, 1);
        for z in 0..2 {
            let row: f64 = (0..2).map(|j| joint[(z, j)]).sum();
            let col: f64 = (0..2).map(|i| joint[(i, z)]).sum();
            assert_relative_eq!(row, chain.transition()[(0, z)], epsilon = 1e-12);
            assert_relative_eq!(col, chain.transition()[(1, z)], epsilon = 1e-12);
        }
        let s = kernel.exact_survival(10);
        for (t, &st) in s.iter().enumerate().skip(1) {
            assert!(
                st <= 0.6f64.powi(t as i32) + 1e-12,
                "survival {st} at t={t} above the envelope"
            );
        }

        // And the empirical tail agrees with the exact enumeration.
        let n = 100_000;
        let batches = replicate(
            &kernel,
            &|rng: &mut RngStream| chain.sample_init(rng),
            &|_: &[f64]| vec![0.0],
            1,
            0,
            0,
            n,
            9,
            10_000,
        )
        .unwrap();
        let exceed = batches[0].taus().filter(|&t| t > 3).count() as f64 / n as f64;
        let expected = s[3];
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!(
            (exceed - expected).abs() <= 4.0 * se.max(1e-4),
            "P(tau > 3) = {exceed}, exact enumeration says {expected}"
        );
    }

    /// The estimator is unbiased on the synthetic testbed for every window
    /// and meeting rate: the Monte Carlo mean must match πᵀh to 4 SEs.
    #[test]
    fn unbiased_across_window_grid() {
        let chain = two_state(0.3, 0.2, [1.0, 0.0]);
        let pi_h = 0.6;
        let mut seed = 100;
        for &(k, m) in &[(0usize, 0usize), (2, 10), (5, 25)] {
            for &p in &[0.25, 0.5] {
                let kernel = make_synthetic_coupling(&chain, p).unwrap();
                let r = 3000;
                let batches = replicate(
                    &kernel,
                    &|rng: &mut RngStream| chain.sample_init(rng),
                    &|x: &[f64]| vec![x[0]],
                    1,
                    k,
                    m,
                    r,
                    seed,
                    100_000,
                )
                .unwrap();
                seed += 1;
                let mean = pi_hat(&batches[0]).unwrap();
                let se = (sigma_hat_full(&batches[0]).unwrap() / r as f64).sqrt();
                assert!(
                    (mean - pi_h).abs() <= 4.0 * se,
                    "k={k} m={m} p={p}: mean {mean} vs {pi_h} (se {se})"
                );
            }
        }
    }

    /// With the burn-in past mixing and a long window, the scaled replicate
    /// variance approaches the exact asymptotic variance.
    #[test]
    fn scaled_variance_approaches_asymptotic() {
        let chain = two_state(0.3, 0.2, [1.0, 0.0]);
        let v = exact_asymptotic_variance(&chain, &[0.0, 1.0]).unwrap();
        let kernel = make_synthetic_coupling(&chain, 0.4).unwrap();
        let (k, m, r) = (50, 500, 20_000);
        let batches = replicate(
            &kernel,
            &|rng: &mut RngStream| chain.sample_init(rng),
            &|x: &[f64]| vec![x[0]],
            1,
            k,
            m,
            r,
            77,
            100_000,
        )
        .unwrap();
        let scaled = (m - k + 1) as f64 * sigma_hat_full(&batches[0]).unwrap();
        assert!(
            (scaled - v).abs() <= 0.25 * v,
            "scaled variance {scaled} not within 25% of {v}"
        );
    }

    #[test]
    fn init_sampling_and_steps_follow_the_matrix() {
        let chain = two_state(0.3, 0.2, [0.3, 0.7]);
        let kernel = make_synthetic_coupling(&chain, 0.4).unwrap();
        let mut rng = stream(5, 0);
        let n = 100_000;
        let mut init_ones = 0usize;
        let mut step_ones = 0usize;
        for _ in 0..n {
            if chain.sample_init(&mut rng)[0] == 1.0 {
                init_ones += 1;
            }
            if kernel.step(&[0.0], &mut rng)[0] == 1.0 {
                step_ones += 1;
            }
        }
        let se = |p: f64| (p * (1.0 - p) / n as f64).sqrt();
        assert!((init_ones as f64 / n as f64 - 0.7).abs() <= 4.0 * se(0.7));
        assert!((step_ones as f64 / n as f64 - 0.3).abs() <= 4.0 * se(0.3));
    }
}
