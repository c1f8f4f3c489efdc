//! Gaussian-kernel RKHS utilities: Gram matrices, maximum mean discrepancy,
//! and interpolant norms.
//!
//! The kernel is K(x, y) = exp(−‖x−y‖² / (2·bandwidth²)), so K(x, x) = 1 and
//! every RKHS function satisfies ‖f‖_∞ ≤ ‖f‖_H. That sup-norm domination is
//! what lets the kernel metric d_H lower-bound total variation, which the
//! certification machinery leans on.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum RkhsError {
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("ridge must be non-negative and finite, got {0}")]
    InvalidRidge(f64),
    #[error("empty sample")]
    EmptySample,
    #[error("points have mixed dimensions: {got} vs {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("need one value per point: {points} points, {values} values")]
    ValueCountMismatch { points: usize, values: usize },
    #[error(
        "interpolation system is singular at pivot {pivot}; duplicate or \
         near-duplicate points — retry with a positive ridge"
    )]
    SingularSystem { pivot: usize },
    #[error("weight vector length {got} does not match Gram size {expected}")]
    WeightMismatch { got: usize, expected: usize },
}

/// A Gaussian (RBF) kernel with unit diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    bandwidth: f64,
}

impl KernelSpec {
    pub fn new(bandwidth: f64) -> Result<Self, RkhsError> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(RkhsError::InvalidBandwidth(bandwidth));
        }
        Ok(Self { bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), y.len());
        let mut sq = 0.0;
        for (a, b) in x.iter().zip(y) {
            let d = a - b;
            sq += d * d;
        }
        (-sq / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }
}

fn check_dims(points: &[Vec<f64>]) -> Result<(), RkhsError> {
    if let Some(first) = points.first() {
        for p in points {
            if p.len() != first.len() {
                return Err(RkhsError::DimensionMismatch {
                    got: p.len(),
                    expected: first.len(),
                });
            }
        }
    }
    Ok(())
}

/// Gram matrix G_ij = K(xᵢ, xⱼ). Symmetric with unit diagonal by
/// construction; positive semi-definite because K is a Mercer kernel.
pub fn gram(points: &[Vec<f64>], kernel: &KernelSpec) -> Result<DMatrix<f64>, RkhsError> {
    check_dims(points)?;
    let n = points.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        g[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let v = kernel.eval(&points[i], &points[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Biased (V-statistic) MMD between two samples: the square root of
/// mean(K_aa) + mean(K_bb) − 2·mean(K_ab), clamped at zero before the root.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>], kernel: &KernelSpec) -> Result<f64, RkhsError> {
    let sq = mmd_squared_terms(a, b, kernel, false)?;
    Ok(sq.max(0.0).sqrt())
}

/// Unbiased (U-statistic) estimate of MMD²; may be negative, which is why the
/// default [`mmd`] is the V-statistic. Needs at least two points per sample.
pub fn mmd_squared_unbiased(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    kernel: &KernelSpec,
) -> Result<f64, RkhsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(RkhsError::EmptySample);
    }
    mmd_squared_terms(a, b, kernel, true)
}

fn mmd_squared_terms(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    kernel: &KernelSpec,
    exclude_diagonal: bool,
) -> Result<f64, RkhsError> {
    if a.is_empty() || b.is_empty() {
        return Err(RkhsError::EmptySample);
    }
    check_dims(a)?;
    check_dims(b)?;
    if a[0].len() != b[0].len() {
        return Err(RkhsError::DimensionMismatch { got: b[0].len(), expected: a[0].len() });
    }
    let within = |s: &[Vec<f64>]| -> f64 {
        let n = s.len();
        if exclude_diagonal {
            if n < 2 {
                return 0.0;
            }
            let mut sum = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        sum += kernel.eval(&s[i], &s[j]);
                    }
                }
            }
            sum / (n * (n - 1)) as f64
        } else {
            let mut sum = 0.0;
            for i in 0..n {
                // diagonal terms are all 1
                sum += 1.0;
                for j in (i + 1)..n {
                    sum += 2.0 * kernel.eval(&s[i], &s[j]);
                }
            }
            sum / (n * n) as f64
        }
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += kernel.eval(x, y);
        }
    }
    cross /= (a.len() * b.len()) as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

/// Exact kernel distance between two finite-support distributions given as
/// weight vectors over a shared point set: √((p−q)ᵀ G (p−q)), clamped at 0.
pub fn mmd_exact_discrete(
    p: &[f64],
    q: &[f64],
    gram: &DMatrix<f64>,
) -> Result<f64, RkhsError> {
    let n = gram.nrows();
    if p.len() != n {
        return Err(RkhsError::WeightMismatch { got: p.len(), expected: n });
    }
    if q.len() != n {
        return Err(RkhsError::WeightMismatch { got: q.len(), expected: n });
    }
    let d: Vec<f64> = p.iter().zip(q).map(|(a, b)| a - b).collect();
    let mut sq = 0.0;
    for i in 0..n {
        for j in 0..n {
            sq += d[i] * gram[(i, j)] * d[j];
        }
    }
    Ok(sq.max(0.0).sqrt())
}

/// RKHS norm of the minimum-norm interpolant of `values` at `points`,
/// computed from (G + ridge·I) α = v as √(αᵀ G α).
///
/// `ridge = 0` is exact interpolation and fails with a pivot-indexed error
/// when the Gram matrix is numerically singular (duplicate points); a small
/// positive ridge regularises at the cost of slight norm shrinkage.
pub fn rkhs_norm_interpolant(
    points: &[Vec<f64>],
    values: &[f64],
    kernel: &KernelSpec,
    ridge: f64,
) -> Result<f64, RkhsError> {
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(RkhsError::InvalidRidge(ridge));
    }
    if points.is_empty() {
        return Err(RkhsError::EmptySample);
    }
    if points.len() != values.len() {
        return Err(RkhsError::ValueCountMismatch {
            points: points.len(),
            values: values.len(),
        });
    }
    let mut g = gram(points, kernel)?;
    let plain = g.clone();
    for i in 0..points.len() {
        g[(i, i)] += ridge;
    }
    let chol =
        linalg::cholesky_lower(&g).map_err(|pivot| RkhsError::SingularSystem { pivot })?;
    let alpha = linalg::cholesky_solve(&chol, values);
    let mut sq = 0.0;
    for i in 0..alpha.len() {
        for j in 0..alpha.len() {
            sq += alpha[i] * plain[(i, j)] * alpha[j];
        }
    }
    Ok(sq.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn spec(bw: f64) -> KernelSpec {
        KernelSpec::new(bw).unwrap()
    }

    #[test]
    fn gram_worked_examples() {
        let k = spec(1.0);
        let single = gram(&[vec![3.0]], &k).unwrap();
        assert_eq!(single[(0, 0)], 1.0);

        let pair = gram(&[vec![0.0], vec![0.0]], &k).unwrap();
        for v in pair.iter() {
            assert_eq!(*v, 1.0);
        }

        // Distance √2 at bandwidth 1 → off-diagonal e^{−1}.
        let g = gram(&[vec![0.0, 0.0], vec![1.0, 1.0]], &k).unwrap();
        assert_abs_diff_eq!(g[(0, 1)], (-1.0f64).exp(), epsilon = 1e-15);
        assert_eq!(g[(0, 0)], 1.0);
    }

    #[test]
    fn gram_is_positive_semidefinite() {
        let k = spec(0.8);
        let mut rng = crate::rng::stream(31, 0);
        for n in [2usize, 5, 12] {
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..2).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let g = gram(&pts, &k).unwrap();
            let eig = nalgebra::SymmetricEigen::new(g);
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-10, "min eigenvalue {min}");
        }
    }

    #[test]
    fn mmd_worked_examples() {
        let k = spec(1.0);
        let a = vec![vec![0.5], vec![-1.0], vec![2.0]];
        assert_eq!(mmd(&a, &a, &k).unwrap(), 0.0);

        // Two single points with K(x,y) = ½: MMD² = 1 + 1 − 2·½ = 1.
        let x = vec![vec![0.0]];
        let sep = (2.0 * 0.5f64.ln().abs()).sqrt(); // K = 0.5 at this distance
        let y = vec![vec![sep]];
        assert_abs_diff_eq!(mmd(&x, &y, &k).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mmd_small_for_same_distribution() {
        let k = spec(1.0);
        let mut rng = crate::rng::stream(32, 0);
        let draw = |rng: &mut crate::rng::RngStream| -> Vec<Vec<f64>> {
            (0..10_000)
                .map(|_| {
                    vec![rand_distr::Distribution::sample(
                        &rand_distr::StandardNormal,
                        rng,
                    )]
                })
                .collect()
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let v = mmd(&a, &b, &k).unwrap();
        assert!(v <= 0.05, "same-distribution MMD {v}");
        // The U-statistic of the same data can legally be negative but must
        // be near zero too.
        let u = mmd_squared_unbiased(&a[..2_000], &b[..2_000], &k).unwrap();
        assert!(u.abs() <= 0.01, "unbiased MMD² {u}");
    }

    #[test]
    fn exact_discrete_mmd_matches_quadratic_form() {
        let k = spec(1.0);
        let pts = vec![vec![0.0], vec![1.0], vec![2.5]];
        let g = gram(&pts, &k).unwrap();
        let p = [0.2, 0.5, 0.3];
        let q = [0.6, 0.1, 0.3];
        let direct = {
            let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += d[i] * g[(i, j)] * d[j];
                }
            }
            s.sqrt()
        };
        assert_abs_diff_eq!(mmd_exact_discrete(&p, &q, &g).unwrap(), direct, epsilon = 1e-15);
        assert_eq!(mmd_exact_discrete(&p, &p, &g).unwrap(), 0.0);
    }

    #[test]
    fn interpolant_norm_reproducing_identities() {
        let k = spec(1.0);
        // Single point, ridge 0: the interpolant is c·K(·,x), norm |c|.
        let n = rkhs_norm_interpolant(&[vec![0.7]], &[-2.5], &k, 0.0).unwrap();
        assert_abs_diff_eq!(n, 2.5, epsilon = 1e-14);
        // All-zero values → zero norm.
        let z =
            rkhs_norm_interpolant(&[vec![0.0], vec![1.0]], &[0.0, 0.0], &k, 0.0).unwrap();
        assert_eq!(z, 0.0);
        // Interpolating samples of f = 2·K(·, z) recovers ‖f‖ = 2.
        let z_pt = vec![0.3];
        let pts: Vec<Vec<f64>> = vec![vec![0.3], vec![-0.5], vec![1.1], vec![2.0]];
        let vals: Vec<f64> = pts.iter().map(|p| 2.0 * k.eval(p, &z_pt)).collect();
        let norm = rkhs_norm_interpolant(&pts, &vals, &k, 0.0).unwrap();
        assert_abs_diff_eq!(norm, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn duplicate_points_need_ridge() {
        let k = spec(1.0);
        let pts = vec![vec![1.0], vec![1.0]];
        match rkhs_norm_interpolant(&pts, &[1.0, 1.0], &k, 0.0) {
            Err(RkhsError::SingularSystem { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected singular-system error, got {other:?}"),
        }
        // A positive ridge succeeds and shrinks slightly below the exact 1.
        let n = rkhs_norm_interpolant(&pts, &[1.0, 1.0], &k, 1e-8).unwrap();
        assert!(n > 0.99 && n <= 1.0, "ridged norm {n}");
    }

    /// ‖f‖_∞ ≤ ‖f‖_H for kernel expansions f = Σ αᵢ K(·, xᵢ): evaluated on a
    /// dense grid for random expansions.
    #[test]
    fn sup_norm_dominated_by_rkhs_norm() {
        let k = spec(0.9);
        let mut rng = crate::rng::stream(33, 0);
        for _ in 0..100 {
            let n = rng.random_range(1..5usize);
            let pts: Vec<Vec<f64>> =
                (0..n).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
            let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            let g = gram(&pts, &k).unwrap();
            let mut norm_sq = 0.0;
            for i in 0..n {
                for j in 0..n {
                    norm_sq += alpha[i] * g[(i, j)] * alpha[j];
                }
            }
            let norm = norm_sq.max(0.0).sqrt();
            let mut sup = 0.0f64;
            for step in -400..=400 {
                let x = vec![step as f64 * 0.01];
                let f: f64 = pts.iter().zip(&alpha).map(|(p, a)| a * k.eval(&x, p)).sum();
                sup = sup.max(f.abs());
            }
            assert!(sup <= norm + 1e-9, "sup {sup} > norm {norm}");
        }
    }
}
