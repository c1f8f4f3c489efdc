//! Target distributions: log densities and score functions.
//!
//! A [`TargetModel`] is anything the samplers can work against: it reports its
//! dimension, an unnormalised-or-normalised log density (each model documents
//! its constant convention), and the score ∇ log π. Scores drive both the MALA
//! proposal mean and the Stein control variates, so every model's score is
//! required to be the exact gradient of its `log_density` — a property the
//! test suite checks by central finite differences.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum TargetError {
    /// Covariance (or Gram) matrix failed Cholesky at the given pivot.
    #[error("covariance is not positive definite: pivot {pivot} is non-positive")]
    NotPositiveDefinite { pivot: usize },
    #[error("dimension mismatch: {context} has length {got}, expected {expected}")]
    DimensionMismatch {
        context: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("mean must be non-empty")]
    EmptyMean,
    #[error("prior_variance must be positive and finite, got {0}")]
    InvalidPriorVariance(f64),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad regression CSV at line {line}: {message}")]
    CsvFormat { line: usize, message: String },
}

/// A target distribution on R^d.
pub trait TargetModel: Sync {
    fn dim(&self) -> usize;
    /// Log density at `x`. Constant conventions are per-model and documented.
    fn log_density(&self, x: &[f64]) -> f64;
    /// Gradient of [`Self::log_density`] at `x`.
    fn score(&self, x: &[f64]) -> Vec<f64>;
}

/// Multivariate Gaussian N(mean, covariance) with the full normalising
/// constant included in `log_density`.
pub struct Gaussian {
    mean: Vec<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    /// N(0, I_d).
    pub fn standard(dim: usize) -> Self {
        make_gaussian(vec![0.0; dim], DMatrix::identity(dim, dim))
            .expect("identity covariance is positive definite")
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
}

impl fmt::Debug for Gaussian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gaussian").field("dim", &self.mean.len()).finish()
    }
}

/// Builds a Gaussian target, validating the covariance by Cholesky; the error
/// names the first failing pivot so a bad matrix is quick to locate.
pub fn make_gaussian(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Gaussian, TargetError> {
    let d = mean.len();
    if d == 0 {
        return Err(TargetError::EmptyMean);
    }
    if covariance.nrows() != d || covariance.ncols() != d {
        return Err(TargetError::DimensionMismatch {
            context: "covariance",
            got: covariance.nrows(),
            expected: d,
        });
    }
    let chol = linalg::cholesky_lower(&covariance)
        .map_err(|pivot| TargetError::NotPositiveDefinite { pivot })?;
    let log_det: f64 = (0..d).map(|i| chol[(i, i)].ln()).sum::<f64>() * 2.0;
    let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
    Ok(Gaussian { mean, chol, log_norm })
}

impl TargetModel for Gaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let centred: Vec<f64> = x.iter().zip(&self.mean).map(|(xi, mi)| xi - mi).collect();
        let z = linalg::forward_solve(&self.chol, &centred);
        self.log_norm - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
    }

    fn score(&self, x: &[f64]) -> Vec<f64> {
        // -Σ⁻¹ (x - μ) via two triangular solves.
        let centred: Vec<f64> = x.iter().zip(&self.mean).map(|(xi, mi)| xi - mi).collect();
        let z = linalg::forward_solve(&self.chol, &centred);
        let mut s = linalg::back_solve(&self.chol, &z);
        for v in &mut s {
            *v = -*v;
        }
        s
    }
}

/// Design matrix plus 0/1 labels for logistic regression.
#[derive(Debug, Clone)]
pub struct RegressionData {
    design: DMatrix<f64>,
    labels: Vec<f64>,
}

impl RegressionData {
    /// Validates shapes, finiteness and binary labels.
    pub fn new(design: DMatrix<f64>, labels: Vec<f64>) -> Result<Self, TargetError> {
        if design.nrows() != labels.len() {
            return Err(TargetError::DimensionMismatch {
                context: "labels",
                got: labels.len(),
                expected: design.nrows(),
            });
        }
        for (i, v) in design.iter().enumerate() {
            if !v.is_finite() {
                return Err(TargetError::CsvFormat {
                    line: i % design.nrows() + 1,
                    message: format!("non-finite design entry {v}"),
                });
            }
        }
        for (i, y) in labels.iter().enumerate() {
            if *y != 0.0 && *y != 1.0 {
                return Err(TargetError::CsvFormat {
                    line: i + 1,
                    message: format!("label must be 0 or 1, got {y}"),
                });
            }
        }
        Ok(Self { design, labels })
    }

    /// Loads `n` rows of `p` feature columns followed by one 0/1 label column.
    /// The first line is a header and is skipped; fields are comma-separated
    /// with `.` as the decimal separator.
    pub fn from_csv(path: &Path) -> Result<Self, TargetError> {
        let text = std::fs::read_to_string(path).map_err(|source| TargetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv_str(&text)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, TargetError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(TargetError::CsvFormat {
            line: 1,
            message: "missing header row".into(),
        })?;
        let ncols = header.split(',').count();
        if ncols < 2 {
            return Err(TargetError::CsvFormat {
                line: 1,
                message: format!("need at least one feature and a label column, header has {ncols}"),
            });
        }
        let p = ncols - 1;
        let mut rows: Vec<f64> = Vec::new();
        let mut labels: Vec<f64> = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != ncols {
                return Err(TargetError::CsvFormat {
                    line: lineno,
                    message: format!("expected {ncols} columns, found {}", fields.len()),
                });
            }
            for field in &fields[..p] {
                let v: f64 = field.trim().parse().map_err(|_| TargetError::CsvFormat {
                    line: lineno,
                    message: format!("cannot parse feature value {field:?}"),
                })?;
                if !v.is_finite() {
                    return Err(TargetError::CsvFormat {
                        line: lineno,
                        message: format!("non-finite feature value {field:?}"),
                    });
                }
                rows.push(v);
            }
            let label = fields[p].trim();
            match label {
                "0" => labels.push(0.0),
                "1" => labels.push(1.0),
                other => {
                    return Err(TargetError::CsvFormat {
                        line: lineno,
                        message: format!("label must be 0 or 1, got {other:?}"),
                    })
                }
            }
        }
        let n = labels.len();
        let design = DMatrix::from_row_slice(n, p, &rows);
        Self::new(design, labels)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn p(&self) -> usize {
        self.design.ncols()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }
}

/// Bayesian logistic regression posterior: Bernoulli likelihood with logit
/// link and an isotropic N(0, prior_variance · I) prior on the coefficients.
///
/// `log_density` omits the prior's normalising constant, so at β = 0 it equals
/// −n·ln 2 exactly.
pub struct LogisticRegression {
    data: RegressionData,
    prior_variance: f64,
}

impl fmt::Debug for LogisticRegression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LogisticRegression")
            .field("n", &self.data.n())
            .field("p", &self.data.p())
            .field("prior_variance", &self.prior_variance)
            .finish()
    }
}

pub fn make_logistic_regression(
    data: RegressionData,
    prior_variance: f64,
) -> Result<LogisticRegression, TargetError> {
    if !(prior_variance > 0.0) || !prior_variance.is_finite() {
        return Err(TargetError::InvalidPriorVariance(prior_variance));
    }
    Ok(LogisticRegression { data, prior_variance })
}

/// ln(1 + e^z) without overflow for large |z|.
fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic sigmoid, stable in both tails.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticRegression {
    fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        let x = self.data.design();
        (0..self.data.n())
            .map(|i| (0..self.data.p()).map(|j| x[(i, j)] * beta[j]).sum())
            .collect()
    }
}

impl TargetModel for LogisticRegression {
    fn dim(&self) -> usize {
        self.data.p()
    }

    fn log_density(&self, beta: &[f64]) -> f64 {
        let z = self.linear_predictor(beta);
        let mut ll = 0.0;
        for (zi, yi) in z.iter().zip(self.data.labels()) {
            ll += yi * zi - log1p_exp(*zi);
        }
        let prior: f64 = beta.iter().map(|b| b * b).sum::<f64>() / (2.0 * self.prior_variance);
        ll - prior
    }

    fn score(&self, beta: &[f64]) -> Vec<f64> {
        let z = self.linear_predictor(beta);
        let x = self.data.design();
        let mut g = vec![0.0; self.data.p()];
        for i in 0..self.data.n() {
            let resid = self.data.labels()[i] - sigmoid(z[i]);
            for (j, gj) in g.iter_mut().enumerate() {
                *gj += x[(i, j)] * resid;
            }
        }
        for (j, gj) in g.iter_mut().enumerate() {
            *gj -= beta[j] / self.prior_variance;
        }
        g
    }
}

/// Stacks `score(x)` for each point into a matrix with one row per point and
/// `model.dim()` columns; an empty point list yields a 0 × d matrix.
pub fn score_matrix<M: TargetModel + ?Sized>(
    model: &M,
    points: &[Vec<f64>],
) -> Result<DMatrix<f64>, TargetError> {
    let d = model.dim();
    for pt in points {
        if pt.len() != d {
            return Err(TargetError::DimensionMismatch {
                context: "score point",
                got: pt.len(),
                expected: d,
            });
        }
    }
    let mut m = DMatrix::zeros(points.len(), d);
    for (i, pt) in points.iter().enumerate() {
        let s = model.score(pt);
        for (j, v) in s.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;

    fn toy_regression() -> RegressionData {
        // 4 observations, 2 features; values chosen so nothing is symmetric.
        let design = DMatrix::from_row_slice(
            4,
            2,
            &[0.5, -1.0, 1.5, 0.25, -0.75, 2.0, 0.1, -0.3],
        );
        RegressionData::new(design, vec![1.0, 0.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn standard_normal_log_density_at_origin() {
        let g = Gaussian::standard(1);
        // -0.5 * ln(2π)
        assert_abs_diff_eq!(g.log_density(&[0.0]), -0.9189385332046727, epsilon = 1e-15);
        let g3 = Gaussian::standard(3);
        assert_abs_diff_eq!(
            g3.log_density(&[0.0, 0.0, 0.0]),
            3.0 * -0.9189385332046727,
            epsilon = 1e-14
        );
    }

    #[test]
    fn standard_normal_score_is_negated_point() {
        let g = Gaussian::standard(3);
        let x = [0.3, -1.2, 2.5];
        let s = g.score(&x);
        for (si, xi) in s.iter().zip(&x) {
            assert_abs_diff_eq!(*si, -xi, epsilon = 1e-14);
        }
    }

    #[test]
    fn correlated_gaussian_matches_direct_formulas() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mean = vec![1.0, -2.0];
        let g = make_gaussian(mean.clone(), cov.clone()).unwrap();
        let x = [0.4, -1.1];
        let centred = nalgebra::DVector::from_vec(vec![x[0] - mean[0], x[1] - mean[1]]);
        let inv = cov.clone().try_inverse().unwrap();
        let quad = (centred.transpose() * &inv * &centred)[(0, 0)];
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        let expect =
            -0.5 * quad - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(g.log_density(&x), expect, epsilon = 1e-12);
        let s = g.score(&x);
        let expect_s = -(&inv * &centred);
        assert_relative_eq!(s[0], expect_s[0], epsilon = 1e-12);
        assert_relative_eq!(s[1], expect_s[1], epsilon = 1e-12);
    }

    #[test]
    fn non_positive_definite_covariance_names_pivot() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match make_gaussian(vec![0.0, 0.0], cov) {
            Err(TargetError::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected pivot error, got {other:?}"),
        }
    }

    #[test]
    fn logistic_at_zero_is_n_log_two() {
        let data = toy_regression();
        let n = data.n() as f64;
        let m = make_logistic_regression(data, 10.0).unwrap();
        assert_abs_diff_eq!(
            m.log_density(&[0.0, 0.0]),
            -n * std::f64::consts::LN_2,
            epsilon = 1e-13
        );
        // Score at zero: Xᵀ(y − ½·1), the prior term vanishes.
        let s = m.score(&[0.0, 0.0]);
        let data = toy_regression();
        let mut expect = vec![0.0, 0.0];
        for i in 0..data.n() {
            for j in 0..2 {
                expect[j] += data.design()[(i, j)] * (data.labels()[i] - 0.5);
            }
        }
        assert_abs_diff_eq!(s[0], expect[0], epsilon = 1e-13);
        assert_abs_diff_eq!(s[1], expect[1], epsilon = 1e-13);
    }

    #[test]
    fn empty_logistic_reduces_to_prior() {
        let data = RegressionData::new(DMatrix::zeros(0, 3), vec![]).unwrap();
        let m = make_logistic_regression(data, 4.0).unwrap();
        let beta = [1.0, -2.0, 0.5];
        // Pure prior: log density −‖β‖²/8, score −β/4.
        assert_abs_diff_eq!(
            m.log_density(&beta),
            -(1.0 + 4.0 + 0.25) / 8.0,
            epsilon = 1e-14
        );
        let s = m.score(&beta);
        for (si, bi) in s.iter().zip(&beta) {
            assert_abs_diff_eq!(*si, -bi / 4.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn log1p_exp_is_stable_in_both_tails() {
        assert_abs_diff_eq!(log1p_exp(800.0), 800.0, epsilon = 1e-12);
        assert_abs_diff_eq!(log1p_exp(-800.0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(log1p_exp(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    /// Central finite differences of log_density must reproduce score for
    /// every built-in model. Step 1e-5; mixed relative/absolute tolerance.
    #[test]
    fn score_matches_finite_differences() {
        let models: Vec<Box<dyn TargetModel>> = vec![
            Box::new(Gaussian::standard(3)),
            Box::new(
                make_gaussian(
                    vec![0.5, -0.5],
                    DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
                )
                .unwrap(),
            ),
            Box::new(make_logistic_regression(toy_regression(), 10.0).unwrap()),
            Box::new(
                make_logistic_regression(
                    RegressionData::new(DMatrix::zeros(0, 2), vec![]).unwrap(),
                    4.0,
                )
                .unwrap(),
            ),
        ];
        let mut rng = crate::rng::stream(11, 0);
        let h = 1e-5;
        for model in &models {
            let d = model.dim();
            for _ in 0..25 {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let s = model.score(&x);
                for j in 0..d {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (model.log_density(&xp) - model.log_density(&xm)) / (2.0 * h);
                    let tol = 1e-4 * s[j].abs().max(1.0);
                    assert_abs_diff_eq!(s[j], fd, epsilon = tol);
                }
            }
        }
    }

    /// A short ascent along the score must increase the log density.
    #[test]
    fn score_points_uphill() {
        let m = make_logistic_regression(toy_regression(), 10.0).unwrap();
        let mut rng = crate::rng::stream(12, 0);
        for _ in 0..50 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s = m.score(&x);
            let norm: f64 = s.iter().map(|v| v * v).sum::<f64>();
            if norm < 1e-12 {
                continue;
            }
            let step = 1e-4 / norm.sqrt().max(1.0);
            let x2: Vec<f64> = x.iter().zip(&s).map(|(xi, si)| xi + step * si).collect();
            assert!(m.log_density(&x2) > m.log_density(&x));
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let good = "x1,x2,y\n0.5,-1.0,1\n1.5,0.25,0\n";
        let data = RegressionData::from_csv_str(good).unwrap();
        assert_eq!((data.n(), data.p()), (2, 2));
        assert_abs_diff_eq!(data.design()[(1, 1)], 0.25);
        assert_eq!(data.labels(), &[1.0, 0.0]);

        let ragged = "x1,x2,y\n0.5,-1.0,1\n1.5,0\n";
        match RegressionData::from_csv_str(ragged) {
            Err(TargetError::CsvFormat { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected format error, got {other:?}"),
        }

        let bad_label = "x1,y\n0.5,2\n";
        assert!(matches!(
            RegressionData::from_csv_str(bad_label),
            Err(TargetError::CsvFormat { line: 2, .. })
        ));

        let non_finite = "x1,y\ninf,1\n";
        assert!(matches!(
            RegressionData::from_csv_str(non_finite),
            Err(TargetError::CsvFormat { line: 2, .. })
        ));
    }

    #[test]
    fn score_matrix_shapes_and_values() {
        let g = Gaussian::standard(2);
        let empty = score_matrix(&g, &[]).unwrap();
        assert_eq!((empty.nrows(), empty.ncols()), (0, 2));
        let pts = vec![vec![1.0, 2.0], vec![-0.5, 0.0]];
        let m = score_matrix(&g, &pts).unwrap();
        assert_abs_diff_eq!(m[(0, 0)], -1.0);
        assert_abs_diff_eq!(m[(0, 1)], -2.0);
        assert_abs_diff_eq!(m[(1, 0)], 0.5);
        assert!(score_matrix(&g, &[vec![1.0]]).is_err());
    }
}
