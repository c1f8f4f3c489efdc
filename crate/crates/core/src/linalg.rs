//! Small dense SPD helpers.
//!
//! nalgebra covers general linear algebra; this module exists because several
//! call sites need a Cholesky factorisation whose failure reports *which* pivot
//! went non-positive (covariance validation, interpolant ridge guidance).

use nalgebra::DMatrix;

/// Lower-triangular Cholesky factor of a symmetric matrix, or the index of the
/// first non-positive pivot encountered.
pub(crate) fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>, usize> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(j);
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(l)
}

/// Solves `L z = b` for lower-triangular `L`.
pub(crate) fn forward_solve(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * z[k];
        }
        z[i] = s / l[(i, i)];
    }
    z
}

/// Solves `Lᵀ x = z` for lower-triangular `L`.
pub(crate) fn back_solve(l: &DMatrix<f64>, z: &[f64]) -> Vec<f64> {
    let n = z.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `A x = b` given the lower Cholesky factor of `A`.
pub(crate) fn cholesky_solve(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    back_solve(l, &forward_solve(l, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn factor_matches_nalgebra_on_random_spd() {
        let mut rng_state = 0x2545_F491_4F6C_DD1Du64;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for n in [1usize, 2, 5, 8] {
            let b = DMatrix::from_fn(n, n, |_, _| next());
            let a = &b * b.transpose() + DMatrix::identity(n, n) * 0.5;
            let l = cholesky_lower(&a).expect("SPD by construction");
            let expect = nalgebra::Cholesky::new(a.clone()).unwrap().l();
            assert_relative_eq!(l, expect, epsilon = 1e-10);
            // Round-trip solve.
            let b_vec: Vec<f64> = (0..n).map(|_| next()).collect();
            let x = cholesky_solve(&l, &b_vec);
            let r = &a * DMatrix::from_column_slice(n, 1, &x);
            for i in 0..n {
                assert_relative_eq!(r[(i, 0)], b_vec[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn reports_first_bad_pivot() {
        // Leading 2x2 block is fine; third pivot fails.
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 0.0, 2.0, 0.0, 1.0, 0.0, 2.0, 0.0, 1.0]);
        assert_eq!(cholesky_lower(&a), Err(2));
        let zero = DMatrix::zeros(2, 2);
        assert_eq!(cholesky_lower(&zero), Err(0));
    }
}
