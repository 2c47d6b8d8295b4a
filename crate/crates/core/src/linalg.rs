//! Shared dense linear-algebra helpers: jittered Cholesky factorization and
//! the fixed quantile convention used for all interval endpoints.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{HpfrError, Result};

/// Cholesky factor of a symmetric positive-definite matrix, with the jitter
/// escalation policy: on failure add `1e-10 * mean(diag) * I` and escalate by
/// factors of 10 up to `1e-4 * mean(diag)` before giving up.
pub struct SpdChol {
    chol: Cholesky<f64, Dyn>,
    /// Ridge actually added to the diagonal (0.0 when the matrix factored cleanly).
    pub jitter: f64,
    dim: usize,
}

impl SpdChol {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n == 0 {
            // Trivial factor for the no-observations case.
            return Ok(SpdChol {
                chol: Cholesky::new(DMatrix::zeros(0, 0)).expect("empty cholesky"),
                jitter: 0.0,
                dim: 0,
            });
        }
        if let Some(c) = Cholesky::new(m.clone()) {
            return Ok(SpdChol { chol: c, jitter: 0.0, dim: n });
        }
        let mean_diag = m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        let mut scale = 1e-10;
        while scale <= 1e-4 {
            let jitter = scale * mean_diag;
            let mut jittered = m.clone();
            for i in 0..n {
                jittered[(i, i)] += jitter;
            }
            if let Some(c) = Cholesky::new(jittered) {
                return Ok(SpdChol { chol: c, jitter, dim: n });
            }
            scale *= 10.0;
        }
        Err(HpfrError::Numerical(format!(
            "Cholesky factorization failed for {n}x{n} matrix after jitter escalation"
        )))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// log |Sigma| from the factor diagonal.
    pub fn ln_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        (0..self.dim).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    /// Quadratic form x' Sigma^{-1} x.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        if self.dim == 0 {
            return 0.0;
        }
        x.dot(&self.solve_vec(x))
    }
}

/// Type-7 quantile (linear interpolation of order statistics) of a sorted slice.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Sorts in place and returns the type-7 quantile.
pub fn quantile_of(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("NaN in quantile input"));
    quantile_type7(values, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn clean_spd_factors_without_jitter() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let c = SpdChol::new(&m).unwrap();
        assert_eq!(c.jitter, 0.0);
        assert_relative_eq!(c.ln_det(), (11.0f64).ln(), epsilon = 1e-12);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = c.solve_vec(&b);
        let back = &m * &x;
        assert_relative_eq!(back[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(back[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn semidefinite_gets_jitter() {
        // Rank-1 matrix; needs the ridge to factor.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c = SpdChol::new(&m).unwrap();
        assert!(c.jitter > 0.0);
    }

    #[test]
    fn hopeless_matrix_errors() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -5.0]);
        assert!(SpdChol::new(&m).is_err());
    }

    #[test]
    fn empty_factor_is_trivial() {
        let m = DMatrix::<f64>::zeros(0, 0);
        let c = SpdChol::new(&m).unwrap();
        assert_eq!(c.ln_det(), 0.0);
        assert_eq!(c.quad_form(&DVector::zeros(0)), 0.0);
    }

    #[test]
    fn quantile_matches_linear_interpolation() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(quantile_type7(&xs, 0.5), 2.5);
        assert_relative_eq!(quantile_type7(&xs, 0.0), 1.0);
        assert_relative_eq!(quantile_type7(&xs, 1.0), 4.0);
        assert_relative_eq!(quantile_type7(&xs, 1.0 / 3.0), 2.0);
    }
}
