//! Squared-exponential kernel and per-subject composite covariance assembly.
//!
//! The composite covariance of a subject's stacked random terms is
//! `Sigma_m = C_m + W_m diag(phi_b) W_m' + phi_eps I`, where `C_m` is the
//! squared-exponential kernel over the rows of `X_m`. Cross-covariance blocks
//! against target points share the first two terms; the noise term
//! contributes on the cross block only where an observed time exactly equals
//! a target time (and noise is requested).

use nalgebra::{DMatrix, DVector};

use crate::data::Subject;
use crate::error::{HpfrError, Result};

/// Squared-exponential kernel parameters: signal variance and per-input
/// length-scale weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SqExpParams {
    pub v0: f64,
    pub w: DVector<f64>,
}

impl SqExpParams {
    pub fn new(v0: f64, w: Vec<f64>) -> Self {
        SqExpParams { v0, w: DVector::from_vec(w) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v0 >= 0.0) || !self.v0.is_finite() {
            return Err(HpfrError::Data(format!("invalid signal variance v0 = {}", self.v0)));
        }
        if self.w.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(HpfrError::Data("kernel weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Covariance parameters psi = (theta, phi_b, phi_eps).
#[derive(Debug, Clone, PartialEq)]
pub struct CovParams {
    pub theta: SqExpParams,
    /// Diagonal random-effect variances, length `p_w`.
    pub phi_b: DVector<f64>,
    pub phi_eps: f64,
}

impl CovParams {
    pub fn validate(&self) -> Result<()> {
        self.theta.validate()?;
        if self.phi_b.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(HpfrError::Data("phi_b must be finite and >= 0".into()));
        }
        if !(self.phi_eps > 0.0) || !self.phi_eps.is_finite() {
            return Err(HpfrError::Data(format!("invalid noise variance phi_eps = {}", self.phi_eps)));
        }
        Ok(())
    }
}

/// Covariate blocks at target points: times, kernel inputs and linear
/// random-effect covariates.
#[derive(Debug, Clone)]
pub struct TargetBlocks {
    pub t: DVector<f64>,
    pub x: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl TargetBlocks {
    /// Target blocks at the subject's own observation points.
    pub fn at_observed(subject: &Subject) -> Self {
        TargetBlocks { t: subject.t.clone(), x: subject.x.clone(), w: subject.w.clone() }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.len() == 0
    }
}

#[inline]
fn sq_dist(xa: &DMatrix<f64>, i: usize, xb: &DMatrix<f64>, j: usize, w: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for k in 0..w.len() {
        let d = xa[(i, k)] - xb[(j, k)];
        acc += w[k] * d * d;
    }
    acc
}

/// Squared-exponential kernel value `v0 * exp(-0.5 * sum_k w_k (x_k - x2_k)^2)`.
pub fn kernel_eval(x: &DVector<f64>, x2: &DVector<f64>, theta: &SqExpParams) -> Result<f64> {
    if x.len() != x2.len() || x.len() != theta.w.len() {
        return Err(HpfrError::Dimension(format!(
            "kernel inputs of length {} / {} with {} weights",
            x.len(),
            x2.len(),
            theta.w.len()
        )));
    }
    let mut acc = 0.0;
    for k in 0..x.len() {
        let d = x[k] - x2[k];
        acc += theta.w[k] * d * d;
    }
    Ok(theta.v0 * (-0.5 * acc).exp())
}

/// Kernel matrix over the rows of `x`; built symmetric by construction.
pub fn cov_matrix(x: &DMatrix<f64>, theta: &SqExpParams) -> DMatrix<f64> {
    let n = x.nrows();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        c[(i, i)] = theta.v0;
        for j in 0..i {
            let v = theta.v0 * (-0.5 * sq_dist(x, i, x, j, &theta.w)).exp();
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

/// Composite covariance `Sigma_m = C_m + W diag(phi_b) W' + phi_eps I`.
pub fn composite_sigma(subject: &Subject, p: &CovParams) -> Result<DMatrix<f64>> {
    if subject.x.ncols() != p.theta.w.len() {
        return Err(HpfrError::Dimension(format!(
            "subject {} has p_x = {} but kernel has {} weights",
            subject.id,
            subject.x.ncols(),
            p.theta.w.len()
        )));
    }
    if subject.w.ncols() != p.phi_b.len() {
        return Err(HpfrError::Dimension(format!(
            "subject {} has p_w = {} but phi_b has length {}",
            subject.id,
            subject.w.ncols(),
            p.phi_b.len()
        )));
    }
    let n = subject.n_obs();
    let mut sigma = cov_matrix(&subject.x, &p.theta);
    add_linear_re_sym(&mut sigma, &subject.w, &p.phi_b);
    for i in 0..n {
        sigma[(i, i)] += p.phi_eps;
    }
    Ok(sigma)
}

fn add_linear_re(out: &mut DMatrix<f64>, wa: &DMatrix<f64>, wb: &DMatrix<f64>, phi_b: &DVector<f64>) {
    for k in 0..phi_b.len() {
        let pk = phi_b[k];
        if pk == 0.0 {
            continue;
        }
        for i in 0..wa.nrows() {
            let wik = wa[(i, k)];
            for j in 0..wb.nrows() {
                out[(i, j)] += pk * wik * wb[(j, k)];
            }
        }
    }
}

// Symmetric variant: each off-diagonal pair receives the identically rounded
// product, keeping the matrix symmetric to the last bit.
fn add_linear_re_sym(out: &mut DMatrix<f64>, w: &DMatrix<f64>, phi_b: &DVector<f64>) {
    for k in 0..phi_b.len() {
        let pk = phi_b[k];
        if pk == 0.0 {
            continue;
        }
        for i in 0..w.nrows() {
            for j in 0..=i {
                let v = pk * w[(i, k)] * w[(j, k)];
                out[(i, j)] += v;
                if i != j {
                    out[(j, i)] += v;
                }
            }
        }
    }
}

/// Cross-covariance `Sigma*_{M+1}` (observed x target) and target covariance
/// `Sigma*`. With `include_noise` the target block gains `phi_eps I` and the
/// cross block gains `phi_eps` wherever an observed time equals a target time
/// bit-exactly.
pub fn cross_cov(
    observed: &Subject,
    targets: &TargetBlocks,
    p: &CovParams,
    include_noise: bool,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if targets.x.ncols() != p.theta.w.len() || targets.w.ncols() != p.phi_b.len() {
        return Err(HpfrError::Dimension(
            "target covariate blocks do not match the covariance parameters".into(),
        ));
    }
    if observed.x.ncols() != p.theta.w.len() || observed.w.ncols() != p.phi_b.len() {
        return Err(HpfrError::Dimension(
            "observed covariate blocks do not match the covariance parameters".into(),
        ));
    }
    let n_obs = observed.n_obs();
    let n_tar = targets.len();

    let mut cross = DMatrix::zeros(n_obs, n_tar);
    for i in 0..n_obs {
        for j in 0..n_tar {
            cross[(i, j)] = p.theta.v0 * (-0.5 * sq_dist(&observed.x, i, &targets.x, j, &p.theta.w)).exp();
        }
    }
    add_linear_re(&mut cross, &observed.w, &targets.w, &p.phi_b);
    if include_noise {
        for i in 0..n_obs {
            for j in 0..n_tar {
                if observed.t[i] == targets.t[j] {
                    cross[(i, j)] += p.phi_eps;
                }
            }
        }
    }

    let mut target_cov = cov_matrix(&targets.x, &p.theta);
    add_linear_re_sym(&mut target_cov, &targets.w, &p.phi_b);
    if include_noise {
        for j in 0..n_tar {
            target_cov[(j, j)] += p.phi_eps;
        }
    }
    Ok((cross, target_cov))
}
