//! Dataset-level marginal log-likelihood, Mahalanobis diagnostics, BIC and
//! the observed information matrix over the free-parameter vector.
//!
//! Free parameters live on an unconstrained scale: mean coefficients as-is,
//! variance components and degree parameters through logs. The observed
//! information is the negative finite-difference Hessian of the marginal
//! log-likelihood on that scale; the same layout drives the bootstrap
//! parameter draws.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, DesignMatrices};
use crate::error::{HpfrError, Result};
use crate::kernel::{composite_sigma, CovParams};
use crate::linalg::SpdChol;
use crate::mixing::{log_marginal_parts, MixingFamily};

/// Full parameter set: stacked mean coefficients, covariance parameters and
/// the mixing family.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub beta: DVector<f64>,
    pub cov: CovParams,
    pub family: MixingFamily,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(HpfrError::Data("non-finite mean coefficient".into()));
        }
        self.cov.validate()?;
        self.family.validate()
    }
}

/// Which covariance parameters are frozen at their current values (never
/// packed into the free vector, never moved by the fit).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PsiFixed {
    pub v0: bool,
    pub w: Vec<bool>,
    pub phi_b: Vec<bool>,
    pub phi_eps: bool,
}

impl PsiFixed {
    pub fn none(p_x: usize, p_w: usize) -> Self {
        PsiFixed { v0: false, w: vec![false; p_x], phi_b: vec![false; p_w], phi_eps: false }
    }

    fn resized(&self, p_x: usize, p_w: usize) -> Self {
        let mut out = PsiFixed {
            v0: self.v0,
            w: self.w.clone(),
            phi_b: self.phi_b.clone(),
            phi_eps: self.phi_eps,
        };
        out.w.resize(p_x, false);
        out.phi_b.resize(p_w, false);
        out
    }
}

/// One coordinate of the free-parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub enum FreeCoord {
    Beta(usize),
    LogV0,
    LogW(usize),
    LogPhiB(usize),
    LogPhiEps,
    /// log nu for T/SL, log nu for CN.
    LogNu,
    /// log gamma for CN.
    LogGammaCn,
}

/// Layout of the free-parameter vector: coordinate list plus names, shared by
/// the information matrix, standard errors and bootstrap draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub coords: Vec<FreeCoord>,
}

impl ParamLayout {
    pub fn for_params(params: &ModelParams, fixed: &PsiFixed) -> Self {
        let fixed = fixed.resized(params.cov.theta.w.len(), params.cov.phi_b.len());
        let mut coords = Vec::new();
        for i in 0..params.beta.len() {
            coords.push(FreeCoord::Beta(i));
        }
        if !fixed.v0 {
            coords.push(FreeCoord::LogV0);
        }
        for (k, fx) in fixed.w.iter().enumerate() {
            if !fx {
                coords.push(FreeCoord::LogW(k));
            }
        }
        for (k, fx) in fixed.phi_b.iter().enumerate() {
            if !fx {
                coords.push(FreeCoord::LogPhiB(k));
            }
        }
        if !fixed.phi_eps {
            coords.push(FreeCoord::LogPhiEps);
        }
        match &params.family {
            MixingFamily::Gaussian => {}
            MixingFamily::StudentT { fixed: f, .. } | MixingFamily::Slash { fixed: f, .. } => {
                if !f {
                    coords.push(FreeCoord::LogNu);
                }
            }
            MixingFamily::ContaminatedNormal { fixed: f, .. } => {
                if !f {
                    coords.push(FreeCoord::LogNu);
                    coords.push(FreeCoord::LogGammaCn);
                }
            }
        }
        ParamLayout { coords }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.coords
            .iter()
            .map(|c| match c {
                FreeCoord::Beta(i) => format!("beta[{i}]"),
                FreeCoord::LogV0 => "log_v0".into(),
                FreeCoord::LogW(k) => format!("log_w[{k}]"),
                FreeCoord::LogPhiB(k) => format!("log_phi_b[{k}]"),
                FreeCoord::LogPhiEps => "log_phi_eps".into(),
                FreeCoord::LogNu => "log_nu".into(),
                FreeCoord::LogGammaCn => "log_gamma".into(),
            })
            .collect()
    }

    /// Packs the free coordinates of `params` onto the unconstrained scale.
    pub fn pack(&self, params: &ModelParams) -> DVector<f64> {
        let degrees = all_degrees(&params.family);
        DVector::from_iterator(
            self.coords.len(),
            self.coords.iter().map(|c| match c {
                FreeCoord::Beta(i) => params.beta[*i],
                FreeCoord::LogV0 => params.cov.theta.v0.ln(),
                FreeCoord::LogW(k) => params.cov.theta.w[*k].ln(),
                FreeCoord::LogPhiB(k) => params.cov.phi_b[*k].ln(),
                FreeCoord::LogPhiEps => params.cov.phi_eps.ln(),
                FreeCoord::LogNu => degrees.0.ln(),
                FreeCoord::LogGammaCn => degrees.1.ln(),
            }),
        )
    }

    /// Rebuilds full parameters from a free vector, holding frozen
    /// coordinates at the template's values. Degree parameters are clipped to
    /// their search boxes.
    pub fn unpack(&self, free: &DVector<f64>, template: &ModelParams) -> ModelParams {
        assert_eq!(free.len(), self.coords.len(), "free vector length mismatch");
        let mut out = template.clone();
        let mut nu: Option<f64> = None;
        let mut gamma: Option<f64> = None;
        for (j, c) in self.coords.iter().enumerate() {
            let v = free[j];
            match c {
                FreeCoord::Beta(i) => out.beta[*i] = v,
                FreeCoord::LogV0 => out.cov.theta.v0 = v.exp(),
                FreeCoord::LogW(k) => out.cov.theta.w[*k] = v.exp(),
                FreeCoord::LogPhiB(k) => out.cov.phi_b[*k] = v.exp(),
                FreeCoord::LogPhiEps => out.cov.phi_eps = v.exp(),
                FreeCoord::LogNu => nu = Some(v.exp()),
                FreeCoord::LogGammaCn => gamma = Some(v.exp()),
            }
        }
        if nu.is_some() || gamma.is_some() {
            let values: Vec<f64> = match &template.family {
                MixingFamily::ContaminatedNormal { nu: n0, gamma: g0, .. } => {
                    vec![nu.unwrap_or(*n0), gamma.unwrap_or(*g0)]
                }
                _ => vec![nu.expect("nu coordinate")],
            };
            out.family = template.family.with_degree_values(&values);
        }
        out
    }

    /// Derivative of each natural-scale parameter with respect to its free
    /// coordinate at `params` (delta-method factors for standard errors).
    pub fn natural_scale_jacobian(&self, params: &ModelParams) -> DVector<f64> {
        let degrees = all_degrees(&params.family);
        DVector::from_iterator(
            self.coords.len(),
            self.coords.iter().map(|c| match c {
                FreeCoord::Beta(_) => 1.0,
                FreeCoord::LogV0 => params.cov.theta.v0,
                FreeCoord::LogW(k) => params.cov.theta.w[*k],
                FreeCoord::LogPhiB(k) => params.cov.phi_b[*k],
                FreeCoord::LogPhiEps => params.cov.phi_eps,
                FreeCoord::LogNu => degrees.0,
                FreeCoord::LogGammaCn => degrees.1,
            }),
        )
    }
}

fn all_degrees(fam: &MixingFamily) -> (f64, f64) {
    match fam {
        MixingFamily::Gaussian => (f64::NAN, f64::NAN),
        MixingFamily::StudentT { nu, .. } | MixingFamily::Slash { nu, .. } => (*nu, f64::NAN),
        MixingFamily::ContaminatedNormal { nu, gamma, .. } => (*nu, *gamma),
    }
}

/// Mahalanobis distance `(y - mu)' Sigma^{-1} (y - mu)` from a precomputed
/// factor.
pub fn mahalanobis(y: &DVector<f64>, mu: &DVector<f64>, chol: &SpdChol) -> f64 {
    let resid = y - mu;
    chol.quad_form(&resid)
}

/// Per-subject Mahalanobis distances at the given parameters.
pub fn subject_mahalanobis(
    ds: &Dataset,
    design: &DesignMatrices,
    params: &ModelParams,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ds.n_subjects());
    for (s, a) in ds.subjects.iter().zip(&design.a) {
        let sigma = composite_sigma(s, &params.cov)?;
        let chol = SpdChol::new(&sigma)?;
        let mu = a * &params.beta;
        out.push(mahalanobis(&s.y, &mu, &chol));
    }
    Ok(out)
}

/// Marginal log-likelihood of the whole dataset: the sum of per-subject
/// mixing-family log-densities, reduced in subject order.
pub fn marginal_loglik(ds: &Dataset, design: &DesignMatrices, params: &ModelParams) -> Result<f64> {
    let mut total = 0.0;
    for (s, a) in ds.subjects.iter().zip(&design.a) {
        let sigma = composite_sigma(s, &params.cov)?;
        let chol = SpdChol::new(&sigma)?;
        let mu = a * &params.beta;
        let d = mahalanobis(&s.y, &mu, &chol);
        total += log_marginal_parts(s.n_obs(), d, chol.ln_det(), &params.family)?;
    }
    Ok(total)
}

/// BIC with sample size the total observation count.
pub fn bic_from_loglik(loglik: f64, q_free: usize, n_obs: usize) -> f64 {
    -2.0 * loglik + q_free as f64 * (n_obs as f64).ln()
}

/// `-2 log L + q log(sum_m n_m)` at the given parameters.
pub fn bic(ds: &Dataset, design: &DesignMatrices, params: &ModelParams, q_free: usize) -> Result<f64> {
    Ok(bic_from_loglik(marginal_loglik(ds, design, params)?, q_free, ds.n_total()))
}

/// Observed information: `J = -H` with `H` the central finite-difference
/// Hessian of the marginal log-likelihood over the free-parameter vector.
#[derive(Debug, Clone)]
pub struct InformationMatrix {
    pub j: DMatrix<f64>,
    pub layout: ParamLayout,
    /// Whether `J` was positive definite at the evaluation point.
    pub pd: bool,
    /// Set when a non-PD `J` was replaced by its eigenvalue-clipped
    /// projection so that downstream sampling stays usable.
    pub projected: bool,
}

impl InformationMatrix {
    /// Standard errors on the natural scale: `sqrt(diag(J^{-1}))` multiplied
    /// by the delta-method factor of each coordinate's transform.
    pub fn standard_errors(&self, params: &ModelParams) -> Result<DVector<f64>> {
        let chol = SpdChol::new(&self.j)?;
        let q = self.j.nrows();
        let jac = self.layout.natural_scale_jacobian(params);
        let mut se = DVector::zeros(q);
        for i in 0..q {
            let mut e = DVector::zeros(q);
            e[i] = 1.0;
            let col = chol.solve_vec(&e);
            se[i] = col[i].max(0.0).sqrt() * jac[i].abs();
        }
        Ok(se)
    }

    /// Factor `F` with `F F' = J^+` (pseudo-inverse) for sampling parameter
    /// draws. Eigen-directions with no curvature - variance components
    /// estimated at the zero boundary leave the log-scale likelihood flat -
    /// carry no information about estimation uncertainty, so they are not
    /// sampled at all rather than sampled with a near-infinite variance.
    pub fn draw_factor(&self) -> DMatrix<f64> {
        let eig = nalgebra::SymmetricEigen::new(self.j.clone());
        let q = self.j.nrows();
        let max_ev = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        let cutoff = (1e-8 * max_ev).max(f64::MIN_POSITIVE);
        let mut f = DMatrix::zeros(q, q);
        for k in 0..q {
            let ev = eig.eigenvalues[k];
            let scale = if ev > cutoff { 1.0 / ev.sqrt() } else { 0.0 };
            for i in 0..q {
                f[(i, k)] = eig.eigenvectors[(i, k)] * scale;
            }
        }
        f
    }
}

/// Central finite-difference Hessian of `f` at `x`, with per-coordinate step
/// `h_i = max(1e-5, 1e-4 |x_i|)`, symmetrized by construction.
pub fn fd_hessian(f: &mut dyn FnMut(&DVector<f64>) -> f64, x: &DVector<f64>) -> DMatrix<f64> {
    let q = x.len();
    let h: Vec<f64> = x.iter().map(|v| (1e-4 * v.abs()).max(1e-5)).collect();
    let f0 = f(x);
    let mut hess = DMatrix::zeros(q, q);
    let mut xp = x.clone();
    for i in 0..q {
        xp[i] = x[i] + h[i];
        let fp = f(&xp);
        xp[i] = x[i] - h[i];
        let fm = f(&xp);
        xp[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
    }
    for i in 0..q {
        for j in 0..i {
            xp[i] = x[i] + h[i];
            xp[j] = x[j] + h[j];
            let fpp = f(&xp);
            xp[j] = x[j] - h[j];
            let fpm = f(&xp);
            xp[i] = x[i] - h[i];
            xp[j] = x[j] + h[j];
            let fmp = f(&xp);
            xp[j] = x[j] - h[j];
            let fmm = f(&xp);
            xp[i] = x[i];
            xp[j] = x[j];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Observed information matrix at `params` over the free coordinates given by
/// `fixed`. Non-finite likelihood excursions at the difference stencil points
/// surface as a numerical error.
pub fn observed_information(
    ds: &Dataset,
    design: &DesignMatrices,
    params: &ModelParams,
    fixed: &PsiFixed,
) -> Result<InformationMatrix> {
    let layout = ParamLayout::for_params(params, fixed);
    let x0 = layout.pack(params);
    let mut failed = false;
    let mut f = |x: &DVector<f64>| -> f64 {
        let p = layout.unpack(x, params);
        match marginal_loglik(ds, design, &p) {
            Ok(v) if v.is_finite() => v,
            _ => {
                failed = true;
                f64::NAN
            }
        }
    };
    let h = fd_hessian(&mut f, &x0);
    if failed || h.iter().any(|v| !v.is_finite()) {
        return Err(HpfrError::Numerical(
            "log-likelihood not finite on the finite-difference stencil".into(),
        ));
    }
    let j = -h;
    let pd = SpdChol::new(&j).map(|c| c.jitter == 0.0).unwrap_or(false);
    Ok(InformationMatrix { j, layout, pd, projected: !pd })
}
