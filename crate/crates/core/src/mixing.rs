//! Latent-scale mixing laws for the four process families.
//!
//! Conditional on a positive latent scale `r` with law `H(r; nu)`, a
//! subject's stacked random terms are Gaussian with covariance
//! `kappa(r) * Sigma`, `kappa(r) = 1/r`. The families are
//!
//! * Gaussian: `r = 1` (point mass),
//! * Student-t: `r ~ Gamma(nu/2, nu/2)`,
//! * slash: `r ~ Beta(nu, 1)`,
//! * contaminated normal: `P(r = gamma) = nu`, `P(r = 1) = 1 - nu`.
//!
//! Everything a fit or prediction needs from the latent scale reduces to
//! functions of the block dimension `n` and the Mahalanobis distance `d`:
//! the E-step weight `E[r | y]`, the predictive variance multiplier
//! `E[1/r | y]`, the marginal log-density, and posterior draws of `r`.

use rand::Rng;
use rand_distr::Distribution;
use statrs::function::gamma::ln_gamma;

use crate::error::{HpfrError, Result};
use crate::linalg::SpdChol;

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// The latent-scale law. Degree parameters carry a `fixed` flag: fixed
/// degrees are never touched by the degree-update step of the fit.
#[derive(Debug, Clone, PartialEq)]
pub enum MixingFamily {
    Gaussian,
    StudentT { nu: f64, fixed: bool },
    Slash { nu: f64, fixed: bool },
    ContaminatedNormal { nu: f64, gamma: f64, fixed: bool },
}

impl MixingFamily {
    pub fn student_t(nu: f64) -> Self {
        MixingFamily::StudentT { nu, fixed: true }
    }

    pub fn slash(nu: f64) -> Self {
        MixingFamily::Slash { nu, fixed: true }
    }

    pub fn label(&self) -> &'static str {
        match self {
            MixingFamily::Gaussian => "N",
            MixingFamily::StudentT { .. } => "T",
            MixingFamily::Slash { .. } => "SL",
            MixingFamily::ContaminatedNormal { .. } => "CN",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            MixingFamily::Gaussian => true,
            MixingFamily::StudentT { nu, .. } | MixingFamily::Slash { nu, .. } => {
                nu.is_finite() && *nu > 0.0
            }
            MixingFamily::ContaminatedNormal { nu, gamma, .. } => {
                nu.is_finite() && gamma.is_finite() && *nu > 0.0 && *nu <= 1.0 && *gamma > 0.0 && *gamma <= 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(HpfrError::Data(format!("invalid mixing family parameters: {self:?}")))
        }
    }

    /// Number of degree parameters the fit estimates for this family.
    pub fn free_degree_count(&self) -> usize {
        match self {
            MixingFamily::Gaussian => 0,
            MixingFamily::StudentT { fixed, .. } | MixingFamily::Slash { fixed, .. } => {
                usize::from(!fixed)
            }
            MixingFamily::ContaminatedNormal { fixed, .. } => {
                if *fixed {
                    0
                } else {
                    2
                }
            }
        }
    }

    /// Current values of the estimated degree parameters.
    pub fn degree_values(&self) -> Vec<f64> {
        match self {
            MixingFamily::Gaussian => vec![],
            MixingFamily::StudentT { nu, fixed } | MixingFamily::Slash { nu, fixed } => {
                if *fixed {
                    vec![]
                } else {
                    vec![*nu]
                }
            }
            MixingFamily::ContaminatedNormal { nu, gamma, fixed } => {
                if *fixed {
                    vec![]
                } else {
                    vec![*nu, *gamma]
                }
            }
        }
    }

    /// Family with estimated degree parameters replaced by `values`
    /// (clipped to the search box).
    pub fn with_degree_values(&self, values: &[f64]) -> MixingFamily {
        let bounds = self.degree_bounds();
        let clip = |i: usize| values[i].clamp(bounds[i].0, bounds[i].1);
        match self {
            MixingFamily::Gaussian => MixingFamily::Gaussian,
            MixingFamily::StudentT { nu, fixed } => MixingFamily::StudentT {
                nu: if *fixed { *nu } else { clip(0) },
                fixed: *fixed,
            },
            MixingFamily::Slash { nu, fixed } => MixingFamily::Slash {
                nu: if *fixed { *nu } else { clip(0) },
                fixed: *fixed,
            },
            MixingFamily::ContaminatedNormal { fixed, .. } => {
                if *fixed {
                    self.clone()
                } else {
                    MixingFamily::ContaminatedNormal { nu: clip(0), gamma: clip(1), fixed: false }
                }
            }
        }
    }

    /// Box constraints for the estimated degree parameters.
    pub fn degree_bounds(&self) -> Vec<(f64, f64)> {
        match self {
            MixingFamily::Gaussian => vec![],
            MixingFamily::StudentT { fixed, .. } => {
                if *fixed {
                    vec![]
                } else {
                    vec![(0.5, 100.0)]
                }
            }
            MixingFamily::Slash { fixed, .. } => {
                if *fixed {
                    vec![]
                } else {
                    vec![(0.1, 50.0)]
                }
            }
            MixingFamily::ContaminatedNormal { fixed, .. } => {
                if *fixed {
                    vec![]
                } else {
                    vec![(0.01, 1.0), (0.01, 1.0)]
                }
            }
        }
    }
}

/// Sufficient statistics of the posterior of `r` given one subject's data:
/// the family, the block dimension and the Mahalanobis distance.
/// `n = 0, d = 0` recovers the prior (used for unconditioned prediction).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalePosterior {
    pub family: MixingFamily,
    pub n: usize,
    pub d: f64,
}

impl ScalePosterior {
    pub fn new(family: MixingFamily, n: usize, d: f64) -> Result<Self> {
        family.validate()?;
        if !(d >= 0.0) || !d.is_finite() {
            return Err(HpfrError::Data(format!("Mahalanobis distance must be >= 0, got {d}")));
        }
        Ok(ScalePosterior { family, n, d })
    }
}

/// `ln( gamma_lower(a, b) / b^a )`, the scaled lower incomplete gamma
/// function, evaluated through the all-positive Kummer series
/// `e^{-b}/a * sum_k prod_{j<=k} b/(a+j)`. Stable for every `a > 0, b >= 0`
/// without cancellation, which is what the slash-family formulas need.
fn ln_lower_inc_gamma_scaled(a: f64, b: f64) -> f64 {
    debug_assert!(a > 0.0 && b >= 0.0);
    if b == 0.0 {
        return -a.ln();
    }
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut log_scale = 0.0f64;
    let mut k = 1.0f64;
    loop {
        term *= b / (a + k);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
        if sum > 1e280 {
            let s = sum.ln();
            log_scale += s;
            term *= (-s).exp();
            sum = 1.0;
        }
        k += 1.0;
        if k > 2e6 {
            break;
        }
    }
    -b + log_scale + sum.ln() - a.ln()
}

/// CN posterior probability of the contaminated component `r = gamma`.
fn cn_prob_gamma(nu: f64, gamma: f64, n: usize, d: f64) -> f64 {
    if nu >= 1.0 {
        return 1.0;
    }
    let lw_g = nu.ln() + 0.5 * n as f64 * gamma.ln() - 0.5 * gamma * d;
    let lw_1 = (1.0 - nu).ln() - 0.5 * d;
    let m = lw_g.max(lw_1);
    let eg = (lw_g - m).exp();
    eg / (eg + (lw_1 - m).exp())
}

/// E-step weight `pi = E[r | y]` (recall `kappa^{-1}(r) = r`). Equals 1 for
/// the Gaussian family and is strictly decreasing in the Mahalanobis
/// distance for the heavy-tailed families.
pub fn posterior_weight(sp: &ScalePosterior) -> f64 {
    let n = sp.n as f64;
    match &sp.family {
        MixingFamily::Gaussian => 1.0,
        MixingFamily::StudentT { nu, .. } => (nu + n) / (nu + sp.d),
        MixingFamily::Slash { nu, .. } => {
            let a = 0.5 * n + nu;
            let b = 0.5 * sp.d;
            (ln_lower_inc_gamma_scaled(a + 1.0, b) - ln_lower_inc_gamma_scaled(a, b)).exp()
        }
        MixingFamily::ContaminatedNormal { nu, gamma, .. } => {
            let p = cn_prob_gamma(*nu, *gamma, sp.n, sp.d);
            p * gamma + (1.0 - p)
        }
    }
}

/// Predictive variance multiplier `E[kappa(r) | y] = E[1/r | y]`. Errors when
/// the moment does not exist (Student-t with `nu + n <= 2`, slash with
/// `n/2 + nu <= 1`).
pub fn posterior_kappa_mean(sp: &ScalePosterior) -> Result<f64> {
    let n = sp.n as f64;
    match &sp.family {
        MixingFamily::Gaussian => Ok(1.0),
        MixingFamily::StudentT { nu, .. } => {
            if nu + n <= 2.0 {
                return Err(HpfrError::Moment(format!(
                    "E[1/r | y] diverges for Student-t with nu = {nu}, n = {}",
                    sp.n
                )));
            }
            Ok((nu + sp.d) / (nu + n - 2.0))
        }
        MixingFamily::Slash { nu, .. } => {
            let a = 0.5 * n + nu;
            if a <= 1.0 {
                return Err(HpfrError::Moment(format!(
                    "E[1/r | y] diverges for slash with nu = {nu}, n = {}",
                    sp.n
                )));
            }
            let b = 0.5 * sp.d;
            Ok((ln_lower_inc_gamma_scaled(a - 1.0, b) - ln_lower_inc_gamma_scaled(a, b)).exp())
        }
        MixingFamily::ContaminatedNormal { nu, gamma, .. } => {
            let p = cn_prob_gamma(*nu, *gamma, sp.n, sp.d);
            Ok(p / gamma + (1.0 - p))
        }
    }
}

/// Marginal log-density of a centered Gaussian block mixed over the latent
/// scale, from precomputed sufficient statistics: dimension, Mahalanobis
/// distance and log-determinant of `Sigma`.
pub fn log_marginal_parts(n: usize, d: f64, ln_det: f64, fam: &MixingFamily) -> Result<f64> {
    fam.validate()?;
    let nf = n as f64;
    let base = -0.5 * nf * LN_2PI - 0.5 * ln_det;
    let value = match fam {
        MixingFamily::Gaussian => base - 0.5 * d,
        MixingFamily::StudentT { nu, .. } => {
            ln_gamma(0.5 * (nu + nf)) - ln_gamma(0.5 * nu) - 0.5 * nf * (nu.ln() + std::f64::consts::PI.ln())
                - 0.5 * ln_det
                - 0.5 * (nu + nf) * (d / nu).ln_1p()
        }
        MixingFamily::Slash { nu, .. } => {
            let a = 0.5 * nf + nu;
            nu.ln() + base + ln_lower_inc_gamma_scaled(a, 0.5 * d)
        }
        MixingFamily::ContaminatedNormal { nu, gamma, .. } => {
            let lw_g = nu.ln() + 0.5 * nf * gamma.ln() - 0.5 * gamma * d;
            let value = if *nu >= 1.0 {
                lw_g
            } else {
                let lw_1 = (1.0 - nu).ln() - 0.5 * d;
                let m = lw_g.max(lw_1);
                m + ((lw_g - m).exp() + (lw_1 - m).exp()).ln()
            };
            base + value
        }
    };
    Ok(value)
}

/// Marginal log-density of a centered observation block `y` with covariance
/// `Sigma` under the mixing family.
pub fn log_marginal(y_centered: &nalgebra::DVector<f64>, sigma: &nalgebra::DMatrix<f64>, fam: &MixingFamily) -> Result<f64> {
    if sigma.nrows() != y_centered.len() || sigma.ncols() != y_centered.len() {
        return Err(HpfrError::Dimension(format!(
            "covariance is {}x{} for a block of length {}",
            sigma.nrows(),
            sigma.ncols(),
            y_centered.len()
        )));
    }
    let chol = SpdChol::new(sigma)?;
    let d = chol.quad_form(y_centered);
    log_marginal_parts(y_centered.len(), d, chol.ln_det(), fam)
}

/// Draws from the posterior of `r` given the subject's data.
///
/// Gaussian: point mass at 1. Student-t: `Gamma((nu+n)/2, (nu+d)/2)`.
/// Slash: `Gamma(n/2 + nu, d/2)` truncated to `(0, 1]`, drawn by inverting
/// the regularized incomplete gamma CDF. CN: the two-point posterior on
/// `{gamma, 1}`.
pub fn sample_posterior_r<R: Rng + ?Sized>(sp: &ScalePosterior, rng: &mut R) -> f64 {
    let n = sp.n as f64;
    match &sp.family {
        MixingFamily::Gaussian => 1.0,
        MixingFamily::StudentT { nu, .. } => {
            let shape = 0.5 * (nu + n);
            let scale = 2.0 / (nu + sp.d);
            rand_distr::Gamma::new(shape, scale)
                .expect("valid gamma parameters")
                .sample(rng)
        }
        MixingFamily::Slash { nu, .. } => {
            let a = 0.5 * n + nu;
            let b = 0.5 * sp.d;
            let u: f64 = rng.random();
            inverse_truncated_gamma_cdf(a, b, u)
        }
        MixingFamily::ContaminatedNormal { nu, gamma, .. } => {
            let p = cn_prob_gamma(*nu, *gamma, sp.n, sp.d);
            if rng.random::<f64>() < p {
                *gamma
            } else {
                1.0
            }
        }
    }
}

/// Inverse CDF of a `Gamma(a, rate = b)` truncated to `(0, 1]`:
/// solves `F(r)/F(1) = u` with `ln F(r) = a ln r + lnG(a, b r)` up to the
/// common normalization, by bisection in log space.
fn inverse_truncated_gamma_cdf(a: f64, b: f64, u: f64) -> f64 {
    if u <= 0.0 {
        return f64::MIN_POSITIVE;
    }
    if u >= 1.0 {
        return 1.0;
    }
    if b < 1e-12 {
        // Degenerate rate: density ~ r^{a-1} on (0,1], CDF = r^a.
        return u.powf(1.0 / a);
    }
    let ln_f1 = ln_lower_inc_gamma_scaled(a, b);
    let target = u.ln() + ln_f1;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let ln_fm = a * mid.ln() + ln_lower_inc_gamma_scaled(a, b * mid);
        if ln_fm < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
