//! Subject-specific prediction: conditional means and variances at target
//! points, random-effect curve reconstruction, and the three prediction
//! interval methods.
//!
//! * PL0 plugs the conditional mean and variance into a normal approximation.
//! * PL1 draws from the predictive distribution at the fitted parameters,
//!   by sampling the latent scale from its posterior and then the Gaussian
//!   conditional.
//! * BTS additionally draws the parameters from their asymptotic normal
//!   distribution (inverse observed information) before each predictive
//!   draw, which widens the intervals by the estimation uncertainty.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{build_bspline_basis, design_block, BasisConfig, Dataset, Subject};
use crate::em::FitResult;
use crate::error::{HpfrError, Result};
use crate::kernel::{composite_sigma, cross_cov, TargetBlocks};
use crate::likelihood::{mahalanobis, ModelParams};
use crate::linalg::{quantile_type7, SpdChol};
use crate::mixing::{posterior_kappa_mean, sample_posterior_r, ScalePosterior};
use crate::rng::substream;

/// What is being predicted at the target points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetKind {
    /// The response curve `y*` (noise included in the target covariance).
    Response,
    /// The random term `tau` (noise-free target by default; `include_noise`
    /// switches to the noise-inclusive `tau~`).
    RandomTerm { include_noise: bool },
}

/// Target points with their covariate blocks.
#[derive(Debug, Clone)]
pub struct PredictionTarget {
    pub t: DVector<f64>,
    pub x: DMatrix<f64>,
    pub w: DMatrix<f64>,
    /// Linear mean covariates at the targets (unused for random-term targets).
    pub v: DMatrix<f64>,
    pub kind: TargetKind,
}

impl PredictionTarget {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.len() == 0
    }

    /// Random-term target on the subject's own observation grid.
    pub fn random_terms_of(subject: &Subject) -> Self {
        PredictionTarget {
            t: subject.t.clone(),
            x: subject.x.clone(),
            w: subject.w.clone(),
            v: subject.v.clone(),
            kind: TargetKind::RandomTerm { include_noise: false },
        }
    }

    /// Response target at the subject's own observation points.
    pub fn responses_of(subject: &Subject) -> Self {
        PredictionTarget {
            t: subject.t.clone(),
            x: subject.x.clone(),
            w: subject.w.clone(),
            v: subject.v.clone(),
            kind: TargetKind::Response,
        }
    }

    fn blocks(&self) -> TargetBlocks {
        TargetBlocks { t: self.t.clone(), x: self.x.clone(), w: self.w.clone() }
    }

    fn include_noise(&self) -> bool {
        match self.kind {
            TargetKind::Response => true,
            TargetKind::RandomTerm { include_noise } => include_noise,
        }
    }
}

/// Kriging quantities shared by all interval methods.
#[derive(Debug, Clone)]
pub struct Conditional {
    pub mean: DVector<f64>,
    /// Gaussian conditional covariance (Schur complement), before the latent
    /// scale multiplier.
    pub schur: DMatrix<f64>,
    pub d: f64,
    pub n_obs: usize,
    pub sp: ScalePosterior,
}

impl Conditional {
    pub fn schur_diag(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.schur.nrows(),
            (0..self.schur.nrows()).map(|i| self.schur[(i, i)].max(0.0)),
        )
    }

    /// Pointwise conditional variance `E[kappa(r) | D] * diag(Schur)`.
    pub fn variance(&self) -> Result<DVector<f64>> {
        let kappa = posterior_kappa_mean(&self.sp)?;
        Ok(self.schur_diag() * kappa)
    }
}

/// Mean curve of a subject-like block: `A beta` with
/// `A = [u' (x) Phi(t), V]`.
fn mean_curve(
    t: &DVector<f64>,
    u: &DVector<f64>,
    v: &DMatrix<f64>,
    params: &ModelParams,
    basis: &BasisConfig,
) -> Result<DVector<f64>> {
    let phi = if u.len() > 0 {
        build_bspline_basis(basis, t.as_slice())?
    } else {
        DMatrix::zeros(t.len(), 0)
    };
    let a = design_block(&phi, u, v);
    Ok(&a * &params.beta)
}

/// Computes the Gaussian conditional of the targets given the subject's
/// observations, plus the scale posterior driving every interval method.
pub fn kriging(
    subject: &Subject,
    params: &ModelParams,
    basis: &BasisConfig,
    target: &PredictionTarget,
) -> Result<Conditional> {
    params.validate()?;
    let n_obs = subject.n_obs();
    let (cross, target_cov) =
        cross_cov(subject, &target.blocks(), &params.cov, target.include_noise())?;
    let mu_target = match target.kind {
        TargetKind::Response => mean_curve(&target.t, &subject.u, &target.v, params, basis)?,
        TargetKind::RandomTerm { .. } => DVector::zeros(target.len()),
    };

    if n_obs == 0 {
        return Ok(Conditional {
            mean: mu_target,
            schur: target_cov,
            d: 0.0,
            n_obs: 0,
            sp: ScalePosterior::new(params.family.clone(), 0, 0.0)?,
        });
    }

    let sigma = composite_sigma(subject, &params.cov)?;
    let chol = SpdChol::new(&sigma)?;
    let mu_obs = mean_curve(&subject.t, &subject.u, &subject.v, params, basis)?;
    let resid = &subject.y - &mu_obs;
    let alpha = chol.solve_vec(&resid);
    let mean = mu_target + cross.transpose() * alpha;
    let z = chol.solve_mat(&cross);
    let schur = target_cov - cross.transpose() * z;
    let d = mahalanobis(&subject.y, &mu_obs, &chol);

    Ok(Conditional {
        mean,
        schur,
        d,
        n_obs,
        sp: ScalePosterior::new(params.family.clone(), n_obs, d)?,
    })
}

/// Conditional mean of the targets. The latent-scale factor cancels, so the
/// point predictor is identical across the four families at equal `(beta, psi)`.
pub fn conditional_mean(
    subject: &Subject,
    params: &ModelParams,
    basis: &BasisConfig,
    target: &PredictionTarget,
) -> Result<DVector<f64>> {
    Ok(kriging(subject, params, basis, target)?.mean)
}

/// Pointwise conditional variance: the Gaussian Schur diagonal times the
/// posterior mean of `kappa(r)`.
pub fn conditional_variance(
    subject: &Subject,
    params: &ModelParams,
    basis: &BasisConfig,
    target: &PredictionTarget,
) -> Result<DVector<f64>> {
    kriging(subject, params, basis, target)?.variance()
}

/// One two-sided pointwise band at a nominal confidence level.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBand {
    /// Nominal confidence level as a fraction in [0, 1].
    pub ncl: f64,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl IntervalBand {
    pub fn mean_length(&self) -> f64 {
        if self.lower.len() == 0 {
            return 0.0;
        }
        (&self.upper - &self.lower).sum() / self.lower.len() as f64
    }
}

/// Normal plug-in intervals: `mean +/- z_{(1+ncl)/2} sqrt(variance)`.
pub fn interval_pl0(mean: &DVector<f64>, variance: &DVector<f64>, ncls: &[f64]) -> Vec<IntervalBand> {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    ncls.iter()
        .map(|&ncl| {
            let z = if ncl <= 0.0 { 0.0 } else { normal.inverse_cdf(0.5 * (1.0 + ncl)) };
            let half = variance.map(|v| z * v.max(0.0).sqrt());
            IntervalBand { ncl, lower: mean - &half, upper: mean + &half }
        })
        .collect()
}

fn bands_from_draws(per_point: &mut [Vec<f64>], ncls: &[f64]) -> Vec<IntervalBand> {
    for point in per_point.iter_mut() {
        point.sort_by(|a, b| a.partial_cmp(b).expect("NaN draw"));
    }
    ncls.iter()
        .map(|&ncl| {
            let n = per_point.len();
            let mut lower = DVector::zeros(n);
            let mut upper = DVector::zeros(n);
            for (i, point) in per_point.iter().enumerate() {
                lower[i] = quantile_type7(point, 0.5 * (1.0 - ncl));
                upper[i] = quantile_type7(point, 0.5 * (1.0 + ncl));
            }
            IntervalBand { ncl, lower, upper }
        })
        .collect()
}

fn simulate_draws<R: Rng + ?Sized>(
    cond: &Conditional,
    n_draws: usize,
    rng: &mut R,
    per_point: &mut [Vec<f64>],
) {
    let diag = cond.schur_diag();
    for _ in 0..n_draws {
        let r = sample_posterior_r(&cond.sp, rng);
        let kappa = 1.0 / r;
        for (i, point) in per_point.iter_mut().enumerate() {
            let sd = (kappa * diag[i]).max(0.0).sqrt();
            let z: f64 = rng.sample(StandardNormal);
            point.push(cond.mean[i] + sd * z);
        }
    }
}

/// Draws from the predictive law at fixed parameters, one vector of draws
/// per target point (the sampling path behind PL1).
pub fn predictive_draws<R: Rng + ?Sized>(
    cond: &Conditional,
    draws: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let mut per_point: Vec<Vec<f64>> = vec![Vec::with_capacity(draws); cond.mean.len()];
    simulate_draws(cond, draws, rng, &mut per_point);
    per_point
}

/// Predictive-distribution plug-in intervals: pointwise quantiles of Monte
/// Carlo draws from the predictive law at the fitted parameters.
pub fn interval_pl1<R: Rng + ?Sized>(
    cond: &Conditional,
    ncls: &[f64],
    draws: usize,
    rng: &mut R,
) -> Vec<IntervalBand> {
    let mut per_point: Vec<Vec<f64>> = vec![Vec::with_capacity(draws); cond.mean.len()];
    simulate_draws(cond, draws, rng, &mut per_point);
    bands_from_draws(&mut per_point, ncls)
}

/// Parametric bootstrap options. The defaults pool `50 * 20 = 1000` draws.
#[derive(Debug, Clone)]
pub struct BtsOptions {
    /// Number of parameter draws.
    pub j_draws: usize,
    /// Predictive draws per parameter draw.
    pub b_draws: usize,
    pub seed: u64,
    /// Scale on the parameter-draw covariance factor; 0 collapses BTS onto PL1.
    pub param_scale: f64,
    /// Retain the pooled draw matrix (one vector per target point).
    pub keep_draws: bool,
}

impl Default for BtsOptions {
    fn default() -> Self {
        BtsOptions { j_draws: 50, b_draws: 20, seed: 0, param_scale: 1.0, keep_draws: false }
    }
}

/// Bootstrap interval output.
#[derive(Debug, Clone)]
pub struct BtsOutcome {
    pub bands: Vec<IntervalBand>,
    /// Predictive draws dropped because a parameter draw failed twice.
    pub skipped: usize,
    pub draws: Option<Vec<Vec<f64>>>,
}

/// Parametric bootstrap intervals: draw parameters from the asymptotic
/// normal on the unconstrained scale, re-krige, sample the latent scale from
/// its posterior at the drawn parameters, then sample the Gaussian
/// conditional; pooled draws give the pointwise quantiles.
pub fn interval_bts(
    subject: &Subject,
    target: &PredictionTarget,
    fit: &FitResult,
    ncls: &[f64],
    opts: &BtsOptions,
) -> Result<BtsOutcome> {
    let info = fit.info.as_ref().ok_or_else(|| {
        HpfrError::Numerical("bootstrap intervals need the observed information matrix".into())
    })?;
    let factor = info.draw_factor();
    let x_hat = fit.layout.pack(&fit.params);
    let q = x_hat.len();
    let mut rng = substream(opts.seed, &[0x6274_73]);

    let total = opts.j_draws * opts.b_draws;
    let mut per_point: Vec<Vec<f64>> = vec![Vec::with_capacity(total); target.len()];
    let mut skipped = 0usize;

    // Trust region on the free scale: a single draw may move each coordinate
    // by at most 6 (a factor e^6 for log-transformed variances), which keeps
    // ill-identified directions from overflowing the predictive draws.
    const MAX_STEP: f64 = 6.0;

    for _ in 0..opts.j_draws {
        let mut accepted = false;
        for _attempt in 0..2 {
            let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
            let step = (&factor * z * opts.param_scale).map(|v| v.clamp(-MAX_STEP, MAX_STEP));
            let x_star = &x_hat + step;
            let params_star = fit.layout.unpack(&x_star, &fit.params);
            match kriging(subject, &params_star, &fit.basis, target) {
                Ok(cond) => {
                    // The draw also needs a finite variance multiplier; check
                    // the moment exists before committing to this parameter draw.
                    if posterior_kappa_mean(&cond.sp).is_err() {
                        continue;
                    }
                    simulate_draws(&cond, opts.b_draws, &mut rng, &mut per_point);
                    accepted = true;
                    break;
                }
                Err(_) => continue,
            }
        }
        if !accepted {
            skipped += opts.b_draws;
        }
    }

    if per_point.iter().any(|p| p.is_empty()) && target.len() > 0 {
        return Err(HpfrError::Numerical(
            "all bootstrap parameter draws failed".into(),
        ));
    }

    let bands = bands_from_draws(&mut per_point, ncls);
    Ok(BtsOutcome {
        bands,
        skipped,
        draws: if opts.keep_draws { Some(per_point) } else { None },
    })
}

/// Which interval methods to compute, and their sampling effort.
#[derive(Debug, Clone)]
pub struct PredictOptions {
    /// Nominal confidence levels, as fractions.
    pub ncls: Vec<f64>,
    pub use_pl0: bool,
    pub use_pl1: bool,
    pub use_bts: bool,
    pub pl1_draws: usize,
    pub seed: u64,
    pub bts: BtsOptions,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            ncls: vec![0.80, 0.90, 0.95],
            use_pl0: true,
            use_pl1: true,
            use_bts: true,
            pl1_draws: 10_000,
            seed: 0,
            bts: BtsOptions::default(),
        }
    }
}

/// Conditional means, variances and the requested interval bands per target
/// point.
#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub pl0: Vec<IntervalBand>,
    pub pl1: Vec<IntervalBand>,
    pub bts: Vec<IntervalBand>,
    pub bts_skipped: usize,
}

/// Full prediction at the target points conditioned on `subject`'s
/// observations, under the fitted model.
pub fn predict_subject(
    subject: &Subject,
    fit: &FitResult,
    target: &PredictionTarget,
    opts: &PredictOptions,
) -> Result<PredictionResult> {
    let cond = kriging(subject, &fit.params, &fit.basis, target)?;
    let variance = cond.variance()?;
    let pl0 = if opts.use_pl0 { interval_pl0(&cond.mean, &variance, &opts.ncls) } else { vec![] };
    let pl1 = if opts.use_pl1 {
        let mut rng = substream(opts.seed, &[0x706c_31]);
        interval_pl1(&cond, &opts.ncls, opts.pl1_draws, &mut rng)
    } else {
        vec![]
    };
    let (bts, bts_skipped) = if opts.use_bts {
        let mut bts_opts = opts.bts.clone();
        bts_opts.seed = bts_opts.seed.wrapping_add(opts.seed);
        let out = interval_bts(subject, target, fit, &opts.ncls, &bts_opts)?;
        (out.bands, out.skipped)
    } else {
        (vec![], 0)
    };
    Ok(PredictionResult { mean: cond.mean, variance, pl0, pl1, bts, bts_skipped })
}

/// Random-term prediction for an observed subject of the fitted dataset, on
/// its own observation grid.
pub fn predict_random_terms(
    ds: &Dataset,
    fit: &FitResult,
    subject_index: usize,
    opts: &PredictOptions,
) -> Result<PredictionResult> {
    let subject = ds.subjects.get(subject_index).ok_or_else(|| {
        HpfrError::Data(format!("subject index {subject_index} out of range"))
    })?;
    let target = PredictionTarget::random_terms_of(subject);
    predict_subject(subject, fit, &target, opts)
}

/// Prediction for a new subject given its (possibly empty) observed block.
pub fn predict_new_subject(
    new_subject: &Subject,
    fit: &FitResult,
    target: &PredictionTarget,
    opts: &PredictOptions,
) -> Result<PredictionResult> {
    predict_subject(new_subject, fit, target, opts)
}
