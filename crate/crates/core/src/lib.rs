//! Heavy-tailed-process functional regression (HPFR).
//!
//! Fits mixed-effects functional regression models in which the stacked
//! random terms follow a scale mixture of Gaussian processes (Gaussian,
//! Student-t, slash or contaminated-normal), estimated by an ECME loop
//! with closed-form GLS mean updates and E-step weights that downweight
//! outlying subjects. On top of a fitted model the crate provides
//! subject-specific kriging prediction with plug-in (PL0/PL1) and
//! parametric-bootstrap (BTS) prediction intervals, plus a simulation
//! benchmark harness that reproduces the reference RMSE/coverage tables.

pub mod data;
pub mod em;
pub mod error;
pub mod kernel;
pub mod likelihood;
pub mod linalg;
pub mod mixing;
pub mod predict;
pub mod rng;
pub mod simulate;

pub(crate) mod optim;

pub use data::{
    assemble_design, build_bspline_basis, load_dataset, BasisConfig, ColumnRoles, Dataset,
    DesignMatrices, Subject,
};
pub use em::{fit, fit_with_design, FitConfig, FitResult};
pub use error::{HpfrError, Result};
pub use kernel::{composite_sigma, cov_matrix, cross_cov, kernel_eval, CovParams, SqExpParams,
    TargetBlocks};
pub use likelihood::{
    bic, marginal_loglik, observed_information, InformationMatrix, ModelParams, ParamLayout,
    PsiFixed,
};
pub use mixing::{
    log_marginal, posterior_kappa_mean, posterior_weight, sample_posterior_r, MixingFamily,
    ScalePosterior,
};
pub use predict::{
    conditional_mean, conditional_variance, interval_bts, interval_pl0, interval_pl1, kriging,
    predict_new_subject, predict_random_terms, predict_subject, predictive_draws, BtsOptions,
    BtsOutcome, Conditional, IntervalBand, PredictOptions, PredictionResult, PredictionTarget,
    TargetKind,
};
pub use simulate::{
    generate_scheme, rmse, run_benchmark, score_intervals, true_mean, BenchReport, FamilyReport,
    FamilySpec, GeneratedData, NewSubjectMode, Scheme, SchemeConfig,
};
