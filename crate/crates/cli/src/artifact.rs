//! Versioned fit artifact: a self-describing TOML file holding the fitted
//! parameters, free-parameter layout, observed information matrix, data
//! schema and a config echo, sufficient to run predictions without refitting.

use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use hpfr_core::{
    BasisConfig, ColumnRoles, CovParams, FitResult, InformationMatrix, MixingFamily, ModelParams,
    ParamLayout, PsiFixed, SqExpParams,
};

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact {
    pub version: u32,
    pub family_label: String,
    pub family: FamilyBlock,
    pub mean: MeanBlock,
    pub covariance: CovBlock,
    pub basis: BasisBlock,
    pub data_schema: SchemaBlock,
    pub psi_fixed: PsiFixedBlock,
    pub fit_summary: FitSummaryBlock,
    pub information: Option<InfoBlock>,
    pub config_echo: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FamilyBlock {
    pub kind: String,
    pub nu: Option<f64>,
    pub gamma: Option<f64>,
    pub fixed: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MeanBlock {
    pub beta: Vec<f64>,
    pub names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CovBlock {
    pub v0: f64,
    pub w: Vec<f64>,
    pub phi_b: Vec<f64>,
    pub phi_eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BasisBlock {
    pub degree: usize,
    pub interior_knots: usize,
    pub domain: [f64; 2],
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SchemaBlock {
    pub u_cols: Vec<String>,
    pub v_cols: Vec<String>,
    pub w_cols: Vec<String>,
    pub x_cols: Vec<String>,
    pub u_intercept: bool,
    pub v_intercept: bool,
    pub w_intercept: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PsiFixedBlock {
    pub v0: bool,
    pub w: Vec<bool>,
    pub phi_b: Vec<bool>,
    pub phi_eps: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitSummaryBlock {
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub bic: f64,
    pub q_free: usize,
    pub n_obs: usize,
    pub free_names: Vec<String>,
    pub subject_ids: Vec<String>,
    pub weights: Vec<f64>,
    pub mahalanobis: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InfoBlock {
    pub pd: bool,
    pub projected: bool,
    pub rows: Vec<Vec<f64>>,
}

fn family_block(fam: &MixingFamily) -> FamilyBlock {
    match fam {
        MixingFamily::Gaussian => FamilyBlock {
            kind: "gaussian".into(),
            nu: None,
            gamma: None,
            fixed: true,
        },
        MixingFamily::StudentT { nu, fixed } => FamilyBlock {
            kind: "student_t".into(),
            nu: Some(*nu),
            gamma: None,
            fixed: *fixed,
        },
        MixingFamily::Slash { nu, fixed } => FamilyBlock {
            kind: "slash".into(),
            nu: Some(*nu),
            gamma: None,
            fixed: *fixed,
        },
        MixingFamily::ContaminatedNormal { nu, gamma, fixed } => FamilyBlock {
            kind: "contaminated_normal".into(),
            nu: Some(*nu),
            gamma: Some(*gamma),
            fixed: *fixed,
        },
    }
}

fn family_from_block(b: &FamilyBlock) -> Result<MixingFamily> {
    Ok(match b.kind.as_str() {
        "gaussian" => MixingFamily::Gaussian,
        "student_t" => MixingFamily::StudentT {
            nu: b.nu.context("student_t needs nu")?,
            fixed: b.fixed,
        },
        "slash" => MixingFamily::Slash {
            nu: b.nu.context("slash needs nu")?,
            fixed: b.fixed,
        },
        "contaminated_normal" => MixingFamily::ContaminatedNormal {
            nu: b.nu.context("contaminated_normal needs nu")?,
            gamma: b.gamma.context("contaminated_normal needs gamma")?,
            fixed: b.fixed,
        },
        other => bail!("unknown family kind `{other}` in artifact"),
    })
}

/// Human-readable names for the mean coefficients: B-spline block then the
/// linear covariates.
pub fn beta_names(roles: &ColumnRoles, n_beta: usize) -> Vec<String> {
    let mut names = Vec::new();
    let mut u_names: Vec<String> = Vec::new();
    if roles.u_intercept {
        u_names.push("u0".into());
    }
    u_names.extend(roles.u_cols.iter().cloned());
    let p_v = roles.p_v();
    let d_basis = if u_names.is_empty() { 0 } else { (n_beta - p_v) / u_names.len() };
    for u in &u_names {
        for j in 0..d_basis {
            names.push(format!("spline[{j}]*{u}"));
        }
    }
    if roles.v_intercept {
        names.push("intercept".into());
    }
    names.extend(roles.v_cols.iter().cloned());
    names
}

pub fn from_fit(
    label: &str,
    fit: &FitResult,
    roles: &ColumnRoles,
    subject_ids: &[String],
    config_echo: &str,
) -> Artifact {
    Artifact {
        version: ARTIFACT_VERSION,
        family_label: label.to_string(),
        family: family_block(&fit.params.family),
        mean: MeanBlock {
            beta: fit.params.beta.iter().cloned().collect(),
            names: beta_names(roles, fit.params.beta.len()),
        },
        covariance: CovBlock {
            v0: fit.params.cov.theta.v0,
            w: fit.params.cov.theta.w.iter().cloned().collect(),
            phi_b: fit.params.cov.phi_b.iter().cloned().collect(),
            phi_eps: fit.params.cov.phi_eps,
        },
        basis: BasisBlock {
            degree: fit.basis.degree,
            interior_knots: fit.basis.interior_knots,
            domain: [fit.basis.domain.0, fit.basis.domain.1],
        },
        data_schema: SchemaBlock {
            u_cols: roles.u_cols.clone(),
            v_cols: roles.v_cols.clone(),
            w_cols: roles.w_cols.clone(),
            x_cols: roles.x_cols.clone(),
            u_intercept: roles.u_intercept,
            v_intercept: roles.v_intercept,
            w_intercept: roles.w_intercept,
        },
        psi_fixed: PsiFixedBlock {
            v0: fit.psi_fixed.v0,
            w: fit.psi_fixed.w.clone(),
            phi_b: fit.psi_fixed.phi_b.clone(),
            phi_eps: fit.psi_fixed.phi_eps,
        },
        fit_summary: FitSummaryBlock {
            converged: fit.converged,
            iterations: fit.iterations,
            loglik: fit.loglik,
            bic: fit.bic,
            q_free: fit.q_free,
            n_obs: fit.n_obs,
            free_names: fit.layout.names(),
            subject_ids: subject_ids.to_vec(),
            weights: fit.weights.clone(),
            mahalanobis: fit.mahalanobis.clone(),
            warnings: fit.warnings.clone(),
        },
        information: fit.info.as_ref().map(|im| InfoBlock {
            pd: im.pd,
            projected: im.projected,
            rows: (0..im.j.nrows())
                .map(|i| (0..im.j.ncols()).map(|j| im.j[(i, j)]).collect())
                .collect(),
        }),
        config_echo: config_echo.to_string(),
    }
}

pub fn write(artifact: &Artifact, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(artifact).context("serialize artifact")?;
    std::fs::write(path, text).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Artifact> {
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read artifact {}", path.display()))?;
    let artifact: Artifact = toml::from_str(&raw)
        .with_context(|| format!("cannot parse artifact {}", path.display()))?;
    if artifact.version != ARTIFACT_VERSION {
        bail!(
            "artifact version {} not supported (expected {})",
            artifact.version,
            ARTIFACT_VERSION
        );
    }
    Ok(artifact)
}

/// Rebuilds a usable fit from the artifact (enough for prediction).
pub fn to_fit_result(artifact: &Artifact) -> Result<(FitResult, ColumnRoles)> {
    let family = family_from_block(&artifact.family)?;
    let params = ModelParams {
        beta: DVector::from_vec(artifact.mean.beta.clone()),
        cov: CovParams {
            theta: SqExpParams::new(artifact.covariance.v0, artifact.covariance.w.clone()),
            phi_b: DVector::from_vec(artifact.covariance.phi_b.clone()),
            phi_eps: artifact.covariance.phi_eps,
        },
        family,
    };
    let psi_fixed = PsiFixed {
        v0: artifact.psi_fixed.v0,
        w: artifact.psi_fixed.w.clone(),
        phi_b: artifact.psi_fixed.phi_b.clone(),
        phi_eps: artifact.psi_fixed.phi_eps,
    };
    let layout = ParamLayout::for_params(&params, &psi_fixed);
    if layout.names() != artifact.fit_summary.free_names {
        bail!("artifact free-parameter layout does not match its parameters");
    }
    let info = match &artifact.information {
        Some(block) => {
            let q = block.rows.len();
            let mut j = DMatrix::zeros(q, q);
            for (i, row) in block.rows.iter().enumerate() {
                if row.len() != q {
                    bail!("information matrix is not square in artifact");
                }
                for (c, v) in row.iter().enumerate() {
                    j[(i, c)] = *v;
                }
            }
            Some(InformationMatrix {
                j,
                layout: layout.clone(),
                pd: block.pd,
                projected: block.projected,
            })
        }
        None => None,
    };
    let basis = BasisConfig {
        degree: artifact.basis.degree,
        interior_knots: artifact.basis.interior_knots,
        domain: (artifact.basis.domain[0], artifact.basis.domain[1]),
    };
    let roles = ColumnRoles {
        u_cols: artifact.data_schema.u_cols.clone(),
        v_cols: artifact.data_schema.v_cols.clone(),
        w_cols: artifact.data_schema.w_cols.clone(),
        x_cols: artifact.data_schema.x_cols.clone(),
        u_intercept: artifact.data_schema.u_intercept,
        v_intercept: artifact.data_schema.v_intercept,
        w_intercept: artifact.data_schema.w_intercept,
    };
    let fit = FitResult {
        params,
        weights: artifact.fit_summary.weights.clone(),
        mahalanobis: artifact.fit_summary.mahalanobis.clone(),
        loglik_trace: vec![artifact.fit_summary.loglik],
        loglik: artifact.fit_summary.loglik,
        bic: artifact.fit_summary.bic,
        info,
        layout,
        q_free: artifact.fit_summary.q_free,
        n_obs: artifact.fit_summary.n_obs,
        converged: artifact.fit_summary.converged,
        iterations: artifact.fit_summary.iterations,
        warnings: artifact.fit_summary.warnings.clone(),
        basis,
        psi_fixed,
    };
    Ok((fit, roles))
}
