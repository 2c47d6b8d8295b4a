//! Run configuration: a TOML file with `[data]`, `[basis]`, `[family]`,
//! `[fit]`, `[predict]`, `[simulate]` and `[output]` tables, plus the handful
//! of command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use hpfr_core::{BasisConfig, ColumnRoles, FamilySpec, FitConfig, MixingFamily};

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<DataSection>,
    pub basis: Option<BasisSection>,
    #[serde(default)]
    pub family: FamilySection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    #[serde(default)]
    pub u_cols: Vec<String>,
    #[serde(default)]
    pub v_cols: Vec<String>,
    #[serde(default)]
    pub w_cols: Vec<String>,
    #[serde(default)]
    pub x_cols: Vec<String>,
    #[serde(default)]
    pub u_intercept: bool,
    #[serde(default)]
    pub v_intercept: bool,
    #[serde(default)]
    pub w_intercept: bool,
    /// Subjects to drop for an outlier-deletion refit; the fit report then
    /// includes relative change ratios against the full-data fit.
    #[serde(default)]
    pub exclude_ids: Vec<String>,
}

impl DataSection {
    pub fn roles(&self) -> ColumnRoles {
        ColumnRoles {
            u_cols: self.u_cols.clone(),
            v_cols: self.v_cols.clone(),
            w_cols: self.w_cols.clone(),
            x_cols: self.x_cols.clone(),
            u_intercept: self.u_intercept,
            v_intercept: self.v_intercept,
            w_intercept: self.w_intercept,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSection {
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_knots")]
    pub interior_knots: usize,
    pub domain: [f64; 2],
}

fn default_degree() -> usize {
    3
}
fn default_knots() -> usize {
    18
}

impl BasisSection {
    pub fn to_core(&self) -> BasisConfig {
        BasisConfig {
            degree: self.degree,
            interior_knots: self.interior_knots,
            domain: (self.domain[0], self.domain[1]),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySection {
    /// Labels: N, T, T1, SL, SL1, CN (T/SL fixed degree, T1/SL1/CN estimated).
    #[serde(default = "default_families")]
    pub families: Vec<String>,
    /// Degree overrides for the labels above.
    pub t_nu: Option<f64>,
    pub sl_nu: Option<f64>,
    pub cn_nu: Option<f64>,
    pub cn_gamma: Option<f64>,
}

fn default_families() -> Vec<String> {
    vec!["N".to_string()]
}

impl Default for FamilySection {
    fn default() -> Self {
        FamilySection {
            families: default_families(),
            t_nu: None,
            sl_nu: None,
            cn_nu: None,
            cn_gamma: None,
        }
    }
}

impl FamilySection {
    pub fn specs(&self, override_labels: Option<&str>) -> Result<Vec<FamilySpec>> {
        let labels: Vec<String> = match override_labels {
            Some(csv) => csv.split(',').map(|s| s.trim().to_string()).collect(),
            None => self.families.clone(),
        };
        let mut out = Vec::with_capacity(labels.len());
        for label in &labels {
            let mut spec = FamilySpec::parse(label)
                .map_err(|e| anyhow::anyhow!("family `{label}`: {e}"))?;
            spec.family = match spec.family {
                MixingFamily::StudentT { nu, fixed } => MixingFamily::StudentT {
                    nu: self.t_nu.unwrap_or(nu),
                    fixed,
                },
                MixingFamily::Slash { nu, fixed } => MixingFamily::Slash {
                    nu: self.sl_nu.unwrap_or(nu),
                    fixed,
                },
                MixingFamily::ContaminatedNormal { nu, gamma, fixed } => {
                    MixingFamily::ContaminatedNormal {
                        nu: self.cn_nu.unwrap_or(nu),
                        gamma: self.cn_gamma.unwrap_or(gamma),
                        fixed,
                    }
                }
                g => g,
            };
            out.push(spec);
        }
        if out.is_empty() {
            bail!("no families configured");
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub max_outer_iters: usize,
    pub param_tol: f64,
    pub loglik_tol: f64,
    pub psi_budget: usize,
    pub nu_search_iters: usize,
    pub inner_cycles: usize,
    pub compute_information: bool,
    pub seed: u64,
}

impl Default for FitSection {
    fn default() -> Self {
        let d = FitConfig::default();
        FitSection {
            max_outer_iters: d.max_outer_iters,
            param_tol: d.param_tol,
            loglik_tol: d.loglik_tol,
            psi_budget: d.psi_budget,
            nu_search_iters: d.nu_search_iters,
            inner_cycles: d.inner_cycles,
            compute_information: d.compute_information,
            seed: d.seed,
        }
    }
}

impl FitSection {
    pub fn to_core(&self, seed_override: Option<u64>) -> FitConfig {
        FitConfig {
            max_outer_iters: self.max_outer_iters,
            param_tol: self.param_tol,
            loglik_tol: self.loglik_tol,
            psi_budget: self.psi_budget,
            nu_search_iters: self.nu_search_iters,
            inner_cycles: self.inner_cycles,
            compute_information: self.compute_information,
            seed: seed_override.unwrap_or(self.seed),
            ..FitConfig::default()
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    /// CSV of target rows: `id`, `t`, plus the covariate columns of the schema.
    pub targets: Option<PathBuf>,
    /// "response" or "random_term".
    pub target_kind: String,
    /// Nominal confidence levels in percent.
    pub ncls: Vec<f64>,
    pub methods: Vec<String>,
    pub pl1_draws: usize,
    pub bts_j: usize,
    pub bts_b: usize,
    pub seed: u64,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            targets: None,
            target_kind: "response".into(),
            ncls: vec![80.0, 90.0, 95.0],
            methods: vec!["pl0".into(), "pl1".into(), "bts".into()],
            pl1_draws: 10_000,
            bts_j: 50,
            bts_b: 20,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub scheme: String,
    pub n_subjects: usize,
    pub n_per_subject: usize,
    pub replications: usize,
    pub families: Vec<String>,
    /// "random" or "terminal" for new-subject experiments; empty for the
    /// random-terms experiment.
    pub new_subject: String,
    pub ncls: Vec<f64>,
    pub intervals: bool,
    pub pl1_draws: usize,
    pub bts_j: usize,
    pub bts_b: usize,
    pub seed: u64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            scheme: "I".into(),
            n_subjects: 20,
            n_per_subject: 31,
            replications: 50,
            families: vec!["N".into(), "T".into()],
            new_subject: String::new(),
            ncls: vec![80.0, 90.0, 95.0],
            intervals: true,
            pl1_draws: 10_000,
            bts_j: 50,
            bts_b: 20,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

pub fn load_config(path: &Path) -> Result<(RunConfig, String)> {
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let cfg: RunConfig = toml::from_str(&raw)
        .with_context(|| format!("cannot parse config {}", path.display()))?;
    Ok((cfg, raw))
}
