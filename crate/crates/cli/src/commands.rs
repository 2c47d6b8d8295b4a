//! The three subcommands: fit, predict, simulate.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use hpfr_core::{
    assemble_design, conditional_mean, fit_with_design, load_dataset, predict_subject, BtsOptions,
    ColumnRoles, Dataset, FamilySpec, FitResult, MixingFamily, NewSubjectMode, PredictOptions,
    PredictionTarget, Scheme, SchemeConfig, Subject, TargetKind,
};

use crate::artifact;
use crate::config::{load_config, RunConfig};

pub struct FitArgs {
    pub config: PathBuf,
    pub family: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub exclude: Vec<String>,
}

pub struct PredictArgs {
    pub config: PathBuf,
    pub artifact: PathBuf,
    pub targets: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub struct SimulateArgs {
    pub config: Option<PathBuf>,
    pub scheme: Option<String>,
    pub n: Option<usize>,
    pub subjects: Option<usize>,
    pub reps: Option<usize>,
    pub families: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub new_subject: Option<String>,
    pub no_intervals: bool,
}

fn out_dir(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("create {}", dir.display()))?;
    Ok(dir)
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, ColumnRoles)> {
    let data = cfg.data.as_ref().context("config needs a [data] section")?;
    let roles = data.roles();
    let ds = load_dataset(&data.path, &roles)
        .with_context(|| format!("loading {}", data.path.display()))?;
    Ok((ds, roles))
}

fn basis_for(cfg: &RunConfig, ds: &Dataset) -> Result<hpfr_core::BasisConfig> {
    match &cfg.basis {
        Some(b) => Ok(b.to_core()),
        None => {
            let (p_u, _, _, _) = ds.dims();
            if p_u > 0 {
                bail!("the model has a B-spline mean block; add a [basis] section");
            }
            // Unused placeholder covering the observed time range.
            let lo = ds
                .subjects
                .iter()
                .flat_map(|s| s.t.iter().cloned())
                .fold(f64::INFINITY, f64::min);
            let hi = ds
                .subjects
                .iter()
                .flat_map(|s| s.t.iter().cloned())
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(hpfr_core::BasisConfig { degree: 3, interior_knots: 0, domain: (lo, hi + 1.0) })
        }
    }
}

/// In-sample prediction RMSE: the noise-free conditional mean against the
/// observed responses, pooled over all observations.
fn in_sample_rmse(ds: &Dataset, design: &hpfr_core::DesignMatrices, fit: &FitResult) -> Result<f64> {
    let mut ss = 0.0;
    let mut n = 0usize;
    for (subject, a) in ds.subjects.iter().zip(&design.a) {
        let tau = conditional_mean(
            subject,
            &fit.params,
            &fit.basis,
            &PredictionTarget::random_terms_of(subject),
        )?;
        let mu = a * &fit.params.beta;
        let yhat = mu + tau;
        ss += (&subject.y - yhat).norm_squared();
        n += subject.n_obs();
    }
    Ok((ss / n as f64).sqrt())
}

struct FittedFamily {
    label: String,
    fit: FitResult,
    rmse: f64,
    se: Option<DVector<f64>>,
    excluded_fit: Option<FitResult>,
}

fn degrees_text(fam: &MixingFamily) -> String {
    match fam {
        MixingFamily::Gaussian => "-".to_string(),
        MixingFamily::StudentT { nu, .. } | MixingFamily::Slash { nu, .. } => {
            format!("nu={nu:.3}")
        }
        MixingFamily::ContaminatedNormal { nu, gamma, .. } => {
            format!("nu={nu:.3} gamma={gamma:.3}")
        }
    }
}

pub fn cmd_fit(args: &FitArgs) -> Result<i32> {
    let (cfg, raw_config) = load_config(&args.config)?;
    let dir = out_dir(&cfg, &args.out)?;
    let (ds, roles) = load_data(&cfg)?;
    let exclude: Vec<String> = if args.exclude.is_empty() {
        cfg.data.as_ref().map(|d| d.exclude_ids.clone()).unwrap_or_default()
    } else {
        args.exclude.clone()
    };
    let basis = basis_for(&cfg, &ds)?;
    let fit_cfg = cfg.fit.to_core(args.seed);
    let specs = cfg.family.specs(args.family.as_deref())?;

    let design = assemble_design(&ds, &basis)?;
    let reduced = if exclude.is_empty() { None } else { Some(ds.excluding(&exclude)) };
    let reduced_design = reduced.as_ref().map(|d| assemble_design(d, &basis)).transpose()?;

    let mut fitted: Vec<FittedFamily> = Vec::new();
    for spec in &specs {
        eprintln!("fitting family {} ...", spec.label);
        let fit = fit_with_design(&ds, &design, &basis, spec.family.clone(), &fit_cfg)?;
        let rmse = in_sample_rmse(&ds, &design, &fit)?;
        let se = fit
            .info
            .as_ref()
            .and_then(|im| im.standard_errors(&fit.params).ok());
        let excluded_fit = match (&reduced, &reduced_design) {
            (Some(rds), Some(rdesign)) => {
                eprintln!("refit without {:?} ...", exclude);
                Some(fit_with_design(rds, rdesign, &basis, spec.family.clone(), &fit_cfg)?)
            }
            _ => None,
        };
        let subject_ids: Vec<String> = ds.subjects.iter().map(|s| s.id.clone()).collect();
        let art = artifact::from_fit(&spec.label, &fit, &roles, &subject_ids, &raw_config);
        artifact::write(&art, &dir.join(format!("fit_{}.toml", spec.label)))?;
        write_diagnostics(&dir.join(format!("diagnostics_{}.csv", spec.label)), &ds, &fit)?;
        fitted.push(FittedFamily { label: spec.label.clone(), fit, rmse, se, excluded_fit });
    }

    let report = fit_report(&fitted, &roles, &ds, &exclude);
    std::fs::write(dir.join("fit_report.txt"), &report)?;
    print!("{report}");

    let all_converged = fitted.iter().all(|f| f.fit.converged);
    Ok(if all_converged { 0 } else { 2 })
}

fn write_diagnostics(path: &Path, ds: &Dataset, fit: &FitResult) -> Result<()> {
    let mut out = String::from("id,n_obs,mahalanobis,weight,chi2_cutoff_99,outlier\n");
    for (i, s) in ds.subjects.iter().enumerate() {
        let cutoff = ChiSquared::new(s.n_obs() as f64)
            .map(|c| c.inverse_cdf(0.99))
            .unwrap_or(f64::NAN);
        let d = fit.mahalanobis[i];
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{}\n",
            s.id,
            s.n_obs(),
            d,
            fit.weights[i],
            cutoff,
            if d > cutoff { 1 } else { 0 }
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn fit_report(fitted: &[FittedFamily], roles: &ColumnRoles, ds: &Dataset, exclude: &[String]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "HPFR fit report: {} subjects, {} observations\n\n",
        ds.n_subjects(),
        ds.n_total()
    ));
    out.push_str("model  degrees               BIC        loglik       RMSE   iters  converged\n");
    for f in fitted {
        out.push_str(&format!(
            "{:5}  {:20}  {:9.1}  {:11.3}  {:.3}  {:5}  {}\n",
            f.label,
            degrees_text(&f.fit.params.family),
            f.fit.bic,
            f.fit.loglik,
            f.rmse,
            f.fit.iterations,
            if f.fit.converged { "yes" } else { "NO" }
        ));
    }

    if fitted.len() > 1 {
        let mut ranked: Vec<&FittedFamily> = fitted.iter().collect();
        ranked.sort_by(|a, b| a.fit.bic.partial_cmp(&b.fit.bic).unwrap());
        out.push_str(&format!(
            "\nBIC ranking: {}\n",
            ranked
                .iter()
                .map(|f| format!("{} ({:.1})", f.label, f.fit.bic))
                .collect::<Vec<_>>()
                .join(" < ")
        ));
    }

    let names = artifact::beta_names(roles, fitted[0].fit.params.beta.len());
    out.push_str("\nMean coefficients (estimate / std.error");
    if !exclude.is_empty() {
        out.push_str(" / change % after deletion");
    }
    out.push_str(")\n");
    out.push_str(&format!("{:22}", "coefficient"));
    for f in fitted {
        out.push_str(&format!("  {:>26}", f.label));
    }
    out.push('\n');
    for (i, name) in names.iter().enumerate() {
        out.push_str(&format!("{name:22}"));
        for f in fitted {
            let est = f.fit.params.beta[i];
            let se = f
                .se
                .as_ref()
                .map(|s| format!("{:.3}", s[i]))
                .unwrap_or_else(|| "-".to_string());
            let mut cell = format!("{est:.3}/{se}");
            if let Some(ex) = &f.excluded_fit {
                let b_ex = ex.params.beta[i];
                if est.abs() > 1e-10 {
                    cell.push_str(&format!("/{:+.1}%", 100.0 * (b_ex - est) / est));
                } else {
                    cell.push_str("/-");
                }
            }
            out.push_str(&format!("  {cell:>26}"));
        }
        out.push('\n');
    }

    out.push_str("\nCovariance parameters\n");
    for f in fitted {
        let c = &f.fit.params.cov;
        out.push_str(&format!(
            "{:5}  v0 {:.5}  w [{}]  phi_b [{}]  phi_eps {:.5}\n",
            f.label,
            c.theta.v0,
            c.theta.w.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", "),
            c.phi_b.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>().join(", "),
            c.phi_eps
        ));
    }
    for f in fitted {
        if !f.fit.warnings.is_empty() {
            out.push_str(&format!("\nwarnings ({}): {}\n", f.label, f.fit.warnings.join("; ")));
        }
    }
    out
}

struct TargetRows {
    t: Vec<f64>,
    cells: Vec<BTreeMap<String, f64>>,
}

fn read_targets(path: &Path, roles: &ColumnRoles) -> Result<Vec<(String, TargetRows)>> {
    let mut rdr = csv::Reader::from_path(path)
        .with_context(|| format!("cannot open targets {}", path.display()))?;
    let header: Vec<String> = rdr
        .headers()
        .context("targets csv needs a header")?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let need: Vec<&String> = roles
        .u_cols
        .iter()
        .chain(&roles.v_cols)
        .chain(&roles.w_cols)
        .chain(&roles.x_cols)
        .collect();
    let mut col_of = BTreeMap::new();
    for name in need {
        let ix = header
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("targets csv missing column `{name}`"))?;
        col_of.insert(name.clone(), ix);
    }
    let id_ix = header.iter().position(|h| h == "id").context("targets csv needs `id`")?;
    let t_ix = header.iter().position(|h| h == "t").context("targets csv needs `t`")?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, TargetRows> = BTreeMap::new();
    for (rix, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("targets row {}", rix + 1))?;
        let id = rec.get(id_ix).unwrap_or("").trim().to_string();
        let t: f64 = rec
            .get(t_ix)
            .unwrap_or("")
            .trim()
            .parse()
            .with_context(|| format!("targets row {}: bad t", rix + 1))?;
        let mut cells = BTreeMap::new();
        for (name, ix) in &col_of {
            if name == "t" {
                continue;
            }
            let v: f64 = rec
                .get(*ix)
                .unwrap_or("")
                .trim()
                .parse()
                .with_context(|| format!("targets row {}: bad `{name}`", rix + 1))?;
            cells.insert(name.clone(), v);
        }
        cells.insert("t".into(), t);
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        let g = groups.entry(id).or_insert_with(|| TargetRows { t: vec![], cells: vec![] });
        g.t.push(t);
        g.cells.push(cells);
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let rows = groups.remove(&id).expect("grouped");
            (id, rows)
        })
        .collect())
}

fn block_from_rows(
    rows: &TargetRows,
    cols: &[String],
    intercept: bool,
) -> DMatrix<f64> {
    let n = rows.t.len();
    let p = cols.len() + usize::from(intercept);
    DMatrix::from_fn(n, p, |i, j| {
        if intercept && j == 0 {
            1.0
        } else {
            let name = &cols[j - usize::from(intercept)];
            rows.cells[i][name]
        }
    })
}

pub fn cmd_predict(args: &PredictArgs) -> Result<i32> {
    let (cfg, _) = load_config(&args.config)?;
    let dir = out_dir(&cfg, &args.out)?;
    let art = artifact::read(&args.artifact)?;
    let (fit, art_roles) = artifact::to_fit_result(&art)?;

    let (ds, roles) = load_data(&cfg)?;
    if roles != art_roles {
        bail!(
            "schema mismatch between the fit artifact and the configured data: \
             artifact was fitted with different column roles"
        );
    }
    let targets_path = args
        .targets
        .clone()
        .or_else(|| cfg.predict.targets.clone())
        .context("no targets CSV (set [predict].targets or --targets)")?;
    let groups = read_targets(&targets_path, &roles)?;
    if groups.is_empty() {
        bail!("targets file has no rows");
    }

    let kind = match cfg.predict.target_kind.as_str() {
        "response" => TargetKind::Response,
        "random_term" => TargetKind::RandomTerm { include_noise: false },
        other => bail!("unknown target_kind `{other}`"),
    };
    let methods = &cfg.predict.methods;
    let use_pl0 = methods.iter().any(|m| m == "pl0");
    let use_pl1 = methods.iter().any(|m| m == "pl1");
    let use_bts = methods.iter().any(|m| m == "bts");
    if use_bts && fit.info.is_none() {
        bail!("artifact has no information matrix; refit with compute_information = true or drop bts");
    }
    let ncls: Vec<f64> = cfg.predict.ncls.iter().map(|p| p / 100.0).collect();

    let mut out = String::from("id,t,mean,variance");
    for method in ["pl0", "pl1", "bts"] {
        let on = match method {
            "pl0" => use_pl0,
            "pl1" => use_pl1,
            _ => use_bts,
        };
        if !on {
            continue;
        }
        for p in &cfg.predict.ncls {
            out.push_str(&format!(",{method}_lo{p:.0},{method}_hi{p:.0}"));
        }
    }
    out.push('\n');

    for (gix, (id, rows)) in groups.iter().enumerate() {
        let target = PredictionTarget {
            t: DVector::from_vec(rows.t.clone()),
            x: block_from_rows(rows, &roles.x_cols, false),
            w: block_from_rows(rows, &roles.w_cols, roles.w_intercept),
            v: block_from_rows(rows, &roles.v_cols, roles.v_intercept),
            kind,
        };
        let subject = match ds.subjects.iter().find(|s| &s.id == id) {
            Some(s) => s.clone(),
            None => {
                // Unknown id: unconditioned prediction; u comes from the
                // target rows (or just the intercept).
                let mut u = Vec::new();
                if roles.u_intercept {
                    u.push(1.0);
                }
                for c in &roles.u_cols {
                    u.push(rows.cells[0][c]);
                }
                Subject::empty(
                    id.clone(),
                    DVector::from_vec(u),
                    roles.p_v(),
                    roles.p_w(),
                    roles.p_x(),
                )
            }
        };
        let opts = PredictOptions {
            ncls: ncls.clone(),
            use_pl0,
            use_pl1,
            use_bts,
            pl1_draws: cfg.predict.pl1_draws,
            seed: cfg.predict.seed.wrapping_add(gix as u64),
            bts: BtsOptions {
                j_draws: cfg.predict.bts_j,
                b_draws: cfg.predict.bts_b,
                ..Default::default()
            },
        };
        let pred = predict_subject(&subject, &fit, &target, &opts)?;
        for i in 0..target.t.len() {
            out.push_str(&format!("{},{},{:.6},{:.6}", id, target.t[i], pred.mean[i], pred.variance[i]));
            for bands in [&pred.pl0, &pred.pl1, &pred.bts] {
                for band in bands {
                    out.push_str(&format!(",{:.6},{:.6}", band.lower[i], band.upper[i]));
                }
            }
            out.push('\n');
        }
    }
    let path = dir.join("predictions.csv");
    std::fs::write(&path, out)?;
    println!("wrote {}", path.display());
    Ok(0)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let (cfg, _) = match &args.config {
        Some(p) => load_config(p)?,
        None => (RunConfig::default(), String::new()),
    };
    let sim = &cfg.simulate;
    let dir = out_dir(&cfg, &args.out)?;

    let scheme = Scheme::parse(args.scheme.as_deref().unwrap_or(&sim.scheme))?;
    let families = match &args.families {
        Some(csv) => FamilySpec::parse_list(csv)?,
        None => sim
            .families
            .iter()
            .map(|l| FamilySpec::parse(l))
            .collect::<hpfr_core::Result<Vec<_>>>()?,
    };
    let new_subject = match args
        .new_subject
        .as_deref()
        .unwrap_or(sim.new_subject.as_str())
    {
        "" => None,
        "random" | "interpolation" => Some(NewSubjectMode::Interpolation),
        "terminal" | "extrapolation" => Some(NewSubjectMode::Extrapolation),
        other => bail!("unknown new-subject mode `{other}` (use random|terminal)"),
    };
    if scheme == Scheme::VI && new_subject.is_none() {
        bail!("scheme VI is a new-subject experiment; pass --new-subject random|terminal");
    }

    let scheme_cfg = SchemeConfig {
        scheme,
        n_subjects: args.subjects.unwrap_or(sim.n_subjects),
        n_per_subject: args.n.unwrap_or(sim.n_per_subject),
        replications: args.reps.unwrap_or(sim.replications),
        seed: args.seed.unwrap_or(sim.seed),
        families,
        new_subject,
        ncls: sim.ncls.iter().map(|p| p / 100.0).collect(),
        compute_intervals: sim.intervals && !args.no_intervals,
        pl1_draws: sim.pl1_draws,
        bts_j: sim.bts_j,
        bts_b: sim.bts_b,
        basis: cfg
            .basis
            .as_ref()
            .map(|b| b.to_core())
            .unwrap_or_default(),
        fit: cfg.fit.to_core(None),
        progress: true,
    };

    eprintln!(
        "simulating scheme {} ({} reps, families {}) ...",
        scheme_cfg.scheme.label(),
        scheme_cfg.replications,
        scheme_cfg.families.iter().map(|f| f.label.as_str()).collect::<Vec<_>>().join(",")
    );
    let report = hpfr_core::run_benchmark(&scheme_cfg)?;
    eprintln!("done in {:.1}s", report.runtime_secs);

    let table_path = dir.join("bench_report.txt");
    let records_path = dir.join("bench_records.csv");
    let mut f = std::fs::File::create(&table_path)?;
    f.write_all(report.to_table_text().as_bytes())?;
    let mut f = std::fs::File::create(&records_path)?;
    f.write_all(report.to_records_csv().as_bytes())?;
    print!("{}", report.to_table_text());
    println!("wrote {} and {}", table_path.display(), records_path.display());
    Ok(0)
}
