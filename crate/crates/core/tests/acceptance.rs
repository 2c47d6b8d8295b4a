//! Acceptance suite: every criterion runs at its stated tolerance on fixed
//! seeds and prints one PASS/FAIL line (run with `-- --nocapture` to see
//! them). The quantitative criteria reproduce the reference benchmark
//! numbers with 50 replications and are several minutes each.

mod common;

use hpfr_core::*;
use nalgebra::{DMatrix, DVector};

const BENCH_SEED: u64 = 20260810;

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn new() -> Self {
        Gate { failures: Vec::new() }
    }

    fn check(&mut self, criterion: &str, pass: bool, detail: String) {
        println!("[{}] {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures.push(format!("{criterion}: {detail}"));
        }
    }

    fn finish(self) {
        assert!(self.failures.is_empty(), "failed criteria:\n{}", self.failures.join("\n"));
    }
}

fn interval_stat(report: &BenchReport, family: &str, method: &str, ncl: f64) -> (f64, f64) {
    let fam = report
        .families
        .iter()
        .find(|f| f.label == family)
        .unwrap_or_else(|| panic!("family {family} missing from report"));
    fam.intervals
        .iter()
        .find(|(m, n, _, _)| m == method && (*n - ncl).abs() < 1e-9)
        .map(|(_, _, cp, len)| (*cp, *len))
        .unwrap_or_else(|| panic!("{method}@{ncl} missing for {family}"))
}

fn family_rmse(report: &BenchReport, family: &str) -> (f64, f64, f64) {
    let fam = report.families.iter().find(|f| f.label == family).expect("family");
    (fam.mean_rmse, fam.tau_rmse, fam.pred_rmse)
}

#[test]
fn criterion_01_scheme2_mean_rmse() {
    let cfg = SchemeConfig {
        scheme: Scheme::II,
        n_per_subject: 31,
        replications: 50,
        seed: BENCH_SEED,
        families: FamilySpec::parse_list("N,T").unwrap(),
        compute_intervals: false,
        ..Default::default()
    };
    let report = run_benchmark(&cfg).unwrap();
    let (n_rmse, _, _) = family_rmse(&report, "N");
    let (t_rmse, _, _) = family_rmse(&report, "T");
    let mut gate = Gate::new();
    gate.check(
        "criterion 1: scheme II n=31 mean-curve RMSE",
        (n_rmse - 0.076).abs() <= 0.015
            && (t_rmse - 0.056).abs() <= 0.015
            && t_rmse < n_rmse - 0.01,
        format!("N {n_rmse:.4} (ref 0.076 +/- 0.015), T {t_rmse:.4} (ref 0.056 +/- 0.015), T < N - 0.01"),
    );
    gate.finish();
}

#[test]
fn criteria_02_03_05_07_scheme5() {
    let cfg = SchemeConfig {
        scheme: Scheme::V,
        n_per_subject: 61,
        replications: 50,
        seed: BENCH_SEED,
        families: FamilySpec::parse_list("N,T").unwrap(),
        compute_intervals: true,
        ..Default::default()
    };
    let report = run_benchmark(&cfg).unwrap();
    let (n_mean, n_tau, _) = family_rmse(&report, "N");
    let (t_mean, t_tau, _) = family_rmse(&report, "T");
    let (pl0_n_cp, _) = interval_stat(&report, "N", "PL0", 95.0);
    let (bts_t_cp, bts_t_len) = interval_stat(&report, "T", "BTS", 95.0);
    let (_, bts_n_len) = interval_stat(&report, "N", "BTS", 95.0);

    let mut gate = Gate::new();
    gate.check(
        "criterion 2: scheme V n=61 mean-curve RMSE",
        (n_mean - 0.116).abs() <= 0.015 && (t_mean - 0.055).abs() <= 0.015,
        format!("N {n_mean:.4} (ref 0.116 +/- 0.015), T {t_mean:.4} (ref 0.055 +/- 0.015)"),
    );
    gate.check(
        "criterion 3: scheme V n=61 random-term RMSE",
        (n_tau - 0.126).abs() <= 0.02 && (t_tau - 0.075).abs() <= 0.02,
        format!("N {n_tau:.4} (ref 0.126 +/- 0.02), T {t_tau:.4} (ref 0.075 +/- 0.02)"),
    );
    gate.check(
        "criterion 5: scheme V n=61 95% coverage exposure",
        pl0_n_cp < 80.0 && (91.0..=98.0).contains(&bts_t_cp),
        format!("PL0(N) CP {pl0_n_cp:.1} (< 80), BTS(T) CP {bts_t_cp:.1} (in [91, 98])"),
    );
    gate.check(
        "criterion 7: scheme V n=61 95% BTS length ordering",
        bts_t_len < 0.7 * bts_n_len,
        format!("length(T) {bts_t_len:.3} < 0.7 * length(N) {bts_n_len:.3}"),
    );
    gate.finish();
}

#[test]
fn criterion_04_scheme1_coverage() {
    let cfg = SchemeConfig {
        scheme: Scheme::I,
        n_per_subject: 31,
        replications: 50,
        seed: BENCH_SEED,
        families: FamilySpec::parse_list("T").unwrap(),
        compute_intervals: true,
        ..Default::default()
    };
    let report = run_benchmark(&cfg).unwrap();
    let (bts_cp, _) = interval_stat(&report, "T", "BTS", 95.0);
    let (pl0_cp, _) = interval_stat(&report, "T", "PL0", 95.0);
    let mut gate = Gate::new();
    gate.check(
        "criterion 4: scheme I n=31 T-family 95% coverage",
        (91.0..=98.0).contains(&bts_cp) && pl0_cp < 92.0,
        format!("BTS CP {bts_cp:.1} (ref 94.8, in [91, 98]), PL0 CP {pl0_cp:.1} (ref 88.9, < 92)"),
    );
    // Same run, supporting invariant: the bootstrap holds every nominal
    // level within 5 points on clean data.
    for ncl in [80.0, 90.0, 95.0] {
        let (cp, _) = interval_stat(&report, "T", "BTS", ncl);
        gate.check(
            "invariant: scheme I BTS coverage within 5 points of nominal",
            (cp - ncl).abs() <= 5.0,
            format!("BTS {ncl:.0}% CP {cp:.1}"),
        );
    }
    gate.finish();
}

#[test]
fn criterion_06_scheme6_new_subject() {
    let cfg = SchemeConfig {
        scheme: Scheme::VI,
        n_per_subject: 61,
        replications: 50,
        seed: BENCH_SEED,
        families: FamilySpec::parse_list("N,T").unwrap(),
        new_subject: Some(NewSubjectMode::Interpolation),
        compute_intervals: true,
        ..Default::default()
    };
    let report = run_benchmark(&cfg).unwrap();
    let (n_cp, _) = interval_stat(&report, "N", "BTS", 95.0);
    let (t_cp, _) = interval_stat(&report, "T", "BTS", 95.0);
    let mut gate = Gate::new();
    gate.check(
        "criterion 6: scheme VI new-subject interpolation 95% coverage",
        n_cp < 80.0 && t_cp > 85.0,
        format!("CP(N) {n_cp:.1} (ref 69.3, < 80), CP(T) {t_cp:.1} (ref 91.2, > 85)"),
    );
    gate.finish();
}

#[test]
fn criterion_08_oracle_equivalence() {
    let families = [
        MixingFamily::student_t(2.5),
        MixingFamily::student_t(4.0),
        MixingFamily::student_t(10.0),
        MixingFamily::slash(1.3),
        MixingFamily::slash(2.0),
        MixingFamily::ContaminatedNormal { nu: 0.3, gamma: 0.25, fixed: true },
        MixingFamily::ContaminatedNormal { nu: 0.7, gamma: 0.6, fixed: true },
    ];
    let grid: Vec<(usize, f64)> =
        vec![(1, 0.5), (1, 8.0), (5, 2.0), (5, 20.0), (12, 8.0), (12, 45.0)];
    let mut worst: f64 = 0.0;
    let mut cases = 0usize;
    let mut rng = hpfr_core::rng::substream(8, &[1]);
    use rand::Rng;
    for fam in &families {
        for &(n, d) in &grid {
            let sp = ScalePosterior::new(fam.clone(), n, d).unwrap();
            let w = posterior_weight(&sp);
            let w_oracle = common::oracle_weight(fam, n, d);
            worst = worst.max(((w - w_oracle) / w_oracle).abs());

            let k = posterior_kappa_mean(&sp).unwrap();
            let k_oracle = common::oracle_kappa_mean(fam, n, d);
            worst = worst.max(((k - k_oracle) / k_oracle).abs());

            // Random diagonal covariance; the mixing integral only sees
            // (n, d, log det), so this covers the general case.
            let diag = DVector::from_fn(n, |_, _| 0.5 + 1.5 * rng.random::<f64>());
            let ln_det: f64 = diag.iter().map(|v| v.ln()).sum();
            // Build y with the prescribed Mahalanobis distance d.
            let mut y = DVector::from_element(n, (d / n as f64).sqrt());
            for i in 0..n {
                y[i] *= diag[i].sqrt();
            }
            let sigma = DMatrix::from_diagonal(&diag);
            let lm = log_marginal(&y, &sigma, fam).unwrap();
            let lm_oracle = common::oracle_log_marginal(fam, n, d, ln_det);
            worst = worst.max((lm - lm_oracle).abs() / lm_oracle.abs().max(1.0));
            cases += 1;
        }
    }
    let mut gate = Gate::new();
    gate.check(
        "criterion 8: closed forms match quadrature oracle",
        worst < 1e-6 && cases >= 30,
        format!("{cases} cases, worst relative error {worst:.2e} (< 1e-6)"),
    );
    gate.finish();
}

fn random_small_dataset(seed: u64, m: usize, n: usize) -> Dataset {
    use rand::Rng;
    let mut rng = hpfr_core::rng::substream(seed, &[77]);
    let subjects = (0..m)
        .map(|k| {
            let t = DVector::from_fn(n, |i, _| -4.0 + 8.0 * i as f64 / (n - 1) as f64);
            Subject {
                id: format!("s{k}"),
                y: DVector::from_fn(n, |i, _| {
                    (0.4 * t[i]).sin() + 0.3 * rng.random::<f64>() - 0.15
                }),
                u: DVector::from_vec(vec![1.0]),
                v: DMatrix::zeros(n, 0),
                w: DMatrix::from_fn(n, 1, |i, _| 0.5 * t[i]),
                x: DMatrix::from_fn(n, 1, |i, _| 2.5 * t[i]),
                t,
            }
        })
        .collect();
    Dataset {
        subjects,
        roles: ColumnRoles { u_intercept: true, ..Default::default() },
    }
}

fn small_basis() -> BasisConfig {
    BasisConfig { degree: 3, interior_knots: 2, domain: (-4.0, 4.0) }
}

#[test]
fn criterion_09_ecme_monotonicity() {
    let families = [
        FamilySpec::parse("N").unwrap(),
        FamilySpec::parse("T1").unwrap(),
        FamilySpec::parse("SL1").unwrap(),
        FamilySpec::parse("CN").unwrap(),
    ];
    let config = FitConfig {
        max_outer_iters: 30,
        compute_information: false,
        ..Default::default()
    };
    let mut worst_drop: f64 = 0.0;
    let mut fits = 0usize;
    for spec in &families {
        for rep in 0..20u64 {
            let ds = random_small_dataset(900 + rep, 5, 10);
            let fit = fit(&ds, &small_basis(), spec.family.clone(), &config).unwrap();
            for pair in fit.loglik_trace.windows(2) {
                worst_drop = worst_drop.max(pair[0] - pair[1]);
            }
            fits += 1;
        }
    }
    let mut gate = Gate::new();
    gate.check(
        "criterion 9: ECME log-likelihood monotonicity",
        worst_drop <= 1e-8,
        format!("{fits} fits, worst trace decrease {worst_drop:.2e} (<= 1e-8)"),
    );
    gate.finish();
}

#[test]
fn criterion_10_gaussian_limit() {
    let ds = random_small_dataset(1010, 8, 15);
    let config = FitConfig { compute_information: false, ..Default::default() };
    let basis = small_basis();
    let fit_n = fit(&ds, &basis, MixingFamily::Gaussian, &config).unwrap();
    let fit_t = fit(&ds, &basis, MixingFamily::student_t(1e6), &config).unwrap();
    let beta_diff = (&fit_n.params.beta - &fit_t.params.beta).abs().max();
    let ll_diff = (fit_n.loglik - fit_t.loglik).abs();
    let mut gate = Gate::new();
    gate.check(
        "criterion 10: T(nu=1e6) fit matches Gaussian fit",
        beta_diff < 1e-3 && ll_diff < 1e-2,
        format!("max |beta diff| {beta_diff:.2e} (< 1e-3), |loglik diff| {ll_diff:.2e} (< 1e-2)"),
    );
    gate.finish();
}

#[test]
fn criterion_11_kriging_exactness() {
    let ds = random_small_dataset(1111, 3, 12);
    let subject = &ds.subjects[0];
    let basis = small_basis();
    let params = ModelParams {
        beta: DVector::from_fn(6, |i, _| 0.05 * (i as f64 + 1.0)),
        cov: CovParams {
            theta: SqExpParams::new(0.04, vec![1.0]),
            phi_b: DVector::from_vec(vec![0.01]),
            phi_eps: 0.01,
        },
        family: MixingFamily::Gaussian,
    };
    // Interpolation at the observed points with noise included reproduces y.
    let target = PredictionTarget::responses_of(subject);
    let mean = conditional_mean(subject, &params, &basis, &target).unwrap();
    let interp_err = (mean - &subject.y).abs().max();

    // With a zero cross-covariance the prediction is exactly the prior mean;
    // targets sit between observation times so the noise delta never fires.
    let mut degenerate = params.clone();
    degenerate.cov.theta.v0 = 0.0;
    degenerate.cov.phi_b[0] = 0.0;
    let t_off: Vec<f64> = subject.t.iter().take(5).map(|t| t + 0.05).collect();
    let off_target = PredictionTarget {
        t: DVector::from_row_slice(&t_off),
        x: DMatrix::from_fn(5, 1, |i, _| 2.5 * t_off[i]),
        w: DMatrix::from_fn(5, 1, |i, _| 0.5 * t_off[i]),
        v: DMatrix::zeros(5, 0),
        kind: TargetKind::Response,
    };
    let cond = kriging(subject, &degenerate, &basis, &off_target).unwrap();
    let phi = build_bspline_basis(&basis, &t_off).unwrap();
    let mu_star = data::design_block(&phi, &subject.u, &subject.v.rows(0, 5).into()) * &degenerate.beta;
    let prior_exact = cond.mean == mu_star;

    let mut gate = Gate::new();
    gate.check(
        "criterion 11: kriging exactness",
        interp_err < 1e-8 && prior_exact,
        format!("interpolation error {interp_err:.2e} (< 1e-8), prior reversion exact: {prior_exact}"),
    );
    gate.finish();
}

#[test]
fn criterion_12_bootstrap_degeneracy() {
    let ds = random_small_dataset(1212, 6, 12);
    let basis = small_basis();
    let config = FitConfig { ..Default::default() };
    let fit = fit(&ds, &basis, MixingFamily::student_t(4.0), &config).unwrap();
    assert!(fit.info.is_some(), "information matrix required");

    let subject = &ds.subjects[1];
    let target = PredictionTarget {
        t: DVector::from_vec(vec![-0.7, 1.9]),
        x: DMatrix::from_fn(2, 1, |i, _| 2.5 * [-0.7, 1.9][i]),
        w: DMatrix::from_fn(2, 1, |i, _| 0.5 * [-0.7, 1.9][i]),
        v: DMatrix::zeros(2, 0),
        kind: TargetKind::Response,
    };
    let opts = BtsOptions {
        j_draws: 100,
        b_draws: 100,
        seed: 7,
        param_scale: 0.0,
        keep_draws: true,
    };
    let bts = interval_bts(subject, &target, &fit, &[0.95], &opts).unwrap();
    let bts_draws = bts.draws.expect("draws retained");

    let cond = kriging(subject, &fit.params, &fit.basis, &target).unwrap();
    let mut rng = hpfr_core::rng::substream(13, &[4]);
    let pl1_draws = predictive_draws(&cond, 10_000, &mut rng);

    let mut worst_ks: f64 = 0.0;
    for (a, b) in bts_draws.iter().zip(&pl1_draws) {
        worst_ks = worst_ks.max(common::ks_distance(a, b));
    }
    let mut gate = Gate::new();
    gate.check(
        "criterion 12: zero-covariance bootstrap collapses onto PL1",
        worst_ks < 0.03,
        format!("max pointwise KS distance {worst_ks:.4} (< 0.03) at 10^4 pooled draws"),
    );
    gate.finish();
}

#[test]
fn criterion_13_gls_correctness() {
    use rand::Rng;
    let mut rng = hpfr_core::rng::substream(1313, &[0]);
    let mut worst: f64 = 0.0;
    let mut exact_rescale = true;
    for case in 0..5u64 {
        let ds = random_small_dataset(1300 + case, 4, 7);
        let design = assemble_design(&ds, &small_basis()).unwrap();
        let cov = CovParams {
            theta: SqExpParams::new(0.1 + 0.2 * rng.random::<f64>(), vec![0.5]),
            phi_b: DVector::from_vec(vec![0.05 * rng.random::<f64>()]),
            phi_eps: 0.05 + 0.1 * rng.random::<f64>(),
        };
        let pi: Vec<f64> = (0..4).map(|_| 0.3 + rng.random::<f64>()).collect();
        let (beta, _) = em::update_beta(&ds, &design, &pi, &cov).unwrap();

        // Dense brute force through explicit per-subject inverses.
        let p = design.n_beta;
        let mut normal = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        for ((s, a), &w) in ds.subjects.iter().zip(&design.a).zip(&pi) {
            let inv = composite_sigma(s, &cov).unwrap().try_inverse().unwrap();
            normal += a.transpose() * &inv * a * w;
            rhs += a.transpose() * &inv * &s.y * w;
        }
        let brute = normal.try_inverse().unwrap() * rhs;
        worst = worst.max((&beta - brute).abs().max());

        // Rescaling by a power of two must be bit-exact.
        let pi4: Vec<f64> = pi.iter().map(|w| 4.0 * w).collect();
        let (beta4, _) = em::update_beta(&ds, &design, &pi4, &cov).unwrap();
        exact_rescale &= beta == beta4;
    }
    let mut gate = Gate::new();
    gate.check(
        "criterion 13: GLS mean update",
        worst < 1e-10 && exact_rescale,
        format!("max |beta - brute force| {worst:.2e} (< 1e-10), weight-rescale exact: {exact_rescale}"),
    );
    gate.finish();
}
