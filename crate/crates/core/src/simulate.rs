//! Simulation schemes and the benchmark harness.
//!
//! Data generator: twenty subjects observed on an equally spaced grid over
//! [-4, 4], mean curve `0.8 sin((0.5 t)^3)`, kernel input `x(t) = 2.5 t` with
//! `(v0, w) = (0.04, 1)`, linear random effect on `w(t) = 0.5 t` with
//! `phi_b = 0.01`, and noise `phi_eps = 0.01`. The schemes perturb this base:
//!
//! * I   - Gaussian-process data,
//! * II  - Student-t process data (`nu = 4`, one latent scale per subject),
//! * III - subject 5's mean amplitude raised from 0.8 to 4,
//! * IV  - subject 10's responses jumped up 2 units on t in [-1, 1],
//! * V   - III and IV combined,
//! * VI  - Gaussian data with the test subject's noise raised to 0.05
//!   (new-subject experiments only).
//!
//! The harness fits the requested families over replications and aggregates
//! RMSEs, coverage probabilities and interval lengths; identical
//! `(seed, config)` produce byte-identical reports.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{
    assemble_design, build_bspline_basis, design_block, BasisConfig, ColumnRoles, Dataset, Subject,
};
use crate::em::{fit_with_design, FitConfig, FitResult};
use crate::error::{HpfrError, Result};
use crate::kernel::{cov_matrix, SqExpParams};
use crate::mixing::MixingFamily;
use crate::predict::{
    predict_new_subject, predict_subject, IntervalBand, PredictOptions, PredictionTarget,
};
use crate::rng::{derive_seed, substream};

/// True population mean curve of the generator.
pub fn true_mean(t: f64) -> f64 {
    0.8 * ((0.5 * t).powi(3)).sin()
}

fn mean_with_amplitude(t: f64, amplitude: f64) -> f64 {
    amplitude * ((0.5 * t).powi(3)).sin()
}

/// Simulation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    I,
    II,
    III,
    IV,
    V,
    VI,
}

impl Scheme {
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::I => "I",
            Scheme::II => "II",
            Scheme::III => "III",
            Scheme::IV => "IV",
            Scheme::V => "V",
            Scheme::VI => "VI",
        }
    }

    pub fn parse(s: &str) -> Result<Scheme> {
        match s.trim().to_uppercase().as_str() {
            "I" | "1" => Ok(Scheme::I),
            "II" | "2" => Ok(Scheme::II),
            "III" | "3" => Ok(Scheme::III),
            "IV" | "4" => Ok(Scheme::IV),
            "V" | "5" => Ok(Scheme::V),
            "VI" | "6" => Ok(Scheme::VI),
            other => Err(HpfrError::Data(format!("unknown scheme `{other}`"))),
        }
    }

    /// Subjects whose random-term scores are excluded (0-based indices).
    pub fn excluded_subjects(&self) -> &'static [usize] {
        match self {
            Scheme::III => &[4],
            Scheme::IV => &[9],
            Scheme::V => &[4, 9],
            _ => &[],
        }
    }
}

/// A model family to fit, with its benchmark column label.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilySpec {
    pub label: String,
    pub family: MixingFamily,
}

impl FamilySpec {
    /// Labels follow the benchmark tables: `N`, `T` (fixed nu = 4),
    /// `T1` (estimated), `SL` (fixed nu = 1.3), `SL1` (estimated), `CN`
    /// (both degree parameters estimated).
    pub fn parse(label: &str) -> Result<FamilySpec> {
        let fam = match label.trim().to_uppercase().as_str() {
            "N" => MixingFamily::Gaussian,
            "T" => MixingFamily::StudentT { nu: 4.0, fixed: true },
            "T1" => MixingFamily::StudentT { nu: 4.0, fixed: false },
            "SL" => MixingFamily::Slash { nu: 1.3, fixed: true },
            "SL1" => MixingFamily::Slash { nu: 2.0, fixed: false },
            "CN" => MixingFamily::ContaminatedNormal { nu: 0.1, gamma: 0.5, fixed: false },
            other => return Err(HpfrError::Data(format!("unknown family label `{other}`"))),
        };
        Ok(FamilySpec { label: label.trim().to_uppercase(), family: fam })
    }

    pub fn parse_list(csv: &str) -> Result<Vec<FamilySpec>> {
        csv.split(',').filter(|s| !s.trim().is_empty()).map(FamilySpec::parse).collect()
    }
}

/// New-subject experiment: which half of the test subject is predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NewSubjectMode {
    /// Held-out points drawn at random (fresh draw per replication).
    Interpolation,
    /// Held-out points are the terminal block (t >= 0).
    Extrapolation,
}

impl NewSubjectMode {
    pub fn label(&self) -> &'static str {
        match self {
            NewSubjectMode::Interpolation => "interpolation",
            NewSubjectMode::Extrapolation => "extrapolation",
        }
    }
}

/// Benchmark configuration.
#[derive(Debug, Clone)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    /// Training subjects (the new-subject experiments generate one extra).
    pub n_subjects: usize,
    pub n_per_subject: usize,
    pub replications: usize,
    pub seed: u64,
    pub families: Vec<FamilySpec>,
    pub new_subject: Option<NewSubjectMode>,
    /// Nominal confidence levels as fractions.
    pub ncls: Vec<f64>,
    /// Compute PL0/PL1/BTS interval scores (slower; requires the observed
    /// information matrix for BTS).
    pub compute_intervals: bool,
    pub pl1_draws: usize,
    pub bts_j: usize,
    pub bts_b: usize,
    pub basis: BasisConfig,
    pub fit: FitConfig,
    /// Report per-replication completion on stderr.
    pub progress: bool,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            scheme: Scheme::I,
            n_subjects: 20,
            n_per_subject: 31,
            replications: 50,
            seed: 1,
            families: vec![FamilySpec::parse("N").unwrap(), FamilySpec::parse("T").unwrap()],
            new_subject: None,
            ncls: vec![0.80, 0.90, 0.95],
            compute_intervals: true,
            pl1_draws: 10_000,
            bts_j: 50,
            bts_b: 20,
            basis: BasisConfig::default(),
            fit: FitConfig::default(),
            progress: false,
        }
    }
}

/// One generated replication: the dataset plus the true random terms per
/// subject (noise-free), retained for scoring.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub dataset: Dataset,
    pub true_tau: Vec<DVector<f64>>,
    /// Latent scales actually used (1.0 outside Scheme II).
    pub r_values: Vec<f64>,
}

const TRUE_V0: f64 = 0.04;
const TRUE_W: f64 = 1.0;
const TRUE_PHI_B: f64 = 0.01;
const TRUE_PHI_EPS: f64 = 0.01;
const SCHEME_VI_TEST_PHI_EPS: f64 = 0.05;

/// Generates one replication of the configured scheme. The new-subject
/// experiments append a test subject after the training subjects.
pub fn generate_scheme(cfg: &SchemeConfig, rep_index: usize) -> GeneratedData {
    let n = cfg.n_per_subject;
    let total = cfg.n_subjects + usize::from(cfg.new_subject.is_some());
    let t = DVector::from_fn(n, |i, _| {
        if n == 1 { -4.0 } else { -4.0 + 8.0 * i as f64 / (n - 1) as f64 }
    });
    let x = DMatrix::from_fn(n, 1, |i, _| 2.5 * t[i]);
    let w = DMatrix::from_fn(n, 1, |i, _| 0.5 * t[i]);

    // Kernel factor shared by all subjects (same grid); a tiny ridge keeps
    // the near-singular smooth kernel factorable.
    let theta = SqExpParams::new(TRUE_V0, vec![TRUE_W]);
    let mut c = cov_matrix(&x, &theta);
    for i in 0..n {
        c[(i, i)] += 1e-10;
    }
    let c_l = nalgebra::Cholesky::new(c).expect("kernel factor").l();

    let mut subjects = Vec::with_capacity(total);
    let mut true_tau = Vec::with_capacity(total);
    let mut r_values = Vec::with_capacity(total);

    for m in 0..total {
        let mut rng = substream(cfg.seed, &[rep_index as u64, m as u64]);
        let r_m: f64 = if cfg.scheme == Scheme::II {
            rand_distr::Gamma::new(2.0, 0.5).expect("gamma(2, rate 2)").sample(&mut rng)
        } else {
            1.0
        };
        let kappa_sqrt = (1.0 / r_m).sqrt();
        let is_test = cfg.new_subject.is_some() && m == cfg.n_subjects;
        let phi_eps = if cfg.scheme == Scheme::VI && is_test {
            SCHEME_VI_TEST_PHI_EPS
        } else {
            TRUE_PHI_EPS
        };

        let amplitude = if matches!(cfg.scheme, Scheme::III | Scheme::V) && m == 4 { 4.0 } else { 0.8 };

        let b: f64 = {
            let z: f64 = rng.sample(StandardNormal);
            z * (TRUE_PHI_B).sqrt() * kappa_sqrt
        };
        let zeta = {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            &c_l * z * kappa_sqrt
        };
        let mut tau = DVector::zeros(n);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            tau[i] = w[(i, 0)] * b + zeta[i];
            let eps: f64 = rng.sample::<f64, _>(StandardNormal) * phi_eps.sqrt() * kappa_sqrt;
            y[i] = mean_with_amplitude(t[i], amplitude) + tau[i] + eps;
        }
        if matches!(cfg.scheme, Scheme::IV | Scheme::V) && m == 9 {
            for i in 0..n {
                if t[i] >= -1.0 && t[i] <= 1.0 {
                    y[i] += 2.0;
                }
            }
        }

        subjects.push(Subject {
            id: format!("s{:02}", m + 1),
            t: t.clone(),
            y,
            u: DVector::from_vec(vec![1.0]),
            v: DMatrix::zeros(n, 0),
            w: w.clone(),
            x: x.clone(),
        });
        true_tau.push(tau);
        r_values.push(r_m);
    }

    let roles = ColumnRoles {
        u_intercept: true,
        w_cols: vec!["w1".into()],
        x_cols: vec!["x1".into()],
        ..Default::default()
    };
    GeneratedData { dataset: Dataset { subjects, roles }, true_tau, r_values }
}

/// Root mean squared difference between two aligned vectors.
pub fn rmse(estimate: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    assert_eq!(estimate.len(), truth.len(), "misaligned grids");
    if estimate.len() == 0 {
        return 0.0;
    }
    ((estimate - truth).norm_squared() / estimate.len() as f64).sqrt()
}

/// Coverage (percent) and mean length of one band against the truth grid.
pub fn score_intervals(band: &IntervalBand, truth: &DVector<f64>) -> (f64, f64) {
    assert_eq!(band.lower.len(), truth.len(), "misaligned grids");
    let n = truth.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let covered = (0..n)
        .filter(|&i| truth[i] >= band.lower[i] && truth[i] <= band.upper[i])
        .count();
    (100.0 * covered as f64 / n as f64, band.mean_length())
}

/// Pooled coverage/length accumulator per (method, ncl).
#[derive(Debug, Clone, Default)]
struct CoverageAcc {
    covered: usize,
    total: usize,
    length_sum: f64,
}

impl CoverageAcc {
    fn add(&mut self, band: &IntervalBand, truth: &DVector<f64>) {
        for i in 0..truth.len() {
            if truth[i] >= band.lower[i] && truth[i] <= band.upper[i] {
                self.covered += 1;
            }
            self.length_sum += band.upper[i] - band.lower[i];
        }
        self.total += truth.len();
    }

    fn merge(&mut self, other: &CoverageAcc) {
        self.covered += other.covered;
        self.total += other.total;
        self.length_sum += other.length_sum;
    }

    fn cp(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            100.0 * self.covered as f64 / self.total as f64
        }
    }

    fn mean_length(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.length_sum / self.total as f64
        }
    }
}

const METHODS: [&str; 3] = ["PL0", "PL1", "BTS"];

/// Per-family accumulation across replications.
#[derive(Debug, Clone)]
struct FamilyAcc {
    mean_rmse_reps: Vec<f64>,
    tau_sq_sum: f64,
    tau_n: usize,
    pred_rmse_sum: f64,
    coverage: Vec<CoverageAcc>, // methods x ncls, row-major
    non_converged: usize,
    bts_skipped: usize,
    reps: usize,
}

impl FamilyAcc {
    fn new(n_ncl: usize) -> Self {
        FamilyAcc {
            mean_rmse_reps: Vec::new(),
            tau_sq_sum: 0.0,
            tau_n: 0,
            pred_rmse_sum: 0.0,
            coverage: vec![CoverageAcc::default(); METHODS.len() * n_ncl],
            non_converged: 0,
            bts_skipped: 0,
            reps: 0,
        }
    }

    fn merge(&mut self, other: &FamilyAcc) {
        self.mean_rmse_reps.extend_from_slice(&other.mean_rmse_reps);
        self.tau_sq_sum += other.tau_sq_sum;
        self.tau_n += other.tau_n;
        self.pred_rmse_sum += other.pred_rmse_sum;
        for (a, b) in self.coverage.iter_mut().zip(&other.coverage) {
            a.merge(b);
        }
        self.non_converged += other.non_converged;
        self.bts_skipped += other.bts_skipped;
        self.reps += other.reps;
    }
}

/// One family's aggregated benchmark numbers.
#[derive(Debug, Clone)]
pub struct FamilyReport {
    pub label: String,
    /// Mean over replications of the mean-curve RMSE on the observation grid.
    pub mean_rmse: f64,
    /// Per-replication mean-curve RMSEs, in replication order (kept in the
    /// struct for paired comparisons; not serialized).
    pub mean_rmse_reps: Vec<f64>,
    /// Pooled random-term RMSE (excluded subjects dropped); NaN in
    /// new-subject mode.
    pub tau_rmse: f64,
    /// Mean over replications of the new-subject prediction RMSE; NaN in
    /// random-terms mode.
    pub pred_rmse: f64,
    /// `(method, ncl_percent, cp_percent, mean_length)` in fixed order.
    pub intervals: Vec<(String, f64, f64, f64)>,
    pub non_converged: usize,
    pub bts_skipped: usize,
}

/// Aggregated benchmark output.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub scheme: String,
    pub mode: String,
    pub n_subjects: usize,
    pub n_per_subject: usize,
    pub replications: usize,
    pub seed: u64,
    pub families: Vec<FamilyReport>,
    /// Wall-clock seconds; reported on stderr by the CLI but excluded from
    /// the serialized tables so reports stay byte-deterministic.
    pub runtime_secs: f64,
}

fn subject_rows(s: &Subject, rows: &[usize]) -> Subject {
    let n = rows.len();
    Subject {
        id: s.id.clone(),
        t: DVector::from_fn(n, |i, _| s.t[rows[i]]),
        y: DVector::from_fn(n, |i, _| s.y[rows[i]]),
        u: s.u.clone(),
        v: DMatrix::from_fn(n, s.v.ncols(), |i, j| s.v[(rows[i], j)]),
        w: DMatrix::from_fn(n, s.w.ncols(), |i, j| s.w[(rows[i], j)]),
        x: DMatrix::from_fn(n, s.x.ncols(), |i, j| s.x[(rows[i], j)]),
    }
}

/// Fitted mean curve on the grid of `subject`.
fn fitted_mean_curve(fit: &FitResult, subject: &Subject) -> Result<DVector<f64>> {
    let phi = if subject.u.len() > 0 {
        build_bspline_basis(&fit.basis, subject.t.as_slice())?
    } else {
        DMatrix::zeros(subject.n_obs(), 0)
    };
    let a = design_block(&phi, &subject.u, &subject.v);
    Ok(&a * &fit.params.beta)
}

fn run_replication(cfg: &SchemeConfig, rep: usize) -> Result<Vec<FamilyAcc>> {
    let n_ncl = cfg.ncls.len();
    let gen = generate_scheme(cfg, rep);
    let train_ds = if cfg.new_subject.is_some() {
        Dataset {
            subjects: gen.dataset.subjects[..cfg.n_subjects].to_vec(),
            roles: gen.dataset.roles.clone(),
        }
    } else {
        gen.dataset.clone()
    };
    let design = assemble_design(&train_ds, &cfg.basis)?;
    let truth_mean = DVector::from_fn(cfg.n_per_subject, |i, _| {
        true_mean(train_ds.subjects[0].t[i])
    });

    let mut out = Vec::with_capacity(cfg.families.len());
    for (fam_ix, spec) in cfg.families.iter().enumerate() {
        let mut acc = FamilyAcc::new(n_ncl);
        acc.reps = 1;
        let mut fit_cfg = cfg.fit.clone();
        fit_cfg.compute_information = cfg.compute_intervals || cfg.new_subject.is_some();
        let fit = fit_with_design(&train_ds, &design, &cfg.basis, spec.family.clone(), &fit_cfg)?;
        if !fit.converged {
            acc.non_converged = 1;
        }

        let mu_hat = fitted_mean_curve(&fit, &train_ds.subjects[0])?;
        acc.mean_rmse_reps.push(rmse(&mu_hat, &truth_mean));

        match cfg.new_subject {
            None => {
                let excluded = cfg.scheme.excluded_subjects();
                for (m, subject) in train_ds.subjects.iter().enumerate() {
                    if excluded.contains(&m) {
                        continue;
                    }
                    let opts = PredictOptions {
                        ncls: cfg.ncls.clone(),
                        use_pl0: cfg.compute_intervals,
                        use_pl1: cfg.compute_intervals,
                        use_bts: cfg.compute_intervals,
                        pl1_draws: cfg.pl1_draws,
                        seed: derive_seed(cfg.seed, &[rep as u64, fam_ix as u64, m as u64]),
                        bts: crate::predict::BtsOptions {
                            j_draws: cfg.bts_j,
                            b_draws: cfg.bts_b,
                            ..Default::default()
                        },
                    };
                    let pred = predict_subject(
                        subject,
                        &fit,
                        &PredictionTarget::random_terms_of(subject),
                        &opts,
                    )?;
                    let truth = &gen.true_tau[m];
                    acc.tau_sq_sum += (&pred.mean - truth).norm_squared();
                    acc.tau_n += truth.len();
                    acc.bts_skipped += pred.bts_skipped;
                    if cfg.compute_intervals {
                        for (mx, bands) in
                            [&pred.pl0, &pred.pl1, &pred.bts].iter().enumerate()
                        {
                            for (cx, band) in bands.iter().enumerate() {
                                acc.coverage[mx * n_ncl + cx].add(band, truth);
                            }
                        }
                    }
                }
            }
            Some(mode) => {
                let test = &gen.dataset.subjects[cfg.n_subjects];
                let n = test.n_obs();
                let n_obs = n / 2;
                let (obs_rows, test_rows) = match mode {
                    NewSubjectMode::Extrapolation => {
                        ((0..n_obs).collect::<Vec<_>>(), (n_obs..n).collect::<Vec<_>>())
                    }
                    NewSubjectMode::Interpolation => {
                        let mut split_rng =
                            substream(cfg.seed, &[rep as u64, 0x73706c69]);
                        let chosen = rand::seq::index::sample(&mut split_rng, n, n_obs);
                        let mut obs: Vec<usize> = chosen.into_iter().collect();
                        obs.sort_unstable();
                        let obs_set: std::collections::HashSet<usize> =
                            obs.iter().copied().collect();
                        let rest: Vec<usize> =
                            (0..n).filter(|i| !obs_set.contains(i)).collect();
                        (obs, rest)
                    }
                };
                let observed = subject_rows(test, &obs_rows);
                let held_out = subject_rows(test, &test_rows);
                let target = PredictionTarget::responses_of(&held_out);
                let opts = PredictOptions {
                    ncls: cfg.ncls.clone(),
                    use_pl0: cfg.compute_intervals,
                    use_pl1: cfg.compute_intervals,
                    use_bts: true,
                    pl1_draws: cfg.pl1_draws,
                    seed: derive_seed(cfg.seed, &[rep as u64, fam_ix as u64, 0x6e_73]),
                    bts: crate::predict::BtsOptions {
                        j_draws: cfg.bts_j,
                        b_draws: cfg.bts_b,
                        ..Default::default()
                    },
                };
                let pred = predict_new_subject(&observed, &fit, &target, &opts)?;
                let truth = &held_out.y;
                acc.pred_rmse_sum = rmse(&pred.mean, truth);
                acc.bts_skipped += pred.bts_skipped;
                for (mx, bands) in [&pred.pl0, &pred.pl1, &pred.bts].iter().enumerate() {
                    for (cx, band) in bands.iter().enumerate() {
                        acc.coverage[mx * n_ncl + cx].add(band, truth);
                    }
                }
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// Runs the benchmark: replications in parallel on independent substreams,
/// merged in replication order.
pub fn run_benchmark(cfg: &SchemeConfig) -> Result<BenchReport> {
    if cfg.scheme == Scheme::VI && cfg.new_subject.is_none() {
        return Err(HpfrError::Data(
            "scheme VI is defined for new-subject experiments only".into(),
        ));
    }
    let started = std::time::Instant::now();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let per_rep: Vec<Result<Vec<FamilyAcc>>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            let out = run_replication(cfg, rep);
            if cfg.progress {
                let k = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                eprintln!("replication {k}/{} done", cfg.replications);
            }
            out
        })
        .collect();

    let n_ncl = cfg.ncls.len();
    let mut totals: Vec<FamilyAcc> =
        cfg.families.iter().map(|_| FamilyAcc::new(n_ncl)).collect();
    for rep_result in per_rep {
        let rep_accs = rep_result?;
        for (total, acc) in totals.iter_mut().zip(&rep_accs) {
            total.merge(acc);
        }
    }

    let families = cfg
        .families
        .iter()
        .zip(&totals)
        .map(|(spec, acc)| {
            let reps = acc.reps.max(1) as f64;
            let intervals = if cfg.compute_intervals || cfg.new_subject.is_some() {
                let mut rows = Vec::with_capacity(METHODS.len() * n_ncl);
                for (mx, method) in METHODS.iter().enumerate() {
                    for (cx, ncl) in cfg.ncls.iter().enumerate() {
                        let cov = &acc.coverage[mx * n_ncl + cx];
                        if cov.total > 0 {
                            rows.push((
                                method.to_string(),
                                ncl * 100.0,
                                cov.cp(),
                                cov.mean_length(),
                            ));
                        }
                    }
                }
                rows
            } else {
                vec![]
            };
            FamilyReport {
                label: spec.label.clone(),
                mean_rmse: acc.mean_rmse_reps.iter().sum::<f64>() / reps,
                mean_rmse_reps: acc.mean_rmse_reps.clone(),
                tau_rmse: if acc.tau_n > 0 {
                    (acc.tau_sq_sum / acc.tau_n as f64).sqrt()
                } else {
                    f64::NAN
                },
                pred_rmse: if cfg.new_subject.is_some() {
                    acc.pred_rmse_sum / reps
                } else {
                    f64::NAN
                },
                intervals,
                non_converged: acc.non_converged,
                bts_skipped: acc.bts_skipped,
            }
        })
        .collect();

    Ok(BenchReport {
        scheme: cfg.scheme.label().to_string(),
        mode: match cfg.new_subject {
            None => "random_terms".to_string(),
            Some(m) => format!("new_subject_{}", m.label()),
        },
        n_subjects: cfg.n_subjects,
        n_per_subject: cfg.n_per_subject,
        replications: cfg.replications,
        seed: cfg.seed,
        families,
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

impl BenchReport {
    /// Machine-readable records: one `(family, metric, method, ncl) -> value`
    /// row per line. Fixed six-decimal formatting keeps reports
    /// byte-deterministic.
    pub fn to_records_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("scheme,mode,n_subjects,n_per_subject,replications,seed,family,metric,method,ncl,value\n");
        let prefix = format!(
            "{},{},{},{},{},{}",
            self.scheme, self.mode, self.n_subjects, self.n_per_subject, self.replications, self.seed
        );
        for fam in &self.families {
            let mut push = |family: &str, metric: &str, method: &str, ncl: &str, value: f64| {
                out.push_str(&format!(
                    "{prefix},{family},{metric},{method},{ncl},{value:.6}\n"
                ));
            };
            if fam.mean_rmse.is_finite() {
                push(&fam.label, "mean_rmse", "", "", fam.mean_rmse);
            }
            if fam.tau_rmse.is_finite() {
                push(&fam.label, "tau_rmse", "", "", fam.tau_rmse);
            }
            if fam.pred_rmse.is_finite() {
                push(&fam.label, "pred_rmse", "", "", fam.pred_rmse);
            }
            for (method, ncl, cp, len) in &fam.intervals {
                push(&fam.label, "cp", method, &format!("{ncl:.0}"), *cp);
                push(&fam.label, "length", method, &format!("{ncl:.0}"), *len);
            }
            push(&fam.label, "non_converged", "", "", fam.non_converged as f64);
            push(&fam.label, "bts_skipped", "", "", fam.bts_skipped as f64);
        }
        out
    }

    /// Plain-text tables in the reference layout.
    pub fn to_table_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "HPFR benchmark  scheme {}  mode {}  M {}  n_m {}  reps {}  seed {}\n\n",
            self.scheme, self.mode, self.n_subjects, self.n_per_subject, self.replications, self.seed
        ));
        out.push_str("Mean-curve RMSE\n  family  rmse\n");
        for fam in &self.families {
            out.push_str(&format!("  {:6}  {:.3}\n", fam.label, fam.mean_rmse));
        }
        if self.families.iter().any(|f| f.tau_rmse.is_finite()) {
            out.push_str("\nRandom-term RMSE (perturbed subjects excluded)\n  family  rmse\n");
            for fam in &self.families {
                if fam.tau_rmse.is_finite() {
                    out.push_str(&format!("  {:6}  {:.3}\n", fam.label, fam.tau_rmse));
                }
            }
        }
        if self.families.iter().any(|f| f.pred_rmse.is_finite()) {
            out.push_str("\nNew-subject prediction RMSE\n  family  rmse\n");
            for fam in &self.families {
                if fam.pred_rmse.is_finite() {
                    out.push_str(&format!("  {:6}  {:.3}\n", fam.label, fam.pred_rmse));
                }
            }
        }
        if self.families.iter().any(|f| !f.intervals.is_empty()) {
            out.push_str("\nPrediction intervals: CP (%) and mean length\n");
            out.push_str("  method  ncl  family      cp  length\n");
            for fam in &self.families {
                for (method, ncl, cp, len) in &fam.intervals {
                    out.push_str(&format!(
                        "  {:6}  {:3.0}  {:6}  {:5.1}  {:.3}\n",
                        method, ncl, fam.label, cp, len
                    ));
                }
            }
        }
        let nc: usize = self.families.iter().map(|f| f.non_converged).sum();
        if nc > 0 {
            out.push_str(&format!("\nnon-converged fits: {nc}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn true_mean_values() {
        assert_eq!(true_mean(0.0), 0.0);
        // 0.8 * sin(1)
        assert_relative_eq!(true_mean(2.0), 0.6731767878463172, epsilon = 1e-15);
        for t in [0.3, 1.7, 3.9] {
            assert_relative_eq!(true_mean(-t), -true_mean(t), epsilon = 1e-15);
        }
    }

    fn tiny_cfg(scheme: Scheme) -> SchemeConfig {
        SchemeConfig {
            scheme,
            n_subjects: 4,
            n_per_subject: 9,
            replications: 2,
            seed: 11,
            families: vec![FamilySpec::parse("N").unwrap()],
            compute_intervals: false,
            pl1_draws: 200,
            bts_j: 5,
            bts_b: 4,
            fit: FitConfig {
                max_outer_iters: 5,
                psi_budget: 60,
                compute_information: false,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn scheme_iv_jump_is_exact() {
        let mut cfg = tiny_cfg(Scheme::IV);
        cfg.n_subjects = 12;
        let base_cfg = SchemeConfig { scheme: Scheme::I, ..cfg.clone() };
        let with = generate_scheme(&cfg, 0);
        let without = generate_scheme(&base_cfg, 0);
        let t = &with.dataset.subjects[9].t;
        for i in 0..t.len() {
            let delta = with.dataset.subjects[9].y[i] - without.dataset.subjects[9].y[i];
            if t[i] >= -1.0 && t[i] <= 1.0 {
                // The +2 shift is applied exactly; recovering it by
                // subtraction reintroduces one rounding step.
                assert_relative_eq!(delta, 2.0, epsilon = 1e-12);
            } else {
                assert_eq!(delta, 0.0);
            }
        }
        // Other subjects untouched.
        for m in [0usize, 5, 11] {
            assert_eq!(with.dataset.subjects[m].y, without.dataset.subjects[m].y);
        }
    }

    #[test]
    fn scheme_iii_amplifies_subject_five_mean() {
        let cfg = tiny_cfg(Scheme::III);
        let mut cfg = cfg;
        cfg.n_subjects = 6;
        let iii = generate_scheme(&cfg, 1);
        let base = generate_scheme(&SchemeConfig { scheme: Scheme::I, ..cfg.clone() }, 1);
        let t = &iii.dataset.subjects[4].t;
        for i in 0..t.len() {
            let delta = iii.dataset.subjects[4].y[i] - base.dataset.subjects[4].y[i];
            let expect = (4.0 - 0.8) * ((0.5 * t[i]).powi(3)).sin();
            assert_relative_eq!(delta, expect, epsilon = 1e-12);
        }
        assert_eq!(iii.dataset.subjects[0].y, base.dataset.subjects[0].y);
    }

    #[test]
    fn generation_is_deterministic_per_seed_and_rep() {
        let cfg = tiny_cfg(Scheme::II);
        let a = generate_scheme(&cfg, 3);
        let b = generate_scheme(&cfg, 3);
        let c = generate_scheme(&cfg, 4);
        assert_eq!(a.dataset.subjects[2].y, b.dataset.subjects[2].y);
        assert_ne!(a.dataset.subjects[2].y, c.dataset.subjects[2].y);
        assert_eq!(a.r_values, b.r_values);
    }

    #[test]
    fn scheme_i_moments_match_composite_covariance() {
        // Monte-Carlo check of the generator's covariance on a 2-point grid.
        let cfg = SchemeConfig {
            scheme: Scheme::I,
            n_subjects: 1,
            n_per_subject: 2,
            replications: 1,
            seed: 5,
            ..tiny_cfg(Scheme::I)
        };
        let reps = 10_000usize;
        let mut sums = [0.0f64; 2];
        let mut sq = [[0.0f64; 2]; 2];
        let mut t_grid = None;
        for rep in 0..reps {
            let g = generate_scheme(&cfg, rep);
            let s = &g.dataset.subjects[0];
            t_grid.get_or_insert_with(|| s.t.clone());
            let mu: Vec<f64> = (0..2).map(|i| true_mean(s.t[i])).collect();
            let e0 = s.y[0] - mu[0];
            let e1 = s.y[1] - mu[1];
            sums[0] += e0;
            sums[1] += e1;
            sq[0][0] += e0 * e0;
            sq[0][1] += e0 * e1;
            sq[1][1] += e1 * e1;
        }
        let t_grid = t_grid.unwrap();
        let n = reps as f64;
        let var0 = sq[0][0] / n - (sums[0] / n).powi(2);
        let var1 = sq[1][1] / n - (sums[1] / n).powi(2);
        let cov01 = sq[0][1] / n - sums[0] * sums[1] / n / n;
        // Analytic composite covariance entries.
        let dx = 2.5 * (t_grid[0] - t_grid[1]);
        let expect_var = |t: f64| 0.04 + 0.01 * (0.5 * t).powi(2) + 0.01;
        let expect_cov = 0.04 * (-0.5 * dx * dx).exp() + 0.01 * (0.5 * t_grid[0]) * (0.5 * t_grid[1]);
        // MC standard error of a variance at 1e4 reps is about var*sqrt(2/n) ~ 1.4%.
        assert!((var0 / expect_var(t_grid[0]) - 1.0).abs() < 0.06, "{var0}");
        assert!((var1 / expect_var(t_grid[1]) - 1.0).abs() < 0.06, "{var1}");
        assert!((cov01 - expect_cov).abs() < 0.01, "{cov01} vs {expect_cov}");
    }

    #[test]
    fn rmse_helpers() {
        let a = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(rmse(&a, &a), 0.0);
        let b = a.add_scalar(0.7);
        assert_relative_eq!(rmse(&b, &a), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn interval_scoring_edges() {
        let truth = DVector::from_vec(vec![0.0, 1.0, -2.0]);
        let wide = IntervalBand {
            ncl: 0.95,
            lower: DVector::from_element(3, -1e300),
            upper: DVector::from_element(3, 1e300),
        };
        let (cp, _) = score_intervals(&wide, &truth);
        assert_eq!(cp, 100.0);
        let exact = IntervalBand { ncl: 0.95, lower: truth.clone(), upper: truth.clone() };
        let (cp, len) = score_intervals(&exact, &truth);
        assert_eq!(cp, 100.0);
        assert_eq!(len, 0.0);
    }

    #[test]
    fn smoke_benchmark_emits_all_sections_and_is_deterministic() {
        let mut cfg = tiny_cfg(Scheme::I);
        cfg.compute_intervals = true;
        cfg.fit.compute_information = true;
        cfg.pl1_draws = 100;
        let r1 = run_benchmark(&cfg).unwrap();
        let r2 = run_benchmark(&cfg).unwrap();
        assert_eq!(r1.to_records_csv(), r2.to_records_csv());
        assert_eq!(r1.to_table_text(), r2.to_table_text());
        let csv = r1.to_records_csv();
        assert!(csv.contains("mean_rmse"));
        assert!(csv.contains("tau_rmse"));
        assert!(csv.contains("cp,PL0"));
        assert!(csv.contains("cp,BTS"));
        let table = r1.to_table_text();
        assert!(table.contains("Mean-curve RMSE"));
        assert!(table.contains("Prediction intervals"));
    }

    #[test]
    fn new_subject_modes_split_as_specified() {
        let mut cfg = tiny_cfg(Scheme::VI);
        cfg.n_per_subject = 11;
        cfg.new_subject = Some(NewSubjectMode::Extrapolation);
        cfg.replications = 1;
        cfg.fit.compute_information = true;
        cfg.bts_j = 4;
        cfg.bts_b = 3;
        cfg.pl1_draws = 50;
        let report = run_benchmark(&cfg).unwrap();
        assert!(report.families[0].pred_rmse.is_finite());
        assert_eq!(report.mode, "new_subject_extrapolation");

        cfg.new_subject = Some(NewSubjectMode::Interpolation);
        let report2 = run_benchmark(&cfg).unwrap();
        assert!(report2.families[0].pred_rmse.is_finite());
    }

    #[test]
    fn scheme_vi_requires_new_subject_mode() {
        let cfg = tiny_cfg(Scheme::VI);
        assert!(run_benchmark(&cfg).is_err());
    }
}
