//! Long-format longitudinal data, B-spline bases and per-subject design
//! matrices.
//!
//! A dataset is a list of subjects; each subject holds its observation times
//! `t`, responses `y`, time-constant scalar covariates `u`, and the
//! functional covariate matrices `V` (linear mean), `W` (linear random
//! effects) and `X` (kernel inputs). The mean design is
//! `A_m = [u_m' (x) Phi_m, V_m]`, so that `A_m beta = Phi_m B u_m + V_m gamma`
//! when `beta` stacks `(Vec(B), gamma)`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{HpfrError, Result};

/// One subject's observations. All row counts equal `n_obs()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub t: DVector<f64>,
    pub y: DVector<f64>,
    /// Time-constant scalar covariates, length `p_u`.
    pub u: DVector<f64>,
    /// Linear mean covariates, `n x p_v`.
    pub v: DMatrix<f64>,
    /// Linear random-effect covariates, `n x p_w`.
    pub w: DMatrix<f64>,
    /// Kernel input covariates, `n x p_x`.
    pub x: DMatrix<f64>,
}

impl Subject {
    pub fn n_obs(&self) -> usize {
        self.t.len()
    }

    /// Subject with no observations; used as the conditioning block when
    /// predicting a brand-new subject from the prior.
    pub fn empty(id: impl Into<String>, u: DVector<f64>, p_v: usize, p_w: usize, p_x: usize) -> Self {
        Subject {
            id: id.into(),
            t: DVector::zeros(0),
            y: DVector::zeros(0),
            u,
            v: DMatrix::zeros(0, p_v),
            w: DMatrix::zeros(0, p_w),
            x: DMatrix::zeros(0, p_x),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_obs();
        if n < 1 {
            return Err(HpfrError::Data(format!("subject {}: no observations", self.id)));
        }
        if self.y.len() != n || self.v.nrows() != n || self.w.nrows() != n || self.x.nrows() != n {
            return Err(HpfrError::Data(format!(
                "subject {}: inconsistent row counts",
                self.id
            )));
        }
        for i in 1..n {
            if !(self.t[i] > self.t[i - 1]) {
                return Err(HpfrError::Data(format!(
                    "subject {}: times not strictly increasing at position {}",
                    self.id, i
                )));
            }
        }
        let finite = self.t.iter().all(|v| v.is_finite())
            && self.y.iter().all(|v| v.is_finite())
            && self.u.iter().all(|v| v.is_finite())
            && self.v.iter().all(|v| v.is_finite())
            && self.w.iter().all(|v| v.is_finite())
            && self.x.iter().all(|v| v.is_finite());
        if !finite {
            return Err(HpfrError::Data(format!(
                "subject {}: non-finite value",
                self.id
            )));
        }
        Ok(())
    }
}

/// Column-role map: which CSV columns feed u/V/W/X, plus implicit intercepts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColumnRoles {
    pub u_cols: Vec<String>,
    pub v_cols: Vec<String>,
    pub w_cols: Vec<String>,
    pub x_cols: Vec<String>,
    /// Prepend a constant-1 scalar covariate to `u`.
    pub u_intercept: bool,
    /// Prepend a constant-1 column to `V`.
    pub v_intercept: bool,
    /// Prepend a constant-1 column to `W`.
    pub w_intercept: bool,
}

impl ColumnRoles {
    pub fn p_u(&self) -> usize {
        self.u_cols.len() + usize::from(self.u_intercept)
    }
    pub fn p_v(&self) -> usize {
        self.v_cols.len() + usize::from(self.v_intercept)
    }
    pub fn p_w(&self) -> usize {
        self.w_cols.len() + usize::from(self.w_intercept)
    }
    pub fn p_x(&self) -> usize {
        self.x_cols.len()
    }
}

/// The full dataset: ordered subjects plus the column-role metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    pub roles: ColumnRoles,
}

impl Dataset {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_total(&self) -> usize {
        self.subjects.iter().map(|s| s.n_obs()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(HpfrError::Data("dataset has no subjects".into()));
        }
        let (p_u, p_v, p_w, p_x) = self.dims();
        for s in &self.subjects {
            s.validate()?;
            if s.u.len() != p_u || s.v.ncols() != p_v || s.w.ncols() != p_w || s.x.ncols() != p_x {
                return Err(HpfrError::Data(format!(
                    "subject {}: covariate dimensions differ from the rest of the dataset",
                    s.id
                )));
            }
        }
        Ok(())
    }

    /// `(p_u, p_v, p_w, p_x)` taken from the first subject.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = &self.subjects[0];
        (s.u.len(), s.v.ncols(), s.w.ncols(), s.x.ncols())
    }

    /// Dataset without the listed subject ids (for outlier-deletion refits).
    pub fn excluding(&self, ids: &[String]) -> Dataset {
        let drop: HashSet<&str> = ids.iter().map(|s| s.as_str()).collect();
        Dataset {
            subjects: self
                .subjects
                .iter()
                .filter(|s| !drop.contains(s.id.as_str()))
                .cloned()
                .collect(),
            roles: self.roles.clone(),
        }
    }

    /// Writes the dataset back to long-format CSV. Float formatting uses the
    /// shortest round-trip representation, so reloading reproduces the values
    /// bit for bit.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header = vec!["id".to_string(), "t".to_string(), "y".to_string()];
        let extra = self.covariate_columns();
        header.extend(extra.iter().cloned());
        wtr.write_record(&header)
            .map_err(|e| HpfrError::Data(format!("csv write: {e}")))?;
        for s in &self.subjects {
            for i in 0..s.n_obs() {
                let mut rec = vec![s.id.clone(), format!("{}", s.t[i]), format!("{}", s.y[i])];
                for name in &extra {
                    rec.push(format!("{}", self.cell_value(s, i, name)));
                }
                wtr.write_record(&rec)
                    .map_err(|e| HpfrError::Data(format!("csv write: {e}")))?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    fn covariate_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = Vec::new();
        for c in self
            .roles
            .u_cols
            .iter()
            .chain(&self.roles.v_cols)
            .chain(&self.roles.w_cols)
            .chain(&self.roles.x_cols)
        {
            if c != "t" && !cols.contains(c) {
                cols.push(c.clone());
            }
        }
        cols
    }

    fn cell_value(&self, s: &Subject, row: usize, name: &str) -> f64 {
        let r = &self.roles;
        if let Some(k) = r.u_cols.iter().position(|c| c == name) {
            return s.u[k + usize::from(r.u_intercept)];
        }
        if let Some(k) = r.v_cols.iter().position(|c| c == name) {
            return s.v[(row, k + usize::from(r.v_intercept))];
        }
        if let Some(k) = r.w_cols.iter().position(|c| c == name) {
            return s.w[(row, k + usize::from(r.w_intercept))];
        }
        if let Some(k) = r.x_cols.iter().position(|c| c == name) {
            return s.x[(row, k)];
        }
        f64::NAN
    }
}

/// Loads a long-format CSV (`id`, `t`, `y` mandatory) and groups rows into
/// subjects sorted by time. Covariate roles come from `roles`.
pub fn load_dataset(path: &Path, roles: &ColumnRoles) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| HpfrError::Schema(format!("cannot open {}: {e}", path.display())))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| HpfrError::Schema(format!("missing header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let col_idx = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HpfrError::Schema(format!("missing column `{name}`")))
    };
    let id_ix = col_idx("id")?;
    let t_ix = col_idx("t")?;
    let y_ix = col_idx("y")?;
    let mut role_ixs: Vec<(String, usize)> = Vec::new();
    for name in roles
        .u_cols
        .iter()
        .chain(&roles.v_cols)
        .chain(&roles.w_cols)
        .chain(&roles.x_cols)
    {
        role_ixs.push((name.clone(), col_idx(name)?));
    }

    struct Row {
        t: f64,
        y: f64,
        cells: BTreeMap<String, f64>,
    }
    // Keyed by id in first-appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<Row>> = BTreeMap::new();

    for (rix, rec) in rdr.records().enumerate() {
        let row_no = rix + 1;
        let rec = rec.map_err(|e| HpfrError::Parse { row: row_no, msg: e.to_string() })?;
        let parse_cell = |ix: usize, name: &str| -> Result<f64> {
            let raw = rec.get(ix).unwrap_or("").trim();
            let val: f64 = raw.parse().map_err(|_| HpfrError::Parse {
                row: row_no,
                msg: format!("column `{name}`: cannot parse `{raw}` as a number"),
            })?;
            if !val.is_finite() {
                return Err(HpfrError::Parse {
                    row: row_no,
                    msg: format!("column `{name}`: non-finite value `{raw}`"),
                });
            }
            Ok(val)
        };
        let id = rec.get(id_ix).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(HpfrError::Parse { row: row_no, msg: "empty subject id".into() });
        }
        let t = parse_cell(t_ix, "t")?;
        let y = parse_cell(y_ix, "y")?;
        let mut cells = BTreeMap::new();
        for (name, ix) in &role_ixs {
            cells.insert(name.clone(), parse_cell(*ix, name)?);
        }
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push(Row { t, y, cells });
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut rs = rows.remove(&id).expect("grouped rows");
        rs.sort_by(|a, b| a.t.partial_cmp(&b.t).expect("finite times"));
        for i in 1..rs.len() {
            if rs[i].t == rs[i - 1].t {
                return Err(HpfrError::Data(format!(
                    "duplicate (id, t) pair: id `{id}`, t = {}",
                    rs[i].t
                )));
            }
        }
        let n = rs.len();
        let t = DVector::from_iterator(n, rs.iter().map(|r| r.t));
        let y = DVector::from_iterator(n, rs.iter().map(|r| r.y));

        let fetch = |r: &Row, name: &str| -> f64 {
            if name == "t" {
                r.t
            } else {
                r.cells[name]
            }
        };
        let build_mat = |cols: &[String], intercept: bool| -> DMatrix<f64> {
            let p = cols.len() + usize::from(intercept);
            let mut m = DMatrix::zeros(n, p);
            for (i, r) in rs.iter().enumerate() {
                let mut j = 0;
                if intercept {
                    m[(i, 0)] = 1.0;
                    j = 1;
                }
                for c in cols {
                    m[(i, j)] = fetch(r, c);
                    j += 1;
                }
            }
            m
        };

        // u must be constant in time within a subject.
        let mut u = DVector::zeros(roles.p_u());
        {
            let mut j = 0;
            if roles.u_intercept {
                u[0] = 1.0;
                j = 1;
            }
            for c in &roles.u_cols {
                let first = fetch(&rs[0], c);
                for r in &rs {
                    if fetch(r, c) != first {
                        return Err(HpfrError::Data(format!(
                            "u-column `{c}` varies within subject `{id}`"
                        )));
                    }
                }
                u[j] = first;
                j += 1;
            }
        }

        subjects.push(Subject {
            id,
            t,
            y,
            u,
            v: build_mat(&roles.v_cols, roles.v_intercept),
            w: build_mat(&roles.w_cols, roles.w_intercept),
            x: build_mat(&roles.x_cols, false),
        });
    }

    let ds = Dataset { subjects, roles: roles.clone() };
    ds.validate()?;
    Ok(ds)
}

/// Clamped B-spline basis configuration. `interior_knots` equally spaced
/// knots lie strictly inside `domain`; boundary knots are repeated
/// `degree + 1` times, giving `interior_knots + degree + 1` basis functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisConfig {
    pub degree: usize,
    pub interior_knots: usize,
    pub domain: (f64, f64),
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig { degree: 3, interior_knots: 18, domain: (-4.0, 4.0) }
    }
}

impl BasisConfig {
    pub fn n_basis(&self) -> usize {
        self.interior_knots + self.degree + 1
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.domain;
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(HpfrError::Domain(format!("empty basis domain [{a}, {b}]")));
        }
        Ok(())
    }

    fn knot_vector(&self) -> Vec<f64> {
        let (a, b) = self.domain;
        let p = self.degree;
        let k = self.interior_knots;
        let mut knots = Vec::with_capacity(k + 2 * (p + 1));
        knots.extend(std::iter::repeat(a).take(p + 1));
        let h = (b - a) / (k + 1) as f64;
        for i in 1..=k {
            knots.push(a + h * i as f64);
        }
        knots.extend(std::iter::repeat(b).take(p + 1));
        knots
    }
}

/// Evaluates the B-spline basis at each point of `t`; rows are the basis
/// evaluations (each row sums to 1, entries in [0, 1]).
pub fn build_bspline_basis(cfg: &BasisConfig, t: &[f64]) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let p = cfg.degree;
    let n_basis = cfg.n_basis();
    let knots = cfg.knot_vector();
    let (a, b) = cfg.domain;
    let mut out = DMatrix::zeros(t.len(), n_basis);
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    let mut vals = vec![0.0; p + 1];

    for (row, &ti) in t.iter().enumerate() {
        if !(ti >= a && ti <= b) {
            return Err(HpfrError::Domain(format!(
                "t = {ti} outside the basis domain [{a}, {b}]"
            )));
        }
        // Knot span index such that knots[span] <= t < knots[span+1],
        // clamped so the right boundary belongs to the last span.
        let mut span = p;
        while span < n_basis - 1 && ti >= knots[span + 1] {
            span += 1;
        }
        // Cox-de Boor recursion for the p+1 basis functions alive on the span.
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = ti - knots[span + 1 - j];
            right[j] = knots[span + j] - ti;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            vals[j] = saved;
        }
        for (r, &v) in vals.iter().enumerate() {
            out[(row, span - p + r)] = v;
        }
    }
    Ok(out)
}

/// Per-subject mean design matrices.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    /// `A_m = [u_m' (x) Phi_m, V_m]`, one per subject.
    pub a: Vec<DMatrix<f64>>,
    /// Basis evaluations `Phi_m` (empty matrices when `p_u = 0`).
    pub phi: Vec<DMatrix<f64>>,
    /// Number of basis functions `D` (0 when no B-spline block is present).
    pub d_basis: usize,
    pub n_beta: usize,
    /// Set when the stacked design is numerically rank-deficient; the fitter
    /// proceeds with a ridge-jittered solve.
    pub rank_deficient: bool,
}

/// Builds one design block `[u_1 Phi | ... | u_pu Phi | V]`.
pub fn design_block(phi: &DMatrix<f64>, u: &DVector<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = if u.len() > 0 { phi.nrows() } else { v.nrows() };
    let d = phi.ncols();
    let cols = u.len() * d + v.ncols();
    let mut a = DMatrix::zeros(n, cols);
    for (k, &uk) in u.iter().enumerate() {
        for j in 0..d {
            for i in 0..n {
                a[(i, k * d + j)] = uk * phi[(i, j)];
            }
        }
    }
    for j in 0..v.ncols() {
        for i in 0..n {
            a[(i, u.len() * d + j)] = v[(i, j)];
        }
    }
    a
}

/// Assembles all per-subject design matrices and flags stacked rank
/// deficiency (the fit still proceeds, with ridge jitter on the GLS normal
/// matrix).
pub fn assemble_design(ds: &Dataset, cfg: &BasisConfig) -> Result<DesignMatrices> {
    ds.validate()?;
    let (p_u, p_v, _, _) = ds.dims();
    let d_basis = if p_u > 0 { cfg.n_basis() } else { 0 };
    let n_beta = d_basis * p_u + p_v;

    let mut a = Vec::with_capacity(ds.n_subjects());
    let mut phi = Vec::with_capacity(ds.n_subjects());
    for s in &ds.subjects {
        let phi_m = if p_u > 0 {
            build_bspline_basis(cfg, s.t.as_slice())?
        } else {
            DMatrix::zeros(s.n_obs(), 0)
        };
        a.push(design_block(&phi_m, &s.u, &s.v));
        phi.push(phi_m);
    }

    let rank_deficient = if n_beta == 0 {
        false
    } else {
        let total: usize = ds.n_total();
        let mut stacked = DMatrix::zeros(total, n_beta);
        let mut r0 = 0;
        for am in &a {
            stacked.view_mut((r0, 0), (am.nrows(), n_beta)).copy_from(am);
            r0 += am.nrows();
        }
        let svals = stacked.svd(false, false).singular_values;
        let smax = svals.max();
        total < n_beta || svals.min() <= smax * 1e-10
    };

    Ok(DesignMatrices { a, phi, d_basis, n_beta, rank_deficient })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use std::io::Write;

    fn write_tmp(contents: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("hpfr_data_test_{}.csv", rand::rng().random::<u64>()));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn groups_rows_by_subject() {
        let path = write_tmp("id,t,y\nb,1,4\na,0,1\na,2,3\na,1,2\nb,0,3\nb,2,5\n");
        let ds = load_dataset(&path, &ColumnRoles::default()).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(ds.n_subjects(), 2);
        assert_eq!(ds.subjects[0].id, "b");
        assert_eq!(ds.subjects[0].n_obs(), 3);
        assert_eq!(ds.subjects[1].n_obs(), 3);
        // Sorted by t within subject.
        assert_eq!(ds.subjects[1].t.as_slice(), &[0.0, 1.0, 2.0]);
        assert_eq!(ds.subjects[1].y.as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn nan_cell_names_the_row() {
        let path = write_tmp("id,t,y\na,0,1\na,1,NaN\n");
        let err = load_dataset(&path, &ColumnRoles::default()).unwrap_err();
        std::fs::remove_file(&path).ok();
        match err {
            HpfrError::Parse { row, .. } => assert_eq!(row, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let path = write_tmp("id,t,y\na,0,1\n");
        let roles = ColumnRoles { v_cols: vec!["dose".into()], ..Default::default() };
        let err = load_dataset(&path, &roles).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(matches!(err, HpfrError::Schema(_)));
    }

    #[test]
    fn duplicate_time_is_data_error() {
        let path = write_tmp("id,t,y\na,1,1\na,1,2\n");
        let err = load_dataset(&path, &ColumnRoles::default()).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(matches!(err, HpfrError::Data(_)));
    }

    #[test]
    fn renal_style_schema_has_pv_4() {
        let path = write_tmp(
            "id,t,y,dose,dose2\n1,0,11.2,0.5,0.25\n1,1,11.4,0.6,0.36\n2,0,10.9,0.4,0.16\n2,1,11.0,0.5,0.25\n",
        );
        let roles = ColumnRoles {
            v_cols: vec!["t".into(), "dose".into(), "dose2".into()],
            v_intercept: true,
            x_cols: vec!["t".into(), "dose".into()],
            w_intercept: true,
            ..Default::default()
        };
        let ds = load_dataset(&path, &roles).unwrap();
        std::fs::remove_file(&path).ok();
        let (p_u, p_v, p_w, p_x) = ds.dims();
        assert_eq!(p_u, 0);
        assert_eq!(p_v, 4);
        assert_eq!(p_w, 1);
        assert_eq!(p_x, 2);
        assert_eq!(ds.subjects[0].v[(1, 0)], 1.0); // intercept
        assert_eq!(ds.subjects[0].v[(1, 1)], 1.0); // t
        assert_eq!(ds.subjects[0].v[(1, 3)], 0.36); // dose2
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mut rng = crate::rng::substream(11, &[0]);
        let n = 5;
        let subjects: Vec<Subject> = (0..3)
            .map(|m| {
                let t = DVector::from_iterator(n, (0..n).map(|i| i as f64 * 0.37 + m as f64));
                Subject {
                    id: format!("s{m}"),
                    t: t.clone(),
                    y: DVector::from_iterator(n, (0..n).map(|_| rng.random::<f64>() * 3.1)),
                    u: DVector::from_vec(vec![1.0]),
                    v: DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>()),
                    w: DMatrix::from_fn(n, 1, |i, _| t[i] * 0.5),
                    x: DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>() * 7.0 - 3.5),
                }
            })
            .collect();
        let roles = ColumnRoles {
            u_cols: vec![],
            u_intercept: true,
            v_cols: vec!["v1".into()],
            w_cols: vec!["w1".into()],
            x_cols: vec!["x1".into()],
            ..Default::default()
        };
        let ds = Dataset { subjects, roles: roles.clone() };
        let path = std::env::temp_dir().join(format!(
            "hpfr_roundtrip_{}.csv",
            rand::rng().random::<u64>()
        ));
        ds.write_csv(&path).unwrap();
        let reloaded = load_dataset(&path, &roles).unwrap();
        std::fs::remove_file(&path).ok();
        for (a, b) in ds.subjects.iter().zip(&reloaded.subjects) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.y, b.y);
            assert_eq!(a.v, b.v);
            assert_eq!(a.w, b.w);
            assert_eq!(a.x, b.x);
        }
    }

    #[test]
    fn single_span_left_boundary_row() {
        let cfg = BasisConfig { degree: 3, interior_knots: 0, domain: (0.0, 1.0) };
        let basis = build_bspline_basis(&cfg, &[0.0]).unwrap();
        assert_eq!(basis.ncols(), 4);
        assert_relative_eq!(basis[(0, 0)], 1.0, epsilon = 1e-14);
        for j in 1..4 {
            assert_relative_eq!(basis[(0, j)], 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn partition_of_unity_everywhere() {
        let cfg = BasisConfig::default();
        let t: Vec<f64> = (0..200).map(|i| -4.0 + 8.0 * i as f64 / 199.0).collect();
        let basis = build_bspline_basis(&cfg, &t).unwrap();
        for i in 0..basis.nrows() {
            let sum: f64 = basis.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
            for v in basis.row(i).iter() {
                assert!(*v >= -1e-15 && *v <= 1.0 + 1e-15);
            }
        }
        // Right boundary: last basis function equals 1.
        let last = build_bspline_basis(&cfg, &[4.0]).unwrap();
        assert_relative_eq!(last[(0, cfg.n_basis() - 1)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn reference_grid_has_full_column_rank() {
        let cfg = BasisConfig::default();
        assert_eq!(cfg.n_basis(), 22);
        let t: Vec<f64> = (0..61).map(|i| -4.0 + 8.0 * i as f64 / 60.0).collect();
        let basis = build_bspline_basis(&cfg, &t).unwrap();
        let svals = basis.svd(false, false).singular_values;
        assert!(svals.min() > 1e-8 * svals.max());
    }

    #[test]
    fn outside_domain_is_domain_error() {
        let cfg = BasisConfig::default();
        assert!(matches!(
            build_bspline_basis(&cfg, &[4.0001]).unwrap_err(),
            HpfrError::Domain(_)
        ));
    }

    fn toy_dataset(p_u: usize, p_v: usize, n: usize) -> Dataset {
        let mut rng = crate::rng::substream(5, &[p_u as u64, p_v as u64]);
        let subjects = (0..2)
            .map(|m| {
                let t = DVector::from_iterator(n, (0..n).map(|i| i as f64 / (n - 1) as f64));
                Subject {
                    id: format!("s{m}"),
                    y: DVector::from_fn(n, |_, _| rng.random::<f64>()),
                    u: DVector::from_fn(p_u, |i, _| if i == 0 { 1.0 } else { rng.random::<f64>() }),
                    v: DMatrix::from_fn(n, p_v, |_, _| rng.random::<f64>()),
                    w: DMatrix::zeros(n, 0),
                    x: DMatrix::zeros(n, 0),
                    t,
                }
            })
            .collect();
        Dataset { subjects, roles: ColumnRoles::default() }
    }

    #[test]
    fn scalar_u_reduces_to_phi() {
        let ds = toy_dataset(1, 0, 8);
        let cfg = BasisConfig { degree: 3, interior_knots: 2, domain: (0.0, 1.0) };
        let design = assemble_design(&ds, &cfg).unwrap();
        assert_eq!(design.a[0], design.phi[0]);
    }

    #[test]
    fn design_column_count() {
        // p_u = 2, D = 3 (degree 1, 1 interior knot), p_v = 1 -> 7 columns.
        let ds = toy_dataset(2, 1, 6);
        let cfg = BasisConfig { degree: 1, interior_knots: 1, domain: (0.0, 1.0) };
        let design = assemble_design(&ds, &cfg).unwrap();
        assert_eq!(design.n_beta, 7);
        assert_eq!(design.a[0].ncols(), 7);
    }

    #[test]
    fn kron_block_identity_on_random_coefficients() {
        let mut rng = crate::rng::substream(42, &[9]);
        for &(p_u, p_v) in &[(1usize, 0usize), (2, 1), (3, 2)] {
            let ds = toy_dataset(p_u, p_v, 9);
            let cfg = BasisConfig { degree: 3, interior_knots: 2, domain: (0.0, 1.0) };
            let design = assemble_design(&ds, &cfg).unwrap();
            let d = design.d_basis;
            for _ in 0..100 {
                let b_mat = DMatrix::from_fn(d, p_u, |_, _| rng.random::<f64>() * 2.0 - 1.0);
                let gamma = DVector::from_fn(p_v, |_, _| rng.random::<f64>() * 2.0 - 1.0);
                // beta = (Vec(B), gamma): column-major stack of B.
                let mut beta = DVector::zeros(d * p_u + p_v);
                for k in 0..p_u {
                    for j in 0..d {
                        beta[k * d + j] = b_mat[(j, k)];
                    }
                }
                for j in 0..p_v {
                    beta[d * p_u + j] = gamma[j];
                }
                for (s, (a, phi)) in ds.subjects.iter().zip(design.a.iter().zip(&design.phi)) {
                    let lhs = a * &beta;
                    let rhs = phi * &b_mat * &s.u + &s.v * &gamma;
                    assert_relative_eq!((lhs - rhs).abs().max(), 0.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn duplicated_basis_columns_flag_rank_deficiency() {
        // Two identical V columns force exact rank deficiency.
        let mut ds = toy_dataset(0, 2, 6);
        for s in &mut ds.subjects {
            let c0: Vec<f64> = s.v.column(0).iter().cloned().collect();
            for i in 0..s.v.nrows() {
                s.v[(i, 1)] = c0[i];
            }
        }
        let cfg = BasisConfig::default();
        let design = assemble_design(&ds, &cfg).unwrap();
        assert!(design.rank_deficient);
    }
}
