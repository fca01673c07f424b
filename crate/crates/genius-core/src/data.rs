//! Observation table: ingestion, validation, and the first-stage
//! heteroscedasticity diagnostic every estimator depends on.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RowIssue};

/// Declared measurement scale of the exposure column.
///
/// The scale restricts which estimators accept the table: the odds-ratio
/// estimator requires a binary exposure, the multiplicative-exposure
/// estimator requires a count or binary exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExposureKind {
    Binary,
    Continuous,
    Count,
}

impl std::fmt::Display for ExposureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExposureKind::Binary => write!(f, "binary"),
            ExposureKind::Continuous => write!(f, "continuous"),
            ExposureKind::Count => write!(f, "count"),
        }
    }
}

/// Per-unit records of candidate instruments, exposure, outcome, and the
/// optional covariate / censoring columns.
///
/// Immutable after construction; safe to share read-only across threads.
#[derive(Debug, Clone)]
pub struct ObservationTable {
    /// n × p matrix of instrument values, one column per candidate IV.
    g: DMatrix<f64>,
    /// Exposure vector, length n.
    a: DVector<f64>,
    /// Outcome vector, length n. In survival mode this holds the follow-up
    /// time min(event time, censoring time).
    y: DVector<f64>,
    /// Event indicator (1 = observed event, 0 = censored); present iff the
    /// table is in survival mode.
    delta: Option<Vec<u8>>,
    /// Optional n × q covariate matrix.
    c: Option<DMatrix<f64>>,
    exposure_kind: ExposureKind,
}

impl ObservationTable {
    pub fn new(
        g: DMatrix<f64>,
        a: DVector<f64>,
        y: DVector<f64>,
        exposure_kind: ExposureKind,
        delta: Option<Vec<u8>>,
        c: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = g.nrows();
        if n == 0 {
            return Err(Error::Validation("table has no rows".into()));
        }
        if g.ncols() == 0 {
            return Err(Error::Validation("at least one IV column is required".into()));
        }
        if a.len() != n || y.len() != n {
            return Err(Error::Validation(format!(
                "column length mismatch: g has {} rows, a has {}, y has {}",
                n,
                a.len(),
                y.len()
            )));
        }
        if let Some(d) = &delta {
            if d.len() != n {
                return Err(Error::Validation(format!(
                    "event column has {} rows, expected {}",
                    d.len(),
                    n
                )));
            }
            if let Some(i) = y.iter().position(|v| *v < 0.0) {
                return Err(Error::Validation(format!(
                    "survival mode requires nonnegative follow-up times; row {i} has {}",
                    y[i]
                )));
            }
            if let Some(i) = d.iter().position(|v| *v > 1) {
                return Err(Error::Validation(format!(
                    "event indicator must be 0 or 1; row {i} has {}",
                    d[i]
                )));
            }
        }
        if let Some(cm) = &c {
            if cm.nrows() != n {
                return Err(Error::Validation(format!(
                    "covariate matrix has {} rows, expected {}",
                    cm.nrows(),
                    n
                )));
            }
        }
        let any_non_finite = g.iter().chain(a.iter()).chain(y.iter()).any(|v| !v.is_finite())
            || c.as_ref().is_some_and(|cm| cm.iter().any(|v| !v.is_finite()));
        if any_non_finite {
            return Err(Error::Validation("non-finite value in table".into()));
        }
        match exposure_kind {
            ExposureKind::Binary => {
                if let Some(i) = a.iter().position(|v| *v != 0.0 && *v != 1.0) {
                    return Err(Error::Validation(format!(
                        "exposure declared binary but row {i} has value {}",
                        a[i]
                    )));
                }
            }
            ExposureKind::Count => {
                if let Some(i) = a.iter().position(|v| *v < 0.0 || v.fract() != 0.0) {
                    return Err(Error::Validation(format!(
                        "exposure declared count but row {i} has value {}",
                        a[i]
                    )));
                }
            }
            ExposureKind::Continuous => {}
        }
        Ok(Self { g, a, y, delta, c, exposure_kind })
    }

    pub fn n(&self) -> usize {
        self.g.nrows()
    }

    /// Number of candidate IV columns.
    pub fn p(&self) -> usize {
        self.g.ncols()
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    /// Single IV column as a vector view copy.
    pub fn g_col(&self, j: usize) -> DVector<f64> {
        self.g.column(j).into_owned()
    }

    pub fn a(&self) -> &DVector<f64> {
        &self.a
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn delta(&self) -> Option<&[u8]> {
        self.delta.as_deref()
    }

    pub fn c(&self) -> Option<&DMatrix<f64>> {
        self.c.as_ref()
    }

    pub fn exposure_kind(&self) -> ExposureKind {
        self.exposure_kind
    }

    pub fn is_survival(&self) -> bool {
        self.delta.is_some()
    }

    /// New table consisting of the given row indices (with repetition
    /// allowed); used by the survival bootstrap.
    pub fn resample(&self, idx: &[usize]) -> Self {
        let m = idx.len();
        let mut g = DMatrix::zeros(m, self.p());
        let mut a = DVector::zeros(m);
        let mut y = DVector::zeros(m);
        let mut delta = self.delta.as_ref().map(|_| Vec::with_capacity(m));
        let mut c = self.c.as_ref().map(|cm| DMatrix::zeros(m, cm.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..self.p() {
                g[(r, j)] = self.g[(i, j)];
            }
            a[r] = self.a[i];
            y[r] = self.y[i];
            if let (Some(d), Some(src)) = (delta.as_mut(), self.delta.as_ref()) {
                d.push(src[i]);
            }
            if let (Some(dst), Some(src)) = (c.as_mut(), self.c.as_ref()) {
                for j in 0..src.ncols() {
                    dst[(r, j)] = src[(i, j)];
                }
            }
        }
        Self { g, a, y, delta, c, exposure_kind: self.exposure_kind }
    }
}

/// Column-role declaration for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub iv_cols: Vec<String>,
    pub exposure_col: String,
    pub outcome_col: String,
    #[serde(default)]
    pub covariate_cols: Vec<String>,
    #[serde(default)]
    pub event_col: Option<String>,
    pub exposure_kind: ExposureKind,
}

/// Outcome of a CSV load: the validated table plus the list of rows that
/// were dropped because a declared cell was missing.
#[derive(Debug)]
pub struct LoadReport {
    pub table: ObservationTable,
    pub rejected_rows: Vec<RowIssue>,
}

/// Load a headered CSV, mapping columns to roles via `schema`.
///
/// Rows with an empty cell in any declared column are rejected (dropped)
/// and reported in the returned row-indexed list; the data are never
/// imputed. Non-numeric cells and binary-declared exposures outside {0,1}
/// are fatal.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<LoadReport> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let index_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("column '{name}' not found in header")))
    };

    let iv_idx: Vec<usize> = schema.iv_cols.iter().map(|c| index_of(c)).collect::<Result<_>>()?;
    let a_idx = index_of(&schema.exposure_col)?;
    let y_idx = index_of(&schema.outcome_col)?;
    let c_idx: Vec<usize> =
        schema.covariate_cols.iter().map(|c| index_of(c)).collect::<Result<_>>()?;
    let d_idx = schema.event_col.as_ref().map(|c| index_of(c)).transpose()?;

    let mut g_rows: Vec<Vec<f64>> = Vec::new();
    let mut a_vals: Vec<f64> = Vec::new();
    let mut y_vals: Vec<f64> = Vec::new();
    let mut c_rows: Vec<Vec<f64>> = Vec::new();
    let mut d_vals: Vec<u8> = Vec::new();
    let mut rejected: Vec<RowIssue> = Vec::new();
    let mut fatal: Vec<RowIssue> = Vec::new();

    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let mut missing: Option<RowIssue> = None;
        let mut parse_cell = |idx: usize, name: &str| -> Option<f64> {
            let raw = record.get(idx).unwrap_or("").trim();
            if raw.is_empty() {
                if missing.is_none() {
                    missing = Some(RowIssue {
                        row,
                        column: name.to_string(),
                        problem: "missing value".into(),
                    });
                }
                return None;
            }
            match raw.parse::<f64>() {
                Ok(v) => Some(v),
                Err(_) => {
                    fatal.push(RowIssue {
                        row,
                        column: name.to_string(),
                        problem: format!("non-numeric cell '{raw}'"),
                    });
                    None
                }
            }
        };

        let g_row: Vec<Option<f64>> = iv_idx
            .iter()
            .zip(&schema.iv_cols)
            .map(|(&idx, name)| parse_cell(idx, name))
            .collect();
        let a_val = parse_cell(a_idx, &schema.exposure_col);
        let y_val = parse_cell(y_idx, &schema.outcome_col);
        let c_row: Vec<Option<f64>> = c_idx
            .iter()
            .zip(&schema.covariate_cols)
            .map(|(&idx, name)| parse_cell(idx, name))
            .collect();
        let d_val = d_idx.map(|idx| parse_cell(idx, schema.event_col.as_deref().unwrap()));

        if let Some(issue) = missing {
            rejected.push(issue);
            continue;
        }
        let all_present = g_row.iter().all(Option::is_some)
            && a_val.is_some()
            && y_val.is_some()
            && c_row.iter().all(Option::is_some)
            && d_val.as_ref().map_or(true, Option::is_some);
        if !all_present {
            // a cell failed to parse; fatal issue already recorded
            continue;
        }

        let a_v = a_val.unwrap();
        if schema.exposure_kind == ExposureKind::Binary && a_v != 0.0 && a_v != 1.0 {
            fatal.push(RowIssue {
                row,
                column: schema.exposure_col.clone(),
                problem: format!("value {a_v} outside {{0,1}} for binary exposure"),
            });
            continue;
        }
        if let Some(Some(d)) = d_val {
            if d != 0.0 && d != 1.0 {
                fatal.push(RowIssue {
                    row,
                    column: schema.event_col.clone().unwrap(),
                    problem: format!("event indicator {d} outside {{0,1}}"),
                });
                continue;
            }
            d_vals.push(d as u8);
        }
        g_rows.push(g_row.into_iter().map(Option::unwrap).collect());
        a_vals.push(a_v);
        y_vals.push(y_val.unwrap());
        if !c_idx.is_empty() {
            c_rows.push(c_row.into_iter().map(Option::unwrap).collect());
        }
    }

    if !fatal.is_empty() {
        return Err(Error::InvalidCells(fatal));
    }
    let n = g_rows.len();
    if n == 0 {
        return Err(Error::Validation("no valid rows after validation".into()));
    }
    let p = iv_idx.len();
    let g = DMatrix::from_fn(n, p, |i, j| g_rows[i][j]);
    let c = if c_idx.is_empty() {
        None
    } else {
        Some(DMatrix::from_fn(n, c_idx.len(), |i, j| c_rows[i][j]))
    };
    let delta = if d_idx.is_some() { Some(d_vals) } else { None };
    let table = ObservationTable::new(
        g,
        DVector::from_vec(a_vals),
        DVector::from_vec(y_vals),
        schema.exposure_kind,
        delta,
        c,
    )?;
    Ok(LoadReport { table, rejected_rows: rejected })
}

/// Re-serialize a table under the same schema; numbers are written in the
/// shortest form that round-trips, so load → write → load is lossless.
pub fn write_csv(table: &ObservationTable, schema: &CsvSchema, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = schema.iv_cols.clone();
    header.push(schema.exposure_col.clone());
    header.push(schema.outcome_col.clone());
    header.extend(schema.covariate_cols.iter().cloned());
    if let Some(ev) = &schema.event_col {
        header.push(ev.clone());
    }
    w.write_record(&header)?;
    for i in 0..table.n() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for j in 0..table.p() {
            rec.push(table.g()[(i, j)].to_string());
        }
        rec.push(table.a()[i].to_string());
        rec.push(table.y()[i].to_string());
        if let Some(cm) = table.c() {
            for j in 0..cm.ncols() {
                rec.push(cm[(i, j)].to_string());
            }
        }
        if let Some(d) = table.delta() {
            rec.push(d[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Distinct values of a column if it takes at most `max_levels` of them.
pub(crate) fn distinct_levels(col: &DVector<f64>, max_levels: usize) -> Option<Vec<f64>> {
    let mut seen: BTreeMap<u64, f64> = BTreeMap::new();
    for &v in col.iter() {
        seen.entry(v.to_bits()).or_insert(v);
        if seen.len() > max_levels {
            return None;
        }
    }
    let mut levels: Vec<f64> = seen.into_values().collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(levels)
}

/// Columns with this many observed levels or fewer are treated as discrete
/// by the saturated nuisance fits and the relevance diagnostic.
pub const DISCRETE_LEVEL_CAP: usize = 10;

/// Relevance diagnostic for one IV column.
#[derive(Debug, Clone, Serialize)]
pub struct IvRelevance {
    /// Empirical covariance between the IV and the estimated conditional
    /// exposure variance given the IV.
    pub phi_hat: f64,
    /// Plug-in standard error of `phi_hat`.
    pub se: f64,
    /// `phi_hat / se` (0 when se is 0).
    pub z: f64,
    /// The column is constant, so the covariance is undefined.
    pub constant: bool,
    /// |z| fell below the weak-identification threshold.
    pub weak: bool,
    /// Whether var(A|G) was estimated by group variances (discrete IV) or
    /// by regressing squared residuals on the IV.
    pub grouped: bool,
}

/// Diagnostic record for all IV columns.
#[derive(Debug, Clone, Serialize)]
pub struct RelevanceDiagnostic {
    pub per_iv: Vec<IvRelevance>,
    pub threshold: f64,
}

impl RelevanceDiagnostic {
    /// φ̂ of the first IV column; the single-IV estimators report this.
    pub fn phi_hat(&self) -> f64 {
        self.per_iv[0].phi_hat
    }

    pub fn any_weak(&self) -> bool {
        self.per_iv.iter().any(|d| d.weak || d.constant)
    }
}

/// Default |φ̂|/SE threshold below which an IV is flagged weak.
pub const WEAK_PHI_Z_THRESHOLD: f64 = 2.0;

/// Empirical analog of cov{G, var(A|G)} per IV column.
///
/// For a discrete IV the conditional variance is the within-group variance
/// of the exposure; otherwise the squared residuals from a linear fit of
/// the exposure on the IV are regressed on the IV and the fitted values
/// stand in for var(A|G). A constant column is flagged, not fatal.
pub fn relevance_diagnostic(table: &ObservationTable) -> RelevanceDiagnostic {
    relevance_diagnostic_with_threshold(table, WEAK_PHI_Z_THRESHOLD)
}

pub fn relevance_diagnostic_with_threshold(
    table: &ObservationTable,
    threshold: f64,
) -> RelevanceDiagnostic {
    let n = table.n();
    let nf = n as f64;
    let a = table.a();
    let per_iv = (0..table.p())
        .map(|j| {
            let g = table.g_col(j);
            let g_bar = g.mean();
            let g_var = g.iter().map(|v| (v - g_bar).powi(2)).sum::<f64>() / nf;
            if g_var == 0.0 {
                return IvRelevance {
                    phi_hat: 0.0,
                    se: 0.0,
                    z: 0.0,
                    constant: true,
                    weak: true,
                    grouped: true,
                };
            }
            let (cond_var, grouped) = conditional_variance_estimate(&g, a);
            // P_n convention (divide by n) throughout so the binary-G identity
            // phi = var(G){var(A|G=1) - var(A|G=0)} holds exactly.
            let v_bar = cond_var.iter().sum::<f64>() / nf;
            let phi = g
                .iter()
                .zip(cond_var.iter())
                .map(|(gi, vi)| (gi - g_bar) * (vi - v_bar))
                .sum::<f64>()
                / nf;
            let var_xi = g
                .iter()
                .zip(cond_var.iter())
                .map(|(gi, vi)| ((gi - g_bar) * (vi - v_bar) - phi).powi(2))
                .sum::<f64>()
                / nf;
            let se = (var_xi / nf).sqrt();
            let z = if se > 0.0 { phi / se } else { 0.0 };
            IvRelevance {
                phi_hat: phi,
                se,
                z,
                constant: false,
                weak: se == 0.0 || z.abs() < threshold,
                grouped,
            }
        })
        .collect();
    RelevanceDiagnostic { per_iv, threshold }
}

/// Per-unit estimate of var(A | G = g_i) for a single IV column.
fn conditional_variance_estimate(g: &DVector<f64>, a: &DVector<f64>) -> (Vec<f64>, bool) {
    let n = g.len();
    if let Some(levels) = distinct_levels(g, DISCRETE_LEVEL_CAP) {
        let mut sum: BTreeMap<u64, (f64, f64, f64)> = BTreeMap::new(); // count, sum, sumsq
        for i in 0..n {
            let e = sum.entry(g[i].to_bits()).or_insert((0.0, 0.0, 0.0));
            e.0 += 1.0;
            e.1 += a[i];
            e.2 += a[i] * a[i];
        }
        let _ = levels;
        let var_of = |bits: u64| -> f64 {
            let (c, s, ss) = sum[&bits];
            (ss / c) - (s / c).powi(2)
        };
        let vals = (0..n).map(|i| var_of(g[i].to_bits())).collect();
        (vals, true)
    } else {
        // linear fit of A on (1, G), then squared residuals on (1, G)
        let (b0, b1) = simple_ols(g, a);
        let e2: Vec<f64> = (0..n).map(|i| (a[i] - b0 - b1 * g[i]).powi(2)).collect();
        let e2v = DVector::from_vec(e2);
        let (c0, c1) = simple_ols(g, &e2v);
        let vals = (0..n).map(|i| c0 + c1 * g[i]).collect();
        (vals, false)
    }
}

/// Closed-form intercept and slope of a univariate least-squares fit.
pub(crate) fn simple_ols(x: &DVector<f64>, y: &DVector<f64>) -> (f64, f64) {
    let n = x.len() as f64;
    let xb = x.mean();
    let yb = y.mean();
    let sxy = x.iter().zip(y.iter()).map(|(xi, yi)| (xi - xb) * (yi - yb)).sum::<f64>() / n;
    let sxx = x.iter().map(|xi| (xi - xb).powi(2)).sum::<f64>() / n;
    if sxx == 0.0 {
        (yb, 0.0)
    } else {
        let slope = sxy / sxx;
        (yb - slope * xb, slope)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn schema_gay(kind: ExposureKind) -> CsvSchema {
        CsvSchema {
            iv_cols: vec!["g".into()],
            exposure_col: "a".into(),
            outcome_col: "y".into(),
            covariate_cols: vec![],
            event_col: None,
            exposure_kind: kind,
        }
    }

    #[test]
    fn loads_four_row_file() {
        let f = write_temp("g,a,y\n1,0,2.5\n0,1,1.5\n1,1,3.0\n0,0,0.5\n");
        let report = load_csv(f.path(), &schema_gay(ExposureKind::Binary)).unwrap();
        assert_eq!(report.table.n(), 4);
        assert_eq!(report.table.p(), 1);
        assert!(report.rejected_rows.is_empty());
    }

    #[test]
    fn binary_declaration_rejects_fractional_exposure() {
        let f = write_temp("g,a,y\n1,0,2.5\n0,0.5,1.5\n");
        let err = load_csv(f.path(), &schema_gay(ExposureKind::Binary)).unwrap_err();
        match err {
            Error::InvalidCells(issues) => {
                assert_eq!(issues.len(), 1);
                assert_eq!(issues[0].row, 1);
                assert_eq!(issues[0].column, "a");
            }
            other => panic!("expected InvalidCells, got {other:?}"),
        }
    }

    #[test]
    fn ten_iv_file_has_p_10() {
        // fixture shaped like the multi-IV simulation designs
        let mut content = String::from("g1,g2,g3,g4,g5,g6,g7,g8,g9,g10,a,y\n");
        let n_lines = 12;
        for i in 0..n_lines {
            let bits: Vec<String> = (0..10).map(|j| ((i + j) % 2).to_string()).collect();
            content.push_str(&format!("{},{}.0,{}.5\n", bits.join(","), i % 3, i));
        }
        let f = write_temp(&content);
        let schema = CsvSchema {
            iv_cols: (1..=10).map(|j| format!("g{j}")).collect(),
            exposure_col: "a".into(),
            outcome_col: "y".into(),
            covariate_cols: vec![],
            event_col: None,
            exposure_kind: ExposureKind::Continuous,
        };
        let report = load_csv(f.path(), &schema).unwrap();
        // independent line count check
        assert_eq!(report.table.n(), content.lines().count() - 1);
        assert_eq!(report.table.p(), 10);
    }

    #[test]
    fn missing_cells_reject_rows_with_index() {
        let f = write_temp("g,a,y\n1,0,2.5\n0,,1.5\n1,1,\n0,0,0.5\n");
        let report = load_csv(f.path(), &schema_gay(ExposureKind::Binary)).unwrap();
        assert_eq!(report.table.n(), 2);
        assert_eq!(report.rejected_rows.len(), 2);
        assert_eq!(report.rejected_rows[0].row, 1);
        assert_eq!(report.rejected_rows[1].row, 2);
    }

    #[test]
    fn missing_column_is_fatal() {
        let f = write_temp("g,a\n1,0\n");
        let err = load_csv(f.path(), &schema_gay(ExposureKind::Binary)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn non_numeric_cell_is_fatal() {
        let f = write_temp("g,a,y\n1,0,2.5\nx,1,1.5\n");
        let err = load_csv(f.path(), &schema_gay(ExposureKind::Binary)).unwrap_err();
        assert!(matches!(err, Error::InvalidCells(_)));
    }

    #[test]
    fn roundtrip_is_lossless() {
        let f = write_temp("g,a,y\n1,0,2.5000001\n0,1,-1.5e-7\n1,1,3.0\n");
        let schema = schema_gay(ExposureKind::Binary);
        let first = load_csv(f.path(), &schema).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_csv(&first.table, &schema, out.path()).unwrap();
        let second = load_csv(out.path(), &schema).unwrap();
        assert_eq!(first.table.n(), second.table.n());
        for i in 0..first.table.n() {
            assert_eq!(first.table.y()[i], second.table.y()[i]);
            assert_eq!(first.table.a()[i], second.table.a()[i]);
            assert_eq!(first.table.g()[(i, 0)], second.table.g()[(i, 0)]);
        }
    }

    #[test]
    fn phi_zero_when_conditional_variances_match() {
        // binary G with var(A|G=1) = var(A|G=0) exactly: the success
        // probabilities pi(1) = 1 - pi(0) produce equal group variances.
        let g = DMatrix::from_column_slice(8, 1, &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        // pi(1) = 0.75, pi(0) = 0.25
        let a = DVector::from_vec(vec![1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let y = DVector::zeros(8);
        let t = ObservationTable::new(g, a, y, ExposureKind::Binary, None, None).unwrap();
        let d = relevance_diagnostic(&t);
        assert_abs_diff_eq!(d.phi_hat(), 0.0, epsilon = 1e-15);
        assert!(d.per_iv[0].weak);
    }

    #[test]
    fn phi_matches_binary_closed_form() {
        // phi = var(G) * {var(A|G=1) - var(A|G=0)} for binary G
        let gvals = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let avals = [2.0, 5.0, 3.0, 1.0, 1.5, 0.5, 1.0, 4.5, 1.25, 2.5];
        let n = gvals.len();
        let g = DMatrix::from_column_slice(n, 1, &gvals);
        let a = DVector::from_column_slice(&avals);
        let y = DVector::zeros(n);
        let t = ObservationTable::new(g, a, y, ExposureKind::Continuous, None, None).unwrap();
        let d = relevance_diagnostic(&t);

        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        let a1: Vec<f64> =
            gvals.iter().zip(&avals).filter(|(g, _)| **g == 1.0).map(|(_, a)| *a).collect();
        let a0: Vec<f64> =
            gvals.iter().zip(&avals).filter(|(g, _)| **g == 0.0).map(|(_, a)| *a).collect();
        let expected = var(&gvals) * (var(&a1) - var(&a0));
        assert_abs_diff_eq!(d.phi_hat(), expected, epsilon = 1e-12);
    }

    #[test]
    fn constant_iv_flagged_not_fatal() {
        let g = DMatrix::from_column_slice(4, 1, &[1.0, 1.0, 1.0, 1.0]);
        let a = DVector::from_vec(vec![0.0, 1.0, 0.0, 1.0]);
        let y = DVector::zeros(4);
        let t = ObservationTable::new(g, a, y, ExposureKind::Binary, None, None).unwrap();
        let d = relevance_diagnostic(&t);
        assert!(d.per_iv[0].constant);
        assert!(d.per_iv[0].weak);
    }

    #[test]
    fn survival_table_requires_nonnegative_times() {
        let g = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let a = DVector::from_vec(vec![0.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, -0.5]);
        let err =
            ObservationTable::new(g, a, y, ExposureKind::Binary, Some(vec![1, 0]), None)
                .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
