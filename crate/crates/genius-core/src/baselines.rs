//! Comparison estimators: classical two-stage least squares, the oracle
//! variant that knows the valid instruments, and the Egger regression of
//! per-IV outcome associations on exposure associations.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{simple_ols, ObservationTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct BaselineEstimate {
    pub beta_hat: f64,
    pub se: f64,
    pub method: String,
    /// IV columns declared valid (oracle variant only).
    pub valid_set: Option<Vec<usize>>,
    pub n: usize,
}

/// General two-stage least squares of y on [exog | endog] with instruments
/// [exog | excluded]. Returns the coefficient on the (single) endogenous
/// column and its homoscedastic standard error.
fn tsls_core(
    y: &DVector<f64>,
    exog: &DMatrix<f64>,
    endog: &DVector<f64>,
    excluded: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    let n = y.len();
    let k_ex = exog.ncols();
    let m = excluded.ncols();
    if m < 1 {
        return Err(Error::Validation("at least one excluded instrument is required".into()));
    }
    // instrument matrix Z = [exog | excluded]
    let mut z = DMatrix::zeros(n, k_ex + m);
    z.view_mut((0, 0), (n, k_ex)).copy_from(exog);
    z.view_mut((0, k_ex), (n, m)).copy_from(excluded);

    let ztz = z.transpose() * &z;
    let ztz_inv = ztz
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| ztz.clone().try_inverse())
        .ok_or_else(|| Error::Numerical("instrument cross-product singular".into()))?;

    // fitted endogenous column
    let zta = z.transpose() * endog;
    let gamma = &ztz_inv * &zta;
    let endog_hat = &z * &gamma;

    // second stage design [exog | endog_hat]
    let k = k_ex + 1;
    let mut x2 = DMatrix::zeros(n, k);
    x2.view_mut((0, 0), (n, k_ex)).copy_from(exog);
    x2.view_mut((0, k_ex), (n, 1)).copy_from(&endog_hat);
    let xtx = x2.transpose() * &x2;
    let xtx_inv = xtx
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| xtx.clone().try_inverse())
        .ok_or_else(|| Error::Numerical("second-stage design singular (rank deficiency)".into()))?;
    let coef = &xtx_inv * (x2.transpose() * y);

    // residuals with the original endogenous column
    let mut x_orig = DMatrix::zeros(n, k);
    x_orig.view_mut((0, 0), (n, k_ex)).copy_from(exog);
    x_orig.view_mut((0, k_ex), (n, 1)).copy_from(endog);
    let resid = y - &x_orig * &coef;
    let dof = (n as f64 - k as f64).max(1.0);
    let sigma2 = resid.iter().map(|r| r * r).sum::<f64>() / dof;
    let se = (sigma2 * xtx_inv[(k_ex, k_ex)]).max(0.0).sqrt();
    Ok((coef[k_ex], se))
}

/// Classical two-stage least squares of the outcome on the exposure,
/// instrumented by all (or the selected) IV columns plus an intercept.
pub fn tsls(table: &ObservationTable, iv_columns: Option<&[usize]>) -> Result<BaselineEstimate> {
    let cols: Vec<usize> = match iv_columns {
        Some(c) => c.to_vec(),
        None => (0..table.p()).collect(),
    };
    if cols.is_empty() {
        return Err(Error::Validation("no instrument columns selected".into()));
    }
    for &j in &cols {
        if j >= table.p() {
            return Err(Error::Validation(format!("IV column {j} out of range")));
        }
    }
    let n = table.n();
    let exog = DMatrix::from_element(n, 1, 1.0);
    let excluded = DMatrix::from_fn(n, cols.len(), |i, j| table.g()[(i, cols[j])]);
    let (beta, se) = tsls_core(table.y(), &exog, table.a(), &excluded)?;
    Ok(BaselineEstimate { beta_hat: beta, se, method: "tsls".into(), valid_set: None, n })
}

/// Two-stage least squares that treats the declared valid IVs as excluded
/// instruments and every other IV column as an exogenous regressor in both
/// stages.
pub fn oracle_tsls(table: &ObservationTable, valid: &[usize]) -> Result<BaselineEstimate> {
    if valid.is_empty() {
        return Err(Error::Validation("oracle TSLS requires a nonempty valid-IV set".into()));
    }
    for &j in valid {
        if j >= table.p() {
            return Err(Error::Validation(format!("valid IV column {j} out of range")));
        }
    }
    let n = table.n();
    let invalid: Vec<usize> = (0..table.p()).filter(|j| !valid.contains(j)).collect();
    let mut exog = DMatrix::zeros(n, 1 + invalid.len());
    for i in 0..n {
        exog[(i, 0)] = 1.0;
        for (c, &j) in invalid.iter().enumerate() {
            exog[(i, 1 + c)] = table.g()[(i, j)];
        }
    }
    let excluded = DMatrix::from_fn(n, valid.len(), |i, j| table.g()[(i, valid[j])]);
    let (beta, se) = tsls_core(table.y(), &exog, table.a(), &excluded)?;
    Ok(BaselineEstimate {
        beta_hat: beta,
        se,
        method: "oracle-tsls".into(),
        valid_set: Some(valid.to_vec()),
        n,
    })
}

/// Egger regression: per-IV exposure and outcome associations from
/// univariate regressions, re-oriented so every exposure association is
/// positive, then an inverse-variance weighted regression of the outcome
/// associations on the exposure associations with an intercept. The slope
/// estimates the causal effect.
pub fn mr_egger(table: &ObservationTable) -> Result<BaselineEstimate> {
    let p = table.p();
    if p < 2 {
        return Err(Error::Validation("Egger regression requires at least two IVs".into()));
    }
    let n = table.n();
    let nf = n as f64;
    let mut gamma = Vec::with_capacity(p); // IV -> exposure
    let mut cap_gamma = Vec::with_capacity(p); // IV -> outcome
    let mut weights = Vec::with_capacity(p);
    for j in 0..p {
        let gj = table.g_col(j);
        let (_, slope_a) = simple_ols(&gj, table.a());
        let (int_y, slope_y) = simple_ols(&gj, table.y());
        // homoscedastic SE of the outcome-association slope
        let g_bar = gj.mean();
        let sxx: f64 = gj.iter().map(|v| (v - g_bar).powi(2)).sum::<f64>() / nf;
        if sxx == 0.0 {
            return Err(Error::Validation(format!("IV column {j} is constant")));
        }
        let rss: f64 = (0..n)
            .map(|i| (table.y()[i] - int_y - slope_y * gj[i]).powi(2))
            .sum();
        let sigma2 = rss / (nf - 2.0);
        let var_slope = sigma2 / (nf * sxx);
        // orient so the exposure association is nonnegative
        let (gj_a, gj_y) = if slope_a < 0.0 { (-slope_a, -slope_y) } else { (slope_a, slope_y) };
        gamma.push(gj_a);
        cap_gamma.push(gj_y);
        weights.push(1.0 / var_slope.max(1e-300));
    }

    // weighted regression of outcome associations on exposure associations
    let wsum: f64 = weights.iter().sum();
    let gw: f64 = gamma.iter().zip(&weights).map(|(g, w)| g * w).sum::<f64>() / wsum;
    let yw: f64 = cap_gamma.iter().zip(&weights).map(|(y, w)| y * w).sum::<f64>() / wsum;
    let sxx: f64 = gamma.iter().zip(&weights).map(|(g, w)| w * (g - gw).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Identification(
            "all exposure associations identical; Egger slope undefined".into(),
        ));
    }
    let sxy: f64 = gamma
        .iter()
        .zip(&cap_gamma)
        .zip(&weights)
        .map(|((g, y), w)| w * (g - gw) * (y - yw))
        .sum();
    let slope = sxy / sxx;
    let intercept = yw - slope * gw;
    // multiplicative overdispersion, floored at 1
    let rss_w: f64 = gamma
        .iter()
        .zip(&cap_gamma)
        .zip(&weights)
        .map(|((g, y), w)| w * (y - intercept - slope * g).powi(2))
        .sum();
    let dof = (p as f64 - 2.0).max(1.0);
    let scale = (rss_w / dof).max(1.0);
    let se = (scale / sxx).sqrt();
    Ok(BaselineEstimate { beta_hat: slope, se, method: "mr-egger".into(), valid_set: None, n })
}
