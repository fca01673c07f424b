//! Estimators for multiplicative outcome, multiplicative exposure, and
//! odds-ratio exposure models, with the case-control moment adjustment.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{distinct_levels, ExposureKind, ObservationTable, DISCRETE_LEVEL_CAP};
use crate::error::{Error, Result};
use crate::inference::{sandwich, wald_ci, StackedSystem};
use crate::nuisance::{
    fit_exposure_mean, fit_log_mean_ratio, fit_logit_contrast, FittedMean, LogitContrast,
    NuisancePolicy,
};
use crate::numeric::{find_root, DEFAULT_BRACKET};

/// Relative tolerance for identification checks on moment denominators.
const IDENT_REL_TOL: f64 = 1e-8;
/// Relative closeness of the exposure variance ratio to the fitted mean
/// ratio below which the multiplicative-exposure model is unidentified.
const VAR_RATIO_TOL: f64 = 0.05;

/// Log-scale point estimate with its exponential transform.
#[derive(Debug, Clone, Serialize)]
pub struct LinkEstimate {
    /// Effect on the log scale.
    pub beta_hat: f64,
    pub exp_beta: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub exp_ci: (f64, f64),
    pub level: f64,
    /// mult-outcome | mult-exposure | odds-ratio-exposure
    pub link: String,
    pub diagnostics: LinkDiagnostics,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LinkDiagnostics {
    /// |P_n moment| at the reported root.
    pub residual: f64,
    /// Derivative of the moment at the root; near-zero values are flagged.
    pub derivative_at_root: Option<f64>,
    pub bracket: Option<(f64, f64)>,
    pub iterations: usize,
    /// Causal-null test (odds-ratio estimator only).
    pub null_test: Option<NullTest>,
    pub n: usize,
    pub p: usize,
    pub warnings: Vec<String>,
}

/// Test of the causal null obtained by evaluating the identifying moment at
/// a zero effect.
#[derive(Debug, Clone, Serialize)]
pub struct NullTest {
    pub moment: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Externally supplied target-population moments for case-control use.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalMoments {
    pub e_g: f64,
    /// (instrument level, E(A | G = level)) pairs.
    pub e_a_given_g: Vec<(f64, f64)>,
}

impl ExternalMoments {
    pub fn new(e_g: f64, e_a_given_g: Vec<(f64, f64)>, binary_a: bool) -> Result<Self> {
        if binary_a {
            for (g, m) in &e_a_given_g {
                if !(0.0..=1.0).contains(m) {
                    return Err(Error::Validation(format!(
                        "external E(A|G={g}) = {m} outside [0,1] for binary exposure"
                    )));
                }
            }
        }
        Ok(Self { e_g, e_a_given_g })
    }

    pub fn lookup(&self, g: f64) -> Result<f64> {
        self.e_a_given_g
            .iter()
            .find(|(level, _)| *level == g)
            .map(|(_, m)| *m)
            .ok_or_else(|| {
                Error::Validation(format!("external moments carry no E(A|G) entry for level {g}"))
            })
    }
}

fn make_estimate(
    beta: f64,
    se: f64,
    level: f64,
    link: &str,
    diagnostics: LinkDiagnostics,
) -> LinkEstimate {
    let ci = wald_ci(beta, se, level);
    LinkEstimate {
        beta_hat: beta,
        exp_beta: beta.exp(),
        se,
        ci,
        exp_ci: (ci.0.exp(), ci.1.exp()),
        level,
        link: link.into(),
        diagnostics,
    }
}

/// Multiplicative-outcome estimator: the root in beta of
/// `P_n[(G - E G)(A - E(A|G)) Y exp(-beta A)] = 0`.
///
/// When external moments are supplied (case-control use) they replace the
/// in-sample instrument mean and conditional exposure means, and the
/// variance treats them as known.
pub fn genius_mult_outcome(
    table: &ObservationTable,
    external: Option<&ExternalMoments>,
) -> Result<LinkEstimate> {
    genius_mult_outcome_opts(table, external, NuisancePolicy::Auto, 0.95)
}

pub fn genius_mult_outcome_opts(
    table: &ObservationTable,
    external: Option<&ExternalMoments>,
    policy: NuisancePolicy,
    level: f64,
) -> Result<LinkEstimate> {
    if table.p() != 1 {
        return Err(Error::Validation("multiplicative-outcome estimator requires one IV".into()));
    }
    let n = table.n();
    let nf = n as f64;
    let g = table.g_col(0);
    let a = table.a();
    let y = table.y();
    let mut warnings = Vec::new();
    if y.iter().any(|v| *v < 0.0) {
        warnings.push("outcome has negative values; the multiplicative model expects Y >= 0".into());
    }
    let a_bar = a.mean();
    if a.iter().all(|v| (*v - a_bar).abs() < 1e-14) {
        return Err(Error::Identification(
            "exposure is constant, so the moment does not depend on the parameter".into(),
        ));
    }

    // residual weights, either from in-sample fits or external moments
    let internal_fit = if external.is_none() {
        Some(fit_exposure_mean(table, policy)?)
    } else {
        None
    };
    let mu = match external {
        Some(ext) => ext.e_g,
        None => g.mean(),
    };
    let e_a: Vec<f64> = match external {
        Some(ext) => (0..n).map(|i| ext.lookup(g[i])).collect::<Result<_>>()?,
        None => {
            let fit = internal_fit.as_ref().unwrap();
            (0..n).map(|i| fit.predict(i)).collect()
        }
    };
    let w: Vec<f64> = (0..n).map(|i| (g[i] - mu) * (a[i] - e_a[i])).collect();

    let f = |beta: f64| -> f64 {
        (0..n).map(|i| w[i] * y[i] * (-beta * a[i]).exp()).sum::<f64>() / nf
    };
    let df = |beta: f64| -> f64 {
        -(0..n).map(|i| w[i] * a[i] * y[i] * (-beta * a[i]).exp()).sum::<f64>() / nf
    };
    let (beta, root_diag) =
        find_root(f, df, DEFAULT_BRACKET.0, DEFAULT_BRACKET.1, 1e-10, 200)?;

    let deriv_scale =
        (0..n).map(|i| (w[i] * a[i] * y[i]).abs()).sum::<f64>() / nf;
    if root_diag.derivative.abs() <= IDENT_REL_TOL * deriv_scale.max(1e-300) {
        warnings.push("moment derivative near zero at the root; estimate is ill-determined".into());
    }

    let mut diag = LinkDiagnostics {
        residual: root_diag.residual,
        derivative_at_root: Some(root_diag.derivative),
        bracket: Some(root_diag.bracket),
        iterations: root_diag.iterations,
        null_test: None,
        n,
        p: 1,
        warnings,
    };

    let se = match &internal_fit {
        Some(fit) => mult_outcome_se(table, fit, beta, &mut diag)?,
        None => {
            // external moments treated as known constants
            let var_u = (0..n)
                .map(|i| (w[i] * y[i] * (-beta * a[i]).exp()).powi(2))
                .sum::<f64>()
                / nf;
            (var_u / (root_diag.derivative.powi(2) * nf)).sqrt()
        }
    };
    Ok(make_estimate(beta, se, level, "mult-outcome", diag))
}

fn mult_outcome_se(
    table: &ObservationTable,
    exposure_fit: &FittedMean,
    beta_hat: f64,
    diag: &mut LinkDiagnostics,
) -> Result<f64> {
    let n = table.n();
    let q = exposure_fit.param_count();
    let d = 1 + q + 1;
    let g = table.g_col(0);
    let a = table.a().clone();
    let y = table.y().clone();
    let mut theta = DVector::zeros(d);
    theta[0] = g.mean();
    theta.rows_mut(1, q).copy_from(&exposure_fit.params());
    theta[d - 1] = beta_hat;

    let row = {
        let (g, a, y) = (g.clone(), a.clone(), y.clone());
        move |theta: &DVector<f64>, i: usize| -> DVector<f64> {
            let mu = theta[0];
            let psi = theta.rows(1, q).into_owned();
            let beta = theta[d - 1];
            let e_hat = exposure_fit.predict_with(&psi, i);
            let resid = a[i] - e_hat;
            let mut m = DVector::zeros(d);
            m[0] = g[i] - mu;
            let basis = exposure_fit.basis(i);
            for j in 0..q {
                m[1 + j] = basis[j] * resid;
            }
            m[d - 1] = (g[i] - mu) * resid * y[i] * (-beta * a[i]).exp();
            m
        }
    };
    let jac = move |theta: &DVector<f64>, i: usize| -> DMatrix<f64> {
        let mu = theta[0];
        let psi = theta.rows(1, q).into_owned();
        let beta = theta[d - 1];
        let e_hat = exposure_fit.predict_with(&psi, i);
        let deriv = exposure_fit.mean_deriv_with(&psi, i);
        let basis = exposure_fit.basis(i);
        let resid = a[i] - e_hat;
        let core = y[i] * (-beta * a[i]).exp();
        let mut jrow = DMatrix::zeros(d, d);
        jrow[(0, 0)] = -1.0;
        for r in 0..q {
            for c in 0..q {
                jrow[(1 + r, 1 + c)] = -basis[r] * deriv[c];
            }
        }
        jrow[(d - 1, 0)] = -resid * core;
        for c in 0..q {
            jrow[(d - 1, 1 + c)] = -(g[i] - mu) * core * deriv[c];
        }
        jrow[(d - 1, d - 1)] = -(g[i] - mu) * resid * a[i] * core;
        jrow
    };

    let parts = sandwich(&StackedSystem {
        n,
        theta,
        layout: vec![("mu".into(), 1), ("psi".into(), q), ("beta".into(), 1)],
        moment_dim: d,
        row: Box::new(row),
        jac: Box::new(jac),
        combiner: None,
        center_rows: None,
    })?;
    if !parts.bread_full_rank() {
        diag.warnings.push("sandwich bread rank deficient; pseudo-inverse used".into());
    }
    Ok(parts.se())
}

/// Ratio estimator for the multiplicative-exposure estimator at a fixed
/// association vector; exposed within the crate so the degradation at
/// varpi = 0 can be exercised directly.
pub(crate) fn mult_exposure_ratio_at(
    table: &ObservationTable,
    varpi: &DVector<f64>,
) -> Result<(f64, f64)> {
    let n = table.n();
    let nf = n as f64;
    let g = table.g_col(0);
    let g_bar = g.mean();
    let a = table.a();
    let y = table.y();
    let tw: Vec<f64> = (0..n).map(|i| a[i] * (-varpi[0] * g[i]).exp()).collect();
    let nu = tw.iter().sum::<f64>() / nf;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut scale = 0.0;
    for i in 0..n {
        let w = (g[i] - g_bar) * (tw[i] - nu);
        num += w * y[i];
        den += w * a[i];
        scale += (w * a[i]).abs();
    }
    num /= nf;
    den /= nf;
    scale /= nf;
    if scale == 0.0 || den.abs() <= IDENT_REL_TOL * scale {
        return Err(Error::Identification(
            "multiplicative-exposure denominator numerically zero".into(),
        ));
    }
    Ok((num / den, (num - (num / den) * den).abs()))
}

/// Multiplicative-exposure estimator for count or binary exposures.
///
/// Fails with an identification error when the conditional exposure
/// variance ratios coincide with the fitted mean ratios (as they do for a
/// rare binary exposure), in which case the additive estimator is the
/// recommended fallback.
pub fn genius_mult_exposure(table: &ObservationTable) -> Result<LinkEstimate> {
    genius_mult_exposure_opts(table, 0.95)
}

pub fn genius_mult_exposure_opts(table: &ObservationTable, level: f64) -> Result<LinkEstimate> {
    if table.p() != 1 {
        return Err(Error::Validation("multiplicative-exposure estimator requires one IV".into()));
    }
    match table.exposure_kind() {
        ExposureKind::Binary | ExposureKind::Count => {}
        ExposureKind::Continuous => {
            return Err(Error::Validation(
                "multiplicative-exposure model applies to count or binary exposures".into(),
            ))
        }
    }
    let n = table.n();
    let g = table.g_col(0);
    let a = table.a();
    let fit = fit_log_mean_ratio(table.g(), a)?;
    let mut warnings = Vec::new();

    // identification: var(A|g)/var(A|0) must differ from exp(varpi * g)
    // for at least one level
    if let Some(levels) = distinct_levels(&g, DISCRETE_LEVEL_CAP) {
        if levels.contains(&0.0) {
            let mut all_close = true;
            let stats_at = |level: f64| -> (f64, usize) {
                let vals: Vec<f64> = (0..n).filter(|&i| g[i] == level).map(|i| a[i]).collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                (v, vals.len())
            };
            let (v0, _) = stats_at(0.0);
            if v0 > 0.0 {
                for &lvl in levels.iter().filter(|l| **l != 0.0) {
                    let (v, _) = stats_at(lvl);
                    let ratio = v / v0;
                    let model = (fit.varpi[0] * lvl).exp();
                    if (ratio / model - 1.0).abs() > VAR_RATIO_TOL {
                        all_close = false;
                        break;
                    }
                }
                if all_close {
                    return Err(Error::Identification(
                        "var(A|g)/var(A|0) matches exp(varpi g) at every level, so the \
                         multiplicative-exposure parameter is not identified; use the \
                         additive estimator instead"
                            .into(),
                    ));
                }
            }
        } else {
            warnings.push("reference level G = 0 unobserved; variance-ratio check skipped".into());
        }
    } else {
        warnings.push("continuous IV; variance-ratio identification check skipped".into());
    }

    let (beta, residual) = mult_exposure_ratio_at(table, &fit.varpi)?;
    let mut diag = LinkDiagnostics {
        residual,
        derivative_at_root: None,
        bracket: None,
        iterations: fit.iterations,
        null_test: None,
        n,
        p: 1,
        warnings,
    };
    let se = mult_exposure_se(table, &fit.varpi, beta, &mut diag)?;
    Ok(make_estimate(beta, se, level, "mult-exposure", diag))
}

fn mult_exposure_se(
    table: &ObservationTable,
    varpi: &DVector<f64>,
    beta_hat: f64,
    diag: &mut LinkDiagnostics,
) -> Result<f64> {
    let n = table.n();
    let nf = n as f64;
    let g = table.g_col(0);
    let a = table.a().clone();
    let y = table.y().clone();
    // theta = (mu, varpi, nu, beta)
    let d = 4;
    let mut theta = DVector::zeros(d);
    theta[0] = g.mean();
    theta[1] = varpi[0];
    theta[2] = (0..n).map(|i| a[i] * (-varpi[0] * g[i]).exp()).sum::<f64>() / nf;
    theta[3] = beta_hat;

    let row = {
        let (g, a, y) = (g.clone(), a.clone(), y.clone());
        move |theta: &DVector<f64>, i: usize| -> DVector<f64> {
            let (mu, vp, nu, beta) = (theta[0], theta[1], theta[2], theta[3]);
            let t = a[i] * (-vp * g[i]).exp();
            let mut m = DVector::zeros(4);
            m[0] = g[i] - mu;
            m[1] = t * (g[i] - mu);
            m[2] = t - nu;
            m[3] = (g[i] - mu) * (t - nu) * (y[i] - beta * a[i]);
            m
        }
    };
    let jac = move |theta: &DVector<f64>, i: usize| -> DMatrix<f64> {
        let (mu, vp, nu, beta) = (theta[0], theta[1], theta[2], theta[3]);
        let t = a[i] * (-vp * g[i]).exp();
        let dt_dvp = -t * g[i];
        let y_res = y[i] - beta * a[i];
        let mut j = DMatrix::zeros(4, 4);
        j[(0, 0)] = -1.0;
        j[(1, 0)] = -t;
        j[(1, 1)] = dt_dvp * (g[i] - mu);
        j[(2, 1)] = dt_dvp;
        j[(2, 2)] = -1.0;
        j[(3, 0)] = -(t - nu) * y_res;
        j[(3, 1)] = (g[i] - mu) * dt_dvp * y_res;
        j[(3, 2)] = -(g[i] - mu) * y_res;
        j[(3, 3)] = -(g[i] - mu) * (t - nu) * a[i];
        j
    };

    let parts = sandwich(&StackedSystem {
        n,
        theta,
        layout: vec![
            ("mu".into(), 1),
            ("varpi".into(), 1),
            ("nu".into(), 1),
            ("beta".into(), 1),
        ],
        moment_dim: 4,
        row: Box::new(row),
        jac: Box::new(jac),
        combiner: None,
        center_rows: None,
    })?;
    if !parts.bread_full_rank() {
        diag.warnings.push("sandwich bread rank deficient; pseudo-inverse used".into());
    }
    Ok(parts.se())
}

/// Odds-ratio exposure estimator via the closed form
/// `theta = -ln(1 - num/den)` built from the control-conditional moments,
/// with a causal-null test from the moment at a zero effect.
pub fn genius_odds_ratio(table: &ObservationTable) -> Result<LinkEstimate> {
    genius_odds_ratio_opts(table, 0.95)
}

pub fn genius_odds_ratio_opts(table: &ObservationTable, level: f64) -> Result<LinkEstimate> {
    if table.p() != 1 {
        return Err(Error::Validation("odds-ratio estimator requires one IV".into()));
    }
    if table.exposure_kind() != ExposureKind::Binary {
        return Err(Error::Validation("odds-ratio exposure model requires a binary exposure".into()));
    }
    let n = table.n();
    let nf = n as f64;
    let g = table.g_col(0);
    let a = table.a();
    let y = table.y();

    let controls: Vec<usize> = (0..n).filter(|&i| a[i] == 0.0).collect();
    if controls.is_empty() {
        return Err(Error::Validation("E(G|A=0) is not estimable: no A = 0 rows".into()));
    }
    let mu0 = controls.iter().map(|&i| g[i]).sum::<f64>() / controls.len() as f64;
    let g0_rows: Vec<usize> = (0..n).filter(|&i| g[i] == 0.0).collect();
    if g0_rows.is_empty() {
        return Err(Error::Validation("E(A|G=0) is not estimable: no G = 0 rows".into()));
    }
    let a0 = g0_rows.iter().map(|&i| a[i]).sum::<f64>() / g0_rows.len() as f64;

    let contrast_fit = fit_logit_contrast(&g, a)?;
    let phi: Vec<f64> = (0..n).map(|i| contrast_fit.contrast(g[i])).collect::<Result<_>>()?;

    let mut num = 0.0;
    let mut den = 0.0;
    let mut den_scale = 0.0;
    for i in 0..n {
        let core = (g[i] - mu0) * (a[i] - a0) * y[i] * (-phi[i] * a[i]).exp();
        num += core;
        den += core * a[i];
        den_scale += (core * a[i]).abs();
    }
    num /= nf;
    den /= nf;
    den_scale /= nf;
    if den_scale == 0.0 || den.abs() <= IDENT_REL_TOL * den_scale {
        return Err(Error::Identification(
            "denominator moment is numerically zero: the direct effects of the IV on the \
             outcome all vanish, so the odds-ratio parameter is not identified"
                .into(),
        ));
    }
    let arg = 1.0 - num / den;
    if arg <= 0.0 {
        return Err(Error::Numerical(format!(
            "closed form undefined: 1 - num/den = {arg} is not positive"
        )));
    }
    let theta_hat = -arg.ln();

    let mut diag = LinkDiagnostics {
        residual: 0.0,
        derivative_at_root: None,
        bracket: None,
        iterations: 0,
        null_test: None,
        n,
        p: 1,
        warnings: Vec::new(),
    };
    // residual of the defining moment at the closed-form root
    let root_resid = (0..n)
        .map(|i| (g[i] - mu0) * (a[i] - a0) * y[i] * (-(phi[i] + theta_hat) * a[i]).exp())
        .sum::<f64>()
        / nf;
    diag.residual = root_resid.abs();

    let (se, null_test) =
        odds_ratio_se_and_null(table, &contrast_fit, mu0, a0, theta_hat, num, &mut diag)?;
    diag.null_test = Some(null_test);
    Ok(make_estimate(theta_hat, se, level, "odds-ratio-exposure", diag))
}

/// Stacked sandwich for the odds-ratio estimator plus the causal-null test
/// formed by the influence-corrected variance of the moment at zero effect.
fn odds_ratio_se_and_null(
    table: &ObservationTable,
    contrast_fit: &LogitContrast,
    mu0: f64,
    a0: f64,
    theta_hat: f64,
    null_moment: f64,
    diag: &mut LinkDiagnostics,
) -> Result<(f64, NullTest)> {
    let n = table.n();
    let nf = n as f64;
    let g = table.g_col(0);
    let a = table.a().clone();
    let y = table.y().clone();
    let q = contrast_fit.params().len();
    let d = 2 + q + 1;
    let mut theta = DVector::zeros(d);
    theta[0] = mu0;
    theta[1] = a0;
    theta.rows_mut(2, q).copy_from(&contrast_fit.params());
    theta[d - 1] = theta_hat;

    let system_for = |theta_vec: DVector<f64>| -> StackedSystem<'_> {
        let row = {
            let (g, a, y) = (g.clone(), a.clone(), y.clone());
            move |th: &DVector<f64>, i: usize| -> DVector<f64> {
                let mu0 = th[0];
                let a0 = th[1];
                let phi_params = th.rows(2, q).into_owned();
                let t = th[d - 1];
                let c = contrast_fit.contrast_with(&phi_params, g[i]).unwrap_or(f64::NAN);
                let p = contrast_fit.prob_with(&phi_params, g[i]).unwrap_or(f64::NAN);
                let basis = contrast_fit.basis(g[i]).unwrap_or_else(|_| DVector::zeros(q));
                let mut m = DVector::zeros(d);
                m[0] = if a[i] == 0.0 { g[i] - mu0 } else { 0.0 };
                m[1] = if g[i] == 0.0 { a[i] - a0 } else { 0.0 };
                for j in 0..q {
                    m[2 + j] = basis[j] * (a[i] - p);
                }
                m[d - 1] = (g[i] - mu0) * (a[i] - a0) * y[i] * (-(c + t) * a[i]).exp();
                m
            }
        };
        let jac = {
            let (g, a, y) = (g.clone(), a.clone(), y.clone());
            move |th: &DVector<f64>, i: usize| -> DMatrix<f64> {
                let mu0 = th[0];
                let a0 = th[1];
                let phi_params = th.rows(2, q).into_owned();
                let t = th[d - 1];
                let c = contrast_fit.contrast_with(&phi_params, g[i]).unwrap_or(f64::NAN);
                let dc = contrast_fit
                    .contrast_deriv(&phi_params, g[i])
                    .unwrap_or_else(|_| DVector::zeros(q));
                let dp = contrast_fit
                    .prob_deriv(&phi_params, g[i])
                    .unwrap_or_else(|_| DVector::zeros(q));
                let basis = contrast_fit.basis(g[i]).unwrap_or_else(|_| DVector::zeros(q));
                let core = y[i] * (-(c + t) * a[i]).exp();
                let mut j = DMatrix::zeros(d, d);
                j[(0, 0)] = if a[i] == 0.0 { -1.0 } else { 0.0 };
                j[(1, 1)] = if g[i] == 0.0 { -1.0 } else { 0.0 };
                for r in 0..q {
                    for cc in 0..q {
                        j[(2 + r, 2 + cc)] = -basis[r] * dp[cc];
                    }
                }
                j[(d - 1, 0)] = -(a[i] - a0) * core;
                j[(d - 1, 1)] = -(g[i] - mu0) * core;
                let u = (g[i] - mu0) * (a[i] - a0) * core;
                for cc in 0..q {
                    j[(d - 1, 2 + cc)] = -u * a[i] * dc[cc];
                }
                j[(d - 1, d - 1)] = -u * a[i];
                j
            }
        };
        StackedSystem {
            n,
            theta: theta_vec,
            layout: vec![
                ("mu0".into(), 1),
                ("a0".into(), 1),
                ("phi".into(), q),
                ("theta".into(), 1),
            ],
            moment_dim: d,
            row: Box::new(row),
            jac: Box::new(jac),
            combiner: None,
            center_rows: None,
        }
    };

    let parts = sandwich(&system_for(theta.clone()))?;
    if !parts.bread_full_rank() {
        diag.warnings.push("sandwich bread rank deficient; pseudo-inverse used".into());
    }

    // causal-null test: variance of the mean moment at zero effect with the
    // nuisance influence removed
    let mut theta0 = theta.clone();
    theta0[d - 1] = 0.0;
    let sys0 = system_for(theta0.clone());
    let eta = d - 1;
    let mut b_eta = DMatrix::zeros(eta, eta);
    let mut c_row = DVector::zeros(eta);
    let mut rows_eta: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut u_vals: Vec<f64> = Vec::with_capacity(n);
    for i in 0..n {
        let m = (sys0.row)(&theta0, i);
        let j = (sys0.jac)(&theta0, i);
        rows_eta.push(m.rows(0, eta).into_owned());
        u_vals.push(m[eta]);
        for r in 0..eta {
            for c in 0..eta {
                b_eta[(r, c)] += j[(r, c)];
            }
        }
        for c in 0..eta {
            c_row[c] += j[(eta, c)];
        }
    }
    b_eta /= nf;
    c_row /= nf;
    let (b_inv, _) = crate::numeric::pseudo_inverse(&b_eta)?;
    let correction = b_inv.transpose() * c_row; // eta-vector: C B^{-1} applied per row
    let mut var = 0.0;
    for i in 0..n {
        let infl = u_vals[i] - correction.dot(&rows_eta[i]);
        var += infl * infl;
    }
    var /= nf;
    let se_null = (var / nf).sqrt();
    let z = if se_null > 0.0 { null_moment / se_null } else { 0.0 };
    let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
    use statrs::distribution::ContinuousCDF;
    let p_value = 2.0 * (1.0 - normal.cdf(z.abs()));
    Ok((parts.se(), NullTest { moment: null_moment, se: se_null, z, p_value }))
}

/// How the target-population moments are recovered from a case-control
/// sample.
#[derive(Debug, Clone, Copy)]
pub enum SamplingAdjustment {
    /// Approximate E(G) and E(A|G) by the control (Y = 0) subsample;
    /// appropriate when the outcome is rare.
    ControlsOnly,
    /// Inverse-probability-of-sampling weighting with known sampling
    /// fractions for cases and controls.
    Fractions { cases: f64, controls: f64 },
}

/// Compute the target-population moments used by the multiplicative-outcome
/// estimator under case-control sampling.
pub fn case_control_adjust(
    table: &ObservationTable,
    adjustment: SamplingAdjustment,
) -> Result<ExternalMoments> {
    let n = table.n();
    let g = table.g_col(0);
    let a = table.a();
    let y = table.y();
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Validation("case-control adjustment requires a binary outcome".into()));
    }
    let levels = distinct_levels(&g, DISCRETE_LEVEL_CAP).ok_or_else(|| {
        Error::Validation("case-control adjustment requires a discrete IV".into())
    })?;

    let weights: Vec<f64> = match adjustment {
        SamplingAdjustment::ControlsOnly => {
            if !y.iter().any(|v| *v == 0.0) {
                return Err(Error::Validation("no controls (Y = 0) in the sample".into()));
            }
            (0..n).map(|i| if y[i] == 0.0 { 1.0 } else { 0.0 }).collect()
        }
        SamplingAdjustment::Fractions { cases, controls } => {
            if cases <= 0.0 || controls <= 0.0 {
                return Err(Error::Validation("sampling fractions must be positive".into()));
            }
            (0..n).map(|i| if y[i] == 1.0 { 1.0 / cases } else { 1.0 / controls }).collect()
        }
    };
    let wsum: f64 = weights.iter().sum();
    let e_g = (0..n).map(|i| weights[i] * g[i]).sum::<f64>() / wsum;
    let mut map = Vec::with_capacity(levels.len());
    for &lvl in &levels {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            if g[i] == lvl {
                num += weights[i] * a[i];
                den += weights[i];
            }
        }
        if den == 0.0 {
            return Err(Error::Validation(format!(
                "no weighted observations at IV level {lvl}"
            )));
        }
        map.push((lvl, num / den));
    }
    let binary_a = table.exposure_kind() == ExposureKind::Binary;
    ExternalMoments::new(e_g, map, binary_a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table_from(g: Vec<f64>, a: Vec<f64>, y: Vec<f64>, kind: ExposureKind) -> ObservationTable {
        let n = g.len();
        ObservationTable::new(
            DMatrix::from_column_slice(n, 1, &g),
            DVector::from_vec(a),
            DVector::from_vec(y),
            kind,
            None,
            None,
        )
        .unwrap()
    }

    /// Binary-exposure fixture with heteroscedastic A|G and positive Y.
    fn mult_fixture(n: usize, seed: u64) -> ObservationTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let gi = if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 };
            let u: f64 = rng.gen::<f64>();
            let p = 0.25 + 0.35 * gi + 0.2 * (u - 0.5);
            let ai: f64 = if rng.gen::<f64>() < p { 1.0 } else { 0.0 };
            let base = 0.6 + 0.3 * u + 0.2 * gi;
            let yi = base * (0.4 * ai).exp() * (0.8 + 0.4 * rng.gen::<f64>());
            g.push(gi);
            a.push(ai);
            y.push(yi);
        }
        table_from(g, a, y, ExposureKind::Binary)
    }

    /// Independent grid + bisection root of the multiplicative-outcome
    /// moment, computed from raw columns.
    fn grid_root_mult_outcome(t: &ObservationTable) -> Option<f64> {
        let n = t.n();
        let g = t.g_col(0);
        let gbar = g.mean();
        // saturated E(A|G) by direct grouping
        let mut sums = std::collections::BTreeMap::new();
        for i in 0..n {
            let e = sums.entry(g[i].to_bits()).or_insert((0.0, 0.0));
            e.0 += t.a()[i];
            e.1 += 1.0;
        }
        let f = |beta: f64| -> f64 {
            (0..n)
                .map(|i| {
                    let (s, c) = sums[&g[i].to_bits()];
                    (g[i] - gbar) * (t.a()[i] - s / c) * t.y()[i] * (-beta * t.a()[i]).exp()
                })
                .sum::<f64>()
                / n as f64
        };
        let mut prev = f(-10.0);
        let mut prev_x = -10.0;
        let steps = 2000;
        for k in 1..=steps {
            let x = -10.0 + 20.0 * (k as f64) / steps as f64;
            let fx = f(x);
            if prev.signum() != fx.signum() {
                let (mut lo, mut hi) = (prev_x, x);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if f(lo).signum() == f(mid).signum() {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            prev = fx;
            prev_x = x;
        }
        None
    }

    #[test]
    fn mult_outcome_root_matches_grid_search() {
        let mut checked = 0;
        for seed in 1..=14_u64 {
            let t = mult_fixture(400, seed);
            let oracle = match grid_root_mult_outcome(&t) {
                Some(r) => r,
                None => continue,
            };
            let est = genius_mult_outcome(&t, None).unwrap();
            assert_abs_diff_eq!(est.beta_hat, oracle, epsilon = 1e-8);
            assert!(est.diagnostics.residual < 1e-8);
            checked += 1;
        }
        assert!(checked >= 10, "only {checked} fixtures had a bracketable root");
    }

    #[test]
    fn mult_outcome_scale_invariant_in_y() {
        let t = mult_fixture(300, 77);
        let est = genius_mult_outcome(&t, None).unwrap();
        let scaled = ObservationTable::new(
            t.g().clone(),
            t.a().clone(),
            t.y() * 3.7,
            ExposureKind::Binary,
            None,
            None,
        )
        .unwrap();
        let est2 = genius_mult_outcome(&scaled, None).unwrap();
        assert_abs_diff_eq!(est.beta_hat, est2.beta_hat, epsilon = 1e-8);
    }

    #[test]
    fn mult_outcome_constant_exposure_errors() {
        let t = table_from(
            vec![1.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0],
            vec![1.0, 2.0, 0.5, 1.5],
            ExposureKind::Binary,
        );
        assert!(matches!(genius_mult_outcome(&t, None), Err(Error::Identification(_))));
    }

    #[test]
    fn mult_exposure_exact_when_outcome_proportional() {
        let g = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let a = vec![3.0, 1.0, 0.0, 2.0, 5.0, 0.0, 2.0, 1.0];
        let c = 1.4;
        let y: Vec<f64> = a.iter().map(|v| c * v).collect();
        let t = table_from(g, a, y, ExposureKind::Count);
        let est = genius_mult_exposure(&t).unwrap();
        assert_abs_diff_eq!(est.beta_hat, c, epsilon = 1e-10);
    }

    #[test]
    fn mult_exposure_rare_binary_not_identified() {
        // prevalence ~1 percent: variance ratios coincide with mean ratios
        let mut g = Vec::new();
        let mut a = Vec::new();
        for i in 0..1000 {
            g.push(0.0);
            a.push(if i < 8 { 1.0 } else { 0.0 });
        }
        for i in 0..1000 {
            g.push(1.0);
            a.push(if i < 12 { 1.0 } else { 0.0 });
        }
        let y: Vec<f64> = a.iter().map(|v| 0.5 * v + 0.1).collect();
        let t = table_from(g, a, y, ExposureKind::Binary);
        assert!(matches!(genius_mult_exposure(&t), Err(Error::Identification(_))));
    }

    #[test]
    fn mult_exposure_recovers_overdispersed_count_effect() {
        // gamma-mixed Poisson exposure (negative binomial marginally), an
        // invalid IV with a direct outcome effect, and known beta = 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(5150);
        let n = 20_000;
        let mut gv = Vec::with_capacity(n);
        let mut av = Vec::with_capacity(n);
        let mut yv = Vec::with_capacity(n);
        for _ in 0..n {
            let g: f64 = if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 };
            // gamma(2, 0.5) via sum of two exponentials, mean 1
            let ua = -0.5 * (rng.gen::<f64>().ln() + rng.gen::<f64>().ln());
            let lambda = ua * (0.4 * g).exp();
            // poisson draw
            let mut k = 0.0;
            let mut p = rng.gen::<f64>();
            let l = (-lambda).exp();
            while p > l {
                p *= rng.gen::<f64>();
                k += 1.0;
            }
            let y = 0.5 * k + 0.3 * g + 0.7 * ua + 0.5 * (rng.gen::<f64>() - 0.5);
            gv.push(g);
            av.push(k);
            yv.push(y);
        }
        let t = table_from(gv, av, yv, ExposureKind::Count);
        let est = genius_mult_exposure(&t).unwrap();
        assert_abs_diff_eq!(est.beta_hat, 0.5, epsilon = 0.08);
    }

    #[test]
    fn mult_exposure_with_zero_varpi_degrades_to_marginal_additive_ratio() {
        let t = mult_fixture(200, 3);
        let (beta, _) = mult_exposure_ratio_at(&t, &DVector::zeros(1)).unwrap();
        // additive single-IV formula with the marginal mean as the
        // conditional-mean estimate
        let n = t.n();
        let g = t.g_col(0);
        let gbar = g.mean();
        let abar = t.a().mean();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            let w = (g[i] - gbar) * (t.a()[i] - abar);
            num += w * t.y()[i];
            den += w * t.a()[i];
        }
        assert_abs_diff_eq!(beta, num / den, epsilon = 1e-12);
    }

    /// Discrete joint law satisfying the odds-ratio model assumptions:
    /// G and U independent conditional on A = 0, no odds-ratio G-U
    /// interaction, outcome mean multiplicative in the exposure.
    fn odds_ratio_fixture(n: usize, beta_a: f64, seed: u64) -> ObservationTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // f(g,u|A=0) independent: g ~ Bern(0.45), u uniform over {0,1,2}
        // odds of A = 1: exp(chi0 + chi_g g + chi_u u)
        let (chi0, chi_g, chi_u): (f64, f64, f64) = (-0.6, 0.8, 0.35);
        let mut cells = Vec::new(); // (g, u, a, prob)
        let mut z = 0.0;
        for (g, pg) in [(0.0, 0.55), (1.0, 0.45)] {
            for u in [0.0, 1.0, 2.0] {
                let pu = 1.0 / 3.0;
                let odds = (chi0 + chi_g * g + chi_u * u).exp();
                // joint over (a,g,u) proportional to f(g|0) f(u|0) exp(a * ...)
                let w0 = pg * pu;
                let w1 = pg * pu * odds;
                cells.push((g, u, 0.0, w0));
                cells.push((g, u, 1.0, w1));
                z += w0 + w1;
            }
        }
        for c in &mut cells {
            c.3 /= z;
        }
        let mut gv = Vec::with_capacity(n);
        let mut av = Vec::with_capacity(n);
        let mut yv = Vec::with_capacity(n);
        for _ in 0..n {
            let mut r = rng.gen::<f64>();
            let mut chosen = cells[cells.len() - 1];
            for c in &cells {
                if r < c.3 {
                    chosen = *c;
                    break;
                }
                r -= c.3;
            }
            let (g, u, a, _) = chosen;
            // E(Y|A=0,G,U) = beta_g(G) + beta_u(U), with beta_g(0) = 0
            let base = 0.08 * g + 0.05 + 0.04 * u;
            let mean_y = (beta_a * a).exp() * base;
            let y = if rng.gen::<f64>() < mean_y { 1.0 } else { 0.0 };
            gv.push(g);
            av.push(a);
            yv.push(y);
        }
        table_from(gv, av, yv, ExposureKind::Binary)
    }

    #[test]
    fn odds_ratio_closed_form_matches_grid_root() {
        let t = odds_ratio_fixture(4000, 0.4, 8);
        let est = genius_odds_ratio(&t).unwrap();

        // independent grid + bisection root of the defining moment
        let n = t.n();
        let g = t.g_col(0);
        let a = t.a();
        let y = t.y();
        let controls: Vec<usize> = (0..n).filter(|&i| a[i] == 0.0).collect();
        let mu0 = controls.iter().map(|&i| g[i]).sum::<f64>() / controls.len() as f64;
        let g0: Vec<usize> = (0..n).filter(|&i| g[i] == 0.0).collect();
        let a0 = g0.iter().map(|&i| a[i]).sum::<f64>() / g0.len() as f64;
        let p1 = {
            let rows: Vec<usize> = (0..n).filter(|&i| g[i] == 1.0).collect();
            rows.iter().map(|&i| a[i]).sum::<f64>() / rows.len() as f64
        };
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let phi1 = logit(p1) - logit(a0);
        let f = |th: f64| -> f64 {
            (0..n)
                .map(|i| {
                    let phi = if g[i] == 1.0 { phi1 } else { 0.0 };
                    (g[i] - mu0) * (a[i] - a0) * y[i] * (-(phi + th) * a[i]).exp()
                })
                .sum::<f64>()
                / n as f64
        };
        let (mut lo, mut hi) = (-5.0, 5.0);
        assert!(f(lo).signum() != f(hi).signum());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo).signum() == f(mid).signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        assert_abs_diff_eq!(est.beta_hat, oracle, epsilon = 1e-8);
    }

    #[test]
    fn odds_ratio_recovers_simulated_effect() {
        let t = odds_ratio_fixture(60_000, 0.4, 21);
        let est = genius_odds_ratio(&t).unwrap();
        assert_abs_diff_eq!(est.beta_hat, 0.4, epsilon = 3.0 * est.se.max(0.02));
        assert!(est.diagnostics.null_test.is_some());
    }

    #[test]
    fn odds_ratio_unidentified_when_direct_effects_vanish() {
        // exactly balanced cells with Y proportional to A make the
        // denominator moment identically zero
        let mut g = Vec::new();
        let mut a = Vec::new();
        let mut y = Vec::new();
        for (gi, ai) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
            for _ in 0..25 {
                g.push(gi);
                a.push(ai);
                y.push(ai); // Y = A
            }
        }
        let t = table_from(g, a, y, ExposureKind::Binary);
        assert!(matches!(genius_odds_ratio(&t), Err(Error::Identification(_))));
    }

    #[test]
    fn case_control_full_fractions_match_full_sample() {
        let t = mult_fixture(500, 13);
        let ext =
            case_control_adjust(&t, SamplingAdjustment::Fractions { cases: 1.0, controls: 1.0 });
        // outcome is continuous here, so the adjustment must refuse
        assert!(ext.is_err());

        // binary-outcome fixture
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400;
        let mut gv = Vec::new();
        let mut av = Vec::new();
        let mut yv = Vec::new();
        for _ in 0..n {
            let g: f64 = if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 };
            let a: f64 = if rng.gen::<f64>() < 0.3 + 0.3 * g { 1.0 } else { 0.0 };
            let y: f64 = if rng.gen::<f64>() < 0.2 + 0.2 * a { 1.0 } else { 0.0 };
            gv.push(g);
            av.push(a);
            yv.push(y);
        }
        let t = table_from(gv.clone(), av.clone(), yv, ExposureKind::Binary);
        let ext = case_control_adjust(
            &t,
            SamplingAdjustment::Fractions { cases: 1.0, controls: 1.0 },
        )
        .unwrap();
        let e_g = gv.iter().sum::<f64>() / n as f64;
        assert_abs_diff_eq!(ext.e_g, e_g, epsilon = 1e-12);
        for (lvl, m) in &ext.e_a_given_g {
            let rows: Vec<usize> = (0..n).filter(|&i| gv[i] == *lvl).collect();
            let mean = rows.iter().map(|&i| av[i]).sum::<f64>() / rows.len() as f64;
            assert_abs_diff_eq!(*m, mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn controls_only_moments_match_subgroup_arithmetic() {
        let g = vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let a = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let y = vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        let t = table_from(g, a, y, ExposureKind::Binary);
        let ext = case_control_adjust(&t, SamplingAdjustment::ControlsOnly).unwrap();
        // controls are rows 0..4: G = (1,1,0,0), A = (1,0,1,0)
        assert_abs_diff_eq!(ext.e_g, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ext.lookup(1.0).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ext.lookup(0.0).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn no_controls_is_an_error() {
        let t = table_from(
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            ExposureKind::Binary,
        );
        assert!(case_control_adjust(&t, SamplingAdjustment::ControlsOnly).is_err());
    }
}
