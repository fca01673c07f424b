//! Additive-scale heteroscedasticity-based IV estimators: the closed-form
//! single-IV ratio, its generated-instrument two-stage equivalent, the
//! covariate-adjusted estimating equation, multi-IV GMM with optional
//! optimal weighting, and the efficiency-augmented variant.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{relevance_diagnostic, ObservationTable};
use crate::error::{Error, Result};
use crate::inference::{sandwich, wald_ci, SandwichParts, StackedSystem};
use crate::nuisance::{fit_conditional_mean, fit_exposure_mean, FittedMean, NuisancePolicy};
use crate::numeric::pseudo_inverse;

/// Relative tolerance below which an estimating-equation denominator is
/// treated as zero and identification is declared to fail.
const IDENT_REL_TOL: f64 = 1e-10;

/// Default confidence level for reported intervals.
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Point estimate with sandwich standard error and Wald interval.
#[derive(Debug, Clone, Serialize)]
pub struct CausalEstimate {
    /// Effect on the outcome-mean scale per unit exposure.
    pub beta_hat: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub level: f64,
    pub method: String,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    /// First-stage heteroscedasticity diagnostic; for several IVs, the
    /// entry smallest in absolute value.
    pub phi_hat: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Residual of the estimating equation (closed forms) or the final GMM
    /// objective value.
    pub objective: f64,
    pub n: usize,
    pub p: usize,
    pub warnings: Vec<String>,
}

/// Options shared by the additive estimators.
#[derive(Debug, Clone, Copy)]
pub struct GeniusOptions {
    pub policy: NuisancePolicy,
    pub level: f64,
}

impl Default for GeniusOptions {
    fn default() -> Self {
        Self { policy: NuisancePolicy::Auto, level: DEFAULT_LEVEL }
    }
}

fn base_diagnostics(table: &ObservationTable) -> (Diagnostics, Vec<String>) {
    let rel = relevance_diagnostic(table);
    let phi = rel
        .per_iv
        .iter()
        .map(|d| d.phi_hat)
        .min_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
    let mut warnings = Vec::new();
    if rel.any_weak() {
        warnings.push(
            "weak identification: |phi|/se below threshold for at least one IV".to_string(),
        );
    }
    let diag = Diagnostics {
        phi_hat: phi,
        n: table.n(),
        p: table.p(),
        ..Default::default()
    };
    (diag, warnings)
}

fn ratio_or_identification_error(num: f64, den: f64, scale: f64) -> Result<f64> {
    if scale == 0.0 || den.abs() <= IDENT_REL_TOL * scale {
        return Err(Error::Identification(
            "estimating-equation denominator is numerically zero; cov{G, var(A|G)} = 0 \
             means the heteroscedasticity condition fails"
                .into(),
        ));
    }
    Ok(num / den)
}

/// Closed-form single-IV estimator: the ratio of the centered-instrument,
/// residualized-exposure moments of Y and of A.
pub fn genius_single(table: &ObservationTable) -> Result<CausalEstimate> {
    genius_single_opts(table, &GeniusOptions::default())
}

pub fn genius_single_opts(
    table: &ObservationTable,
    opts: &GeniusOptions,
) -> Result<CausalEstimate> {
    genius_single_with_vcov(table, opts).map(|(est, _)| est)
}

/// Single-IV estimate together with the full stacked sandwich.
pub fn genius_single_with_vcov(
    table: &ObservationTable,
    opts: &GeniusOptions,
) -> Result<(CausalEstimate, SandwichParts)> {
    if table.p() != 1 {
        return Err(Error::Validation(format!(
            "single-IV estimator requires exactly one IV column, got {}",
            table.p()
        )));
    }
    let fit = fit_exposure_mean(table, opts.policy)?;
    let (mut diag, warnings) = base_diagnostics(table);
    diag.warnings = warnings;

    let (beta, residual) = single_ratio(table, &fit)?;
    let parts = crate::inference::sandwich_single(table, &fit, beta)?;
    if !parts.bread_full_rank() {
        diag.warnings.push("sandwich bread rank deficient; pseudo-inverse used".into());
    }
    diag.converged = true;
    diag.iterations = 0;
    diag.objective = residual;
    let se = parts.se();
    let est = CausalEstimate {
        beta_hat: beta,
        se,
        ci: wald_ci(beta, se, opts.level),
        level: opts.level,
        method: "genius".into(),
        diagnostics: diag,
    };
    Ok((est, parts))
}

/// The single-IV ratio together with the residual of its defining moment.
fn single_ratio(table: &ObservationTable, fit: &FittedMean) -> Result<(f64, f64)> {
    let n = table.n();
    let nf = n as f64;
    let g = table.g_col(0);
    let g_bar = g.mean();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut scale = 0.0;
    for i in 0..n {
        let w = (g[i] - g_bar) * (table.a()[i] - fit.predict(i));
        num += w * table.y()[i];
        den += w * table.a()[i];
        scale += (w * table.a()[i]).abs();
    }
    num /= nf;
    den /= nf;
    scale /= nf;
    let beta = ratio_or_identification_error(num, den, scale)?;
    // residual of the estimating equation at the solution
    let residual = (num - beta * den).abs();
    Ok((beta, residual))
}

/// Two-step generated-instrument implementation: least-squares residuals of
/// the exposure on the instrument, then two-stage least squares of the
/// outcome on the exposure instrumented by the centered-instrument times
/// the residual. Numerically identical to `genius_single` with a linear
/// exposure model.
pub fn genius_single_lewbel(table: &ObservationTable) -> Result<CausalEstimate> {
    genius_single_lewbel_opts(table, DEFAULT_LEVEL)
}

pub fn genius_single_lewbel_opts(table: &ObservationTable, level: f64) -> Result<CausalEstimate> {
    if table.p() != 1 {
        return Err(Error::Validation("the two-step estimator requires a single IV".into()));
    }
    let fit = fit_exposure_mean(table, NuisancePolicy::Linear)?;
    let (mut diag, warnings) = base_diagnostics(table);
    diag.warnings = warnings;

    let n = table.n();
    let g = table.g_col(0);
    let g_bar = g.mean();
    let a = table.a();
    let y = table.y();
    let z: Vec<f64> = (0..n).map(|i| (g[i] - g_bar) * (a[i] - fit.predict(i))).collect();
    let z_bar = z.iter().sum::<f64>() / n as f64;
    let a_bar = a.mean();
    let y_bar = y.mean();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut scale = 0.0;
    for i in 0..n {
        num += (z[i] - z_bar) * (y[i] - y_bar);
        den += (z[i] - z_bar) * (a[i] - a_bar);
        scale += ((z[i] - z_bar) * (a[i] - a_bar)).abs();
    }
    let beta = ratio_or_identification_error(num, den, scale)?;
    let parts = crate::inference::sandwich_single(table, &fit, beta)?;
    diag.converged = true;
    diag.objective = (num / n as f64 - beta * den / n as f64).abs();
    let se = parts.se();
    Ok(CausalEstimate {
        beta_hat: beta,
        se,
        ci: wald_ci(beta, se, level),
        level,
        method: "genius-lewbel".into(),
        diagnostics: diag,
    })
}

/// Transformation of the covariates entering the covariate-adjusted
/// estimating equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovariateTransform {
    /// h(C) = 1.
    #[default]
    Unit,
    /// h(C) = the given covariate column.
    Column(usize),
}

/// Covariate-adjusted single-IV estimator: solves the estimating equation
/// with both the instrument and the exposure residualized on covariates.
pub fn genius_covariates(
    table: &ObservationTable,
    h: CovariateTransform,
) -> Result<CausalEstimate> {
    genius_covariates_opts(table, h, &GeniusOptions::default())
}

pub fn genius_covariates_opts(
    table: &ObservationTable,
    h: CovariateTransform,
    opts: &GeniusOptions,
) -> Result<CausalEstimate> {
    if table.p() != 1 {
        return Err(Error::Validation("covariate-adjusted estimator requires a single IV".into()));
    }
    let c = table
        .c()
        .ok_or_else(|| Error::Validation("covariate-adjusted estimator requires covariates".into()))?;
    if let CovariateTransform::Column(j) = h {
        if j >= c.ncols() {
            return Err(Error::Validation(format!(
                "h refers to covariate column {j} but only {} exist",
                c.ncols()
            )));
        }
    }
    let n = table.n();
    let g = table.g_col(0);
    let g_binary = g.iter().all(|v| *v == 0.0 || *v == 1.0);
    let eg_fit = fit_conditional_mean(c, &g, g_binary, opts.policy)?;

    // E(A | G, C) over the combined design
    let gc = {
        let mut m = DMatrix::zeros(n, 1 + c.ncols());
        for i in 0..n {
            m[(i, 0)] = g[i];
            for j in 0..c.ncols() {
                m[(i, 1 + j)] = c[(i, j)];
            }
        }
        m
    };
    let a_binary = table.exposure_kind() == crate::data::ExposureKind::Binary;
    let ea_fit = fit_conditional_mean(&gc, table.a(), a_binary, opts.policy)?;

    let h_val = |i: usize| -> f64 {
        match h {
            CovariateTransform::Unit => 1.0,
            CovariateTransform::Column(j) => c[(i, j)],
        }
    };

    let a = table.a();
    let y = table.y();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut scale = 0.0;
    for i in 0..n {
        let w = h_val(i) * (g[i] - eg_fit.predict(i)) * (a[i] - ea_fit.predict(i));
        num += w * y[i];
        den += w * a[i];
        scale += (w * a[i]).abs();
    }
    let beta = ratio_or_identification_error(num, den, scale)?;

    let (mut diag, warnings) = base_diagnostics(table);
    diag.warnings = warnings;
    diag.converged = true;
    diag.objective = ((num - beta * den) / n as f64).abs();

    let parts = covariates_sandwich(table, &eg_fit, &ea_fit, &h_val, beta)?;
    if !parts.bread_full_rank() {
        diag.warnings.push("sandwich bread rank deficient; pseudo-inverse used".into());
    }
    let se = parts.se();
    Ok(CausalEstimate {
        beta_hat: beta,
        se,
        ci: wald_ci(beta, se, opts.level),
        level: opts.level,
        method: "genius-covariates".into(),
        diagnostics: diag,
    })
}

/// Stacked sandwich for the covariate-adjusted estimator: scores of the
/// instrument and exposure conditional-mean fits plus the IV moment.
fn covariates_sandwich(
    table: &ObservationTable,
    eg_fit: &FittedMean,
    ea_fit: &FittedMean,
    h_val: &dyn Fn(usize) -> f64,
    beta_hat: f64,
) -> Result<SandwichParts> {
    let n = table.n();
    let q1 = eg_fit.param_count();
    let q2 = ea_fit.param_count();
    let d = q1 + q2 + 1;
    let g = table.g_col(0);
    let a = table.a().clone();
    let y = table.y().clone();
    let mut theta = DVector::zeros(d);
    theta.rows_mut(0, q1).copy_from(&eg_fit.params());
    theta.rows_mut(q1, q2).copy_from(&ea_fit.params());
    theta[d - 1] = beta_hat;
    let h: Vec<f64> = (0..n).map(h_val).collect();

    let row = {
        let (g, a, y, h) = (g.clone(), a.clone(), y.clone(), h.clone());
        move |theta: &DVector<f64>, i: usize| -> DVector<f64> {
            let omega = theta.rows(0, q1).into_owned();
            let psi = theta.rows(q1, q2).into_owned();
            let beta = theta[d - 1];
            let eg = eg_fit.predict_with(&omega, i);
            let ea = ea_fit.predict_with(&psi, i);
            let mut m = DVector::zeros(d);
            let bg = eg_fit.basis(i);
            for j in 0..q1 {
                m[j] = bg[j] * (g[i] - eg);
            }
            let ba = ea_fit.basis(i);
            for j in 0..q2 {
                m[q1 + j] = ba[j] * (a[i] - ea);
            }
            m[d - 1] = h[i] * (g[i] - eg) * (a[i] - ea) * (y[i] - beta * a[i]);
            m
        }
    };
    let jac = move |theta: &DVector<f64>, i: usize| -> DMatrix<f64> {
        let omega = theta.rows(0, q1).into_owned();
        let psi = theta.rows(q1, q2).into_owned();
        let beta = theta[d - 1];
        let eg = eg_fit.predict_with(&omega, i);
        let ea = ea_fit.predict_with(&psi, i);
        let dg = eg_fit.mean_deriv_with(&omega, i);
        let da = ea_fit.mean_deriv_with(&psi, i);
        let bg = eg_fit.basis(i);
        let ba = ea_fit.basis(i);
        let g_res = g[i] - eg;
        let a_res = a[i] - ea;
        let y_res = y[i] - beta * a[i];
        let mut jrow = DMatrix::zeros(d, d);
        for r in 0..q1 {
            for c in 0..q1 {
                jrow[(r, c)] = -bg[r] * dg[c];
            }
        }
        for r in 0..q2 {
            for c in 0..q2 {
                jrow[(q1 + r, q1 + c)] = -ba[r] * da[c];
            }
        }
        for c in 0..q1 {
            jrow[(d - 1, c)] = -h[i] * dg[c] * a_res * y_res;
        }
        for c in 0..q2 {
            jrow[(d - 1, q1 + c)] = -h[i] * g_res * da[c] * y_res;
        }
        jrow[(d - 1, d - 1)] = -h[i] * g_res * a_res * a[i];
        jrow
    };

    sandwich(&StackedSystem {
        n,
        theta,
        layout: vec![("omega".into(), q1), ("psi".into(), q2), ("beta".into(), 1)],
        moment_dim: d,
        row: Box::new(row),
        jac: Box::new(jac),
        combiner: None,
        center_rows: None,
    })
}

/// Weighting scheme for the GMM estimator.
#[derive(Debug, Clone, Default)]
pub enum WeightScheme {
    Identity,
    /// Identity-weight first pass, then the generalized inverse of the
    /// (optionally centered) moment outer product.
    #[default]
    TwoStepOptimal,
    /// Alternate between the estimate and the optimal weight up to the cap.
    Iterated { max_rounds: usize },
    /// User-supplied symmetric positive-semidefinite weight.
    Fixed(DMatrix<f64>),
}

/// Instrument transformation entering the GMM moments.
#[derive(Debug, Clone, Default)]
pub enum InstrumentTransform {
    /// h(G) = G, one moment per IV column.
    #[default]
    Identity,
    /// h(G) = the selected IV columns.
    Columns(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct GmmConfig {
    pub h: InstrumentTransform,
    pub weight: WeightScheme,
    /// Center the IV moments when estimating the optimal weight and the
    /// covariance.
    pub center_moments: bool,
    pub policy: NuisancePolicy,
    pub level: f64,
    /// Convergence tolerance on the parameter for iterated weighting.
    pub tol: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            h: InstrumentTransform::Identity,
            weight: WeightScheme::TwoStepOptimal,
            center_moments: true,
            policy: NuisancePolicy::Auto,
            level: DEFAULT_LEVEL,
            tol: 1e-10,
        }
    }
}

/// Per-row IV moment ingredients: u_i = w_i y_i and v_i = w_i a_i with
/// w_i the centered instruments times the exposure residual.
struct MomentParts {
    u: Vec<DVector<f64>>,
    v: Vec<DVector<f64>>,
    u_bar: DVector<f64>,
    v_bar: DVector<f64>,
    v_abs_bar: DVector<f64>,
}

fn moment_parts(
    table: &ObservationTable,
    fit: &FittedMean,
    columns: &[usize],
) -> MomentParts {
    let n = table.n();
    let nf = n as f64;
    let k = columns.len();
    let g = table.g();
    let g_bar: Vec<f64> = columns.iter().map(|&j| g.column(j).sum() / nf).collect();
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut u_bar = DVector::zeros(k);
    let mut v_bar = DVector::zeros(k);
    let mut v_abs_bar = DVector::zeros(k);
    for i in 0..n {
        let resid = table.a()[i] - fit.predict(i);
        let mut ui = DVector::zeros(k);
        let mut vi = DVector::zeros(k);
        for (idx, &j) in columns.iter().enumerate() {
            let w = (g[(i, j)] - g_bar[idx]) * resid;
            ui[idx] = w * table.y()[i];
            vi[idx] = w * table.a()[i];
        }
        u_bar += &ui;
        v_bar += &vi;
        v_abs_bar += vi.abs();
        u.push(ui);
        v.push(vi);
    }
    u_bar /= nf;
    v_bar /= nf;
    v_abs_bar /= nf;
    MomentParts { u, v, u_bar, v_bar, v_abs_bar }
}

/// The moments are linear in the parameter, so the quadratic GMM objective
/// has the closed-form minimizer (v' W u) / (v' W v).
fn gmm_minimizer(parts: &MomentParts, weight: &DMatrix<f64>) -> Result<f64> {
    let num = (parts.v_bar.transpose() * weight * &parts.u_bar)[(0, 0)];
    let den = (parts.v_bar.transpose() * weight * &parts.v_bar)[(0, 0)];
    let w_abs = weight.abs();
    let scale = (parts.v_abs_bar.transpose() * w_abs * &parts.v_abs_bar)[(0, 0)];
    if scale == 0.0 || den.abs() <= IDENT_REL_TOL * scale {
        return Err(Error::Identification(
            "GMM objective has a singular second derivative at the solution; the \
             heteroscedasticity condition fails for every instrument"
                .into(),
        ));
    }
    Ok(num / den)
}

fn gmm_objective(parts: &MomentParts, weight: &DMatrix<f64>, beta: f64) -> f64 {
    let m = &parts.u_bar - &parts.v_bar * beta;
    (m.transpose() * weight * &m)[(0, 0)]
}

/// Optimal weight: generalized inverse of the (optionally centered) moment
/// outer product at the given parameter value. Returns the weight and its
/// numerical rank.
fn optimal_weight(
    parts: &MomentParts,
    beta: f64,
    center: bool,
) -> Result<(DMatrix<f64>, usize)> {
    let k = parts.u_bar.len();
    let n = parts.u.len();
    let nf = n as f64;
    let mean = if center {
        &parts.u_bar - &parts.v_bar * beta
    } else {
        DVector::zeros(k)
    };
    let mut omega = DMatrix::zeros(k, k);
    for i in 0..n {
        let m = &parts.u[i] - &parts.v[i] * beta - &mean;
        omega += &m * m.transpose();
    }
    omega /= nf;
    pseudo_inverse(&omega)
}

/// Multi-IV GMM estimator; with a single IV and any weight it collapses to
/// the closed-form ratio.
pub fn genius_gmm(table: &ObservationTable, config: &GmmConfig) -> Result<CausalEstimate> {
    genius_gmm_with_vcov(table, config).map(|(est, _)| est)
}

/// GMM estimate together with the full stacked sandwich.
pub fn genius_gmm_with_vcov(
    table: &ObservationTable,
    config: &GmmConfig,
) -> Result<(CausalEstimate, SandwichParts)> {
    let columns: Vec<usize> = match &config.h {
        InstrumentTransform::Identity => (0..table.p()).collect(),
        InstrumentTransform::Columns(cols) => {
            for &j in cols {
                if j >= table.p() {
                    return Err(Error::Validation(format!(
                        "instrument transform selects column {j} but table has {} IVs",
                        table.p()
                    )));
                }
            }
            cols.clone()
        }
    };
    let k = columns.len();
    if k == 0 {
        return Err(Error::Validation("moment dimension must be at least 1".into()));
    }
    let fit = fit_exposure_mean(table, config.policy)?;
    let parts = moment_parts(table, &fit, &columns);
    let (mut diag, warnings) = base_diagnostics(table);
    diag.warnings = warnings;

    let identity = DMatrix::identity(k, k);
    let (beta, final_weight, rounds) = match &config.weight {
        WeightScheme::Identity => {
            let b = gmm_minimizer(&parts, &identity)?;
            (b, identity.clone(), 1)
        }
        WeightScheme::Fixed(w) => {
            validate_weight(w, k)?;
            let b = gmm_minimizer(&parts, w)?;
            (b, w.clone(), 1)
        }
        WeightScheme::TwoStepOptimal => {
            let b0 = gmm_minimizer(&parts, &identity)?;
            let (w, rank) = optimal_weight(&parts, b0, config.center_moments)?;
            if rank == 0 {
                // residual moments identically zero: the first step already
                // solves every moment exactly
                diag.warnings.push("moment covariance degenerate; identity weight retained".into());
                (b0, identity.clone(), 1)
            } else {
                if rank < k {
                    diag.warnings
                        .push(format!("optimal weight rank {rank} < {k}; pseudo-inverse used"));
                }
                let b = gmm_minimizer(&parts, &w)?;
                (b, w, 2)
            }
        }
        WeightScheme::Iterated { max_rounds } => {
            let cap = (*max_rounds).min(10).max(1);
            let mut b = gmm_minimizer(&parts, &identity)?;
            let mut w = identity.clone();
            let mut rounds = 1;
            for _ in 0..cap {
                let (w_new, rank) = optimal_weight(&parts, b, config.center_moments)?;
                if rank == 0 {
                    diag.warnings
                        .push("moment covariance degenerate; identity weight retained".into());
                    break;
                }
                if rank < k {
                    diag.warnings
                        .push(format!("optimal weight rank {rank} < {k}; pseudo-inverse used"));
                }
                let b_new = gmm_minimizer(&parts, &w_new)?;
                rounds += 1;
                w = w_new;
                let done = (b_new - b).abs() <= config.tol * (1.0 + b.abs());
                b = b_new;
                if done {
                    break;
                }
            }
            (b, w, rounds)
        }
    };

    diag.converged = true;
    diag.iterations = rounds;
    diag.objective = gmm_objective(&parts, &final_weight, beta);

    if k != table.p() {
        // sandwich machinery follows the identity transform; restrict the
        // table columns accordingly
        diag.warnings.push("variance computed over the selected instrument columns".into());
    }
    let se_table;
    let se_fit;
    let (table_ref, fit_ref) = if k == table.p() {
        (table, &fit)
    } else {
        let mut gsub = DMatrix::zeros(table.n(), k);
        for (idx, &j) in columns.iter().enumerate() {
            for i in 0..table.n() {
                gsub[(i, idx)] = table.g()[(i, j)];
            }
        }
        se_table = ObservationTable::new(
            gsub,
            table.a().clone(),
            table.y().clone(),
            table.exposure_kind(),
            None,
            table.c().cloned(),
        )?;
        se_fit = fit_exposure_mean(&se_table, config.policy)?;
        (&se_table, &se_fit)
    };
    let parts_sw = crate::inference::sandwich_gmm(
        table_ref,
        fit_ref,
        &final_weight,
        beta,
        config.center_moments,
    )?;
    if !parts_sw.bread_full_rank() {
        diag.warnings.push("sandwich bread rank deficient; pseudo-inverse used".into());
    }
    let se = parts_sw.se();
    let est = CausalEstimate {
        beta_hat: beta,
        se,
        ci: wald_ci(beta, se, config.level),
        level: config.level,
        method: "genius-gmm".into(),
        diagnostics: diag,
    };
    Ok((est, parts_sw))
}

fn validate_weight(w: &DMatrix<f64>, k: usize) -> Result<()> {
    if w.nrows() != k || w.ncols() != k {
        return Err(Error::Validation(format!("weight matrix must be {k}x{k}")));
    }
    let max = w.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    for r in 0..k {
        for c in 0..k {
            if (w[(r, c)] - w[(c, r)]).abs() > 1e-8 * max {
                return Err(Error::Validation("weight matrix must be symmetric".into()));
            }
        }
    }
    let eig = w.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|l| *l < -1e-8 * max) {
        return Err(Error::Validation("weight matrix must be positive semidefinite".into()));
    }
    Ok(())
}

/// Outcome scale for the efficiency-augmented estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EfficientScale {
    #[default]
    Additive,
    Multiplicative,
}

/// Efficiency-augmented estimator: a first-pass estimate defines a
/// treatment-free outcome, its regression on the instruments is subtracted
/// from (or, on the multiplicative scale, divides) the outcome inside the
/// estimating equation, and the equation is re-solved.
pub fn genius_efficient(
    table: &ObservationTable,
    scale: EfficientScale,
) -> Result<CausalEstimate> {
    genius_efficient_opts(table, scale, &GeniusOptions::default())
}

pub fn genius_efficient_opts(
    table: &ObservationTable,
    scale: EfficientScale,
    opts: &GeniusOptions,
) -> Result<CausalEstimate> {
    match scale {
        EfficientScale::Additive => efficient_additive(table, opts),
        EfficientScale::Multiplicative => efficient_multiplicative(table, opts),
    }
}

fn first_pass(table: &ObservationTable, opts: &GeniusOptions) -> Result<CausalEstimate> {
    if table.p() == 1 {
        genius_single_opts(table, opts)
    } else {
        let config = GmmConfig { policy: opts.policy, level: opts.level, ..Default::default() };
        genius_gmm(table, &config)
    }
}

fn efficient_additive(table: &ObservationTable, opts: &GeniusOptions) -> Result<CausalEstimate> {
    let initial = first_pass(table, opts)?;
    let beta_init = initial.beta_hat;
    let n = table.n();
    let y0 = DVector::from_fn(n, |i, _| table.y()[i] - beta_init * table.a()[i]);

    let mu_fit = match fit_conditional_mean(table.g(), &y0, false, opts.policy) {
        Ok(fit) => fit,
        Err(e) => {
            let mut est = initial;
            est.diagnostics
                .warnings
                .push(format!("treatment-free outcome regression failed ({e}); plain estimate returned"));
            return Ok(est);
        }
    };

    let fit = fit_exposure_mean(table, opts.policy)?;
    let k = table.p();
    let columns: Vec<usize> = (0..k).collect();
    let parts = moment_parts_offset(table, &fit, &columns, &mu_fit);
    let identity = DMatrix::identity(k, k);
    let (beta, weight) = if k == 1 {
        (gmm_minimizer(&parts, &identity)?, identity)
    } else {
        let b0 = gmm_minimizer(&parts, &identity)?;
        let (w, rank) = optimal_weight(&parts, b0, true)?;
        if rank == 0 {
            (b0, identity)
        } else {
            (gmm_minimizer(&parts, &w)?, w)
        }
    };

    let mut diag = initial.diagnostics.clone();
    diag.converged = true;
    diag.objective = gmm_objective(&parts, &weight, beta);

    let parts_sw = efficient_sandwich(table, &fit, &mu_fit, &y0, &weight, beta)?;
    if !parts_sw.bread_full_rank() {
        diag.warnings.push("sandwich bread rank deficient; pseudo-inverse used".into());
    }
    let se = parts_sw.se();
    Ok(CausalEstimate {
        beta_hat: beta,
        se,
        ci: wald_ci(beta, se, opts.level),
        level: opts.level,
        method: "genius-efficient".into(),
        diagnostics: diag,
    })
}

/// Moment ingredients with the fitted treatment-free mean subtracted from
/// the outcome: u_i = w_i (y_i - mu_i), v_i = w_i a_i.
fn moment_parts_offset(
    table: &ObservationTable,
    fit: &FittedMean,
    columns: &[usize],
    mu_fit: &FittedMean,
) -> MomentParts {
    let n = table.n();
    let nf = n as f64;
    let k = columns.len();
    let g = table.g();
    let g_bar: Vec<f64> = columns.iter().map(|&j| g.column(j).sum() / nf).collect();
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut u_bar = DVector::zeros(k);
    let mut v_bar = DVector::zeros(k);
    let mut v_abs_bar = DVector::zeros(k);
    for i in 0..n {
        let resid = table.a()[i] - fit.predict(i);
        let y_off = table.y()[i] - mu_fit.predict(i);
        let mut ui = DVector::zeros(k);
        let mut vi = DVector::zeros(k);
        for (idx, &j) in columns.iter().enumerate() {
            let w = (g[(i, j)] - g_bar[idx]) * resid;
            ui[idx] = w * y_off;
            vi[idx] = w * table.a()[i];
        }
        u_bar += &ui;
        v_bar += &vi;
        v_abs_bar += vi.abs();
        u.push(ui);
        v.push(vi);
    }
    u_bar /= nf;
    v_bar /= nf;
    v_abs_bar /= nf;
    MomentParts { u, v, u_bar, v_bar, v_abs_bar }
}

/// Stacked sandwich for the efficient estimator. The first-pass estimate
/// inside the treatment-free outcome is treated as fixed; only the
/// instrument means, the exposure model, the outcome regression, and the
/// final parameter are stacked.
fn efficient_sandwich(
    table: &ObservationTable,
    exposure_fit: &FittedMean,
    mu_fit: &FittedMean,
    y0_target: &DVector<f64>,
    weight: &DMatrix<f64>,
    beta_hat: f64,
) -> Result<SandwichParts> {
    let n = table.n();
    let nf = n as f64;
    let k = table.p();
    let q = exposure_fit.param_count();
    let r = mu_fit.param_count();
    let d = k + q + r + 1;
    let md = k + q + r + k;
    let g = table.g().clone();
    let a = table.a().clone();
    let y = table.y().clone();
    let y0 = y0_target.clone();

    let mut theta = DVector::zeros(d);
    for j in 0..k {
        theta[j] = g.column(j).sum() / nf;
    }
    theta.rows_mut(k, q).copy_from(&exposure_fit.params());
    theta.rows_mut(k + q, r).copy_from(&mu_fit.params());
    theta[d - 1] = beta_hat;

    let mut lambda = DVector::zeros(k);
    for i in 0..n {
        let resid = a[i] - exposure_fit.predict(i);
        for j in 0..k {
            lambda[j] -= (g[(i, j)] - theta[j]) * resid * a[i];
        }
    }
    lambda /= nf;
    let lw = lambda.transpose() * weight;
    let mut combiner = DMatrix::zeros(d, md);
    for rr in 0..(k + q + r) {
        combiner[(rr, rr)] = 1.0;
    }
    for c in 0..k {
        combiner[(d - 1, k + q + r + c)] = lw[c];
    }

    let row = {
        let (g, a, y, y0) = (g.clone(), a.clone(), y.clone(), y0.clone());
        move |theta: &DVector<f64>, i: usize| -> DVector<f64> {
            let psi = theta.rows(k, q).into_owned();
            let gamma = theta.rows(k + q, r).into_owned();
            let beta = theta[d - 1];
            let e_hat = exposure_fit.predict_with(&psi, i);
            let mu_hat = mu_fit.predict_with(&gamma, i);
            let resid = a[i] - e_hat;
            let mut m = DVector::zeros(md);
            for j in 0..k {
                m[j] = g[(i, j)] - theta[j];
            }
            let ba = exposure_fit.basis(i);
            for j in 0..q {
                m[k + j] = ba[j] * resid;
            }
            let bm = mu_fit.basis(i);
            for j in 0..r {
                m[k + q + j] = bm[j] * (y0[i] - mu_hat);
            }
            let y_res = y[i] - beta * a[i] - mu_hat;
            for j in 0..k {
                m[k + q + r + j] = (g[(i, j)] - theta[j]) * resid * y_res;
            }
            m
        }
    };
    let jac = move |theta: &DVector<f64>, i: usize| -> DMatrix<f64> {
        let psi = theta.rows(k, q).into_owned();
        let gamma = theta.rows(k + q, r).into_owned();
        let beta = theta[d - 1];
        let e_hat = exposure_fit.predict_with(&psi, i);
        let mu_hat = mu_fit.predict_with(&gamma, i);
        let da = exposure_fit.mean_deriv_with(&psi, i);
        let dm = mu_fit.mean_deriv_with(&gamma, i);
        let ba = exposure_fit.basis(i);
        let bm = mu_fit.basis(i);
        let resid = a[i] - e_hat;
        let y_res = y[i] - beta * a[i] - mu_hat;
        let mut jrow = DMatrix::zeros(md, d);
        for j in 0..k {
            jrow[(j, j)] = -1.0;
        }
        for rr in 0..q {
            for c in 0..q {
                jrow[(k + rr, k + c)] = -ba[rr] * da[c];
            }
        }
        for rr in 0..r {
            for c in 0..r {
                jrow[(k + q + rr, k + q + c)] = -bm[rr] * dm[c];
            }
        }
        for j in 0..k {
            let gc = g[(i, j)] - theta[j];
            jrow[(k + q + r + j, j)] = -resid * y_res;
            for c in 0..q {
                jrow[(k + q + r + j, k + c)] = -gc * y_res * da[c];
            }
            for c in 0..r {
                jrow[(k + q + r + j, k + q + c)] = -gc * resid * dm[c];
            }
            jrow[(k + q + r + j, d - 1)] = -gc * resid * a[i];
        }
        jrow
    };

    sandwich(&StackedSystem {
        n,
        theta,
        layout: vec![
            ("mu".into(), k),
            ("psi".into(), q),
            ("gamma".into(), r),
            ("beta".into(), 1),
        ],
        moment_dim: md,
        row: Box::new(row),
        jac: Box::new(jac),
        combiner: Some(combiner),
        center_rows: Some((k + q + r)..md),
    })
}

fn efficient_multiplicative(
    table: &ObservationTable,
    opts: &GeniusOptions,
) -> Result<CausalEstimate> {
    if table.p() != 1 {
        return Err(Error::Validation(
            "the multiplicative efficient estimator supports a single IV".into(),
        ));
    }
    let initial = crate::link::genius_mult_outcome(table, None)?;
    let beta_init = initial.beta_hat;
    let n = table.n();
    let nf = n as f64;
    let fit = fit_exposure_mean(table, opts.policy)?;
    let g = table.g_col(0);
    let g_bar = g.mean();
    let a = table.a();
    let y = table.y();
    let w: Vec<f64> = (0..n).map(|i| (g[i] - g_bar) * (a[i] - fit.predict(i))).collect();

    // mu(.; beta) is refit at every candidate beta; the ratio mu(0)/mu(G)
    // rescales the treatment-free outcome
    let mu_ratio = |beta: f64| -> Result<Vec<f64>> {
        let y0 = DVector::from_fn(n, |i, _| y[i] * (-beta * a[i]).exp());
        let mfit = fit_conditional_mean(table.g(), &y0, false, opts.policy)?;
        // mu at G = 0 from the fitted model: use the prediction of a row
        // with g = 0 if observed, else linear extrapolation
        let mu0 = match &mfit {
            FittedMean::Saturated { fit: sat, .. } => sat.predict_values(&[0.0])?,
            FittedMean::Glm { fit: glm, .. } => glm.predict_slice(&[1.0, 0.0]),
        };
        let mut ratios = Vec::with_capacity(n);
        for i in 0..n {
            let mg = mfit.predict(i);
            if mg.abs() < 1e-12 {
                return Err(Error::Numerical(
                    "fitted treatment-free mean numerically zero; ratio undefined".into(),
                ));
            }
            ratios.push(mu0 / mg);
        }
        Ok(ratios)
    };

    let moment = |beta: f64| -> Result<f64> {
        let ratios = mu_ratio(beta)?;
        let mut s = 0.0;
        for i in 0..n {
            s += w[i] * y[i] * (-beta * a[i]).exp() * ratios[i];
        }
        Ok(s / nf)
    };

    let f = |beta: f64| moment(beta).unwrap_or(f64::NAN);
    let df = |beta: f64| {
        let h = 1e-6 * (1.0 + beta.abs());
        (f(beta + h) - f(beta - h)) / (2.0 * h)
    };
    let root = crate::numeric::find_root(f, df, beta_init - 2.0, beta_init + 2.0, 1e-10, 200);
    let (beta, diag_root) = match root {
        Ok(v) => v,
        Err(_) => {
            // wider default bracket before giving up
            crate::numeric::find_root(
                f,
                df,
                crate::numeric::DEFAULT_BRACKET.0,
                crate::numeric::DEFAULT_BRACKET.1,
                1e-10,
                200,
            )?
        }
    };

    let (base, _) = base_diagnostics(table);
    let mut diag = Diagnostics {
        phi_hat: base.phi_hat,
        converged: true,
        iterations: diag_root.iterations,
        objective: diag_root.residual,
        n,
        p: table.p(),
        warnings: initial.diagnostics.warnings.clone(),
    };

    // plug-in sandwich with the fitted ratio frozen at the solution
    let ratios = mu_ratio(beta)?;
    let se = mult_efficient_se(table, &fit, &ratios, beta, &mut diag)?;
    Ok(CausalEstimate {
        beta_hat: beta,
        se,
        ci: wald_ci(beta, se, opts.level),
        level: opts.level,
        method: "genius-efficient".into(),
        diagnostics: diag,
    })
}

/// Variance for the multiplicative efficient estimator, stacking the
/// instrument mean and exposure model and treating the fitted mean ratio
/// as known weights.
fn mult_efficient_se(
    table: &ObservationTable,
    exposure_fit: &FittedMean,
    ratios: &[f64],
    beta_hat: f64,
    diag: &mut Diagnostics,
) -> Result<f64> {
    let n = table.n();
    let q = exposure_fit.param_count();
    let d = 1 + q + 1;
    let g = table.g_col(0);
    let a = table.a().clone();
    let y = table.y().clone();
    let ratios = ratios.to_vec();
    let mut theta = DVector::zeros(d);
    theta[0] = g.mean();
    theta.rows_mut(1, q).copy_from(&exposure_fit.params());
    theta[d - 1] = beta_hat;

    let row = {
        let (g, a, y, ratios) = (g.clone(), a.clone(), y.clone(), ratios.clone());
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
            m[d - 1] = (g[i] - mu) * resid * y[i] * (-beta * a[i]).exp() * ratios[i];
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
        let core = y[i] * (-beta * a[i]).exp() * ratios[i];
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
