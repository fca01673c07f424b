//! Stacked-moment sandwich variance estimation and Wald intervals.
//!
//! Every estimator in the crate solves a system of empirical moment
//! conditions: nuisance scores (instrument means, conditional-mean fits)
//! stacked with the identifying moment for the causal parameter. The
//! asymptotic covariance is the usual plug-in
//! `B^- M E[mm'] M' B^-' / n`, where `B` collects the analytic partial
//! derivatives of the stacked moments and `M` combines over-identified
//! moment rows into the solved first-order conditions (the identity when
//! the system is exactly identified).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::ObservationTable;
use crate::error::{Error, Result};
use crate::nuisance::FittedMean;
use crate::numeric::pseudo_inverse;

/// Assembled sandwich pieces for one stacked system.
#[derive(Debug, Clone)]
pub struct SandwichParts {
    /// Square matrix of mean partial derivatives of the solved moments.
    pub bread: DMatrix<f64>,
    /// Empirical second moment of the (possibly centered) raw moments.
    pub meat: DMatrix<f64>,
    /// Full plug-in covariance of the stacked parameter vector.
    pub covariance: DMatrix<f64>,
    /// Variance of the causal parameter (last diagonal entry).
    pub beta_variance: f64,
    /// Named parameter blocks in stacking order.
    pub layout: Vec<(String, usize)>,
    /// Numerical rank of the bread; below full rank a pseudo-inverse was
    /// used and the caller should warn.
    pub bread_rank: usize,
}

impl SandwichParts {
    pub fn se(&self) -> f64 {
        self.beta_variance.max(0.0).sqrt()
    }

    pub fn dim(&self) -> usize {
        self.bread.nrows()
    }

    pub fn bread_full_rank(&self) -> bool {
        self.bread_rank == self.dim()
    }
}

/// One stacked estimating-equation system, described by per-row raw
/// moments and their analytic jacobians at arbitrary parameter values.
pub(crate) struct StackedSystem<'a> {
    pub n: usize,
    /// Parameter vector at the fitted solution; the causal parameter is the
    /// last entry.
    pub theta: DVector<f64>,
    pub layout: Vec<(String, usize)>,
    /// Number of raw moment rows (>= theta dim for over-identified GMM).
    pub moment_dim: usize,
    /// Raw per-row moments at the given parameters.
    pub row: Box<dyn Fn(&DVector<f64>, usize) -> DVector<f64> + 'a>,
    /// Analytic jacobian of the raw per-row moments.
    pub jac: Box<dyn Fn(&DVector<f64>, usize) -> DMatrix<f64> + 'a>,
    /// Row-combination matrix mapping raw moments to solved conditions;
    /// identity when None.
    pub combiner: Option<DMatrix<f64>>,
    /// Raw moment rows to center when estimating the meat.
    pub center_rows: Option<std::ops::Range<usize>>,
}

pub(crate) fn sandwich(sys: &StackedSystem<'_>) -> Result<SandwichParts> {
    let d = sys.theta.len();
    let md = sys.moment_dim;
    let nf = sys.n as f64;

    let mut a_tilde = DMatrix::zeros(md, d);
    let mut mean_m = DVector::zeros(md);
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(sys.n);
    for i in 0..sys.n {
        let m = (sys.row)(&sys.theta, i);
        debug_assert_eq!(m.len(), md);
        mean_m += &m;
        rows.push(m);
        a_tilde += (sys.jac)(&sys.theta, i);
    }
    a_tilde /= nf;
    mean_m /= nf;

    let mut center = DVector::zeros(md);
    if let Some(range) = &sys.center_rows {
        for r in range.clone() {
            center[r] = mean_m[r];
        }
    }
    let mut meat = DMatrix::zeros(md, md);
    for m in &rows {
        let c = m - &center;
        meat += &c * c.transpose();
    }
    meat /= nf;

    let combined = match &sys.combiner {
        Some(m) => m.clone(),
        None => DMatrix::identity(d, md),
    };
    let bread = &combined * &a_tilde;
    let (bread_inv, bread_rank) = pseudo_inverse(&bread)?;
    let mid = &combined * &meat * combined.transpose();
    let covariance = (&bread_inv * &mid * bread_inv.transpose()) / nf;
    let beta_variance = covariance[(d - 1, d - 1)];
    Ok(SandwichParts {
        bread,
        meat,
        covariance,
        beta_variance,
        layout: sys.layout.clone(),
        bread_rank,
    })
}

/// Central finite differences of the combined mean moments, for the
/// self-test diagnostic. Returns the worst deviation from the analytic
/// bread, scaled by `max(1, |analytic|)` entrywise.
pub(crate) fn bread_fd_deviation(sys: &StackedSystem<'_>, step: f64) -> Result<f64> {
    let d = sys.theta.len();
    let md = sys.moment_dim;
    let nf = sys.n as f64;
    let combined = match &sys.combiner {
        Some(m) => m.clone(),
        None => DMatrix::identity(d, md),
    };
    let mean_moments = |theta: &DVector<f64>| -> DVector<f64> {
        let mut acc = DVector::zeros(md);
        for i in 0..sys.n {
            acc += (sys.row)(theta, i);
        }
        &combined * (acc / nf)
    };
    let mut analytic = DMatrix::zeros(md, d);
    for i in 0..sys.n {
        analytic += (sys.jac)(&sys.theta, i);
    }
    let analytic = &combined * (analytic / nf);

    let mut worst = 0.0_f64;
    for j in 0..d {
        let h = step * sys.theta[j].abs().max(1.0);
        let mut up = sys.theta.clone();
        up[j] += h;
        let mut dn = sys.theta.clone();
        dn[j] -= h;
        let fd_col = (mean_moments(&up) - mean_moments(&dn)) / (2.0 * h);
        for r in 0..d {
            let denom = analytic[(r, j)].abs().max(1.0);
            worst = worst.max((fd_col[r] - analytic[(r, j)]).abs() / denom);
        }
    }
    Ok(worst)
}

/// Build the single-IV stacked system: instrument mean, exposure-model
/// score, and the identifying moment, with exact analytic derivatives.
pub(crate) fn single_iv_system<'a>(
    table: &'a ObservationTable,
    exposure_fit: &'a FittedMean,
    beta_hat: f64,
) -> StackedSystem<'a> {
    let n = table.n();
    let q = exposure_fit.param_count();
    let d = 1 + q + 1;
    let g = table.g_col(0);
    let mu_hat = g.mean();
    let mut theta = DVector::zeros(d);
    theta[0] = mu_hat;
    theta.rows_mut(1, q).copy_from(&exposure_fit.params());
    theta[d - 1] = beta_hat;

    let a = table.a().clone();
    let y = table.y().clone();
    let g_row = g.clone();

    let row = {
        let (g, a, y) = (g_row.clone(), a.clone(), y.clone());
        move |theta: &DVector<f64>, i: usize| -> DVector<f64> {
            let mu = theta[0];
            let psi = theta.rows(1, q).into_owned();
            let beta = theta[d - 1];
            let e_hat = exposure_fit.predict_with(&psi, i);
            let mut m = DVector::zeros(d);
            m[0] = g[i] - mu;
            let basis = exposure_fit.basis(i);
            let resid = a[i] - e_hat;
            for j in 0..q {
                m[1 + j] = basis[j] * resid;
            }
            m[d - 1] = (g[i] - mu) * resid * (y[i] - beta * a[i]);
            m
        }
    };
    let jac = {
        let (g, a, y) = (g_row, a, y);
        move |theta: &DVector<f64>, i: usize| -> DMatrix<f64> {
            let mu = theta[0];
            let psi = theta.rows(1, q).into_owned();
            let beta = theta[d - 1];
            let e_hat = exposure_fit.predict_with(&psi, i);
            let deriv = exposure_fit.mean_deriv_with(&psi, i);
            let basis = exposure_fit.basis(i);
            let resid = a[i] - e_hat;
            let y_resid = y[i] - beta * a[i];
            let mut jrow = DMatrix::zeros(d, d);
            jrow[(0, 0)] = -1.0;
            for r in 0..q {
                for c in 0..q {
                    jrow[(1 + r, 1 + c)] = -basis[r] * deriv[c];
                }
            }
            jrow[(d - 1, 0)] = -resid * y_resid;
            for c in 0..q {
                jrow[(d - 1, 1 + c)] = -(g[i] - mu) * y_resid * deriv[c];
            }
            jrow[(d - 1, d - 1)] = -(g[i] - mu) * resid * a[i];
            jrow
        }
    };

    StackedSystem {
        n,
        theta,
        layout: vec![("mu".into(), 1), ("psi".into(), q), ("beta".into(), 1)],
        moment_dim: d,
        row: Box::new(row),
        jac: Box::new(jac),
        combiner: None,
        center_rows: None,
    }
}

/// Sandwich variance of the single-IV estimator with an estimated
/// instrument mean and exposure model.
pub fn sandwich_single(
    table: &ObservationTable,
    exposure_fit: &FittedMean,
    beta_hat: f64,
) -> Result<SandwichParts> {
    if table.p() != 1 {
        return Err(Error::Validation("single-IV sandwich requires exactly one IV column".into()));
    }
    sandwich(&single_iv_system(table, exposure_fit, beta_hat))
}

/// Finite-difference self test for the single-IV bread (diagnostic; not run
/// by default).
pub fn fd_check_single(
    table: &ObservationTable,
    exposure_fit: &FittedMean,
    beta_hat: f64,
) -> Result<f64> {
    bread_fd_deviation(&single_iv_system(table, exposure_fit, beta_hat), 1e-6)
}

/// Build the multi-IV GMM stacked system. The raw moments are the k
/// instrument means, the exposure-model score, and the k IV moments; the
/// solved system combines the IV moments through `lambda' W`.
pub(crate) fn gmm_system<'a>(
    table: &'a ObservationTable,
    exposure_fit: &'a FittedMean,
    weight: &DMatrix<f64>,
    beta_hat: f64,
    center: bool,
) -> StackedSystem<'a> {
    let n = table.n();
    let nf = n as f64;
    let k = table.p();
    let q = exposure_fit.param_count();
    let d = k + q + 1;
    let md = k + q + k;
    let g = table.g().clone();
    let a = table.a().clone();
    let y = table.y().clone();

    let mut theta = DVector::zeros(d);
    for j in 0..k {
        theta[j] = g.column(j).sum() / nf;
    }
    theta.rows_mut(k, q).copy_from(&exposure_fit.params());
    theta[d - 1] = beta_hat;

    // lambda = P_n[dU/dbeta] at the fit
    let mut lambda = DVector::zeros(k);
    for i in 0..n {
        let resid = a[i] - exposure_fit.predict(i);
        for j in 0..k {
            lambda[j] -= (g[(i, j)] - theta[j]) * resid * a[i];
        }
    }
    lambda /= nf;
    let lw = lambda.transpose() * weight; // 1 x k
    let mut combiner = DMatrix::zeros(d, md);
    for r in 0..(k + q) {
        combiner[(r, r)] = 1.0;
    }
    for c in 0..k {
        combiner[(d - 1, k + q + c)] = lw[c];
    }

    let row = {
        let (g, a, y) = (g.clone(), a.clone(), y.clone());
        move |theta: &DVector<f64>, i: usize| -> DVector<f64> {
            let psi = theta.rows(k, q).into_owned();
            let beta = theta[d - 1];
            let e_hat = exposure_fit.predict_with(&psi, i);
            let resid = a[i] - e_hat;
            let basis = exposure_fit.basis(i);
            let mut m = DVector::zeros(md);
            for j in 0..k {
                m[j] = g[(i, j)] - theta[j];
            }
            for j in 0..q {
                m[k + j] = basis[j] * resid;
            }
            let y_resid = y[i] - beta * a[i];
            for j in 0..k {
                m[k + q + j] = (g[(i, j)] - theta[j]) * resid * y_resid;
            }
            m
        }
    };
    let jac = move |theta: &DVector<f64>, i: usize| -> DMatrix<f64> {
        let psi = theta.rows(k, q).into_owned();
        let beta = theta[d - 1];
        let e_hat = exposure_fit.predict_with(&psi, i);
        let deriv = exposure_fit.mean_deriv_with(&psi, i);
        let basis = exposure_fit.basis(i);
        let resid = a[i] - e_hat;
        let y_resid = y[i] - beta * a[i];
        let mut jrow = DMatrix::zeros(md, d);
        for j in 0..k {
            jrow[(j, j)] = -1.0;
        }
        for r in 0..q {
            for c in 0..q {
                jrow[(k + r, k + c)] = -basis[r] * deriv[c];
            }
        }
        for j in 0..k {
            let gc = g[(i, j)] - theta[j];
            jrow[(k + q + j, j)] = -resid * y_resid;
            for c in 0..q {
                jrow[(k + q + j, k + c)] = -gc * y_resid * deriv[c];
            }
            jrow[(k + q + j, d - 1)] = -gc * resid * a[i];
        }
        jrow
    };

    StackedSystem {
        n,
        theta,
        layout: vec![("mu".into(), k), ("psi".into(), q), ("beta".into(), 1)],
        moment_dim: md,
        row: Box::new(row),
        jac: Box::new(jac),
        combiner: Some(combiner),
        center_rows: if center { Some((k + q)..md) } else { None },
    }
}

/// Sandwich variance of the GMM estimator with the given final weight
/// matrix; IV moment rows are centered when `center` is set, the default
/// for finite-sample inference.
pub fn sandwich_gmm(
    table: &ObservationTable,
    exposure_fit: &FittedMean,
    weight: &DMatrix<f64>,
    beta_hat: f64,
    center: bool,
) -> Result<SandwichParts> {
    sandwich(&gmm_system(table, exposure_fit, weight, beta_hat, center))
}

/// Finite-difference self test for the GMM bread.
pub fn fd_check_gmm(
    table: &ObservationTable,
    exposure_fit: &FittedMean,
    weight: &DMatrix<f64>,
    beta_hat: f64,
    center: bool,
) -> Result<f64> {
    bread_fd_deviation(&gmm_system(table, exposure_fit, weight, beta_hat, center), 1e-6)
}

/// Wald confidence interval `beta_hat +/- z * se` at the given level.
pub fn wald_ci(beta_hat: f64, se: f64, level: f64) -> (f64, f64) {
    assert!(level > 0.0 && level < 1.0, "confidence level must be in (0,1)");
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.5 + level / 2.0);
    (beta_hat - z * se, beta_hat + z * se)
}

/// Serializable summary of the sandwich output for CLI consumption.
#[derive(Debug, Clone, Serialize)]
pub struct VcovSummary {
    pub layout: Vec<(String, usize)>,
    pub beta_se: f64,
}
