//! Small numerical routines shared by the estimators: bracketed root
//! finding, SVD-based generalized inverse, and quantiles.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

/// Diagnostics attached to every root-finding result.
#[derive(Debug, Clone, Serialize)]
pub struct RootDiagnostics {
    pub iterations: usize,
    /// |f(root)| at the reported root.
    pub residual: f64,
    /// f'(root); a value near zero flags an ill-conditioned root.
    pub derivative: f64,
    pub bracket: (f64, f64),
}

/// Initial bracketing range for root searches on the log-effect scale.
pub const DEFAULT_BRACKET: (f64, f64) = (-10.0, 10.0);
/// Geometric expansion never exceeds this range.
pub const MAX_BRACKET: (f64, f64) = (-30.0, 30.0);

const GRID_POINTS: usize = 41;

/// Locate a sign change of `f` on `[lo, hi]`, expanding geometrically up to
/// `MAX_BRACKET` if none is found on the initial range.
fn bracket_sign_change(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> Result<(f64, f64)> {
    let (mut lo, mut hi) = (lo, hi);
    loop {
        let mut prev_x = lo;
        let mut prev_f = f(lo);
        if prev_f == 0.0 {
            return Ok((lo, lo));
        }
        for k in 1..GRID_POINTS {
            let x = lo + (hi - lo) * (k as f64) / ((GRID_POINTS - 1) as f64);
            let fx = f(x);
            if fx == 0.0 {
                return Ok((x, x));
            }
            if prev_f.signum() != fx.signum() && prev_f.is_finite() && fx.is_finite() {
                return Ok((prev_x, x));
            }
            prev_x = x;
            prev_f = fx;
        }
        if lo <= MAX_BRACKET.0 && hi >= MAX_BRACKET.1 {
            return Err(Error::Identification(format!(
                "no sign change of the estimating function on [{lo}, {hi}]"
            )));
        }
        lo = (lo * 1.5).max(MAX_BRACKET.0);
        hi = (hi * 1.5).min(MAX_BRACKET.1);
    }
}

/// Safeguarded Newton iteration: Newton steps are accepted only while they
/// stay inside the current sign-change bracket, otherwise the step falls
/// back to bisection. Converges when |f| drops below `tol`.
pub fn find_root(
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, RootDiagnostics)> {
    let fref: &dyn Fn(f64) -> f64 = &f;
    let (mut a, mut b) = bracket_sign_change(fref, lo, hi)?;
    if a == b {
        let d = df(a);
        return Ok((a, RootDiagnostics { iterations: 0, residual: 0.0, derivative: d, bracket: (a, b) }));
    }
    let (mut fa, mut fb) = (f(a), f(b));
    let mut x = 0.5 * (a + b);
    let mut fx = f(x);
    let mut iterations = 0;
    while fx.abs() > tol && iterations < max_iter {
        iterations += 1;
        let d = df(x);
        let newton = if d != 0.0 { x - fx / d } else { f64::NAN };
        let next = if newton.is_finite() && newton > a && newton < b {
            newton
        } else {
            0.5 * (a + b)
        };
        let fnext = f(next);
        if fnext.signum() == fa.signum() {
            a = next;
            fa = fnext;
        } else {
            b = next;
            fb = fnext;
        }
        x = next;
        fx = fnext;
        if (b - a).abs() < f64::EPSILON * (1.0 + x.abs()) {
            break;
        }
    }
    let _ = fb;
    if fx.abs() > tol {
        return Err(Error::Convergence(format!(
            "root search stalled after {iterations} iterations; residual {:.3e}",
            fx.abs()
        )));
    }
    let derivative = df(x);
    Ok((x, RootDiagnostics { iterations, residual: fx.abs(), derivative, bracket: (a, b) }))
}

/// Relative singular-value cutoff used for every generalized inverse.
pub const PINV_RELATIVE_TOL: f64 = 1e-12;

/// Moore-Penrose inverse via SVD with cutoff `PINV_RELATIVE_TOL * sigma_max`.
/// Returns the inverse together with the numerical rank.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return Ok((DMatrix::zeros(m.ncols(), m.nrows()), 0));
    }
    let eps = PINV_RELATIVE_TOL * smax;
    let rank = svd.singular_values.iter().filter(|s| **s > eps).count();
    let pinv = svd
        .pseudo_inverse(eps)
        .map_err(|e| Error::Numerical(format!("pseudo-inverse failed: {e}")))?;
    Ok((pinv, rank))
}

/// Type-7 quantile (linear interpolation between order statistics) of an
/// unsorted sample.
pub fn quantile_type7(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty sample");
    assert!((0.0..=1.0).contains(&q));
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile_type7(values, 0.5)
}

/// Robust spread estimate: interquartile range divided by 1.349, the IQR of
/// a standard normal.
pub fn robust_sd(values: &[f64]) -> f64 {
    (quantile_type7(values, 0.75) - quantile_type7(values, 0.25)) / 1.349
}
