//! Conditional-mean nuisance models: saturated group means, linear and
//! logistic regressions, the log-mean-ratio exposure model, and the logit
//! contrast used by the odds-ratio estimator.
//!
//! Every fitted model exposes its coefficient vector, can predict at
//! perturbed coefficients, and reports the per-row derivative of the
//! prediction with respect to the coefficients. The stacked-moment variance
//! estimators are built on exactly those three capabilities.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::data::{distinct_levels, ObservationTable, DISCRETE_LEVEL_CAP};
use crate::error::{Error, Result};

/// GLM link functions supported by the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Logit,
    /// log E(target | design); used when a fitted mean must stay positive.
    Log,
}

/// Default convergence tolerance on the mean score norm for iterative fits.
pub const SCORE_TOL: f64 = 1e-8;
/// Default iteration cap for iterative fits.
pub const MAX_FIT_ITER: usize = 100;
/// Linear predictors beyond this magnitude indicate (quasi-)separation.
const ETA_SEPARATION: f64 = 30.0;

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// A fitted generalized linear model over an explicit design matrix.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub link: Link,
    pub coefs: DVector<f64>,
    pub iterations: usize,
    /// Norm of the mean score at the returned coefficients.
    pub score_norm: f64,
}

impl GlmFit {
    fn eta(&self, coefs: &DVector<f64>, x: &[f64]) -> f64 {
        x.iter().zip(coefs.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn predict_slice(&self, x: &[f64]) -> f64 {
        self.predict_slice_with(&self.coefs, x)
    }

    pub fn predict_slice_with(&self, coefs: &DVector<f64>, x: &[f64]) -> f64 {
        let eta = self.eta(coefs, x);
        match self.link {
            Link::Identity => eta,
            Link::Logit => sigmoid(eta),
            Link::Log => eta.exp(),
        }
    }

    /// d mean / d coefs at the given coefficients.
    pub fn mean_deriv_slice_with(&self, coefs: &DVector<f64>, x: &[f64]) -> DVector<f64> {
        let scale = match self.link {
            Link::Identity => 1.0,
            Link::Logit => {
                let p = sigmoid(self.eta(coefs, x));
                p * (1.0 - p)
            }
            Link::Log => self.eta(coefs, x).exp(),
        };
        DVector::from_iterator(x.len(), x.iter().map(|v| v * scale))
    }
}

/// Group-mean (saturated) fit over the joint levels of the conditioning
/// columns. Defined only when the conditioning variables take finitely many
/// observed levels.
#[derive(Debug, Clone)]
pub struct SaturatedFit {
    /// Sorted joint level keys (bit patterns of the conditioning values).
    keys: Vec<Vec<u64>>,
    /// Within-level means of the target, aligned with `keys`.
    means: Vec<f64>,
    counts: Vec<usize>,
    /// Human-readable level values for serialization.
    level_values: Vec<Vec<f64>>,
}

impl SaturatedFit {
    fn key_index(&self, key: &[u64]) -> Result<usize> {
        self.keys
            .binary_search_by(|k| k.as_slice().cmp(key))
            .map_err(|_| Error::Validation("prediction at a level unseen during fitting".into()))
    }

    pub fn level_count(&self) -> usize {
        self.keys.len()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Prediction at a joint level given by its raw values.
    pub fn predict_values(&self, values: &[f64]) -> Result<f64> {
        let key: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        Ok(self.means[self.key_index(&key)?])
    }
}

fn joint_key(cols: &DMatrix<f64>, i: usize) -> Vec<u64> {
    (0..cols.ncols()).map(|j| cols[(i, j)].to_bits()).collect()
}

/// Fit within-group means of `target` over the joint levels of `by`.
///
/// The prediction at a level equals the empirical mean of the target among
/// rows at that level, exactly.
pub fn fit_saturated(by: &DMatrix<f64>, target: &DVector<f64>) -> Result<SaturatedFit> {
    let n = by.nrows();
    if n == 0 || target.len() != n {
        return Err(Error::Validation("saturated fit: empty or mismatched inputs".into()));
    }
    let mut acc: BTreeMap<Vec<u64>, (f64, usize, Vec<f64>)> = BTreeMap::new();
    for i in 0..n {
        let key = joint_key(by, i);
        let vals: Vec<f64> = (0..by.ncols()).map(|j| by[(i, j)]).collect();
        let e = acc.entry(key).or_insert((0.0, 0, vals));
        e.0 += target[i];
        e.1 += 1;
    }
    let mut keys = Vec::with_capacity(acc.len());
    let mut means = Vec::with_capacity(acc.len());
    let mut counts = Vec::with_capacity(acc.len());
    let mut level_values = Vec::with_capacity(acc.len());
    for (key, (sum, count, vals)) in acc {
        keys.push(key);
        means.push(sum / count as f64);
        counts.push(count);
        level_values.push(vals);
    }
    Ok(SaturatedFit { keys, means, counts, level_values })
}

/// Least-squares fit of `target` on `design` via the normal equations.
///
/// The design must have full column rank; collinear columns are named in
/// the error. Residuals are orthogonal to the design columns to solver
/// precision.
pub fn fit_linear(design: &DMatrix<f64>, target: &DVector<f64>) -> Result<GlmFit> {
    check_full_rank(design)?;
    let xtx = design.transpose() * design;
    let xty = design.transpose() * target;
    let coefs = solve_spd(&xtx, &xty)?;
    let resid = target - design * &coefs;
    let score = design.transpose() * &resid / design.nrows() as f64;
    Ok(GlmFit { link: Link::Identity, coefs, iterations: 1, score_norm: score.norm() })
}

/// Logistic regression of a binary `target` on `design` by iteratively
/// reweighted least squares with step-halving when the deviance increases.
///
/// Converges when the mean score norm falls below `SCORE_TOL`; separated
/// data keep the linear predictor growing and fail with a non-convergence
/// error carrying the final gradient norm.
pub fn fit_logistic(design: &DMatrix<f64>, target: &DVector<f64>) -> Result<GlmFit> {
    if target.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Validation("logistic fit requires a binary target".into()));
    }
    check_full_rank(design)?;
    let n = design.nrows();
    let k = design.ncols();
    let nf = n as f64;
    let mut coefs = DVector::zeros(k);

    let deviance = |eta: &DVector<f64>| -> f64 {
        let mut d = 0.0;
        for i in 0..n {
            let p = sigmoid(eta[i]).clamp(1e-12, 1.0 - 1e-12);
            d -= 2.0 * (target[i] * p.ln() + (1.0 - target[i]) * (1.0 - p).ln());
        }
        d
    };

    let mut eta = design * &coefs;
    let mut dev = deviance(&eta);
    let mut score_norm = f64::INFINITY;
    for iter in 1..=MAX_FIT_ITER {
        let p: DVector<f64> = eta.map(sigmoid);
        let resid = target - &p;
        let score = design.transpose() * &resid / nf;
        score_norm = score.norm();
        let max_eta = eta.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
        if score_norm < SCORE_TOL && max_eta <= ETA_SEPARATION {
            // one quadratic polish step so saturated-equivalent designs
            // reproduce group means well past the score tolerance
            if let Ok(delta) = irls_step(design, &p, &resid) {
                let polished = &coefs + &delta;
                let eta_new = design * &polished;
                if deviance(&eta_new) <= dev + 1e-12 {
                    coefs = polished;
                    let p2: DVector<f64> = eta_new.map(sigmoid);
                    score_norm = (design.transpose() * (target - &p2) / nf).norm();
                }
            }
            return Ok(GlmFit { link: Link::Logit, coefs, iterations: iter, score_norm });
        }
        let delta = irls_step(design, &p, &resid)?;
        let mut step = 1.0;
        loop {
            let candidate = &coefs + &delta * step;
            let eta_new = design * &candidate;
            let dev_new = deviance(&eta_new);
            if dev_new <= dev + 1e-10 || step < 1e-6 {
                coefs = candidate;
                eta = eta_new;
                dev = dev_new;
                break;
            }
            step *= 0.5;
        }
    }
    Err(Error::Convergence(format!(
        "logistic fit did not converge in {MAX_FIT_ITER} iterations; final gradient norm {score_norm:.3e}"
    )))
}

fn irls_step(
    design: &DMatrix<f64>,
    p: &DVector<f64>,
    resid: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = design.nrows();
    let k = design.ncols();
    let mut xtwx = DMatrix::zeros(k, k);
    let mut xtr = DVector::zeros(k);
    for i in 0..n {
        let w = (p[i] * (1.0 - p[i])).max(1e-10);
        for a in 0..k {
            xtr[a] += design[(i, a)] * resid[i];
            for b in 0..k {
                xtwx[(a, b)] += design[(i, a)] * w * design[(i, b)];
            }
        }
    }
    solve_spd(&xtwx, &xtr)
}

fn solve_spd(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    m.clone()
        .cholesky()
        .map(|ch| ch.solve(rhs))
        .or_else(|| m.clone().lu().solve(rhs))
        .ok_or_else(|| Error::Numerical("singular system in GLM solve".into()))
}

/// Greedy Gram-Schmidt rank check; names the offending columns.
fn check_full_rank(design: &DMatrix<f64>) -> Result<()> {
    let n = design.nrows();
    let k = design.ncols();
    if n < k {
        return Err(Error::Numerical(format!("design has {k} columns but only {n} rows")));
    }
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut collinear: Vec<usize> = Vec::new();
    for j in 0..k {
        let mut v = design.column(j).into_owned();
        let norm0 = v.norm();
        if norm0 == 0.0 {
            collinear.push(j);
            continue;
        }
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        if v.norm() <= 1e-10 * norm0 {
            collinear.push(j);
        } else {
            let norm = v.norm();
            basis.push(v / norm);
        }
    }
    if collinear.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "design is rank deficient; collinear column indices: {collinear:?}"
        )))
    }
}

/// Multiplicative exposure association: the coefficient vector solving
/// `P_n[ A exp(-varpi'G) (G - mean(G)) ] = 0`.
#[derive(Debug, Clone)]
pub struct LogMeanRatio {
    pub varpi: DVector<f64>,
    pub iterations: usize,
    /// Norm of the moment at the returned solution.
    pub residual_norm: f64,
}

impl LogMeanRatio {
    /// exp(-varpi' g) for one row of instruments.
    pub fn weight(&self, g_row: &[f64]) -> f64 {
        self.weight_with(&self.varpi, g_row)
    }

    pub fn weight_with(&self, varpi: &DVector<f64>, g_row: &[f64]) -> f64 {
        let dot: f64 = g_row.iter().zip(varpi.iter()).map(|(a, b)| a * b).sum();
        (-dot).exp()
    }
}

/// Solve the log-mean-ratio estimating equation by damped Newton, with a
/// bracketing fallback in the single-IV case.
pub fn fit_log_mean_ratio(g: &DMatrix<f64>, a: &DVector<f64>) -> Result<LogMeanRatio> {
    if a.iter().any(|v| *v < 0.0) {
        return Err(Error::Validation("multiplicative exposure model requires A >= 0".into()));
    }
    if a.iter().all(|v| *v == 0.0) {
        return Err(Error::Validation("exposure is identically zero".into()));
    }
    let n = g.nrows();
    let p = g.ncols();
    let nf = n as f64;
    let g_bar: DVector<f64> =
        DVector::from_fn(p, |j, _| g.column(j).sum() / nf);

    let moment = |varpi: &DVector<f64>| -> DVector<f64> {
        let mut m = DVector::zeros(p);
        for i in 0..n {
            let dot: f64 = (0..p).map(|j| g[(i, j)] * varpi[j]).sum();
            let w = a[i] * (-dot).exp();
            for j in 0..p {
                m[j] += w * (g[(i, j)] - g_bar[j]);
            }
        }
        m / nf
    };
    let jacobian = |varpi: &DVector<f64>| -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(p, p);
        for i in 0..n {
            let dot: f64 = (0..p).map(|j| g[(i, j)] * varpi[j]).sum();
            let w = a[i] * (-dot).exp();
            for r in 0..p {
                for c in 0..p {
                    jac[(r, c)] -= w * (g[(i, r)] - g_bar[r]) * g[(i, c)];
                }
            }
        }
        jac / nf
    };

    let mut varpi = DVector::zeros(p);
    let mut m = moment(&varpi);
    let mut trace = vec![m.norm()];
    for iter in 1..=MAX_FIT_ITER {
        if m.norm() < SCORE_TOL {
            return Ok(LogMeanRatio { varpi, iterations: iter - 1, residual_norm: m.norm() });
        }
        let jac = jacobian(&varpi);
        let step = match jac.clone().lu().solve(&m) {
            Some(s) => -s,
            None => break,
        };
        let mut t = 1.0;
        let mut accepted = false;
        while t >= 1e-6 {
            let cand = &varpi + &step * t;
            let m_new = moment(&cand);
            if m_new.norm() < m.norm() * (1.0 - 1e-4 * t) || m_new.norm() < SCORE_TOL {
                varpi = cand;
                m = m_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        trace.push(m.norm());
        if !accepted {
            break;
        }
    }
    if m.norm() < SCORE_TOL {
        return Ok(LogMeanRatio { varpi, iterations: trace.len(), residual_norm: m.norm() });
    }
    // single-IV fallback: bracketed scalar root
    if p == 1 {
        let f = |v: f64| moment(&DVector::from_element(1, v))[0];
        let df = |v: f64| jacobian(&DVector::from_element(1, v))[(0, 0)];
        if let Ok((root, diag)) = crate::numeric::find_root(f, df, -10.0, 10.0, SCORE_TOL, 200) {
            return Ok(LogMeanRatio {
                varpi: DVector::from_element(1, root),
                iterations: diag.iterations,
                residual_norm: diag.residual,
            });
        }
    }
    let tail: Vec<String> = trace.iter().rev().take(5).map(|v| format!("{v:.3e}")).collect();
    Err(Error::Convergence(format!(
        "log-mean-ratio fit diverged; residual norm trace (latest first): {}",
        tail.join(", ")
    )))
}

/// Difference of the fitted logit of Pr(A=1|G=g) from its value at the
/// reference level g = 0.
#[derive(Debug, Clone)]
pub enum LogitContrast {
    /// Per-level empirical logits (discrete G).
    Saturated { fit: SaturatedFit, ref_index: usize },
    /// Main-effects logistic fit on (1, G).
    Logistic(GlmFit),
}

impl LogitContrast {
    pub fn params(&self) -> DVector<f64> {
        match self {
            LogitContrast::Saturated { fit, .. } => DVector::from_vec(fit.means.clone()),
            LogitContrast::Logistic(glm) => glm.coefs.clone(),
        }
    }

    pub fn contrast(&self, g: f64) -> Result<f64> {
        self.contrast_with(&self.params(), g)
    }

    pub fn contrast_with(&self, params: &DVector<f64>, g: f64) -> Result<f64> {
        match self {
            LogitContrast::Saturated { fit, ref_index } => {
                let idx = fit.key_index(&[g.to_bits()])?;
                let logit = |p: f64| (p / (1.0 - p)).ln();
                Ok(logit(params[idx]) - logit(params[*ref_index]))
            }
            LogitContrast::Logistic(_) => Ok(params[1] * g),
        }
    }

    /// d contrast / d params at level g.
    pub fn contrast_deriv(&self, params: &DVector<f64>, g: f64) -> Result<DVector<f64>> {
        match self {
            LogitContrast::Saturated { fit, ref_index } => {
                let idx = fit.key_index(&[g.to_bits()])?;
                let mut d = DVector::zeros(params.len());
                let dlogit = |p: f64| 1.0 / (p * (1.0 - p));
                d[idx] += dlogit(params[idx]);
                d[*ref_index] -= dlogit(params[*ref_index]);
                Ok(d)
            }
            LogitContrast::Logistic(_) => {
                let mut d = DVector::zeros(params.len());
                d[1] = g;
                Ok(d)
            }
        }
    }

    /// Per-row score basis of the underlying fit of A on G.
    pub fn basis(&self, g: f64) -> Result<DVector<f64>> {
        match self {
            LogitContrast::Saturated { fit, .. } => {
                let idx = fit.key_index(&[g.to_bits()])?;
                let mut b = DVector::zeros(fit.level_count());
                b[idx] = 1.0;
                Ok(b)
            }
            LogitContrast::Logistic(_) => Ok(DVector::from_vec(vec![1.0, g])),
        }
    }

    /// Fitted Pr(A=1|G=g) at possibly perturbed parameters.
    pub fn prob_with(&self, params: &DVector<f64>, g: f64) -> Result<f64> {
        match self {
            LogitContrast::Saturated { fit, .. } => {
                let idx = fit.key_index(&[g.to_bits()])?;
                Ok(params[idx])
            }
            LogitContrast::Logistic(_) => Ok(sigmoid(params[0] + params[1] * g)),
        }
    }

    /// d Pr(A=1|G=g) / d params.
    pub fn prob_deriv(&self, params: &DVector<f64>, g: f64) -> Result<DVector<f64>> {
        match self {
            LogitContrast::Saturated { fit, .. } => {
                let idx = fit.key_index(&[g.to_bits()])?;
                let mut d = DVector::zeros(params.len());
                d[idx] = 1.0;
                Ok(d)
            }
            LogitContrast::Logistic(_) => {
                let p = sigmoid(params[0] + params[1] * g);
                Ok(DVector::from_vec(vec![p * (1.0 - p), p * (1.0 - p) * g]))
            }
        }
    }
}

/// Fit the logit contrast of a binary exposure on a single IV column:
/// saturated per-level logits when the IV is discrete, a main-effects
/// logistic regression otherwise.
pub fn fit_logit_contrast(g: &DVector<f64>, a: &DVector<f64>) -> Result<LogitContrast> {
    if a.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Validation("logit contrast requires binary exposure".into()));
    }
    if let Some(levels) = distinct_levels(g, DISCRETE_LEVEL_CAP) {
        if !levels.contains(&0.0) {
            return Err(Error::Validation(
                "logit contrast requires the reference level G = 0 to be observed".into(),
            ));
        }
        let gm = DMatrix::from_column_slice(g.len(), 1, g.as_slice());
        let fit = fit_saturated(&gm, a)?;
        for (mean, count) in fit.means.iter().zip(&fit.counts) {
            if *mean <= 0.0 || *mean >= 1.0 {
                return Err(Error::Validation(format!(
                    "a level with {count} observations has empirical Pr(A=1) = {mean}, so its logit is undefined"
                )));
            }
        }
        let ref_index = fit.key_index(&[0.0_f64.to_bits()])?;
        Ok(LogitContrast::Saturated { fit, ref_index })
    } else {
        let n = g.len();
        let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { g[i] });
        Ok(LogitContrast::Logistic(fit_logistic(&design, a)?))
    }
}

/// A conditional-mean model bound to the rows it was fitted on, so that
/// estimators and variance formulas can evaluate predictions, score bases,
/// and coefficient derivatives per row.
#[derive(Debug, Clone)]
pub enum FittedMean {
    Saturated { fit: SaturatedFit, row_level: Vec<usize> },
    Glm { fit: GlmFit, design: DMatrix<f64> },
}

impl FittedMean {
    pub fn param_count(&self) -> usize {
        match self {
            FittedMean::Saturated { fit, .. } => fit.level_count(),
            FittedMean::Glm { fit, .. } => fit.coefs.len(),
        }
    }

    pub fn params(&self) -> DVector<f64> {
        match self {
            FittedMean::Saturated { fit, .. } => DVector::from_vec(fit.means.clone()),
            FittedMean::Glm { fit, .. } => fit.coefs.clone(),
        }
    }

    pub fn predict(&self, i: usize) -> f64 {
        self.predict_with(&self.params(), i)
    }

    pub fn predict_with(&self, params: &DVector<f64>, i: usize) -> f64 {
        match self {
            FittedMean::Saturated { row_level, .. } => params[row_level[i]],
            FittedMean::Glm { fit, design } => {
                let row: Vec<f64> = (0..design.ncols()).map(|j| design[(i, j)]).collect();
                fit.predict_slice_with(params, &row)
            }
        }
    }

    /// Score basis x_i such that the fit solves `P_n[x_i (target_i - mean_i)] = 0`.
    pub fn basis(&self, i: usize) -> DVector<f64> {
        match self {
            FittedMean::Saturated { fit, row_level } => {
                let mut b = DVector::zeros(fit.level_count());
                b[row_level[i]] = 1.0;
                b
            }
            FittedMean::Glm { design, .. } => {
                DVector::from_fn(design.ncols(), |j, _| design[(i, j)])
            }
        }
    }

    /// Derivative of the row-i prediction with respect to the parameters.
    pub fn mean_deriv_with(&self, params: &DVector<f64>, i: usize) -> DVector<f64> {
        match self {
            FittedMean::Saturated { fit, row_level } => {
                let mut d = DVector::zeros(fit.level_count());
                d[row_level[i]] = 1.0;
                d
            }
            FittedMean::Glm { fit, design } => {
                let row: Vec<f64> = (0..design.ncols()).map(|j| design[(i, j)]).collect();
                fit.mean_deriv_slice_with(params, &row)
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            FittedMean::Saturated { .. } => "saturated",
            FittedMean::Glm { fit, .. } => match fit.link {
                Link::Identity => "linear",
                Link::Logit => "logistic",
                Link::Log => "exponential-mean",
            },
        }
    }

    /// Plain JSON record (kind, coefficients, level map) for CLI output.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            FittedMean::Saturated { fit, .. } => {
                let levels: Vec<serde_json::Value> = fit
                    .level_values
                    .iter()
                    .zip(&fit.means)
                    .map(|(vals, mean)| json!({ "level": vals, "mean": mean }))
                    .collect();
                json!({ "kind": "saturated", "levels": levels })
            }
            FittedMean::Glm { fit, .. } => json!({
                "kind": self.kind_name(),
                "coefficients": fit.coefs.as_slice(),
            }),
        }
    }
}

/// How the conditional-mean nuisance models are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NuisancePolicy {
    /// Saturated when the conditioning columns are jointly discrete,
    /// otherwise a main-effects GLM matched to the target scale.
    #[default]
    Auto,
    Saturated,
    Linear,
    Logistic,
}

/// Fit E(target | cond) under the given policy. `binary_target` picks the
/// logit link for GLM fits.
pub fn fit_conditional_mean(
    cond: &DMatrix<f64>,
    target: &DVector<f64>,
    binary_target: bool,
    policy: NuisancePolicy,
) -> Result<FittedMean> {
    let n = cond.nrows();
    let use_saturated = match policy {
        NuisancePolicy::Saturated => true,
        NuisancePolicy::Linear | NuisancePolicy::Logistic => false,
        NuisancePolicy::Auto => joint_level_count(cond, DISCRETE_LEVEL_CAP).is_some(),
    };
    if use_saturated {
        let fit = fit_saturated(cond, target)?;
        let row_level: Vec<usize> =
            (0..n).map(|i| fit.key_index(&joint_key(cond, i))).collect::<Result<_>>()?;
        return Ok(FittedMean::Saturated { fit, row_level });
    }
    let design = DMatrix::from_fn(n, cond.ncols() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            cond[(i, j - 1)]
        }
    });
    let fit = match policy {
        NuisancePolicy::Logistic => fit_logistic(&design, target)?,
        NuisancePolicy::Linear => fit_linear(&design, target)?,
        _ => {
            if binary_target {
                fit_logistic(&design, target)?
            } else {
                fit_linear(&design, target)?
            }
        }
    };
    Ok(FittedMean::Glm { fit, design })
}

/// Number of distinct joint levels if at most `cap`, else None.
fn joint_level_count(cols: &DMatrix<f64>, cap: usize) -> Option<usize> {
    let mut seen: std::collections::BTreeSet<Vec<u64>> = Default::default();
    for i in 0..cols.nrows() {
        seen.insert(joint_key(cols, i));
        if seen.len() > cap {
            return None;
        }
    }
    Some(seen.len())
}

/// Fit E(A | G) for a table under the default policy: saturated for a
/// jointly discrete instrument matrix, otherwise linear for continuous
/// exposure and logistic for binary exposure.
pub fn fit_exposure_mean(table: &ObservationTable, policy: NuisancePolicy) -> Result<FittedMean> {
    let binary = table.exposure_kind() == crate::data::ExposureKind::Binary;
    fit_conditional_mean(table.g(), table.a(), binary, policy)
}
