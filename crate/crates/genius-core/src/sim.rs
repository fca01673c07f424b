//! Data-generating processes and the Monte Carlo harness.
//!
//! Replicates are embarrassingly parallel: replicate r draws from stream
//! r + 1 of a counter-based generator seeded with the master seed, so
//! serial and parallel runs (and any thread count) produce identical
//! reports.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::additive::{genius_efficient_opts, genius_gmm, genius_single, EfficientScale, GeniusOptions, GmmConfig};
use crate::baselines::{mr_egger, oracle_tsls, tsls};
use crate::data::{ExposureKind, ObservationTable};
use crate::error::{Error, Result};
use crate::inference::wald_ci;
use crate::numeric::{median, robust_sd};
use crate::parallel::{map_indexed, map_indexed_serial};

/// Which of the three identifying assumptions hold in a scenario: IV
/// relevance always does; the tags mark violations of IV independence and
/// the exclusion restriction for the invalid instruments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// All assumptions hold.
    TTT,
    /// Exclusion restriction fails (direct IV effects on the outcome).
    TTF,
    /// IV independence and exclusion both fail.
    TFF,
}

impl std::str::FromStr for Violation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TTT" => Ok(Violation::TTT),
            "TTF" => Ok(Violation::TTF),
            "TFF" => Ok(Violation::TFF),
            other => Err(Error::Validation(format!("unknown violation tag '{other}'"))),
        }
    }
}

/// Scenario parameters for the simulation designs: a single IV with fixed
/// strengths, or ten IVs with per-replicate random strengths and a fixed
/// pattern of invalid instruments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub exposure: ExposureKind,
    pub n: usize,
    /// 1 or 10 instrument columns.
    pub ivs: usize,
    /// Number of invalid IVs (multi-IV designs): 0, 3, 6, or 10.
    #[serde(default)]
    pub invalid: usize,
    pub violation: Violation,
    /// Baseline exposure noise scale.
    pub lambda0: f64,
    /// Heteroscedasticity strength (single IV: 1 or 5; multi IV: 0.5 per
    /// column).
    pub lambda1: f64,
    /// Single-IV binary-exposure strength (-0.5 or -1).
    pub gamma_b: f64,
    /// Single-IV continuous-exposure strength.
    pub gamma_c: f64,
    /// Direct-effect coefficient for the single-IV designs.
    pub alpha: f64,
    /// IV-confounder coefficient, binary exposure, single IV.
    pub phi_b: f64,
    /// IV-confounder coefficient, continuous exposure, single IV.
    pub phi_c: f64,
    /// True causal effect.
    pub beta: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            exposure: ExposureKind::Continuous,
            n: 500,
            ivs: 1,
            invalid: 0,
            violation: Violation::TTT,
            lambda0: 1.0,
            lambda1: 1.0,
            gamma_b: -0.5,
            gamma_c: -1.0,
            alpha: -0.5,
            phi_b: -0.2,
            phi_c: -2.0,
            beta: 0.5,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Validation("scenario requires n > 0".into()));
        }
        match self.ivs {
            1 => {
                if self.invalid > 1 {
                    return Err(Error::Validation(
                        "single-IV designs take invalid in {0, 1}".into(),
                    ));
                }
            }
            10 => {
                if ![0, 3, 6, 10].contains(&self.invalid) {
                    return Err(Error::Validation(
                        "multi-IV designs take invalid in {0, 3, 6, 10}".into(),
                    ));
                }
            }
            other => {
                return Err(Error::Validation(format!(
                    "scenario supports 1 or 10 IVs, got {other}"
                )))
            }
        }
        if self.violation == Violation::TTT && self.ivs == 10 && self.invalid != 0 {
            return Err(Error::Validation(
                "TTT means every IV is valid; set invalid = 0".into(),
            ));
        }
        if self.exposure == ExposureKind::Count {
            return Err(Error::Validation(
                "simulation designs cover binary and continuous exposures".into(),
            ));
        }
        Ok(())
    }

    /// Indices of the valid IV columns (the invalid ones come first).
    pub fn valid_columns(&self) -> Vec<usize> {
        (self.invalid.min(self.ivs)..self.ivs).collect()
    }
}

/// Per-draw accounting for the binary-exposure success-probability clipping.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct GenDiagnostics {
    pub clipped: usize,
    pub draws: usize,
}

/// Inverse-CDF draw from a normal truncated to [a, b].
pub fn truncated_normal_sample(
    a: f64,
    b: f64,
    mu: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> f64 {
    assert!(a < b && sigma > 0.0);
    let std = Normal::new(0.0, 1.0).unwrap();
    let lo = std.cdf((a - mu) / sigma);
    let hi = std.cdf((b - mu) / sigma);
    let u: f64 = rng.gen();
    let v = std.inverse_cdf(lo + u * (hi - lo)) * sigma + mu;
    v.clamp(a, b)
}

/// Mean of the truncated normal used by the binary-exposure designs.
fn truncated_normal_mean(a: f64, b: f64, mu: f64, sigma: f64) -> f64 {
    let std = Normal::new(0.0, 1.0).unwrap();
    let alpha = (a - mu) / sigma;
    let beta = (b - mu) / sigma;
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    mu + sigma * (pdf(alpha) - pdf(beta)) / (std.cdf(beta) - std.cdf(alpha))
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Per-replicate parameter vectors for the ten-IV designs.
struct MultiParams {
    alpha: Vec<f64>,
    phi: Vec<f64>,
    gamma: Vec<f64>,
}

fn multi_params(spec: &ScenarioSpec, rng: &mut impl Rng) -> MultiParams {
    let p = spec.ivs;
    let unif = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| lo + (hi - lo) * rng.gen::<f64>();
    let gamma: Vec<f64> = (0..p)
        .map(|_| match spec.exposure {
            ExposureKind::Binary => unif(rng, -0.15, -0.05),
            _ => unif(rng, -3.0, -2.0),
        })
        .collect();
    let mut alpha = vec![0.0; p];
    let mut phi = vec![0.0; p];
    let fill = |dst: &mut [f64], pattern: &[f64], scale: f64| {
        for (d, v) in dst.iter_mut().zip(pattern) {
            *d = scale * v;
        }
    };
    match spec.invalid {
        0 => {}
        3 => {
            fill(&mut alpha, &[1.0, 1.0, 1.0], -0.5);
            match spec.exposure {
                ExposureKind::Binary => fill(&mut phi, &[1.0, 1.0, 1.0], -0.05),
                _ => fill(&mut phi, &[1.0, 1.0, 1.0], -0.25),
            }
        }
        6 => {
            fill(&mut alpha, &[1.0, 1.0, 2.0, 2.0, 4.0, 4.0], -0.25);
            match spec.exposure {
                ExposureKind::Binary => fill(&mut phi, &[1.0, 1.0, 3.0, 3.0, 5.0, 5.0], -0.01),
                _ => fill(&mut phi, &[0.5, 0.5, 1.0, 1.0, 2.0, 2.0], -0.25),
            }
        }
        10 => {
            for j in 0..p {
                alpha[j] = unif(rng, -2.0, -0.5);
                phi[j] = match spec.exposure {
                    ExposureKind::Binary => unif(rng, -0.02, -0.01),
                    _ => unif(rng, -2.0, -0.5),
                };
            }
        }
        _ => unreachable!("validated earlier"),
    }
    // the violation tag switches coefficient blocks off
    match spec.violation {
        Violation::TTT => {
            alpha.iter_mut().for_each(|v| *v = 0.0);
            phi.iter_mut().for_each(|v| *v = 0.0);
        }
        Violation::TTF => phi.iter_mut().for_each(|v| *v = 0.0),
        Violation::TFF => {}
    }
    MultiParams { alpha, phi, gamma }
}

/// Draw one table from the scenario. Replicate r of master seed s is
/// bit-reproducible: the generator is seeded with s on stream r.
pub fn generate(
    spec: &ScenarioSpec,
    master_seed: u64,
    replicate: u64,
) -> Result<(ObservationTable, GenDiagnostics)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replicate);
    let n = spec.n;
    let p = spec.ivs;
    let mut diag = GenDiagnostics::default();

    let mut g = DMatrix::zeros(n, p);
    let mut a = DVector::zeros(n);
    let mut y = DVector::zeros(n);

    // single-IV designs use the fixed scenario coefficients, zeroed
    // according to the violation tag
    let (alpha1, phi_b1, phi_c1) = match spec.violation {
        Violation::TTT => (0.0, 0.0, 0.0),
        Violation::TTF => (spec.alpha, 0.0, 0.0),
        Violation::TFF => (spec.alpha, spec.phi_b, spec.phi_c),
    };
    let multi = if p > 1 { Some(multi_params(spec, &mut rng)) } else { None };
    let eps_mean = truncated_normal_mean(0.2, 0.5, 0.35, 1.0);

    for i in 0..n {
        for j in 0..p {
            g[(i, j)] = if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 };
        }
        let g_row: Vec<f64> = (0..p).map(|j| g[(i, j)]).collect();
        let dot = |coefs: &[f64]| -> f64 {
            coefs.iter().zip(&g_row).map(|(c, gv)| c * gv).sum()
        };
        let (alpha_term, phi_term_b, phi_term_c, gamma_term_b, gamma_term_c, lambda_term) =
            match &multi {
                Some(mp) => (
                    dot(&mp.alpha),
                    dot(&mp.phi),
                    dot(&mp.phi),
                    dot(&mp.gamma),
                    dot(&mp.gamma),
                    spec.lambda0 + spec.lambda1 * g_row.iter().sum::<f64>(),
                ),
                None => (
                    alpha1 * g_row[0],
                    phi_b1 * g_row[0],
                    phi_c1 * g_row[0],
                    spec.gamma_b * g_row[0],
                    spec.gamma_c * g_row[0],
                    spec.lambda0 + spec.lambda1 * g_row[0],
                ),
            };

        let (ai, ui) = match spec.exposure {
            ExposureKind::Binary => {
                let eps = truncated_normal_sample(0.2, 0.5, 0.35, 1.0, &mut rng);
                let u = phi_term_b + eps;
                // E(U|G) = phi'G + E(eps), so the centered confounder shift
                // is eps - E(eps)
                let logistic = 1.0 / (1.0 + (-gamma_term_b).exp());
                let mut prob = logistic + (eps - eps_mean);
                diag.draws += 1;
                if !(0.0..=1.0).contains(&prob) {
                    prob = prob.clamp(0.0, 1.0);
                    diag.clipped += 1;
                }
                let av = if rng.gen::<f64>() < prob { 1.0 } else { 0.0 };
                (av, u)
            }
            _ => {
                let u = phi_term_c + standard_normal(&mut rng);
                let sd = lambda_term.abs();
                let av = gamma_term_c + u + sd * standard_normal(&mut rng);
                (av, u)
            }
        };
        a[i] = ai;
        y[i] = alpha_term + spec.beta * ai + ui + standard_normal(&mut rng);
    }

    let table = ObservationTable::new(g, a, y, spec.exposure, None, None)?;
    Ok((table, diag))
}

/// Estimators the harness can run on a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Closed-form single-IV estimator, or two-step optimal GMM when the
    /// scenario has several IVs.
    Genius,
    GeniusEfficient,
    Tsls,
    OracleTsls,
    MrEgger,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Genius => "genius",
            EstimatorKind::GeniusEfficient => "genius-efficient",
            EstimatorKind::Tsls => "tsls",
            EstimatorKind::OracleTsls => "oracle-tsls",
            EstimatorKind::MrEgger => "mr-egger",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "genius" => Ok(EstimatorKind::Genius),
            "genius-efficient" => Ok(EstimatorKind::GeniusEfficient),
            "tsls" => Ok(EstimatorKind::Tsls),
            "oracle-tsls" => Ok(EstimatorKind::OracleTsls),
            "mr-egger" => Ok(EstimatorKind::MrEgger),
            other => Err(Error::Validation(format!("unknown estimator '{other}'"))),
        }
    }
}

/// Per-estimator Monte Carlo summary. The bias metric is the absolute
/// value of the median bias, |median(estimate) - beta|, the robust spread
/// is IQR / 1.349, and coverage counts Wald intervals containing the truth.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorReport {
    pub estimator: String,
    pub abs_median_bias: f64,
    pub robust_sd: f64,
    pub converged: usize,
    pub failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloReport {
    pub scenario: ScenarioSpec,
    pub replicates: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorReport>,
    /// Fraction of binary-exposure success probabilities that had to be
    /// clipped into [0, 1]; values above 1% signal a design problem.
    pub clipped_fraction: f64,
    /// Wall-clock seconds; omitted unless timing was requested so identical
    /// invocations stay byte-identical.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_seconds: Option<f64>,
}

/// One replicate's results: per estimator, the estimate and whether the
/// Wald interval covered the truth.
type ReplicateRow = Vec<std::result::Result<(f64, Option<bool>), String>>;

fn run_replicate(
    spec: &ScenarioSpec,
    estimators: &[EstimatorKind],
    master_seed: u64,
    replicate: u64,
) -> (ReplicateRow, GenDiagnostics) {
    let (table, gen_diag) = match generate(spec, master_seed, replicate) {
        Ok(v) => v,
        Err(e) => {
            return (
                estimators.iter().map(|_| Err(format!("generation failed: {e}"))).collect(),
                GenDiagnostics::default(),
            )
        }
    };
    let beta_true = spec.beta;
    let covers = |est: f64, se: f64| -> Option<bool> {
        if se.is_finite() && se > 0.0 {
            let (lo, hi) = wald_ci(est, se, 0.95);
            Some(lo <= beta_true && beta_true <= hi)
        } else {
            None
        }
    };
    let row = estimators
        .iter()
        .map(|kind| -> std::result::Result<(f64, Option<bool>), String> {
            match kind {
                EstimatorKind::Genius => {
                    if spec.ivs == 1 {
                        let e = genius_single(&table).map_err(|e| e.to_string())?;
                        Ok((e.beta_hat, covers(e.beta_hat, e.se)))
                    } else {
                        let e = genius_gmm(&table, &GmmConfig::default())
                            .map_err(|e| e.to_string())?;
                        Ok((e.beta_hat, covers(e.beta_hat, e.se)))
                    }
                }
                EstimatorKind::GeniusEfficient => {
                    let e = genius_efficient_opts(
                        &table,
                        EfficientScale::Additive,
                        &GeniusOptions::default(),
                    )
                    .map_err(|e| e.to_string())?;
                    Ok((e.beta_hat, covers(e.beta_hat, e.se)))
                }
                EstimatorKind::Tsls => {
                    let e = tsls(&table, None).map_err(|e| e.to_string())?;
                    Ok((e.beta_hat, covers(e.beta_hat, e.se)))
                }
                EstimatorKind::OracleTsls => {
                    let valid = spec.valid_columns();
                    let e = oracle_tsls(&table, &valid).map_err(|e| e.to_string())?;
                    Ok((e.beta_hat, covers(e.beta_hat, e.se)))
                }
                EstimatorKind::MrEgger => {
                    let e = mr_egger(&table).map_err(|e| e.to_string())?;
                    Ok((e.beta_hat, covers(e.beta_hat, e.se)))
                }
            }
        })
        .collect();
    (row, gen_diag)
}

fn aggregate(
    spec: &ScenarioSpec,
    estimators: &[EstimatorKind],
    seed: u64,
    replicates: usize,
    rows: Vec<(ReplicateRow, GenDiagnostics)>,
) -> MonteCarloReport {
    let mut reports = Vec::with_capacity(estimators.len());
    for (e_idx, kind) in estimators.iter().enumerate() {
        let mut estimates = Vec::new();
        let mut failures = 0;
        let mut cover_hits = 0usize;
        let mut cover_total = 0usize;
        for (row, _) in &rows {
            match &row[e_idx] {
                Ok((b, cov)) => {
                    estimates.push(*b);
                    if let Some(c) = cov {
                        cover_total += 1;
                        if *c {
                            cover_hits += 1;
                        }
                    }
                }
                Err(_) => failures += 1,
            }
        }
        let (bias, sd) = if estimates.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            ((median(&estimates) - spec.beta).abs(), robust_sd(&estimates))
        };
        reports.push(EstimatorReport {
            estimator: kind.name().into(),
            abs_median_bias: bias,
            robust_sd: sd,
            converged: estimates.len(),
            failures,
            coverage: if cover_total > 0 {
                Some(cover_hits as f64 / cover_total as f64)
            } else {
                None
            },
        });
    }
    let (clipped, draws) = rows
        .iter()
        .fold((0usize, 0usize), |(c, d), (_, g)| (c + g.clipped, d + g.draws));
    MonteCarloReport {
        scenario: spec.clone(),
        replicates,
        seed,
        estimators: reports,
        clipped_fraction: if draws > 0 { clipped as f64 / draws as f64 } else { 0.0 },
        runtime_seconds: None,
    }
}

fn applicable(spec: &ScenarioSpec, estimators: &[EstimatorKind]) -> Result<()> {
    for kind in estimators {
        match kind {
            EstimatorKind::OracleTsls => {
                if spec.valid_columns().is_empty() {
                    return Err(Error::Validation(
                        "oracle TSLS is undefined when every IV is invalid".into(),
                    ));
                }
            }
            EstimatorKind::MrEgger => {
                if spec.ivs < 2 {
                    return Err(Error::Validation(
                        "Egger regression requires several IVs".into(),
                    ));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Run the scenario for every estimator; replicates fan out across threads
/// when the `parallel` feature is enabled.
pub fn run_monte_carlo(
    spec: &ScenarioSpec,
    estimators: &[EstimatorKind],
    replicates: usize,
    seed: u64,
) -> Result<MonteCarloReport> {
    spec.validate()?;
    applicable(spec, estimators)?;
    let rows = map_indexed(replicates, |r| {
        run_replicate(spec, estimators, seed, r as u64 + 1)
    });
    Ok(aggregate(spec, estimators, seed, replicates, rows))
}

/// Sequential counterpart of [`run_monte_carlo`]; produces the identical
/// report and exists so the benchmark suite can compare the two paths.
pub fn run_monte_carlo_serial(
    spec: &ScenarioSpec,
    estimators: &[EstimatorKind],
    replicates: usize,
    seed: u64,
) -> Result<MonteCarloReport> {
    spec.validate()?;
    applicable(spec, estimators)?;
    let rows = map_indexed_serial(replicates, |r| {
        run_replicate(spec, estimators, seed, r as u64 + 1)
    });
    Ok(aggregate(spec, estimators, seed, replicates, rows))
}

/// Plain-text rendering of a report in the simulation tables' layout.
pub fn format_report_table(report: &MonteCarloReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "scenario: {} exposure, n={}, ivs={}, invalid={}, {:?}, {} replicates (seed {})\n",
        report.scenario.exposure,
        report.scenario.n,
        report.scenario.ivs,
        report.scenario.invalid,
        report.scenario.violation,
        report.replicates,
        report.seed,
    ));
    out.push_str(&format!(
        "{:<18} {:>14} {:>12} {:>10} {:>9} {:>9}\n",
        "estimator", "|median bias|", "robust SD", "converged", "failed", "coverage"
    ));
    for e in &report.estimators {
        out.push_str(&format!(
            "{:<18} {:>14.4} {:>12.4} {:>10} {:>9} {:>9}\n",
            e.estimator,
            e.abs_median_bias,
            e.robust_sd,
            e.converged,
            e.failures,
            e.coverage.map_or("-".to_string(), |c| format!("{c:.3}")),
        ));
    }
    if report.clipped_fraction > 0.0 {
        out.push_str(&format!(
            "clipped success probabilities: {:.4}%\n",
            100.0 * report.clipped_fraction
        ));
    }
    out
}

/// Parse a scenario from `key = value` text (one pair per line, `#`
/// comments allowed). Unknown keys are rejected.
pub fn parse_scenario(text: &str) -> Result<ScenarioSpec> {
    let mut spec = ScenarioSpec::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Validation(format!("scenario line {} is not 'key = value'", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let parse_f = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::Validation(format!("bad numeric value '{v}' for {key}")))
        };
        match key {
            "exposure" => {
                spec.exposure = match value {
                    "binary" => ExposureKind::Binary,
                    "continuous" => ExposureKind::Continuous,
                    other => {
                        return Err(Error::Validation(format!(
                            "exposure must be binary or continuous, got '{other}'"
                        )))
                    }
                }
            }
            "n" => {
                spec.n = value
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad n '{value}'")))?
            }
            "ivs" => {
                spec.ivs = value
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad ivs '{value}'")))?
            }
            "invalid" => {
                spec.invalid = value
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad invalid '{value}'")))?
            }
            "violation" => spec.violation = value.parse()?,
            "lambda0" => spec.lambda0 = parse_f(value)?,
            "lambda1" => spec.lambda1 = parse_f(value)?,
            "gamma_b" => spec.gamma_b = parse_f(value)?,
            "gamma_c" => spec.gamma_c = parse_f(value)?,
            "alpha" => spec.alpha = parse_f(value)?,
            "phi_b" => spec.phi_b = parse_f(value)?,
            "phi_c" => spec.phi_c = parse_f(value)?,
            "beta" => spec.beta = parse_f(value)?,
            other => {
                return Err(Error::Validation(format!("unknown scenario key '{other}'")))
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}
