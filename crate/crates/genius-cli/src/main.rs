//! Command-line front end: estimation, first-stage diagnostics, and the
//! Monte Carlo harness.
//!
//! Exit codes: 0 success, 2 validation error, 3 identification error,
//! 4 convergence failure, 5 numerical error, 6 i/o error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use genius_core::additive::{
    genius_covariates_opts, genius_efficient_opts, genius_gmm_with_vcov,
    genius_single_lewbel_opts, genius_single_with_vcov, CovariateTransform, EfficientScale,
    GeniusOptions, GmmConfig,
};
use genius_core::baselines::{mr_egger, oracle_tsls, tsls};
use genius_core::data::{load_csv, relevance_diagnostic_with_threshold, CsvSchema, ExposureKind};
use genius_core::inference::{fd_check_gmm, fd_check_single, SandwichParts};
use genius_core::link::{
    case_control_adjust, genius_mult_exposure_opts, genius_mult_outcome_opts,
    genius_odds_ratio_opts, SamplingAdjustment,
};
use genius_core::nuisance::{fit_exposure_mean, NuisancePolicy};
use genius_core::sim::{
    format_report_table, parse_scenario, run_monte_carlo, run_monte_carlo_serial, EstimatorKind,
};
use genius_core::survival::{
    genius_additive_hazards_bootstrap, write_path_csv, DEFAULT_BOOTSTRAP,
};
use genius_core::Error;

#[derive(Parser)]
#[command(
    name = "genius",
    about = "Heteroscedasticity-based IV estimation robust to invalid instruments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a causal effect from a CSV table.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo scenario and report per-estimator summaries.
    Simulate(SimulateArgs),
    /// First-stage heteroscedasticity diagnostics per IV column.
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Genius,
    GeniusLewbel,
    GeniusGmm,
    GeniusEfficient,
    GeniusCovariates,
    MultOutcome,
    MultExposure,
    OddsRatio,
    AddHazards,
    Tsls,
    OracleTsls,
    MrEgger,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExposureArg {
    Binary,
    Continuous,
    Count,
}

impl From<ExposureArg> for ExposureKind {
    fn from(v: ExposureArg) -> Self {
        match v {
            ExposureArg::Binary => ExposureKind::Binary,
            ExposureArg::Continuous => ExposureKind::Continuous,
            ExposureArg::Count => ExposureKind::Count,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScaleArg {
    Additive,
    Multiplicative,
}

#[derive(Args)]
struct TableArgs {
    /// Input CSV file with a header row.
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated IV column names.
    #[arg(long, value_delimiter = ',', required = true)]
    iv_cols: Vec<String>,
    #[arg(long)]
    exposure_col: String,
    /// Outcome column; in survival mode this is the follow-up time.
    #[arg(long, alias = "time-col")]
    outcome_col: String,
    #[arg(long, value_delimiter = ',')]
    covariate_cols: Vec<String>,
    /// Event indicator column (survival mode).
    #[arg(long)]
    event_col: Option<String>,
    #[arg(long, value_enum, default_value = "continuous")]
    exposure_kind: ExposureArg,
}

impl TableArgs {
    fn schema(&self) -> CsvSchema {
        CsvSchema {
            iv_cols: self.iv_cols.clone(),
            exposure_col: self.exposure_col.clone(),
            outcome_col: self.outcome_col.clone(),
            covariate_cols: self.covariate_cols.clone(),
            event_col: self.event_col.clone(),
            exposure_kind: self.exposure_kind.into(),
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    table: TableArgs,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Confidence level for Wald intervals.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Valid IV columns for oracle TSLS (zero-based indices).
    #[arg(long, value_delimiter = ',')]
    valid_ivs: Vec<usize>,
    /// Case-control sampling: derive target-population moments.
    #[arg(long)]
    case_control: bool,
    /// Approximate the moments by the controls (rare outcome).
    #[arg(long, requires = "case_control")]
    controls_only: bool,
    /// Case-control sampling fractions "cases,controls".
    #[arg(long, value_delimiter = ',', num_args = 1..=2, conflicts_with = "controls_only")]
    sampling_fractions: Option<Vec<f64>>,
    /// Outcome scale for the efficient estimator.
    #[arg(long, value_enum, default_value = "additive")]
    scale: ScaleArg,
    /// Covariate column index used as h(C) by genius-covariates.
    #[arg(long)]
    h_col: Option<usize>,
    /// Horizons at which survival paths are summarized.
    #[arg(long, value_delimiter = ',')]
    horizons: Vec<f64>,
    /// Bootstrap resamples for survival standard errors.
    #[arg(long, default_value_t = DEFAULT_BOOTSTRAP)]
    bootstrap: usize,
    /// Seed for the survival bootstrap streams.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write the fitted survival step functions to this CSV path.
    #[arg(long)]
    step_out: Option<PathBuf>,
    /// Write the stacked-moment covariance matrix to this CSV path.
    #[arg(long)]
    emit_vcov: Option<PathBuf>,
    /// Run the finite-difference bread self-test and report the deviation.
    #[arg(long)]
    self_test: bool,
    /// Write JSON output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for bootstrap parallelism (default: GENIUS_THREADS or
    /// all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file (key = value lines).
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = 200)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Estimators to run (default depends on the scenario's IV count).
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<String>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print a formatted text table to stderr.
    #[arg(long)]
    text: bool,
    /// Include wall-clock runtime in the report (breaks byte-identical
    /// output across runs).
    #[arg(long)]
    timing: bool,
    /// Force the sequential code path.
    #[arg(long)]
    serial: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    table: TableArgs,
    /// Weak-identification threshold on |phi|/se.
    #[arg(long, default_value_t = 2.0)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Validation(_) | Error::InvalidCells(_) | Error::Csv(_) => 2,
        Error::Identification(_) => 3,
        Error::Convergence(_) => 4,
        Error::Numerical(_) => 5,
        Error::Io(_) => 6,
    }
}

fn emit(value: &serde_json::Value, out: &Option<PathBuf>) -> genius_core::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    match out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn vcov_to_csv(parts: &SandwichParts, path: &PathBuf) -> genius_core::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let names: Vec<String> = parts
        .layout
        .iter()
        .flat_map(|(name, count)| (0..*count).map(move |i| format!("{name}{i}")))
        .collect();
    w.write_record(&names)?;
    let d = parts.covariance.nrows();
    for r in 0..d {
        let row: Vec<String> = (0..d).map(|c| parts.covariance[(r, c)].to_string()).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn configure_threads(threads: Option<usize>) {
    let count =
        threads.or_else(|| std::env::var("GENIUS_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(k) = count {
        // a failed build means a pool already exists, which is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
}

fn run_estimate(args: EstimateArgs) -> genius_core::Result<()> {
    configure_threads(args.threads);
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Error::Validation("confidence level must lie in (0,1)".into()));
    }
    // survival columns and method must agree
    let survival_method = args.method == MethodArg::AddHazards;
    if survival_method && args.table.event_col.is_none() {
        return Err(Error::Validation("add-hazards requires --event-col and --time-col".into()));
    }
    if !survival_method && args.table.event_col.is_some() {
        return Err(Error::Validation(
            "an event column was declared but the method is not add-hazards".into(),
        ));
    }
    if let Some(f) = &args.sampling_fractions {
        if f.len() != 2 {
            return Err(Error::Validation(
                "--sampling-fractions takes two values: cases,controls".into(),
            ));
        }
    }
    let schema = args.table.schema();
    let report = load_csv(&args.table.input, &schema)?;
    let table = report.table;
    for issue in &report.rejected_rows {
        eprintln!("note: dropped {issue}");
    }
    let kind = table.exposure_kind();

    // method/exposure compatibility
    match args.method {
        MethodArg::OddsRatio if kind != ExposureKind::Binary => {
            return Err(Error::Validation(
                "odds-ratio requires a binary exposure (--exposure-kind binary)".into(),
            ))
        }
        MethodArg::MultExposure if kind == ExposureKind::Continuous => {
            return Err(Error::Validation(
                "mult-exposure requires a count or binary exposure".into(),
            ))
        }
        _ => {}
    }

    let opts = GeniusOptions { policy: NuisancePolicy::Auto, level: args.level };
    let mut vcov: Option<SandwichParts> = None;
    let mut self_test: Option<f64> = None;

    let mut value = match args.method {
        MethodArg::Genius => {
            let (est, parts) = genius_single_with_vcov(&table, &opts)?;
            if args.self_test {
                let fit = fit_exposure_mean(&table, opts.policy)?;
                self_test = Some(fd_check_single(&table, &fit, est.beta_hat)?);
            }
            vcov = Some(parts);
            estimate_json(&est, &table)
        }
        MethodArg::GeniusLewbel => {
            let est = genius_single_lewbel_opts(&table, args.level)?;
            estimate_json(&est, &table)
        }
        MethodArg::GeniusGmm => {
            let config = GmmConfig { level: args.level, ..Default::default() };
            let (est, parts) = genius_gmm_with_vcov(&table, &config)?;
            if args.self_test {
                let fit = fit_exposure_mean(&table, NuisancePolicy::Auto)?;
                let k = table.p();
                let w = nalgebra::DMatrix::identity(k, k);
                self_test = Some(fd_check_gmm(&table, &fit, &w, est.beta_hat, true)?);
            }
            vcov = Some(parts);
            estimate_json(&est, &table)
        }
        MethodArg::GeniusEfficient => {
            let scale = match args.scale {
                ScaleArg::Additive => EfficientScale::Additive,
                ScaleArg::Multiplicative => EfficientScale::Multiplicative,
            };
            let est = genius_efficient_opts(&table, scale, &opts)?;
            estimate_json(&est, &table)
        }
        MethodArg::GeniusCovariates => {
            let h = match args.h_col {
                Some(j) => CovariateTransform::Column(j),
                None => CovariateTransform::Unit,
            };
            let est = genius_covariates_opts(&table, h, &opts)?;
            estimate_json(&est, &table)
        }
        MethodArg::MultOutcome => {
            let external = if args.case_control {
                let adj = match &args.sampling_fractions {
                    Some(f) => SamplingAdjustment::Fractions { cases: f[0], controls: f[1] },
                    None => SamplingAdjustment::ControlsOnly,
                };
                Some(case_control_adjust(&table, adj)?)
            } else {
                None
            };
            let est = genius_mult_outcome_opts(
                &table,
                external.as_ref(),
                NuisancePolicy::Auto,
                args.level,
            )?;
            link_json(&est, &table)
        }
        MethodArg::MultExposure => {
            let est = genius_mult_exposure_opts(&table, args.level)?;
            link_json(&est, &table)
        }
        MethodArg::OddsRatio => {
            let est = genius_odds_ratio_opts(&table, args.level)?;
            link_json(&est, &table)
        }
        MethodArg::AddHazards => {
            let horizons = if args.horizons.is_empty() {
                // default: quartiles of the observed event times
                let mut times: Vec<f64> = (0..table.n())
                    .filter(|&i| table.delta().unwrap()[i] == 1)
                    .map(|i| table.y()[i])
                    .collect();
                times.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if times.is_empty() {
                    vec![]
                } else {
                    [0.25, 0.5, 0.75]
                        .iter()
                        .map(|q| times[((times.len() - 1) as f64 * q) as usize])
                        .collect()
                }
            } else {
                args.horizons.clone()
            };
            if horizons.is_empty() {
                return Err(Error::Validation(
                    "no uncensored events and no --horizons given".into(),
                ));
            }
            let fit =
                genius_additive_hazards_bootstrap(&table, &horizons, args.bootstrap, args.seed)?;
            if let Some(path) = &args.step_out {
                write_path_csv(&fit.path, path)?;
            }
            json!({
                "method": "add-hazards",
                "n": table.n(),
                "p": table.p(),
                "horizons": fit.horizons,
                "bootstrap_resamples": fit.bootstrap_resamples,
                "bootstrap_failures": fit.bootstrap_failures,
                "event_times": fit.path.event_times.len(),
            })
        }
        MethodArg::Tsls => {
            let est = tsls(&table, None)?;
            baseline_json(&est, &table, args.level)
        }
        MethodArg::OracleTsls => {
            if args.valid_ivs.is_empty() {
                return Err(Error::Validation("oracle-tsls requires --valid-ivs".into()));
            }
            let est = oracle_tsls(&table, &args.valid_ivs)?;
            baseline_json(&est, &table, args.level)
        }
        MethodArg::MrEgger => {
            let est = mr_egger(&table)?;
            baseline_json(&est, &table, args.level)
        }
    };

    if let Some(dev) = self_test {
        value["bread_fd_deviation"] = json!(dev);
    }
    if let Some(path) = &args.emit_vcov {
        match &vcov {
            Some(parts) => vcov_to_csv(parts, path)?,
            None => {
                return Err(Error::Validation(
                    "--emit-vcov is available for methods genius and genius-gmm".into(),
                ))
            }
        }
    }
    emit(&value, &args.out)
}

fn estimate_json(
    est: &genius_core::additive::CausalEstimate,
    table: &genius_core::data::ObservationTable,
) -> serde_json::Value {
    json!({
        "beta": est.beta_hat,
        "se": est.se,
        "ci_lo": est.ci.0,
        "ci_hi": est.ci.1,
        "level": est.level,
        "phi_hat": est.diagnostics.phi_hat,
        "method": est.method,
        "n": table.n(),
        "p": table.p(),
        "diagnostics": est.diagnostics,
    })
}

fn link_json(
    est: &genius_core::link::LinkEstimate,
    table: &genius_core::data::ObservationTable,
) -> serde_json::Value {
    json!({
        "beta": est.beta_hat,
        "exp_beta": est.exp_beta,
        "se": est.se,
        "ci_lo": est.ci.0,
        "ci_hi": est.ci.1,
        "exp_ci_lo": est.exp_ci.0,
        "exp_ci_hi": est.exp_ci.1,
        "level": est.level,
        "method": est.link,
        "n": table.n(),
        "p": table.p(),
        "diagnostics": est.diagnostics,
    })
}

fn baseline_json(
    est: &genius_core::baselines::BaselineEstimate,
    table: &genius_core::data::ObservationTable,
    level: f64,
) -> serde_json::Value {
    let (lo, hi) = genius_core::inference::wald_ci(est.beta_hat, est.se, level);
    json!({
        "beta": est.beta_hat,
        "se": est.se,
        "ci_lo": lo,
        "ci_hi": hi,
        "level": level,
        "method": est.method,
        "valid_set": est.valid_set,
        "n": table.n(),
        "p": table.p(),
    })
}

fn run_simulate(args: SimulateArgs) -> genius_core::Result<()> {
    configure_threads(args.threads);
    let text = std::fs::read_to_string(&args.scenario)?;
    let spec = parse_scenario(&text)?;
    let estimators: Vec<EstimatorKind> = if args.estimators.is_empty() {
        if spec.ivs == 1 {
            vec![EstimatorKind::Genius, EstimatorKind::Tsls]
        } else {
            let mut kinds = vec![
                EstimatorKind::Genius,
                EstimatorKind::GeniusEfficient,
                EstimatorKind::Tsls,
            ];
            if !spec.valid_columns().is_empty() {
                kinds.push(EstimatorKind::OracleTsls);
            }
            kinds.push(EstimatorKind::MrEgger);
            kinds
        }
    } else {
        args.estimators.iter().map(|s| s.parse()).collect::<genius_core::Result<_>>()?
    };

    let start = std::time::Instant::now();
    let mut report = if args.serial {
        run_monte_carlo_serial(&spec, &estimators, args.replicates, args.seed)?
    } else {
        run_monte_carlo(&spec, &estimators, args.replicates, args.seed)?
    };
    if args.timing {
        report.runtime_seconds = Some(start.elapsed().as_secs_f64());
    }
    if args.text {
        eprint!("{}", format_report_table(&report));
    }
    let value = serde_json::to_value(&report).expect("report serializes");
    emit(&value, &args.out)
}

fn run_diagnose(args: DiagnoseArgs) -> genius_core::Result<()> {
    let schema = args.table.schema();
    let report = load_csv(&args.table.input, &schema)?;
    let diag = relevance_diagnostic_with_threshold(&report.table, args.threshold);
    let value = json!({
        "n": report.table.n(),
        "p": report.table.p(),
        "threshold": diag.threshold,
        "per_iv": diag.per_iv,
        "weak": diag.any_weak(),
    });
    emit(&value, &args.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(args) => run_estimate(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Diagnose(args) => run_diagnose(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
