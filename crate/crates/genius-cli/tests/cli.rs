//! End-to-end tests of the command-line interface: every estimator is
//! reachable, error paths map to their exit codes, and outputs are
//! byte-identical across identical invocations.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};

fn genius(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genius"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_file(path: &Path, content: &str) {
    let mut f = std::fs::File::create(path).unwrap();
    f.write_all(content.as_bytes()).unwrap();
}

/// Heteroscedastic single-IV fixture with binary G, continuous A.
fn single_iv_csv(dir: &Path) -> std::path::PathBuf {
    let mut content = String::from("g,a,y\n");
    let mut state = 88172645463325252u64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..200 {
        let g = if next() < 0.5 { 1.0 } else { 0.0 };
        let u = next() - 0.5;
        let a = -1.0 * g + u + (1.0 + 1.5 * g) * (next() - 0.5);
        let y = 0.5 * a + u + next() - 0.5;
        content.push_str(&format!("{g},{a},{y}\n"));
    }
    let path = dir.join("single.csv");
    write_file(&path, &content);
    path
}

/// Binary-exposure fixture for the link estimators.
fn binary_exposure_csv(dir: &Path) -> std::path::PathBuf {
    let mut content = String::from("g,a,y\n");
    let mut state = 1181783497276652981u64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..400 {
        let g = if next() < 0.5 { 1.0 } else { 0.0 };
        let u = next();
        let p = 0.25 + 0.4 * g + 0.2 * (u - 0.5);
        let a = if next() < p { 1.0 } else { 0.0 };
        let y = if next() < (0.1 + 0.05 * g + 0.1 * u) * (0.4f64 * a).exp() { 1.0 } else { 0.0 };
        content.push_str(&format!("{g},{a},{y}\n"));
    }
    let path = dir.join("binary.csv");
    write_file(&path, &content);
    path
}

/// Fixture from the discrete joint law the odds-ratio estimator assumes:
/// instrument and confounder independent among the unexposed, exposure odds
/// loglinear in both, outcome mean multiplicative in the exposure.
fn odds_ratio_csv(dir: &Path) -> std::path::PathBuf {
    let mut content = String::from("g,a,y\n");
    let mut state = 3935559000370003845u64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    // cells over (g, u, a) weighted by f(g|0) f(u|0) exp(a(chi0 + chi_g g + chi_u u))
    let (chi0, chi_g, chi_u) = (-0.6f64, 0.8f64, 0.35f64);
    let mut cells: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut z = 0.0;
    for (g, pg) in [(0.0, 0.55), (1.0, 0.45)] {
        for u in [0.0, 1.0, 2.0] {
            let w0 = pg / 3.0;
            let w1 = w0 * (chi0 + chi_g * g + chi_u * u).exp();
            cells.push((g, u, 0.0, w0));
            cells.push((g, u, 1.0, w1));
            z += w0 + w1;
        }
    }
    for c in &mut cells {
        c.3 /= z;
    }
    for _ in 0..4000 {
        let mut r = next();
        let mut chosen = cells[cells.len() - 1];
        for c in &cells {
            if r < c.3 {
                chosen = *c;
                break;
            }
            r -= c.3;
        }
        let (g, u, a, _) = chosen;
        let mean_y = (0.4f64 * a).exp() * (0.08 * g + 0.05 + 0.04 * u);
        let y = if next() < mean_y { 1.0 } else { 0.0 };
        content.push_str(&format!("{g},{a},{y}\n"));
    }
    let path = dir.join("odds.csv");
    write_file(&path, &content);
    path
}

/// Ten-IV fixture for GMM and the baselines.
fn multi_iv_csv(dir: &Path) -> std::path::PathBuf {
    let mut header: Vec<String> = (1..=10).map(|j| format!("g{j}")).collect();
    header.push("a".into());
    header.push("y".into());
    let mut content = header.join(",") + "\n";
    let mut state = 2862933555777941757u64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..500 {
        let g: Vec<f64> = (0..10).map(|_| if next() < 0.5 { 1.0 } else { 0.0 }).collect();
        let s: f64 = g.iter().sum();
        let u = next() - 0.5;
        let a = -2.0 * s + u + (1.0 + 0.5 * s) * (next() - 0.5);
        let y = 0.5 * a + u + next() - 0.5;
        let mut row: Vec<String> = g.iter().map(|v| v.to_string()).collect();
        row.push(a.to_string());
        row.push(y.to_string());
        content.push_str(&(row.join(",") + "\n"));
    }
    let path = dir.join("multi.csv");
    write_file(&path, &content);
    path
}

/// Survival fixture with censoring.
fn survival_csv(dir: &Path) -> std::path::PathBuf {
    let mut content = String::from("g,a,t,d\n");
    let mut state = 6364136223846793005u64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..400 {
        let g = if next() < 0.5 { 1.0 } else { 0.0 };
        let u = next();
        let v = 2.0 * next() - 1.0;
        let a = 0.3 * g + u + (0.2 + 0.8 * g) * v;
        let hazard = 0.5 + 0.3 * a + 0.2 * g + 0.4 * u;
        let event: f64 = -(next().max(1e-12)).ln() / hazard;
        let cens: f64 = -(next().max(1e-12)).ln() / 0.45;
        let (t, d) = if event <= cens { (event, 1) } else { (cens, 0) };
        content.push_str(&format!("{g},{a},{t},{d}\n"));
    }
    let path = dir.join("survival.csv");
    write_file(&path, &content);
    path
}

fn parse_stdout(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn estimate_happy_path_emits_json() {
    let dir = tempfile::tempdir().unwrap();
    let csv = single_iv_csv(dir.path());
    let out = genius(&[
        "estimate",
        "--input",
        csv.to_str().unwrap(),
        "--iv-cols",
        "g",
        "--exposure-col",
        "a",
        "--outcome-col",
        "y",
        "--method",
        "genius",
    ]);
    let v = parse_stdout(&out);
    assert!(v["beta"].is_number());
    assert!(v["se"].is_number());
    assert!(v["ci_lo"].as_f64().unwrap() <= v["beta"].as_f64().unwrap());
    assert_eq!(v["method"], "genius");
    assert_eq!(v["p"], 1);
}

#[test]
fn every_estimator_is_reachable() {
    let dir = tempfile::tempdir().unwrap();
    let single = single_iv_csv(dir.path());
    let single = single.to_str().unwrap();
    let base = ["--iv-cols", "g", "--exposure-col", "a", "--outcome-col", "y"];

    for method in ["genius", "genius-lewbel", "genius-efficient", "tsls"] {
        let mut args = vec!["estimate", "--input", single];
        args.extend_from_slice(&base);
        args.extend_from_slice(&["--method", method]);
        let out = genius(&args);
        let v = parse_stdout(&out);
        assert!(v["beta"].is_number(), "{method} returned no beta");
    }

    let binary = binary_exposure_csv(dir.path());
    let binary = binary.to_str().unwrap();
    for method in ["mult-outcome", "mult-exposure"] {
        let mut args = vec!["estimate", "--input", binary];
        args.extend_from_slice(&base);
        args.extend_from_slice(&["--exposure-kind", "binary", "--method", method]);
        let out = genius(&args);
        let v = parse_stdout(&out);
        assert!(v["beta"].is_number(), "{method} returned no beta");
        assert!(v["exp_beta"].is_number());
    }

    let odds = odds_ratio_csv(dir.path());
    let out = genius(&[
        "estimate", "--input", odds.to_str().unwrap(), "--iv-cols", "g",
        "--exposure-col", "a", "--outcome-col", "y", "--exposure-kind", "binary",
        "--method", "odds-ratio",
    ]);
    let v = parse_stdout(&out);
    assert!(v["beta"].is_number(), "odds-ratio returned no beta");
    assert!(v["diagnostics"]["null_test"]["p_value"].is_number());

    // case-control controls-only variant of mult-outcome
    let out = genius(&[
        "estimate", "--input", binary, "--iv-cols", "g", "--exposure-col", "a",
        "--outcome-col", "y", "--exposure-kind", "binary", "--method", "mult-outcome",
        "--case-control", "--controls-only",
    ]);
    parse_stdout(&out);
    let out = genius(&[
        "estimate", "--input", binary, "--iv-cols", "g", "--exposure-col", "a",
        "--outcome-col", "y", "--exposure-kind", "binary", "--method", "mult-outcome",
        "--case-control", "--sampling-fractions", "1.0,1.0",
    ]);
    parse_stdout(&out);

    let multi = multi_iv_csv(dir.path());
    let multi = multi.to_str().unwrap();
    let iv_list = "g1,g2,g3,g4,g5,g6,g7,g8,g9,g10";
    for method in ["genius-gmm", "genius-efficient", "tsls", "mr-egger"] {
        let out = genius(&[
            "estimate", "--input", multi, "--iv-cols", iv_list, "--exposure-col", "a",
            "--outcome-col", "y", "--method", method,
        ]);
        let v = parse_stdout(&out);
        assert!(v["beta"].is_number(), "{method} returned no beta");
    }
    let out = genius(&[
        "estimate", "--input", multi, "--iv-cols", iv_list, "--exposure-col", "a",
        "--outcome-col", "y", "--method", "oracle-tsls", "--valid-ivs", "3,4,5,6,7,8,9",
    ]);
    parse_stdout(&out);

    let surv = survival_csv(dir.path());
    let step = dir.path().join("steps.csv");
    let out = genius(&[
        "estimate", "--input", surv.to_str().unwrap(), "--iv-cols", "g",
        "--exposure-col", "a", "--time-col", "t", "--event-col", "d",
        "--method", "add-hazards", "--horizons", "0.5,1.0", "--bootstrap", "50",
        "--step-out", step.to_str().unwrap(),
    ]);
    let v = parse_stdout(&out);
    assert!(v["horizons"].as_array().unwrap().len() == 2);
    let steps = std::fs::read_to_string(&step).unwrap();
    assert!(steps.starts_with("time,b_a,b_g,at_risk"));
}

#[test]
fn incompatible_method_and_exposure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let csv = single_iv_csv(dir.path());
    let out = genius(&[
        "estimate", "--input", csv.to_str().unwrap(), "--iv-cols", "g",
        "--exposure-col", "a", "--outcome-col", "y", "--method", "odds-ratio",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_column_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    write_file(&path, "g,a\n1,0\n");
    let out = genius(&[
        "estimate", "--input", path.to_str().unwrap(), "--iv-cols", "g",
        "--exposure-col", "a", "--outcome-col", "y", "--method", "genius",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identification_failure_exits_3() {
    // equal conditional variances: pi(1) = 1 - pi(0) makes var(A|G)
    // constant and the estimator undefined
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.csv");
    let mut content = String::from("g,a,y\n");
    for (g, a) in [(1, 1), (1, 1), (1, 1), (1, 0), (0, 0), (0, 0), (0, 0), (0, 1)] {
        content.push_str(&format!("{g},{a},{}\n", g + a));
    }
    write_file(&path, &content);
    let out = genius(&[
        "estimate", "--input", path.to_str().unwrap(), "--iv-cols", "g",
        "--exposure-col", "a", "--outcome-col", "y", "--exposure-kind", "binary",
        "--method", "genius",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn simulate_is_byte_identical_across_runs_and_modes() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("ttf.cfg");
    write_file(
        &scenario,
        "exposure = continuous\nn = 120\nivs = 1\nviolation = TTF\nlambda1 = 1.0\n",
    );
    let out_a = dir.path().join("a.json");
    let out_b = dir.path().join("b.json");
    let out_c = dir.path().join("c.json");
    for (target, extra) in
        [(&out_a, None), (&out_b, None), (&out_c, Some("--serial"))]
    {
        let mut args = vec![
            "simulate", "--scenario", scenario.to_str().unwrap(), "--replicates", "40",
            "--seed", "7", "--out", target.to_str().unwrap(),
        ];
        if let Some(flag) = extra {
            args.push(flag);
        }
        let out = genius(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(&out_a).unwrap();
    let b = std::fs::read(&out_b).unwrap();
    let c = std::fs::read(&out_c).unwrap();
    assert_eq!(a, b, "two identical invocations differ");
    assert_eq!(a, c, "parallel and serial runs differ");
}

#[test]
fn diagnose_reports_per_iv_phi() {
    let dir = tempfile::tempdir().unwrap();
    let csv = single_iv_csv(dir.path());
    let out = genius(&[
        "diagnose", "--input", csv.to_str().unwrap(), "--iv-cols", "g",
        "--exposure-col", "a", "--outcome-col", "y",
    ]);
    let v = parse_stdout(&out);
    assert_eq!(v["per_iv"].as_array().unwrap().len(), 1);
    assert!(v["per_iv"][0]["phi_hat"].is_number());
}

#[test]
fn emit_vcov_writes_named_covariance() {
    let dir = tempfile::tempdir().unwrap();
    let csv = single_iv_csv(dir.path());
    let vcov = dir.path().join("vcov.csv");
    let out = genius(&[
        "estimate", "--input", csv.to_str().unwrap(), "--iv-cols", "g",
        "--exposure-col", "a", "--outcome-col", "y", "--method", "genius",
        "--emit-vcov", vcov.to_str().unwrap(), "--self-test",
    ]);
    let v = parse_stdout(&out);
    assert!(v["bread_fd_deviation"].as_f64().unwrap() < 1e-4);
    let content = std::fs::read_to_string(&vcov).unwrap();
    assert!(content.starts_with("mu0,psi0,psi1,beta0"));
    assert_eq!(content.lines().count(), 5); // header + 4x4 matrix
}

#[test]
fn scenario_with_unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("bad.cfg");
    write_file(&scenario, "bogus = 1\n");
    let out = genius(&["simulate", "--scenario", scenario.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
