//! Runner-level behavior: config schema round-trips, deterministic artifacts,
//! trace comparison.

use std::fs;
use std::path::PathBuf;

use schlogl_cli::config::ScenarioConfig;
use schlogl_cli::scenario::{compare, run_scenario};

fn config_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn short_config(dir: &str) -> ScenarioConfig {
    ScenarioConfig::from_toml(&format!(
        r#"
[grid]
n_nodes = 101
length = 1.0
nu = 0.1

[reaction]
zeta = [-1.0, 0.0, 2.0]

[actuators]
m = 2
r = 0.1

[target]
kind = "zero"

[initial]
z0 = "-4 + 8*cos(2*pi*x^2)"

[controller]
kind = "explicit"
lambda = 0.125
c_u = 30.0

[time]
t_final = 0.2
dt = 1e-3

[output]
dir = "{dir}"
snapshot_every = 0.05
"#
    ))
    .unwrap()
}

#[test]
fn bundled_configs_validate_and_roundtrip() {
    for entry in fs::read_dir(config_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().map(|e| e != "toml").unwrap_or(true) {
            continue;
        }
        let text = fs::read_to_string(&path).unwrap();
        let cfg = ScenarioConfig::from_toml(&text)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate()
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        // parse → serialize → parse is lossless
        let again = ScenarioConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again, "{} does not round-trip", path.display());
    }
    // the full-resolution profiles validate too
    for entry in fs::read_dir(config_dir().join("fine")).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        let cfg = ScenarioConfig::from_toml(&text).unwrap();
        cfg.validate()
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d1 = dir.path().join("a");
    let d2 = dir.path().join("b");
    run_scenario(&short_config(&d1.to_string_lossy())).unwrap();
    run_scenario(&short_config(&d2.to_string_lossy())).unwrap();
    for file in ["trace.csv", "snapshots.json", "summary.json"] {
        let a = fs::read(d1.join(file)).unwrap();
        let b = fs::read(d2.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn compare_run_with_itself_shows_no_differences() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("run");
    run_scenario(&short_config(&d.to_string_lossy())).unwrap();
    let trace = d.join("trace.csv");
    let table = compare(&[trace.clone(), trace.clone()]).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    let strip = |row: &str| row.splitn(2, ',').nth(1).unwrap().to_string();
    assert_eq!(strip(rows[1]), strip(rows[2]));
}

#[test]
fn compare_rejects_mismatched_traces() {
    let dir = tempfile::tempdir().unwrap();
    let d1 = dir.path().join("a");
    run_scenario(&short_config(&d1.to_string_lossy())).unwrap();
    let mut other = short_config(&dir.path().join("b").to_string_lossy());
    other.time.t_final = 0.1;
    run_scenario(&other).unwrap();
    let err = compare(&[d1.join("trace.csv"), dir.path().join("b").join("trace.csv")])
        .unwrap_err()
        .to_string();
    assert!(err.contains("final time"), "unexpected error: {err}");
}

#[test]
fn invalid_configs_are_refused() {
    let mut cfg = short_config("unused");
    cfg.time.dt = -1.0;
    assert!(run_scenario(&cfg).is_err());
}

#[test]
fn blow_up_keeps_partial_trace_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("boom");
    let mut cfg = short_config(&d.to_string_lossy());
    // absurd gain with no bound drives the explicit scheme unstable
    cfg.controller = schlogl_cli::config::ControllerConfig::Explicit {
        lambda: 1e12,
        c_u: f64::INFINITY,
        norm: "linf".into(),
        variant: "oblique".into(),
    };
    let outcome = run_scenario(&cfg).unwrap();
    assert_eq!(outcome.exit_code, schlogl_cli::scenario::EXIT_BLOWUP);
    assert!(outcome.summary.blow_up_time.is_some());
    let text = fs::read_to_string(d.join("trace.csv")).unwrap();
    let rows = text.lines().count();
    assert!(rows > 1, "partial trace should have recorded rows");
    assert!(rows < 202, "blow-up should abort before the full horizon");
}

#[test]
fn diagnose_reports_all_suites() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_config(&dir.path().join("diag").to_string_lossy());
    cfg.grid.n_nodes = 251; // fine enough for the M ∈ {1, 2, 4} entries
    let report = schlogl_cli::scenario::diagnose(&cfg, 1.0).unwrap();
    assert_eq!(report.poincare.len(), 4);
    assert!(report.poincare[0].xi.unwrap() >= 1.0);
    assert!(report.poincare[2].xi.unwrap() > report.poincare[0].xi.unwrap());
    // M = 8 needs a finer grid than 251 nodes; the entry carries the error
    assert!(report.poincare[3].xi.is_none());
    assert!(report.frak_norm_linf > 0.0);
    assert!(report.c_u_star.unwrap() > 0.0);
    assert!(report.mlam_min_ratio > 0.0);
    assert!(report.convergence.monotone);
    serde_json::to_string(&report).unwrap();
}

#[test]
fn growing_forcing_violates_the_persistent_bound() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_config(&dir.path().join("x").to_string_lossy());
    // Neumann-compatible but exponentially growing in time
    cfg.target.kind = "expression".into();
    cfg.target.expr = Some("exp(t)*cos(pi*x)".into());
    let err = match run_scenario(&cfg) {
        Err(e) => e.to_string(),
        Ok(_) => panic!("growing forcing was accepted"),
    };
    assert!(err.contains("persistent bound"), "unexpected error: {err}");
}
