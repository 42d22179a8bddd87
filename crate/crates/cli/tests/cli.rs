use std::path::Path;
use std::process::{Command, Output};

use rendezvous_cli::output::{trace_header, TRACE_ROBOT_COLUMNS};
use rendezvous_cli::{load_scenario, parse_scenario, CliError};
use rendezvous_core::scenario::PRESET_NAMES;

fn rendezvous(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rendezvous"))
        .args(args)
        .env_remove(rendezvous_cli::OUT_DIR_ENV)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_preset(out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec!["run", "--scenario", "paper-sec5-low-noise", "--seed", "42", "--runs", "1", "--out", out];
    args.extend_from_slice(extra);
    rendezvous(&args)
}

#[test]
fn preset_run_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_preset(dir.path(), &["--dump-gains"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["trace_run0000.csv", "series.csv", "gains.csv", "summary.json", "manifest.json", "scenario.toml"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["master_seed"], 42);
    assert_eq!(summary["runs"], 1);
    assert_eq!(summary["convergence"]["all_converged"], true);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], summary["config_hash"]);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 6);
}

#[test]
fn missing_scenario_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rendezvous(&["run", "--scenario", "missing.toml", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[config]:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn bad_flags_are_usage_errors() {
    let o = rendezvous(&["run", "--scenario", "paper-sec5-low-noise", "--mode", "central"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]:"), "{}", stderr(&o));
}

#[test]
fn lemma1_suite_passes() {
    let o = rendezvous(&["verify", "--suite", "lemma1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("checks passed"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn trace_csv_has_the_documented_columns_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_preset(dir.path(), &["--run-to-horizon"]).status.success());
    let mut rdr = csv::Reader::from_path(dir.path().join("trace_run0000.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header.len(), 2 + TRACE_ROBOT_COLUMNS.len() * 4);
    assert_eq!(header, trace_header(4));

    let cfg = load_scenario("paper-sec5-low-noise").unwrap();
    let trace = rendezvous_core::sim::run_episode(
        &rendezvous_core::ScenarioConfig {
            master_seed: 42,
            run_to_horizon: true,
            ..cfg
        },
        rendezvous_core::sim::episode_seed(42, 0),
    )
    .unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), trace.records.len());
    for (row, rec) in rows.iter().zip(&trace.records) {
        assert_eq!(row.len(), header.len());
        assert_eq!(row[0].parse::<usize>().unwrap(), rec.step);
        for (i, r) in rec.robots.iter().enumerate() {
            let cell = |c: usize| row[2 + 11 * i + c].parse::<f64>().unwrap();
            assert_eq!(cell(0), r.truth.x);
            assert_eq!(cell(3), r.x_hat);
            assert_eq!(cell(6), r.p_y);
            assert_eq!(cell(10), r.wheels.right);
        }
    }
}

#[test]
fn reruns_are_byte_identical_apart_from_timing() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run_preset(a.path(), &["--dump-gains"]).status.success());
    assert!(run_preset(b.path(), &["--dump-gains"]).status.success());
    for f in ["trace_run0000.csv", "series.csv", "gains.csv", "summary.json", "scenario.toml"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
}

#[test]
fn effective_scenario_reloads_to_the_same_config() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_preset(dir.path(), &["--mode", "global"]).status.success());
    let path = dir.path().join("scenario.toml");
    let cfg = load_scenario(path.to_str().unwrap()).unwrap();
    assert_eq!(cfg.master_seed, 42);
    assert_eq!(cfg.monte_carlo_runs, 1);
    assert_eq!(cfg.gain_mode, rendezvous_core::GainMode::Global);
}

fn config_message(text: &str) -> String {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.toml");
    std::fs::write(&path, text).unwrap();
    match load_scenario(path.to_str().unwrap()) {
        Err(e @ CliError::Config(_)) => {
            let line = e.to_string();
            assert!(!line.contains('\n'));
            line
        }
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn missing_n_is_named() {
    let msg = config_message("name = \"t\"\ninitial_states = [{ x = 0.1, y = 0.0, theta = 0.0 }]\n");
    assert!(msg.contains("`n`"), "{msg}");
}

#[test]
fn unknown_keys_are_rejected_with_a_location() {
    let msg = config_message(
        "n = 2\nname = \"t\"\nhorizn = 4\ninitial_states = [{ x = 0.1, y = 0.0, theta = 0.0 }, { x = -0.1, y = 0.0, theta = 0.0 }]\n",
    );
    assert!(msg.contains("horizn"), "{msg}");
    assert!(msg.contains("3:1"), "{msg}");
}

#[test]
fn invalid_values_are_config_errors() {
    let msg = config_message(
        "n = 3\nname = \"t\"\ninitial_states = [{ x = 0.1, y = 0.0, theta = 0.0 }, { x = -0.1, y = 0.0, theta = 0.0 }]\n",
    );
    assert!(msg.starts_with("error[config]:"), "{msg}");
}

#[test]
fn presets_load_and_minimal_files_parse() {
    for name in PRESET_NAMES {
        let cfg = load_scenario(name).unwrap();
        assert_eq!(cfg.name, *name);
        cfg.validate().unwrap();
    }
    let cfg = parse_scenario(
        "n = 2\nname = \"pair\"\ninitial_states = [{ x = 0.3, y = 0.0, theta = 0.0 }, { x = -0.3, y = 0.0, theta = 0.0 }]\n",
    )
    .unwrap();
    assert_eq!(cfg.n, 2);
}

#[test]
fn bundled_example_scenario_loads() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/six-ring-switching.toml");
    let cfg = load_scenario(path).unwrap();
    let sc = rendezvous_core::Scenario::new(cfg).unwrap();
    assert_eq!(sc.config().n, 6);
    assert!(sc.topology().is_connected());
}
