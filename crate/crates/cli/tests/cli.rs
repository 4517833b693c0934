use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn koopgp(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_koopgp"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("KOOPGP_THREADS", t),
        None => cmd.env_remove("KOOPGP_THREADS"),
    };
    cmd.output().unwrap()
}

/// Writes `config` and runs `command` into `dir/out`; returns the output directory.
fn run(dir: &Path, name: &str, command: &str, config: &Value) -> (Output, PathBuf) {
    let cfg = dir.join(format!("{name}.json"));
    fs::write(&cfg, serde_json::to_vec_pretty(config).unwrap()).unwrap();
    let out = dir.join(name);
    let output = koopgp(
        &[
            command,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    (output, out)
}

fn pp_spec(n_traj: usize) -> Value {
    json!({"n_traj": n_traj, "x0_box": [[0.2, 2.0], [0.2, 1.0]], "dt": 3.0, "steps": 16, "seed": 4})
}

fn pp_source(n_traj: usize) -> Value {
    json!({"source": "simulate", "system": "predator_prey", "spec": pp_spec(n_traj)})
}

fn window() -> Value {
    json!({"past_points": 8, "horizon_points": 8, "stride": 16})
}

fn fit_config(inference: &str) -> Value {
    json!({
        "corpus": pp_source(6),
        "target": {"state": 1},
        "window": window(),
        "model": {"kind": "kesd", "eigenvalues": 8},
        "seed": 2,
        "inference": inference,
        "optimizer": {"budget": 20},
        "sparse": {"batch_size": 8, "budgets": [3, 3, 3], "eval_every": 1, "init_budget": 3},
        "num_inducing": 6,
    })
}

fn assert_ok(output: &Output) {
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn simulate_writes_one_row_per_sample() {
    let tmp = TempDir::new().unwrap();
    let config = json!({"system": "predator_prey", "corpus": pp_spec(5)});
    let (output, out) = run(tmp.path(), "sim", "simulate", &config);
    assert_ok(&output);
    let csv = fs::read_to_string(out.join("corpus.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 17);
    let meta: Value = serde_json::from_slice(&fs::read(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["trajectories"], 5);
    assert_eq!(meta["points_per_trajectory"], 17);
    let m = manifest(&out);
    let files: Vec<&str> = m["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["path"].as_str().unwrap())
        .collect();
    assert_eq!(files, ["config.json", "corpus.csv", "meta.json"]);

    let (again, out2) = run(tmp.path(), "sim2", "simulate", &config);
    assert_ok(&again);
    assert_eq!(
        fs::read(out.join("corpus.csv")).unwrap(),
        fs::read(out2.join("corpus.csv")).unwrap()
    );
    assert_eq!(manifest(&out), manifest(&out2));
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let cases = [
        (
            "unknown_system",
            "simulate",
            json!({"system": "duffing", "corpus": pp_spec(2)}),
        ),
        (
            "unknown_field",
            "simulate",
            json!({"system": "linear2d", "corpus": pp_spec(2), "extra": 1}),
        ),
        (
            "missing_csv",
            "fit",
            json!({
                "corpus": {"source": "csv", "path": tmp.path().join("absent.csv"), "dim": 2},
                "target": {"state": 0}, "window": window(),
                "model": {"kind": "sd"}, "seed": 0,
            }),
        ),
        ("incomplete_benchmark", "benchmark", json!({"dataset": "x"})),
    ];
    for (name, command, config) in cases {
        let (output, out) = run(tmp.path(), name, command, &config);
        assert_eq!(
            output.status.code(),
            Some(2),
            "{name}: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        assert!(!out.join("manifest.json").exists(), "{name}");
    }
    let missing = koopgp(
        &["fit", "--config", tmp.path().join("nope.json").to_str().unwrap()],
        None,
    );
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn fit_then_forecast_the_horizon() {
    let tmp = TempDir::new().unwrap();
    let (output, fitted) = run(tmp.path(), "fit", "fit", &fit_config("exact"));
    assert_ok(&output);
    let model: Value = serde_json::from_slice(&fs::read(fitted.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["model"]["inference"], "exact");
    let log = fs::read_to_string(fitted.join("fit_log.csv")).unwrap();
    assert!(log.starts_with("step,nll\n"));

    let (refit, fitted2) = run(tmp.path(), "fit2", "fit", &fit_config("exact"));
    assert_ok(&refit);
    assert_eq!(manifest(&fitted), manifest(&fitted2));

    let forecast = json!({
        "model": fitted.join("model.json"),
        "corpus": pp_source(6),
        "trajectory": 0,
        "anchor": 7,
    });
    let (output, out) = run(tmp.path(), "forecast", "forecast", &forecast);
    assert_ok(&output);
    let csv = fs::read_to_string(out.join("forecast.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 8);
    for (k, r) in rows.iter().enumerate() {
        assert!((r[0] - 3.0 * (k + 1) as f64).abs() < 1e-9);
        assert!(r[1].is_finite() && r[2] >= 0.0);
    }
}

#[test]
fn sparse_fit_round_trips_through_forecast() {
    let tmp = TempDir::new().unwrap();
    let (output, fitted) = run(tmp.path(), "fit", "fit", &fit_config("sparse"));
    assert_ok(&output);
    let log = fs::read_to_string(fitted.join("fit_log.csv")).unwrap();
    assert!(log.starts_with("phase,step,batch_loss,full_loss\n"));
    let forecast = json!({
        "model": fitted.join("model.json"),
        "corpus": pp_source(6),
        "trajectory": 2,
        "anchor": 10,
        "times": [1.0, 2.5],
        "with_noise": true,
    });
    let (output, out) = run(tmp.path(), "forecast", "forecast", &forecast);
    assert_ok(&output);
    assert_eq!(fs::read_to_string(out.join("forecast.csv")).unwrap().lines().count(), 3);

    let bad_anchor = json!({"model": fitted.join("model.json"), "corpus": pp_source(6), "trajectory": 0, "anchor": 3});
    let (output, _) = run(tmp.path(), "bad_anchor", "forecast", &bad_anchor);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn reports_do_not_depend_on_the_thread_count() {
    let tmp = TempDir::new().unwrap();
    let config = json!({
        "dataset": "pp",
        "corpus": pp_source(12),
        "target": {"state": 1},
        "window": window(),
        "models": [{"kind": "kesd", "eigenvalues": 6}, {"kind": "contextual"}],
        "n_train": 3,
        "repeats": 2,
        "seed": 5,
        "exact": {"budget": 10},
        "timings": false,
    });
    let path = tmp.path().join("bench.json");
    fs::write(&path, serde_json::to_vec(&config).unwrap()).unwrap();
    let mut manifests = Vec::new();
    for threads in ["1", "2"] {
        let out = tmp.path().join(format!("bench{threads}"));
        let output = koopgp(
            &[
                "benchmark",
                "--config",
                path.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ],
            Some(threads),
        );
        assert_ok(&output);
        manifests.push(manifest(&out));
    }
    assert_eq!(manifests[0], manifests[1]);

    let bad = koopgp(&["benchmark", "--config", path.to_str().unwrap()], Some("zero"));
    assert_eq!(bad.status.code(), Some(2));
}
