use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rolling_lab::wiener::sample_brownian;
use rolling_lab::PathGrid;
use rolling_lab_cli::ExperimentConfig;

fn rolling_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rolling-lab"))
        .args(args)
        .env_remove("ROLLING_LAB_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.in.json");
    fs::write(&path, json).unwrap();
    path.to_string_lossy().into_owned()
}

/// Every output file except the two that echo the output directory.
fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            if rel != "config.json" && rel != "manifest.json" {
                files.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    files
}

#[test]
fn simulate_is_deterministic_across_runs_and_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"n_steps": 128, "export_adjoints": true, "export_variation": true}"#,
    );
    let mut runs = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let out = tmp.path().join(name);
        let o = rolling_lab(&[
            "simulate",
            "--config",
            &cfg,
            "--paths",
            "70",
            "--seed",
            "5",
            "--threads",
            threads,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(outputs(&out));
    }
    assert_eq!(runs[0].len(), 70 + 2);
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn config_echo_materializes_defaults_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"model": "heisenberg"}"#);
    let out = tmp.path().join("out");
    let o = rolling_lab(&[
        "simulate",
        "--config",
        &cfg,
        "--paths",
        "2",
        "--steps",
        "64",
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let echoed: serde_json::Value = serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    let expected = ExperimentConfig {
        model: "heisenberg".into(),
        n_paths: 2,
        n_steps: 64,
        seed: 9,
        out_dir: out.clone(),
        ..ExperimentConfig::default()
    };
    assert_eq!(echoed, serde_json::to_value(&expected).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["seed"], 9);
}

#[test]
fn zero_paths_writes_only_config_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = rolling_lab(&["simulate", "--paths", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["config.json", "manifest.json"]);
}

#[test]
fn abelian_trajectory_is_the_driving_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"model": "abelian:3"}"#);
    let out = tmp.path().join("out");
    let o = rolling_lab(&[
        "simulate",
        "--config",
        &cfg,
        "--paths",
        "3",
        "--steps",
        "256",
        "--seed",
        "12",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let grid = PathGrid::new(256).unwrap();
    for idx in 0..3u64 {
        let w = sample_brownian(grid, 3, 12, idx);
        let mut reader = csv::Reader::from_path(out.join(format!("paths/path_{idx:06}.csv"))).unwrap();
        assert_eq!(reader.headers().unwrap(), vec!["t", "x1", "x2", "x3"]);
        let mut rows = 0;
        for (j, rec) in reader.records().enumerate() {
            let rec = rec.unwrap();
            let t: f64 = rec[0].parse().unwrap();
            assert!((t - grid.time(j)).abs() < 1e-15);
            for i in 0..3 {
                let x: f64 = rec[i + 1].parse().unwrap();
                assert!((x - w.value(j)[i]).abs() <= 1e-12, "path {idx} step {j}");
            }
            rows += 1;
        }
        assert_eq!(rows, 257);
    }
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    let unknown = write_config(tmp.path(), r#"{"n_path": 3}"#);
    assert_eq!(code(&rolling_lab(&["simulate", "--config", &unknown, "--out", out])), 2);
    let bad_model = write_config(tmp.path(), r#"{"model": "torus"}"#);
    assert_eq!(
        code(&rolling_lab(&["simulate", "--config", &bad_model, "--out", out])),
        2
    );
    assert_eq!(code(&rolling_lab(&["ibp", "--paths", "10", "--out", out])), 2);
    assert_eq!(code(&rolling_lab(&["simulate", "--steps", "100", "--out", out])), 2);
    let missing = tmp.path().join("nope.json");
    assert_eq!(
        code(&rolling_lab(&[
            "simulate",
            "--config",
            missing.to_str().unwrap(),
            "--out",
            out
        ])),
        2
    );
}

#[test]
fn verify_derivative_passes_and_fails_on_thresholds() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good");
    let o = rolling_lab(&[
        "verify-derivative",
        "--paths",
        "4",
        "--steps",
        "256",
        "--out",
        good.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut summary = csv::Reader::from_path(good.join("derivative_summary.csv")).unwrap();
    assert_eq!(summary.records().count(), 27);
    assert!(good.join("derivative_reports.json").exists());

    // a huge difference step makes the oracle inaccurate
    let cfg = write_config(
        tmp.path(),
        r#"{"eps": 0.5, "battery_models": ["paper-example"], "fields": ["gauss"]}"#,
    );
    let bad = tmp.path().join("bad");
    let o = rolling_lab(&[
        "verify-derivative",
        "--config",
        &cfg,
        "--paths",
        "8",
        "--steps",
        "256",
        "--out",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(bad.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["exit_code"], 3);
}

#[test]
fn cutoff_study_writes_one_table_per_kind_and_moment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"model": "heisenberg", "parameters": [1, 4]}"#);
    let out = tmp.path().join("out");
    let o = rolling_lab(&[
        "cutoff-study",
        "--config",
        &cfg,
        "--paths",
        "20",
        "--steps",
        "128",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!([0, 3].contains(&code(&o)), "{}", String::from_utf8_lossy(&o.stderr));
    for kind in ["eta_m", "adjoint_m", "theta_m", "Theta_n"] {
        for p in [2, 4] {
            let mut r = csv::Reader::from_path(out.join(format!("cutoff_{kind}_p{p}.csv"))).unwrap();
            assert_eq!(
                r.headers().unwrap(),
                vec![
                    "kind",
                    "model",
                    "p",
                    "parameter",
                    "estimate",
                    "stderr",
                    "N",
                    "excluded_paths"
                ]
            );
            assert_eq!(r.records().count(), 2);
        }
    }
    assert!(out.join("cutoff_verdicts.json").exists());
}

#[test]
fn adjoint_crosscheck_reports_exact_agreement_below_step_four() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"model": "heisenberg", "adjoint_steps": [128, 256]}"#);
    let out = tmp.path().join("out");
    let o = rolling_lab(&[
        "adjoint-crosscheck",
        "--config",
        &cfg,
        "--paths",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("adjoint_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], true);
    assert!(summary["rate"].is_null());
}

#[test]
fn thread_variable_is_a_fallback() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_rolling-lab"))
        .args([
            "simulate",
            "--paths",
            "1",
            "--steps",
            "64",
            "--out",
            out.to_str().unwrap(),
        ])
        .env("ROLLING_LAB_THREADS", "two")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn custom_algebra_file_matches_the_builtin_model() {
    let tmp = tempfile::tempdir().unwrap();
    let alg = tmp.path().join("heis.json");
    fs::write(
        &alg,
        r#"{"dim": 3, "step": 2, "structure": [0,0,0, 0,0,1, 0,0,0, 0,0,-1, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0]}"#,
    )
    .unwrap();
    let mut runs = Vec::new();
    for (name, model) in [
        ("builtin", "heisenberg".to_string()),
        ("custom", format!("custom:{}", alg.display())),
    ] {
        let cfg = tmp.path().join(format!("{name}.cfg.json"));
        fs::write(&cfg, serde_json::json!({ "model": model }).to_string()).unwrap();
        let out = tmp.path().join(name);
        let o = rolling_lab(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--paths",
            "3",
            "--steps",
            "64",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(outputs(&out));
    }
    assert_eq!(runs[0], runs[1]);

    fs::write(
        &alg,
        r#"{"dim": 3, "step": 1, "structure": [0,0,0, 0,0,1, 0,0,0, 0,0,-1, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0]}"#,
    )
    .unwrap();
    let cfg = tmp.path().join("bad.cfg.json");
    fs::write(
        &cfg,
        serde_json::json!({ "model": format!("custom:{}", alg.display()) }).to_string(),
    )
    .unwrap();
    let out = tmp.path().join("bad");
    let o = rolling_lab(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}
