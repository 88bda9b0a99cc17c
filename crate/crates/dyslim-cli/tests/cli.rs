//! End-to-end command tests driving the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dyslim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dyslim"))
}

fn run(args: &[&str]) -> Output {
    dyslim().args(args).output().expect("binary runs")
}

fn assert_code(output: &Output, expected: i32) {
    let code = output.status.code().unwrap_or(-1);
    assert_eq!(
        code,
        expected,
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn write_lorenz_config(path: &Path, total_steps: u64, learning_rate: f64) {
    let config = serde_json::json!({
        "system": {
            "kind": "lorenz",
            "generation": {
                "h": 0.002,
                "warmup_steps": 500,
                "downsample_factor": 50,
                "n_trajectories": 6,
                "steps_per_trajectory": 2500,
                "seed": 5
            }
        },
        "model": {"kind": "mlp", "state_dim": 3, "hidden": [8], "delta_t": 0.1},
        "objective": {
            "base": "one_step",
            "lambda1": 1.0,
            "lambda2": 10.0,
            "kernel": {"bandwidths": [0.2, 0.5, 0.9, 1.3]},
            "estimator": "biased",
            "pushforward_additive": false
        },
        "training": {
            "learning_rate": learning_rate,
            "lr_schedule": {"kind": "constant"},
            "total_steps": total_steps,
            "batch_size": 8,
            "window": 10,
            "rollout": {"increment_interval": 40, "max_len": 3},
            "discount": {"ratio": 0.1, "floor": 1e-7},
            "seed": 3,
            "checkpoint_interval": 20
        },
        "evaluation": {"rollout_steps": 12, "sd_every": 2, "max_snapshots": 500}
    });
    fs::write(path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
}

/// Log rows without the wall-clock column.
fn determinism_projection(log: &str) -> Vec<String> {
    log.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("step,"))
        .map(|l| {
            let fields: Vec<&str> = l.split(',').collect();
            fields[..fields.len() - 1].join(",")
        })
        .collect()
}

#[test]
fn generate_is_deterministic_and_reports_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    write_lorenz_config(&config, 10, 1e-3);
    let d1 = dir.path().join("a.dysl");
    let d2 = dir.path().join("b.dysl");

    let out = run(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        d1.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("system=lorenz"), "{stdout}");
    assert!(stdout.contains("n=6"), "{stdout}");

    let out2 = run(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        d2.to_str().unwrap(),
    ]);
    assert_code(&out2, 0);
    assert_eq!(fs::read(&d1).unwrap(), fs::read(&d2).unwrap());

    // seed override changes the bytes
    let d3 = dir.path().join("c.dysl");
    let out3 = run(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        d3.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    assert_code(&out3, 0);
    assert_ne!(fs::read(&d1).unwrap(), fs::read(&d3).unwrap());
}

#[test]
fn ks_grid_must_be_power_of_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("ks.json");
    let bad = serde_json::json!({
        "system": {
            "kind": "ks",
            "generation": {
                "config": {"n_grid": 100, "h": 0.05, "sample_interval": 0.2, "warmup_time": 0.2},
                "n_trajectories": 1,
                "record_steps": 3,
                "seed": 0
            }
        }
    });
    fs::write(&config, serde_json::to_string(&bad).unwrap()).unwrap();
    let out = run(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("ks.dysl").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(
        &config,
        r#"{"system": {"kind": "lorenz"}, "mystery": true}"#,
    )
    .unwrap();
    let out = run(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("d.dysl").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}

#[test]
fn train_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    write_lorenz_config(&config, 60, 1e-3);
    let dataset = dir.path().join("d.dysl");
    assert_code(
        &run(&[
            "generate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dataset.to_str().unwrap(),
        ]),
        0,
    );

    let train_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let log = fs::read_to_string(train_dir.join("run_log.csv")).unwrap();
    assert!(log.starts_with("# config_hash="));
    assert_eq!(determinism_projection(&log).len(), 60);
    assert!(train_dir.join("checkpoints/final.dysl").exists());
    assert!(train_dir.join("checkpoints/step_0000000020.dysl").exists());

    let eval_dir = dir.path().join("eval");
    let out = run(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        train_dir.join("checkpoints/final.dysl").to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--label",
        "smoke",
    ]);
    assert_code(&out, 0);
    let metrics = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(metrics.contains("smoke,cosine_similarity,0,"));
    assert!(metrics.contains("smoke,sinkhorn_divergence,"));
    assert!(metrics.contains("smoke,cov_rmse,,"));
    assert!(metrics.contains("smoke,w1:x,,"));
    assert!(metrics.contains("smoke,survivors,,"));

    let report_dir = dir.path().join("report");
    let out = run(&[
        "report",
        "--out",
        report_dir.to_str().unwrap(),
        eval_dir.join("metrics.csv").to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(report_dir.join("comparison.csv").exists());
    let svg = fs::read_to_string(report_dir.join("cosine_similarity.svg")).unwrap();
    assert!(svg.contains("<svg") && svg.contains("polyline"));
    let svg = fs::read_to_string(report_dir.join("sinkhorn_divergence.svg")).unwrap();
    assert!(!svg.is_empty());
}

#[test]
fn train_divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    write_lorenz_config(&config, 500, 1e200);
    let dataset = dir.path().join("d.dysl");
    assert_code(
        &run(&[
            "generate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dataset.to_str().unwrap(),
        ]),
        0,
    );
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_code(&out, 3);
}

#[test]
fn resume_reproduces_uninterrupted_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    write_lorenz_config(&config, 50, 1e-3);
    let dataset = dir.path().join("d.dysl");
    assert_code(
        &run(&[
            "generate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dataset.to_str().unwrap(),
        ]),
        0,
    );
    let train_dir = dir.path().join("run");
    let train_args = [
        "train",
        "--config",
        config.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
    ];
    assert_code(&run(&train_args), 0);
    let full_log = fs::read_to_string(train_dir.join("run_log.csv")).unwrap();

    // Simulate a crash after the step-40 checkpoint: drop the final
    // checkpoint and resume under the same config.
    fs::remove_file(train_dir.join("checkpoints/final.dysl")).unwrap();
    let mut resume_args = train_args.to_vec();
    resume_args.push("--resume");
    let out = run(&resume_args);
    assert_code(&out, 0);
    let resumed_log = fs::read_to_string(train_dir.join("run_log.csv")).unwrap();
    assert_eq!(
        determinism_projection(&full_log),
        determinism_projection(&resumed_log)
    );
}

#[test]
fn eval_missing_checkpoint_exits_io() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    write_lorenz_config(&config, 10, 1e-3);
    let out = run(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        dir.path().join("missing.dysl").to_str().unwrap(),
        "--dataset",
        dir.path().join("missing-too.dysl").to_str().unwrap(),
        "--out",
        dir.path().join("eval").to_str().unwrap(),
    ]);
    assert_code(&out, 4);
}

#[test]
fn report_rejects_malformed_csv_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "run,metric,t,value,flag\na,b,c\n").unwrap();
    let out = run(&[
        "report",
        "--out",
        dir.path().join("rep").to_str().unwrap(),
        bad.to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.csv:2"), "{stderr}");
}
