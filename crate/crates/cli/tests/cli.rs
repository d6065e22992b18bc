//! End-to-end runs of the socnav binary: the documented example commands,
//! exit codes, artifact layout, and config layering.

use std::path::Path;
use std::process::{Command, Output};

fn socnav(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_socnav"));
    // Isolate from any ambient overrides.
    for (k, _) in std::env::vars() {
        if k.starts_with("SOCNAV_") {
            cmd.env_remove(k);
        }
    }
    cmd.current_dir(dir);
    cmd.args(args);
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn simulate_example_writes_trajectory_log() {
    let tmp = tempfile::tempdir().unwrap();
    let out = socnav(
        tmp.path(),
        &[
            "simulate", "--scenario", "circle", "--peds", "5", "--policy", "orca", "--seed",
            "1", "--outdir", "run",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let log = tmp.path().join("run/trajectories/episode_00000.csv");
    let text = std::fs::read_to_string(&log).unwrap();
    let records = socnav_core::traj::parse_trajectory_csv(&text).unwrap();
    assert!(records.iter().any(|r| r.agent == 0));
    assert_eq!(
        records.iter().map(|r| r.agent).max().unwrap(),
        5,
        "five pedestrians plus the robot"
    );
    assert!(tmp.path().join("run/config.echo").exists());
}

#[test]
fn training_evaluation_and_thresholds_chain() {
    let tmp = tempfile::tempdir().unwrap();

    // Documented smoke invocation, shrunk warm start to keep the test quick.
    let out = socnav(
        tmp.path(),
        &[
            "train-policy", "--variant", "reward", "--episodes", "10", "--outdir", "train",
            "--set", "trainer.il_episodes=30", "--set", "trainer.il_epochs=2",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let ckpt = tmp.path().join("train/checkpoints/value_net.ckpt");
    let (net, meta) = socnav_core::trainer::load_trained_net(&ckpt).unwrap();
    assert!(net.include_rho, "reward variant consumes deviation estimates");
    assert_eq!(meta.get("variant").map(String::as_str), Some("reward"));

    let log = std::fs::read_to_string(tmp.path().join("train/train.csv")).unwrap();
    assert_eq!(log.lines().count(), 11, "header plus one row per episode");

    // Benchmark it against a baseline, twice; reports must be byte-equal.
    let ckpt_arg = ckpt.to_str().unwrap();
    for outdir in ["eval_a", "eval_b"] {
        let out = socnav(
            tmp.path(),
            &[
                "evaluate", "--checkpoint", ckpt_arg, "--baseline", "orca", "--trials", "3",
                "--outdir", outdir,
            ],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let a = std::fs::read(tmp.path().join("eval_a/report.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("eval_b/report.csv")).unwrap();
    assert_eq!(a, b);
    assert!(tmp.path().join("eval_a/trials.csv").exists());

    // A 10-episode network cannot clear a perfect success bar.
    let out = socnav(
        tmp.path(),
        &[
            "evaluate", "--checkpoint", ckpt_arg, "--trials", "3", "--min-success-rate",
            "1.0", "--outdir", "eval_gate",
        ],
    );
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    // Missing checkpoint path is a configuration error.
    let out = socnav(tmp.path(), &["evaluate", "--outdir", "eval_none"]);
    assert_eq!(code(&out), 2);
    let out = socnav(
        tmp.path(),
        &["evaluate", "--checkpoint", "nope.ckpt", "--outdir", "eval_gone"],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("not found"));
}

#[test]
fn plot_renders_svg_and_reports_bad_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let out = socnav(
        tmp.path(),
        &["simulate", "--peds", "2", "--seed", "3", "--outdir", "run"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let out = socnav(
        tmp.path(),
        &[
            "plot", "--input", "run/trajectories/episode_00000.csv", "--outdir", "run",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let svg = std::fs::read_to_string(tmp.path().join("run/plots/episode_00000.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.trim_end().ends_with("</svg>"));

    std::fs::write(tmp.path().join("bad.csv"), "not,a,log\n1,2,3\n").unwrap();
    let out = socnav(tmp.path(), &["plot", "--input", "bad.csv", "--outdir", "run"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("line 1"), "{}", stderr(&out));

    let out = socnav(tmp.path(), &["plot", "--input", "missing.csv", "--outdir", "run"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn uncertainty_pipeline_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let out = socnav(
        tmp.path(),
        &[
            "gen-uncertainty-data", "--episodes", "2", "--outdir", "data", "--set",
            "estimator.window_cap=200",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let files = std::fs::read_dir(tmp.path().join("data/datasets")).unwrap().count();
    assert_eq!(files, 20, "one dataset per track horizon");

    let out = socnav(
        tmp.path(),
        &[
            "train-uncertainty", "--data", "data/datasets", "--epochs", "1", "--outdir",
            "bank",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = std::fs::read_to_string(tmp.path().join("bank/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 21, "header plus one row per horizon");
    let bank_dir = tmp.path().join("bank/checkpoints/uncertainty");
    let bank = socnav_core::uncertainty::UncertaintyBank::load(&bank_dir).unwrap();
    let track = socnav_core::obs::TrackHistory::new();
    let est = bank.estimate(&track);
    assert!(est.low_confidence, "empty track falls back to the prior");

    // Pointing --data at a directory without datasets is a config error.
    let out = socnav(
        tmp.path(),
        &["train-uncertainty", "--data", "data", "--outdir", "bank2"],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing dataset"));
}

#[test]
fn sweep_noise_baseline_only() {
    let tmp = tempfile::tempdir().unwrap();
    let out = socnav(
        tmp.path(),
        &[
            "sweep-noise", "--baseline", "orca", "--trials", "2", "--grid", "0.0,0.3",
            "--outdir", "sweep",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = std::fs::read_to_string(tmp.path().join("sweep/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3, "header plus one row per grid point");

    let out = socnav(
        tmp.path(),
        &["sweep-noise", "--baseline", "orca", "--grid", "0.0,2.0", "--outdir", "s2"],
    );
    assert_eq!(code(&out), 2);

    let out = socnav(tmp.path(), &["sweep-noise", "--outdir", "s3"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nothing to evaluate"));
}

#[test]
fn usage_errors_and_unknown_names_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = socnav(tmp.path(), &["no-such-command"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).to_lowercase().contains("usage"));

    let out = socnav(tmp.path(), &["simulate", "--bogus-flag"]);
    assert_eq!(code(&out), 2);

    let out = socnav(
        tmp.path(),
        &["simulate", "--scenario", "hexagon", "--outdir", "x"],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("unknown scenario"));

    let out = socnav(
        tmp.path(),
        &["simulate", "--policy", "teleport", "--outdir", "x"],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn config_layers_show_up_in_the_echo() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("run.toml"), "[simulate]\npeds = 4\nrho_max = 0.1\n")
        .unwrap();

    let mut cmd = Command::new(env!("CARGO_BIN_EXE_socnav"));
    cmd.current_dir(tmp.path());
    cmd.env("SOCNAV_SIMULATE__RHO_MAX", "0.3");
    cmd.args([
        "simulate", "--config", "run.toml", "--seed", "5", "--outdir", "run", "--set",
        "simulate.ped_radius=0.25",
    ]);
    let out = cmd.output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let echo = std::fs::read_to_string(tmp.path().join("run/config.echo")).unwrap();
    let parsed: toml::Table = toml::from_str(&echo).unwrap();
    let sim = parsed["simulate"].as_table().unwrap();
    assert_eq!(sim["peds"].as_integer(), Some(4), "file layer");
    assert_eq!(sim["rho_max"].as_float(), Some(0.3), "env beats file");
    assert_eq!(sim["ped_radius"].as_float(), Some(0.25), "--set layer");

    // Unknown keys are rejected, whatever layer they arrive through.
    let out = socnav(
        tmp.path(),
        &["simulate", "--set", "simulate.pedz=1", "--outdir", "x"],
    );
    assert_eq!(code(&out), 2);
}
