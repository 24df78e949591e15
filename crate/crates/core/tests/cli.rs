//! Process-level tests of the `flowlab` binary: exit codes, error wording,
//! and the artifact layout each verb leaves behind.

use std::path::Path;
use std::process::{Command, Output};

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowlab"))
}

fn write_config(dir: &Path, name: &str, body: &serde_json::Value) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(body).unwrap()).unwrap();
    path
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn tiny_config() -> serde_json::Value {
    serde_json::json!({
        "env": {"family": "modal_seq", "vocab_size": 3, "length": 3, "num_modes": 2,
                "tau": [0.5], "floor": 0.01, "radius": 1, "seed": 5},
        "train": {"algorithm": "flowrl", "steps": 30, "seed": 1},
        "eval": {"interval": 10}
    })
}

#[test]
fn unknown_keys_exit_2_with_a_nearest_key_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config();
    let train = config["train"].as_object_mut().unwrap();
    let beta = train.remove("algorithm").unwrap();
    train.insert("algoritm".into(), beta);
    let path = write_config(dir.path(), "typo.json", &config);

    let output = binary()
        .args(["run"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", stderr_of(&output));
    let err = stderr_of(&output);
    assert!(err.contains("algoritm"), "stderr: {err}");
    assert!(err.contains("algorithm"), "no suggestion in stderr: {err}");
}

#[test]
fn type_mismatches_exit_2_and_name_the_config_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config();
    config["train"]["beta"] = serde_json::json!("fifteen");
    let path = write_config(dir.path(), "badtype.json", &config);

    let output = binary()
        .args(["run"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", stderr_of(&output));
    let err = stderr_of(&output);
    assert!(err.contains("train.beta"), "stderr: {err}");
}

#[test]
fn misspelled_env_family_exits_2_and_lists_the_choices() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config();
    config["env"]["family"] = serde_json::json!("hyprgrid");
    let path = write_config(dir.path(), "family.json", &config);

    let output = binary()
        .args(["run"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", stderr_of(&output));
    let err = stderr_of(&output);
    assert!(err.contains("hypergrid"), "stderr: {err}");
}

#[test]
fn occupied_output_directories_exit_2_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "run.json", &tiny_config());
    let out = dir.path().join("occupied");
    std::fs::create_dir(&out).unwrap();
    std::fs::write(out.join("precious.txt"), "do not clobber").unwrap();

    let refused = binary()
        .args(["run"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(refused.status.code(), Some(2), "{}", stderr_of(&refused));
    assert!(
        stderr_of(&refused).contains("--force"),
        "stderr should point at --force: {}",
        stderr_of(&refused)
    );
    assert!(out.join("precious.txt").exists(), "refusal must not delete");

    let forced = binary()
        .args(["run"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .arg("--force")
        .output()
        .unwrap();
    assert_eq!(forced.status.code(), Some(0), "{}", stderr_of(&forced));
    assert!(out.join("metrics.csv").exists());
    assert!(out.join("breakdown.csv").exists());
    assert!(out.join("summary.json").exists());
    assert!(out.join("checkpoints").join("final.json").exists());
}

#[test]
fn numeric_divergence_exits_3_with_batch_context() {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "env": {"family": "modal_seq", "vocab_size": 4, "length": 4, "num_modes": 4,
                "tau": [0.5], "floor": 0.01, "radius": 1, "seed": 7},
        "train": {"algorithm": "flowrl", "optimizer": "sgd", "lr_policy": 0.3,
                  "lr_partition": 0.6, "reward_norm_mode": "raw", "beta": 8.0,
                  "steps": 100, "seed": 0},
        "eval": {"interval": 50}
    });
    let path = write_config(dir.path(), "diverge.json", &config);

    let output = binary()
        .args(["run"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3), "{}", stderr_of(&output));
    let err = stderr_of(&output);
    assert!(err.contains("numeric failure"), "stderr: {err}");
    assert!(err.contains("phase"), "no batch context in stderr: {err}");
}

#[test]
fn partially_failing_sweeps_exit_4_and_record_both_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = serde_json::json!({
        "env": {"family": "modal_seq", "vocab_size": 4, "length": 4, "num_modes": 4,
                "tau": [0.5], "floor": 0.01, "radius": 1, "seed": 7},
        "train": {"algorithm": "flowrl", "optimizer": "sgd", "lr_policy": 0.3,
                  "reward_norm_mode": "raw", "beta": 8.0, "steps": 100, "seed": 0},
        "eval": {"interval": 50}
    });
    config["sweep"] = serde_json::json!({
        "parameter": "train.lr_partition",
        "values": [0.04, 0.6],
        "seeds": [0]
    });
    let path = write_config(dir.path(), "sweep.json", &config);
    let out = dir.path().join("grid");

    let output = binary()
        .args(["sweep"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4), "{}", stderr_of(&output));

    let points = std::fs::read_to_string(out.join("sweep_points.csv")).unwrap();
    let statuses: Vec<&str> = points
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap())
        .collect();
    assert_eq!(statuses, vec!["ok", "failed"], "points table: {points}");

    let aggregate = std::fs::read_to_string(out.join("sweep_aggregate.csv")).unwrap();
    let ok_counts: Vec<&str> = aggregate
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert_eq!(ok_counts, vec!["1", "0"], "aggregate table: {aggregate}");

    // The successful cell still has complete artifacts on disk.
    let ok_dir = out.join("cells").join("lr_partition=0.04").join("seed=0");
    assert!(ok_dir.join("metrics.csv").exists(), "missing {ok_dir:?}");
}

#[test]
fn export_plots_turns_run_artifacts_into_plot_tables() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "run.json", &tiny_config());
    let out = dir.path().join("run");

    let run = binary()
        .args(["run"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", stderr_of(&run));

    let export = binary().args(["export-plots"]).arg(&out).output().unwrap();
    assert_eq!(export.status.code(), Some(0), "{}", stderr_of(&export));
    for name in ["kl_curve.csv", "coverage_curve.csv", "policy_vs_target.csv"] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    let table = std::fs::read_to_string(out.join("policy_vs_target.csv")).unwrap();
    assert!(table.starts_with("sequence,target_prob,policy_prob"));
    // 3^3 fixed-length sequences plus the header.
    assert_eq!(table.lines().count(), 28, "{table}");
}

#[test]
fn export_plots_on_an_empty_directory_exits_2_naming_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let output = binary()
        .args(["export-plots"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", stderr_of(&output));
    assert!(
        stderr_of(&output).contains("metrics.csv"),
        "stderr: {}",
        stderr_of(&output)
    );
}
