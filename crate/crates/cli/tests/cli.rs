//! End-to-end runs of the command-line binary.

use std::path::Path;
use std::process::Command;

fn snlds() -> Command {
    Command::new(env!("CARGO_BIN_EXE_snlds"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        r#"
[model]
num_states = 2
latent_dim = 2
obs_dim = 1
transition_family = "mlp"
transition_hidden = [4]
emission_hidden = []
discrete_hidden = []
activation = "tanh"

[inference]
encoder_units = 4
causal_units = 4

[train]
total_steps = 30
batch_size = 2
metrics_every = 10

[data]
generator = "bouncing_ball"
num_sequences = 6
eval_sequences = 3
sequence_length = 16
"#,
    )
    .unwrap();
    path
}

#[test]
fn generate_is_deterministic_and_writes_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_a = dir.path().join("a.ds");
    let out_b = dir.path().join("b.ds");
    for out in [&out_a, &out_b] {
        let status = snlds()
            .args(["generate", "--config"])
            .arg(&cfg)
            .args(["--seed", "7", "--count", "5", "--steps", "20", "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(&out_a).unwrap();
    let b = std::fs::read(&out_b).unwrap();
    assert_eq!(a, b, "same seed must produce byte-identical datasets");
    assert!(out_a.with_extension("meta.toml").exists());
}

#[test]
fn generate_zero_count_writes_valid_empty_container() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("empty.ds");
    let status = snlds()
        .args(["generate", "--config"])
        .arg(&cfg)
        .args(["--seed", "1", "--count", "0", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let data = snlds_core::data::Dataset::load(&out).unwrap();
    assert!(data.is_empty());
}

#[test]
fn train_evaluate_segment_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run_dir = dir.path().join("run");

    let status = snlds()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seed", "3", "--out-dir"])
        .arg(&run_dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(run_dir.join("checkpoint_final.bin").exists());
    assert!(run_dir.join("config.toml").exists(), "config copied verbatim");
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    // Steps 0, 10, 20 plus the closing row at 30.
    assert_eq!(metrics.lines().count(), 1 + 4);
    assert!(metrics.starts_with("step,nll,elbo,ce,beta,tau,f1_frame,f1_switch"));

    // Config is not mutated by running.
    let cfg_bytes_before = std::fs::read(&cfg).unwrap();

    // Evaluate on a generated labeled dataset.
    let data_path = dir.path().join("eval.ds");
    assert!(snlds()
        .args(["generate", "--config"])
        .arg(&cfg)
        .args(["--seed", "9", "--count", "4", "--steps", "16", "--out"])
        .arg(&data_path)
        .status()
        .unwrap()
        .success());
    let report_path = dir.path().join("report.csv");
    let gamma_path = dir.path().join("gamma.csv");
    let status = snlds()
        .args(["evaluate", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(run_dir.join("checkpoint_final.bin"))
        .arg("--data")
        .arg(&data_path)
        .arg("--out")
        .arg(&report_path)
        .arg("--dump-marginals")
        .arg(&gamma_path)
        .status()
        .unwrap();
    assert!(status.success());
    let report = std::fs::read_to_string(&report_path).unwrap();
    let mut lines = report.lines();
    assert_eq!(
        lines.next().unwrap(),
        "dataset,model,seed,f1_frame,f1_switch_tol0,f1_switch_tol5,alignment_mode"
    );
    let row = lines.next().unwrap();
    assert!(row.ends_with("permutation"));
    let gamma = std::fs::read_to_string(&gamma_path).unwrap();
    assert!(gamma.starts_with("sequence,t,k,gamma"));
    // 4 sequences x 16 steps x 2 states rows plus header.
    assert_eq!(gamma.lines().count(), 1 + 4 * 16 * 2);

    // Segment one sequence.
    let labels_path = dir.path().join("labels.csv");
    let status = snlds()
        .args(["segment", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(run_dir.join("checkpoint_final.bin"))
        .arg("--data")
        .arg(&data_path)
        .args(["--index", "1", "--out"])
        .arg(&labels_path)
        .status()
        .unwrap();
    assert!(status.success());
    let labels = std::fs::read_to_string(&labels_path).unwrap();
    assert_eq!(labels.lines().count(), 1 + 16);

    // Report transform over the metrics file.
    let curve_path = dir.path().join("curve.csv");
    let status = snlds()
        .args(["report", "--metrics"])
        .arg(run_dir.join("metrics.csv"))
        .arg("--out")
        .arg(&curve_path)
        .status()
        .unwrap();
    assert!(status.success());
    let curve = std::fs::read_to_string(&curve_path).unwrap();
    assert!(curve.starts_with("step,log_rel_nll"));
    assert_eq!(curve.lines().count(), metrics.lines().count());

    assert_eq!(
        cfg_bytes_before,
        std::fs::read(&cfg).unwrap(),
        "inputs must not be mutated"
    );
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nnum_statez = 3\n").unwrap();
    let out = snlds()
        .args(["train", "--config"])
        .arg(&bad)
        .args(["--seed", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Invalid model size: K = 0.
    let zero_k = dir.path().join("zero.toml");
    std::fs::write(&zero_k, "[model]\nnum_states = 0\n").unwrap();
    let out = snlds()
        .args(["train", "--config"])
        .arg(&zero_k)
        .args(["--seed", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_requires_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = snlds().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--seed"), "missing-seed error should name the flag");
}

#[test]
fn resume_continues_metrics_from_saved_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let first = dir.path().join("first");
    assert!(snlds()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seed", "5", "--steps", "10", "--out-dir"])
        .arg(&first)
        .status()
        .unwrap()
        .success());
    let second = dir.path().join("second");
    assert!(snlds()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seed", "5", "--steps", "20", "--start-step", "10"])
        .arg("--resume")
        .arg(first.join("checkpoint_final.bin"))
        .args(["--out-dir"])
        .arg(&second)
        .status()
        .unwrap()
        .success());
    let metrics = std::fs::read_to_string(second.join("metrics.csv")).unwrap();
    let first_row = metrics.lines().nth(1).unwrap();
    assert!(first_row.starts_with("10,"), "metrics resume at step 10: {first_row}");
}
