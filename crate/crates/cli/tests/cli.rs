//! The `scvi` binary: exit codes, outputs and stamps.

use std::path::Path;
use std::process::{Command, Output};

fn scvi(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scvi"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .output()
        .unwrap()
}

const SMALL: [&str; 8] = [
    "--set",
    "simulation.n_cells=200",
    "--set",
    "simulation.n_genes=20",
    "--set",
    "training.epochs=3",
    "--set",
    "eval.heldout_samples=10",
];

fn with_small<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(&SMALL);
    v.extend_from_slice(extra);
    v
}

fn error_code(o: &Output) -> i64 {
    let line = String::from_utf8_lossy(&o.stderr);
    let v: serde_json::Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    v["error"]["code"].as_i64().unwrap()
}

#[test]
fn pipeline_writes_stamped_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["simulate", "train", "eval", "de", "impute"] {
        let o = scvi(dir.path(), &with_small(cmd, &["--set", "de.n_pairs=200"]));
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(dir.path().join(format!("{cmd}.manifest.json")).is_file());
    }
    let trace = std::fs::read_to_string(dir.path().join("loss_trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert!(lines.next().unwrap().starts_with("# seed=0 config_hash="));
    assert_eq!(lines.next().unwrap(), "epoch,mean_neg_elbo");
    assert_eq!(lines.count(), 3);
    let de = std::fs::read_to_string(dir.path().join("de.csv")).unwrap();
    assert!(de.lines().nth(1).unwrap().starts_with("gene,p_h0,log_bayes_factor,std_error"));
    assert_eq!(de.lines().count(), 2 + 20);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("eval_report.json")).unwrap()).unwrap();
    let metrics: Vec<&str> = report["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["metric"].as_str().unwrap())
        .collect();
    assert_eq!(metrics, ["heldout_ll", "silhouette", "fa_silhouette", "qc_correlation"]);
}

#[test]
fn zero_epochs_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    assert!(scvi(dir.path(), &with_small("simulate", &[])).status.success());
    let o = scvi(dir.path(), &with_small("train", &["--set", "training.epochs=0"]));
    assert!(o.status.success());
    let ckpt = scvi_core::model::Checkpoint::load(dir.path().join("model.ckpt")).unwrap();
    assert_eq!(ckpt.model.config.n_genes, 20);
    let trace = std::fs::read_to_string(dir.path().join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["train", "--set", "training.epoch=3"],
        vec!["train", "--set", "schema_version=9"],
        vec!["eval"],
        vec!["train", "--config", "/nonexistent/run.toml"],
        vec!["simulate", "--threads", "0"],
    ] {
        let o = scvi(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert_eq!(error_code(&o), 2);
    }
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("counts.csv"), "cell_id,g0,g1\nc0,1,-2\nc1,0,3\n").unwrap();
    let o = scvi(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(3));

    // a checkpoint trained on other genes
    let other = tempfile::tempdir().unwrap();
    assert!(scvi(other.path(), &with_small("simulate", &[])).status.success());
    assert!(scvi(other.path(), &with_small("train", &[])).status.success());
    std::fs::write(dir.path().join("counts.csv"), "cell_id,x,y\nc0,1,2\nc1,0,3\n").unwrap();
    let ckpt = other.path().join("model.ckpt");
    let o = scvi(dir.path(), &["eval", "--set", &format!("checkpoint={:?}", ckpt.to_str().unwrap())]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn numerical_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    assert!(scvi(dir.path(), &with_small("simulate", &[])).status.success());
    let o = scvi(dir.path(), &with_small("train", &["--set", "training.learning_rate=1e300"]));
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn seed_changes_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(scvi(a.path(), &with_small("simulate", &[])).status.success());
    let mut args = with_small("simulate", &[]);
    args.extend(["--seed", "1"]);
    assert!(scvi(b.path(), &args).status.success());
    let read = |d: &Path| std::fs::read(d.join("counts.csv")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
}
