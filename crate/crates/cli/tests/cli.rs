mod common;

use std::fs;

use common::{ghvit, stderr, stdout, tiny_config, write_synthetic};
use ghvit::train::{Checkpoint, VERSION};
use ghvit_cli::metrics::{parse_csv, parse_metrics};

fn setup(epochs: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let root = write_synthetic(dir.path(), 80, 40);
    fs::write(dir.path().join("run.cfg"), tiny_config(&root, epochs)).unwrap();
    dir
}

#[test]
fn train_writes_checkpoint_and_one_metrics_row_per_epoch() {
    let dir = setup(3);
    let o = ghvit(dir.path(), &["train", "--config", "run.cfg", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = stdout(&o);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch ")).count(), 3, "{log}");
    let history = parse_metrics(&fs::read_to_string(dir.path().join("run/metrics.txt")).unwrap()).unwrap();
    assert_eq!(history.iter().map(|m| m.epoch).collect::<Vec<_>>(), [1, 2, 3]);
    let ckpt = Checkpoint::load(dir.path().join("run/checkpoint.ghvt")).unwrap();
    assert_eq!(ckpt.history, history);
    assert_eq!(ckpt.epoch, 3);
}

#[test]
fn unknown_key_fails_naming_key_and_line() {
    let dir = setup(1);
    let cfg = fs::read_to_string(dir.path().join("run.cfg")).unwrap() + "learning_rte=0.01\n";
    let line = cfg.lines().count();
    fs::write(dir.path().join("typo.cfg"), cfg).unwrap();
    let o = ghvit(dir.path(), &["train", "--config", "typo.cfg", "--out", "run"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("learning_rte") && err.contains(&format!("typo.cfg:{line}:")), "{err}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn missing_inputs_fail_before_any_output() {
    let dir = setup(1);
    let o = ghvit(dir.path(), &["train", "--config", "absent.cfg"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("absent.cfg"), "{}", stderr(&o));

    let o = ghvit(
        dir.path(),
        &["train", "--config", "run.cfg", "--set", "test_labels=nowhere/labels", "--out", "run"],
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nowhere/labels"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn command_line_overrides_win_and_are_echoed() {
    let dir = setup(5);
    let o = ghvit(
        dir.path(),
        &["train", "--config", "run.cfg", "--epochs", "1", "--seed", "21", "--set", "lr=0.002", "--out", "run"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = Checkpoint::load(dir.path().join("run/checkpoint.ghvt")).unwrap();
    let get = |k: &str| ckpt.config.get(k).map(String::as_str);
    assert_eq!((get("epochs"), get("seed"), get("lr")), (Some("1"), Some("21"), Some("0.002")));
    assert_eq!((ckpt.seed, ckpt.epoch), (21, 1));
    assert_eq!(ckpt.optimizer.config.lr, 0.002);
    assert_eq!(get("out"), None);
}

#[test]
fn identical_invocations_are_bitwise_identical() {
    let dir = setup(2);
    for out in ["a", "b"] {
        let o = ghvit(dir.path(), &["train", "--config", "run.cfg", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["checkpoint.ghvt", "metrics.txt"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
}

#[test]
fn eval_reproduces_the_last_logged_accuracy() {
    let dir = setup(2);
    let o = ghvit(dir.path(), &["train", "--config", "run.cfg", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let last = stdout(&o).lines().find(|l| l.starts_with("epoch 2:")).unwrap().to_string();
    let logged = last.rsplit(' ').next().unwrap().to_string();

    let o = ghvit(dir.path(), &["eval", "--checkpoint", "run/checkpoint.ghvt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with(&format!("test accuracy: {logged} (")), "{line} vs {last}");
    assert!(line.trim_end().ends_with("/40)"), "{line}");

    let o = ghvit(dir.path(), &["eval", "--checkpoint", "run/checkpoint.ghvt", "--split", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("train accuracy: ") && stdout(&o).trim_end().ends_with("/80)"));
}

#[test]
fn eval_rejects_corrupt_checkpoints() {
    let dir = setup(0);
    let o = ghvit(dir.path(), &["train", "--config", "run.cfg", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(dir.path().join("run/checkpoint.ghvt")).unwrap();

    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"GHVX");
    fs::write(dir.path().join("magic.ghvt"), magic).unwrap();
    let o = ghvit(dir.path(), &["eval", "--checkpoint", "magic.ghvt"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bad checkpoint magic"), "{}", stderr(&o));

    let mut version = bytes;
    version[4] = 7;
    fs::write(dir.path().join("version.ghvt"), version).unwrap();
    let o = ghvit(dir.path(), &["eval", "--checkpoint", "version.ghvt"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains('7') && err.contains(&VERSION.to_string()), "{err}");
}

#[test]
fn metrics_export_round_trips() {
    let dir = setup(2);
    assert!(ghvit(dir.path(), &["train", "--config", "run.cfg", "--out", "run"]).status.success());
    let o = ghvit(dir.path(), &["metrics-export", "run/metrics.txt", "--out", "m.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,train_loss,test_accuracy\n"));
    let metrics = parse_metrics(&fs::read_to_string(dir.path().join("run/metrics.txt")).unwrap()).unwrap();
    assert_eq!(parse_csv(&csv).unwrap(), metrics);

    let o = ghvit(dir.path(), &["metrics-export", "run/checkpoint.ghvt", "--out", "c.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("c.csv")).unwrap(), csv);
}

#[test]
fn metrics_export_edge_cases() {
    let dir = setup(0);
    assert!(ghvit(dir.path(), &["train", "--config", "run.cfg", "--out", "run"]).status.success());
    let o = ghvit(dir.path(), &["metrics-export", "run/metrics.txt", "--out", "empty.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("empty.csv")).unwrap(), "epoch,train_loss,test_accuracy\n");

    fs::write(
        dir.path().join("bad.txt"),
        "epoch=1 train_loss=0.5 test_accuracy=0.5\nepoch=2 train_loss=0.4\n",
    )
    .unwrap();
    let o = ghvit(dir.path(), &["metrics-export", "bad.txt", "--out", "bad.csv"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    assert!(!dir.path().join("bad.csv").exists());
}

#[test]
fn gradcheck_passes_and_names_a_corrupted_op() {
    let dir = tempfile::tempdir().unwrap();
    let o = ghvit(dir.path(), &["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = stdout(&o);
    for op in ["matmul", "softmax", "layer_norm", "gelu", "model[gcn_hvit_1]"] {
        assert_eq!(report.lines().filter(|l| l.starts_with(&format!("{op} "))).count(), 1, "{op}: {report}");
    }

    let o = ghvit(dir.path(), &["gradcheck", "--fault", "matmul"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("gradient check failed") && err.contains("matmul"), "{err}");
}
