use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ccs(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccs"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn small_dataset(dir: &Path) {
    let out = ccs(
        dir,
        &[
            "gen-data",
            "--classes",
            "4",
            "--per-class",
            "8",
            "--length",
            "24",
            "--d-in",
            "6",
            "--out",
            "data",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, name: &str, out_dir: &str, epochs: usize) {
    let text = format!(
        r#"{{"dataset": "data/manifest.json", "out_dir": "{out_dir}", "max_epochs": {epochs},
            "lr0": 0.01, "batch": {{"N": 2, "M": 2}}, "early_stop_patience": null,
            "model": {{"hidden": 8, "d": 6, "e": 3, "d_proj": 6, "segments": 2, "snippet": 4}}}}"#
    );
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn gen_data_prints_the_manifest_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    small_dataset(tmp.path());
    let first = fs::read(tmp.path().join("data/manifest.json")).unwrap();
    let out = ccs(
        tmp.path(),
        &[
            "gen-data",
            "--classes",
            "4",
            "--per-class",
            "8",
            "--length",
            "24",
            "--d-in",
            "6",
            "--out",
            "again",
        ],
    );
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("manifest.json"));
    let second = fs::read(tmp.path().join("again/manifest.json")).unwrap();
    assert_eq!(first.len(), second.len());
}

#[test]
fn odd_category_count_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = ccs(tmp.path(), &["gen-data", "--classes", "5", "--out", "d"]);
    assert_eq!(code(&out), 2);
    assert!(!tmp.path().join("d").exists());
}

#[test]
fn unknown_flags_are_usage_errors() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&ccs(tmp.path(), &["train", "--bogus"])), 2);
    assert_eq!(code(&ccs(tmp.path(), &["gradcheck", "--tol", "-1"])), 2);
}

#[test]
fn train_writes_checkpoint_and_log() {
    let tmp = TempDir::new().unwrap();
    small_dataset(tmp.path());
    write_config(tmp.path(), "cfg.json", "run", 3);
    let out = ccs(tmp.path(), &["train", "--config", "cfg.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("run/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,l1,l2,l3,total,acc_f,acc_o,acc_fused,lr");
    assert_eq!(lines.len(), 4);
    assert!(tmp.path().join("run/checkpoint.ckpt").exists());
    assert!(tmp.path().join("run/report.json").exists());
}

#[test]
fn missing_dataset_or_bad_key_exits_2() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("a.json"), r#"{"out_dir": "x"}"#).unwrap();
    assert_eq!(code(&ccs(tmp.path(), &["train", "--config", "a.json"])), 2);
    fs::write(
        tmp.path().join("b.json"),
        r#"{"dataset": "nope/manifest.json"}"#,
    )
    .unwrap();
    assert_eq!(code(&ccs(tmp.path(), &["train", "--config", "b.json"])), 2);
    fs::write(
        tmp.path().join("c.json"),
        r#"{"dataset": "d", "learning_rate": 1}"#,
    )
    .unwrap();
    assert_eq!(code(&ccs(tmp.path(), &["train", "--config", "c.json"])), 2);
    assert_eq!(
        code(&ccs(tmp.path(), &["train", "--config", "absent.json"])),
        2
    );
}

#[test]
fn resume_continues_the_epoch_counter_and_matches_a_straight_run() {
    let tmp = TempDir::new().unwrap();
    small_dataset(tmp.path());
    write_config(tmp.path(), "short.json", "split", 2);
    write_config(tmp.path(), "long.json", "split", 4);
    write_config(tmp.path(), "straight.json", "straight", 4);
    assert_eq!(
        code(&ccs(tmp.path(), &["train", "--config", "short.json"])),
        0
    );
    let out = ccs(
        tmp.path(),
        &[
            "train",
            "--config",
            "long.json",
            "--resume",
            "split/checkpoint.ckpt",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        code(&ccs(tmp.path(), &["train", "--config", "straight.json"])),
        0
    );
    let resumed = fs::read_to_string(tmp.path().join("split/metrics.csv")).unwrap();
    let straight = fs::read_to_string(tmp.path().join("straight/metrics.csv")).unwrap();
    assert!(resumed.lines().last().unwrap().starts_with("3,"));
    assert_eq!(resumed, straight);
}

#[test]
fn resume_rejects_a_changed_config() {
    let tmp = TempDir::new().unwrap();
    small_dataset(tmp.path());
    write_config(tmp.path(), "cfg.json", "run", 2);
    assert_eq!(
        code(&ccs(tmp.path(), &["train", "--config", "cfg.json"])),
        0
    );
    let changed = fs::read_to_string(tmp.path().join("cfg.json"))
        .unwrap()
        .replace("\"lr0\": 0.01", "\"lr0\": 0.02");
    fs::write(tmp.path().join("changed.json"), changed).unwrap();
    let out = ccs(
        tmp.path(),
        &[
            "train",
            "--config",
            "changed.json",
            "--resume",
            "run/checkpoint.ckpt",
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn identical_configs_give_identical_logs() {
    let tmp = TempDir::new().unwrap();
    small_dataset(tmp.path());
    write_config(tmp.path(), "a.json", "a", 3);
    write_config(tmp.path(), "b.json", "b", 3);
    assert_eq!(code(&ccs(tmp.path(), &["train", "--config", "a.json"])), 0);
    assert_eq!(code(&ccs(tmp.path(), &["train", "--config", "b.json"])), 0);
    let a = fs::read(tmp.path().join("a/metrics.csv")).unwrap();
    let b = fs::read(tmp.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_reports_the_checkpoint() {
    let tmp = TempDir::new().unwrap();
    small_dataset(tmp.path());
    write_config(tmp.path(), "cfg.json", "run", 2);
    assert_eq!(
        code(&ccs(tmp.path(), &["train", "--config", "cfg.json"])),
        0
    );
    let out = ccs(
        tmp.path(),
        &[
            "eval",
            "--config",
            "cfg.json",
            "--checkpoint",
            "run/checkpoint.ckpt",
            "--split",
            "all",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("run/eval.json")).unwrap())
            .unwrap();
    assert_eq!(report["n"], 4);
    assert_eq!(report["instances"].as_array().unwrap().len(), 32);
    assert_eq!(report["confusion"].as_array().unwrap().len(), 4);
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let ok = ccs(tmp.path(), &["gradcheck", "--points", "2"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));

    let fault = ccs(
        tmp.path(),
        &["gradcheck", "--points", "1", "--fault-sign-flip", "0"],
    );
    assert_eq!(code(&fault), 1);
    assert!(String::from_utf8_lossy(&fault.stdout).contains("ext_f.w1"));

    let hinge = ccs(tmp.path(), &["gradcheck", "--hinge-adjacent"]);
    assert_eq!(code(&hinge), 1);
    assert!(String::from_utf8_lossy(&hinge.stdout).contains("expected failure"));

    assert_eq!(
        code(&ccs(tmp.path(), &["gradcheck", "--fault-sign-flip", "999"])),
        2
    );
}

#[test]
fn ablate_single_seed_has_zero_spread_and_compares_aggregations() {
    let tmp = TempDir::new().unwrap();
    small_dataset(tmp.path());
    write_config(tmp.path(), "cfg.json", "abl", 1);
    // A product over eight positions diverges at the small-run rate.
    let text = fs::read_to_string(tmp.path().join("cfg.json"))
        .unwrap()
        .replace("\"lr0\": 0.01", "\"lr0\": 0.001");
    fs::write(tmp.path().join("cfg.json"), text).unwrap();
    let out = ccs(
        tmp.path(),
        &[
            "ablate",
            "--config",
            "cfg.json",
            "--seeds",
            "1",
            "--aggregations",
            "avg,max,mul,concat",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(tmp.path().join("abl/ablation_summary.csv")).unwrap();
    let mut rows = summary.lines();
    let header: Vec<&str> = rows.next().unwrap().split(',').collect();
    let std_cols: Vec<usize> = (0..header.len())
        .filter(|&i| header[i].ends_with("_std"))
        .collect();
    assert_eq!(std_cols.len(), 3);
    let body: Vec<&str> = rows.collect();
    assert_eq!(body.len(), 4);
    for row in body {
        let cells: Vec<&str> = row.split(',').collect();
        for &c in &std_cols {
            assert_eq!(cells[c].parse::<f64>().unwrap(), 0.0);
        }
    }
    let agg = fs::read_to_string(tmp.path().join("abl/aggregation.csv")).unwrap();
    for kind in ["avg", "max", "mul", "concat"] {
        assert!(agg.lines().any(|l| l.starts_with(kind)), "{kind} missing");
    }
}

#[test]
fn ablate_rejects_unknown_aggregation() {
    let tmp = TempDir::new().unwrap();
    small_dataset(tmp.path());
    write_config(tmp.path(), "cfg.json", "abl", 1);
    let out = ccs(
        tmp.path(),
        &[
            "ablate",
            "--config",
            "cfg.json",
            "--seeds",
            "1",
            "--aggregations",
            "median",
        ],
    );
    assert_eq!(code(&out), 2);
}
