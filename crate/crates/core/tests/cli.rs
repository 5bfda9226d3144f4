use std::path::Path;
use std::process::{Command, Output};

use cdalab::cli::{dir_digest, RunConfig};
use cdalab::model::Checkpoint;

fn cdalab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdalab")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(data: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen", "--data-dir", path(data), "--set", "samples_per_domain=40"];
    args.extend_from_slice(extra);
    cdalab(&args)
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = gen(&a, &[]);
    let ob = gen(&b, &[]);
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    assert!(ob.status.success());
    assert_eq!(dir_digest(&a).unwrap(), dir_digest(&b).unwrap());
    let printed = String::from_utf8(oa.stdout).unwrap();
    assert!(printed.starts_with(&dir_digest(&a).unwrap()));
    let files = std::fs::read_dir(&a).unwrap().count();
    assert_eq!(files, 10, "nine domain files plus the manifest");

    let c = dir.path().join("c");
    assert!(gen(&c, &["--data-seed", "5"]).status.success());
    assert_ne!(dir_digest(&a).unwrap(), dir_digest(&c).unwrap());
}

#[test]
fn so_training_writes_a_complete_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(gen(&data, &[]).status.success());
    let o = cdalab(&["train", "--data-dir", path(&data), "--run-dir", path(&run), "--variant", "so", "--steps", "30"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "manifest.json", "losses.csv", "checkpoint.final", "metrics.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let mut r = csv::Reader::from_path(run.join("losses.csv")).unwrap();
    let h = r.headers().unwrap().clone();
    let lp = h.iter().position(|c| c == "l_p").unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().all(|row| row[lp].parse::<f64>().unwrap() == 0.0));

    let model = Checkpoint::load(&run.join("checkpoint.final")).unwrap().restore().unwrap();
    assert!(model.all_finite());
    let saved = RunConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(saved.train.steps, 30);

    let o = cdalab(&["eval", "--data-dir", path(&data), "--run-dir", path(&run), "--rule", "first"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = cdalab(&["plot", "--run-dir", path(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("accuracy.svg").exists() && run.join("losses.svg").exists());
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gen(&data, &[]).status.success());
    let o = cdalab(&["train", "--data-dir", path(&data), "--steps", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("steps"));
    assert_eq!(cdalab(&["gen", "--benchmark", "mnist"]).status.code(), Some(1));
    assert_eq!(cdalab(&["config", "--set", "train.bogus=1"]).status.code(), Some(1));
    assert_eq!(cdalab(&["config", "--set", "no_equals_sign"]).status.code(), Some(1));
}

#[test]
fn missing_dataset_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = cdalab(&["train", "--data-dir", path(&dir.path().join("absent")), "--steps", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_prints_overrides() {
    let o = cdalab(&["config", "--set", "train.batch_size=32", "--position-kind", "p3", "--segment-kind", "s2"]);
    assert!(o.status.success());
    let cfg: RunConfig = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(cfg.train.batch_size, 32);
    assert_eq!(cfg.position_kind, cdalab::domain_synth::PositionKind::P3);
    assert_eq!(cfg.segment_kind, Some(cdalab::domain_synth::SegmentKind::S2));
}

#[test]
fn ablate_tabulates_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("abl");
    let o = cdalab(&[
        "ablate",
        "--run-dir",
        path(&root),
        "--variants",
        "SO,V5",
        "--seeds",
        "0,1",
        "--steps",
        "12",
        "--set",
        "samples_per_domain=30",
        "--set",
        "eval.mmd=false",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(root.join("ablation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 2 * (2 + 1));
    assert_eq!(rows.iter().filter(|r| &r[1] == "mean").count(), 2);
    assert!(root.join("SO-seed1").join("metrics.json").exists());

    let o = cdalab(&["ablate", "--run-dir", path(&root), "--variants", ""]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn theory_check_exit_codes() {
    let o = cdalab(&["theory-check", "--trials", "20", "--resolution", "500"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);
    let o = cdalab(&["theory-check", "--trials", "20", "--resolution", "500", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(3));
    let o = cdalab(&["theory-check", "--trials", "0"]);
    assert_eq!(o.status.code(), Some(1));
}
