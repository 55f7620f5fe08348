use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_lteode");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn lteode")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "`lteode {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small scenario so each command finishes in a second or two.
fn small_data(dir: &Path, extra: &[&str]) -> String {
    let data = dir.join("data");
    let args = [&["generate-data", "--out", s(&data), "--n-nodes", "5", "--total-t", "240"][..], extra].concat();
    ok(&args);
    s(&data).to_string()
}

#[test]
fn generate_data_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    for f in ["series.csv", "edges.csv", "events.csv", "meta.json", "config.toml"] {
        assert!(Path::new(&data).join(f).exists(), "{f} missing");
    }
    let series = fs::read_to_string(Path::new(&data).join("series.csv")).unwrap();
    assert_eq!(series.lines().next().unwrap(), "t,node0_f0,node1_f0,node2_f0,node3_f0,node4_f0");
    assert_eq!(series.lines().count(), 241);
    let events = fs::read_to_string(Path::new(&data).join("events.csv")).unwrap();
    assert!(events.lines().count() > 1);
}

#[test]
fn zero_shock_rate_writes_header_only_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &["--shock-rate", "0"]);
    let events = fs::read_to_string(Path::new(&data).join("events.csv")).unwrap();
    assert_eq!(events.lines().count(), 1);
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (da, db) = (small_data(a.path(), &["--seed", "3"]), small_data(b.path(), &["--seed", "3"]));
    for f in ["series.csv", "edges.csv", "events.csv", "meta.json"] {
        assert_eq!(fs::read(Path::new(&da).join(f)).unwrap(), fs::read(Path::new(&db).join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    let dc = small_data(c.path(), &["--seed", "4"]);
    assert_ne!(
        fs::read(Path::new(&da).join("series.csv")).unwrap(),
        fs::read(Path::new(&dc).join("series.csv")).unwrap()
    );
}

#[test]
fn train_evaluate_and_mask_stats() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let out = dir.path().join("run");
    ok(&["train", "--data", &data, "--out", s(&out), "--epochs", "2", "--steps", "2"]);
    for f in ["model.ckpt", "history.csv", "metrics.csv", "config.toml"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,train_loss,val_mae,m_mean,m_std,m_p95");
    let ckpt = out.join("model.ckpt");
    assert!(fs::read_to_string(&ckpt).unwrap().starts_with("LTEODE-CHECKPOINT v1"));

    let eval = dir.path().join("eval");
    ok(&["evaluate", "--data", &data, "--checkpoint", s(&ckpt), "--out", s(&eval), "--split", "val"]);
    assert!(fs::read_to_string(eval.join("metrics.csv")).unwrap().starts_with("split,mae,rmse,mape"));

    let masks = dir.path().join("masks");
    ok(&["mask-stats", "--data", &data, "--checkpoint", s(&ckpt), "--out", s(&masks)]);
    let summary = fs::read_to_string(masks.join("mask_summary.csv")).unwrap();
    assert!(summary.starts_with("group,count,mean,std,p95"));
    assert!(summary.lines().any(|l| l.starts_with("shock,")));
}

#[test]
fn ablate_tabulates_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let out = dir.path().join("ablate");
    ok(&["ablate", "--data", &data, "--out", s(&out), "--epochs", "1", "--steps", "1"]);
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "variant,params,mae,mape,rmse");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "no_lte", "no_compensation", "no_mask", "manifold_penalty"]);
}

#[test]
fn nfe_report_and_intersect_demo() {
    let dir = tempfile::tempdir().unwrap();
    let nfe = dir.path().join("nfe");
    ok(&["nfe-report", "--out", s(&nfe), "--steps", "1,3", "--mask-mode", "off", "--n-nodes", "4"]);
    let csv = fs::read_to_string(nfe.join("nfe_report.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[1][..5], ["off", "3", "2", "12", "12"]);

    let demo = dir.path().join("demo");
    let stdout = ok(&["intersect-demo", "--out", s(&demo)]);
    assert_eq!(stdout.lines().last(), Some("PASS"));
    for f in ["trajectory_off_identical.csv", "trajectory_off_ordered.csv", "trajectory_on.csv"] {
        assert!(fs::read_to_string(demo.join(f)).unwrap().starts_with("step,node0,node1"));
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["nfe-report", "--mask-mode", "sideways"]).status.code(), Some(1));

    let missing = dir.path().join("nowhere");
    let out = run(&["train", "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("lteode: error[data]:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "epoch = 3\n").unwrap();
    assert_eq!(run(&["train", "--config", s(&bad)]).status.code(), Some(2));

    // a series too short to hold a window in every split
    let data = small_data(dir.path(), &[]);
    let out = run(&["train", "--data", &data, "--out", s(&dir.path().join("o")), "--window", "60", "--horizon", "30"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["train", "--data", &data, "--out", s(&dir.path().join("o")), "--steps", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_sets_values_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("run");
    fs::write(&cfg, format!("data = {data:?}\nepochs = 1\nsteps = 3\nseed = 11\n")).unwrap();
    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--steps", "1"]);
    let resolved = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(resolved.contains("steps = 1\n"), "{resolved}");
    assert!(resolved.contains("seed = 11\n"));
    assert!(resolved.contains("epochs = 1\n"));
}
