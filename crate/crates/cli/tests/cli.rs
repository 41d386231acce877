use std::path::Path;
use std::process::{Command, Output};

use latrack_core::checkpoint;

const TINY: &[&str] = &[
    "--preset",
    "toy",
    "-o",
    "epochs=1",
    "-o",
    "steps_per_epoch=2",
    "-o",
    "batch_size=2",
    "-o",
    "channels=8",
    "-o",
    "synth.length=8",
];

fn latrack(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latrack"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = latrack(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = TINY.to_vec();
    v.extend_from_slice(args);
    v
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

#[test]
fn gradcheck_passes_on_fresh_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck"], dir.path());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("objective.lafa"));
    assert!(!table.contains("FAIL"));
}

#[test]
fn track_then_eval_reports_auc() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&with_tiny(&["synth", "--out", "seq"]), d);
    ok(&with_tiny(&["train", "--out", "run"]), d);
    ok(
        &["track", "--checkpoint", "run/model.ckpt", "--sequence", "seq", "--out", "res.jsonl", "--maps", "maps.bin"],
        d,
    );
    ok(
        &["eval", "--results", "res.jsonl", "--sequence", "seq", "--out", "report", "--plots"],
        d,
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report/report.json")).unwrap()).unwrap();
    let auc = report["aggregate"]["auc"].as_f64().expect("auc present");
    assert!((0.0..=1.0).contains(&auc));
    assert!(d.join("report/curves/success.json").is_file());
    assert!(d.join("report/plots/precision.png").is_file());
    let dumps = latrack_core::io::read_map_dump(&d.join("maps.bin")).unwrap();
    assert_eq!(dumps.len(), 7);
    assert_eq!(dumps[0].0.shape[0], 3);
}

#[test]
fn override_is_echoed_in_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = with_tiny(&["train", "--out", "run"]);
    args.extend_from_slice(&["--override", "epochs=1", "-o", "train.seed=5"]);
    ok(&args, dir.path());
    let c = checkpoint::load(&dir.path().join("run/model.ckpt")).unwrap();
    assert_eq!(c.config.train.epochs, 1);
    assert_eq!(c.config.train.seed, 5);
    assert_eq!(c.config.get("epochs").unwrap(), "1");
}

#[test]
fn config_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "epochs = 3\nsteps_per_epoch = 1\nbatch_size = 2\n").unwrap();
    ok(
        &["--preset", "toy", "--config", "run.cfg", "-o", "epochs=2", "-o", "channels=8", "train", "--out", "run"],
        dir.path(),
    );
    let c = checkpoint::load(&dir.path().join("run/model.ckpt")).unwrap();
    assert_eq!((c.config.train.epochs, c.config.train.steps_per_epoch), (2, 1));
    assert_eq!(c.step, 2);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&with_tiny(&["synth", "--out", "seq"]), d);
    for tag in ["a", "b"] {
        let run = format!("run-{tag}");
        let res = format!("res-{tag}.jsonl");
        let rep = format!("rep-{tag}");
        ok(&with_tiny(&["train", "--out", &run]), d);
        let ckpt = format!("{run}/model.ckpt");
        ok(&["track", "--checkpoint", &ckpt, "--sequence", "seq", "--out", &res], d);
        ok(&["eval", "--results", &res, "--sequence", "seq", "--out", &rep, "--checkpoint", &ckpt], d);
    }
    for f in ["run-{}/model.ckpt", "run-{}/metrics.jsonl", "res-{}.jsonl", "rep-{}/report.json"] {
        let a = std::fs::read(d.join(f.replace("{}", "a"))).unwrap();
        let b = std::fs::read(d.join(f.replace("{}", "b"))).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn failures_use_documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = latrack(&["frobnicate"], d);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["kind"], "usage");

    let out = latrack(&["train", "--out", "x", "-o", "no_such_key=1"], d);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"]["kind"], "config");

    let out = latrack(&["train", "--out", "x", "-o", "seed=1"], d);
    assert_eq!(out.status.code(), Some(3));

    let out = latrack(&["--config", "missing.cfg", "synth", "--out", "s"], d);
    assert_eq!(out.status.code(), Some(3));

    std::fs::create_dir(d.join("empty")).unwrap();
    std::fs::write(d.join("r.jsonl"), "").unwrap();
    let out = latrack(&["eval", "--results", "r.jsonl", "--sequence", "empty", "--out", "rep"], d);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_line(&out)["error"]["code"], 4);

    let out = latrack(&["track", "--checkpoint", "r.jsonl", "--sequence", "empty", "--out", "o"], d);
    assert_eq!(out.status.code(), Some(4));
}
