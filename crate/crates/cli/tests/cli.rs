//! End-to-end runs of the `gradepipe` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/configs/desk.cfg");

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradepipe")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_train_infer_grade_roimap() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let patients = dir.path().join("patients");
    let run_dir = dir.path().join("run");

    assert_eq!(code(&run(&["synth", "--out", p(&data), "--per-class", "2"])), 0);
    assert_eq!(code(&run(&["synth", "--out", p(&patients), "--patients", "1"])), 0);
    assert_eq!(fs::read_dir(&data).unwrap().count(), 16);
    let manifest = fs::read_to_string(patients.join("patients.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 1);
    assert_eq!(manifest.trim_end().split('\t').count(), 6);

    let cfg = dir.path().join("tiny.cfg");
    let text = fs::read_to_string(DESK).unwrap() + "pipeline.epochs = 0\nroi.num_patches = 2\n";
    fs::write(&cfg, text).unwrap();

    let o = run(&["--config", p(&cfg), "train", p(&data), "--out", p(&run_dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("epoch\ttrain_loss"));
    let ckpt = run_dir.join("model.tncp");
    assert!(ckpt.exists() && run_dir.join("config.cfg").exists());

    let o = run(&["--config", p(&cfg), "infer", p(&patients), "--checkpoint", p(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert!(table.starts_with("slide_id\tlabel\ts_neg"));
    assert_eq!(table.lines().count(), 6);

    let results = dir.path().join("results");
    let o = run(&["--config", p(&cfg), "grade", p(&patients), "--checkpoint", p(&ckpt), "--out", p(&results)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stages = fs::read_to_string(results.join("stages.tsv")).unwrap();
    assert!(stages.starts_with("patient_id\tstage\np000\tpN"));
    assert_eq!(fs::read_to_string(results.join("slides.tsv")).unwrap().lines().count(), 6);

    let slide = patients.join("p000_s0.wsip");
    let pbm = dir.path().join("mask.pbm");
    let o = run(&["roimap", "--slide", p(&slide), "--out", p(&pbm)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read(&pbm).unwrap().starts_with(b"P4"));
    assert_eq!(fs::read_to_string(dir.path().join("mask.tsv")).unwrap().lines().count(), 20);
}

#[test]
fn bad_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.cfg");
    fs::write(&bad_cfg, "pipeline.epochs = many\n").unwrap();
    let o = run(&["--config", p(&bad_cfg), "synth", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    let o = run(&["roimap", "--slide", p(&dir.path().join("absent.wsip")), "--out", p(&dir.path().join("m.pbm"))]);
    assert_eq!(code(&o), 2);

    let o = run(&["infer", p(&dir.path().join("absent.wsip")), "--checkpoint", p(&dir.path().join("absent.tncp"))]);
    assert_eq!(code(&o), 2);

    let garbage = dir.path().join("garbage.wsip");
    fs::write(&garbage, b"not a slide").unwrap();
    let o = run(&["roimap", "--slide", p(&garbage), "--out", p(&dir.path().join("m.pbm"))]);
    assert_eq!(code(&o), 2);

    fs::write(&bad_cfg, "pipeline.train_fraction = 1.5\n").unwrap();
    let o = run(&["--config", p(&bad_cfg), "synth", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
}
