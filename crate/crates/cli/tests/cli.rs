use std::path::Path;
use std::process::{Command, Output};

use kws_core::data::read_dataset;
use kws_core::frontend::write_wav;
use serde_json::Value;

fn smp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smp-kws"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("SMP_KWS_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_reports_count_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.kws");
    let b = dir.path().join("b.kws");
    let o = smp(&["synth", "--out", p(&a), "--count", "1000", "--seed", "7"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("wrote 1000 records"));
    assert_eq!(read_dataset(&a).unwrap().len(), 1000);
    let m = read_json(&dir.path().join("a.kws.manifest.json"));
    assert_eq!(m["command"], "synth");
    assert_eq!(m["result"]["records"], 1000);
    assert_eq!(m["config"]["synth"]["seed"], 7);

    assert!(smp(&["synth", "--out", p(&b), "--count", "1000", "--seed", "7"]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn synth_zero_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty.kws");
    let o = smp(&["synth", "--out", p(&out), "--count", "0"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("wrote 0 records"));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.kws");
    let run = dir.path().join("run");
    assert!(smp(&["synth", "--out", p(&data), "--count", "24"]).status.success());
    let o = smp(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--set",
        "train.steps=4",
        "--set",
        "train.batch_size=4",
    ]);
    assert!(o.status.success(), "{o:?}");
    for f in ["model.smpw", "train_log.csv", "manifest.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(read_json(&run.join("manifest.json"))["config"]["train"]["steps"], 4);

    let roc = dir.path().join("roc.csv");
    let manifest = dir.path().join("eval.json");
    let o = smp(&[
        "eval",
        "--checkpoint",
        p(&run.join("model.smpw")),
        "--data",
        p(&data),
        "--target-fa",
        "1.0",
        "--roc",
        p(&roc),
        "--manifest",
        p(&manifest),
    ]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert!(text.starts_with("threshold "), "{text}");
    assert!(text.contains(" FR ") && text.contains("zero-FA"), "{text}");
    assert!(std::fs::read_to_string(&roc).unwrap().starts_with("threshold,fr,fa_per_hour"));
    assert_eq!(read_json(&manifest)["config"]["eval"]["target_fa_per_hour"], 1.0);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("g.json");
    let o = smp(&["gradcheck", "--utterances", "2", "--manifest", p(&m)]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains(": ok"));
    assert_eq!(read_json(&m)["result"]["ok"], true);
}

#[test]
fn frontend_turns_wavs_into_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("tone.wav");
    let samples: Vec<f64> = (0..16000).map(|i| 0.3 * (i as f64 * 0.05).sin()).collect();
    write_wav(&wav, 16000, &samples).unwrap();
    let out = dir.path().join("f.kws");
    let o = smp(&["frontend", "--out", p(&out), "--keyword-end", "50", p(&wav)]);
    assert!(o.status.success(), "{o:?}");
    let data = read_dataset(&out).unwrap();
    assert_eq!(data.len(), 1);
    assert!(data[0].annotation.is_positive());
    assert!(data[0].num_frames() > 50);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.kws");
    assert_eq!(smp(&["synth", "--out", p(&out), "--set", "train.stepz=1"]).status.code(), Some(2));
    assert_eq!(smp(&["init-config", "--preset", "nope"]).status.code(), Some(2));

    let missing = dir.path().join("missing.kws");
    let o = smp(&["train", "--data", p(&missing), "--out", p(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(3), "{o:?}");

    let junk = dir.path().join("junk.kws");
    std::fs::write(&junk, b"not a dataset").unwrap();
    let o = smp(&["train", "--data", p(&junk), "--out", p(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(3), "{o:?}");
}

#[test]
fn presets_and_init_config() {
    let o = smp(&["presets"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 7);
    let o = smp(&["init-config", "--preset", "max5_mp_smp", "--set", "train.steps=9"]);
    assert!(o.status.success());
    let cfg: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cfg["train"]["steps"], 9);
    assert_eq!(cfg["loss"]["encoder"], "mp");
}
