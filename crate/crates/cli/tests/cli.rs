use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
seed = 3

[synth]
clips = 6
classes = 2
duration = 1.0
sample_rate = 16000
max_event_len = 0.6

[features]
sample_rate = 16000
n_mels = 16

[model]
cnn_channels = [4, 4, 4]
time_pooling = [2, 2, 2]
gru_units = 6
fc_units = 8
conditioner_hidden = [8, 8, 8]

[train]
epochs = 2
batch_size = 3

[tuning]
thresholds = [0.3, 0.5]
median_sizes = [1, 3]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_soundtriage"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn soundtriage")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        fs::write(&config, TINY_CONFIG).unwrap();
        Self { _dir: dir, root, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn synth(&self, name: &str, seed: &str) -> PathBuf {
        let out = self.path(name);
        ok(&["synth", "--config", s(&self.config), "--seed", seed, "--out", s(&out)]);
        out
    }

    fn train(&self, name: &str, train: &Path, val: &Path) -> PathBuf {
        let out = self.path(name);
        ok(&[
            "train", "--config", s(&self.config), "--train", s(train), "--val", s(val), "--out", s(&out),
        ]);
        out
    }
}

fn count_wavs(dir: &Path) -> usize {
    fs::read_dir(dir.join("clips"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "wav"))
        .count()
}

#[test]
fn synth_writes_layout_and_is_reproducible() {
    let fx = Fixture::new();
    let a = fx.synth("a", "1");
    let b = fx.synth("b", "1");
    assert_eq!(count_wavs(&a), 6);
    let ann = fs::read(a.join("annotations.jsonl")).unwrap();
    assert_eq!(ann.iter().filter(|&&c| c == b'\n').count(), 6);
    assert_eq!(ann, fs::read(b.join("annotations.jsonl")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"]["synth"]["clips"], 6);
}

#[test]
fn synth_flags_override_config() {
    let fx = Fixture::new();
    let out = fx.path("one");
    ok(&[
        "synth", "--config", s(&fx.config), "--clips", "3", "--classes", "1", "--out", s(&out),
    ]);
    assert_eq!(count_wavs(&out), 3);
    let classes: Vec<String> = serde_json::from_slice(&fs::read(out.join("classes.json")).unwrap()).unwrap();
    assert_eq!(classes.len(), 1);
}

#[test]
fn usage_errors_exit_2_without_outputs() {
    let fx = Fixture::new();
    let out = fx.path("bad");
    let r = run(&["synth", "--clips", "many", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
    let r = run(&["synth", "--clips", "2"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--out"));
    let r = run(&["synth", "--config", s(&fx.config), "--classes", "0", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
    let bad = fx.path("bad.toml");
    fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    let r = run(&["synth", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_without_outputs() {
    let fx = Fixture::new();
    let data = fx.synth("data", "1");
    let out = fx.path("eval");
    let r = run(&["eval", "--checkpoint", s(&fx.path("missing.ckpt")), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());

    let garbage = fx.path("garbage.ckpt");
    fs::write(&garbage, b"SNDTRIAG\x09\x00\x00\x00rest").unwrap();
    let r = run(&["eval", "--checkpoint", s(&garbage), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&r.stderr);
    assert!(msg.contains("version 9") && msg.contains("version 1"), "{msg}");
    assert!(!out.exists());
}

#[test]
fn train_then_evaluate_end_to_end() {
    let fx = Fixture::new();
    let train = fx.synth("train", "1");
    let val = fx.synth("val", "2");
    let run_a = fx.train("run_a", &train, &val);
    let run_b = fx.train("run_b", &train, &val);

    let log = fs::read_to_string(run_a.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch\ttrain_loss\tval_frame_f"));
    assert_eq!(log.lines().count(), 3);
    assert_eq!(log.as_bytes(), fs::read(run_b.join("train_log.tsv")).unwrap());
    assert_eq!(fs::read(run_a.join("model.ckpt")).unwrap(), fs::read(run_b.join("model.ckpt")).unwrap());

    // re-running from the manifest reproduces the run
    let run_c = fx.path("run_c");
    ok(&[
        "train", "--config", s(&run_a.join("manifest.json")), "--train", s(&train), "--val", s(&val), "--out",
        s(&run_c),
    ]);
    assert_eq!(log.as_bytes(), fs::read(run_c.join("train_log.tsv")).unwrap());

    let ckpt = run_a.join("model.ckpt");
    let uniform = fx.path("eval_uniform");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&val), "--out", s(&uniform)]);
    let targeted = fx.path("eval_target");
    ok(&[
        "eval", "--checkpoint", s(&ckpt), "--data", s(&val), "--target", "1", "--weight", "1", "--out",
        s(&targeted),
    ]);
    for f in ["report.json", "report.tsv"] {
        assert_eq!(fs::read(uniform.join(f)).unwrap(), fs::read(targeted.join(f)).unwrap(), "{f}");
    }
    let again = fx.path("eval_again");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&val), "--out", s(&again)]);
    assert_eq!(fs::read(uniform.join("report.tsv")).unwrap(), fs::read(again.join("report.tsv")).unwrap());

    let tsv = fs::read_to_string(uniform.join("report.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4);

    let tuned = fx.path("tune");
    ok(&["tune", "--checkpoint", s(&ckpt), "--data", s(&val), "--weights", "1,5", "--out", s(&tuned)]);
    let tuning: serde_json::Value = serde_json::from_slice(&fs::read(tuned.join("tuning.json")).unwrap()).unwrap();
    assert_eq!(tuning["classes"].as_array().unwrap().len(), 2);

    let infer = fx.path("infer");
    ok(&[
        "infer", "--checkpoint", s(&ckpt), "--data", s(&val), "--lambda", "1,10", "--postprocess",
        s(&tuned.join("tuning.json")), "--out", s(&infer),
    ]);
    let preds = fs::read_to_string(infer.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 6);
    for line in preds.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["clip_id"].is_string());
        assert_eq!(v["lambda"], serde_json::json!([1.0, 10.0]));
        assert!(v["events"].is_array());
    }

    let sweep = fx.path("sweep");
    ok(&["sweep", "--checkpoint", s(&ckpt), "--data", s(&val), "--out", s(&sweep)]);
    let csv = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 6);
    for class in 0..2 {
        assert_eq!(rows.iter().filter(|r| r.starts_with(&format!("{class},"))).count(), 6);
    }

    let r = run(&["infer", "--checkpoint", s(&ckpt), "--data", s(&val), "--lambda", "1,2,3", "--out", s(&fx.path("x"))]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn baseline_flags_are_wired() {
    let fx = Fixture::new();
    let train = fx.synth("train", "1");
    let val = fx.synth("val", "2");
    let out = fx.path("baseline");
    ok(&[
        "train", "--config", s(&fx.config), "--train", s(&train), "--val", s(&val), "--loss", "sed",
        "--identity-film", "--epochs", "1", "--out", s(&out),
    ]);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["loss"], "sed");
    assert_eq!(manifest["config"]["train"]["identity_film"], true);
    assert_eq!(fs::read_to_string(out.join("train_log.tsv")).unwrap().lines().count(), 2);
}
