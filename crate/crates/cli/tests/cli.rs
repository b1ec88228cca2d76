use std::path::Path;
use std::process::{Command, Output};

fn smmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smmf")).args(args).output().expect("running smmf")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = smmf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("results JSON on stdout")
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

/// A tiny dataset and a two-step checkpoint.
fn trained(dir: &Path) -> String {
    ok(&["synthgen", "--out", &p(dir, "data"), "--n", "6", "--seed", "3"]);
    let ckpt = p(dir, "m.smmf");
    ok(&["train", "--data", &p(dir, "data"), "--out", &ckpt, "--steps", "2", "--batch", "1", "--warmup", "1"]);
    ckpt
}

#[test]
fn sampling_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    for name in ["a.vten", "b.vten"] {
        ok(&["sample", "--ckpt", &ckpt, "--class", "circle", "--seed", "7", "--steps", "5", "--out", &p(dir.path(), name)]);
    }
    let a = std::fs::read(dir.path().join("a.vten")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.vten")).unwrap());
    ok(&["sample", "--ckpt", &ckpt, "--class", "circle", "--seed", "8", "--steps", "5", "--out", &p(dir.path(), "c.vten")]);
    assert_ne!(a, std::fs::read(dir.path().join("c.vten")).unwrap());
    assert!(dir.path().join("a.vten.run.json").exists());
}

#[test]
fn track_and_self_score() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synthgen", "--out", &p(dir.path(), "data"), "--n", "3", "--seed", "1"]);
    let video = p(dir.path(), "data/videos/0000.vten");
    ok(&["track", "--video", &video, "--out", &p(dir.path(), "t.json")]);
    let r = ok(&["score", "--src", &p(dir.path(), "t.json"), "--gen", &p(dir.path(), "t.json"), "--out", &p(dir.path(), "s.json")]);
    assert!((r["motion_fidelity"].as_f64().unwrap() - 1.0).abs() < 1e-6, "{r}");
}

#[test]
fn corrupted_inputs_exit_with_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synthgen", "--out", &p(dir.path(), "data"), "--n", "3", "--seed", "1"]);
    let bytes = std::fs::read(dir.path().join("data/videos/0000.vten")).unwrap();
    let mut magic = bytes.clone();
    magic[0] = b'Z';
    std::fs::write(dir.path().join("magic.vten"), magic).unwrap();
    std::fs::write(dir.path().join("short.vten"), &bytes[..bytes.len() - 1]).unwrap();
    for name in ["magic.vten", "short.vten"] {
        let out = smmf(&["render", "--video", &p(dir.path(), name), "--out", &p(dir.path(), "r")]);
        assert_eq!(out.status.code(), Some(4));
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[format]"));
    }
    let missing = smmf(&["render", "--out", &p(dir.path(), "r")]);
    assert_eq!(missing.status.code(), Some(3));
    let unknown = smmf(&["render", "--video", "x.vten", "--out", "r", "--set", "bogus=1"]);
    assert_eq!(unknown.status.code(), Some(3));
}

#[test]
fn config_file_overrides_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("gen.conf");
    std::fs::write(&conf, format!("# dataset\nout = {}\nn = 4\nseed = 2\nval_every = 2\n", p(dir.path(), "data"))).unwrap();
    let r = ok(&["synthgen", "--config", conf.to_str().unwrap(), "--set", "n=5"]);
    assert_eq!(r["videos"], 5);
    // a flag beats --set
    let r = ok(&["synthgen", "--config", conf.to_str().unwrap(), "--set", "n=5", "--n", "6", "--force", "true"]);
    assert_eq!((r["videos"].as_u64(), r["val"].as_u64()), (Some(6), Some(3)));
    let manifest = p(dir.path(), "data/run.json");
    let before = std::fs::read(dir.path().join("data/manifest.jsonl")).unwrap();
    let replayed = ok(&["replay", &manifest]);
    assert_eq!(replayed, r);
    assert_eq!(before, std::fs::read(dir.path().join("data/manifest.jsonl")).unwrap());
}
