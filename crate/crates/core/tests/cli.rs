use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn keyrep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keyrep"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn keyrep")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_arguments_is_usage_error() {
    assert_eq!(keyrep(&[]).status.code(), Some(1));
    assert_eq!(keyrep(&["gen"]).status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "n_iterations = 1\nbogus = 3\n").unwrap();
    let out = keyrep(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn gen_then_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = keyrep(&["gen", "--seed", "1", "--out", s(&data), "--scenes", "1", "--views", "12", "--size", "128"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("seed = 1"), "resolved config not printed: {stdout}");
    let scene = data.join("scene_000");
    for f in ["poses.txt", "scene.json", "img_00011.pgm", "depth_00011.raw"] {
        assert!(scene.join(f).is_file(), "missing {f}");
    }

    let run = dir.path().join("run");
    let out = keyrep(&[
        "train", "--data", s(&data), "--out", s(&run), "--iterations", "2", "--epochs", "1", "--seed", "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("iter_001.ckpt").is_file());
    assert!(run.join("iter_002.ckpt").is_file());
    assert!(run.join("config.toml").is_file());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");

    let report = dir.path().join("report");
    let ck = run.join("iter_002.ckpt");
    let out = keyrep(&["eval", "--data", s(&data), "--out", s(&report), "--checkpoint", s(&ck)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["repeatability.csv", "mma.csv", "loc3d.csv"] {
        assert!(report.join(f).is_file(), "missing {f}");
    }
}
