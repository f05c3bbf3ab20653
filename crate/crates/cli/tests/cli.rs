use std::path::Path;
use std::process::{Command, Output};

fn bbam(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bbam"))
        .args(args)
        .current_dir(cwd)
        .env_remove("BBAM_DEVICE")
        .output()
        .expect("spawn bbam")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn valid_config_is_echoed_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 3\n[bbam]\nlambda = 0.01\n").unwrap();
    let out = bbam(&["config", "validate", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# hash "));
    assert!(text.contains("lambda = 0.01"));
    assert!(text.contains("theta_fg = 0.8"));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        "[pseudo.labels]\ntheta_fg = 0.1\ntheta_bg = 0.5\n[bbam]\nlambda = -1.0\n",
    )
    .unwrap();
    let out = bbam(&["config", "validate", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("pseudo.labels.theta_bg"), "{err}");
    assert!(err.contains("bbam.lambda"), "{err}");
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.toml");
    std::fs::write(&path, "[bbam]\nlamda = 0.01\n").unwrap();
    let out = bbam(&["config", "validate", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bbam(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(
        bbam(&["bbam", "run", "--stride", "fixed:x"], dir.path())
            .status
            .code(),
        Some(1)
    );
    assert_eq!(bbam(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 3\n").unwrap();
    let base = bbam(
        &["--config", path.to_str().unwrap(), "config", "show"],
        dir.path(),
    );
    let moved = bbam(
        &[
            "--config",
            path.to_str().unwrap(),
            "--seed",
            "4",
            "config",
            "show",
        ],
        dir.path(),
    );
    let (a, b) = (
        String::from_utf8(base.stdout).unwrap(),
        String::from_utf8(moved.stdout).unwrap(),
    );
    assert!(a.contains("seed = 3"));
    assert!(b.contains("seed = 4"));
    assert_ne!(
        a.lines().next(),
        b.lines().next(),
        "hash must follow the seed"
    );
}

#[test]
fn unsupported_device_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bbam"))
        .args(["config", "show"])
        .current_dir(dir.path())
        .env("BBAM_DEVICE", "cuda")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("BBAM_DEVICE"));
}

#[test]
fn stage_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = bbam(
        &[
            "--run-root",
            dir.path().to_str().unwrap(),
            "--ckpt",
            missing.to_str().unwrap(),
            "detector",
            "eval",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn data_gen_writes_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, "[data]\ntrain_scenes = 12\nval_scenes = 3\n[detector.train]\nmin_scenes = 10\n[pseudo]\nscenes = 5\n[analysis]\nscenes = 3\n").unwrap();
    let out_dir = dir.path().join("data");
    let out = bbam(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "data",
            "gen",
            "--out",
            out_dir.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(out_dir.join("val").join("manifest.toml").exists());
}
