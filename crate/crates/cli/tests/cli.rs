use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectttra"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_toy_writes_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen-toy", "--out", s(dir.path()), "--n", "32", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(dir.path().join("audio")).unwrap().count(), 64);
    assert!(dir.path().join("manifest.csv").exists());
}

#[test]
fn corrupt_manifest_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.csv");
    std::fs::write(
        &manifest,
        "path,label,algorithm,fake_type,split,group_id,singer_seen,duration\n\
         a.wav,real,human,none,train,g1,n/a,10\n\
         b.wav,fake,suno,sometimes,valid,g2,n/a,10\n",
    )
    .unwrap();
    let out = run(&["train", "--manifest", s(&manifest), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("manifest.csv:3"), "{err}");
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        &["profile", "--preset", "huge"][..],
        &["profile", "--variant", "delta"],
        &["profile", "--variant", "vit", "--temporal-only"],
        &["train", "--epochs", "3"],
        &["gen-toy", "--out", "/tmp/unused", "--n", "1"],
    ] {
        let out = run(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn config_file_with_unknown_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[encoder]\nwidth = 3\n").unwrap();
    let out = run(&["profile", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn profile_reports_every_model() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("profile.csv");
    let out = run(&["profile", "--preset", "full", "--out", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("559"), "{stdout}");
    assert!(stdout.contains("1872"), "{stdout}");
}

#[test]
fn tokenize_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    assert!(run(&["gen-toy", "--out", s(&toy), "--n", "4", "--duration", "12"]).status.success());
    let wav = toy.join("audio").join("fake_000.wav");
    let tokens = dir.path().join("tokens.csv");
    let out = run(&["tokenize", "--audio", s(&wav), "--frames", "128", "--out", s(&tokens)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("43 tokens (18 temporal, 25 spectral)"));
    assert_eq!(std::fs::read_to_string(&tokens).unwrap().lines().count(), 43);

    let run_dir = dir.path().join("run");
    let manifest = toy.join("manifest.csv");
    let out = run(&[
        "train", "--manifest", s(&manifest), "--out", s(&run_dir), "--epochs", "2", "--frames", "128",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("config.toml").exists());
    let ckpt = run_dir.join("best.ckpt");
    let report = dir.path().join("report.csv");
    let out = run(&[
        "eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--split", "all", "--out", s(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("overall"));
    let out = run(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--axes", "mood"]);
    assert_eq!(out.status.code(), Some(2));
}
