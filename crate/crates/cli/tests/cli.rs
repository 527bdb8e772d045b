use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn rfosr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfosr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn help_lists_every_subcommand() {
    let o = rfosr(&["--help"]);
    assert!(o.status.success());
    let help = text(&o.stdout);
    for c in [
        "synth",
        "preprocess",
        "train",
        "calibrate",
        "mine-unknowns",
        "ig-retrain",
        "score",
        "full-run",
    ] {
        assert!(help.contains(c), "{c} missing from\n{help}");
    }
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[gan]\nlearning_rate = 0.1\n").unwrap();
    let o = rfosr(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let err = text(&o.stderr);
    assert!(err.contains("gan") && err.contains("learning_rate"), "{err}");

    let o = rfosr(&["train", "--profile", "huge"]);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("huge"));
}

#[test]
fn bad_worker_count_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_rfosr"))
        .args(["synth", "--out", "/nonexistent/never"])
        .env("RFOSR_WORKERS", "lots")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("RFOSR_WORKERS"));
}

#[test]
fn synth_then_preprocess_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let iq = dir.path().join("iq");
    let spg = dir.path().join("spg");
    let cfg = fixture();
    let o = rfosr(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        iq.to_str().unwrap(),
        "--recordings",
        "1",
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let iqs = std::fs::read_dir(&iq)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "iq"))
        .count();
    assert_eq!(iqs, 4);

    let o = rfosr(&[
        "preprocess",
        "--config",
        cfg.to_str().unwrap(),
        "--input",
        iq.to_str().unwrap(),
        "--out",
        spg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let spgs: Vec<PathBuf> = std::fs::read_dir(&spg)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "spg"))
        .collect();
    assert!(!spgs.is_empty());
    let (s, meta) = rfosr::preprocess::read_spectrogram(&spgs[0]).unwrap();
    assert_eq!((s.values.rows, s.values.cols), (64, 64));
    assert!(meta.label.is_some());
}

#[test]
fn staged_commands_share_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = fixture();
    let args = |cmd: &'static str| vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];

    let o = rfosr(&args("calibrate"));
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(
        stdout.contains("calibrate    done") && stdout.contains("gan          pending"),
        "{stdout}"
    );
    assert!(out.join("calibration_plain.json").exists());
    assert!(!out.join("gan.ckpt").exists());

    let o = rfosr(&args("full-run"));
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(stdout.starts_with("ig-openmax: KAR "), "{stdout}");
    assert!(stdout.contains("| UAR |"));

    // A different seed may not reuse the directory.
    let mut other = args("score");
    other.extend(["--seed", "99"]);
    let o = rfosr(&other);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("holds a run"));
}

#[test]
fn ablation_flag_produces_a_paired_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pair");
    let cfg = fixture();
    let o = rfosr(&[
        "full-run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--ablation",
        "no-transformer",
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(
        stdout.contains("baseline: KAR") && stdout.contains("no-transformer: KAR"),
        "{stdout}"
    );
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["name"], "no-transformer");
    let cfg_b = std::fs::read_to_string(out.join("no-transformer/config.toml")).unwrap();
    assert!(cfg_b.contains("texture_only = true"));
    assert!(std::fs::read_to_string(out.join("comparison.md"))
        .unwrap()
        .contains("| KAR |"));
}
