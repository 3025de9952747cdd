use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sfc_core::pipeline::ExperimentConfig;

fn sfc(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfc"))
        .args(args)
        .env("SFC_OUTPUT_DIR", out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn sfc")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Toy geometry with one-epoch stages and two enhancement rate weights.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::toy();
    cfg.data.verification_pairs = 20;
    cfg.data.split.train = 4.0;
    cfg.data.split.val = 2.0;
    cfg.data.split.test = 2.0;
    for t in [
        &mut cfg.extractor.train,
        &mut cfg.feature_codec.train,
        &mut cfg.generator.train,
        &mut cfg.enhancement.train,
    ] {
        t.epochs = 1;
    }
    cfg.sweeps.lambda_1.truncate(2);
    cfg.sweeps.lambda_2.truncate(2);
    cfg.sweeps.rate_weight = vec![1e-1, 1e-3];
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn stage_order_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = sfc(&out, &["train", "generator"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("feature_codec"), "{}", stderr(&o));
    let o = sfc(&out, &["sweep", "enhancement"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("generator"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = dir.path().join("bad.toml");
    let text = format!("unknown_key = 1\n{}", ExperimentConfig::toy().to_toml());
    std::fs::write(&bad, text).unwrap();
    let o = sfc(&out, &["--config", bad.to_str().unwrap(), "train", "extractor"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = sfc(&out, &["--preset", "nope", "train", "extractor"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_manifest_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = sfc(&dir.path().join("out"), &["train", "extractor"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("ingest"));
}

#[test]
fn dump_rejects_garbage_with_decode_exit() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("x.sfc");
    std::fs::write(&f, b"not a stream at all").unwrap();
    let o = sfc(&dir.path().join("out"), &["dump", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn staged_run_encode_decode() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = d.join("out");
    let cfg = tiny_config(d);
    let cfg = cfg.to_str().unwrap();
    let data = d.join("data");
    ok(&sfc(&out, &["synth", "--out", data.to_str().unwrap(), "--identities", "8", "--per-identity", "4"]));
    ok(&sfc(&out, &["--config", cfg, "ingest", data.to_str().unwrap()]));
    for (cmd, stage) in [
        ("train", "extractor"),
        ("sweep", "feature_codec"),
        ("train", "generator"),
        ("sweep", "enhancement"),
    ] {
        ok(&sfc(&out, &["--config", cfg, cmd, stage]));
        assert!(out.join("reproducibility").join(format!("{cmd}_{stage}.json")).exists());
    }

    let img = data.join("id0000").join("0000.png");
    let img = img.to_str().unwrap();
    let path = |n: &str| d.join(n).to_str().unwrap().to_string();
    ok(&sfc(&out, &["--config", cfg, "encode", img, "-o", &path("a.sfc")]));
    ok(&sfc(&out, &["--config", cfg, "encode", img, "-o", &path("b.sfc")]));
    ok(&sfc(&out, &["--config", cfg, "encode", img, "-o", &path("base.sfc"), "--base-only"]));
    let full = std::fs::read(path("a.sfc")).unwrap();
    assert_eq!(full, std::fs::read(path("b.sfc")).unwrap(), "encoding is deterministic");
    let base = std::fs::read(path("base.sfc")).unwrap();
    assert!(base.len() < full.len());

    // feature decode ignores the enhancement layer, even when it is cut off
    std::fs::write(path("cut.sfc"), &full[..full.len() - 7]).unwrap();
    ok(&sfc(&out, &["--config", cfg, "decode", "--feature", &path("a.sfc"), "-o", &path("fa.json")]));
    ok(&sfc(&out, &["--config", cfg, "decode", "--feature", &path("base.sfc"), "-o", &path("fb.json")]));
    ok(&sfc(&out, &["--config", cfg, "decode", "--feature", &path("cut.sfc"), "-o", &path("fc.json")]));
    let fa = std::fs::read(path("fa.json")).unwrap();
    assert_eq!(fa, std::fs::read(path("fb.json")).unwrap());
    assert_eq!(fa, std::fs::read(path("fc.json")).unwrap());

    // image decode of a truncated stream is a decode error
    let o = sfc(&out, &["--config", cfg, "decode", &path("cut.sfc"), "-o", &path("x.png")]);
    assert_eq!(o.status.code(), Some(5));

    let o = sfc(&out, &["--config", cfg, "decode", "--image", &path("base.sfc"), "-o", &path("base.png")]);
    assert!(ok(&o).contains("base reconstruction"));
    assert!(stderr(&o).contains("no enhancement layer"), "{}", stderr(&o));
    assert!(ok(&sfc(&out, &["--config", cfg, "decode", &path("a.sfc"), "-o", &path("full.png")])).contains("enhancement"));

    assert!(ok(&sfc(&out, &["dump", &path("a.sfc")])).contains("enhancement block"));
    ok(&sfc(&out, &["--config", cfg, "generate", img, "--out", &path("levels")]));
    assert!(d.join("levels").join("level2.png").exists());

    ok(&sfc(&out, &["--config", cfg, "eval", "--max-images", "4"]));
    ok(&sfc(&out, &["--config", cfg, "curves"]));
    for f in ["metrics.json", "rate_points.csv", "psnr.svg", "accuracy.svg"] {
        assert!(out.join("eval").join(f).exists(), "{f}");
    }

    // retraining a predecessor invalidates its successors
    ok(&sfc(&out, &["--config", cfg, "train", "feature_codec"]));
    let o = sfc(&out, &["--config", cfg, "encode", img, "-o", &path("c.sfc")]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
