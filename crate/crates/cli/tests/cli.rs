use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use skelvad::config::RunConfig;
use skelvad::model::{group_digest, load_checkpoint};
use skelvad::scoring::{hybrid_score, min_max_normalize, read_score_series};

fn smoke_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.beta = 4;
    cfg.keypoints = 3;
    cfg.train_stride = 4;
    cfg.ctd.epochs = 2;
    cfg.ftd.epochs = 2;
    cfg.ctd.batch_size = 16;
    cfg.ftd.batch_size = 16;
    cfg.synth.n_frames = 60;
    cfg.synth.train_videos = 2;
    cfg.synth.test_videos = 2;
    cfg.paths.out_dir = "out".into();
    cfg.validate().unwrap();
    let path = dir.join("smoke.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn skelvad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skelvad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = skelvad(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = skelvad(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_score_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let out = tmp.path().join("out");
    let c = s(&cfg);

    ok(&["--config", c, "train-ctd"]);
    let log = std::fs::read_to_string(out.join("ctd_loss.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let ctd_ckpt = std::fs::read(out.join("ctd.ckpt")).unwrap();

    ok(&["--config", c, "train-ctd"]);
    assert_eq!(std::fs::read_to_string(out.join("ctd_loss.log")).unwrap(), log);
    assert_eq!(std::fs::read(out.join("ctd.ckpt")).unwrap(), ctd_ckpt);

    ok(&["--config", c, "train-ftd"]);
    assert_eq!(std::fs::read_to_string(out.join("ftd_loss.log")).unwrap().lines().count(), 2);
    let (before, _) = load_checkpoint(&out.join("ctd.ckpt")).unwrap();
    let (after, _) = load_checkpoint(&out.join("ftd.ckpt")).unwrap();
    for prefix in ["embed.", "encoder.", "ctd.", "proj."] {
        assert_eq!(group_digest(&before, prefix), group_digest(&after, prefix), "{prefix}");
    }
    assert_ne!(group_digest(&before, "ftd."), group_digest(&after, "ftd."));

    ok(&["--config", c, "score"]);
    for f in ["cs.csv", "fs.csv", "hs.csv", "frames_c.csv", "frames_f.csv", "frames_h.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let cs = read_score_series(&out.join("cs.csv")).unwrap();
    let fs = read_score_series(&out.join("fs.csv")).unwrap();
    let hs = read_score_series(&out.join("hs.csv")).unwrap();
    assert!(hs.entries.iter().all(|e| (0.0..=1.0).contains(&e.score)));
    let again = hybrid_score(&min_max_normalize(&cs, false).unwrap(), &min_max_normalize(&fs, false).unwrap()).unwrap();
    assert_eq!(again.len(), hs.len());
    for (a, b) in again.entries.iter().zip(&hs.entries) {
        assert_eq!((&a.video_id, a.person_id, a.frame_index), (&b.video_id, b.person_id, b.frame_index));
        assert!((a.score - b.score).abs() <= 1e-12);
    }

    let printed = ok(&["--config", c, "eval"]);
    assert_eq!(printed.lines().filter(|l| l.contains("AUC-ROC")).count(), 3);
    for v in ["c", "f", "h"] {
        let json = std::fs::read_to_string(out.join(format!("report_{v}.json"))).unwrap();
        assert!(json.contains("auc_roc"));
    }
}

#[test]
fn synth_writes_a_reusable_benchmark() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["--config", s(&cfg), "--out", s(&a), "synth"]);
    ok(&["--config", s(&cfg), "--out", s(&b), "synth"]);
    for f in ["train.poses", "test.poses", "train_labels.csv", "test_labels.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let train_labels = std::fs::read_to_string(a.join("train_labels.csv")).unwrap();
    assert!(train_labels.lines().skip(1).all(|l| l.ends_with(",0")));

    // The written config points at the files, so training reads them from disk.
    let written = a.join("config.toml");
    ok(&["--config", s(&written), "train-ctd"]);
    assert!(a.join("ctd.ckpt").exists());

    // Test tracks carry anomalies; training on them with labels is refused.
    let err = fails(&[
        "--config",
        s(&written),
        "train-ctd",
        "--poses",
        s(&a.join("test.poses")),
        "--labels",
        s(&a.join("test_labels.csv")),
    ]);
    assert!(err.contains("contaminated"), "{err}");
}

#[test]
fn scheme_flag_selects_preset_architecture() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let out = tmp.path().join("t");
    ok(&["--config", s(&cfg), "--scheme", "t-prp", "--out", s(&out), "train-ctd"]);
    let (w, meta) = load_checkpoint(&out.join("ctd.ckpt")).unwrap();
    assert_eq!((w.config.n_heads, w.config.n_layers, w.config.ff_dim), (8, 8, 128));
    assert_eq!(meta["scheme"], "t-prp");

    // The same checkpoint does not fit the default scheme.
    let err = fails(&["--config", s(&cfg), "--out", s(&out), "train-ftd"]);
    assert!(err.contains("shape mismatch"), "{err}");
}

#[test]
fn invalid_configuration_fails_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    let text = std::fs::read_to_string(smoke_config(tmp.path())).unwrap();
    std::fs::write(&bad, text.replace("beta = 4", "beta = 5")).unwrap();
    let err = fails(&["--config", s(&bad), "train-ctd"]);
    assert!(err.contains("beta"), "{err}");
    assert!(!tmp.path().join("out").exists());

    let err = fails(&["--config", s(&tmp.path().join("missing.toml")), "synth"]);
    assert!(err.contains("missing.toml"), "{err}");
    fails(&["--scheme", "z-prp", "synth"]);
}

#[test]
fn dump_tokens_prints_one_line_per_token() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    for (scheme, n) in [("st-prp", 4), ("t-prp", 4), ("ks-prp", 3), ("fs-prp", 6)] {
        let text = ok(&["--config", s(&cfg), "--scheme", scheme, "dump-tokens", "--window", "2"]);
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), n, "{scheme}\n{text}");
    }
    fails(&["--config", s(&cfg), "dump-tokens", "--track", "99"]);
}

#[test]
fn ablate_emits_eight_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let text = ok(&["--config", s(&cfg), "ablate"]);
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 8, "{text}");
    assert!(tmp.path().join("out/st-prp_rel/report_h.json").exists());
    assert!(tmp.path().join("out/ablation.json").exists());
}
