//! End-to-end runs: training sets, both training stages, scoring, fusion,
//! evaluation and the scheme/relative-pose ablation grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{evaluate, EvalReport, LabeledFrames};
use crate::model::{save_checkpoint, train_ctd, train_ftd, Branch, TrainOutcome, UetdWeights};
use crate::pose_io::{extract_window_pairs, extract_windows, PoseTrack};
use crate::scoring::{
    format_frame_scores, format_score_series, frame_aggregate, hybrid_score, min_max_normalize, score_tracks,
    video_ranges, FrameScoreSeries, ScoreSeries,
};
use crate::synth::Benchmark;
use crate::tokenizer::{tokenize, SchemeKind, TokenSequence, TokenizationScheme};

pub fn training_windows(
    tracks: &[PoseTrack],
    scheme: TokenizationScheme,
    beta: usize,
    stride: usize,
) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for t in tracks {
        for w in extract_windows(t, beta, stride)? {
            out.push(tokenize(&w, scheme)?);
        }
    }
    Ok(out)
}

pub fn training_pairs(
    tracks: &[PoseTrack],
    scheme: TokenizationScheme,
    beta: usize,
    stride: usize,
) -> Result<Vec<(TokenSequence, TokenSequence)>> {
    let mut out = Vec::new();
    for t in tracks {
        for (p, n) in extract_window_pairs(t, beta, stride)? {
            out.push((tokenize(&p, scheme)?, tokenize(&n, scheme)?));
        }
    }
    Ok(out)
}

/// Fails when any frame of `tracks` is labeled anomalous.
pub fn check_purity(tracks: &[PoseTrack], labels: &LabeledFrames) -> Result<()> {
    let mut bad = 0usize;
    let mut first = None;
    for t in tracks {
        for f in &t.frames {
            if labels.get(&t.video_id, f.frame_index) == Some(1) {
                bad += 1;
                first.get_or_insert((t.video_id.clone(), f.frame_index));
            }
        }
    }
    match first {
        None => Ok(()),
        Some((v, f)) => Err(Error::Contaminated(format!(
            "{bad} training frames are labeled anomalous, first at {v}@{f}"
        ))),
    }
}

fn check_keypoints(cfg: &RunConfig, tracks: &[PoseTrack]) -> Result<()> {
    if let Some(t) = tracks.iter().find(|t| t.keypoint_count() != cfg.keypoints) {
        return Err(Error::Shape(format!(
            "track {}/{} has {} keypoints, config expects {}",
            t.video_id,
            t.person_id,
            t.keypoint_count(),
            cfg.keypoints
        )));
    }
    Ok(())
}

pub fn run_train_ctd(cfg: &RunConfig, tracks: &[PoseTrack]) -> Result<TrainOutcome> {
    check_keypoints(cfg, tracks)?;
    let data = training_windows(tracks, cfg.tokenization(), cfg.beta, cfg.train_stride)?;
    log::info!("ctd training on {} windows", data.len());
    train_ctd(&data, cfg.model_config(), &cfg.train_config(Branch::Ctd))
}

pub fn run_train_ftd(cfg: &RunConfig, tracks: &[PoseTrack], pretrained: &UetdWeights) -> Result<TrainOutcome> {
    check_keypoints(cfg, tracks)?;
    check_weights(cfg, pretrained)?;
    let data = training_pairs(tracks, cfg.tokenization(), cfg.beta, cfg.train_stride)?;
    log::info!("ftd training on {} window pairs", data.len());
    train_ftd(&data, pretrained, &cfg.train_config(Branch::Ftd))
}

/// Metadata stored next to the weights in a checkpoint.
pub fn checkpoint_meta(cfg: &RunConfig, stage: Branch, best_epoch: usize) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("scheme".into(), cfg.scheme.name().into());
    m.insert("use_relative".into(), cfg.use_relative.to_string());
    m.insert("beta".into(), cfg.beta.to_string());
    m.insert("keypoints".into(), cfg.keypoints.to_string());
    m.insert("stage".into(), stage.to_string());
    m.insert("best_epoch".into(), best_epoch.to_string());
    m.insert("fingerprint".into(), cfg.fingerprint());
    m
}

/// Checks that loaded weights have the architecture the config describes.
pub fn check_weights(cfg: &RunConfig, weights: &UetdWeights) -> Result<()> {
    let want = cfg.model_config();
    let got = weights.config;
    let same = (got.n_heads, got.n_layers, got.ff_dim, got.model_dim, got.token_dim, got.n_tokens)
        == (want.n_heads, want.n_layers, want.ff_dim, want.model_dim, want.token_dim, want.n_tokens);
    if !same {
        return Err(Error::Shape(format!(
            "checkpoint has heads {} layers {} ff {} model_dim {} tokens {}x{}; config ({}, relative {}) expects heads {} layers {} ff {} model_dim {} tokens {}x{}",
            got.n_heads, got.n_layers, got.ff_dim, got.model_dim, got.n_tokens, got.token_dim,
            cfg.scheme.name(), cfg.use_relative,
            want.n_heads, want.n_layers, want.ff_dim, want.model_dim, want.n_tokens, want.token_dim
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    C,
    F,
    H,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::C, Variant::F, Variant::H];

    pub fn name(self) -> &'static str {
        match self {
            Variant::C => "C",
            Variant::F => "F",
            Variant::H => "H",
        }
    }
}

/// Every series produced while scoring one run.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBundle {
    pub cs: ScoreSeries,
    pub fs: ScoreSeries,
    pub cs_norm: ScoreSeries,
    pub fs_norm: ScoreSeries,
    pub hs: ScoreSeries,
    /// Frame-level series for the C, F and H variants.
    pub frames: [FrameScoreSeries; 3],
}

impl ScoreBundle {
    pub fn frame_series(&self, v: Variant) -> &FrameScoreSeries {
        &self.frames[v as usize]
    }
}

/// Normalizes both branches, fuses them and aggregates each variant to frames.
pub fn fuse(cfg: &RunConfig, cs: ScoreSeries, fs: ScoreSeries, tracks: &[PoseTrack]) -> Result<ScoreBundle> {
    let cs_norm = min_max_normalize(&cs, cfg.per_video_normalization)?;
    let fs_norm = min_max_normalize(&fs, cfg.per_video_normalization)?;
    let hs = hybrid_score(&cs_norm, &fs_norm)?;
    let ranges = video_ranges(tracks);
    let frames = [
        frame_aggregate(&cs_norm, &ranges, cfg.fill)?,
        frame_aggregate(&fs_norm, &ranges, cfg.fill)?,
        frame_aggregate(&hs, &ranges, cfg.fill)?,
    ];
    Ok(ScoreBundle {
        cs,
        fs,
        cs_norm,
        fs_norm,
        hs,
        frames,
    })
}

pub fn score_run(cfg: &RunConfig, weights: &UetdWeights, tracks: &[PoseTrack]) -> Result<ScoreBundle> {
    check_keypoints(cfg, tracks)?;
    check_weights(cfg, weights)?;
    let (cs, fs) = score_tracks(weights, cfg.tokenization(), tracks, cfg.beta, cfg.stride)?;
    fuse(cfg, cs, fs, tracks)
}

/// File names written by [`write_scores`].
pub const SCORE_FILES: [&str; 6] = ["cs.csv", "fs.csv", "hs.csv", "frames_c.csv", "frames_f.csv", "frames_h.csv"];

/// Raw CS and FS, fused HS, and the three frame-level series.
pub fn write_scores(dir: &Path, bundle: &ScoreBundle) -> Result<()> {
    write_atomic(&dir.join(SCORE_FILES[0]), format_score_series(&bundle.cs).as_bytes())?;
    write_atomic(&dir.join(SCORE_FILES[1]), format_score_series(&bundle.fs).as_bytes())?;
    write_atomic(&dir.join(SCORE_FILES[2]), format_score_series(&bundle.hs).as_bytes())?;
    for (i, f) in bundle.frames.iter().enumerate() {
        write_atomic(&dir.join(SCORE_FILES[3 + i]), format_frame_scores(f).as_bytes())?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantReports {
    pub c: EvalReport,
    pub f: EvalReport,
    pub h: EvalReport,
}

impl VariantReports {
    pub fn get(&self, v: Variant) -> &EvalReport {
        match v {
            Variant::C => &self.c,
            Variant::F => &self.f,
            Variant::H => &self.h,
        }
    }
}

pub fn evaluate_bundle(bundle: &ScoreBundle, labels: &LabeledFrames, fingerprint: &str) -> Result<VariantReports> {
    Ok(VariantReports {
        c: evaluate(bundle.frame_series(Variant::C), labels, fingerprint)?,
        f: evaluate(bundle.frame_series(Variant::F), labels, fingerprint)?,
        h: evaluate(bundle.frame_series(Variant::H), labels, fingerprint)?,
    })
}

pub fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    write_atomic(&dir.join(format!("{stem}.json")), report.to_json().as_bytes())?;
    write_atomic(&dir.join(format!("{stem}_roc.csv")), report.roc_csv().as_bytes())
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub ctd: TrainOutcome,
    pub ftd: TrainOutcome,
    pub bundle: ScoreBundle,
    pub reports: VariantReports,
}

/// Trains both stages on the benchmark's train split and evaluates on its test split.
pub fn run_benchmark(cfg: &RunConfig, bench: &Benchmark) -> Result<RunArtifacts> {
    cfg.validate()?;
    check_purity(&bench.train, &bench.train_labels)?;
    let ctd = run_train_ctd(cfg, &bench.train)?;
    let ftd = run_train_ftd(cfg, &bench.train, &ctd.weights)?;
    let bundle = score_run(cfg, &ftd.weights, &bench.test)?;
    let reports = evaluate_bundle(&bundle, &bench.test_labels, &cfg.fingerprint())?;
    Ok(RunArtifacts {
        ctd,
        ftd,
        bundle,
        reports,
    })
}

/// Checkpoints, loss logs, score files and reports of a run.
pub fn write_run(dir: &Path, cfg: &RunConfig, run: &RunArtifacts) -> Result<()> {
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    save_checkpoint(&dir.join("ctd.ckpt"), &run.ctd.weights, &checkpoint_meta(cfg, Branch::Ctd, run.ctd.best_epoch))?;
    save_checkpoint(&dir.join("ftd.ckpt"), &run.ftd.weights, &checkpoint_meta(cfg, Branch::Ftd, run.ftd.best_epoch))?;
    write_atomic(&dir.join("ctd_loss.log"), run.ctd.log_text().as_bytes())?;
    write_atomic(&dir.join("ftd_loss.log"), run.ftd.log_text().as_bytes())?;
    write_scores(dir, &run.bundle)?;
    for v in Variant::ALL {
        write_report(dir, &format!("report_{}", v.name().to_ascii_lowercase()), run.reports.get(v))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scheme: String,
    pub use_relative: bool,
    pub auc: [f64; 3],
    pub eer: [f64; 3],
    pub fingerprint: String,
}

/// The eight scheme x relative-pose cells, in table order.
pub fn ablation_cells() -> Vec<(SchemeKind, bool)> {
    SchemeKind::ALL
        .iter()
        .flat_map(|&k| [(k, false), (k, true)])
        .collect()
}

pub fn ablation_row(cfg: &RunConfig, run: &RunArtifacts) -> AblationRow {
    let r = &run.reports;
    AblationRow {
        scheme: cfg.scheme.name().to_string(),
        use_relative: cfg.use_relative,
        auc: [r.c.auc_roc, r.f.auc_roc, r.h.auc_roc],
        eer: [r.c.eer, r.f.eer, r.h.eer],
        fingerprint: cfg.fingerprint(),
    }
}

/// Runs every cell on `bench`. `each` sees every finished run, e.g. to write it out.
pub fn ablate(
    cfg: &RunConfig,
    bench: &Benchmark,
    mut each: impl FnMut(&RunConfig, &RunArtifacts) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (kind, rel) in ablation_cells() {
        let cell = cfg.with_scheme(kind, rel);
        log::info!("ablation cell {} relative={rel}", kind.name());
        let run = run_benchmark(&cell, bench)?;
        each(&cell, &run)?;
        rows.push(ablation_row(&cell, &run));
    }
    Ok(rows)
}

/// Markdown table: one row per cell, AUC then EER for each variant.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "| scheme | relative | AUC C | AUC F | AUC H | EER C | EER F | EER H |\n|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        writeln!(
            out,
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.scheme,
            if r.use_relative { "yes" } else { "no" },
            r.auc[0],
            r.auc[1],
            r.auc[2],
            r.eer[0],
            r.eer[1],
            r.eer[2]
        )
        .unwrap();
    }
    out
}
