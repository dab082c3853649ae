use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use skelvad::config::RunConfig;
use skelvad::io::write_atomic;
use skelvad::metrics::{evaluate, LabeledFrames};
use skelvad::model::{load_checkpoint, save_checkpoint};
use skelvad::pipeline::{
    ablate, check_purity, check_weights, checkpoint_meta, format_ablation, run_train_ctd,
    run_train_ftd, score_run, write_report, write_run, write_scores, Variant,
};
use skelvad::pose_io::{extract_windows, load_pose_tracks, normalize_load, write_pose_tracks, CoordinateSpace, PoseFileSchema};
use skelvad::scoring::read_frame_scores;
use skelvad::synth::make_benchmark_with;
use skelvad::tokenizer::{format_tokens, tokenize};
use skelvad::{Branch, PoseTrack, SchemeKind};

/// Pose-based video anomaly detection: train, score, evaluate and ablate.
#[derive(Parser, Debug)]
#[command(name = "skelvad", version)]
struct Cli {
    /// Run configuration (TOML). Defaults to the built-in configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the tokenization scheme: st-prp, t-prp, ks-prp or fs-prp.
    #[arg(long, global = true)]
    scheme: Option<String>,
    /// Tokenize absolute coordinates only.
    #[arg(long, global = true)]
    no_relative: bool,
    /// Overrides the scoring window stride.
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// Output directory; overrides paths.out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train encoder and current-window decoder; writes ctd.ckpt and ctd_loss.log.
    TrainCtd(TrainArgs),
    /// Train the future-window decoder on a frozen encoder; writes ftd.ckpt and ftd_loss.log.
    TrainFtd {
        /// Checkpoint from train-ctd. Defaults to <out>/ctd.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: TrainArgs,
    },
    /// Score test tracks; writes per-person and per-frame score files.
    Score {
        /// Trained checkpoint. Defaults to <out>/ftd.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pose file to score. Defaults to paths.test_poses, else the synthetic test split.
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Evaluate frame scores against labels; writes a JSON report and ROC points.
    Eval {
        /// Frame score files. Defaults to <out>/frames_{c,f,h}.csv.
        #[arg(long, num_args = 1..)]
        scores: Vec<PathBuf>,
        /// Frame labels. Defaults to paths.test_labels, else the synthetic test labels.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Write the synthetic benchmark as pose and label files plus a config pointing at them.
    Synth,
    /// Run the scheme by relative-pose grid on the synthetic benchmark.
    Ablate,
    /// Print the tokens of one window.
    DumpTokens {
        /// Pose file. Defaults to paths.train_poses, else the synthetic train split.
        #[arg(long)]
        poses: Option<PathBuf>,
        /// Track index in file order.
        #[arg(long, default_value_t = 0)]
        track: usize,
        /// Window index within the track at the configured stride.
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// Training poses. Defaults to paths.train_poses, else the synthetic train split.
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Frame labels; training refuses tracks with anomalous frames.
    #[arg(long)]
    labels: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let kind: SchemeKind = match &cli.scheme {
        Some(s) => s.parse().map_err(|e| anyhow::anyhow!("--scheme: {e}"))?,
        None => cfg.scheme,
    };
    cfg = cfg.with_scheme(kind, cfg.use_relative && !cli.no_relative);
    if let Some(stride) = cli.stride {
        cfg.stride = stride;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match &cli.out {
        Some(d) => d.clone(),
        None => cfg
            .path(&cfg.paths.out_dir)
            .context("no output directory: pass --out or set paths.out_dir")?,
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// The config as it ran, with paths made absolute so the copy works from any directory.
fn effective_config(cfg: &RunConfig, out: &Path) -> RunConfig {
    let mut c = cfg.clone();
    let abs = |raw: &str| {
        cfg.path(raw)
            .map(|p| std::path::absolute(&p).unwrap_or(p).display().to_string())
            .unwrap_or_default()
    };
    c.paths.train_poses = abs(&cfg.paths.train_poses);
    c.paths.train_labels = abs(&cfg.paths.train_labels);
    c.paths.test_poses = abs(&cfg.paths.test_poses);
    c.paths.test_labels = abs(&cfg.paths.test_labels);
    c.paths.out_dir = std::path::absolute(out).unwrap_or(out.to_path_buf()).display().to_string();
    c
}

fn read_tracks(path: &Path) -> Result<Vec<PoseTrack>> {
    let load = load_pose_tracks(path).with_context(|| format!("reading {}", path.display()))?;
    if !load.rejections.is_empty() {
        warn!("{}: dropped {} malformed records", path.display(), load.rejections.len());
    }
    Ok(normalize_load(&load)?)
}

fn read_labels(path: &Path) -> Result<LabeledFrames> {
    LabeledFrames::load(path).with_context(|| format!("reading {}", path.display()))
}

enum Split {
    Train,
    Test,
}

/// Tracks and labels for a split: explicit flags first, then config paths,
/// then the synthetic benchmark.
fn split_data(
    cfg: &RunConfig,
    split: Split,
    poses: Option<&Path>,
    labels: Option<&Path>,
) -> Result<(Vec<PoseTrack>, Option<LabeledFrames>)> {
    let (pose_key, label_key) = match split {
        Split::Train => (&cfg.paths.train_poses, &cfg.paths.train_labels),
        Split::Test => (&cfg.paths.test_poses, &cfg.paths.test_labels),
    };
    let pose_path = poses.map(Path::to_path_buf).or_else(|| cfg.path(pose_key));
    let label_path = labels.map(Path::to_path_buf).or_else(|| cfg.path(label_key));
    match pose_path {
        Some(p) => {
            let tracks = read_tracks(&p)?;
            let labels = label_path.as_deref().map(read_labels).transpose()?;
            Ok((tracks, labels))
        }
        None => {
            info!("no pose file configured; generating the synthetic benchmark");
            let b = make_benchmark_with(&cfg.benchmark_spec())?;
            let labels = match label_path {
                Some(p) => read_labels(&p)?,
                None => match split {
                    Split::Train => b.train_labels,
                    Split::Test => b.test_labels,
                },
            };
            let tracks = match split {
                Split::Train => b.train,
                Split::Test => b.test,
            };
            Ok((tracks, Some(labels)))
        }
    }
}

fn train_tracks(cfg: &RunConfig, args: &TrainArgs) -> Result<Vec<PoseTrack>> {
    let (tracks, labels) = split_data(cfg, Split::Train, args.poses.as_deref(), args.labels.as_deref())?;
    if let Some(l) = labels {
        check_purity(&tracks, &l)?;
    }
    Ok(tracks)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::TrainCtd(args) => {
            let out = out_dir(&cli, &cfg)?;
            let tracks = train_tracks(&cfg, args)?;
            let outcome = run_train_ctd(&cfg, &tracks)?;
            save_checkpoint(&out.join("ctd.ckpt"), &outcome.weights, &checkpoint_meta(&cfg, Branch::Ctd, outcome.best_epoch))?;
            write_atomic(&out.join("ctd_loss.log"), outcome.log_text().as_bytes())?;
            write_atomic(&out.join("config.toml"), effective_config(&cfg, &out).to_toml().as_bytes())?;
            let best = &outcome.log[outcome.best_epoch - 1];
            println!("ctd: {} epochs, best epoch {} loss {:.6e}", outcome.log.len(), best.epoch, best.loss);
        }
        Command::TrainFtd { checkpoint, data } => {
            let out = out_dir(&cli, &cfg)?;
            let ckpt = checkpoint.clone().unwrap_or_else(|| out.join("ctd.ckpt"));
            let (weights, _) = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            check_weights(&cfg, &weights).with_context(|| format!("checkpoint {}", ckpt.display()))?;
            let tracks = train_tracks(&cfg, data)?;
            let outcome = run_train_ftd(&cfg, &tracks, &weights)?;
            save_checkpoint(&out.join("ftd.ckpt"), &outcome.weights, &checkpoint_meta(&cfg, Branch::Ftd, outcome.best_epoch))?;
            write_atomic(&out.join("ftd_loss.log"), outcome.log_text().as_bytes())?;
            write_atomic(&out.join("config.toml"), effective_config(&cfg, &out).to_toml().as_bytes())?;
            let best = &outcome.log[outcome.best_epoch - 1];
            println!("ftd: {} epochs, best epoch {} loss {:.6e}", outcome.log.len(), best.epoch, best.loss);
        }
        Command::Score { checkpoint, poses } => {
            let out = out_dir(&cli, &cfg)?;
            let ckpt = checkpoint.clone().unwrap_or_else(|| out.join("ftd.ckpt"));
            let (weights, _) = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            check_weights(&cfg, &weights).with_context(|| format!("checkpoint {}", ckpt.display()))?;
            let (tracks, _) = split_data(&cfg, Split::Test, poses.as_deref(), None)?;
            let bundle = score_run(&cfg, &weights, &tracks)?;
            write_scores(&out, &bundle)?;
            println!(
                "scored {} person windows over {} frames into {}",
                bundle.cs.len(),
                bundle.frames[0].entries.len(),
                out.display()
            );
        }
        Command::Eval { scores, labels } => {
            let out = out_dir(&cli, &cfg)?;
            let files = if scores.is_empty() {
                Variant::ALL
                    .iter()
                    .map(|v| out.join(format!("frames_{}.csv", v.name().to_ascii_lowercase())))
                    .collect()
            } else {
                scores.clone()
            };
            let labels = match labels {
                Some(p) => read_labels(p)?,
                None => split_data(&cfg, Split::Test, None, None)?
                    .1
                    .context("no labels: pass --labels or set paths.test_labels")?,
            };
            for file in &files {
                let series = read_frame_scores(file).with_context(|| format!("reading {}", file.display()))?;
                let report = evaluate(&series, &labels, &cfg.fingerprint())?;
                let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("scores");
                let stem = format!("report_{}", stem.strip_prefix("frames_").unwrap_or(stem));
                write_report(&out, &stem, &report)?;
                println!(
                    "{}: AUC-ROC {:.4} EER {:.4} (threshold {})",
                    file.display(),
                    report.auc_roc,
                    report.eer,
                    report.eer_threshold
                );
            }
        }
        Command::Synth => {
            let out = out_dir(&cli, &cfg)?;
            let b = make_benchmark_with(&cfg.benchmark_spec())?;
            let schema = PoseFileSchema {
                keypoints: cfg.keypoints,
                space: CoordinateSpace::Normalized,
            };
            write_pose_tracks(&out.join("train.poses"), &schema, &b.train)?;
            write_pose_tracks(&out.join("test.poses"), &schema, &b.test)?;
            write_atomic(&out.join("train_labels.csv"), b.train_labels.format().as_bytes())?;
            write_atomic(&out.join("test_labels.csv"), b.test_labels.format().as_bytes())?;
            let mut c = cfg.clone();
            c.paths.train_poses = "train.poses".into();
            c.paths.train_labels = "train_labels.csv".into();
            c.paths.test_poses = "test.poses".into();
            c.paths.test_labels = "test_labels.csv".into();
            c.paths.out_dir = ".".into();
            write_atomic(&out.join("config.toml"), c.to_toml().as_bytes())?;
            println!(
                "wrote {} train and {} test tracks ({} of {} test frames anomalous) to {}",
                b.train.len(),
                b.test.len(),
                b.test_labels.anomalous(),
                b.test_labels.len(),
                out.display()
            );
        }
        Command::Ablate => {
            let out = out_dir(&cli, &cfg)?;
            let bench = make_benchmark_with(&cfg.benchmark_spec())?;
            let rows = ablate(&cfg, &bench, |cell, run| {
                let rel = if cell.use_relative { "rel" } else { "abs" };
                let dir = out.join(format!("{}_{rel}", cell.scheme.name()));
                std::fs::create_dir_all(&dir).map_err(|e| skelvad::Error::Argument(format!("{}: {e}", dir.display())))?;
                write_run(&dir, cell, run)
            })?;
            let table = format_ablation(&rows);
            write_atomic(&out.join("ablation.md"), table.as_bytes())?;
            let json = serde_json::to_string_pretty(&rows)?;
            write_atomic(&out.join("ablation.json"), json.as_bytes())?;
            print!("{table}");
        }
        Command::DumpTokens { poses, track, window } => {
            let (tracks, _) = split_data(&cfg, Split::Train, poses.as_deref(), None)?;
            let Some(t) = tracks.get(*track) else {
                bail!("track {track} out of range ({} tracks)", tracks.len());
            };
            let windows = extract_windows(t, cfg.beta, cfg.stride)?;
            let Some(w) = windows.get(*window) else {
                bail!("window {window} out of range ({} windows)", windows.len());
            };
            print!("{}", format_tokens(&tokenize(w, cfg.tokenization())?));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let cli = Cli::parse_from(["skelvad", "--scheme", "t-prp", "--no-relative", "--seed", "9", "--stride", "3", "synth"]);
        let cfg = load_config(&cli).unwrap();
        assert_eq!((cfg.scheme, cfg.use_relative, cfg.seed, cfg.stride), (SchemeKind::TPrp, false, 9, 3));
        assert_eq!(cfg.model_config().n_layers, 8);
    }

    #[test]
    fn bad_flags_fail_validation() {
        let cli = Cli::parse_from(["skelvad", "--stride", "0", "synth"]);
        assert!(load_config(&cli).is_err());
        let cli = Cli::parse_from(["skelvad", "--scheme", "q-prp", "synth"]);
        assert!(load_config(&cli).is_err());
    }
}
