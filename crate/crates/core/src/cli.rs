//! Command-line interface: `synth`, `train`, `score` and `eval`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{render, KeyValues};
use crate::data::{
    load_labels, load_trajectories, synth_dataset, write_labels, write_trajectories, SynthConfig,
};
use crate::error::{Error, Result};
use crate::manifold::{CenterStrategy, Manifold};
use crate::model::{EncoderKind, ProjectorKind};
use crate::scoring::{
    evaluate, frame_timelines, median, parse_scores_csv, scores_csv, ScoreKind, Scorer,
};
use crate::tensor::Tensor;
use crate::train::{center_csv, loss_csv, prepare_training_windows, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "skelocc", version, about = "One-class anomaly detection on skeleton trajectories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test dataset.
    Synth(SynthArgs),
    /// Train a model on normal trajectories.
    Train(TrainArgs),
    /// Score the frames of trajectories with a trained checkpoint.
    Score(ScoreArgs),
    /// Frame-level AUC of a score file against labels.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `key = value` generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Trajectory file of normal training data.
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` training settings; flags override them.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifold: Option<Manifold>,
    #[arg(long)]
    pub center: Option<CenterStrategy>,
    #[arg(long)]
    pub projector: Option<ProjectorKind>,
    #[arg(long)]
    pub encoder: Option<EncoderKind>,
    /// Add the decoder and its reconstruction loss.
    #[arg(long)]
    pub ae: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Window length in frames.
    #[arg(long)]
    pub window: Option<usize>,
    /// Window stride for training.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Weight-decay coefficient.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for scoring passes.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Trajectory file to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Label file; extends timelines to the labelled clip length.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// s_hyp | s_rec | s_rec+s_hyp
    #[arg(long, default_value = "s_hyp")]
    pub score_kind: ScoreKind,
    /// Give uncovered frames the training median score instead of omitting
    /// them (`median`).
    #[arg(long)]
    pub fill_uncovered: Option<String>,
    /// Must match the checkpoint's manifold when given.
    #[arg(long)]
    pub manifold: Option<Manifold>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score CSV.
    #[arg(long)]
    pub scores: PathBuf,
    /// Label file.
    #[arg(long)]
    pub labels: PathBuf,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the exit
/// status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
    }
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    Ok(out)
}

/// Writes a manifest with the command, resolved settings, inputs and the
/// hashes of `outputs`.
fn write_manifest(
    path: &Path,
    command: &str,
    settings: &[(String, String)],
    inputs: &[(&str, &Path)],
    outputs: &[&Path],
) -> Result<()> {
    let mut pairs = vec![
        ("command".to_string(), command.to_string()),
        ("tool_version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
    ];
    for (k, v) in settings {
        pairs.push((format!("config.{k}"), v.clone()));
    }
    for (name, p) in inputs {
        pairs.push((format!("input.{name}"), p.display().to_string()));
        pairs.push((format!("input.{name}.sha256"), sha256_hex(p)?));
    }
    for p in outputs {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        pairs.push((format!("output.{name}.sha256"), sha256_hex(p)?));
    }
    std::fs::write(path, render(&pairs))?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let config = match &a.config {
        Some(p) => SynthConfig::from_kv(KeyValues::from_file(p)?)?,
        None => SynthConfig::default(),
    };
    let data = synth_dataset(a.seed, &config)?;
    std::fs::create_dir_all(&a.out)?;
    let files = [
        ("train.tsv", write_trajectories(&data.train.trajectories)),
        ("train_labels.tsv", write_labels(&data.train.labels)),
        ("test.tsv", write_trajectories(&data.test.trajectories)),
        ("test_labels.tsv", write_labels(&data.test.labels)),
    ];
    let mut outputs = Vec::new();
    for (name, text) in files {
        let p = a.out.join(name);
        std::fs::write(&p, text)?;
        outputs.push(p);
    }
    let mut settings = vec![("seed".to_string(), a.seed.to_string())];
    settings.extend(config.to_pairs());
    let mut inputs = Vec::new();
    if let Some(p) = &a.config {
        inputs.push(("config", p.as_path()));
    }
    let out_refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    write_manifest(&a.out.join("manifest.txt"), "synth", &settings, &inputs, &out_refs)?;
    let positives: usize = data
        .test
        .labels
        .iter()
        .map(|l| l.labels.iter().filter(|&&x| x).count())
        .sum();
    let frames: usize = data.test.labels.iter().map(|l| l.frame_count()).sum();
    println!(
        "wrote {} train and {} test trajectories to {} (test positive rate {:.3})",
        data.train.trajectories.len(),
        data.test.trajectories.len(),
        a.out.display(),
        positives as f64 / frames.max(1) as f64
    );
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_kv(KeyValues::from_file(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.manifold {
        cfg.manifold = v;
    }
    if let Some(v) = a.center {
        cfg.center = v;
    }
    if let Some(v) = a.projector {
        cfg.projector = v;
    }
    if let Some(v) = a.encoder {
        cfg.encoder = v;
    }
    if a.ae {
        cfg.ae = true;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.window {
        cfg.window = v;
    }
    if let Some(v) = a.stride {
        cfg.stride = v;
    }
    if let Some(v) = a.latent_dim {
        cfg.latent_dim = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let config = resolve_train_config(&a)?;
    let trajectories = load_trajectories(&a.data, config.joints)?;
    let (windows, stats) = prepare_training_windows(&trajectories, config.window, config.stride)?;
    let tensors: Vec<&Tensor> = windows.iter().map(|w| &w.values).collect();

    let mut trainer = Trainer::new(config.clone())?;
    trainer.train(&tensors)?;
    let center = trainer.center.clone().expect("trained");

    let kinds: &[ScoreKind] = if config.ae {
        &ScoreKind::ALL
    } else {
        &[ScoreKind::Distance]
    };
    let mut train_medians = BTreeMap::new();
    for &kind in kinds {
        let scorer = Scorer {
            model: &trainer.model,
            manifold: config.manifold,
            center: &center,
            stats: &stats,
            window: config.window,
            kind,
            threads: a.threads,
        };
        let scores = scorer.score_tensors(&tensors)?;
        if let Some(m) = median(&scores) {
            train_medians.insert(kind.to_string(), m);
        }
    }

    std::fs::create_dir_all(&a.out)?;
    let checkpoint = Checkpoint {
        config: config.clone(),
        model: trainer.model.clone(),
        center,
        stats,
        train_medians,
    };
    let paths = [
        a.out.join("checkpoint.txt"),
        a.out.join("loss.csv"),
        a.out.join("center.csv"),
        a.out.join("norm_stats.txt"),
    ];
    checkpoint.save(&paths[0])?;
    std::fs::write(&paths[1], loss_csv(&trainer.history))?;
    std::fs::write(&paths[2], center_csv(&trainer.history))?;
    stats.save(&paths[3])?;

    let mut inputs = vec![("data", a.data.as_path())];
    if let Some(p) = &a.config {
        inputs.push(("config", p.as_path()));
    }
    let out_refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
    write_manifest(
        &a.out.join("manifest.txt"),
        "train",
        &config.to_pairs(),
        &inputs,
        &out_refs,
    )?;
    let last = trainer.history.last().expect("epochs >= 1");
    println!(
        "trained {} epochs on {} windows: final mean loss {:.6e}, embedding variance {:.6e}",
        config.epochs,
        windows.len(),
        last.mean_loss,
        last.embedding_variance
    );
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if let Some(m) = a.manifold {
        if m != ck.config.manifold {
            return Err(Error::Config(format!(
                "--manifold {m} does not match the checkpoint's {}",
                ck.config.manifold
            )));
        }
    }
    let fill = match a.fill_uncovered.as_deref() {
        None => None,
        Some("median") => Some(*ck.train_medians.get(a.score_kind.as_str()).ok_or_else(|| {
            Error::Config(format!("checkpoint has no training median for {}", a.score_kind))
        })?),
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown --fill-uncovered `{other}` (expected median)"
            )))
        }
    };
    let trajectories = load_trajectories(&a.data, ck.config.joints)?;
    let frame_counts: BTreeMap<String, usize> = match &a.labels {
        Some(p) => load_labels(p)?
            .into_iter()
            .map(|l| (l.clip_id.clone(), l.frame_count()))
            .collect(),
        None => BTreeMap::new(),
    };
    let scorer = Scorer {
        model: &ck.model,
        manifold: ck.config.manifold,
        center: &ck.center,
        stats: &ck.stats,
        window: ck.config.window,
        kind: a.score_kind,
        threads: a.threads,
    };
    let windows = scorer.score_trajectories(&trajectories)?;
    let timelines = frame_timelines(&windows, &frame_counts);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, scores_csv(&timelines, fill))?;

    let settings = vec![
        ("score_kind".to_string(), a.score_kind.to_string()),
        (
            "fill_uncovered".to_string(),
            a.fill_uncovered.clone().unwrap_or_else(|| "none".into()),
        ),
        ("manifold".to_string(), ck.config.manifold.to_string()),
    ];
    let mut inputs = vec![
        ("checkpoint", a.checkpoint.as_path()),
        ("data", a.data.as_path()),
    ];
    if let Some(p) = &a.labels {
        inputs.push(("labels", p.as_path()));
    }
    let mut manifest = a.out.clone().into_os_string();
    manifest.push(".manifest.txt");
    write_manifest(Path::new(&manifest), "score", &settings, &inputs, &[&a.out])?;
    let covered: usize = timelines.iter().map(|t| t.covered_frames()).sum();
    println!(
        "scored {} windows; {} covered frames in {} clips",
        windows.len(),
        covered,
        timelines.len()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let timelines = parse_scores_csv(&std::fs::read_to_string(&a.scores)?)?;
    let labels = load_labels(&a.labels)?;
    let report = evaluate(&timelines, &labels, None)?;
    print!("{}", report.to_text());
    if let Some(p) = &a.out {
        std::fs::write(p, report.to_json())?;
    }
    Ok(())
}
