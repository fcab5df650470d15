//! Command-line front end: dataset synthesis, training, evaluation,
//! prediction, and gradient verification.
//!
//! Every subcommand reads an optional JSON run config (`--config`); command
//! line flags override config-file fields, which override built-in defaults.
//! Exit codes: 0 success, 1 validation/configuration error, 2 runtime
//! numeric error. `MASRC_THREADS` caps the internal worker count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use masrc_core::data::{load_dataset, write_dataset, ShotSequence};
use masrc_core::error::{Error, Result};
use masrc_core::mcd::{MasrcModel, Modality, ModalityConfig, ModelConfig};
use masrc_core::metrics::{MiouMode, SceneSegmentation};
use masrc_core::params::{load_checkpoint, save_checkpoint, ParamStore};
use masrc_core::synth::{synth_generate, SynthConfig};
use masrc_core::train::{
    evaluate_split, score_video, train, LabelSource, Regime, TrainConfig,
};
use masrc_core::verify::run_model_grad_suite;

#[derive(Parser)]
#[command(name = "masrc")]
#[command(about = "Scene boundary detection over shot feature sequences")]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with planted scene structure.
    Synth(SynthArgs),
    /// Train a boundary detector; writes checkpoint, metrics log and the
    /// resolved config into the output directory.
    Train(TrainArgs),
    /// Evaluate a trained run on a labeled dataset.
    Eval(EvalArgs),
    /// Score a dataset and write per-video scores, boundaries and scenes.
    Predict(PredictArgs),
    /// Finite-difference verification of every parameter gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModalityArg {
    Entity,
    Place,
    Both,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Entity => Modality::Entity,
            ModalityArg::Place => Modality::Place,
            ModalityArg::Both => Modality::Both,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RegimeArg {
    Supervised,
    SelfSupervised,
    Transfer,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Supervised => Regime::Supervised,
            RegimeArg::SelfSupervised => Regime::SelfSupervised,
            RegimeArg::Transfer => Regime::Transfer,
        }
    }
}

/// Flags shared by the subcommands; every one of them overrides the
/// corresponding run-config field.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON run config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed (model init, shuffling, synthesis).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, for predict).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Feature streams feeding the comparison grid.
    #[arg(long, value_enum)]
    modality: Option<ModalityArg>,
    /// Disable graph smoothing of the entity stream (raw features).
    #[arg(long)]
    no_eld: bool,
    /// Disable graph smoothing of the place stream (raw features).
    #[arg(long)]
    no_psd: bool,
    /// Learning regime.
    #[arg(long, value_enum)]
    regime: Option<RegimeArg>,
    /// Score threshold turning predictions into boundaries.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Overrides,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Overrides,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Training output directory (checkpoint.bin + config.json).
    #[arg(long)]
    run: PathBuf,
    /// Dataset manifest to evaluate.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    common: Overrides,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Training output directory (checkpoint.bin + config.json).
    #[arg(long)]
    run: PathBuf,
    /// Dataset manifest to score.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    common: Overrides,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Number of random seeds to run.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Window length in shots.
    #[arg(long, default_value_t = 14)]
    t: usize,
    /// Feature dimension of both streams.
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Maximum tolerated relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

/// On-disk run config: union of training fields, dataset paths, output
/// directory, modality switches and the synthesis recipe. Every field is
/// optional so the precedence chain (flag > file > default) stays explicit.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    train_manifest: Option<PathBuf>,
    val_manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    regime: Option<Regime>,
    t: Option<usize>,
    k: Option<usize>,
    batch_size: Option<usize>,
    peak_lr: Option<f64>,
    fine_tune_lr: Option<f64>,
    epochs: Option<usize>,
    seed: Option<u64>,
    patience: Option<usize>,
    threshold: Option<f64>,
    miou_mode: Option<MiouMode>,
    modality: Option<Modality>,
    eld: Option<bool>,
    psd: Option<bool>,
    synth: Option<SynthConfig>,
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let file = File::open(p).map_err(|e| {
                Error::Config(format!("cannot open config {}: {e}", p.display()))
            })?;
            Ok(serde_json::from_reader(BufReader::new(file))?)
        }
    }
}

/// Resolves the effective training configuration: flags beat file fields,
/// file fields beat defaults.
fn resolve_train(file: &RunConfig, ov: &Overrides) -> TrainConfig {
    TrainConfig {
        regime: ov
            .regime
            .map(Regime::from)
            .or(file.regime)
            .unwrap_or(Regime::Supervised),
        t: file.t.unwrap_or(14),
        k: file.k.unwrap_or(6),
        batch_size: file.batch_size.unwrap_or(64),
        peak_lr: file.peak_lr.unwrap_or(1e-3),
        epochs: file.epochs.unwrap_or(20),
        seed: ov.seed.or(file.seed).unwrap_or(0),
        modality: ModalityConfig {
            modality: ov
                .modality
                .map(Modality::from)
                .or(file.modality)
                .unwrap_or(Modality::Both),
            eld: !ov.no_eld && file.eld.unwrap_or(true),
            psd: !ov.no_psd && file.psd.unwrap_or(true),
        },
        fine_tune_lr: file.fine_tune_lr,
        patience: file.patience.unwrap_or(5),
        threshold: ov.threshold.or(file.threshold).unwrap_or(0.5),
        miou_mode: file.miou_mode.unwrap_or(MiouMode::Symmetric),
    }
}

fn resolve_out(file: &RunConfig, ov: &Overrides) -> Result<PathBuf> {
    ov.out
        .clone()
        .or_else(|| file.out.clone())
        .ok_or_else(|| Error::Config("an output directory is required (--out)".into()))
}

fn require_manifest(path: Option<&PathBuf>, which: &str) -> Result<PathBuf> {
    let p = path
        .ok_or_else(|| Error::Config(format!("config must set {which}")))?
        .clone();
    if !p.exists() {
        return Err(Error::Config(format!(
            "{which} {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let rc = load_run_config(a.common.config.as_deref())?;
    let synth = rc
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("config must contain a \"synth\" section".into()))?;
    let seed = a.common.seed.or(rc.seed).unwrap_or(0);
    let out = resolve_out(&rc, &a.common)?;
    let videos = synth_generate(synth, seed)?;
    std::fs::create_dir_all(&out)?;
    write_dataset(&out, "manifest.jsonl", &videos)?;
    let shots: usize = videos.iter().map(|v| v.num_shots()).sum();
    let boundaries: usize = videos
        .iter()
        .flat_map(|v| v.labels.as_deref().unwrap_or(&[]))
        .map(|&l| l as usize)
        .sum();
    println!(
        "{}",
        serde_json::json!({
            "videos": videos.len(),
            "shots": shots,
            "boundary_rate": boundaries as f64 / shots as f64,
        })
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let rc = load_run_config(a.common.config.as_deref())?;
    let train_manifest = require_manifest(rc.train_manifest.as_ref(), "train_manifest")?;
    let val_manifest = require_manifest(rc.val_manifest.as_ref(), "val_manifest")?;
    let cfg = resolve_train(&rc, &a.common);
    let out = resolve_out(&rc, &a.common)?;
    let train_set = load_dataset(&train_manifest)?;
    let val_set = load_dataset(&val_manifest)?;
    let result = train(&train_set, &val_set, &cfg)?;
    std::fs::create_dir_all(&out)?;
    let ckpt_path = out.join("checkpoint.bin");
    save_checkpoint(&result.store, &ckpt_path)?;
    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    for rec in &result.log {
        serde_json::to_writer(&mut metrics, rec)?;
        metrics.write_all(b"\n")?;
    }
    metrics.flush()?;
    let mut cfg_file = BufWriter::new(File::create(out.join("config.json"))?);
    serde_json::to_writer_pretty(&mut cfg_file, &cfg)?;
    cfg_file.write_all(b"\n")?;
    cfg_file.flush()?;
    eprintln!(
        "best validation ap {:.4} after {} epochs",
        result.best_val_ap, result.epochs_run
    );
    println!("{}", ckpt_path.display());
    Ok(())
}

/// Rebuilds the model from a run directory's saved config, sizing the
/// feature dimensions from the dataset, then loads the checkpoint (which
/// rejects any slot whose shape disagrees).
fn load_run(
    run: &Path,
    videos: &[ShotSequence],
) -> Result<(ParamStore<f32>, MasrcModel, TrainConfig)> {
    let cfg_path = run.join("config.json");
    let file = File::open(&cfg_path).map_err(|e| {
        Error::Config(format!("cannot open {}: {e}", cfg_path.display()))
    })?;
    let cfg: TrainConfig = serde_json::from_reader(BufReader::new(file))?;
    let first = videos
        .first()
        .ok_or_else(|| Error::Invalid("dataset is empty".into()))?;
    let (de, dp) = (first.entity.cols(), first.place.cols());
    for v in videos {
        if v.entity.cols() != de || v.place.cols() != dp {
            return Err(Error::Invalid(format!(
                "video '{}' has feature dims ({}, {}), expected ({de}, {dp})",
                v.video_id,
                v.entity.cols(),
                v.place.cols()
            )));
        }
    }
    let model_cfg = ModelConfig {
        t: cfg.t,
        k: cfg.k,
        dim_entity: de,
        dim_place: dp,
        modality: cfg.modality,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = MasrcModel::new(&mut store, &mut rng, model_cfg)?;
    load_checkpoint(&mut store, &run.join("checkpoint.bin"))?;
    Ok((store, model, cfg))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let videos = load_dataset(&a.data)?;
    let (store, model, cfg) = load_run(&a.run, &videos)?;
    let threshold = a.common.threshold.unwrap_or(cfg.threshold);
    let eval = evaluate_split(
        &store,
        &model,
        &videos,
        LabelSource::Annotated,
        threshold,
        cfg.miou_mode,
    )?;
    println!("{}", serde_json::to_string_pretty(&eval)?);
    Ok(())
}

#[derive(Serialize)]
struct Prediction<'a> {
    video_id: &'a str,
    scores: &'a [f64],
    boundaries: &'a [u8],
    scenes: &'a [(usize, usize)],
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let out = a
        .common
        .out
        .clone()
        .ok_or_else(|| Error::Config("predict needs an output file (--out)".into()))?;
    let videos = load_dataset(&a.data)?;
    let (store, model, cfg) = load_run(&a.run, &videos)?;
    let threshold = a.common.threshold.unwrap_or(cfg.threshold);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(&out)?);
    for seq in &videos {
        let scores = score_video(&store, &model, seq)?;
        let boundaries: Vec<u8> = scores.iter().map(|&s| (s >= threshold) as u8).collect();
        let seg = SceneSegmentation::from_boundaries(&boundaries)?;
        let line = Prediction {
            video_id: &seq.video_id,
            scores: &scores,
            boundaries: &boundaries,
            scenes: seg.scenes(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let seeds: Vec<u64> = (1..=a.seeds).collect();
    let report = run_model_grad_suite(&seeds, a.t, a.dim)?;
    for (slot, checked) in report.slot_coverage() {
        println!("{slot}: {checked} entries checked");
    }
    println!(
        "checked {} entries ({} skipped at kinks), max relative error {:.3e}",
        report.total_checked(),
        report.total_skipped(),
        report.max_rel_err()
    );
    if report.total_checked() == 0 {
        return Err(Error::Numeric(
            "gradient check compared nothing: every entry was excluded at a \
             rectifier or pooling kink; rerun with more seeds"
                .into(),
        ));
    }
    if !report.passed(a.tol) {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_err(),
            a.tol
        )));
    }
    println!("all gradients within {:.1e}", a.tol);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
