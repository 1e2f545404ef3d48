//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numeric failure. Every command that writes into an output
//! directory also writes `manifest.json` there, on failure too:
//!
//! ```json
//! {
//!   "command": "train",
//!   "status": "ok",
//!   "version": "0.1.0",
//!   "seed": 0,
//!   "started": "2026-01-01T00:00:00+00:00",
//!   "finished": "2026-01-01T00:05:00+00:00",
//!   "args": ["train", "--config", "tiny", "..."],
//!   "config": "<resolved TOML>",
//!   "outputs": ["runs/a/checkpoint.vdtc", "runs/a/metrics.jsonl"],
//!   "error": null
//! }
//! ```
//!
//! `eval` writes `report.json` (no timestamps, so identical invocations give
//! identical bytes):
//!
//! ```json
//! {
//!   "seed": 0, "extractor": "toy-features(seed=0,side=16,dim=64)",
//!   "count": 2048, "clip_len": 16, "is_splits": 10,
//!   "metrics": [
//!     {"name": "fvd", "value": 12.3, "count": 2048},
//!     {"name": "fid", "value": 4.5, "count": 32768},
//!     {"name": "is", "value": 1.8, "count": 32768},
//!     {"name": "is_std", "value": 0.01, "count": 32768}
//!   ]
//! }
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::data::{make_synthetic, write_video_dir, ClipIndex};
use crate::error::{Error, Result};
use crate::eval::{
    effective_clip_len, extract_set, frechet_distance, inception_score, sample_eval_clips,
    FeatureExtractor, ToyFeatureExtractor, DEFAULT_EVAL_CLIPS, DEFAULT_EVAL_CLIP_LEN,
    DEFAULT_IS_SPLITS,
};
use crate::prior::PriorGuidance;
use crate::rng::SeededRng;
use crate::training::{
    codec_for_training, generate_clips, prior_from_config, Checkpoint, TrainData, Trainer,
    CHECKPOINT_FILE,
};
use crate::video::VideoClip;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Parser)]
#[command(
    name = "vidiff",
    version,
    about = "Latent video diffusion: train, sample, evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a directory of videos.
    Train(TrainArgs),
    /// Sample clips from a checkpoint's EMA weights.
    Sample(SampleArgs),
    /// Compare generated videos with real ones (FVD, FID, IS).
    Eval(EvalArgs),
    /// Write a synthetic dataset of frame-folder videos.
    MakeSynthetic(SynthArgs),
    /// Print a checkpoint's config, step and parameter counts.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file, or a preset name (tiny, desk, full).
    #[arg(long, default_value = "tiny")]
    pub config: String,
    /// Root directory holding one folder of frames per video.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint, metrics and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shortcut for `train.max_steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Shortcut for the top-level `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the checkpoint already in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of clips to generate.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; clips are written as `sample_000/00000.png`, ...
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Root of real videos.
    #[arg(long)]
    pub real: PathBuf,
    /// Root of generated videos.
    #[arg(long)]
    pub generated: PathBuf,
    /// Clips drawn from each set.
    #[arg(long, default_value_t = DEFAULT_EVAL_CLIPS)]
    pub count: usize,
    /// Frames per clip; reduced with a warning when every video is shorter.
    #[arg(long, default_value_t = DEFAULT_EVAL_CLIP_LEN)]
    pub clip_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Inception Score splits.
    #[arg(long, default_value_t = DEFAULT_IS_SPLITS)]
    pub is_splits: usize,
    /// Seed of the toy feature extractor.
    #[arg(long, default_value_t = 0)]
    pub extractor_seed: u64,
    /// Output directory for report and manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub videos: usize,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Square frame side in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub version: String,
    pub seed: Option<u64>,
    pub started: String,
    pub finished: String,
    pub args: Vec<String>,
    pub config: Option<String>,
    pub outputs: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricEntry {
    pub name: String,
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    pub extractor: String,
    pub count: usize,
    pub clip_len: usize,
    pub is_splits: usize,
    pub metrics: Vec<MetricEntry>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.name == name)
            .map(|m| m.value)
    }
}

/// What a command produced, for the manifest.
#[derive(Default)]
struct Outcome {
    seed: Option<u64>,
    config: Option<String>,
    outputs: Vec<PathBuf>,
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn load_videos(root: &Path, side: usize) -> Result<Vec<VideoClip>> {
    let index = ClipIndex::build(root, 1, 1, (side, side))?;
    (0..index.videos.len())
        .map(|v| index.load_video(v))
        .collect()
}

fn cmd_train(a: &TrainArgs, outcome: &mut Outcome) -> Result<()> {
    let mut overrides = a.overrides.clone();
    if let Some(s) = a.steps {
        overrides.push(format!("train.max_steps={s}"));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let prior_cfg;
    let mut trainer = if a.resume {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        if !overrides.is_empty() {
            return Err(Error::config("overrides cannot be combined with --resume"));
        }
        prior_cfg = ckpt.config.clone();
        outcome.seed = Some(ckpt.config.seed);
        outcome.config = Some(ckpt.config.to_toml()?);
        Trainer::from_checkpoint(&ckpt, prior_from_config(&prior_cfg)?)?
    } else {
        let cfg = RunConfig::load(&a.config, &overrides)?;
        outcome.seed = Some(cfg.seed);
        outcome.config = Some(cfg.to_toml()?);
        prior_cfg = cfg.clone();
        let index = ClipIndex::build(
            &a.data,
            cfg.data.clip_len,
            cfg.data.stride,
            (cfg.data.height, cfg.data.width),
        )?;
        let clips = (0..index.len())
            .map(|i| index.load(i))
            .collect::<Result<Vec<_>>>()?;
        let codec = codec_for_training(&cfg, &clips)?;
        Trainer::new(&cfg, codec, prior_from_config(&cfg)?)?
    };
    let cfg = trainer.config().clone();
    let index = ClipIndex::build(
        &a.data,
        cfg.data.clip_len,
        cfg.data.stride,
        (cfg.data.height, cfg.data.width),
    )?;
    if index.is_empty() {
        return Err(Error::data(format!(
            "no video under {} has {} frames",
            a.data.display(),
            cfg.data.clip_len
        )));
    }
    let data = TrainData::from_index(&index, cfg.train.val_fraction, cfg.seed)?;
    log::info!(
        "{} training clips, {} validation clips, {} parameters",
        data.train.len(),
        data.val.len(),
        prior_cfg.parameter_count()
    );
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let metrics_path = a.out.join(METRICS_FILE);
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut write_err = None;
    let summary = trainer.run(&data, Some(&a.out), |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
        if m.step % 50 == 0 {
            log::info!("step {} elbo {:.5} prior {:?}", m.step, m.elbo, m.prior);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&metrics_path, e));
    }
    log::info!(
        "finished after {} steps (early stop: {})",
        summary.steps,
        summary.stopped_early
    );
    outcome.outputs = vec![ckpt_path, metrics_path];
    Ok(())
}

fn cmd_sample(a: &SampleArgs, outcome: &mut Outcome) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    outcome.seed = Some(a.seed);
    outcome.config = Some(ckpt.config.to_toml()?);
    let clips = generate_clips(&ckpt, a.count, a.seed)?;
    for (i, clip) in clips.iter().enumerate() {
        let dir = a.out.join(format!("sample_{i:03}"));
        write_video_dir(&dir, clip)?;
        outcome.outputs.push(dir);
    }
    Ok(())
}

/// Runs the evaluation protocol on two roots.
pub fn evaluate(a: &EvalArgs) -> Result<EvalReport> {
    if a.count < 2 {
        return Err(Error::config("eval needs at least 2 clips"));
    }
    let extractor = ToyFeatureExtractor::new(a.extractor_seed);
    let side = extractor.input_side();
    let real = load_videos(&a.real, side)?;
    let generated = load_videos(&a.generated, side)?;
    let lens = |v: &[VideoClip]| v.iter().map(|c| c.frames).collect::<Vec<_>>();
    let (real_len, gen_len) = (lens(&real), lens(&generated));
    let clip_len =
        effective_clip_len(&real_len, a.clip_len)?.min(effective_clip_len(&gen_len, a.clip_len)?);
    let windows = |videos: &[VideoClip], lengths: &[usize]| -> Result<Vec<VideoClip>> {
        let mut rng = SeededRng::new(a.seed);
        sample_eval_clips(lengths, a.count, clip_len, &mut rng)?
            .iter()
            .map(|w| videos[w.video].window(w.start, clip_len))
            .collect()
    };
    let real_clips = windows(&real, &real_len)?;
    let gen_clips = windows(&generated, &gen_len)?;
    let (fd, cd) = (extractor.feature_dim(), extractor.clip_feature_dim());
    let rf = extract_set(&extractor, &real_clips, fd, cd)?;
    let gf = extract_set(&extractor, &gen_clips, fd, cd)?;
    let fvd = frechet_distance(&rf.clips.finish()?, &gf.clips.finish()?)?;
    let fid = frechet_distance(&rf.frames.finish()?, &gf.frames.finish()?)?;
    let (is, is_std) = inception_score(&gf.probs, a.is_splits)?;
    let frames = gf.probs.len();
    Ok(EvalReport {
        seed: a.seed,
        extractor: extractor.id(),
        count: a.count,
        clip_len,
        is_splits: a.is_splits,
        metrics: vec![
            MetricEntry {
                name: "fvd".into(),
                value: fvd,
                count: a.count,
            },
            MetricEntry {
                name: "fid".into(),
                value: fid,
                count: frames,
            },
            MetricEntry {
                name: "is".into(),
                value: is,
                count: frames,
            },
            MetricEntry {
                name: "is_std".into(),
                value: is_std,
                count: frames,
            },
        ],
    })
}

fn cmd_eval(a: &EvalArgs, outcome: &mut Outcome) -> Result<()> {
    outcome.seed = Some(a.seed);
    let report = evaluate(a)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let path = a.out.join(REPORT_FILE);
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    for m in &report.metrics {
        println!("{} = {:.6} (n = {})", m.name, m.value, m.count);
    }
    outcome.outputs.push(path);
    Ok(())
}

fn cmd_make_synthetic(a: &SynthArgs, outcome: &mut Outcome) -> Result<()> {
    outcome.seed = Some(a.seed);
    outcome.outputs = make_synthetic(&a.out, a.videos, a.frames, a.size, a.seed)?;
    Ok(())
}

/// Text printed by `inspect`.
pub fn inspect_text(ckpt: &Checkpoint) -> Result<String> {
    let cfg = &ckpt.config;
    let stored: usize = ckpt.params.values().map(|t| t.elem_count()).sum();
    let backbone = Backbone::parameter_count(&cfg.model);
    let adapters = if cfg.prior.enabled() {
        PriorGuidance::parameter_count(cfg.prior.levels)
    } else {
        0
    };
    let mut s = String::new();
    s.push_str(&cfg.to_toml()?);
    s.push_str(&format!("\nstep = {}\n", ckpt.step));
    s.push_str(&format!("config_hash = {}\n", cfg.hash()?));
    s.push_str(&format!(
        "parameters_formula = {} (backbone {backbone}, prior adapters {adapters})\n",
        cfg.parameter_count()
    ));
    s.push_str(&format!("parameters_stored = {stored}\n"));
    s.push_str(&format!(
        "codec_parameters = {}\n",
        cfg.codec.parameter_count()
    ));
    Ok(s)
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    print!("{}", inspect_text(&ckpt)?);
    Ok(())
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let started = now();
    let mut outcome = Outcome::default();
    let (name, out_dir, result) = match &cli.command {
        Command::Train(a) => ("train", Some(a.out.clone()), cmd_train(a, &mut outcome)),
        Command::Sample(a) => ("sample", Some(a.out.clone()), cmd_sample(a, &mut outcome)),
        Command::Eval(a) => ("eval", Some(a.out.clone()), cmd_eval(a, &mut outcome)),
        Command::MakeSynthetic(a) => (
            "make-synthetic",
            Some(a.out.clone()),
            cmd_make_synthetic(a, &mut outcome),
        ),
        Command::Inspect(a) => ("inspect", None, cmd_inspect(a)),
    };
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    if let Some(dir) = out_dir {
        let manifest = RunManifest {
            command: name.to_string(),
            status: if result.is_ok() { "ok" } else { "failed" }.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: outcome.seed,
            started,
            finished: now(),
            args: args
                .iter()
                .skip(1)
                .map(|a| a.to_string_lossy().into_owned())
                .collect(),
            config: outcome.config,
            outputs: outcome
                .outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            error: result.as_ref().err().map(|e| e.to_string()),
        };
        if let Err(e) = write_manifest(&dir, &manifest) {
            eprintln!("error: could not write manifest: {e}");
            if result.is_ok() {
                return e.exit_code();
            }
        }
    }
    match result {
        Ok(()) => 0,
        Err(e) => e.exit_code(),
    }
}
