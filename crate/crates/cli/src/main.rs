//! `devgest`: synthetic data, two-stage training, generation, evaluation,
//! ablation sweeps and report plots.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (unknown flag or
//! bad argument), 3 invalid configuration, 4 missing input file. Failures
//! print exactly one line to stderr:
//! `error code=<n> kind=<kind> message=<json string>`.

mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use devgest::deviation::{AblationFlags, StageOneModel};
use devgest::media_io::dataset::{load_frames, read_boxes, DatasetManifest, Split};
use devgest::media_io::image::{Image, VideoClip};
use devgest::media_io::synth::{generate_synthetic_dataset, SyntheticSpec};
use devgest::metrics::MetricReport;
use devgest::pipeline::{
    animate_clip, default_metric_nets, frozen_motion_model, generate_video, load_checkpoint, report_with_model, save_checkpoint,
    stage_one_from_checkpoint, train_stage1, train_stage2, write_video, GenerateOptions, LossHistory, TrainingData,
};

use crate::config::{documented_keys, render, resolve, RunConfig};

/// A classified failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 3, kind: "config", message: message.into() }
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self { code: 4, kind: "missing_file", message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 1, kind: "runtime", message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, kind: "usage", message: message.into() }
    }

    fn line(&self) -> String {
        let msg = serde_json::to_string(&self.message).unwrap_or_else(|_| "\"\"".into());
        format!("error code={} kind={} message={msg}", self.code, self.kind)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn classify(err: &anyhow::Error) -> Failure {
    let full = format!("{err:#}");
    if let Some(f) = err.downcast_ref::<Failure>() {
        return Failure { code: f.code, kind: f.kind, message: full };
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<devgest::Error>() {
            match e {
                devgest::Error::MissingFile(_) => return Failure::missing(full),
                devgest::Error::Config(_) => return Failure::config(full),
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return Failure::missing(full);
            }
        }
    }
    Failure::runtime(full)
}

#[derive(Parser, Debug)]
#[command(name = "devgest", version, about = "Audio-driven co-speech gesture video generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic speaker dataset.
    SynthData(SynthArgs),
    /// Train stage 1 (image animation) or stage 2 (motion diffusion).
    Train(TrainArgs),
    /// Generate a video from speech audio and a source image.
    Generate(GenerateArgs),
    /// Compare generated clips with real clips and write a metric report.
    Evaluate(EvaluateArgs),
    /// Train stage-1 variants with ablation flags and evaluate each.
    Ablate(AblateArgs),
    /// Render SVG charts and a markdown table from metric reports.
    PlotReport(PlotArgs),
    /// Print every configuration key with its default value.
    ConfigKeys,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    clips: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Clip duration in seconds.
    #[arg(long, default_value_t = 2.0)]
    seconds: f64,
    #[arg(long, default_value_t = 16.0)]
    fps: f64,
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
    /// Number of trailing clips tagged as the test split.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
}

/// Options shared by commands that read a run configuration.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML run configuration (flat dotted keys or tables).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set stage1.lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Training seed (same as `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
    /// Optimizer steps for the stage being trained.
    #[arg(long)]
    steps: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self, stage_key: &str) -> Result<RunConfig> {
        let mut sets = self.sets.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        if let Some(s) = self.steps {
            sets.push(format!("{stage_key}.steps={s}"));
        }
        Ok(resolve(self.config.as_deref(), std::env::vars(), &sets)?)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Which stage to train.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Dataset root (or `paths.data`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (or `paths.out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stage-1 checkpoint, required for stage 2 (or `paths.stage1_ckpt`).
    #[arg(long)]
    stage1_ckpt: Option<PathBuf>,
    /// Print a progress line every N steps (0 disables).
    #[arg(long, default_value_t = 50)]
    log_every: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Speech audio (16-bit PCM WAV).
    #[arg(long)]
    audio: PathBuf,
    /// Source image (PNG) of the speaker.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    stage1_ckpt: PathBuf,
    #[arg(long)]
    stage2_ckpt: PathBuf,
    /// Output directory; frames go to `<out>/frames`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16.0)]
    fps: f64,
    /// Denoising iterations (default: the stage-2 config value).
    #[arg(long)]
    sample_steps: Option<usize>,
    /// Also write an uncompressed `video.y4m`.
    #[arg(long)]
    y4m: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Real dataset root (with `manifest.json` and region boxes).
    #[arg(long)]
    real: PathBuf,
    /// Generated set: frames for real clip `<id>` are read from
    /// `<gen>/clips/<id>/frames`.
    #[arg(long)]
    gen: PathBuf,
    /// Output report path.
    #[arg(long)]
    out: PathBuf,
    /// Stage-1 checkpoint whose pose estimator supplies motion features;
    /// a seed-frozen random estimator is used otherwise.
    #[arg(long)]
    stage1_ckpt: Option<PathBuf>,
    /// Split to evaluate: train, test or all.
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long, default_value_t = 11)]
    perceptual_seed: u64,
    #[arg(long, default_value_t = 13)]
    video_seed: u64,
    #[arg(long, default_value_t = 17)]
    motion_seed: u64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Variant as comma-separated flags (`full`, `disable_deviation`,
    /// `disable_enhancer`, `disable_motion_decoder` or the `w/o-*` aliases).
    /// Repeatable; defaults to full plus each single flag.
    #[arg(long = "variant")]
    variants: Vec<String>,
    #[arg(long, default_value_t = 11)]
    perceptual_seed: u64,
    #[arg(long, default_value_t = 13)]
    video_seed: u64,
    #[arg(long, default_value_t = 17)]
    motion_seed: u64,
    #[arg(long, default_value_t = 0)]
    log_every: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Report to plot, as `PATH` or `LABEL=PATH`. Repeatable.
    #[arg(long = "report", required = true)]
    reports: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", Failure::usage(first).line());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let f = classify(&e);
            eprintln!("{}", f.line());
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::PlotReport(a) => cmd_plot(a),
        Command::ConfigKeys => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            for (k, v) in documented_keys() {
                // A closed pipe (`| head`) ends the listing quietly.
                if writeln!(out, "{k} = {v}").is_err() {
                    break;
                }
            }
            Ok(())
        }
    }
}

fn pick_path(flag: Option<PathBuf>, cfg: &RunConfig, key: &str, what: &str) -> Result<PathBuf> {
    flag.or_else(|| cfg.path(key).map(Path::to_path_buf))
        .ok_or_else(|| Failure::usage(format!("{what} is required (flag or `{key}`)")).into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        clips: a.clips,
        width: a.width,
        height: a.height,
        seconds: a.seconds,
        fps: a.fps,
        sample_rate: a.sample_rate,
        seed: a.seed,
        holdout_clips: a.holdout,
        ..SyntheticSpec::default()
    };
    let m = generate_synthetic_dataset(&a.out, &spec)?;
    println!("wrote {} clips of {} frames to {}", m.len(), spec.frames_per_clip(), a.out.display());
    Ok(())
}

fn progress_printer(stage: u8, every: u64, total: usize) -> impl FnMut(u64, &LossHistory) {
    move |step, h| {
        if every > 0 && (step % every == 0 || step as usize == total) {
            let last = h.rows.last().map(|r| r.2).unwrap_or(f64::NAN);
            eprintln!("stage {stage} step {step}/{total} total={last:.5}");
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let key = if a.stage == 1 { "stage1" } else { "stage2" };
    let rc = a.cfg.resolve(key)?;
    let data_dir = pick_path(a.data, &rc, "paths.data", "--data")?;
    let out = pick_path(a.out, &rc, "paths.out", "--out")?;
    let manifest = DatasetManifest::load(&data_dir)?;
    let data = TrainingData::load(&manifest, Split::Train, &rc.train.audio)?;
    let run = if a.stage == 1 {
        let mut p = progress_printer(1, a.log_every, rc.train.stage1.steps);
        train_stage1(&data, &rc.train, Some(&mut p))?
    } else {
        let ck = pick_path(a.stage1_ckpt, &rc, "paths.stage1_ckpt", "--stage1-ckpt")?;
        let stage1 = load_checkpoint(&ck)?;
        let mut p = progress_printer(2, a.log_every, rc.train.stage2.steps);
        train_stage2(&data, &stage1, &rc.train, Some(&mut p))?
    };
    let ckpt_path = out.join(format!("stage{}.ckpt", a.stage));
    save_checkpoint(&run.checkpoint, &ckpt_path)?;
    run.history.save_csv(&out.join(format!("stage{}_loss.csv", a.stage)))?;
    write_text(&out.join(format!("stage{}_config.json", a.stage)), &render(&run.checkpoint.config))?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    for p in [&a.audio, &a.image, &a.stage1_ckpt, &a.stage2_ckpt] {
        if !p.exists() {
            return Err(Failure::missing(format!("{} not found", p.display())).into());
        }
    }
    let source = Image::load_png(&a.image)?;
    let s1 = load_checkpoint(&a.stage1_ckpt)?;
    let s2 = load_checkpoint(&a.stage2_ckpt)?;
    let opts = GenerateOptions {
        seed: a.seed,
        fps: a.fps,
        sample_steps: a.sample_steps,
    };
    let clip = generate_video(&a.audio, &source, &s1, &s2, &opts)?;
    write_video(&clip, &a.out, a.y4m)?;
    println!("wrote {} frames to {}", clip.len(), a.out.join("frames").display());
    Ok(())
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(Failure::usage(format!("unknown split `{other}`")).into()),
    }
}

fn load_real_clips(manifest: &DatasetManifest, split: Option<Split>) -> Result<Vec<(String, VideoClip)>> {
    let mut out = Vec::new();
    for rec in &manifest.clips {
        if split.is_some_and(|s| s != rec.split) {
            continue;
        }
        let frames = load_frames(&manifest.root.join(&rec.frames_dir))?;
        let boxes = match &rec.boxes {
            Some(b) => Some(read_boxes(&manifest.root.join(b))?),
            None => None,
        };
        out.push((rec.id.clone(), VideoClip::new(frames, manifest.fps, boxes)?));
    }
    if out.is_empty() {
        return Err(Failure::runtime("no clips selected for evaluation").into());
    }
    Ok(out)
}

/// Motion featurizer: a trained stage-1 model, or a seed-frozen random one.
fn motion_model(ckpt: Option<&Path>, height: usize, width: usize, seed: u64) -> Result<(StageOneModel, String)> {
    match ckpt {
        Some(p) => {
            let c = load_checkpoint(p)?;
            let (_, m) = stage_one_from_checkpoint(&c)?;
            Ok((m, "proxy:trained-lpe".to_string()))
        }
        None => {
            let m = frozen_motion_model(height, width, seed)?;
            Ok((m, format!("proxy:random-frozen-lpe:seed={seed}")))
        }
    }
}

#[derive(serde::Serialize)]
struct EvalSettings<'a> {
    perceptual_seed: u64,
    video_seed: u64,
    motion: &'a str,
    split: &'a str,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let manifest = DatasetManifest::load(&a.real)?;
    let real = load_real_clips(&manifest, split)?;
    let mut generated = Vec::with_capacity(real.len());
    for (id, r) in &real {
        let dir = a.gen.join("clips").join(id).join("frames");
        if !dir.exists() {
            return Err(Failure::missing(format!("generated frames {} not found", dir.display())).into());
        }
        let frames = load_frames(&dir)?;
        if frames.len() != r.len() {
            return Err(Failure::runtime(format!("clip {id}: {} generated vs {} real frames", frames.len(), r.len())).into());
        }
        generated.push(VideoClip::new(frames, r.fps, None)?);
    }
    let (model, provenance) = motion_model(a.stage1_ckpt.as_deref(), manifest.height, manifest.width, a.motion_seed)?;
    let nets = default_metric_nets(a.perceptual_seed, a.video_seed)?;
    let real_clips: Vec<VideoClip> = real.into_iter().map(|(_, c)| c).collect();
    let settings = EvalSettings {
        perceptual_seed: a.perceptual_seed,
        video_seed: a.video_seed,
        motion: &provenance,
        split: &a.split,
    };
    let report = report_with_model(&model, &real_clips, &generated, &nets, &provenance, &settings)?;
    write_text(&a.out, &report.to_json()?)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn variant_flags(spec: &str) -> Result<AblationFlags> {
    let names: Vec<&str> = spec
        .split(',')
        .map(str::trim)
        .map(|n| if n == "full" { "none" } else { n })
        .collect();
    Ok(AblationFlags::from_names(&names)?)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let rc = a.cfg.resolve("stage1")?;
    let data_dir = pick_path(a.data, &rc, "paths.data", "--data")?;
    let out = pick_path(a.out, &rc, "paths.out", "--out")?;
    let specs: Vec<String> = if a.variants.is_empty() {
        ["full", "disable_deviation", "disable_enhancer", "disable_motion_decoder"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    } else {
        a.variants.clone()
    };
    // Parse every variant before any training so bad flags have no side effects.
    let flags = specs.iter().map(|s| variant_flags(s)).collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::load(&data_dir)?;
    let data = TrainingData::load(&manifest, Split::Train, &rc.train.audio)?;
    let real = load_real_clips(&manifest, Some(Split::Train))?;
    let nets = default_metric_nets(a.perceptual_seed, a.video_seed)?;
    let (featurizer, provenance) = motion_model(None, manifest.height, manifest.width, a.motion_seed)?;

    let mut reports = Vec::new();
    for f in flags {
        let mut cfg = rc.train.clone();
        cfg.model.ablation = f;
        let label = f.label();
        let dir = out.join(&label);
        let mut p = progress_printer(1, a.log_every, cfg.stage1.steps);
        let run = train_stage1(&data, &cfg, Some(&mut p))?;
        save_checkpoint(&run.checkpoint, &dir.join("stage1.ckpt"))?;
        run.history.save_csv(&dir.join("stage1_loss.csv"))?;
        let (_, model) = stage_one_from_checkpoint(&run.checkpoint)?;
        let mut generated = Vec::with_capacity(real.len());
        for (_, clip) in &real {
            generated.push(VideoClip::new(animate_clip(&model, &clip.frames, 0)?, clip.fps, None)?);
        }
        let real_clips: Vec<VideoClip> = real.iter().map(|(_, c)| c.clone()).collect();
        let report = report_with_model(&featurizer, &real_clips, &generated, &nets, &provenance, &cfg)?;
        write_text(&dir.join("report.json"), &report.to_json()?)?;
        println!("{label}: full-frame PSNR {:.3} dB", report.regions["full"].psnr);
        reports.push((label, report));
    }
    let series: Vec<plot::Series<'_>> = reports.iter().map(|(l, r)| plot::Series { label: l, report: r }).collect();
    write_text(&out.join("ablation.md"), &plot::markdown_table(&series))?;
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let mut loaded = Vec::with_capacity(a.reports.len());
    for spec in &a.reports {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let label = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .or_else(|| p.file_stem())
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| spec.clone());
                (label, p)
            }
        };
        if !path.exists() {
            return Err(Failure::missing(format!("report {} not found", path.display())).into());
        }
        loaded.push((label, MetricReport::load(&path)?));
    }
    let series: Vec<plot::Series<'_>> = loaded.iter().map(|(l, r)| plot::Series { label: l, report: r }).collect();
    for (name, svg) in plot::charts(&series) {
        write_text(&a.out.join(name), &svg)?;
    }
    write_text(&a.out.join("report.md"), &plot::markdown_table(&series))?;
    println!("wrote charts to {}", a.out.display());
    Ok(())
}
