use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use pulsebench::extract::{ColorSignal, STrainConfig, StrategyConfig};
use pulsebench::metrics::error_stats;
use pulsebench::pipeline::{
    bench, build_corpus, cross_validate, oracle_signal, train_g2, train_r_on, train_s_on, truth_signal,
    ClipData, CorpusSpec, EvalOptions, ExtractorKind, Models, Pipeline, PipelineConfig,
};
use pulsebench::refiner::{train_gan, NoiseModel, PatchRefiner, RefinerConfig, RefinerKind, SignalDomain};
use pulsebench::regressor::{train_e, write_predictions, ETrainConfig, Prediction};
use pulsebench::roi::{iou, write_labels, RoiLabel, RoiTrainConfig};
use pulsebench::synth::{
    clip_location, gen_dataset, read_manifest, ClipFile, DatasetSpec, FrameSource, ManifestRow, SceneDefaults,
};

#[derive(Parser)]
#[command(name = "pulsebench", version, about = "Remote heart-rate estimation from face video")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Base seed for every random choice.
    #[arg(long, global = true, env = "PULSEBENCH_SEED", default_value_t = 0)]
    seed: u64,
    /// JSON configuration file (pipeline, scene and training settings).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the result as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads. Computation is single-threaded; other values are
    /// accepted for compatibility and ignored.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Train one model.
    Train {
        #[command(subcommand)]
        what: TrainCommand,
    },
    /// Estimate heart rates for the clips of a manifest (or one clip).
    Estimate(EstimateArgs),
    /// K-fold cross-validated evaluation on a manifest.
    Eval(EvalArgs),
    /// Time the pipeline on one clip.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 90)]
    clips: usize,
    #[arg(long, default_value_t = 50.0)]
    hr_min: f64,
    #[arg(long, default_value_t = 110.0)]
    hr_max: f64,
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    /// Per-pixel sensor noise sd (overrides the configured scene).
    #[arg(long)]
    noise: Option<f64>,
    /// Also write RoI label files (`<clip>.roi.json`).
    #[arg(long)]
    labels: bool,
}

#[derive(Subcommand)]
enum TrainCommand {
    /// RoI localizer R on synthetic single frames.
    Roi(CorpusArgs),
    /// Learned extractor S on synthetic RoI patches.
    S(CorpusArgs),
    /// Adversarial refiner pair (G1/D1 on patches, G2/D2 on signals).
    Refiner(RefinerArgs),
    /// Heart-rate regressor E on the signals of a manifest.
    E(TrainEArgs),
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    frames: usize,
    #[arg(long)]
    epochs: Option<usize>,
    /// Extraction strategy: A, B or C<h>x<w> (S only).
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RefinerTarget {
    Patch,
    Signal,
}

#[derive(Args)]
struct RefinerArgs {
    #[arg(long, value_enum)]
    kind: RefinerTarget,
    /// Generator weights output.
    #[arg(long)]
    out: PathBuf,
    /// Discriminator weights output.
    #[arg(long)]
    disc_out: Option<PathBuf>,
    /// Clips providing clean signals (signal refiner).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Corpus frames providing clean patches (patch refiner).
    #[arg(long, default_value_t = 2000)]
    frames: usize,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    roi_model: Option<PathBuf>,
    #[arg(long)]
    s_model: Option<PathBuf>,
    #[arg(long)]
    g1_model: Option<PathBuf>,
    #[arg(long)]
    g2_model: Option<PathBuf>,
    #[arg(long)]
    e_model: Option<PathBuf>,
    /// Use the closed-form extractor instead of S.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct TrainEArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Train on G2-refined signals.
    #[arg(long)]
    refine: bool,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long, conflicts_with = "clip")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    clip: Option<PathBuf>,
    /// Apply G2 to the color signal.
    #[arg(long, overrides_with = "no_refine")]
    refine: bool,
    #[arg(long = "no-refine")]
    no_refine: bool,
    /// Predictions CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 3)]
    folds: usize,
    /// Train a G2 per fold and evaluate on refined signals.
    #[arg(long)]
    refine: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    clip: PathBuf,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long)]
    refine: bool,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    pipeline: PipelineConfig,
    scene: SceneDefaults,
    roi: RoiTrainConfig,
    s: STrainConfig,
    e: ETrainConfig,
    refiner: Option<RefinerConfig>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(FileConfig::default()),
    }
}

fn apply_models(cfg: &mut PipelineConfig, m: &ModelArgs) -> Result<()> {
    if let Some(s) = &m.strategy {
        cfg.strategy = StrategyConfig::parse(s)?;
    }
    let paths = &mut cfg.models;
    for (slot, arg) in [
        (&mut paths.roi, &m.roi_model),
        (&mut paths.s, &m.s_model),
        (&mut paths.g1, &m.g1_model),
        (&mut paths.g2, &m.g2_model),
        (&mut paths.e, &m.e_model),
    ] {
        if arg.is_some() {
            *slot = arg.clone();
        }
    }
    if m.oracle {
        cfg.extractor = ExtractorKind::Oracle;
    }
    if m.g1_model.is_some() {
        cfg.refiners.g1 = true;
    }
    Ok(())
}

fn emit(json: bool, value: serde_json::Value, text: String) {
    if json {
        println!("{value}");
    } else {
        println!("{text}");
    }
}

fn manifest_clips(manifest: &Path) -> Result<Vec<(ManifestRow, ClipFile)>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|row| {
            let f = ClipFile::open(clip_location(manifest, &row))?;
            Ok((row, f))
        })
        .collect()
}

/// Scene of the dataset a manifest belongs to, when recorded next to it.
fn dataset_scene(manifest: &Path) -> Option<SceneDefaults> {
    let p = manifest.parent()?.join("dataset.json");
    let spec: DatasetSpec = serde_json::from_slice(&fs::read(p).ok()?).ok()?;
    Some(spec.scene)
}

fn clean_signal(manifest: &Path, row: &ManifestRow, clip: &ClipFile, strategy: StrategyConfig) -> Result<ColorSignal> {
    match truth_signal(clip.meta(), strategy) {
        Ok(s) => Ok(s),
        Err(_) => {
            let scene = dataset_scene(manifest).context("block signals need the dataset's dataset.json")?;
            let clean = row.synth(&SceneDefaults { noise_sigma: 0.0, ..scene })?;
            Ok(oracle_signal(&clean, strategy)?)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if g.threads == 0 {
        bail!("--threads must be at least 1");
    }
    if g.threads > 1 {
        warn!("running on one thread; --threads {} ignored", g.threads);
    }
    let mut fc = load_config(g.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => {
            if let Some(n) = a.noise {
                fc.scene.noise_sigma = n;
            }
            let spec = DatasetSpec {
                n_clips: a.clips,
                hr_range: (a.hr_min, a.hr_max),
                duration_s: a.duration,
                scene: fc.scene,
                seed: g.seed,
            };
            let rows = gen_dataset(&spec, &a.out)?;
            if a.labels {
                for row in &rows {
                    let clip = ClipFile::open(a.out.join(&row.clip_path))?;
                    let labels: Vec<RoiLabel> =
                        clip.meta().truth_roi.iter().enumerate().map(|(i, b)| RoiLabel::new(i, b)).collect();
                    write_labels(a.out.join(format!("{}.roi.json", row.clip_id())), &labels)?;
                }
            }
            emit(
                g.json,
                json!({ "clips": rows.len(), "manifest": a.out.join("manifest.json") }),
                format!("wrote {} clips to {}", rows.len(), a.out.display()),
            );
        }
        Command::Train { what } => train(what, g, &mut fc)?,
        Command::Estimate(a) => {
            apply_models(&mut fc.pipeline, &a.models)?;
            fc.pipeline.refiners.g2 = a.refine && !a.no_refine;
            let p = Pipeline::new(fc.pipeline.clone(), Models::load(&fc.pipeline, true)?)?;
            let clips: Vec<(String, f64, Box<dyn FrameSource>)> = match (&a.manifest, &a.clip) {
                (Some(m), _) => manifest_clips(m)?
                    .into_iter()
                    .map(|(r, f)| (r.clip_id(), r.truth_hr_bpm, Box::new(f) as Box<dyn FrameSource>))
                    .collect(),
                (None, Some(c)) => {
                    let f = ClipFile::open(c)?;
                    let id = c.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    vec![(id, f.meta().truth_hr_bpm, Box::new(f))]
                }
                (None, None) => bail!("give --manifest or --clip"),
            };
            let mut preds = Vec::new();
            for (id, truth, src) in &clips {
                let est = p.estimate(src.as_ref())?;
                if est.hr.out_of_band {
                    warn!("{id}: estimate {:.1} bpm clamped to {:.1}", est.hr.raw_bpm, est.hr.bpm);
                }
                preds.push(Prediction {
                    clip_id: id.clone(),
                    truth_bpm: *truth,
                    pred_bpm: est.hr.bpm,
                    fold: 0,
                });
            }
            if let Some(out) = &a.out {
                write_predictions(out, &preds)?;
            }
            let est: Vec<f64> = preds.iter().map(|p| p.pred_bpm).collect();
            let tru: Vec<f64> = preds.iter().map(|p| p.truth_bpm).collect();
            let stats = if preds.len() >= 2 { Some(error_stats(&est, &tru)?) } else { None };
            let mut text: Vec<String> =
                preds.iter().map(|p| format!("{}\t{:.2}\t(truth {:.2})", p.clip_id, p.pred_bpm, p.truth_bpm)).collect();
            if let Some(m) = &stats {
                text.push(format!("rmse {:.3} bpm over {} clips", m.rmse_d, m.n));
            }
            emit(g.json, json!({ "predictions": preds, "metrics": stats }), text.join("\n"));
        }
        Command::Eval(a) => {
            apply_models(&mut fc.pipeline, &a.models)?;
            let cfg = fc.pipeline.clone();
            let p = Pipeline::new(cfg.clone(), Models::load(&cfg, false)?)?;
            let mut data = Vec::new();
            for (row, clip) in manifest_clips(&a.manifest)? {
                let signal = p.signal(&clip)?;
                let clean = if a.refine {
                    Some(clean_signal(&a.manifest, &row, &clip, cfg.strategy)?)
                } else {
                    None
                };
                info!("extracted {}", row.clip_id());
                data.push(ClipData {
                    id: row.clip_id(),
                    truth_bpm: row.truth_hr_bpm,
                    signal,
                    clean,
                });
            }
            let opts = EvalOptions {
                folds: a.folds,
                seed: g.seed,
                t: cfg.t,
                e: ETrainConfig { seed: g.seed, ..fc.e },
                g2: a.refine.then(|| fc.refiner.clone().unwrap_or_else(RefinerConfig::signal_default)),
            };
            let out = cross_validate(&data, &opts)?;
            if let Some(path) = &a.out {
                write_predictions(path, &out.cv.predictions)?;
            }
            let m = &out.cv.pooled;
            emit(
                g.json,
                serde_json::to_value(&out)?,
                format!(
                    "n {}  m_d {:.3}  sd_d {:.3}  rmse {:.3}  me {:.4}  r {}{}",
                    m.n,
                    m.m_d,
                    m.sd_d,
                    m.rmse_d,
                    m.me_d,
                    m.r.map(|r| format!("{r:.4}")).unwrap_or_else(|| "undefined".into()),
                    out.mean_denoise_ratio().map(|r| format!("  denoise ratio {r:.3}")).unwrap_or_default()
                ),
            );
        }
        Command::Bench(a) => {
            apply_models(&mut fc.pipeline, &a.models)?;
            fc.pipeline.refiners.g2 = a.refine;
            let with_e = fc.pipeline.models.e.is_some();
            let p = Pipeline::new(fc.pipeline.clone(), Models::load(&fc.pipeline, with_e)?)?;
            let clip = ClipFile::open(&a.clip)?;
            let r = bench(&p, &clip, a.reps)?;
            let stages: Vec<String> = r.stage_ms.iter().map(|(k, v)| format!("{k} {v:.1} ms")).collect();
            emit(
                g.json,
                serde_json::to_value(&r)?,
                format!(
                    "{} frames in {:.3} s: {:.1} fps (median of {})\n{}",
                    r.frames,
                    r.wall_seconds,
                    r.fps,
                    r.repetitions,
                    stages.join(", ")
                ),
            );
        }
    }
    Ok(())
}

fn train(what: TrainCommand, g: &Global, fc: &mut FileConfig) -> Result<()> {
    match what {
        TrainCommand::Roi(a) => {
            let spec = CorpusSpec {
                frames: a.frames,
                seed: g.seed,
                ..Default::default()
            };
            let corpus = build_corpus(&fc.scene, &spec, None)?;
            let n_fit = corpus.boxes.len() * 9 / 10;
            let mut fit = corpus.clone();
            fit.roi_features.truncate(n_fit);
            fit.boxes.truncate(n_fit);
            let cfg = RoiTrainConfig {
                seed: g.seed,
                epochs: a.epochs.unwrap_or(fc.roi.epochs),
                ..fc.roi.clone()
            };
            let model = train_r_on(&fit, &cfg)?;
            let (w, h) = (fc.scene.frame_w, fc.scene.frame_h);
            let held: Vec<f64> = corpus.roi_features[n_fit..]
                .iter()
                .zip(&corpus.boxes[n_fit..])
                .map(|(f, b)| Ok(iou(&model.detect_features(f)?, b, w, h)))
                .collect::<Result<_>>()?;
            let mean_iou = held.iter().sum::<f64>() / held.len().max(1) as f64;
            model.save(&a.out)?;
            emit(
                g.json,
                json!({ "model": a.out, "held_out_frames": held.len(), "mean_iou": mean_iou }),
                format!("R saved to {}; held-out mean IoU {mean_iou:.4}", a.out.display()),
            );
        }
        TrainCommand::S(a) => {
            let strategy = match &a.strategy {
                Some(s) => StrategyConfig::parse(s)?,
                None => fc.pipeline.strategy,
            };
            let spec = CorpusSpec {
                frames: a.frames,
                seed: g.seed,
                ..Default::default()
            };
            let corpus = build_corpus(&fc.scene, &spec, Some(strategy))?;
            let cfg = STrainConfig {
                seed: g.seed,
                epochs: a.epochs.unwrap_or(fc.s.epochs),
                ..fc.s.clone()
            };
            let model = train_s_on(&corpus, &cfg)?;
            model.save(&a.out)?;
            emit(
                g.json,
                json!({ "model": a.out, "strategy": strategy.label() }),
                format!("S ({}) saved to {}", strategy.label(), a.out.display()),
            );
        }
        TrainCommand::Refiner(a) => {
            let kind = match a.kind {
                RefinerTarget::Patch => RefinerKind::Patch,
                RefinerTarget::Signal => RefinerKind::Signal,
            };
            let mut cfg = fc.refiner.clone().unwrap_or_else(|| match kind {
                RefinerKind::Patch => RefinerConfig::patch_default(),
                RefinerKind::Signal => RefinerConfig::signal_default(),
            });
            cfg.seed = g.seed;
            if let Some(s) = a.sigma {
                cfg.sigma = s;
            }
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            let (pair, domain) = match kind {
                RefinerKind::Patch => {
                    let spec = CorpusSpec {
                        frames: a.frames,
                        sigmas: vec![0.0],
                        seed: g.seed,
                        ..Default::default()
                    };
                    let corpus = build_corpus(&fc.scene, &spec, Some(StrategyConfig::A))?;
                    let rows = corpus.s_inputs.concat();
                    let pair = train_gan(&rows, pulsebench::refiner::PATCH_DIM, NoiseModel::Additive, kind, &cfg)?;
                    PatchRefiner::from_pair(&pair)?.save(&a.out)?;
                    (pair, serde_json::Value::Null)
                }
                RefinerKind::Signal => {
                    let manifest = a.manifest.as_ref().context("the signal refiner needs --manifest")?;
                    let strategy = match &a.strategy {
                        Some(s) => StrategyConfig::parse(s)?,
                        None => fc.pipeline.strategy,
                    };
                    let clean = manifest_clips(manifest)?
                        .iter()
                        .map(|(row, clip)| clean_signal(manifest, row, clip, strategy))
                        .collect::<Result<Vec<_>>>()?;
                    let domain = SignalDomain::with_defaults(strategy);
                    let (refiner, pair) = train_g2(&clean, domain, &cfg)?;
                    refiner.save(&a.out)?;
                    (pair, serde_json::to_value(domain)?)
                }
            };
            if let Some(d) = &a.disc_out {
                pair.save(&a.out, d, domain)?;
            }
            for w in &pair.history.warnings {
                warn!("{w}");
            }
            let last = pair.history.steps.last().cloned();
            emit(
                g.json,
                json!({ "model": a.out, "steps": pair.history.steps.len(), "last": last, "warnings": pair.history.warnings }),
                format!(
                    "{} saved to {} after {} steps",
                    kind.generator_role(),
                    a.out.display(),
                    pair.history.steps.len()
                ),
            );
        }
        TrainCommand::E(a) => {
            apply_models(&mut fc.pipeline, &a.models)?;
            fc.pipeline.refiners.g2 = a.refine;
            let p = Pipeline::new(fc.pipeline.clone(), Models::load(&fc.pipeline, false)?)?;
            let mut items = Vec::new();
            for (row, clip) in manifest_clips(&a.manifest)? {
                let s = p.signal(&clip)?;
                let s = p.refine(&s)?.unwrap_or(s);
                items.push((s, row.truth_hr_bpm));
            }
            let cfg = ETrainConfig {
                seed: g.seed,
                epochs: a.epochs.unwrap_or(fc.e.epochs),
                ..fc.e.clone()
            };
            let (model, h) = train_e(&items, fc.pipeline.t, &cfg)?;
            model.save(&a.out)?;
            let fitted: Vec<f64> = items.iter().map(|(s, _)| Ok(model.estimate_hr(s)?.bpm)).collect::<Result<_>>()?;
            let truths: Vec<f64> = items.iter().map(|(_, y)| *y).collect();
            let stats = error_stats(&fitted, &truths)?;
            emit(
                g.json,
                json!({ "model": a.out, "train_rmse": stats.rmse_d, "final_loss": h.last() }),
                format!("E saved to {}; training rmse {:.3} bpm", a.out.display(), stats.rmse_d),
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
