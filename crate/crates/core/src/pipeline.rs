//! End-to-end composition: frames → R → crop → [G1] → S (or oracle) →
//! [G2] → E, plus training orchestration, cross-validated evaluation and
//! the throughput bench.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{
    oracle_features, s_input, train_s, ColorSignal, SModel, STrainConfig, Strategy,
    StrategyConfig,
};
use crate::frame::Patch;
use crate::refiner::{
    add_noise, train_gan, GanPair, NoiseModel, PatchRefiner, RefinerConfig, RefinerKind,
    SignalDomain, SignalRefiner,
};
use crate::regressor::{kfold_cv, train_e, CvReport, EModel, ETrainConfig, HrEstimate, DEFAULT_T};
use crate::roi::{crop_resize, roi_features, train_roi, RoiBox, RoiModel, RoiTrainConfig};
use crate::synth::{mix_seed, roi_corpus_frame, ClipMeta, FrameSource, SceneDefaults, DEFAULT_FPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Oracle,
    #[default]
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Refiners {
    pub g1: bool,
    pub g2: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelPaths {
    pub roi: Option<PathBuf>,
    pub s: Option<PathBuf>,
    pub g1: Option<PathBuf>,
    pub g2: Option<PathBuf>,
    pub e: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub strategy: StrategyConfig,
    pub refiners: Refiners,
    pub extractor: ExtractorKind,
    pub models: ModelPaths,
    pub t: usize,
    pub fps: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyConfig::A,
            refiners: Refiners::default(),
            extractor: ExtractorKind::default(),
            models: ModelPaths::default(),
            t: DEFAULT_T,
            fps: DEFAULT_FPS,
        }
    }
}

/// Trained components; `None` where a stage is disabled or not needed.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub roi: Option<RoiModel>,
    pub s: Option<SModel>,
    pub g1: Option<PatchRefiner>,
    pub g2: Option<SignalRefiner>,
    pub e: Option<EModel>,
}

fn need<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::MissingModel(format!("no path configured for {what}")))
}

impl Models {
    /// Loads what `cfg` needs: R always, S for the learned extractor, G1/G2
    /// when enabled and E when `with_e`.
    pub fn load(cfg: &PipelineConfig, with_e: bool) -> Result<Self> {
        let m = &cfg.models;
        Ok(Self {
            roi: Some(RoiModel::load(need(&m.roi, "R")?)?),
            s: match cfg.extractor {
                ExtractorKind::Learned => Some(SModel::load(need(&m.s, "S")?)?),
                ExtractorKind::Oracle => None,
            },
            g1: if cfg.refiners.g1 { Some(PatchRefiner::load(need(&m.g1, "G1")?)?) } else { None },
            g2: if cfg.refiners.g2 { Some(SignalRefiner::load(need(&m.g2, "G2")?)?) } else { None },
            e: if with_e { Some(EModel::load(need(&m.e, "E")?)?) } else { None },
        })
    }
}

/// Accumulated wall time per stage.
#[derive(Debug, Clone, Default)]
pub struct StageTimes(pub BTreeMap<&'static str, Duration>);

impl StageTimes {
    fn add(&mut self, stage: &'static str, since: Instant) -> Instant {
        let now = Instant::now();
        *self.0.entry(stage).or_default() += now - since;
        now
    }

    pub fn millis(&self) -> BTreeMap<String, f64> {
        self.0.iter().map(|(k, v)| (k.to_string(), v.as_secs_f64() * 1e3)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ClipEstimate {
    pub signal: ColorSignal,
    pub refined: Option<ColorSignal>,
    pub hr: HrEstimate,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub models: Models,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, models: Models) -> Result<Self> {
        if models.roi.is_none() {
            return Err(Error::MissingModel("R".into()));
        }
        if cfg.extractor == ExtractorKind::Learned {
            let s = models.s.as_ref().ok_or_else(|| Error::MissingModel("S".into()))?;
            if s.strategy != cfg.strategy {
                return Err(Error::InvalidArgument(format!(
                    "S extracts strategy {}, pipeline asks for {}",
                    s.strategy.label(),
                    cfg.strategy.label()
                )));
            }
        }
        if cfg.refiners.g1 && models.g1.is_none() {
            return Err(Error::MissingModel("G1".into()));
        }
        if cfg.refiners.g2 {
            let g = models.g2.as_ref().ok_or_else(|| Error::MissingModel("G2".into()))?;
            if g.domain.strategy != cfg.strategy {
                return Err(Error::InvalidArgument("G2 was trained for another strategy".into()));
            }
        }
        if let Some(e) = &models.e {
            if e.strategy != cfg.strategy {
                return Err(Error::InvalidArgument("E was trained for another strategy".into()));
            }
        }
        Ok(Self { cfg, models })
    }

    /// Color signal of a clip (before G2).
    pub fn signal(&self, src: &dyn FrameSource) -> Result<ColorSignal> {
        self.signal_timed(src, &mut StageTimes::default())
    }

    pub fn signal_timed(&self, src: &dyn FrameSource, times: &mut StageTimes) -> Result<ColorSignal> {
        let roi = self.models.roi.as_ref().ok_or_else(|| Error::MissingModel("R".into()))?;
        let n = src.n_frames();
        let strategy = self.cfg.strategy;
        let mut rows = Vec::with_capacity(n * crate::extract::S_INPUT_DIM);
        let mut columns = Vec::with_capacity(n);
        for t in 0..n {
            let mut now = Instant::now();
            let frame = src.frame(t)?;
            now = times.add("decode", now);
            let b = roi.detect_roi(&frame)?;
            now = times.add("roi", now);
            let mut patch = crop_resize(&frame, &b)?;
            now = times.add("crop", now);
            if let Some(g1) = self.models.g1.as_ref().filter(|_| self.cfg.refiners.g1) {
                patch = g1.refine(&patch)?;
                now = times.add("g1", now);
            }
            match self.cfg.extractor {
                ExtractorKind::Oracle => columns.push(oracle_features(&patch, &strategy)?),
                ExtractorKind::Learned => rows.extend(s_input(&patch)),
            }
            times.add("extract", now);
        }
        if self.cfg.extractor == ExtractorKind::Learned {
            let now = Instant::now();
            let s = self.models.s.as_ref().ok_or_else(|| Error::MissingModel("S".into()))?;
            let out = s.features_batch(&rows)?;
            columns = out.chunks(strategy.channels()).map(<[f64]>::to_vec).collect();
            times.add("extract", now);
        }
        ColorSignal::from_columns(&columns, src.meta().fps, strategy)
    }

    pub fn refine(&self, sig: &ColorSignal) -> Result<Option<ColorSignal>> {
        match self.models.g2.as_ref().filter(|_| self.cfg.refiners.g2) {
            Some(g2) => Ok(Some(g2.refine(sig)?)),
            None => Ok(None),
        }
    }

    pub fn estimate(&self, src: &dyn FrameSource) -> Result<ClipEstimate> {
        self.estimate_timed(src, &mut StageTimes::default())
    }

    pub fn estimate_timed(&self, src: &dyn FrameSource, times: &mut StageTimes) -> Result<ClipEstimate> {
        let e = self.models.e.as_ref().ok_or_else(|| Error::MissingModel("E".into()))?;
        let signal = self.signal_timed(src, times)?;
        let now = Instant::now();
        let refined = self.refine(&signal)?;
        let now = if refined.is_some() { times.add("g2", now) } else { now };
        let hr = e.estimate_hr(refined.as_ref().unwrap_or(&signal))?;
        times.add("regress", now);
        Ok(ClipEstimate { signal, refined, hr })
    }
}

// ---------------------------------------------------------------------------
// clean reference signals

/// Noise-free signal of a clip from its stored truth (strategies A and B).
pub fn truth_signal(meta: &ClipMeta, strategy: StrategyConfig) -> Result<ColorSignal> {
    let columns: Vec<Vec<f64>> = match strategy.strategy {
        Strategy::A => meta.truth_signal.iter().map(|s| vec![s[1]]).collect(),
        Strategy::B => meta.truth_signal.iter().map(|s| s.to_vec()).collect(),
        Strategy::C => {
            return Err(Error::InvalidArgument(
                "stored truth holds whole-region means only; render a clean clip for block signals".into(),
            ))
        }
    };
    ColorSignal::from_columns(&columns, meta.fps, strategy)
}

/// Oracle features at the true RoI of every frame.
pub fn oracle_signal(src: &dyn FrameSource, strategy: StrategyConfig) -> Result<ColorSignal> {
    let meta = src.meta();
    let columns = (0..src.n_frames())
        .map(|t| oracle_features(&crop_resize(&src.frame(t)?, &meta.truth_roi[t])?, &strategy))
        .collect::<Result<Vec<_>>>()?;
    ColorSignal::from_columns(&columns, meta.fps, strategy)
}

// ---------------------------------------------------------------------------
// training

/// Single-frame training material for R and S.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub roi_features: Vec<Vec<f64>>,
    pub boxes: Vec<RoiBox>,
    pub s_inputs: Vec<Vec<f64>>,
    pub s_targets: Vec<Vec<f64>>,
    pub strategy: Option<StrategyConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub frames: usize,
    /// Sensor noise levels, cycled over the frames.
    pub sigmas: Vec<f64>,
    /// Crop jitter for S patches as a fraction of the box size.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            frames: 2000,
            sigmas: vec![0.0, 0.01, 0.02, 0.05],
            jitter: 0.03,
            seed: 0,
        }
    }
}

/// Renders `spec.frames` corpus frames; S material is only built when a
/// strategy is given.
pub fn build_corpus(d: &SceneDefaults, spec: &CorpusSpec, strategy: Option<StrategyConfig>) -> Result<Corpus> {
    if spec.frames == 0 || spec.sigmas.is_empty() {
        return Err(Error::InvalidArgument("corpus needs frames and at least one noise level".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0xc0c0));
    let mut c = Corpus {
        strategy,
        ..Default::default()
    };
    for i in 0..spec.frames {
        let scene = SceneDefaults {
            noise_sigma: spec.sigmas[i % spec.sigmas.len()],
            ..d.clone()
        };
        let (frame, b) = roi_corpus_frame(&scene, mix_seed(spec.seed, i as u64))?;
        c.roi_features.push(roi_features(&frame));
        c.boxes.push(b);
        if let Some(st) = strategy {
            let j = spec.jitter;
            let jb = RoiBox::clamped(
                b.cx + rng.gen_range(-j..=j) * b.w,
                b.cy + rng.gen_range(-j..=j) * b.h,
                b.w * (1.0 + rng.gen_range(-j..=j)),
                b.h * (1.0 + rng.gen_range(-j..=j)),
            );
            let patch = crop_resize(&frame, &jb)?;
            c.s_inputs.push(s_input(&patch));
            c.s_targets.push(oracle_features(&patch, &st)?);
        }
    }
    Ok(c)
}

pub fn train_r_on(c: &Corpus, cfg: &RoiTrainConfig) -> Result<RoiModel> {
    let (m, h) = train_roi(&c.roi_features, &c.boxes, cfg)?;
    info!("R: loss {:?} -> {:?}", h.initial(), h.last());
    Ok(m)
}

pub fn train_s_on(c: &Corpus, cfg: &STrainConfig) -> Result<SModel> {
    let st = c
        .strategy
        .ok_or_else(|| Error::InvalidArgument("corpus was built without S material".into()))?;
    let (m, h) = train_s(&c.s_inputs, &c.s_targets, st, cfg)?;
    info!("S: loss {:?} -> {:?}", h.initial(), h.last());
    Ok(m)
}

/// Trains G2 (and D2) on clean signals: every window at stride 1 is one
/// training row; the generator learns to undo additive noise of the
/// configured σ.
pub fn train_g2(clean: &[ColorSignal], domain: SignalDomain, cfg: &RefinerConfig) -> Result<(SignalRefiner, GanPair)> {
    let mut rows = Vec::new();
    for s in clean {
        rows.extend(domain.slices(s, 1)?);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no clean signals for G2".into()));
    }
    let pair = train_gan(&rows, domain.dim(), NoiseModel::Additive, RefinerKind::Signal, cfg)?;
    for w in &pair.history.warnings {
        warn!("G2: {w}");
    }
    Ok((SignalRefiner::from_pair(&pair, domain)?, pair))
}

fn centered_norm_diff(a: &ColorSignal, b: &ColorSignal, gain: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..a.channels {
        let (ra, rb) = (a.row(i), b.row(i));
        let ma = ra.iter().sum::<f64>() / ra.len() as f64;
        let mb = rb.iter().sum::<f64>() / rb.len() as f64;
        s += ra.iter().zip(rb).map(|(x, y)| ((x - ma) - (y - mb)).powi(2)).sum::<f64>();
    }
    gain * s.sqrt()
}

/// `‖G2(X̃) − X‖ / ‖X̃ − X‖` for `X̃ = X + σ` noise in the refiner's domain,
/// with row means removed from both sides.
pub fn denoise_ratio(g2: &SignalRefiner, clean: &ColorSignal, sigma: f64, seed: u64) -> Result<f64> {
    let k = g2.domain.gain();
    let noise = add_noise(&vec![0.0; clean.values.len()], sigma / k, seed)?;
    let noisy = ColorSignal::from_rows(
        clean.values.iter().zip(&noise).map(|(x, z)| x + z).collect(),
        clean.channels,
        clean.fps,
        clean.strategy,
    )?;
    let refined = g2.refine(&noisy)?;
    Ok(centered_norm_diff(&refined, clean, k) / centered_norm_diff(&noisy, clean, k))
}

// ---------------------------------------------------------------------------
// cross-validated evaluation

/// One clip's extracted signal, its clean reference and its label.
#[derive(Debug, Clone)]
pub struct ClipData {
    pub id: String,
    pub truth_bpm: f64,
    pub signal: ColorSignal,
    pub clean: Option<ColorSignal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub folds: usize,
    pub seed: u64,
    pub t: usize,
    pub e: ETrainConfig,
    /// Train a G2 per fold on the training clips' clean signals.
    pub g2: Option<RefinerConfig>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            folds: 3,
            seed: 0,
            t: DEFAULT_T,
            e: ETrainConfig::default(),
            g2: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub cv: CvReport,
    /// Per held-out clip `‖G2(X̃) − X‖ / ‖X̃ − X‖` at the refiner's σ.
    pub denoise_ratios: Vec<f64>,
    pub refiner_warnings: Vec<String>,
}

impl EvalOutcome {
    pub fn mean_denoise_ratio(&self) -> Option<f64> {
        (!self.denoise_ratios.is_empty())
            .then(|| self.denoise_ratios.iter().sum::<f64>() / self.denoise_ratios.len() as f64)
    }
}

/// K-fold evaluation: per fold, optionally G2 on the training clips'
/// clean signals, then E on the (refined) training signals; held-out clips
/// are only ever passed through the fitted models.
pub fn cross_validate(clips: &[ClipData], opts: &EvalOptions) -> Result<EvalOutcome> {
    let ids: Vec<String> = clips.iter().map(|c| c.id.clone()).collect();
    let truths: Vec<f64> = clips.iter().map(|c| c.truth_bpm).collect();
    let mut ratios = Vec::new();
    let mut warnings = Vec::new();
    let cv = kfold_cv(&ids, &truths, opts.folds, opts.seed, |fold, train, test| {
        let started = Instant::now();
        let g2 = match &opts.g2 {
            Some(rcfg) => {
                let strategy = clips[train[0]].signal.strategy;
                let clean = train
                    .iter()
                    .map(|&i| {
                        clips[i]
                            .clean
                            .clone()
                            .ok_or_else(|| Error::InvalidArgument(format!("clip {} has no clean signal", clips[i].id)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let cfg = RefinerConfig {
                    seed: mix_seed(rcfg.seed, fold as u64),
                    ..rcfg.clone()
                };
                let (g, pair) = train_g2(&clean, SignalDomain::with_defaults(strategy), &cfg)?;
                warnings.extend(pair.history.warnings.iter().map(|w| format!("fold {fold}: {w}")));
                for &i in test {
                    if let Some(c) = &clips[i].clean {
                        ratios.push(denoise_ratio(&g, c, cfg.sigma, mix_seed(opts.seed ^ 0xa11, i as u64))?);
                    }
                }
                Some(g)
            }
            None => None,
        };
        let prep = |i: usize| -> Result<ColorSignal> {
            match &g2 {
                Some(g) => g.refine(&clips[i].signal),
                None => Ok(clips[i].signal.clone()),
            }
        };
        let items = train
            .iter()
            .map(|&i| Ok((prep(i)?, clips[i].truth_bpm)))
            .collect::<Result<Vec<_>>>()?;
        let ecfg = ETrainConfig {
            seed: mix_seed(opts.e.seed, fold as u64),
            ..opts.e.clone()
        };
        let (e, _) = train_e(&items, opts.t, &ecfg)?;
        let est = test
            .iter()
            .map(|&i| Ok(e.estimate_hr(&prep(i)?)?.bpm))
            .collect::<Result<Vec<_>>>();
        info!("fold {fold}: {} train / {} test in {:.1?}", train.len(), test.len(), started.elapsed());
        est
    })?;
    Ok(EvalOutcome {
        cv,
        denoise_ratios: ratios,
        refiner_warnings: warnings,
    })
}

// ---------------------------------------------------------------------------
// bench

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub repetitions: usize,
    /// Median wall time of one pass over the clip.
    pub wall_seconds: f64,
    pub fps: f64,
    /// Stage latencies of the median pass, in ms.
    pub stage_ms: BTreeMap<String, f64>,
}

impl BenchReport {
    pub fn stage_sum_ms(&self) -> f64 {
        self.stage_ms.values().sum()
    }
}

/// Times full passes over `src` (frame decode included): one warm-up pass,
/// then the median of `repetitions` (at least 3).
pub fn bench(p: &Pipeline, src: &dyn FrameSource, repetitions: usize) -> Result<BenchReport> {
    let reps = repetitions.max(3);
    let pass = |times: &mut StageTimes| -> Result<()> {
        if p.models.e.is_some() {
            p.estimate_timed(src, times).map(|_| ())
        } else {
            let s = p.signal_timed(src, times)?;
            let now = Instant::now();
            if p.refine(&s)?.is_some() {
                times.add("g2", now);
            }
            Ok(())
        }
    };
    pass(&mut StageTimes::default())?;
    let mut runs = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut times = StageTimes::default();
        let t0 = Instant::now();
        pass(&mut times)?;
        runs.push((t0.elapsed().as_secs_f64(), times));
    }
    runs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (wall, times) = &runs[reps / 2];
    let frames = src.n_frames();
    Ok(BenchReport {
        frames,
        repetitions: reps,
        wall_seconds: *wall,
        fps: frames as f64 / wall,
        stage_ms: times.millis(),
    })
}

/// Convenience for tests and tools: patches at the true RoI.
pub fn truth_patches(src: &dyn FrameSource) -> Result<Vec<Patch>> {
    (0..src.n_frames())
        .map(|t| crop_resize(&src.frame(t)?, &src.meta().truth_roi[t]))
        .collect()
}
