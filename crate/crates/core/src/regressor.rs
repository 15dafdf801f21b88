//! E: color signal → average heart rate, plus the K-fold driver.
//!
//! Each signal row passes through a fixed spectral stage (cumulative
//! in-band power, sampled at T frequencies) before per-feature z-scoring and
//! the 512/128/1 network.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{ColorSignal, StrategyConfig};
use crate::metrics::{error_stats, MetricsReport};
use crate::nn::{
    decode_params, encode_params, fit_mse, FitConfig, FitHistory, Network, SgdConfig,
    Standardizer, Tensor,
};
use crate::spectral::detrend;

pub const DEFAULT_T: usize = 660;
pub const ROLE: &str = "E";
pub const HR_MIN: f64 = 30.0;
pub const HR_MAX: f64 = 220.0;

/// Fixed signal → feature map: per row, the normalized cumulative power of
/// the detrended, Hann-windowed row (zero-padded to 2T) between `lo_hz` and
/// `hi_hz`, linearly interpolated at T evenly spaced frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralStage {
    pub lo_hz: f64,
    pub hi_hz: f64,
}

impl Default for SpectralStage {
    fn default() -> Self {
        Self { lo_hz: 0.7, hi_hz: 4.0 }
    }
}

impl SpectralStage {
    pub fn row_features(&self, x: &[f64], fps: f64) -> Result<Vec<f64>> {
        let t = x.len();
        if !(self.lo_hz > 0.0 && self.lo_hz < self.hi_hz && self.hi_hz <= fps / 2.0) {
            return Err(Error::InvalidArgument(format!(
                "band [{}, {}] Hz at {fps} fps",
                self.lo_hz, self.hi_hz
            )));
        }
        let n = 2 * t;
        let mut buf: Vec<Complex<f64>> = detrend(x)
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / (t - 1).max(1) as f64).cos();
                Complex::new(v * w, 0.0)
            })
            .collect();
        buf.resize(n, Complex::new(0.0, 0.0));
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let df = fps / n as f64;
        let k0 = (self.lo_hz / df).ceil() as usize;
        let k1 = ((self.hi_hz / df).floor() as usize).min(n / 2);
        if k1 <= k0 {
            return Err(Error::InvalidArgument("band holds fewer than two bins".into()));
        }
        let power: Vec<f64> = buf[k0..=k1].iter().map(|c| c.norm_sqr()).collect();
        let total: f64 = power.iter().sum();
        // cdf[j] = fraction of in-band power at bins ≤ k0 + j
        let mut cdf = Vec::with_capacity(power.len());
        let mut run = 0.0;
        for p in &power {
            run += p;
            cdf.push(if total > 0.0 { run / total } else { 0.0 });
        }
        let span = (k1 - k0) as f64 * df;
        Ok((0..t)
            .map(|j| {
                let pos = (j as f64 + 0.5) / t as f64 * span / df;
                let i = (pos.floor() as usize).min(cdf.len() - 2);
                let a = pos - i as f64;
                cdf[i] * (1.0 - a) + cdf[i + 1] * a
            })
            .collect())
    }

    pub fn features(&self, sig: &ColorSignal) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(sig.values.len());
        for i in 0..sig.channels {
            out.extend(self.row_features(sig.row(i), sig.fps)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ETrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub input_noise: f64,
    pub seed: u64,
    pub stage: SpectralStage,
}

impl Default for ETrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.00005,
            epochs: 300,
            batch_size: 32,
            input_noise: 0.0,
            seed: 0,
            stage: SpectralStage::default(),
        }
    }
}

pub fn build_e(input_dim: usize, seed: u64) -> Result<Network> {
    Network::builder(input_dim, seed)
        .dense(512)
        .batchnorm()
        .relu()
        .dense(128)
        .batchnorm()
        .relu()
        .dense(1)
        .build()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EMeta {
    strategy: StrategyConfig,
    len: usize,
    fps: f64,
    stage: SpectralStage,
    input: Standardizer,
    target: Standardizer,
    range: (Vec<f64>, Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct EModel {
    pub net: Network,
    pub strategy: StrategyConfig,
    pub len: usize,
    pub fps: f64,
    pub stage: SpectralStage,
    input: Standardizer,
    target: Standardizer,
    /// Per-feature range of the normalized training inputs; inputs are
    /// clamped to it.
    range: (Vec<f64>, Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrEstimate {
    pub bpm: f64,
    /// Unclamped network output.
    pub raw_bpm: f64,
    pub out_of_band: bool,
}

/// Standardizer with unit sd for every feature whose spread is at least
/// 1e-6 of the widest one; flatter features are only centered.
fn zscore(x: &[f64], width: usize) -> Result<Standardizer> {
    let mut s = Standardizer::fit(x, width, 0.0)?;
    let max = s.scale.iter().cloned().fold(0.0, f64::max);
    for v in &mut s.scale {
        if *v < 1e-6 * max || *v == 0.0 {
            *v = 1.0;
        }
    }
    Ok(s)
}

fn fit_window(sig: &ColorSignal, len: usize) -> Result<ColorSignal> {
    if sig.len < len {
        return Err(Error::InvalidArgument(format!(
            "signal has {} frames, the regressor needs {len}",
            sig.len
        )));
    }
    if sig.len == len {
        Ok(sig.clone())
    } else {
        sig.window(len)
    }
}

/// Fits E on `(signal, bpm)` pairs; every signal is cut to `len` frames.
pub fn train_e(items: &[(ColorSignal, f64)], len: usize, cfg: &ETrainConfig) -> Result<(EModel, FitHistory)> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    let (strategy, fps) = (first.0.strategy, first.0.fps);
    let dim = strategy.channels() * len;
    let mut x = Vec::with_capacity(items.len() * dim);
    let mut y = Vec::with_capacity(items.len());
    for (sig, bpm) in items {
        if sig.strategy != strategy || sig.fps != fps {
            return Err(Error::Shape("training signals differ in strategy or frame rate".into()));
        }
        if !bpm.is_finite() {
            return Err(Error::NonFinite(format!("label {bpm}")));
        }
        x.extend(cfg.stage.features(&fit_window(sig, len)?)?);
        y.push(*bpm);
    }
    let input = zscore(&x, dim)?;
    let target = zscore(&y, 1)?;
    input.apply_in_place(&mut x);
    target.apply_in_place(&mut y);
    let mut range = (vec![f64::INFINITY; dim], vec![f64::NEG_INFINITY; dim]);
    for row in x.chunks(dim) {
        for (j, v) in row.iter().enumerate() {
            range.0[j] = range.0[j].min(*v);
            range.1[j] = range.1[j].max(*v);
        }
    }
    let mut net = build_e(dim, cfg.seed)?;
    let fit = FitConfig {
        sgd: SgdConfig::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)?,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed ^ 0x5eed_000e,
        input_noise: cfg.input_noise,
    };
    let history = fit_mse(&mut net, &x, &y, &fit, ROLE)?;
    Ok((
        EModel {
            net,
            strategy,
            len,
            fps,
            stage: cfg.stage,
            input,
            target,
            range,
        },
        history,
    ))
}

impl EModel {
    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Normalized network input for a signal.
    pub fn prepare(&self, sig: &ColorSignal) -> Result<Vec<f64>> {
        if sig.strategy != self.strategy || sig.channels * self.len != self.input_dim() {
            return Err(Error::Shape(format!(
                "signal {} ({} rows) vs regressor {} ({} inputs)",
                sig.strategy.label(),
                sig.channels,
                self.strategy.label(),
                self.input_dim()
            )));
        }
        let mut x = self.input.apply(&self.stage.features(&fit_window(sig, self.len)?)?)?;
        for ((v, lo), hi) in x.iter_mut().zip(&self.range.0).zip(&self.range.1) {
            *v = v.clamp(*lo, *hi);
        }
        Ok(x)
    }

    pub fn estimate_hr(&self, sig: &ColorSignal) -> Result<HrEstimate> {
        let x = self.prepare(sig)?;
        let mut out = self.net.infer(&Tensor::from_raw(vec![1, x.len()], x))?.into_data();
        self.target.invert_in_place(&mut out);
        let raw = out[0];
        if !raw.is_finite() {
            return Err(Error::NonFinite("regressor output".into()));
        }
        let bpm = raw.clamp(HR_MIN, HR_MAX);
        Ok(HrEstimate {
            bpm,
            raw_bpm: raw,
            out_of_band: bpm != raw,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_value(EMeta {
            strategy: self.strategy,
            len: self.len,
            fps: self.fps,
            stage: self.stage,
            input: self.input.clone(),
            target: self.target.clone(),
            range: self.range.clone(),
        })?;
        encode_params(&self.net, Some(ROLE), meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (net, header) = decode_params(bytes)?;
        let m: EMeta = serde_json::from_value(header.meta)
            .map_err(|e| Error::CorruptFile(format!("E metadata: {e}")))?;
        let dim = net.input_dim();
        if dim != m.strategy.channels() * m.len || m.input.width() != dim || m.range.0.len() != dim || m.range.1.len() != dim {
            return Err(Error::CorruptFile("E input width disagrees with its metadata".into()));
        }
        Ok(Self {
            net,
            strategy: m.strategy,
            len: m.len,
            fps: m.fps,
            stage: m.stage,
            input: m.input,
            target: m.target,
            range: m.range,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Fold index per item: a seeded shuffle cut into K contiguous runs.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("{k} folds over {n} items")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &item) in order.iter().enumerate() {
        fold[item] = pos * k / n;
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub clip_id: String,
    pub truth_bpm: f64,
    pub pred_bpm: f64,
    pub fold: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub predictions: Vec<Prediction>,
    pub per_fold: Vec<MetricsReport>,
    pub pooled: MetricsReport,
}

/// Runs `fit_predict(train, test)` for every fold; it must return one
/// estimate per test index, in order.
pub fn kfold_cv<F>(ids: &[String], truths: &[f64], k: usize, seed: u64, mut fit_predict: F) -> Result<CvReport>
where
    F: FnMut(usize, &[usize], &[usize]) -> Result<Vec<f64>>,
{
    if ids.len() != truths.len() {
        return Err(Error::Shape(format!("{} ids vs {} truths", ids.len(), truths.len())));
    }
    let fold = fold_assignment(ids.len(), k, seed)?;
    let mut predictions = Vec::with_capacity(ids.len());
    let mut per_fold = Vec::with_capacity(k);
    for f in 0..k {
        let train: Vec<usize> = (0..ids.len()).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..ids.len()).filter(|&i| fold[i] == f).collect();
        let est = fit_predict(f, &train, &test)?;
        if est.len() != test.len() {
            return Err(Error::Shape(format!("fold {f}: {} estimates for {} items", est.len(), test.len())));
        }
        let t: Vec<f64> = test.iter().map(|&i| truths[i]).collect();
        per_fold.push(error_stats(&est, &t)?);
        for (&i, &p) in test.iter().zip(&est) {
            predictions.push(Prediction {
                clip_id: ids[i].clone(),
                truth_bpm: truths[i],
                pred_bpm: p,
                fold: f,
            });
        }
    }
    let est: Vec<f64> = predictions.iter().map(|p| p.pred_bpm).collect();
    let tru: Vec<f64> = predictions.iter().map(|p| p.truth_bpm).collect();
    let pooled = error_stats(&est, &tru)?;
    Ok(CvReport {
        predictions,
        per_fold,
        pooled,
    })
}

pub fn write_predictions(path: impl AsRef<Path>, rows: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("clip_id,truth_bpm,pred_bpm,fold\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.clip_id, r.truth_bpm, r.pred_bpm, r.fold));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::CorruptFile(format!("{}: line {line}", path.display()));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(n + 1));
            }
            Ok(Prediction {
                clip_id: f[0].to_string(),
                truth_bpm: f[1].parse().map_err(|_| bad(n + 1))?,
                pred_bpm: f[2].parse().map_err(|_| bad(n + 1))?,
                fold: f[3].parse().map_err(|_| bad(n + 1))?,
            })
        })
        .collect()
}
