//! Adversarially trained encoder-decoder refiners: G1/D1 on RoI patches,
//! G2/D2 on color-signal windows.
//!
//! The generator G maps a noisy input X̃ = X + ζ back towards the clean X;
//! the discriminator D scores inputs as clean (1) or refined (0). With the
//! value `V = E[ln D(X)] + E[ln(1 − D(X′))]`, D ascends V and G descends
//! `L = V + λ‖X − X′‖²`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{ColorSignal, Strategy, StrategyConfig, S_IN_H, S_IN_W};
use crate::frame::Patch;
use crate::nn::loss::SCORE_CLAMP;
use crate::nn::{decode_params, encode_params, Mode, Network, Sgd, SgdConfig, Tensor};
use crate::roi::{PATCH_H, PATCH_W};
use crate::synth::mix_seed;

pub const PATCH_DIM: usize = S_IN_W * S_IN_H * 3;

/// X̃ = X + ζ with ζ ~ N(0, σ²) i.i.d.
pub fn add_noise(x: &[f64], sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sd must be ≥ 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(x.iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sigma * z
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefinerKind {
    Patch,
    Signal,
}

impl RefinerKind {
    pub fn generator_role(self) -> &'static str {
        match self {
            RefinerKind::Patch => "G1",
            RefinerKind::Signal => "G2",
        }
    }

    pub fn discriminator_role(self) -> &'static str {
        match self {
            RefinerKind::Patch => "D1",
            RefinerKind::Signal => "D2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub sigma: f64,
    pub lambda: f64,
    /// Generator hidden widths (encoder then decoder).
    pub generator: Vec<usize>,
    pub discriminator: Vec<usize>,
    pub leaky_slope: f64,
    /// Batch-norm after every generator hidden layer.
    #[serde(default)]
    pub batchnorm: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl RefinerConfig {
    pub fn patch_default() -> Self {
        Self {
            sigma: 0.05,
            lambda: 0.2,
            generator: vec![512, 128, 512],
            discriminator: vec![128],
            leaky_slope: 0.2,
            batchnorm: false,
            steps: 3000,
            batch_size: 32,
            lr_generator: 0.002,
            lr_discriminator: 0.001,
            momentum: 0.9,
            weight_decay: 0.00005,
            seed: 0,
        }
    }

    pub fn signal_default() -> Self {
        Self {
            generator: vec![256, 64, 256],
            discriminator: vec![64],
            steps: 40_000,
            lr_generator: 0.01,
            ..Self::patch_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.sigma >= 0.0) {
            return bad(format!("sigma must be ≥ 0, got {}", self.sigma));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be ≥ 0, got {}", self.lambda));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch size must be positive".into());
        }
        if self.generator.contains(&0) || self.discriminator.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }
}

/// One logged step: `adversarial` is V (so the discriminator's BCE is −V),
/// `reconstruction` is the batch-mean ‖X − X′‖², `total` = V + λ·reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub adversarial: f64,
    pub reconstruction: f64,
    pub total: f64,
}

pub fn gan_losses(clean: &Tensor, refined: &Tensor, d_real: &Tensor, d_fake: &Tensor, lambda: f64) -> Result<GanLosses> {
    if clean.shape() != refined.shape() || d_real.len() != d_fake.len() || d_real.len() != clean.rows() {
        return Err(Error::Shape(format!(
            "gan losses: clean {:?}, refined {:?}, {} real and {} fake scores",
            clean.shape(),
            refined.shape(),
            d_real.len(),
            d_fake.len()
        )));
    }
    let n = d_real.len() as f64;
    let mut v = 0.0;
    for (&r, &f) in d_real.data().iter().zip(d_fake.data()) {
        if !(0.0..=1.0).contains(&r) || !(0.0..=1.0).contains(&f) {
            return Err(Error::State(format!("discriminator score outside (0,1): {r}, {f}")));
        }
        v += clamp_score(r).ln() + (1.0 - clamp_score(f)).ln();
    }
    let v = v / n;
    let rec = clean
        .data()
        .iter()
        .zip(refined.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(GanLosses {
        adversarial: v,
        reconstruction: rec,
        total: v + lambda * rec,
    })
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GanHistory {
    pub steps: Vec<GanLosses>,
    pub warnings: Vec<String>,
}

impl GanHistory {
    /// Longest run of steps without a new best windowed reconstruction loss.
    fn stagnation(&self) -> usize {
        let n = self.steps.len();
        let w = (n / 100).max(1);
        let means: Vec<f64> = self
            .steps
            .chunks(w)
            .map(|c| c.iter().map(|s| s.reconstruction).sum::<f64>() / c.len() as f64)
            .collect();
        let mut best = f64::INFINITY;
        let (mut run, mut longest) = (0, 0);
        for m in means {
            if m < best * (1.0 - 1e-3) {
                best = m;
                run = 0;
            } else {
                run += 1;
                longest = longest.max(run);
            }
        }
        longest * w
    }
}

#[derive(Debug, Clone)]
pub struct GanPair {
    pub kind: RefinerKind,
    pub sigma: f64,
    pub generator: Network,
    pub discriminator: Network,
    pub history: GanHistory,
}

pub fn build_generator(dim: usize, hidden: &[usize], slope: f64, batchnorm: bool, seed: u64) -> Result<Network> {
    let mut b = Network::builder(dim, seed);
    for &h in hidden {
        b = b.dense(h);
        if batchnorm {
            b = b.batchnorm();
        }
        b = b.leaky_relu(slope);
    }
    b.dense(dim).build()
}

pub fn build_discriminator(dim: usize, hidden: &[usize], slope: f64, seed: u64) -> Result<Network> {
    let mut b = Network::builder(dim, seed);
    for &h in hidden {
        b = b.dense(h).leaky_relu(slope);
    }
    b.dense(1).sigmoid().build()
}

/// Where the noisy counterpart of each clean row comes from.
pub enum NoiseModel<'a> {
    /// Fresh X + N(0, σ²) draws every step.
    Additive,
    /// Fixed degraded copies (same layout as the clean rows).
    Paired(&'a [f64]),
}

/// Trains a pair on clean rows (row-major, `dim` wide).
pub fn train_gan(clean: &[f64], dim: usize, noise: NoiseModel, kind: RefinerKind, cfg: &RefinerConfig) -> Result<GanPair> {
    cfg.validate()?;
    if dim == 0 || clean.is_empty() || clean.len() % dim != 0 {
        return Err(Error::Shape(format!("{} values are not rows of {dim}", clean.len())));
    }
    if let NoiseModel::Paired(noisy) = noise {
        if noisy.len() != clean.len() {
            return Err(Error::Shape(format!("{} degraded values for {} clean", noisy.len(), clean.len())));
        }
    }
    if clean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("clean training data".into()));
    }
    let n = clean.len() / dim;
    let g_seed = mix_seed(cfg.seed, 0x6e6e);
    let mut g = build_generator(dim, &cfg.generator, cfg.leaky_slope, cfg.batchnorm, g_seed)?;
    let mut d = build_discriminator(dim, &cfg.discriminator, cfg.leaky_slope, mix_seed(cfg.seed, 0xd15c))?;
    let mut opt_g = Sgd::new(SgdConfig::new(cfg.lr_generator, cfg.momentum, cfg.weight_decay)?);
    let mut opt_d = Sgd::new(SgdConfig::new(cfg.lr_discriminator, cfg.momentum, cfg.weight_decay)?);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7a1e));
    let mut history = GanHistory::default();
    let mut order: Vec<usize> = Vec::new();
    let bs = cfg.batch_size.min(n);
    let role = kind.generator_role();

    for step in 0..cfg.steps {
        if order.len() < bs {
            let mut more: Vec<usize> = (0..n).collect();
            more.shuffle(&mut rng);
            order.extend(more);
        }
        let idx: Vec<usize> = order.drain(..bs).collect();
        let mut x = Vec::with_capacity(bs * dim);
        let mut xt = Vec::with_capacity(bs * dim);
        for &i in &idx {
            let row = &clean[i * dim..(i + 1) * dim];
            x.extend_from_slice(row);
            match noise {
                NoiseModel::Additive => xt.extend(row.iter().map(|v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + cfg.sigma * z
                })),
                NoiseModel::Paired(noisy) => xt.extend_from_slice(&noisy[i * dim..(i + 1) * dim]),
            }
        }
        let x = Tensor::from_raw(vec![bs, dim], x);
        let xt = Tensor::from_raw(vec![bs, dim], xt);

        let fake = g.forward(&xt, Mode::Train)?;

        // D step on [real; fake]
        let mut both = x.data().to_vec();
        both.extend_from_slice(fake.data());
        let scores = d.forward(&Tensor::from_raw(vec![2 * bs, dim], both), Mode::Train)?;
        let grad: Vec<f64> = scores
            .data()
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                let (_, gs) = crate::nn::bce_loss(s, k < bs);
                gs / bs as f64
            })
            .collect();
        d.backward(&Tensor::from_raw(vec![2 * bs, 1], grad))?;
        opt_d.step(&mut d).map_err(|e| abort(e, role, step))?;

        // G step: dL/dX′ = dV/dX′ + λ·2(X′ − X)/B
        let real_scores = d.evaluate(&x, true)?;
        let fake_scores = d.forward(&fake, Mode::Train)?;
        let losses = gan_losses(&x, &fake, &real_scores, &fake_scores, cfg.lambda)?;
        if !losses.total.is_finite() {
            return Err(abort(Error::NonFinite(format!("loss {}", losses.total)), role, step));
        }
        let ds: Vec<f64> = fake_scores
            .data()
            .iter()
            .map(|&s| {
                let c = clamp_score(s);
                if c != s { 0.0 } else { -1.0 / (1.0 - s) / bs as f64 }
            })
            .collect();
        let dx_adv = d.backward(&Tensor::from_raw(vec![bs, 1], ds))?;
        d.zero_grad();
        let grad_g: Vec<f64> = dx_adv
            .data()
            .iter()
            .zip(fake.data().iter().zip(x.data()))
            .map(|(a, (f, c))| a + cfg.lambda * 2.0 * (f - c) / bs as f64)
            .collect();
        g.backward(&Tensor::from_raw(vec![bs, dim], grad_g))?;
        opt_g.step(&mut g).map_err(|e| abort(e, role, step))?;
        if step % 500 == 0 {
            log::debug!(
                "{role} step {step}: V {:.4} rec {:.4e} L {:.4}",
                losses.adversarial,
                losses.reconstruction,
                losses.total
            );
        }
        history.steps.push(losses);
    }
    let stalled = history.stagnation();
    if 4 * stalled >= cfg.steps && cfg.steps >= 4 {
        let msg = format!(
            "{role}: reconstruction loss did not improve for {stalled} of {} steps (possible mode collapse)",
            cfg.steps
        );
        log::warn!("{msg}");
        history.warnings.push(msg);
    }
    Ok(GanPair {
        kind,
        sigma: cfg.sigma,
        generator: g,
        discriminator: d,
        history,
    })
}

fn abort(e: Error, role: &str, step: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::TrainingAborted {
            reason: format!("{role} step {step}: {m}"),
            checkpoint: None,
        },
        other => other,
    }
}

impl GanPair {
    /// Generator output for each row, no clamping.
    pub fn generate(&self, rows: &[f64]) -> Result<Vec<f64>> {
        let dim = self.generator.input_dim();
        if rows.is_empty() || rows.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values are not rows of {dim}", rows.len())));
        }
        let out = self
            .generator
            .infer(&Tensor::from_raw(vec![rows.len() / dim, dim], rows.to_vec()))?
            .into_data();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} output", self.kind.generator_role())));
        }
        Ok(out)
    }

    /// Discriminator scores in (0, 1), one per row.
    pub fn score(&self, rows: &[f64]) -> Result<Vec<f64>> {
        let dim = self.discriminator.input_dim();
        if rows.is_empty() || rows.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values are not rows of {dim}", rows.len())));
        }
        Ok(self
            .discriminator
            .infer(&Tensor::from_raw(vec![rows.len() / dim, dim], rows.to_vec()))?
            .into_data())
    }

    fn meta(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({ "kind": self.kind, "sigma": self.sigma, "domain": extra })
    }

    /// Writes the generator and discriminator as two role-tagged weights files.
    pub fn save(&self, generator: impl AsRef<Path>, discriminator: impl AsRef<Path>, domain: serde_json::Value) -> Result<()> {
        let meta = self.meta(domain);
        let g = encode_params(&self.generator, Some(self.kind.generator_role()), meta.clone())?;
        let d = encode_params(&self.discriminator, Some(self.kind.discriminator_role()), meta)?;
        for (path, bytes) in [(generator.as_ref(), g), (discriminator.as_ref(), d)] {
            fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn load_generator(path: &Path, role: &str) -> Result<(Network, f64, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (net, header) = decode_params(&bytes)?;
    if header.role.as_deref() != Some(role) {
        return Err(Error::CorruptFile(format!(
            "{}: role {:?}, expected {role}",
            path.display(),
            header.role
        )));
    }
    let sigma = header.meta.get("sigma").and_then(|v| v.as_f64()).unwrap_or(0.0);
    let domain = header.meta.get("domain").cloned().unwrap_or(serde_json::Value::Null);
    Ok((net, sigma, domain))
}

fn generate_rows(net: &Network, rows: Vec<f64>) -> Result<Vec<f64>> {
    let dim = net.input_dim();
    let out = net.infer(&Tensor::from_raw(vec![rows.len() / dim, dim], rows))?.into_data();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("refiner output".into()));
    }
    Ok(out)
}

/// Patch domain: 56×19×3 area-downsampled patch, centered at 0.5.
pub fn patch_rows(patch: &Patch) -> Vec<f64> {
    crate::extract::s_input(patch)
}

/// G1 deployed on RoI patches. The generator refines the low-resolution
/// patch; the change it makes is upsampled onto the full patch.
#[derive(Debug, Clone)]
pub struct PatchRefiner {
    pub generator: Network,
    pub sigma: f64,
}

impl PatchRefiner {
    pub fn from_pair(pair: &GanPair) -> Result<Self> {
        if pair.kind != RefinerKind::Patch || pair.generator.input_dim() != PATCH_DIM {
            return Err(Error::InvalidArgument("not a patch refiner".into()));
        }
        Ok(Self {
            generator: pair.generator.clone(),
            sigma: pair.sigma,
        })
    }

    /// Refines a 56×19 patch; output clamped to [0, 1].
    pub fn refine_low(&self, low: &Patch) -> Result<Patch> {
        if low.shape() != (S_IN_W, S_IN_H, 3) {
            return Err(Error::Shape(format!("patch {:?}, expected {S_IN_W}×{S_IN_H}×3", low.shape())));
        }
        let out = generate_rows(&self.generator, patch_rows(low))?;
        Patch::new(S_IN_W, S_IN_H, 3, out.iter().map(|v| (v + 0.5).clamp(0.0, 1.0)).collect())
    }

    /// Refines a full 224×74 RoI patch; output clamped to [0, 1].
    pub fn refine(&self, patch: &Patch) -> Result<Patch> {
        if patch.shape() != (PATCH_W, PATCH_H, 3) {
            return Err(Error::Shape(format!("patch {:?}, expected {PATCH_W}×{PATCH_H}×3", patch.shape())));
        }
        let low = patch.resample_area(S_IN_W, S_IN_H);
        let refined = self.refine_low(&low)?;
        let delta = Patch::new(
            S_IN_W,
            S_IN_H,
            3,
            refined.data.iter().zip(&low.data).map(|(a, b)| a - b).collect(),
        )?
        .resample_bilinear(PATCH_W, PATCH_H);
        Patch::new(
            PATCH_W,
            PATCH_H,
            3,
            patch.data.iter().zip(&delta.data).map(|(p, d)| (p + d).clamp(0.0, 1.0)).collect(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let meta = serde_json::json!({ "kind": RefinerKind::Patch, "sigma": self.sigma, "domain": null });
        fs::write(path, encode_params(&self.generator, Some("G1"), meta)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (generator, sigma, _) = load_generator(path.as_ref(), "G1")?;
        if generator.input_dim() != PATCH_DIM || generator.output_dim() != PATCH_DIM {
            return Err(Error::CorruptFile(format!("G1 must be {PATCH_DIM}→{PATCH_DIM}")));
        }
        Ok(Self { generator, sigma })
    }
}

/// Signal domain: G2 sees `window`-frame slices of a signal. Each feature
/// row of a slice is centered and multiplied by the square root of the
/// number of patch pixels averaged into it, so i.i.d. pixel noise of sd σ
/// shows up with sd ≈ σ. Whole signals are refined slice by slice (stride
/// `hop`) and overlap-added with Hann weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalDomain {
    pub strategy: StrategyConfig,
    pub window: usize,
    pub hop: usize,
}

pub const DEFAULT_WINDOW: usize = 64;
pub const DEFAULT_HOP: usize = 4;

impl SignalDomain {
    pub fn new(strategy: StrategyConfig, window: usize, hop: usize) -> Result<Self> {
        if window < 2 || hop == 0 || hop > window {
            return Err(Error::InvalidArgument(format!("window {window} with hop {hop}")));
        }
        Ok(Self { strategy, window, hop })
    }

    pub fn with_defaults(strategy: StrategyConfig) -> Self {
        Self {
            strategy,
            window: DEFAULT_WINDOW,
            hop: DEFAULT_HOP,
        }
    }

    pub fn dim(&self) -> usize {
        self.strategy.channels() * self.window
    }

    pub fn gain(&self) -> f64 {
        let blocks = match self.strategy.strategy {
            Strategy::C => self.strategy.blocks_h * self.strategy.blocks_w,
            _ => 1,
        };
        ((PATCH_W * PATCH_H) as f64 / blocks as f64).sqrt()
    }

    fn check(&self, sig: &ColorSignal) -> Result<()> {
        if sig.strategy != self.strategy || sig.len < self.window {
            return Err(Error::Shape(format!(
                "{}-frame {} signal vs {}-frame {} refiner window",
                sig.len,
                sig.strategy.label(),
                self.window,
                self.strategy.label()
            )));
        }
        Ok(())
    }

    /// Slice starting at frame `start` as a domain row, plus its row means.
    pub fn encode_at(&self, sig: &ColorSignal, start: usize) -> (Vec<f64>, Vec<f64>) {
        let k = self.gain();
        let mut out = Vec::with_capacity(self.dim());
        let mut means = Vec::with_capacity(sig.channels);
        for i in 0..sig.channels {
            let row = &sig.row(i)[start..start + self.window];
            let m = row.iter().sum::<f64>() / row.len() as f64;
            means.push(m);
            out.extend(row.iter().map(|v| (v - m) * k));
        }
        (out, means)
    }

    /// Slice starts covering `len` frames with stride `hop`, always
    /// including the final slice.
    pub fn starts(&self, len: usize, hop: usize) -> Vec<usize> {
        let last = len - self.window;
        let mut s: Vec<usize> = (0..=last).step_by(hop.max(1)).collect();
        if *s.last().unwrap() != last {
            s.push(last);
        }
        s
    }

    /// All slices of `sig` at stride `stride`, concatenated (training rows).
    pub fn slices(&self, sig: &ColorSignal, stride: usize) -> Result<Vec<f64>> {
        self.check(sig)?;
        Ok(self
            .starts(sig.len, stride)
            .into_iter()
            .flat_map(|t| self.encode_at(sig, t).0)
            .collect())
    }
}

fn hann_weight(k: usize, n: usize) -> f64 {
    0.5 - 0.5 * (2.0 * std::f64::consts::PI * (k as f64 + 0.5) / n as f64).cos()
}

/// G2 deployed on color signals.
#[derive(Debug, Clone)]
pub struct SignalRefiner {
    pub generator: Network,
    pub domain: SignalDomain,
    pub sigma: f64,
}

impl SignalRefiner {
    pub fn from_pair(pair: &GanPair, domain: SignalDomain) -> Result<Self> {
        if pair.kind != RefinerKind::Signal || pair.generator.input_dim() != domain.dim() {
            return Err(Error::InvalidArgument(format!(
                "not a signal refiner for {} values",
                domain.dim()
            )));
        }
        Ok(Self {
            generator: pair.generator.clone(),
            domain,
            sigma: pair.sigma,
        })
    }

    pub fn refine_rows(&self, rows: &[f64]) -> Result<Vec<f64>> {
        if rows.len() % self.domain.dim() != 0 || rows.is_empty() {
            return Err(Error::Shape(format!("{} values are not rows of {}", rows.len(), self.domain.dim())));
        }
        generate_rows(&self.generator, rows.to_vec())
    }

    pub fn refine(&self, sig: &ColorSignal) -> Result<ColorSignal> {
        let d = &self.domain;
        d.check(sig)?;
        let starts = d.starts(sig.len, d.hop);
        let mut rows = Vec::with_capacity(starts.len() * d.dim());
        let mut means = Vec::with_capacity(starts.len());
        for &t in &starts {
            let (r, m) = d.encode_at(sig, t);
            rows.extend(r);
            means.push(m);
        }
        let out = self.refine_rows(&rows)?;
        let k = d.gain();
        let mut acc = vec![0.0; sig.values.len()];
        let mut wsum = vec![0.0; sig.len];
        for (j, &t) in starts.iter().enumerate() {
            let row = &out[j * d.dim()..(j + 1) * d.dim()];
            for i in 0..sig.channels {
                for s in 0..d.window {
                    let w = hann_weight(s, d.window);
                    acc[i * sig.len + t + s] += w * (row[i * d.window + s] / k + means[j][i]);
                }
            }
            for s in 0..d.window {
                wsum[t + s] += hann_weight(s, d.window);
            }
        }
        for i in 0..sig.channels {
            for t in 0..sig.len {
                acc[i * sig.len + t] /= wsum[t];
            }
        }
        ColorSignal::from_rows(acc, sig.channels, sig.fps, sig.strategy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let meta = serde_json::json!({
            "kind": RefinerKind::Signal,
            "sigma": self.sigma,
            "domain": self.domain,
        });
        fs::write(path, encode_params(&self.generator, Some("G2"), meta)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (generator, sigma, domain) = load_generator(path, "G2")?;
        let domain: SignalDomain = serde_json::from_value(domain)
            .map_err(|e| Error::CorruptFile(format!("{}: G2 domain: {e}", path.display())))?;
        if generator.input_dim() != domain.dim() || generator.output_dim() != domain.dim() {
            return Err(Error::CorruptFile(format!("G2 must be {0}→{0}", domain.dim())));
        }
        Ok(Self { generator, domain, sigma })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_cfg(steps: usize) -> RefinerConfig {
        RefinerConfig {
            generator: vec![16, 4, 16],
            discriminator: vec![8],
            steps,
            batch_size: 8,
            ..RefinerConfig::signal_default()
        }
    }

    #[test]
    fn zero_sigma_is_identity() {
        let x = vec![0.3, -1.0, 2.5];
        assert_eq!(add_noise(&x, 0.0, 1).unwrap(), x);
    }

    #[test]
    fn noise_statistics() {
        let x = vec![0.0; 100_000];
        let a = add_noise(&x, 0.05, 1).unwrap();
        let b = add_noise(&x, 0.05, 2).unwrap();
        assert_ne!(a, b);
        for v in [a, b] {
            let sd = (v.iter().map(|z| z * z).sum::<f64>() / v.len() as f64).sqrt();
            assert!((sd / 0.05 - 1.0).abs() < 0.02, "sd {sd}");
        }
        assert!(add_noise(&x, -1.0, 0).is_err());
    }

    #[test]
    fn loss_hand_values() {
        let x = Tensor::from_raw(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let half = Tensor::from_raw(vec![2, 1], vec![0.5, 0.5]);
        let l = gan_losses(&x, &x, &half, &half, 0.2).unwrap();
        assert_eq!(l.reconstruction, 0.0);
        assert_abs_diff_eq!(-l.adversarial, 2.0 * 2f64.ln(), epsilon = 1e-12);
        let y = Tensor::from_raw(vec![2, 2], vec![1.0, 3.0, 3.0, 4.0]);
        let l = gan_losses(&x, &y, &half, &half, 0.2).unwrap();
        assert_abs_diff_eq!(l.reconstruction, 0.5, epsilon = 1e-15);
        assert_eq!(l.total, l.adversarial + 0.2 * 0.5);
        let bad = Tensor::from_raw(vec![2, 1], vec![1.5, 0.5]);
        assert!(gan_losses(&x, &x, &bad, &half, 0.2).is_err());
    }

    #[test]
    fn logged_total_decomposes() {
        let clean: Vec<f64> = (0..40 * 12).map(|i| ((i % 12) as f64 * 0.5).sin()).collect();
        let pair = train_gan(&clean, 12, NoiseModel::Additive, RefinerKind::Signal, &small_cfg(60)).unwrap();
        assert_eq!(pair.history.steps.len(), 60);
        for s in &pair.history.steps {
            assert!((s.total - (s.adversarial + 0.2 * s.reconstruction)).abs() < 1e-12);
        }
    }

    #[test]
    fn stagnation_warning() {
        // λ = 0 leaves nothing pulling the reconstruction down
        let clean = vec![0.0; 8 * 4];
        let cfg = RefinerConfig {
            lambda: 0.0,
            lr_generator: 1e-12,
            ..small_cfg(100)
        };
        let cfg = RefinerConfig { generator: vec![4], ..cfg };
        let pair = train_gan(&clean, 4, NoiseModel::Additive, RefinerKind::Signal, &cfg).unwrap();
        assert_eq!(pair.history.warnings.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let clean: Vec<f64> = (0..16 * 6).map(|i| (i as f64 * 0.37).cos()).collect();
        let a = train_gan(&clean, 6, NoiseModel::Additive, RefinerKind::Signal, &small_cfg(20)).unwrap();
        let b = train_gan(&clean, 6, NoiseModel::Additive, RefinerKind::Signal, &small_cfg(20)).unwrap();
        assert_eq!(a.generator.flat_params(), b.generator.flat_params());
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn patch_refine_clamps_and_is_deterministic() {
        let clean: Vec<f64> = vec![0.1; PATCH_DIM * 2];
        let cfg = RefinerConfig {
            generator: vec![8],
            discriminator: vec![4],
            steps: 3,
            ..RefinerConfig::patch_default()
        };
        let pair = train_gan(&clean, PATCH_DIM, NoiseModel::Additive, RefinerKind::Patch, &cfg).unwrap();
        let r = PatchRefiner::from_pair(&pair).unwrap();
        let p = Patch::uniform(PATCH_W, PATCH_H, [0.0, 1.0, 0.5]);
        let a = r.refine(&p).unwrap();
        assert_eq!(a.shape(), (PATCH_W, PATCH_H, 3));
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, r.refine(&p).unwrap());
        assert!(r.refine(&Patch::uniform(10, 10, [0.5; 3])).is_err());
    }

    #[test]
    fn identity_generator_reproduces_signal() {
        let strategy = StrategyConfig::B;
        let values: Vec<f64> = (0..75).map(|i| 0.5 + 0.01 * (i as f64 * 0.7).sin() + 0.001 * i as f64).collect();
        let sig = ColorSignal::from_rows(values, 3, 22.0, strategy).unwrap();
        let dom = SignalDomain::new(strategy, 10, 3).unwrap();
        let mut g = Network::builder(dom.dim(), 0).dense(dom.dim()).build().unwrap();
        let mut eye = vec![0.0; dom.dim() * dom.dim()];
        for i in 0..dom.dim() {
            eye[i * dom.dim() + i] = 1.0;
        }
        let zeros = vec![0.0; dom.dim()];
        let mut flat = eye;
        flat.extend(zeros);
        g.set_flat_params(&flat).unwrap();
        let r = SignalRefiner { generator: g, domain: dom, sigma: 0.0 };
        let out = r.refine(&sig).unwrap();
        for (a, b) in out.values.iter().zip(&sig.values) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(dom.starts(25, 3).last(), Some(&15));
        assert!(r.refine(&sig.window(5).unwrap()).is_err());
    }

    #[test]
    fn slices_have_zero_mean_rows() {
        let values: Vec<f64> = (0..40).map(|i| 0.4 + 0.02 * (i as f64).cos()).collect();
        let sig = ColorSignal::from_rows(values, 1, 22.0, StrategyConfig::A).unwrap();
        let dom = SignalDomain::new(StrategyConfig::A, 16, 4).unwrap();
        let rows = dom.slices(&sig, 8).unwrap();
        assert_eq!(rows.len(), 16 * dom.starts(40, 8).len());
        for r in rows.chunks(16) {
            assert!(r.iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn role_tags_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clean: Vec<f64> = (0..8 * 20).map(|i| (i as f64 * 0.3).sin()).collect();
        let dom = SignalDomain::new(StrategyConfig::A, 20, 5).unwrap();
        let pair = train_gan(&clean, 20, NoiseModel::Additive, RefinerKind::Signal, &small_cfg(5)).unwrap();
        let (gp, dp) = (dir.path().join("g2"), dir.path().join("d2"));
        pair.save(&gp, &dp, serde_json::to_value(dom).unwrap()).unwrap();
        let g = SignalRefiner::load(&gp).unwrap();
        assert_eq!(g.domain, dom);
        assert!(SignalRefiner::load(&dp).is_err());
        let (_, h) = crate::nn::load_params(&dp).unwrap();
        assert_eq!(h.role.as_deref(), Some("D2"));
        let sig = ColorSignal::from_rows(clean[..50].to_vec(), 1, 22.0, StrategyConfig::A).unwrap();
        let direct = SignalRefiner::from_pair(&pair, dom).unwrap().refine(&sig).unwrap();
        assert_eq!(g.refine(&sig).unwrap(), direct);
    }
}
