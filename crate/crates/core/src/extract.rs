//! RoI patch → color features (strategies A, B, C), by direct averaging or by
//! the learned S network, and assembly of the per-clip color signal.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Patch;
use crate::nn::{
    decode_params, encode_params, fit_mse, FitConfig, FitHistory, Network, SgdConfig,
    Standardizer, Tensor,
};
use crate::roi::{PATCH_H, PATCH_W};

pub const S_IN_W: usize = 56;
pub const S_IN_H: usize = 19;
pub const S_INPUT_DIM: usize = S_IN_W * S_IN_H * 3;
pub const ROLE: &str = "S";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    A,
    B,
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    #[serde(default = "default_blocks")]
    pub blocks_h: usize,
    #[serde(default = "default_blocks")]
    pub blocks_w: usize,
}

fn default_blocks() -> usize {
    4
}

impl StrategyConfig {
    pub const A: Self = Self {
        strategy: Strategy::A,
        blocks_h: 4,
        blocks_w: 4,
    };
    pub const B: Self = Self {
        strategy: Strategy::B,
        blocks_h: 4,
        blocks_w: 4,
    };

    pub fn c(blocks_h: usize, blocks_w: usize) -> Result<Self> {
        if blocks_h == 0 || blocks_w == 0 || blocks_h > PATCH_H || blocks_w > PATCH_W {
            return Err(Error::InvalidArgument(format!(
                "block grid {blocks_h}×{blocks_w} does not tile a {PATCH_W}×{PATCH_H} patch"
            )));
        }
        Ok(Self {
            strategy: Strategy::C,
            blocks_h,
            blocks_w,
        })
    }

    pub fn channels(&self) -> usize {
        match self.strategy {
            Strategy::A => 1,
            Strategy::B => 3,
            Strategy::C => 3 * self.blocks_h * self.blocks_w,
        }
    }

    /// Row carrying the green channel (the whole-RoI mean for A/B, the
    /// first block for C).
    pub fn green_row(&self) -> usize {
        match self.strategy {
            Strategy::A => 0,
            _ => 1,
        }
    }

    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::A => "A".into(),
            Strategy::B => "B".into(),
            Strategy::C => format!("C{}x{}", self.blocks_h, self.blocks_w),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            "C" | "c" => Self::c(4, 4),
            _ => {
                let grid = s
                    .strip_prefix('C')
                    .or_else(|| s.strip_prefix('c'))
                    .and_then(|g| g.split_once('x'))
                    .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)));
                match grid {
                    Some((h, w)) => Self::c(h, w),
                    None => Err(Error::InvalidArgument(format!("unknown strategy {s:?}"))),
                }
            }
        }
    }
}

/// Block boundaries `[start, end)` splitting `len` into `parts` near-equal spans.
fn spans(len: usize, parts: usize) -> Vec<(usize, usize)> {
    (0..parts).map(|i| (i * len / parts, (i + 1) * len / parts)).collect()
}

/// Direct channel averaging. C tiles blocks row-major, channel-major inside
/// each block: `[b0.R, b0.G, b0.B, b1.R, ...]`.
pub fn oracle_features(patch: &Patch, cfg: &StrategyConfig) -> Result<Vec<f64>> {
    if patch.shape() != (PATCH_W, PATCH_H, 3) {
        return Err(Error::Shape(format!(
            "patch {:?}, expected {PATCH_W}×{PATCH_H}×3",
            patch.shape()
        )));
    }
    block_means(patch, cfg)
}

/// Same averaging on a patch of any size (used on refined low-res patches).
pub fn block_means(patch: &Patch, cfg: &StrategyConfig) -> Result<Vec<f64>> {
    if patch.channels != 3 {
        return Err(Error::Shape(format!("{} channels, expected 3", patch.channels)));
    }
    let whole = |c: usize| region_mean(patch, c, (0, patch.width), (0, patch.height));
    Ok(match cfg.strategy {
        Strategy::A => vec![whole(1)],
        Strategy::B => (0..3).map(whole).collect(),
        Strategy::C => {
            if cfg.blocks_h > patch.height || cfg.blocks_w > patch.width {
                return Err(Error::Shape(format!(
                    "{}×{} grid on a {}×{} patch",
                    cfg.blocks_h, cfg.blocks_w, patch.width, patch.height
                )));
            }
            let mut out = Vec::with_capacity(cfg.channels());
            for &(y0, y1) in &spans(patch.height, cfg.blocks_h) {
                for &(x0, x1) in &spans(patch.width, cfg.blocks_w) {
                    for c in 0..3 {
                        out.push(region_mean(patch, c, (x0, x1), (y0, y1)));
                    }
                }
            }
            out
        }
    })
}

fn region_mean(patch: &Patch, c: usize, (x0, x1): (usize, usize), (y0, y1): (usize, usize)) -> f64 {
    let p = patch.plane(c);
    let mut s = 0.0;
    for y in y0..y1 {
        s += p[y * patch.width + x0..y * patch.width + x1].iter().sum::<f64>();
    }
    s / ((y1 - y0) * (x1 - x0)) as f64
}

/// S's input: area-downsampled 56×19×3 patch, centered at 0.5.
pub fn s_input(patch: &Patch) -> Vec<f64> {
    let small = if (patch.width, patch.height) == (S_IN_W, S_IN_H) {
        patch.clone()
    } else {
        patch.resample_area(S_IN_W, S_IN_H)
    };
    small.data.iter().map(|v| v - 0.5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct STrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Hidden widths; empty gives a single dense map.
    pub hidden: Vec<usize>,
    /// Input-noise augmentation sd (suppresses weights that would amplify
    /// sensor noise).
    pub input_noise: f64,
    pub seed: u64,
}

impl Default for STrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.00005,
            epochs: 60,
            batch_size: 32,
            hidden: Vec::new(),
            input_noise: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SMeta {
    strategy: StrategyConfig,
    target: Standardizer,
}

#[derive(Debug, Clone)]
pub struct SModel {
    pub net: Network,
    pub strategy: StrategyConfig,
    target: Standardizer,
}

pub fn build_s(hidden: &[usize], outputs: usize, seed: u64) -> Result<Network> {
    let mut b = Network::builder(S_INPUT_DIM, seed);
    for &h in hidden {
        b = b.dense(h).leaky_relu(0.2);
    }
    b.dense(outputs).build()
}

/// Learns to reproduce the oracle features from S inputs.
/// `inputs` are [`s_input`] vectors; `targets` the oracle features.
pub fn train_s(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    strategy: StrategyConfig,
    cfg: &STrainConfig,
) -> Result<(SModel, FitHistory)> {
    let c = strategy.channels();
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} inputs vs {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if inputs.iter().any(|x| x.len() != S_INPUT_DIM) || targets.iter().any(|y| y.len() != c) {
        return Err(Error::Shape(format!(
            "S expects {S_INPUT_DIM} inputs and {c} targets per sample"
        )));
    }
    let x = inputs.concat();
    let mut y = targets.concat();
    let mut target = Standardizer::fit(&y, c, 1.0)?;
    target.scale.iter_mut().for_each(|s| *s = 1.0);
    target.apply_in_place(&mut y);
    let mut net = build_s(&cfg.hidden, c, cfg.seed)?;
    let fit = FitConfig {
        sgd: SgdConfig::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)?,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed ^ 0x5eed_0005,
        input_noise: cfg.input_noise,
    };
    let history = fit_mse(&mut net, &x, &y, &fit, ROLE)?;
    Ok((SModel { net, strategy, target }, history))
}

impl SModel {
    /// Features for a batch of S input rows.
    pub fn features_batch(&self, rows: &[f64]) -> Result<Vec<f64>> {
        if rows.len() % S_INPUT_DIM != 0 {
            return Err(Error::Shape(format!("{} values are not rows of {S_INPUT_DIM}", rows.len())));
        }
        let t = Tensor::from_raw(vec![rows.len() / S_INPUT_DIM, S_INPUT_DIM], rows.to_vec());
        let mut out = self.net.infer(&t)?.into_data();
        self.target.invert_in_place(&mut out);
        Ok(out)
    }

    pub fn features(&self, patch: &Patch) -> Result<Vec<f64>> {
        self.features_batch(&s_input(patch))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_value(SMeta {
            strategy: self.strategy,
            target: self.target.clone(),
        })?;
        encode_params(&self.net, Some(ROLE), meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (net, header) = decode_params(bytes)?;
        let meta: SMeta = serde_json::from_value(header.meta)
            .map_err(|e| Error::CorruptFile(format!("S metadata: {e}")))?;
        if net.input_dim() != S_INPUT_DIM || net.output_dim() != meta.strategy.channels() {
            return Err(Error::CorruptFile(format!(
                "S network {}→{} does not match strategy {}",
                net.input_dim(),
                net.output_dim(),
                meta.strategy.label()
            )));
        }
        Ok(Self {
            net,
            strategy: meta.strategy,
            target: meta.target,
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

pub enum Extractor<'a> {
    Oracle,
    Learned(&'a SModel),
}

/// `c × T` feature matrix, one row per feature, one column per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorSignal {
    pub values: Vec<f64>,
    pub channels: usize,
    pub len: usize,
    pub fps: f64,
    pub strategy: StrategyConfig,
}

impl ColorSignal {
    pub fn from_columns(columns: &[Vec<f64>], fps: f64, strategy: StrategyConfig) -> Result<Self> {
        let c = strategy.channels();
        if columns.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a signal needs at least 2 frames, got {}",
                columns.len()
            )));
        }
        if let Some(i) = columns.iter().position(|col| col.len() != c) {
            return Err(Error::Shape(format!(
                "frame {i} has {} features, expected {c}",
                columns[i].len()
            )));
        }
        let t = columns.len();
        let mut values = vec![0.0; c * t];
        for (j, col) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                values[i * t + j] = *v;
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("signal contains non-finite values".into()));
        }
        Ok(Self {
            values,
            channels: c,
            len: t,
            fps,
            strategy,
        })
    }

    pub fn from_rows(values: Vec<f64>, channels: usize, fps: f64, strategy: StrategyConfig) -> Result<Self> {
        if channels != strategy.channels() || values.len() % channels != 0 || values.len() < 2 * channels {
            return Err(Error::Shape(format!(
                "{} values as {channels} rows for strategy {}",
                values.len(),
                strategy.label()
            )));
        }
        let len = values.len() / channels;
        Ok(Self {
            values,
            channels,
            len,
            fps,
            strategy,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.len..(i + 1) * self.len]
    }

    pub fn green(&self) -> &[f64] {
        self.row(self.strategy.green_row())
    }

    /// First `t` frames of every row.
    pub fn window(&self, t: usize) -> Result<Self> {
        if t > self.len || t < 2 {
            return Err(Error::InvalidArgument(format!(
                "window of {t} frames from a {}-frame signal",
                self.len
            )));
        }
        let values = (0..self.channels).flat_map(|i| self.row(i)[..t].to_vec()).collect();
        Ok(Self {
            values,
            len: t,
            ..self.clone()
        })
    }

    /// Column-wise concatenation with a signal of the same layout.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.channels != other.channels || self.strategy != other.strategy || self.fps != other.fps {
            return Err(Error::Shape("signals have different layouts".into()));
        }
        let values = (0..self.channels)
            .flat_map(|i| self.row(i).iter().chain(other.row(i)).copied().collect::<Vec<_>>())
            .collect();
        Ok(Self {
            values,
            len: self.len + other.len,
            ..self.clone()
        })
    }
}

pub fn extract_signal(patches: &[Patch], extractor: &Extractor, strategy: StrategyConfig, fps: f64) -> Result<ColorSignal> {
    if let Some(first) = patches.first() {
        if let Some(i) = patches.iter().position(|p| p.shape() != first.shape()) {
            return Err(Error::Shape(format!(
                "patch {i} is {:?}, patch 0 is {:?}",
                patches[i].shape(),
                first.shape()
            )));
        }
    }
    let columns = match extractor {
        Extractor::Oracle => patches
            .iter()
            .map(|p| oracle_features(p, &strategy))
            .collect::<Result<Vec<_>>>()?,
        Extractor::Learned(s) => {
            if s.strategy != strategy {
                return Err(Error::InvalidArgument(format!(
                    "S was trained for strategy {}, asked for {}",
                    s.strategy.label(),
                    strategy.label()
                )));
            }
            let rows: Vec<f64> = patches.iter().flat_map(s_input).collect();
            let out = s.features_batch(&rows)?;
            out.chunks(strategy.channels()).map(<[f64]>::to_vec).collect()
        }
    };
    ColorSignal::from_columns(&columns, fps, strategy)
}

/// CSV: a `# strategy=..,fps=..` line, a header of feature names, then one
/// row per frame.
pub fn write_signal_csv(path: impl AsRef<Path>, sig: &ColorSignal) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("# strategy={},fps={}\n", sig.strategy.label(), sig.fps);
    let names: Vec<String> = (0..sig.channels).map(|i| feature_name(&sig.strategy, i)).collect();
    out.push_str(&names.join(","));
    out.push('\n');
    for t in 0..sig.len {
        let row: Vec<String> = (0..sig.channels).map(|i| format!("{}", sig.row(i)[t])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_signal_csv(path: impl AsRef<Path>) -> Result<ColorSignal> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::CorruptFile(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    let meta = lines.next().and_then(|l| l.strip_prefix("# ")).ok_or_else(|| bad("missing metadata line"))?;
    let (mut strategy, mut fps) = (None, None);
    for kv in meta.split(',') {
        match kv.split_once('=') {
            Some(("strategy", v)) => strategy = Some(StrategyConfig::parse(v)?),
            Some(("fps", v)) => fps = v.parse::<f64>().ok(),
            _ => {}
        }
    }
    let strategy = strategy.ok_or_else(|| bad("no strategy"))?;
    let fps = fps.ok_or_else(|| bad("no fps"))?;
    lines.next().ok_or_else(|| bad("missing header"))?;
    let mut columns = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let col = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(&e.to_string()))?;
        columns.push(col);
    }
    ColorSignal::from_columns(&columns, fps, strategy)
}

fn feature_name(cfg: &StrategyConfig, i: usize) -> String {
    const CH: [&str; 3] = ["r", "g", "b"];
    match cfg.strategy {
        Strategy::A => "g".into(),
        Strategy::B => CH[i].into(),
        Strategy::C => format!("b{}_{}", i / 3, CH[i % 3]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_patch(seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..PATCH_W * PATCH_H * 3).map(|_| rng.gen::<f64>()).collect();
        Patch::new(PATCH_W, PATCH_H, 3, data).unwrap()
    }

    #[test]
    fn uniform_patch_strategy_a() {
        let p = Patch::uniform(PATCH_W, PATCH_H, [0.2, 0.5, 0.7]);
        let a = oracle_features(&p, &StrategyConfig::A).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn strategy_algebra() {
        for seed in 0..5 {
            let p = random_patch(seed);
            let a = oracle_features(&p, &StrategyConfig::A).unwrap();
            let b = oracle_features(&p, &StrategyConfig::B).unwrap();
            let c11 = oracle_features(&p, &StrategyConfig::c(1, 1).unwrap()).unwrap();
            assert_eq!(a[0], b[1]);
            assert_eq!(b, c11);
        }
    }

    #[test]
    fn equal_area_block_means_average_to_global_mean() {
        let p = random_patch(9);
        // 224 = 4·56 and 74 = 2·37: equal-area blocks
        let c = oracle_features(&p, &StrategyConfig::c(2, 4).unwrap()).unwrap();
        let b = oracle_features(&p, &StrategyConfig::B).unwrap();
        for ch in 0..3 {
            let m = c.iter().skip(ch).step_by(3).sum::<f64>() / 8.0;
            assert!((m - b[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_patch_shape() {
        let p = Patch::uniform(100, 74, [0.1; 3]);
        assert!(oracle_features(&p, &StrategyConfig::A).is_err());
    }

    #[test]
    fn signal_layout_and_concat() {
        let patches: Vec<Patch> = (0..6).map(random_patch).collect();
        let full = extract_signal(&patches, &Extractor::Oracle, StrategyConfig::B, 22.0).unwrap();
        assert_eq!((full.channels, full.len), (3, 6));
        let a = extract_signal(&patches[..2], &Extractor::Oracle, StrategyConfig::B, 22.0).unwrap();
        let b = extract_signal(&patches[2..], &Extractor::Oracle, StrategyConfig::B, 22.0).unwrap();
        assert_eq!(a.concat(&b).unwrap(), full);
        let ga = extract_signal(&patches, &Extractor::Oracle, StrategyConfig::A, 22.0).unwrap();
        assert_eq!(ga.row(0), full.row(1));
    }

    #[test]
    fn constant_clip_gives_constant_columns() {
        let patches = vec![Patch::uniform(PATCH_W, PATCH_H, [0.3, 0.4, 0.5]); 4];
        let s = extract_signal(&patches, &Extractor::Oracle, StrategyConfig::c(4, 4).unwrap(), 22.0).unwrap();
        for i in 0..s.channels {
            assert!(s.row(i).windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn heterogeneous_patches_rejected() {
        let patches = vec![Patch::uniform(PATCH_W, PATCH_H, [0.3; 3]), Patch::uniform(10, 10, [0.3; 3])];
        assert!(extract_signal(&patches, &Extractor::Oracle, StrategyConfig::B, 22.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sig.csv");
        let patches: Vec<Patch> = (0..5).map(random_patch).collect();
        let cfg = StrategyConfig::c(2, 3).unwrap();
        let s = extract_signal(&patches, &Extractor::Oracle, cfg, 22.0).unwrap();
        write_signal_csv(&path, &s).unwrap();
        assert_eq!(read_signal_csv(&path).unwrap(), s);
    }

    #[test]
    fn constant_patches_learned_exactly() {
        let p = Patch::uniform(PATCH_W, PATCH_H, [0.25, 0.55, 0.4]);
        let x = vec![s_input(&p); 120];
        let y = vec![oracle_features(&p, &StrategyConfig::B).unwrap(); 120];
        let cfg = STrainConfig {
            epochs: 30,
            input_noise: 0.0,
            ..Default::default()
        };
        let (m, h) = train_s(&x, &y, StrategyConfig::B, &cfg).unwrap();
        let got = m.features(&p).unwrap();
        for (g, w) in got.iter().zip(&y[0]) {
            assert!((g - w).abs() < 1e-3, "{g} vs {w}");
        }
        assert!(h.last().unwrap() <= h.initial().unwrap());
        let back = SModel::from_bytes(&m.to_bytes().unwrap()).unwrap();
        assert_eq!(back.features(&p).unwrap(), got);
    }

    proptest! {
        #[test]
        fn block_means_ignore_pixel_order(seed in 0u64..1000) {
            let p = random_patch(seed);
            let cfg = StrategyConfig::c(2, 4).unwrap();
            let before = oracle_features(&p, &cfg).unwrap();
            // reverse the pixels of the first block (rows 0..37, cols 0..56) in every channel
            let mut q = p.clone();
            for c in 0..3 {
                let plane = q.plane_mut(c);
                let mut vals = Vec::new();
                for y in 0..37 { for x in 0..56 { vals.push(plane[y * PATCH_W + x]); } }
                vals.reverse();
                let mut it = vals.into_iter();
                for y in 0..37 { for x in 0..56 { plane[y * PATCH_W + x] = it.next().unwrap(); } }
            }
            let after = oracle_features(&q, &cfg).unwrap();
            for (a, b) in before.iter().zip(&after) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
