//! Face RoI localization: a dense box regressor over a downsampled grayscale
//! frame, plus cropping of the detected box to the fixed patch size.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, Patch};
use crate::nn::{
    decode_params, encode_params, fit_mse, FitConfig, FitHistory, Network, SgdConfig,
    Standardizer, Tensor,
};

pub const PATCH_W: usize = 224;
pub const PATCH_H: usize = 74;
pub const FEATURE_W: usize = 80;
pub const FEATURE_H: usize = 48;
pub const ROLE: &str = "R";

const MIN_EXTENT: f64 = 1e-3;

/// Normalized center/size rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl RoiBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidArgument(format!("box {b:?} is not inside the unit square")))
        }
    }

    pub fn is_valid(&self) -> bool {
        let tol = 1e-12;
        [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite())
            && self.w > 0.0
            && self.h > 0.0
            && self.cx - self.w / 2.0 >= -tol
            && self.cx + self.w / 2.0 <= 1.0 + tol
            && self.cy - self.h / 2.0 >= -tol
            && self.cy + self.h / 2.0 <= 1.0 + tol
    }

    /// Nearest valid box: sizes are clipped to `(0, 1]` first, then the
    /// center is pulled inward until the box fits.
    pub fn clamped(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        let fix = |v: f64, d: f64| if v.is_finite() { v } else { d };
        let w = fix(w, 1.0).clamp(MIN_EXTENT, 1.0);
        let h = fix(h, 1.0).clamp(MIN_EXTENT, 1.0);
        let cx = fix(cx, 0.5).clamp(w / 2.0, 1.0 - w / 2.0);
        let cy = fix(cy, 0.5).clamp(h / 2.0, 1.0 - h / 2.0);
        Self { cx, cy, w, h }
    }

    /// `[x0, y0, x1, y1]` in pixels.
    pub fn to_pixels(&self, width: usize, height: usize) -> [f64; 4] {
        let (fw, fh) = (width as f64, height as f64);
        [
            snap((self.cx - self.w / 2.0) * fw),
            snap((self.cy - self.h / 2.0) * fh),
            snap((self.cx + self.w / 2.0) * fw),
            snap((self.cy + self.h / 2.0) * fh),
        ]
    }

    pub fn from_pixels(x0: f64, y0: f64, x1: f64, y1: f64, width: usize, height: usize) -> Self {
        let (fw, fh) = (width as f64, height as f64);
        Self {
            cx: (x0 + x1) / 2.0 / fw,
            cy: (y0 + y1) / 2.0 / fh,
            w: (x1 - x0) / fw,
            h: (y1 - y0) / fh,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-7 {
        r
    } else {
        v
    }
}

/// Intersection over union of the two boxes denormalized to a
/// `width × height` frame.
pub fn iou(a: &RoiBox, b: &RoiBox, width: usize, height: usize) -> f64 {
    let pa = a.to_pixels(width, height);
    let pb = b.to_pixels(width, height);
    let iw = (pa[2].min(pb[2]) - pa[0].max(pb[0])).max(0.0);
    let ih = (pa[3].min(pb[3]) - pa[1].max(pb[1])).max(0.0);
    let inter = iw * ih;
    let area = |p: [f64; 4]| (p[2] - p[0]) * (p[3] - p[1]);
    let union = area(pa) + area(pb) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Bilinear crop of `bx` to a 224×74×3 patch in [0, 1].
pub fn crop_resize(frame: &Frame, bx: &RoiBox) -> Result<Patch> {
    crop_resize_to(frame, bx, PATCH_W, PATCH_H)
}

pub fn crop_resize_to(frame: &Frame, bx: &RoiBox, out_w: usize, out_h: usize) -> Result<Patch> {
    let [x0, y0, x1, y1] = bx.to_pixels(frame.width, frame.height);
    let (bw, bh) = (x1 - x0, y1 - y0);
    if !bx.is_valid() || bw.round() < 1.0 || bh.round() < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate box {bx:?} ({bw:.2}×{bh:.2} px)"
        )));
    }
    let (sx, sy) = (bw / out_w as f64, bh / out_h as f64);
    let xmax = (frame.width - 1) as f64;
    let ymax = (frame.height - 1) as f64;
    let taps = |o: usize, origin: f64, step: f64, max: f64| {
        let f = snap((origin + (o as f64 + 0.5) * step - 0.5).clamp(0.0, max));
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(max as usize);
        (i0, i1, f - i0 as f64)
    };
    let xt: Vec<_> = (0..out_w).map(|o| taps(o, x0, sx, xmax)).collect();
    let yt: Vec<_> = (0..out_h).map(|o| taps(o, y0, sy, ymax)).collect();
    let mut data = Vec::with_capacity(out_w * out_h * 3);
    for c in 0..3 {
        let plane = frame.plane(c);
        for &(ya, yb, ty) in &yt {
            let ra = &plane[ya * frame.width..(ya + 1) * frame.width];
            let rb = &plane[yb * frame.width..(yb + 1) * frame.width];
            for &(xa, xb, tx) in &xt {
                let v = if tx == 0.0 && ty == 0.0 {
                    ra[xa] as f64
                } else {
                    let top = ra[xa] as f64 * (1.0 - tx) + ra[xb] as f64 * tx;
                    let bot = rb[xa] as f64 * (1.0 - tx) + rb[xb] as f64 * tx;
                    top * (1.0 - ty) + bot * ty
                };
                data.push(v / 255.0);
            }
        }
    }
    Patch::new(out_w, out_h, 3, data)
}

/// R's input: the frame as 80×48 grayscale in [0, 1].
pub fn roi_features(frame: &Frame) -> Vec<f64> {
    frame.gray_downsample(FEATURE_W, FEATURE_H)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiTrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for RoiTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.004,
            weight_decay: 0.00005,
            momentum: 0.9,
            epochs: 60,
            batch_size: 32,
            hidden: vec![256, 64],
            leaky_slope: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RoiMeta {
    input: Standardizer,
    target: Standardizer,
}

/// Trained localizer: standardized features → network → de-standardized,
/// clamped box.
#[derive(Debug, Clone)]
pub struct RoiModel {
    pub net: Network,
    input: Standardizer,
    target: Standardizer,
}

pub fn build_r(hidden: &[usize], slope: f64, seed: u64) -> Result<Network> {
    let mut b = Network::builder(FEATURE_W * FEATURE_H, seed);
    for &h in hidden {
        b = b.dense(h).leaky_relu(slope);
    }
    b.dense(4).build()
}

/// Minimizes the squared error between predicted and labelled box
/// coordinates (in standardized coordinates).
pub fn train_roi(
    features: &[Vec<f64>],
    boxes: &[RoiBox],
    cfg: &RoiTrainConfig,
) -> Result<(RoiModel, FitHistory)> {
    if features.is_empty() || features.len() != boxes.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty frames and labels, got {} and {}",
            features.len(),
            boxes.len()
        )));
    }
    let din = FEATURE_W * FEATURE_H;
    if let Some(f) = features.iter().find(|f| f.len() != din) {
        return Err(Error::Shape(format!("feature vector of {} values, expected {din}", f.len())));
    }
    let mut x: Vec<f64> = features.concat();
    let mut y: Vec<f64> = boxes.iter().flat_map(|b| b.as_array()).collect();
    let input = Standardizer::fit_global(&x, din)?;
    let target = Standardizer::fit(&y, 4, 1e-3)?;
    input.apply_in_place(&mut x);
    target.apply_in_place(&mut y);
    let mut net = build_r(&cfg.hidden, cfg.leaky_slope, cfg.seed)?;
    let fit = FitConfig {
        sgd: SgdConfig::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)?,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed ^ 0x5eed_0001,
        input_noise: 0.0,
    };
    let history = fit_mse(&mut net, &x, &y, &fit, ROLE)?;
    Ok((RoiModel { net, input, target }, history))
}

impl RoiModel {
    pub fn detect_features(&self, features: &[f64]) -> Result<RoiBox> {
        let x = self.input.apply(features)?;
        let mut out = self.net.infer(&Tensor::from_raw(vec![1, x.len()], x))?.into_data();
        self.target.invert_in_place(&mut out);
        Ok(RoiBox::clamped(out[0], out[1], out[2], out[3]))
    }

    pub fn detect_roi(&self, frame: &Frame) -> Result<RoiBox> {
        self.detect_features(&roi_features(frame))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_value(RoiMeta {
            input: self.input.clone(),
            target: self.target.clone(),
        })?;
        encode_params(&self.net, Some(ROLE), meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (net, header) = decode_params(bytes)?;
        let meta: RoiMeta = serde_json::from_value(header.meta)
            .map_err(|e| Error::CorruptFile(format!("R normalization block: {e}")))?;
        if net.input_dim() != meta.input.width() || net.output_dim() != 4 {
            return Err(Error::CorruptFile("R network and normalization disagree".into()));
        }
        Ok(Self {
            net,
            input: meta.input,
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiLabel {
    pub frame_index: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl RoiLabel {
    pub fn new(frame_index: usize, b: &RoiBox) -> Self {
        Self {
            frame_index,
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        }
    }

    pub fn roi(&self) -> RoiBox {
        RoiBox {
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
        }
    }
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[RoiLabel]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serde_json::to_vec_pretty(labels)?).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<RoiLabel>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
