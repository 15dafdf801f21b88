//! Synthetic face clips with a known blood-volume pulse, RoI trajectory and
//! heart rate.
//!
//! Frames are rendered lazily and deterministically from `(seed, frame
//! index)`: a full-resolution clip is far too large to hold in memory.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use rand::{Rng, RngCore, SeedableRng};
use statrs::distribution::ContinuousCDF;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{quantize, Frame};
use crate::roi::RoiBox;

pub const DEFAULT_WIDTH: usize = 800;
pub const DEFAULT_HEIGHT: usize = 480;
pub const DEFAULT_FPS: f64 = 22.0;
pub const DEFAULT_HARMONICS: [f64; 3] = [1.0, 0.3, 0.1];
pub const DEFAULT_PULSE_GAIN: [f64; 3] = [0.004, 0.01, 0.006];
pub const DEFAULT_SKIN: [f64; 3] = [0.78, 0.56, 0.46];
pub const DEFAULT_TEXTURE_SD: f64 = 0.02;
/// Nominal RoI size as a fraction of a 800×480 frame (224×74 px).
pub const ROI_W: f64 = 0.28;
pub const ROI_H: f64 = 74.0 / 480.0;

const CLIP_FORMAT: &str = "pulsebench-clip";
const NOISE_TABLE_BITS: u32 = 16;
const CLIP_VERSION: u32 = 1;

/// Standard-normal quantiles at the midpoints of 2^16 equal-probability
/// cells. Indexing with 16 uniform bits samples the normal to well below
/// 8-bit pixel resolution (tails truncated near ±4.3σ).
fn normal_table() -> &'static [f32] {
    static TABLE: OnceLock<Vec<f32>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = 1usize << NOISE_TABLE_BITS;
        let unit = statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal");
        let raw: Vec<f64> = (0..n)
            .map(|i| unit.inverse_cdf((i as f64 + 0.5) / n as f64))
            .collect();
        // rescale so the table itself has exactly unit variance
        let sd = (raw.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        raw.iter().map(|v| (v / sd) as f32).collect()
    })
}

/// Fast i.i.d. standard-normal stream: four table draws per 64-bit word.
struct NoiseStream {
    rng: Xoshiro256PlusPlus,
    word: u64,
    left: u32,
    table: &'static [f32],
}

impl NoiseStream {
    fn new(seed: u64) -> Self {
        Self {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            word: 0,
            left: 0,
            table: normal_table(),
        }
    }

    #[inline]
    fn next(&mut self) -> f64 {
        if self.left == 0 {
            self.word = self.rng.next_u64();
            self.left = 4;
        }
        let i = (self.word & 0xffff) as usize;
        self.word >>= NOISE_TABLE_BITS;
        self.left -= 1;
        self.table[i] as f64
    }
}

/// SplitMix64 finalizer; derives independent sub-seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvpSpec {
    pub hr_bpm: f64,
    pub fps: f64,
    pub length_frames: usize,
    /// Fundamental and two harmonics.
    pub harmonic_amplitudes: [f64; 3],
    pub phase: f64,
}

impl BvpSpec {
    pub fn new(hr_bpm: f64, fps: f64, length_frames: usize) -> Self {
        Self {
            hr_bpm,
            fps,
            length_frames,
            harmonic_amplitudes: DEFAULT_HARMONICS,
            phase: 0.0,
        }
    }
}

/// Pulse waveform `Σ a_k cos(k(ωt + φ)) / Σ|a_k|`, bounded by 1.
pub fn gen_bvp(spec: &BvpSpec) -> Result<Vec<f64>> {
    let hr_hz = spec.hr_bpm / 60.0;
    if !(spec.fps > 0.0) || !(spec.hr_bpm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "hr {} bpm at {} fps",
            spec.hr_bpm, spec.fps
        )));
    }
    if hr_hz >= spec.fps / 2.0 {
        return Err(Error::Nyquist {
            hr_hz,
            nyquist_hz: spec.fps / 2.0,
        });
    }
    let norm: f64 = spec.harmonic_amplitudes.iter().map(|a| a.abs()).sum();
    if norm == 0.0 {
        return Ok(vec![0.0; spec.length_frames]);
    }
    let w = 2.0 * PI * hr_hz;
    Ok((0..spec.length_frames)
        .map(|i| {
            let arg = w * i as f64 / spec.fps + spec.phase;
            spec.harmonic_amplitudes
                .iter()
                .enumerate()
                .map(|(k, a)| a * ((k + 1) as f64 * arg).cos())
                .sum::<f64>()
                / norm
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    /// Pixel rectangle.
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub color: [f64; 3],
    /// Half-open frame range `[start, end)`.
    pub frames: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub frame_w: usize,
    pub frame_h: usize,
    pub fps: f64,
    pub skin_base_rgb: [f64; 3],
    pub pulse_gain_rgb: [f64; 3],
    pub background_rgb: [f64; 3],
    pub texture_sd: f64,
    pub noise_sigma: f64,
    pub occlusion: Option<Occlusion>,
    pub roi_trajectory: Vec<RoiBox>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn static_scene(n_frames: usize, seed: u64) -> Self {
        Self {
            frame_w: DEFAULT_WIDTH,
            frame_h: DEFAULT_HEIGHT,
            fps: DEFAULT_FPS,
            skin_base_rgb: DEFAULT_SKIN,
            pulse_gain_rgb: DEFAULT_PULSE_GAIN,
            background_rgb: [0.30, 0.33, 0.38],
            texture_sd: DEFAULT_TEXTURE_SD,
            noise_sigma: 0.0,
            occlusion: None,
            roi_trajectory: vec![RoiBox { cx: 0.5, cy: 0.36, w: ROI_W, h: ROI_H }; n_frames],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_w < 8 || self.frame_h < 8 || !(self.fps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scene {}×{} at {} fps",
                self.frame_w, self.frame_h, self.fps
            )));
        }
        if self.pulse_gain_rgb.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::InvalidArgument("pulse gains must be non-negative".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.texture_sd >= 0.0) {
            return Err(Error::InvalidArgument("noise and texture sd must be non-negative".into()));
        }
        if let Some(i) = self.roi_trajectory.iter().position(|b| !b.is_valid()) {
            return Err(Error::InvalidArgument(format!("trajectory box {i} leaves the frame")));
        }
        if let Some(o) = &self.occlusion {
            check_rect(o.x0, o.y0, o.w, o.h, self.frame_w, self.frame_h)?;
        }
        Ok(())
    }
}

fn check_rect(x0: usize, y0: usize, w: usize, h: usize, fw: usize, fh: usize) -> Result<()> {
    if w == 0 || h == 0 || x0 + w > fw || y0 + h > fh {
        return Err(Error::InvalidArgument(format!(
            "rectangle ({x0},{y0}) {w}×{h} is outside the {fw}×{fh} frame"
        )));
    }
    Ok(())
}

/// Per-clip ground truth stored alongside the frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub n_frames: usize,
    pub truth_hr_bpm: f64,
    pub seed: u64,
    pub truth_roi: Vec<RoiBox>,
    /// Clean (noise-free, unquantized) RoI channel means per frame.
    pub truth_signal: Vec<[f64; 3]>,
}

impl ClipMeta {
    pub fn truth_channel(&self, c: usize) -> Vec<f64> {
        self.truth_signal.iter().map(|s| s[c]).collect()
    }
}

/// Anything that yields the frames of one clip in order.
pub trait FrameSource: Send + Sync {
    fn meta(&self) -> &ClipMeta;
    fn frame(&self, t: usize) -> Result<Frame>;

    fn n_frames(&self) -> usize {
        self.meta().n_frames
    }
}

/// Face layout in pixels for one frame, derived from the RoI box.
#[derive(Debug, Clone, Copy)]
struct FaceGeom {
    ox: i64,
    oy: i64,
    rx: f64,
    ry: f64,
    rw: f64,
    rh: f64,
    /// RoI pixel rectangle, half-open.
    roi: [i64; 4],
}

impl FaceGeom {
    fn new(b: &RoiBox, fw: usize, fh: usize) -> Self {
        let (rw, rh) = (b.w * fw as f64, b.h * fh as f64);
        let (rcx, rcy) = (b.cx * fw as f64, b.cy * fh as f64);
        let [x0, y0, x1, y1] = b.to_pixels(fw, fh);
        Self {
            ox: rcx.round() as i64,
            oy: (rcy + 1.05 * rh).round() as i64,
            rx: 0.68 * rw,
            ry: 2.6 * rh,
            rw,
            rh,
            roi: [x0.round() as i64, y0.round() as i64, x1.round() as i64, y1.round() as i64],
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Region {
    Background,
    Skin,
    Hair,
    Eye,
    Mouth,
}

const HAIR: [f64; 3] = [0.20, 0.14, 0.10];
const EYE: [f64; 3] = [0.12, 0.10, 0.10];
const MOUTH: [f64; 3] = [0.55, 0.25, 0.25];

fn in_ellipse(dx: f64, dy: f64, rx: f64, ry: f64) -> bool {
    (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0
}

/// Lazily rendered synthetic clip.
pub struct SyntheticClip {
    scene: SceneSpec,
    bvp: Vec<f64>,
    meta: ClipMeta,
    texture: Vec<f32>,
    tex_w: usize,
    tex_h: usize,
    tex_off: (i64, i64),
}

impl SyntheticClip {
    pub fn new(scene: SceneSpec, bvp: &BvpSpec) -> Result<Self> {
        scene.validate()?;
        let samples = gen_bvp(bvp)?;
        if samples.len() != scene.roi_trajectory.len() {
            return Err(Error::Shape(format!(
                "{} pulse samples vs {} trajectory boxes",
                samples.len(),
                scene.roi_trajectory.len()
            )));
        }
        if (bvp.fps - scene.fps).abs() > 1e-12 {
            return Err(Error::InvalidArgument("pulse and scene frame rates differ".into()));
        }
        let geoms: Vec<FaceGeom> = scene
            .roi_trajectory
            .iter()
            .map(|b| FaceGeom::new(b, scene.frame_w, scene.frame_h))
            .collect();
        let rx = geoms.iter().map(|g| g.rx).fold(1.0, f64::max).ceil() as i64 + 2;
        let ry = geoms.iter().map(|g| g.ry).fold(1.0, f64::max).ceil() as i64 + 2;
        let (tex_w, tex_h) = ((2 * rx + 1) as usize, (2 * ry + 1) as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene.seed, 0x7e47));
        let texture: Vec<f32> = (0..3 * tex_w * tex_h)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (scene.texture_sd * z) as f32
            })
            .collect();
        let mut clip = Self {
            meta: ClipMeta {
                width: scene.frame_w,
                height: scene.frame_h,
                fps: scene.fps,
                n_frames: samples.len(),
                truth_hr_bpm: bvp.hr_bpm,
                seed: scene.seed,
                truth_roi: scene.roi_trajectory.clone(),
                truth_signal: Vec::new(),
            },
            scene,
            bvp: samples,
            texture,
            tex_w,
            tex_h,
            tex_off: (rx, ry),
        };
        let sat = clip.texture_sat();
        clip.meta.truth_signal = geoms
            .iter()
            .enumerate()
            .map(|(t, g)| clip.fast_roi_mean(&sat, t, g).unwrap_or_else(|| clip.clean_roi_mean(t, g)))
            .collect();
        Ok(clip)
    }

    pub fn scene(&self) -> &SceneSpec {
        &self.scene
    }

    pub fn bvp(&self) -> &[f64] {
        &self.bvp
    }

    #[inline]
    fn tex(&self, c: usize, g: &FaceGeom, x: i64, y: i64) -> f64 {
        let u = (x - g.ox + self.tex_off.0).clamp(0, self.tex_w as i64 - 1) as usize;
        let v = (y - g.oy + self.tex_off.1).clamp(0, self.tex_h as i64 - 1) as usize;
        self.texture[(c * self.tex_h + v) * self.tex_w + u] as f64
    }

    fn region(&self, g: &FaceGeom, x: i64, y: i64) -> Region {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (dx, dy) = (px - g.ox as f64, py - g.oy as f64);
        if !in_ellipse(dx, dy, g.rx, g.ry) {
            return Region::Background;
        }
        let rcy = g.oy as f64 - 1.05 * g.rh;
        let ry = py - rcy;
        if ry < -0.95 * g.rh {
            return Region::Hair;
        }
        let (erx, ery) = (0.09 * g.rw, 0.13 * g.rh);
        if in_ellipse(dx.abs() - 0.25 * g.rw, ry - 0.95 * g.rh, erx, ery) {
            return Region::Eye;
        }
        if in_ellipse(dx, ry - 2.5 * g.rh, 0.18 * g.rw, 0.12 * g.rh) {
            return Region::Mouth;
        }
        Region::Skin
    }

    /// Per-channel summed-area tables of the texture, `(tex_w+1)×(tex_h+1)`.
    fn texture_sat(&self) -> Vec<f64> {
        let (w, h) = (self.tex_w + 1, self.tex_h + 1);
        let mut sat = vec![0.0; 3 * w * h];
        for c in 0..3 {
            let base = c * w * h;
            for v in 0..self.tex_h {
                let mut run = 0.0;
                for u in 0..self.tex_w {
                    run += self.texture[(c * self.tex_h + v) * self.tex_w + u] as f64;
                    sat[base + (v + 1) * w + u + 1] = sat[base + v * w + u + 1] + run;
                }
            }
        }
        sat
    }

    /// RoI mean when the rectangle lies entirely on skin inside the frame.
    fn fast_roi_mean(&self, sat: &[f64], t: usize, g: &FaceGeom) -> Option<[f64; 3]> {
        let [x0, y0, x1, y1] = g.roi;
        if x0 < 0 || y0 < 0 || x1 > self.scene.frame_w as i64 || y1 > self.scene.frame_h as i64 || x1 <= x0 || y1 <= y0 {
            return None;
        }
        for (x, y) in [(x0, y0), (x1 - 1, y0), (x0, y1 - 1), (x1 - 1, y1 - 1)] {
            if !matches!(self.region(g, x, y), Region::Skin) {
                return None;
            }
        }
        let rcy = g.oy as f64 - 1.05 * g.rh;
        let bottom = y1 as f64 - 0.5;
        let eye_top = rcy + 0.95 * g.rh - 0.13 * g.rh;
        let mouth_top = rcy + 2.5 * g.rh - 0.12 * g.rh;
        if bottom >= eye_top.min(mouth_top) {
            return None;
        }
        let u0 = x0 - g.ox + self.tex_off.0;
        let v0 = y0 - g.oy + self.tex_off.1;
        let (u1, v1) = (u0 + (x1 - x0), v0 + (y1 - y0));
        if u0 < 0 || v0 < 0 || u1 > self.tex_w as i64 || v1 > self.tex_h as i64 {
            return None;
        }
        let (w, h) = (self.tex_w + 1, self.tex_h + 1);
        let n = ((x1 - x0) * (y1 - y0)) as f64;
        let at = |c: usize, u: i64, v: i64| sat[c * w * h + v as usize * w + u as usize];
        Some(std::array::from_fn(|c| {
            let tex = at(c, u1, v1) - at(c, u0, v1) - at(c, u1, v0) + at(c, u0, v0);
            self.scene.skin_base_rgb[c] + self.scene.pulse_gain_rgb[c] * self.bvp[t] + tex / n
        }))
    }

    fn clean_roi_mean(&self, t: usize, g: &FaceGeom) -> [f64; 3] {
        let [x0, y0, x1, y1] = g.roi;
        let mut out = [0.0; 3];
        let mut n = 0usize;
        for y in y0.max(0)..y1.min(self.scene.frame_h as i64) {
            for x in x0.max(0)..x1.min(self.scene.frame_w as i64) {
                n += 1;
                for (c, o) in out.iter_mut().enumerate() {
                    *o += self.clean_value(c, t, g, x, y);
                }
            }
        }
        out.map(|v| v / n.max(1) as f64)
    }

    fn clean_value(&self, c: usize, t: usize, g: &FaceGeom, x: i64, y: i64) -> f64 {
        match self.region(g, x, y) {
            Region::Background => self.background(c, y),
            Region::Skin => {
                self.scene.skin_base_rgb[c]
                    + self.scene.pulse_gain_rgb[c] * self.bvp[t]
                    + self.tex(c, g, x, y)
            }
            Region::Hair => HAIR[c] + self.tex(c, g, x, y),
            Region::Eye => EYE[c] + self.tex(c, g, x, y),
            Region::Mouth => MOUTH[c] + self.tex(c, g, x, y),
        }
    }

    #[inline]
    fn background(&self, c: usize, y: i64) -> f64 {
        self.scene.background_rgb[c] + 0.08 * (y as f64 / self.scene.frame_h as f64 - 0.5)
    }

    /// Pixel span `[a, b)` of an ellipse chord on row `py`, or `None`.
    fn chord(cx: f64, cy: f64, rx: f64, ry: f64, py: f64, width: usize) -> Option<(usize, usize)> {
        let d = (py - cy) / ry;
        if d.abs() > 1.0 {
            return None;
        }
        let hw = rx * (1.0 - d * d).sqrt();
        let a = (cx - hw - 0.5).ceil().max(0.0);
        let b = ((cx + hw - 0.5).floor() + 1.0).min(width as f64);
        (b > a).then_some((a as usize, b as usize))
    }

    fn paint_face_row(&self, row: &mut [f64], c: usize, g: &FaceGeom, y: i64, pulse: f64) {
        let w = row.len();
        let py = y as f64 + 0.5;
        let (ox, oy) = (g.ox as f64, g.oy as f64);
        let Some((a, b)) = Self::chord(ox, oy, g.rx, g.ry, py, w) else {
            return;
        };
        let v = (y - g.oy + self.tex_off.1).clamp(0, self.tex_h as i64 - 1) as usize;
        let tex_row = &self.texture[(c * self.tex_h + v) * self.tex_w..(c * self.tex_h + v + 1) * self.tex_w];
        let u0 = self.tex_off.0 - g.ox;
        let tex = |x: usize| tex_row[(x as i64 + u0).clamp(0, self.tex_w as i64 - 1) as usize] as f64;
        let rcy = oy - 1.05 * g.rh;
        if py - rcy < -0.95 * g.rh {
            for x in a..b {
                row[x] = HAIR[c] + tex(x);
            }
            return;
        }
        let skin = self.scene.skin_base_rgb[c] + pulse;
        for x in a..b {
            row[x] = skin + tex(x);
        }
        let eye_y = rcy + 0.95 * g.rh;
        let features = [
            (ox - 0.25 * g.rw, eye_y, 0.09 * g.rw, 0.13 * g.rh, EYE[c]),
            (ox + 0.25 * g.rw, eye_y, 0.09 * g.rw, 0.13 * g.rh, EYE[c]),
            (ox, rcy + 2.5 * g.rh, 0.18 * g.rw, 0.12 * g.rh, MOUTH[c]),
        ];
        for (fx, fy, rx, ry, col) in features {
            if let Some((fa, fb)) = Self::chord(fx, fy, rx, ry, py, w) {
                for x in fa.max(a)..fb.min(b) {
                    row[x] = col + tex(x);
                }
            }
        }
    }

    /// Renders frame `t`; depends only on the scene and `t`.
    pub fn render(&self, t: usize) -> Result<Frame> {
        if t >= self.meta.n_frames {
            return Err(Error::InvalidArgument(format!(
                "frame {t} out of range ({} frames)",
                self.meta.n_frames
            )));
        }
        let (fw, fh) = (self.scene.frame_w, self.scene.frame_h);
        let g = FaceGeom::new(&self.scene.roi_trajectory[t], fw, fh);
        let n = fw * fh;
        let mut data = vec![0u8; 3 * n];
        let sigma = self.scene.noise_sigma;
        let mut noise = NoiseStream::new(mix_seed(self.scene.seed, 0x1000 + t as u64));
        let pulse = self.scene.pulse_gain_rgb.map(|k| k * self.bvp[t]);
        let mut row = vec![0.0f64; fw];
        for c in 0..3 {
            let plane = &mut data[c * n..(c + 1) * n];
            for y in 0..fh {
                row.fill(self.background(c, y as i64));
                self.paint_face_row(&mut row, c, &g, y as i64, pulse[c]);
                let out = &mut plane[y * fw..(y + 1) * fw];
                if sigma > 0.0 {
                    for (o, v) in out.iter_mut().zip(&row) {
                        *o = quantize(v + sigma * noise.next());
                    }
                } else {
                    for (o, v) in out.iter_mut().zip(&row) {
                        *o = quantize(*v);
                    }
                }
            }
        }
        if let Some(o) = &self.scene.occlusion {
            if (o.frames.0..o.frames.1).contains(&t) {
                fill_rect(&mut data, fw, fh, o.x0, o.y0, o.w, o.h, o.color);
            }
        }
        Frame::new(fw, fh, data)
    }
}

impl FrameSource for SyntheticClip {
    fn meta(&self) -> &ClipMeta {
        &self.meta
    }

    fn frame(&self, t: usize) -> Result<Frame> {
        self.render(t)
    }
}

#[allow(clippy::too_many_arguments)]
fn fill_rect(data: &mut [u8], fw: usize, fh: usize, x0: usize, y0: usize, w: usize, h: usize, color: [f64; 3]) {
    let n = fw * fh;
    for (c, col) in color.iter().enumerate() {
        let q = quantize(*col);
        for y in y0..y0 + h {
            data[c * n + y * fw + x0..c * n + y * fw + x0 + w].fill(q);
        }
    }
}

// ---------------------------------------------------------------------------
// corruption

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    Gaussian { sigma: f64 },
    Occlusion { x0: usize, y0: usize, w: usize, h: usize, color: [f64; 3] },
    /// Box blur with an odd `k × k` kernel.
    Blur { k: usize },
}

/// A degraded value together with the clean original it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted<T> {
    pub degraded: T,
    pub clean: T,
}

pub fn corrupt_frame(frame: &Frame, kind: &Corruption, seed: u64) -> Result<Corrupted<Frame>> {
    let mut out = frame.clone();
    match *kind {
        Corruption::Gaussian { sigma } => {
            if !(sigma >= 0.0) {
                return Err(Error::InvalidArgument(format!("sigma must be ≥ 0, got {sigma}")));
            }
            if sigma > 0.0 {
                let mut noise = NoiseStream::new(seed);
                for v in out.data.iter_mut() {
                    *v = quantize(*v as f64 / 255.0 + sigma * noise.next());
                }
            }
        }
        Corruption::Occlusion { x0, y0, w, h, color } => {
            check_rect(x0, y0, w, h, frame.width, frame.height)?;
            fill_rect(&mut out.data, frame.width, frame.height, x0, y0, w, h, color);
        }
        Corruption::Blur { k } => {
            if k == 0 || k % 2 == 0 {
                return Err(Error::InvalidArgument(format!("blur kernel must be odd, got {k}")));
            }
            for c in 0..3 {
                let src: Vec<f64> = frame.plane(c).iter().map(|&v| v as f64).collect();
                let blurred = box_blur(&src, frame.width, frame.height, k / 2);
                for (d, v) in out.plane_mut(c).iter_mut().zip(blurred) {
                    *d = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Ok(Corrupted {
        degraded: out,
        clean: frame.clone(),
    })
}

fn box_blur(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -(r as i64)..=(r as i64) {
                    let (xx, yy) = if horizontal {
                        ((x as i64 + d).clamp(0, w as i64 - 1) as usize, y)
                    } else {
                        (x, (y as i64 + d).clamp(0, h as i64 - 1) as usize)
                    };
                    s += src[yy * w + xx];
                }
                out[y * w + x] = s / (2 * r + 1) as f64;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Adds i.i.d. `N(0, σ²)` noise to a signal.
pub fn corrupt_signal(x: &[f64], sigma: f64, seed: u64) -> Result<Corrupted<Vec<f64>>> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be ≥ 0, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let degraded = x
        .iter()
        .map(|v| {
            if sigma == 0.0 {
                *v
            } else {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + sigma * z
            }
        })
        .collect();
    Ok(Corrupted {
        degraded,
        clean: x.to_vec(),
    })
}

/// Wraps a source so that every frame is corrupted with a per-frame seed.
pub struct CorruptedSource<S> {
    pub inner: S,
    pub kind: Corruption,
    pub seed: u64,
}

impl<S: FrameSource> FrameSource for CorruptedSource<S> {
    fn meta(&self) -> &ClipMeta {
        self.inner.meta()
    }

    fn frame(&self, t: usize) -> Result<Frame> {
        let f = self.inner.frame(t)?;
        Ok(corrupt_frame(&f, &self.kind, mix_seed(self.seed, t as u64))?.degraded)
    }
}

// ---------------------------------------------------------------------------
// datasets

/// Scene parameters shared by every clip of a dataset; per-clip variation
/// (skin tone, motion, texture, pulse phase) is drawn from the clip seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneDefaults {
    pub frame_w: usize,
    pub frame_h: usize,
    pub fps: f64,
    pub skin_base_rgb: [f64; 3],
    /// Uniform per-channel jitter half-width applied to the skin base.
    pub skin_jitter: f64,
    pub pulse_gain_rgb: [f64; 3],
    pub harmonic_amplitudes: [f64; 3],
    pub texture_sd: f64,
    pub noise_sigma: f64,
    /// Peak head-motion amplitude as a fraction of the frame.
    pub motion: f64,
}

impl Default for SceneDefaults {
    fn default() -> Self {
        Self {
            frame_w: DEFAULT_WIDTH,
            frame_h: DEFAULT_HEIGHT,
            fps: DEFAULT_FPS,
            skin_base_rgb: DEFAULT_SKIN,
            skin_jitter: 0.06,
            pulse_gain_rgb: DEFAULT_PULSE_GAIN,
            harmonic_amplitudes: DEFAULT_HARMONICS,
            texture_sd: DEFAULT_TEXTURE_SD,
            noise_sigma: 0.0,
            motion: 0.03,
        }
    }
}

/// Range of RoI placements used by clips and by the localizer corpus.
pub const CX_RANGE: (f64, f64) = (0.32, 0.68);
pub const CY_RANGE: (f64, f64) = (0.28, 0.40);
pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);

fn smooth_trajectory(rng: &mut ChaCha8Rng, n: usize, fps: f64, motion: f64) -> Vec<RoiBox> {
    let s = rng.gen_range(SCALE_RANGE.0..SCALE_RANGE.1);
    let (w, h) = (ROI_W * s, ROI_H * s);
    let cx0 = rng.gen_range(CX_RANGE.0 + motion..CX_RANGE.1 - motion);
    let cy0 = rng.gen_range(CY_RANGE.0 + motion / 2.0..CY_RANGE.1 - motion / 2.0);
    let ax = rng.gen_range(0.0..=motion);
    let ay = rng.gen_range(0.0..=motion / 2.0);
    let (px, py) = (rng.gen_range(4.0..10.0), rng.gen_range(3.0..8.0));
    let (phx, phy) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    (0..n)
        .map(|i| {
            let t = i as f64 / fps;
            RoiBox::clamped(
                cx0 + ax * (2.0 * PI * t / px + phx).sin(),
                cy0 + ay * (2.0 * PI * t / py + phy).sin(),
                w,
                h,
            )
        })
        .collect()
}

fn jittered_skin(rng: &mut ChaCha8Rng, d: &SceneDefaults) -> [f64; 3] {
    let shade = rng.gen_range(-d.skin_jitter..=d.skin_jitter);
    d.skin_base_rgb
        .map(|v| (v + shade + rng.gen_range(-d.skin_jitter..=d.skin_jitter) / 3.0).clamp(0.05, 0.95))
}

/// Builds clip `seed` at heart rate `hr_bpm`; fully determined by its inputs.
pub fn synth_clip(d: &SceneDefaults, hr_bpm: f64, seed: u64, n_frames: usize) -> Result<SyntheticClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xc11b));
    let skin = jittered_skin(&mut rng, d);
    let bg_shift = rng.gen_range(-0.08..0.08);
    let trajectory = smooth_trajectory(&mut rng, n_frames, d.fps, d.motion);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let scene = SceneSpec {
        frame_w: d.frame_w,
        frame_h: d.frame_h,
        fps: d.fps,
        skin_base_rgb: skin,
        pulse_gain_rgb: d.pulse_gain_rgb,
        background_rgb: [0.30 + bg_shift, 0.33 + bg_shift, 0.38 + bg_shift],
        texture_sd: d.texture_sd,
        noise_sigma: d.noise_sigma,
        occlusion: None,
        roi_trajectory: trajectory,
        seed,
    };
    let bvp = BvpSpec {
        hr_bpm,
        fps: d.fps,
        length_frames: n_frames,
        harmonic_amplitudes: d.harmonic_amplitudes,
        phase,
    };
    SyntheticClip::new(scene, &bvp)
}

/// Single frames at scattered placements, for localizer training: each
/// frame comes from its own scene (skin, texture, background, placement).
pub fn roi_corpus_frame(d: &SceneDefaults, seed: u64) -> Result<(Frame, RoiBox)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0c0c));
    let skin = jittered_skin(&mut rng, d);
    let s = rng.gen_range(SCALE_RANGE.0..SCALE_RANGE.1);
    let b = RoiBox::clamped(
        rng.gen_range(CX_RANGE.0..CX_RANGE.1),
        rng.gen_range(CY_RANGE.0..CY_RANGE.1),
        ROI_W * s,
        ROI_H * s,
    );
    let bg_shift = rng.gen_range(-0.08..0.08);
    let hr = rng.gen_range(50.0..110.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let scene = SceneSpec {
        frame_w: d.frame_w,
        frame_h: d.frame_h,
        fps: d.fps,
        skin_base_rgb: skin,
        pulse_gain_rgb: d.pulse_gain_rgb,
        background_rgb: [0.30 + bg_shift, 0.33 + bg_shift, 0.38 + bg_shift],
        texture_sd: d.texture_sd,
        noise_sigma: d.noise_sigma,
        occlusion: None,
        roi_trajectory: vec![b],
        seed,
    };
    let bvp = BvpSpec {
        hr_bpm: hr,
        fps: d.fps,
        length_frames: 1,
        harmonic_amplitudes: d.harmonic_amplitudes,
        phase,
    };
    Ok((SyntheticClip::new(scene, &bvp)?.render(0)?, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_clips: usize,
    pub hr_range: (f64, f64),
    pub duration_s: f64,
    pub scene: SceneDefaults,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn n_frames(&self) -> usize {
        (self.duration_s * self.scene.fps).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub clip_path: String,
    pub fps: f64,
    pub n_frames: usize,
    pub truth_hr_bpm: f64,
    pub seed: u64,
}

/// Draws per-clip heart rates and seeds without rendering anything.
pub fn plan_dataset(spec: &DatasetSpec) -> Result<Vec<ManifestRow>> {
    if spec.n_clips == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one clip".into()));
    }
    let (lo, hi) = spec.hr_range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::InvalidArgument(format!("bad heart-rate range [{lo}, {hi}]")));
    }
    let n_frames = spec.n_frames();
    if n_frames < 2 {
        return Err(Error::InvalidArgument(format!("{} s is too short", spec.duration_s)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n_clips)
        .map(|i| {
            let hr = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            ManifestRow {
                clip_path: format!("clip_{i:04}.clip"),
                fps: spec.scene.fps,
                n_frames,
                truth_hr_bpm: hr,
                seed: mix_seed(spec.seed, 0xd00d + i as u64),
            }
        })
        .collect())
}

impl ManifestRow {
    pub fn synth(&self, d: &SceneDefaults) -> Result<SyntheticClip> {
        synth_clip(d, self.truth_hr_bpm, self.seed, self.n_frames)
    }

    pub fn clip_id(&self) -> String {
        Path::new(&self.clip_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.clip_path.clone())
    }
}

/// Renders every clip of `spec` into `out_dir` and writes `manifest.json`.
pub fn gen_dataset(spec: &DatasetSpec, out_dir: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows = plan_dataset(spec)?;
    for row in &rows {
        let clip = row.synth(&spec.scene)?;
        write_clip(dir.join(&row.clip_path), &clip)?;
    }
    write_manifest(dir.join("manifest.json"), &rows)?;
    let dspec = dir.join("dataset.json");
    fs::write(&dspec, serde_json::to_vec_pretty(spec)?).map_err(|e| Error::io(&dspec, e))?;
    Ok(rows)
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serde_json::to_vec_pretty(rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Resolves a manifest row's clip path relative to the manifest location.
pub fn clip_location(manifest: &Path, row: &ManifestRow) -> PathBuf {
    let p = Path::new(&row.clip_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}

// ---------------------------------------------------------------------------
// clip files: one JSON header line, then raw planar RGB8 frames

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClipHeader {
    format: String,
    version: u32,
    frame_bytes: usize,
    #[serde(flatten)]
    meta: ClipMeta,
}

pub fn write_clip(path: impl AsRef<Path>, source: &dyn FrameSource) -> Result<()> {
    let path = path.as_ref();
    let meta = source.meta().clone();
    let header = ClipHeader {
        format: CLIP_FORMAT.into(),
        version: CLIP_VERSION,
        frame_bytes: 3 * meta.width * meta.height,
        meta,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for t in 0..header.meta.n_frames {
        let f = source.frame(t)?;
        if f.width != header.meta.width || f.height != header.meta.height {
            return Err(Error::Shape(format!("frame {t} has a different size")));
        }
        w.write_all(&f.data).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// File-backed clip; frames are read on demand by offset.
pub struct ClipFile {
    path: PathBuf,
    meta: ClipMeta,
    data_offset: u64,
    frame_bytes: usize,
    file: Mutex<File>,
}

impl ClipFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let io = |e| Error::io(&path, e);
        let mut reader = BufReader::new(File::open(&path).map_err(io)?);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line).map_err(io)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::CorruptFile(format!("{}: missing clip header", path.display())));
        }
        let header: ClipHeader = serde_json::from_slice(&line[..line.len() - 1])
            .map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))?;
        if header.format != CLIP_FORMAT || header.version != CLIP_VERSION {
            return Err(Error::CorruptFile(format!(
                "{}: not a version {CLIP_VERSION} clip file",
                path.display()
            )));
        }
        let m = &header.meta;
        if header.frame_bytes != 3 * m.width * m.height
            || m.truth_roi.len() != m.n_frames
            || m.truth_signal.len() != m.n_frames
        {
            return Err(Error::CorruptFile(format!("{}: inconsistent header", path.display())));
        }
        let file = File::open(&path).map_err(io)?;
        let len = file.metadata().map_err(io)?.len();
        let expected = line.len() as u64 + (header.frame_bytes * m.n_frames) as u64;
        if len != expected {
            return Err(Error::BlobLength {
                expected: expected as usize,
                actual: len as usize,
            });
        }
        Ok(Self {
            data_offset: line.len() as u64,
            frame_bytes: header.frame_bytes,
            meta: header.meta,
            file: Mutex::new(file),
            path,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl FrameSource for ClipFile {
    fn meta(&self) -> &ClipMeta {
        &self.meta
    }

    fn frame(&self, t: usize) -> Result<Frame> {
        if t >= self.meta.n_frames {
            return Err(Error::InvalidArgument(format!("frame {t} out of range")));
        }
        let mut buf = vec![0u8; self.frame_bytes];
        let mut f = self.file.lock().map_err(|_| Error::State("clip file lock poisoned".into()))?;
        let io = |e| Error::io(&self.path, e);
        f.seek(SeekFrom::Start(self.data_offset + (t * self.frame_bytes) as u64))
            .map_err(io)?;
        f.read_exact(&mut buf).map_err(io)?;
        Frame::new(self.meta.width, self.meta.height, buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::pearson;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn fft_peak_hz(x: &[f64], fps: f64) -> (f64, f64) {
        let n = x.len();
        let mean = x.iter().sum::<f64>() / n as f64;
        let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let k = (1..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
        (k as f64 * fps / n as f64, fps / n as f64)
    }

    #[test]
    fn bvp_peak_at_heart_rate() {
        for (hr, want) in [(72.0, 1.2), (55.0, 55.0 / 60.0)] {
            let x = gen_bvp(&BvpSpec::new(hr, 22.0, 2200)).unwrap();
            let (f, bin) = fft_peak_hz(&x, 22.0);
            assert!((f - want).abs() <= bin, "{hr}: {f} vs {want}");
            assert!(x.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn zero_amplitudes_give_zero_signal() {
        let mut s = BvpSpec::new(72.0, 22.0, 50);
        s.harmonic_amplitudes = [0.0; 3];
        assert!(gen_bvp(&s).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nyquist_violation() {
        assert!(matches!(
            gen_bvp(&BvpSpec::new(700.0, 22.0, 50)),
            Err(Error::Nyquist { .. })
        ));
    }

    fn small_scene(n: usize, seed: u64) -> SceneSpec {
        let mut s = SceneSpec::static_scene(n, seed);
        s.frame_w = 320;
        s.frame_h = 192;
        s
    }

    #[test]
    fn static_render_tracks_pulse() {
        let n = 120;
        let clip = SyntheticClip::new(small_scene(n, 4), &BvpSpec::new(80.0, 22.0, n)).unwrap();
        assert_eq!(clip.meta().truth_roi, clip.scene().roi_trajectory);
        let b = clip.meta().truth_roi[0];
        let [x0, y0, x1, y1] = b.to_pixels(320, 192).map(|v| v.round() as usize);
        let g: Vec<f64> = (0..n)
            .map(|t| {
                let f = clip.frame(t).unwrap();
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += f.at(1, x, y);
                    }
                }
                s / ((x1 - x0) * (y1 - y0)) as f64
            })
            .collect();
        let (r, _) = pearson(&g, clip.bvp()).unwrap();
        assert!(r >= 0.999, "r = {r}");
        let (r, _) = pearson(&clip.meta().truth_channel(1), clip.bvp()).unwrap();
        assert!(r > 0.999999);
    }

    #[test]
    fn renders_are_deterministic() {
        let mut s = small_scene(3, 9);
        s.noise_sigma = 0.02;
        let a = SyntheticClip::new(s.clone(), &BvpSpec::new(70.0, 22.0, 3)).unwrap();
        let b = SyntheticClip::new(s, &BvpSpec::new(70.0, 22.0, 3)).unwrap();
        assert_eq!(a.frame(2).unwrap(), b.frame(2).unwrap());
        assert_ne!(a.frame(1).unwrap(), a.frame(2).unwrap());
    }

    #[test]
    fn gaussian_corruption_statistics() {
        let f = Frame::filled(400, 250, [0.5; 3]);
        let same = corrupt_frame(&f, &Corruption::Gaussian { sigma: 0.0 }, 1).unwrap();
        assert_eq!(same.degraded, f);
        let c = corrupt_frame(&f, &Corruption::Gaussian { sigma: 0.05 }, 1).unwrap();
        assert_eq!(c.clean, f);
        let d: Vec<f64> = c
            .degraded
            .data
            .iter()
            .zip(&f.data)
            .map(|(a, b)| (*a as f64 - *b as f64) / 255.0)
            .collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((sd - 0.05).abs() < 0.02 * 0.05, "sd {sd}");
    }

    #[test]
    fn noise_table_moments() {
        let mut s = NoiseStream::new(11);
        let z: Vec<f64> = (0..400_000).map(|_| s.next()).collect();
        let n = z.len() as f64;
        let m = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        let kurt = z.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n / (var * var);
        assert!(m.abs() < 0.01, "mean {m}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
        assert!((kurt - 3.0).abs() < 0.05, "kurtosis {kurt}");
        let lag1 = z.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (n - 1.0);
        assert!(lag1.abs() < 0.01, "lag-1 correlation {lag1}");
    }

    #[test]
    fn signal_corruption() {
        let x: Vec<f64> = (0..100_000).map(|i| (i as f64).sin()).collect();
        assert_eq!(corrupt_signal(&x, 0.0, 3).unwrap().degraded, x);
        let a = corrupt_signal(&x, 0.05, 3).unwrap();
        let b = corrupt_signal(&x, 0.05, 4).unwrap();
        assert_ne!(a.degraded, b.degraded);
        for c in [a, b] {
            let d: Vec<f64> = c.degraded.iter().zip(&x).map(|(p, q)| p - q).collect();
            let sd = (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
            assert!((sd - 0.05).abs() < 0.001, "sd {sd}");
        }
    }

    #[test]
    fn occlusion_touches_only_the_rectangle() {
        let f = Frame::filled(60, 40, [0.3, 0.4, 0.5]);
        let kind = Corruption::Occlusion { x0: 10, y0: 5, w: 7, h: 4, color: [0.0, 1.0, 0.0] };
        let c = corrupt_frame(&f, &kind, 0).unwrap();
        for ch in 0..3 {
            for y in 0..40 {
                for x in 0..60 {
                    let inside = (10..17).contains(&x) && (5..9).contains(&y);
                    let want = if inside { [0u8, 255, 0][ch] } else { f.plane(ch)[y * 60 + x] };
                    assert_eq!(c.degraded.plane(ch)[y * 60 + x], want);
                }
            }
        }
        let bad = Corruption::Occlusion { x0: 55, y0: 5, w: 7, h: 4, color: [0.0; 3] };
        assert!(corrupt_frame(&f, &bad, 0).is_err());
    }

    #[test]
    fn blur_preserves_uniform_frames() {
        let f = Frame::filled(30, 20, [0.3, 0.4, 0.5]);
        assert_eq!(corrupt_frame(&f, &Corruption::Blur { k: 5 }, 0).unwrap().degraded, f);
        assert!(corrupt_frame(&f, &Corruption::Blur { k: 4 }, 0).is_err());
    }

    #[test]
    fn fast_truth_matches_pixel_sum() {
        let d = SceneDefaults::default();
        let clip = synth_clip(&d, 70.0, 17, 40).unwrap();
        let sat = clip.texture_sat();
        let geoms: Vec<FaceGeom> = clip
            .scene
            .roi_trajectory
            .iter()
            .map(|b| FaceGeom::new(b, d.frame_w, d.frame_h))
            .collect();
        for (t, g) in geoms.iter().enumerate() {
            let fast = clip.fast_roi_mean(&sat, t, g).expect("roi on skin");
            let slow = clip.clean_roi_mean(t, g);
            for c in 0..3 {
                assert!((fast[c] - slow[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roi_averaging_shrinks_noise() {
        let n = 40;
        let mut clean = small_scene(n, 12);
        clean.texture_sd = 0.0;
        let mut noisy = clean.clone();
        noisy.noise_sigma = 0.05;
        let bvp = BvpSpec::new(75.0, 22.0, n);
        let a = SyntheticClip::new(clean, &bvp).unwrap();
        let b = SyntheticClip::new(noisy, &bvp).unwrap();
        let [x0, y0, x1, y1] = a.meta().truth_roi[0].to_pixels(320, 192).map(|v| v.round() as usize);
        let npx = ((x1 - x0) * (y1 - y0)) as f64;
        let mean = |f: &Frame| {
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += f.at(1, x, y);
                }
            }
            s / npx
        };
        // compare against the unquantized truth: the clean frame's own
        // rounding error would otherwise dominate
        let d: Vec<f64> = (0..n)
            .map(|t| mean(&b.frame(t).unwrap()) - a.meta().truth_signal[t][1])
            .collect();
        let m = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let want = 0.05 / npx.sqrt();
        assert!((sd / want - 1.0).abs() < 0.3, "sd {sd} vs {want}");
    }

    #[test]
    fn dataset_plan_and_regeneration() {
        let spec = DatasetSpec {
            n_clips: 90,
            hr_range: (50.0, 110.0),
            duration_s: 30.0,
            scene: SceneDefaults::default(),
            seed: 5,
        };
        let rows = plan_dataset(&spec).unwrap();
        assert_eq!(rows.len(), 90);
        assert!(rows.iter().all(|r| (50.0..=110.0).contains(&r.truth_hr_bpm) && r.n_frames == 660));
        assert_eq!(rows, plan_dataset(&spec).unwrap());
    }

    #[test]
    fn clip_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_clips: 2,
            hr_range: (60.0, 90.0),
            duration_s: 0.5,
            scene: SceneDefaults {
                frame_w: 96,
                frame_h: 64,
                noise_sigma: 0.01,
                ..Default::default()
            },
            seed: 8,
        };
        let rows = gen_dataset(&spec, dir.path()).unwrap();
        let manifest = dir.path().join("manifest.json");
        assert_eq!(read_manifest(&manifest).unwrap(), rows);
        for row in &rows {
            let file = ClipFile::open(clip_location(&manifest, row)).unwrap();
            let regen = row.synth(&spec.scene).unwrap();
            assert_eq!(file.meta(), regen.meta());
            for t in 0..row.n_frames {
                assert_eq!(file.frame(t).unwrap(), regen.frame(t).unwrap());
            }
        }
    }

    #[test]
    fn truncated_clip_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.clip");
        let clip = SyntheticClip::new(small_scene(2, 1), &BvpSpec::new(70.0, 22.0, 2)).unwrap();
        write_clip(&p, &clip).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(ClipFile::open(&p), Err(Error::BlobLength { .. })));
    }
}
