//! 8-bit planar RGB frames and float RoI patches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One video frame stored as three 8-bit planes (R, G, B), row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "frame {width}x{height} needs {} bytes, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(std::iter::repeat(quantize(c)).take(width * height));
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn byte_len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[u8] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [u8] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channel value in [0, 1].
    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[c * self.width * self.height + y * self.width + x] as f64 / 255.0
    }

    /// Area-averaged grayscale (channel mean) at `out_w × out_h`, row-major.
    pub fn gray_downsample(&self, out_w: usize, out_h: usize) -> Vec<f64> {
        if out_w > 0 && out_h > 0 && self.width % out_w == 0 && self.height % out_h == 0 {
            return self.gray_block_mean(self.width / out_w, self.height / out_h);
        }
        let n = self.width * self.height;
        let mut gray = vec![0f64; n];
        for c in 0..3 {
            for (g, &v) in gray.iter_mut().zip(&self.data[c * n..(c + 1) * n]) {
                *g += v as f64;
            }
        }
        let scale = 1.0 / (3.0 * 255.0);
        gray.iter_mut().for_each(|g| *g *= scale);
        area_resample(&gray, self.width, self.height, out_w, out_h)
    }

    fn gray_block_mean(&self, bx: usize, by: usize) -> Vec<f64> {
        let (ow, oh) = (self.width / bx, self.height / by);
        let n = self.width * self.height;
        let mut sums = vec![0u32; ow * oh];
        for c in 0..3 {
            let plane = &self.data[c * n..(c + 1) * n];
            for y in 0..self.height {
                let row = &plane[y * self.width..(y + 1) * self.width];
                let out = &mut sums[(y / by) * ow..(y / by + 1) * ow];
                for (o, chunk) in out.iter_mut().zip(row.chunks_exact(bx)) {
                    *o += chunk.iter().map(|&v| v as u32).sum::<u32>();
                }
            }
        }
        let scale = 1.0 / (3.0 * 255.0 * (bx * by) as f64);
        sums.iter().map(|&s| s as f64 * scale).collect()
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    // round-half-up; NaN lands on 0
    (v * 255.0 + 0.5).max(0.0).min(255.0) as u8
}

/// Float image, planar channels, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 || data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "patch {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn uniform(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(width * height));
        }
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    /// Area-weighted resample of every channel.
    pub fn resample_area(&self, out_w: usize, out_h: usize) -> Patch {
        let mut data = Vec::with_capacity(out_w * out_h * self.channels);
        for c in 0..self.channels {
            data.extend(area_resample(self.plane(c), self.width, self.height, out_w, out_h));
        }
        Patch {
            width: out_w,
            height: out_h,
            channels: self.channels,
            data,
        }
    }

    /// Bilinear resample of every channel (pixel-center aligned).
    pub fn resample_bilinear(&self, out_w: usize, out_h: usize) -> Patch {
        let mut data = Vec::with_capacity(out_w * out_h * self.channels);
        let sx = self.width as f64 / out_w as f64;
        let sy = self.height as f64 / out_h as f64;
        for c in 0..self.channels {
            let p = self.plane(c);
            for oy in 0..out_h {
                let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let ty = fy - y0 as f64;
                for ox in 0..out_w {
                    let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let tx = fx - x0 as f64;
                    let a = p[y0 * self.width + x0] * (1.0 - tx) + p[y0 * self.width + x1] * tx;
                    let b = p[y1 * self.width + x0] * (1.0 - tx) + p[y1 * self.width + x1] * tx;
                    data.push(a * (1.0 - ty) + b * ty);
                }
            }
        }
        Patch {
            width: out_w,
            height: out_h,
            channels: self.channels,
            data,
        }
    }
}

/// Separable area-weighted (box-coverage) resampling of one plane.
/// Every output pixel is the exact mean of the input area it covers, so the
/// global mean is preserved.
pub fn area_resample(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let wx = coverage_weights(w, out_w);
    let wy = coverage_weights(h, out_h);
    let mut tmp = vec![0.0; out_w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (ox, taps) in wx.iter().enumerate() {
            tmp[y * out_w + ox] = taps.iter().map(|&(i, wt)| row[i] * wt).sum();
        }
    }
    let mut out = vec![0.0; out_w * out_h];
    for (oy, taps) in wy.iter().enumerate() {
        for ox in 0..out_w {
            out[oy * out_w + ox] = taps.iter().map(|&(i, wt)| tmp[i * out_w + ox] * wt).sum();
        }
    }
    out
}

fn coverage_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let step = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * step;
            let hi = lo + step;
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let a = (i as f64).max(lo);
                let b = ((i + 1) as f64).min(hi);
                if b > a {
                    taps.push((i, (b - a) / step));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_resample_preserves_mean() {
        let (w, h) = (224, 74);
        let src: Vec<f64> = (0..w * h).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
        let out = area_resample(&src, w, h, 56, 19);
        let m_in = src.iter().sum::<f64>() / src.len() as f64;
        let m_out = out.iter().sum::<f64>() / out.len() as f64;
        assert!((m_in - m_out).abs() < 1e-12, "{m_in} vs {m_out}");
    }

    #[test]
    fn block_gray_matches_area_path() {
        let (w, h) = (40, 24);
        let data: Vec<u8> = (0..3 * w * h).map(|i| ((i * 31) % 251) as u8).collect();
        let f = Frame::new(w, h, data).unwrap();
        let fast = f.gray_downsample(8, 6);
        let mut gray = vec![0.0; w * h];
        for c in 0..3 {
            for (g, &v) in gray.iter_mut().zip(f.plane(c)) {
                *g += v as f64 / (3.0 * 255.0);
            }
        }
        let slow = area_resample(&gray, w, h, 8, 6);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_resample_is_exact() {
        let p = Patch::new(5, 3, 1, (0..15).map(|v| v as f64 / 15.0).collect()).unwrap();
        assert_eq!(p.resample_area(5, 3), p);
        assert_eq!(p.resample_bilinear(5, 3), p);
    }

    #[test]
    fn quantize_rounds_and_saturates() {
        for i in 0..=255u32 {
            let v = i as f64 / 255.0;
            assert_eq!(quantize(v), i as u8);
            assert_eq!(quantize(v + 0.49 / 255.0), i as u8);
        }
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(f64::NAN), 0);
    }

    #[test]
    fn frame_rejects_bad_length() {
        assert!(Frame::new(4, 4, vec![0; 47]).is_err());
    }
}
