//! Classical heart-rate estimation: detrend, zero-phase band-pass, and a
//! zero-padded Hann periodogram whose in-band peak is refined by parabolic
//! interpolation.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_PAD: usize = 8192;
pub const MIN_SAMPLES: usize = 128;
/// Peak power must exceed this multiple of the in-band median.
pub const PEAK_TO_MEDIAN: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandpassSpec {
    pub lo_hz: f64,
    pub hi_hz: f64,
    /// Odd FIR length.
    pub taps: usize,
}

impl Default for BandpassSpec {
    fn default() -> Self {
        Self {
            lo_hz: 0.7,
            hi_hz: 4.0,
            taps: 129,
        }
    }
}

impl BandpassSpec {
    pub fn validate(&self, fps: f64) -> Result<()> {
        let nyquist = fps / 2.0;
        if !(self.lo_hz > 0.0 && self.lo_hz < self.hi_hz && self.hi_hz < nyquist) {
            return Err(Error::InvalidArgument(format!(
                "band [{}, {}] Hz must satisfy 0 < lo < hi < {nyquist} Hz",
                self.lo_hz, self.hi_hz
            )));
        }
        if self.taps < 3 || self.taps % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "filter length must be odd and at least 3, got {}",
                self.taps
            )));
        }
        Ok(())
    }

    /// Same band with the filter shortened so that `len >= 4 * taps`.
    pub fn fitted_to(&self, len: usize) -> Self {
        let mut taps = self.taps.min(len / 4);
        if taps % 2 == 0 {
            taps = taps.saturating_sub(1);
        }
        Self {
            taps: taps.max(3),
            ..*self
        }
    }
}

/// Hamming-windowed sinc band-pass kernel built as the difference of two
/// unit-DC-gain low-pass kernels, so its DC response is zero.
pub fn fir_kernel(spec: &BandpassSpec, fps: f64) -> Vec<f64> {
    let n = spec.taps;
    let mid = (n / 2) as f64;
    let window: Vec<f64> = (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect();
    let lowpass = |fc: f64| -> Vec<f64> {
        let wc = fc / fps; // cycles per sample
        let mut h: Vec<f64> = (0..n)
            .map(|i| {
                let m = i as f64 - mid;
                let s = if m == 0.0 {
                    2.0 * wc
                } else {
                    (2.0 * PI * wc * m).sin() / (PI * m)
                };
                s * window[i]
            })
            .collect();
        let sum: f64 = h.iter().sum();
        h.iter_mut().for_each(|v| *v /= sum);
        h
    };
    let hi = lowpass(spec.hi_hz);
    let lo = lowpass(spec.lo_hz);
    hi.iter().zip(&lo).map(|(a, b)| a - b).collect()
}

fn convolve_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    let half = h.len() / 2;
    let n = x.len();
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (k, hk) in h.iter().enumerate() {
                let j = i as isize + half as isize - k as isize;
                if j >= 0 && (j as usize) < n {
                    acc += hk * x[j as usize];
                }
            }
            acc
        })
        .collect()
}

/// Zero-phase band-pass: the FIR is applied forward and backward over an
/// odd-reflected extension of the input, then the extension is trimmed.
pub fn bandpass(x: &[f64], fps: f64, spec: &BandpassSpec) -> Result<Vec<f64>> {
    spec.validate(fps)?;
    if x.len() < 4 * spec.taps {
        return Err(Error::InvalidArgument(format!(
            "band-pass with {} taps needs at least {} samples, got {}",
            spec.taps,
            4 * spec.taps,
            x.len()
        )));
    }
    let h = fir_kernel(spec, fps);
    let pad = (3 * spec.taps).min(x.len() - 1);
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for k in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[k]);
    }
    ext.extend_from_slice(x);
    for k in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - k]);
    }
    let fwd = convolve_same(&ext, &h);
    let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
    rev = convolve_same(&rev, &h);
    rev.reverse();
    Ok(rev[pad..pad + n].to_vec())
}

/// Removes the least-squares line.
pub fn detrend(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return vec![0.0; x.len()];
    }
    let tm = (n - 1.0) / 2.0;
    let xm = x.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let t = i as f64 - tm;
        sxy += t * (v - xm);
        sxx += t * t;
    }
    let slope = sxy / sxx;
    x.iter()
        .enumerate()
        .map(|(i, v)| v - xm - slope * (i as f64 - tm))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Periodogram {
    pub freqs_hz: Vec<f64>,
    pub power: Vec<f64>,
    pub n_pad: usize,
}

/// One-sided Hann-windowed power spectrum, zero-padded to `n_pad` points.
pub fn periodogram(x: &[f64], fps: f64, n_pad: usize) -> Periodogram {
    let n = x.len();
    let n_pad = n_pad.max(n);
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1).max(1) as f64).cos();
            Complex::new(v * w, 0.0)
        })
        .collect();
    buf.resize(n_pad, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n_pad).process(&mut buf);
    let bins = n_pad / 2 + 1;
    Periodogram {
        freqs_hz: (0..bins).map(|k| k as f64 * fps / n_pad as f64).collect(),
        power: buf[..bins].iter().map(|c| c.norm_sqr()).collect(),
        n_pad,
    }
}

pub fn padded_len(n: usize) -> usize {
    n.max(MIN_PAD).next_power_of_two()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub bpm: f64,
    pub peak_hz: f64,
    pub peak_to_median: f64,
    pub n_pad: usize,
}

/// Heart rate from one signal row.
pub fn estimate_hr_spectral(x: &[f64], fps: f64, spec: &BandpassSpec) -> Result<SpectralEstimate> {
    if x.len() < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "spectral estimate needs at least {MIN_SAMPLES} samples, got {}",
            x.len()
        )));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("signal sample {i} is {}", x[i])));
    }
    let spec = spec.fitted_to(x.len());
    spec.validate(fps)?;
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let filtered = bandpass(&detrend(x), fps, &spec)?;
    let peak_amp = filtered.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak_amp <= 1e-12 * scale {
        return Err(Error::NoDominantPeak { ratio: 0.0 });
    }
    let pg = periodogram(&filtered, fps, padded_len(x.len()));
    let band: Vec<usize> = (0..pg.freqs_hz.len())
        .filter(|&k| pg.freqs_hz[k] >= spec.lo_hz && pg.freqs_hz[k] <= spec.hi_hz)
        .collect();
    let (&k, &peak) = band
        .iter()
        .map(|k| (k, &pg.power[*k]))
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(Error::NoDominantPeak { ratio: 0.0 })?;
    let mut in_band: Vec<f64> = band.iter().map(|&k| pg.power[k]).collect();
    in_band.sort_by(f64::total_cmp);
    let median = in_band[in_band.len() / 2];
    let ratio = if median > 0.0 { peak / median } else { f64::INFINITY };
    if ratio < PEAK_TO_MEDIAN {
        return Err(Error::NoDominantPeak { ratio });
    }
    let mut offset = 0.0;
    if k > 0 && k + 1 < pg.power.len() {
        let (a, b, c) = (pg.power[k - 1], pg.power[k], pg.power[k + 1]);
        let denom = a - 2.0 * b + c;
        if denom < 0.0 {
            offset = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
        }
    }
    let peak_hz = (k as f64 + offset) * fps / pg.n_pad as f64;
    Ok(SpectralEstimate {
        bpm: 60.0 * peak_hz,
        peak_hz,
        peak_to_median: ratio,
        n_pad: pg.n_pad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tone(f: f64, fps: f64, n: usize, phase: f64) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * PI * f * i as f64 / fps + phase).sin())
            .collect()
    }

    #[test]
    fn constant_input_is_removed() {
        let y = bandpass(&vec![0.73; 660], 22.0, &BandpassSpec::default()).unwrap();
        let trim = 129;
        let worst = y[trim..660 - trim].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn passband_tone_keeps_amplitude() {
        let x = tone(1.2, 22.0, 660, 0.3);
        let y = bandpass(&x, 22.0, &BandpassSpec::default()).unwrap();
        let trim = 129;
        let amp = y[trim..660 - trim].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((amp - 1.0).abs() < 0.1, "amplitude {amp}");
    }

    #[test]
    fn slow_drift_is_attenuated_20db() {
        let x = tone(0.1, 22.0, 660, 0.0);
        let y = bandpass(&x, 22.0, &BandpassSpec::default()).unwrap();
        let trim = 129;
        let amp = y[trim..660 - trim].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(20.0 * amp.log10() <= -20.0, "gain {} dB", 20.0 * amp.log10());
    }

    #[test]
    fn band_outside_nyquist_rejected() {
        let spec = BandpassSpec {
            hi_hz: 12.0,
            ..Default::default()
        };
        assert!(bandpass(&vec![0.0; 660], 22.0, &spec).is_err());
    }

    #[test]
    fn too_short_for_filter_rejected() {
        assert!(bandpass(&vec![0.0; 100], 22.0, &BandpassSpec::default()).is_err());
    }

    #[test]
    fn constant_signal_has_no_peak() {
        let err = estimate_hr_spectral(&vec![0.5; 660], 22.0, &BandpassSpec::default());
        assert!(matches!(err, Err(Error::NoDominantPeak { .. })), "{err:?}");
    }

    #[test]
    fn pure_tones_hit_their_frequency() {
        for &bpm in &[55.0, 72.0, 101.3] {
            let x = tone(bpm / 60.0, 22.0, 660, 1.0);
            let est = estimate_hr_spectral(&x, 22.0, &BandpassSpec::default()).unwrap();
            assert_abs_diff_eq!(est.bpm, bpm, epsilon = 0.5);
        }
    }

    #[test]
    fn detrend_removes_lines() {
        let x: Vec<f64> = (0..50).map(|i| 3.0 - 0.2 * i as f64).collect();
        assert!(detrend(&x).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn short_signal_rejected() {
        assert!(estimate_hr_spectral(&[0.0; 64], 22.0, &BandpassSpec::default()).is_err());
    }
}
