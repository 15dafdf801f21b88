use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-feature z-scoring with statistics fixed at fit time.
///
/// Features whose standard deviation falls below `floor · max_sd` are scaled
/// by that floor instead, so near-constant columns are centered but not
/// blown up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[f64], width: usize, floor: f64) -> Result<Self> {
        if width == 0 || x.is_empty() || x.len() % width != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form rows of width {width}",
                x.len()
            )));
        }
        let n = (x.len() / width) as f64;
        let mut mean = vec![0.0; width];
        for row in x.chunks(width) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut fix = vec![0.0; width];
        for row in x.chunks(width) {
            for ((c, v), m) in fix.iter_mut().zip(row).zip(&mean) {
                *c += v - m;
            }
        }
        mean.iter_mut().zip(&fix).for_each(|(m, c)| *m += c / n);
        let mut var = vec![0.0; width];
        for row in x.chunks(width) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let sd: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        let max_sd = sd.iter().cloned().fold(0.0, f64::max);
        let min_scale = if max_sd > 0.0 { floor * max_sd } else { 1.0 };
        let scale = sd
            .iter()
            .map(|&s| if s >= min_scale && s > 0.0 { s } else { min_scale.max(f64::MIN_POSITIVE) })
            .collect();
        Ok(Self { mean, scale })
    }

    /// Per-feature centering with one shared scale, chosen so rows have unit
    /// mean squared norm. Keeps relative feature magnitudes (and hence the
    /// input covariance's shape) while bounding its largest eigenvalue by 1.
    pub fn fit_global(x: &[f64], width: usize) -> Result<Self> {
        let per = Self::fit(x, width, 0.0)?;
        let n = (x.len() / width) as f64;
        let mut total = 0.0;
        for row in x.chunks(width) {
            total += row.iter().zip(&per.mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>();
        }
        let s = (total / n).sqrt();
        let s = if s > 0.0 { s } else { 1.0 };
        Ok(Self {
            mean: per.mean,
            scale: vec![s; width],
        })
    }

    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            scale: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let w = self.width();
        if x.len() % w != 0 {
            return Err(Error::Shape(format!("{} values vs feature width {w}", x.len())));
        }
        let mut out = x.to_vec();
        self.apply_in_place(&mut out);
        Ok(out)
    }

    pub fn apply_in_place(&self, x: &mut [f64]) {
        for row in x.chunks_mut(self.width()) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn invert_in_place(&self, x: &mut [f64]) {
        for row in x.chunks_mut(self.width()) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = *v * s + m;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_columns_have_unit_sd() {
        let x: Vec<f64> = (0..300).map(|i| ((i * 37) % 17) as f64 * (1 + i % 3) as f64).collect();
        let s = Standardizer::fit(&x, 3, 1e-3).unwrap();
        let z = s.apply(&x).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = z.iter().skip(c).step_by(3).copied().collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() < 1e-9);
            assert!((sd - 1.0).abs() < 1e-6);
        }
        let mut back = z.clone();
        s.invert_in_place(&mut back);
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn global_scale_gives_unit_row_norm() {
        let x: Vec<f64> = (0..400).map(|i| ((i * 13) % 7) as f64 * (1 + i % 4) as f64).collect();
        let s = Standardizer::fit_global(&x, 4).unwrap();
        let z = s.apply(&x).unwrap();
        let ms = z.chunks(4).map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / 100.0;
        assert!((ms - 1.0).abs() < 1e-12);
        assert!(s.scale.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn constant_column_is_centered_not_amplified() {
        let x = vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0 + 1e-15];
        let s = Standardizer::fit(&x, 2, 1e-2).unwrap();
        let z = s.apply(&x).unwrap();
        assert!(z.iter().skip(1).step_by(2).all(|v| v.abs() < 1e-9));
    }
}
