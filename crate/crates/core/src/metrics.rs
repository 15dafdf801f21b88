//! Error statistics over paired heart-rate estimates and ground truth.
//!
//! Per-item error is `D_i = estimate_i − truth_i`. The standard deviation
//! uses the sample (n−1) divisor, which pins the identity
//! `rmse² = m² + ((n−1)/n)·sd²`.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub d: Vec<f64>,
    pub m_d: f64,
    pub sd_d: f64,
    pub rmse_d: f64,
    /// Mean signed relative error as a fraction (×100 for percent).
    pub me_d: f64,
    /// `None` when either series is constant or `n < 3`.
    pub r: Option<f64>,
    pub p: Option<f64>,
}

impl MetricsReport {
    pub fn r_defined(&self) -> bool {
        self.r.is_some()
    }
}

pub fn error_stats(estimates: &[f64], truths: &[f64]) -> Result<MetricsReport> {
    if estimates.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} estimates vs {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    let n = estimates.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 pairs, got {n}")));
    }
    if let Some(i) = truths.iter().position(|&t| t == 0.0) {
        return Err(Error::ZeroTruth(i));
    }
    let d: Vec<f64> = estimates.iter().zip(truths).map(|(e, t)| e - t).collect();
    let nf = n as f64;
    let m_d = d.iter().sum::<f64>() / nf;
    let sd_d = (d.iter().map(|v| (v - m_d).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    let rmse_d = (d.iter().map(|v| v * v).sum::<f64>() / nf).sqrt();
    let me_d = d.iter().zip(truths).map(|(di, t)| di / t).sum::<f64>() / nf;
    let (r, p) = match pearson(estimates, truths) {
        Ok((r, p)) => (Some(r), Some(p)),
        Err(_) => (None, None),
    };
    Ok(MetricsReport {
        n,
        d,
        m_d,
        sd_d,
        rmse_d,
        me_d,
        r,
        p,
    })
}

/// Sample Pearson correlation and its two-sided p-value from Student's t
/// with `n − 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} samples", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::UndefinedCorrelation(format!("need at least 3 pairs, got {n}")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant series".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Ok((r, t_test_p(r, n)))
}

fn t_test_p(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let one_minus = 1.0 - r * r;
    if one_minus <= 0.0 {
        return 0.0;
    }
    let t2 = r * r * df / one_minus;
    // two-sided tail of Student's t: I_{df/(df+t²)}(df/2, 1/2)
    beta_reg(df / 2.0, 0.5, df / (df + t2)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn perfect_estimates() {
        let t = [60.0, 72.0, 90.0];
        let r = error_stats(&t, &t).unwrap();
        assert_eq!((r.m_d, r.sd_d, r.rmse_d, r.me_d), (0.0, 0.0, 0.0, 0.0));
        // estimates == truths is a perfect correlation, but D is constant
        assert!(r.d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_worked_pair() {
        let r = error_stats(&[73.0, 81.0], &[70.0, 80.0]).unwrap();
        assert_eq!(r.d, vec![3.0, 1.0]);
        assert_abs_diff_eq!(r.m_d, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.sd_d, 1.414214, epsilon = 1e-6);
        assert_abs_diff_eq!(r.rmse_d, 2.236068, epsilon = 1e-6);
        assert_abs_diff_eq!(r.me_d, 0.0276786, epsilon = 1e-6);
        assert!(r.r.is_none());
    }

    #[test]
    fn zero_truth_is_an_error() {
        assert!(matches!(
            error_stats(&[1.0, 2.0], &[1.0, 0.0]),
            Err(Error::ZeroTruth(1))
        ));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(error_stats(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn perfect_correlations() {
        let (r, p) = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);
        assert!(p < 1e-12);
        let (r, _) = pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap();
        assert_abs_diff_eq!(r, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_series_undefined() {
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn p_value_matches_reference_table() {
        // r = 0.5, n = 10 → t = 1.63299, two-sided p = 0.141113 (df 8)
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let p = t_test_p(0.5, x.len());
        assert_abs_diff_eq!(p, 0.141113, epsilon = 1e-5);
    }

    #[test]
    fn p_values_are_calibrated_under_independence() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut hits = 0;
        for seed in 0..1000u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..20).map(|_| StandardNormal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..20).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (_, p) = pearson(&a, &b).unwrap();
            if p <= 0.05 {
                hits += 1;
            }
        }
        let frac = hits as f64 / 1000.0;
        assert!((0.03..=0.07).contains(&frac), "{frac}");
    }

    proptest! {
        #[test]
        fn rmse_identity(d in proptest::collection::vec((40.0f64..180.0, -20.0f64..20.0), 2..40)) {
            let truths: Vec<f64> = d.iter().map(|p| p.0).collect();
            let est: Vec<f64> = d.iter().map(|p| p.0 + p.1).collect();
            let r = error_stats(&est, &truths).unwrap();
            let n = r.n as f64;
            let rhs = r.m_d * r.m_d + (n - 1.0) / n * r.sd_d * r.sd_d;
            prop_assert!((r.rmse_d * r.rmse_d - rhs).abs() <= 1e-9 * (1.0 + rhs));
        }

        #[test]
        fn swap_flips_mean_keeps_rmse(d in proptest::collection::vec((40.0f64..180.0, 40.0f64..180.0), 2..30)) {
            let a: Vec<f64> = d.iter().map(|p| p.0).collect();
            let b: Vec<f64> = d.iter().map(|p| p.1).collect();
            let ab = error_stats(&a, &b).unwrap();
            let ba = error_stats(&b, &a).unwrap();
            prop_assert!((ab.m_d + ba.m_d).abs() < 1e-9);
            prop_assert!((ab.rmse_d - ba.rmse_d).abs() < 1e-9);
        }

        #[test]
        fn r_affine_invariant(
            d in proptest::collection::vec((40.0f64..180.0, 40.0f64..180.0), 3..30),
            g in 0.1f64..10.0,
            off in -50.0f64..50.0,
        ) {
            let a: Vec<f64> = d.iter().map(|p| p.0).collect();
            let b: Vec<f64> = d.iter().map(|p| p.1).collect();
            if let Ok((r1, _)) = pearson(&a, &b) {
                let a2: Vec<f64> = a.iter().map(|v| g * v + off).collect();
                let (r2, _) = pearson(&a2, &b).unwrap();
                prop_assert!((r1 - r2).abs() < 1e-9);
            }
        }

        #[test]
        fn permutation_invariant(d in proptest::collection::vec((40.0f64..180.0, 40.0f64..180.0), 3..30), rot in 0usize..30) {
            let a: Vec<f64> = d.iter().map(|p| p.0).collect();
            let b: Vec<f64> = d.iter().map(|p| p.1).collect();
            let k = rot % a.len();
            let (mut a2, mut b2) = (a.clone(), b.clone());
            a2.rotate_left(k);
            b2.rotate_left(k);
            let r1 = error_stats(&a, &b).unwrap();
            let r2 = error_stats(&a2, &b2).unwrap();
            prop_assert!((r1.m_d - r2.m_d).abs() < 1e-9);
            prop_assert!((r1.sd_d - r2.sd_d).abs() < 1e-9);
            prop_assert!((r1.rmse_d - r2.rmse_d).abs() < 1e-9);
            prop_assert!((r1.me_d - r2.me_d).abs() < 1e-12);
        }
    }
}
