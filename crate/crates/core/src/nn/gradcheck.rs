//! Central finite-difference comparison of backprop gradients.
//!
//! The probe objective is the linear functional `f = Σ c ⊙ net(x)` evaluated
//! in train mode (batch statistics), so the analytic gradient is
//! `backward(c)`. Large layers are checked on a seeded random subset of
//! entries.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{Mode, Network};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct LayerCheck {
    /// Layer index, or `None` for the gradient w.r.t. the network input.
    pub layer: Option<usize>,
    pub kind: &'static str,
    pub checked: usize,
    pub rel_error: f64,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)` over paired entries.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn objective(net: &Network, x: &Tensor, coeffs: &[f64]) -> Result<f64> {
    let y = net.evaluate(x, true)?;
    Ok(y.data().iter().zip(coeffs).map(|(a, b)| a * b).sum())
}

/// Checks every trainable layer and the input gradient.
pub fn check_network(
    net: &mut Network,
    x: &Tensor,
    coeffs: &Tensor,
    eps: f64,
    max_per_layer: usize,
    seed: u64,
) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.forward(x, Mode::Train)?;
    let dx = net.backward(coeffs)?;
    let c = coeffs.data();
    let mut out = Vec::new();

    for layer in 0..net.num_layers() {
        let grads: Vec<Vec<f64>> = net.layer_grads(layer).iter().map(|g| g.to_vec()).collect();
        if grads.is_empty() {
            continue;
        }
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (arr, g) in grads.iter().enumerate() {
            let n = g.len();
            let picks: Vec<usize> = if n <= max_per_layer {
                (0..n).collect()
            } else {
                sample(&mut rng, n, max_per_layer).into_vec()
            };
            for k in picks {
                let orig = net.layer_params_mut(layer)[arr][k];
                net.layer_params_mut(layer)[arr][k] = orig + eps;
                let hi = objective(net, x, c)?;
                net.layer_params_mut(layer)[arr][k] = orig - eps;
                let lo = objective(net, x, c)?;
                net.layer_params_mut(layer)[arr][k] = orig;
                analytic.push(g[k]);
                numeric.push((hi - lo) / (2.0 * eps));
            }
        }
        out.push(LayerCheck {
            layer: Some(layer),
            kind: net.layer_kind(layer).name(),
            checked: analytic.len(),
            rel_error: relative_error(&analytic, &numeric),
        });
    }

    let n = x.len();
    let picks: Vec<usize> = if n <= max_per_layer {
        (0..n).collect()
    } else {
        sample(&mut rng, n, max_per_layer).into_vec()
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut xp = x.clone();
    for k in picks {
        let orig = xp.data()[k];
        xp.data_mut()[k] = orig + eps;
        let hi = objective(net, &xp, c)?;
        xp.data_mut()[k] = orig - eps;
        let lo = objective(net, &xp, c)?;
        xp.data_mut()[k] = orig;
        analytic.push(dx.data()[k]);
        numeric.push((hi - lo) / (2.0 * eps));
    }
    out.push(LayerCheck {
        layer: None,
        kind: "input",
        checked: analytic.len(),
        rel_error: relative_error(&analytic, &numeric),
    });
    Ok(out)
}

/// Worst relative error across a check report.
pub fn worst(checks: &[LayerCheck]) -> f64 {
    checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn probe(net: &mut Network, batch: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let din = net.input_dim();
        let x = Tensor::matrix(batch, din, (0..batch * din).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
        let c = Tensor::matrix(batch, net.output_dim(), (0..batch * net.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        worst(&check_network(net, &x, &c, 1e-6, 64, seed).unwrap())
    }

    #[test]
    fn every_layer_kind_over_ten_seeds() {
        for seed in 0..10u64 {
            let kinds: Vec<(&str, Network)> = vec![
                ("dense", Network::builder(5, seed).dense(4).build().unwrap()),
                ("batchnorm", Network::builder(5, seed).dense(4).batchnorm().build().unwrap()),
                ("relu", Network::builder(5, seed).dense(4).relu().dense(2).build().unwrap()),
                ("leaky_relu", Network::builder(5, seed).dense(4).leaky_relu(0.2).dense(2).build().unwrap()),
                ("sigmoid", Network::builder(5, seed).dense(4).sigmoid().build().unwrap()),
                ("tanh", Network::builder(5, seed).dense(4).tanh().build().unwrap()),
            ];
            for (name, mut net) in kinds {
                let e = probe(&mut net, 6, seed);
                assert!(e < 1e-6, "{name} seed {seed}: {e:e}");
            }
        }
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[2.0]) - 0.5).abs() < 1e-15);
    }
}
