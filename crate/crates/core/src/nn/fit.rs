//! Mini-batch MSE regression loop shared by the R, S and E networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::io::encode_params;
use super::loss::mse_loss;
use super::network::{Mode, Network};
use super::optim::{Sgd, SgdConfig};
use super::{gather_rows, minibatches};
use crate::error::{Checkpoint, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Sd of Gaussian noise added to every training input (0 disables).
    #[serde(default)]
    pub input_noise: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitHistory {
    /// Mean mini-batch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

impl FitHistory {
    pub fn initial(&self) -> Option<f64> {
        self.epoch_loss.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.epoch_loss.last().copied()
    }
}

/// Trains `net` on row-major `x` (`n × in_dim`) against `y` (`n × out_dim`).
///
/// A non-finite loss or gradient restores the parameters from the end of
/// the previous epoch and returns [`Error::TrainingAborted`] carrying them.
pub fn fit_mse(
    net: &mut Network,
    x: &[f64],
    y: &[f64],
    cfg: &FitConfig,
    role: &str,
) -> Result<FitHistory> {
    let (din, dout) = (net.input_dim(), net.output_dim());
    if x.len() % din != 0 || y.len() % dout != 0 || x.len() / din != y.len() / dout {
        return Err(Error::Shape(format!(
            "{role}: {} inputs of width {din} vs {} targets of width {dout}",
            x.len() as f64 / din as f64,
            y.len() as f64 / dout as f64
        )));
    }
    let n = x.len() / din;
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{role}: empty training set")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.sgd);
    let mut history = FitHistory::default();
    let mut good = net.flat_params();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = minibatches(n, cfg.batch_size, &mut rng);
        for idx in &batches {
            let mut xb = gather_rows(x, din, idx);
            if cfg.input_noise > 0.0 {
                for v in xb.data_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += cfg.input_noise * z;
                }
            }
            let yb = gather_rows(y, dout, idx);
            let step = net
                .forward(&xb, Mode::Train)
                .and_then(|p| mse_loss(&p, &yb))
                .and_then(|(loss, grad)| {
                    if !loss.is_finite() {
                        return Err(Error::NonFinite(format!("loss is {loss}")));
                    }
                    net.backward(&grad)?;
                    opt.step(net)?;
                    Ok(loss)
                });
            match step {
                Ok(loss) => total += loss,
                Err(Error::NonFinite(msg)) => return Err(abort(net, &good, role, epoch, msg)),
                Err(e) => return Err(e),
            }
        }
        let mean = total / batches.len() as f64;
        if !net.flat_params().iter().all(|v| v.is_finite()) {
            return Err(abort(net, &good, role, epoch, "parameters diverged".into()));
        }
        log::debug!("{role} epoch {epoch}: loss {mean:.6e}");
        history.epoch_loss.push(mean);
        good = net.flat_params();
    }
    Ok(history)
}

fn abort(net: &mut Network, good: &[f64], role: &str, epoch: usize, msg: String) -> Error {
    let checkpoint = net
        .set_flat_params(good)
        .ok()
        .and_then(|_| encode_params(net, Some(role), serde_json::Value::Null).ok())
        .map(Checkpoint);
    Error::TrainingAborted {
        reason: format!("{role} epoch {epoch}: {msg}"),
        checkpoint,
    }
}
