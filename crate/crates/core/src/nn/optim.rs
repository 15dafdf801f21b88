use serde::{Deserialize, Serialize};

use super::network::Network;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
        })
    }
}

/// SGD with classical momentum and L2 weight decay:
/// `v ← m·v − lr·(g + wd·p)`, `p ← p + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update using the gradients stored in `net`.
    /// A non-finite gradient aborts before any parameter is modified.
    pub fn step(&mut self, net: &mut Network) -> Result<()> {
        let SgdConfig {
            learning_rate: lr,
            momentum: m,
            weight_decay: wd,
        } = self.config;
        let mut pairs = net.trainable_mut();
        for (i, (_, g)) in pairs.iter().enumerate() {
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient array {i} entry {j} is {}",
                    g[j]
                )));
            }
        }
        if self.velocity.len() != pairs.len() {
            self.velocity = pairs.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in pairs.iter_mut().zip(self.velocity.iter_mut()) {
            for ((pk, gk), vk) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vk = m * *vk - lr * (gk + wd * *pk);
                *pk += *vk;
            }
        }
        Ok(())
    }
}
