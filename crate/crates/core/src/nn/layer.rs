use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Batchnorm,
    Relu,
    LeakyRelu { slope: f64 },
    Sigmoid,
    Tanh,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Batchnorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::LeakyRelu { .. } => "leaky_relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub init_seed: u64,
}

impl LayerSpec {
    /// Number of stored values (trainable and running statistics).
    pub fn stored_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.in_dim * self.out_dim + self.out_dim,
            LayerKind::Batchnorm => 4 * self.out_dim,
            _ => 0,
        }
    }

    pub fn trainable_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.in_dim * self.out_dim + self.out_dim,
            LayerKind::Batchnorm => 2 * self.out_dim,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Params {
    Dense {
        /// `out_dim × in_dim`, row-major.
        weight: Vec<f64>,
        bias: Vec<f64>,
        grad_weight: Vec<f64>,
        grad_bias: Vec<f64>,
    },
    Batchnorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        grad_gamma: Vec<f64>,
        grad_beta: Vec<f64>,
    },
    None,
}

/// Values saved by a train-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Input(Vec<f64>),
    Output(Vec<f64>),
    Norm { xhat: Vec<f64>, inv_std: Vec<f64> },
}

#[derive(Debug, Clone)]
pub(crate) struct Layer {
    pub spec: LayerSpec,
    pub params: Params,
}

pub(crate) struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Layer {
    pub fn init(spec: LayerSpec) -> Self {
        let params = match spec.kind {
            LayerKind::Dense => {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
                let a = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
                let n = spec.in_dim * spec.out_dim;
                let weight = (0..n).map(|_| rng.gen_range(-a..a)).collect();
                Params::Dense {
                    weight,
                    bias: vec![0.0; spec.out_dim],
                    grad_weight: vec![0.0; n],
                    grad_bias: vec![0.0; spec.out_dim],
                }
            }
            LayerKind::Batchnorm => {
                let d = spec.out_dim;
                Params::Batchnorm {
                    gamma: vec![1.0; d],
                    beta: vec![0.0; d],
                    running_mean: vec![0.0; d],
                    running_var: vec![1.0; d],
                    grad_gamma: vec![0.0; d],
                    grad_beta: vec![0.0; d],
                }
            }
            _ => Params::None,
        };
        Self { spec, params }
    }

    /// Forward over a `[batch, in_dim]` buffer. `train` selects batch
    /// statistics for batchnorm; the running statistics are never touched here.
    pub fn forward(
        &self,
        x: &[f64],
        batch: usize,
        train: bool,
    ) -> (Vec<f64>, Option<Cache>, Option<BatchStats>) {
        let d_in = self.spec.in_dim;
        let d_out = self.spec.out_dim;
        match (&self.spec.kind, &self.params) {
            (LayerKind::Dense, Params::Dense { weight, bias, .. }) => {
                let mut y = vec![0.0; batch * d_out];
                for row in y.chunks_exact_mut(d_out) {
                    row.copy_from_slice(bias);
                }
                // y[B,out] += x[B,in] · wᵀ[in,out]
                unsafe {
                    matrixmultiply::dgemm(
                        batch,
                        d_in,
                        d_out,
                        1.0,
                        x.as_ptr(),
                        d_in as isize,
                        1,
                        weight.as_ptr(),
                        1,
                        d_in as isize,
                        1.0,
                        y.as_mut_ptr(),
                        d_out as isize,
                        1,
                    );
                }
                let cache = train.then(|| Cache::Input(x.to_vec()));
                (y, cache, None)
            }
            (
                LayerKind::Batchnorm,
                Params::Batchnorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                },
            ) => {
                let d = d_out;
                let (mean, var) = if train {
                    let mut mean = vec![0.0; d];
                    for row in x.chunks_exact(d) {
                        for (m, v) in mean.iter_mut().zip(row) {
                            *m += v;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= batch as f64);
                    let mut var = vec![0.0; d];
                    for row in x.chunks_exact(d) {
                        for j in 0..d {
                            let c = row[j] - mean[j];
                            var[j] += c * c;
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= batch as f64);
                    (mean, var)
                } else {
                    (running_mean.clone(), running_var.clone())
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = vec![0.0; x.len()];
                let mut y = vec![0.0; x.len()];
                for (xr, (hr, yr)) in x
                    .chunks_exact(d)
                    .zip(xhat.chunks_exact_mut(d).zip(y.chunks_exact_mut(d)))
                {
                    for j in 0..d {
                        hr[j] = (xr[j] - mean[j]) * inv_std[j];
                        yr[j] = gamma[j] * hr[j] + beta[j];
                    }
                }
                if train {
                    (
                        y,
                        Some(Cache::Norm { xhat, inv_std }),
                        Some(BatchStats { mean, var }),
                    )
                } else {
                    (y, None, None)
                }
            }
            (kind, _) => {
                let y: Vec<f64> = match *kind {
                    LayerKind::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
                    LayerKind::LeakyRelu { slope } => x
                        .iter()
                        .map(|&v| if v > 0.0 { v } else { slope * v })
                        .collect(),
                    LayerKind::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
                    LayerKind::Tanh => x.iter().map(|&v| v.tanh()).collect(),
                    LayerKind::Dense | LayerKind::Batchnorm => unreachable!("params match kind"),
                };
                let cache = train.then(|| match kind {
                    LayerKind::Sigmoid | LayerKind::Tanh => Cache::Output(y.clone()),
                    _ => Cache::Input(x.to_vec()),
                });
                (y, cache, None)
            }
        }
    }

    /// Writes parameter gradients into the layer and returns the input gradient.
    pub fn backward(&mut self, cache: &Cache, grad_out: &[f64], batch: usize) -> Vec<f64> {
        let d_in = self.spec.in_dim;
        let d_out = self.spec.out_dim;
        match (&self.spec.kind, &mut self.params, cache) {
            (
                LayerKind::Dense,
                Params::Dense {
                    weight,
                    grad_weight,
                    grad_bias,
                    ..
                },
                Cache::Input(x),
            ) => {
                // dW[out,in] = dYᵀ[out,B] · X[B,in]
                unsafe {
                    matrixmultiply::dgemm(
                        d_out,
                        batch,
                        d_in,
                        1.0,
                        grad_out.as_ptr(),
                        1,
                        d_out as isize,
                        x.as_ptr(),
                        d_in as isize,
                        1,
                        0.0,
                        grad_weight.as_mut_ptr(),
                        d_in as isize,
                        1,
                    );
                }
                grad_bias.iter_mut().for_each(|g| *g = 0.0);
                for row in grad_out.chunks_exact(d_out) {
                    for (g, v) in grad_bias.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                // dX[B,in] = dY[B,out] · W[out,in]
                let mut dx = vec![0.0; batch * d_in];
                unsafe {
                    matrixmultiply::dgemm(
                        batch,
                        d_out,
                        d_in,
                        1.0,
                        grad_out.as_ptr(),
                        d_out as isize,
                        1,
                        weight.as_ptr(),
                        d_in as isize,
                        1,
                        0.0,
                        dx.as_mut_ptr(),
                        d_in as isize,
                        1,
                    );
                }
                dx
            }
            (
                LayerKind::Batchnorm,
                Params::Batchnorm {
                    gamma,
                    grad_gamma,
                    grad_beta,
                    ..
                },
                Cache::Norm { xhat, inv_std },
            ) => {
                let d = d_out;
                let n = batch as f64;
                let mut sum_dxhat = vec![0.0; d];
                let mut sum_dxhat_xhat = vec![0.0; d];
                grad_gamma.iter_mut().for_each(|g| *g = 0.0);
                grad_beta.iter_mut().for_each(|g| *g = 0.0);
                for (gr, hr) in grad_out.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        grad_gamma[j] += gr[j] * hr[j];
                        grad_beta[j] += gr[j];
                        let dh = gr[j] * gamma[j];
                        sum_dxhat[j] += dh;
                        sum_dxhat_xhat[j] += dh * hr[j];
                    }
                }
                let mut dx = vec![0.0; grad_out.len()];
                for ((gr, hr), dr) in grad_out
                    .chunks_exact(d)
                    .zip(xhat.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    for j in 0..d {
                        let dh = gr[j] * gamma[j];
                        dr[j] = inv_std[j] / n
                            * (n * dh - sum_dxhat[j] - hr[j] * sum_dxhat_xhat[j]);
                    }
                }
                dx
            }
            (LayerKind::Relu, _, Cache::Input(x)) => grad_out
                .iter()
                .zip(x)
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
            (LayerKind::LeakyRelu { slope }, _, Cache::Input(x)) => grad_out
                .iter()
                .zip(x)
                .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                .collect(),
            (LayerKind::Sigmoid, _, Cache::Output(y)) => grad_out
                .iter()
                .zip(y)
                .map(|(g, s)| g * s * (1.0 - s))
                .collect(),
            (LayerKind::Tanh, _, Cache::Output(y)) => grad_out
                .iter()
                .zip(y)
                .map(|(g, t)| g * (1.0 - t * t))
                .collect(),
            _ => unreachable!("cache kind is produced by the matching forward"),
        }
    }

    pub fn apply_batch_stats(&mut self, stats: &BatchStats, batch: usize) {
        if let Params::Batchnorm {
            running_mean,
            running_var,
            ..
        } = &mut self.params
        {
            let unbias = if batch > 1 {
                batch as f64 / (batch - 1) as f64
            } else {
                1.0
            };
            for j in 0..running_mean.len() {
                running_mean[j] = (1.0 - BN_MOMENTUM) * running_mean[j] + BN_MOMENTUM * stats.mean[j];
                running_var[j] =
                    (1.0 - BN_MOMENTUM) * running_var[j] + BN_MOMENTUM * stats.var[j] * unbias;
            }
        }
    }

    /// Parameter arrays in serialization order.
    pub fn stored(&self) -> Vec<&[f64]> {
        match &self.params {
            Params::Dense { weight, bias, .. } => vec![weight, bias],
            Params::Batchnorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => vec![gamma, beta, running_mean, running_var],
            Params::None => vec![],
        }
    }

    pub fn stored_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match &mut self.params {
            Params::Dense { weight, bias, .. } => vec![weight, bias],
            Params::Batchnorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => vec![gamma, beta, running_mean, running_var],
            Params::None => vec![],
        }
    }

    /// Trainable arrays paired with their gradients.
    pub fn trainable_mut(&mut self) -> Vec<(&mut Vec<f64>, &mut Vec<f64>)> {
        match &mut self.params {
            Params::Dense {
                weight,
                bias,
                grad_weight,
                grad_bias,
            } => vec![(weight, grad_weight), (bias, grad_bias)],
            Params::Batchnorm {
                gamma,
                beta,
                grad_gamma,
                grad_beta,
                ..
            } => vec![(gamma, grad_gamma), (beta, grad_beta)],
            Params::None => vec![],
        }
    }

    pub fn grads(&self) -> Vec<&[f64]> {
        match &self.params {
            Params::Dense {
                grad_weight,
                grad_bias,
                ..
            } => vec![grad_weight, grad_bias],
            Params::Batchnorm {
                grad_gamma,
                grad_beta,
                ..
            } => vec![grad_gamma, grad_beta],
            Params::None => vec![],
        }
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
