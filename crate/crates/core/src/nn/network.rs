use serde::{Deserialize, Serialize};

use super::layer::{Cache, Layer, LayerKind, LayerSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

/// A feed-forward stack of layers from the fixed layer set.
///
/// `forward(.., Mode::Train)` caches activations and updates batchnorm
/// running statistics; `backward` consumes that cache. `infer` never
/// mutates, so a trained network can be shared across threads.
#[derive(Debug, Clone)]
pub struct Network {
    seed: u64,
    layers: Vec<Layer>,
    caches: Option<Vec<Cache>>,
    cached_batch: usize,
}

impl Network {
    pub fn new(specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, s) in specs.iter().enumerate() {
            if s.in_dim == 0 || s.out_dim == 0 {
                return Err(Error::InvalidArgument(format!("layer {i} has a zero dimension")));
            }
            if !matches!(s.kind, LayerKind::Dense) && s.in_dim != s.out_dim {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} ({}) must preserve width",
                    s.kind.name()
                )));
            }
            if i > 0 && specs[i - 1].out_dim != s.in_dim {
                return Err(Error::LayerShape {
                    layer: i,
                    expected: specs[i - 1].out_dim,
                    actual: s.in_dim,
                });
            }
        }
        Ok(Self {
            seed,
            layers: specs.into_iter().map(Layer::init).collect(),
            caches: None,
            cached_batch: 0,
        })
    }

    pub fn builder(input_dim: usize, seed: u64) -> NetworkBuilder {
        NetworkBuilder {
            seed,
            width: input_dim,
            specs: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.spec.out_dim).unwrap_or(0)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn trainable_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.trainable_len()).sum()
    }

    pub fn stored_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.stored_len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let cols = x.cols();
        if x.shape().len() != 2 || cols != self.input_dim() {
            return Err(Error::LayerShape {
                layer: 0,
                expected: self.input_dim(),
                actual: if x.shape().len() == 2 { cols } else { x.len() },
            });
        }
        Ok(x.rows())
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Infer => self.infer(x),
            Mode::Train => {
                let batch = self.check_input(x)?;
                let mut caches = Vec::with_capacity(self.layers.len());
                let mut h = x.data().to_vec();
                for layer in &mut self.layers {
                    let (y, cache, stats) = layer.forward(&h, batch, true);
                    if let Some(stats) = stats {
                        layer.apply_batch_stats(&stats, batch);
                    }
                    caches.push(cache.expect("train forward always caches"));
                    h = y;
                }
                self.caches = Some(caches);
                self.cached_batch = batch;
                Ok(Tensor::from_raw(vec![batch, self.output_dim()], h))
            }
        }
    }

    /// Inference-mode forward; batchnorm uses running statistics.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.evaluate(x, false)
    }

    /// Forward without side effects. With `train = true` batchnorm uses batch
    /// statistics, which is what finite-difference checks need.
    pub fn evaluate(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let batch = self.check_input(x)?;
        let mut h = x.data().to_vec();
        for layer in &self.layers {
            h = layer.forward(&h, batch, train).0;
        }
        Ok(Tensor::from_raw(vec![batch, self.output_dim()], h))
    }

    /// Backpropagates `grad_out` (dLoss/dOutput) through the cached train pass.
    /// Parameter gradients are stored in the layers; returns dLoss/dInput.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let caches = self
            .caches
            .take()
            .ok_or_else(|| Error::State("backward called before a train-mode forward".into()))?;
        let batch = self.cached_batch;
        if grad_out.len() != batch * self.output_dim() {
            let expected = self.output_dim();
            self.caches = Some(caches);
            return Err(Error::LayerShape {
                layer: self.layers.len() - 1,
                expected,
                actual: grad_out.len() / batch.max(1),
            });
        }
        let mut g = grad_out.data().to_vec();
        for (layer, cache) in self.layers.iter_mut().zip(&caches).rev() {
            g = layer.backward(cache, &g, batch);
        }
        Ok(Tensor::from_raw(vec![batch, self.input_dim()], g))
    }

    /// Per-parameter-array gradients in layer order (weights before biases).
    pub fn gradients(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .flat_map(|l| l.grads().into_iter().map(|g| g.to_vec()))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for (_, g) in layer.trainable_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub(crate) fn trainable_mut(&mut self) -> Vec<(&mut Vec<f64>, &mut Vec<f64>)> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.trainable_mut())
            .collect()
    }

    /// Trainable arrays of one layer, for perturbation-based checks.
    pub fn layer_params_mut(&mut self, layer: usize) -> Vec<&mut Vec<f64>> {
        self.layers[layer]
            .trainable_mut()
            .into_iter()
            .map(|(p, _)| p)
            .collect()
    }

    pub fn layer_grads(&self, layer: usize) -> Vec<&[f64]> {
        self.layers[layer].grads()
    }

    pub fn layer_kind(&self, layer: usize) -> LayerKind {
        self.layers[layer].spec.kind
    }

    /// All stored values in serialization order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.stored_count());
        for layer in &self.layers {
            for arr in layer.stored() {
                out.extend_from_slice(arr);
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.stored_count() {
            return Err(Error::Shape(format!(
                "expected {} stored values, got {}",
                self.stored_count(),
                values.len()
            )));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            for arr in layer.stored_mut() {
                let n = arr.len();
                arr.copy_from_slice(&values[off..off + n]);
                off += n;
            }
        }
        self.caches = None;
        Ok(())
    }
}

/// Chains layer specs, deriving each layer's init seed from the network seed.
#[derive(Debug, Clone)]
pub struct NetworkBuilder {
    seed: u64,
    width: usize,
    specs: Vec<LayerSpec>,
}

impl NetworkBuilder {
    fn push(mut self, kind: LayerKind, out_dim: usize) -> Self {
        let idx = self.specs.len() as u64;
        let init_seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(idx.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            ^ 0x94D0_49BB_1331_11EB;
        self.specs.push(LayerSpec {
            kind,
            in_dim: self.width,
            out_dim,
            init_seed,
        });
        self.width = out_dim;
        self
    }

    pub fn dense(self, out_dim: usize) -> Self {
        self.push(LayerKind::Dense, out_dim)
    }

    pub fn batchnorm(self) -> Self {
        let w = self.width;
        self.push(LayerKind::Batchnorm, w)
    }

    pub fn relu(self) -> Self {
        let w = self.width;
        self.push(LayerKind::Relu, w)
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        let w = self.width;
        self.push(LayerKind::LeakyRelu { slope }, w)
    }

    pub fn sigmoid(self) -> Self {
        let w = self.width;
        self.push(LayerKind::Sigmoid, w)
    }

    pub fn tanh(self) -> Self {
        let w = self.width;
        self.push(LayerKind::Tanh, w)
    }

    pub fn build(self) -> Result<Network> {
        Network::new(self.specs, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set_dense(net: &mut Network, layer: usize, w: &[f64], b: &[f64]) {
        let mut p = net.layer_params_mut(layer);
        p[0].copy_from_slice(w);
        p[1].copy_from_slice(b);
    }

    #[test]
    fn identity_dense() {
        let mut net = Network::builder(3, 0).dense(3).build().unwrap();
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        set_dense(&mut net, 0, &eye, &[0.0; 3]);
        let y = net.infer(&Tensor::row(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn scalar_dense() {
        let mut net = Network::builder(1, 0).dense(1).build().unwrap();
        set_dense(&mut net, 0, &[2.0], &[1.0]);
        assert_eq!(net.infer(&Tensor::row(vec![3.0]).unwrap()).unwrap().data(), &[7.0]);
    }

    #[test]
    fn dense_matches_plain_matvec() {
        let net = Network::builder(4, 11).dense(3).build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = net.infer(&Tensor::matrix(2, 4, x.clone()).unwrap()).unwrap();
        let p = net.flat_params();
        let (w, b) = p.split_at(12);
        for r in 0..2 {
            for o in 0..3 {
                let mut s = b[o];
                for i in 0..4 {
                    s += w[o * 4 + i] * x[r * 4 + i];
                }
                assert!((y.data()[r * 3 + o] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_width_names_the_layer() {
        let net = Network::builder(4, 0).dense(3).build().unwrap();
        match net.infer(&Tensor::row(vec![1.0; 5]).unwrap()) {
            Err(Error::LayerShape { layer: 0, expected: 4, actual: 5 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn backward_needs_forward() {
        let mut net = Network::builder(2, 0).dense(1).build().unwrap();
        assert!(matches!(net.backward(&Tensor::row(vec![1.0]).unwrap()), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut net = Network::builder(3, 2).dense(4).batchnorm().leaky_relu(0.2).dense(2).build().unwrap();
        let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        net.forward(&x, Mode::Train).unwrap();
        net.backward(&Tensor::zeros(vec![4, 2])).unwrap();
        assert!(net.gradients().iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_mse_gradient_is_exact() {
        let mut net = Network::builder(3, 5).dense(2).build().unwrap();
        let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let t = Tensor::matrix(4, 2, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let pred = net.forward(&x, Mode::Train).unwrap();
        let (_, g) = crate::nn::mse_loss(&pred, &t).unwrap();
        net.backward(&g).unwrap();
        let analytic = net.gradients().concat();
        let base = net.flat_params();
        let eps = 1e-3;
        for k in 0..base.len() {
            let loss_at = |d: f64| {
                let mut n = net.clone();
                let mut p = base.clone();
                p[k] += d;
                n.set_flat_params(&p).unwrap();
                crate::nn::mse_loss(&n.infer(&x).unwrap(), &t).unwrap().0
            };
            let fd = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
            assert!((fd - analytic[k]).abs() < 1e-10, "param {k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn infer_batchnorm_is_affine() {
        let mut net = Network::builder(3, 9).batchnorm().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let x = Tensor::matrix(8, 3, (0..24).map(|_| rng.gen_range(-3.0..5.0)).collect()).unwrap();
            net.forward(&x, Mode::Train).unwrap();
        }
        let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = |v: &[f64]| net.infer(&Tensor::row(v.to_vec()).unwrap()).unwrap().into_data();
        let (alpha, beta) = (0.3, 1.9);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(p, q)| alpha * p + beta * q).collect();
        let zero = f(&[0.0; 3]);
        let (fa, fb, fm) = (f(&a), f(&b), f(&mix));
        for j in 0..3 {
            // affine: f(αa + βb) − f(0) = α(f(a) − f(0)) + β(f(b) − f(0))
            let lhs = fm[j] - zero[j];
            let rhs = alpha * (fa[j] - zero[j]) + beta * (fb[j] - zero[j]);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_training() {
        let run = || {
            let mut net = Network::builder(3, 4).dense(5).batchnorm().tanh().dense(1).build().unwrap();
            let mut opt = crate::nn::Sgd::new(crate::nn::SgdConfig::new(0.05, 0.9, 1e-4).unwrap());
            let x = Tensor::matrix(6, 3, (0..18).map(|i| (i as f64).sin()).collect()).unwrap();
            let t = Tensor::matrix(6, 1, (0..6).map(|i| i as f64 * 0.2).collect()).unwrap();
            for _ in 0..20 {
                let p = net.forward(&x, Mode::Train).unwrap();
                let (_, g) = crate::nn::mse_loss(&p, &t).unwrap();
                net.backward(&g).unwrap();
                opt.step(&mut net).unwrap();
            }
            net.flat_params()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
