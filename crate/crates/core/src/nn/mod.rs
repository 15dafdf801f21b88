//! Small differentiable-layer toolkit shared by every trained network.

pub mod fit;
pub mod gradcheck;
pub mod io;
mod layer;
pub mod loss;
mod network;
pub mod optim;
pub mod standardize;
mod tensor;

pub use fit::{fit_mse, FitConfig, FitHistory};
pub use io::{decode_params, encode_params, load_params, save_params, WeightsHeader};
pub use layer::{LayerKind, LayerSpec, BN_EPS, BN_MOMENTUM};
pub use loss::{bce_batch, bce_loss, mse_loss};
pub use network::{Mode, Network, NetworkBuilder};
pub use optim::{Sgd, SgdConfig};
pub use standardize::Standardizer;
pub use tensor::Tensor;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Shuffled mini-batch index lists covering `0..n` once.
pub fn minibatches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Gathers rows of a row-major buffer into a `[idx.len(), width]` tensor.
pub fn gather_rows(data: &[f64], width: usize, idx: &[usize]) -> Tensor {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&data[i * width..(i + 1) * width]);
    }
    Tensor::from_raw(vec![idx.len(), width], out)
}
