//! Weights file: one UTF-8 JSON header line, then the little-endian `f64`
//! blob. Parameters are concatenated in layer order, weights before biases,
//! and gamma / beta / running mean / running variance for batchnorm.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layer::LayerSpec;
use super::network::Network;
use crate::error::{Error, Result};

pub const WEIGHTS_FORMAT: &str = "pulsebench-weights";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    /// Free-form role tag such as `R`, `S`, `G1`, `D2`, `E`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    pub layers: Vec<LayerSpec>,
    pub byte_count: usize,
    /// Model-specific side data (normalization statistics and the like).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

pub fn encode_params(net: &Network, role: Option<&str>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let values = net.flat_params();
    let header = WeightsHeader {
        format: WEIGHTS_FORMAT.to_string(),
        version: WEIGHTS_VERSION,
        seed: net.seed(),
        role: role.map(str::to_string),
        layers: net.specs(),
        byte_count: values.len() * 8,
        meta,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<(Network, WeightsHeader)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CorruptFile("missing header line".into()))?;
    let header: WeightsHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::CorruptFile(format!("unreadable header: {e}")))?;
    if header.format != WEIGHTS_FORMAT {
        return Err(Error::CorruptFile(format!("unknown format tag {:?}", header.format)));
    }
    if header.version != WEIGHTS_VERSION {
        return Err(Error::CorruptFile(format!("unsupported version {}", header.version)));
    }
    let blob = &bytes[nl + 1..];
    if blob.len() != header.byte_count {
        return Err(Error::BlobLength {
            expected: header.byte_count,
            actual: blob.len(),
        });
    }
    let mut net = Network::new(header.layers.clone(), header.seed)
        .map_err(|e| Error::CorruptFile(format!("invalid layer specs: {e}")))?;
    let declared = net.stored_count() * 8;
    if declared != header.byte_count {
        return Err(Error::CorruptFile(format!(
            "layer specs need {declared} bytes but header declares {}",
            header.byte_count
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    net.set_flat_params(&values)?;
    Ok((net, header))
}

pub fn save_params(
    net: &Network,
    path: impl AsRef<Path>,
    role: Option<&str>,
    meta: serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_params(net, role, meta)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<(Network, WeightsHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}
