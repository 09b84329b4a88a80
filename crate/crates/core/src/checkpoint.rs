//! Binary checkpoint format.
//!
//! ```text
//! b"SCBR" | version: u32 LE | header_len: u32 LE | header: canonical JSON
//!        | parameters: f64 LE, tensor by tensor in manifest order
//! ```
//!
//! The header holds the network config, the init seed, the layer manifest,
//! the parameter shapes and free-form metadata. Canonical JSON means compact
//! output with object keys sorted, so identical networks give identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layer::{Layer, LayerSpec};
use crate::network::{Network, NetworkConfig};
use crate::tensor::Tensor;
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"SCBR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: NetworkConfig,
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
    pub param_shapes: Vec<Vec<usize>>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub fn to_bytes<T: Scalar>(network: &Network<T>, metadata: &BTreeMap<String, serde_json::Value>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: network.config().clone(),
        seed: network.seed(),
        layers: network.layer_specs(),
        param_shapes: network.params().iter().map(|p| p.shape().to_vec()).collect(),
        metadata: metadata.clone(),
    };
    // round-trip through Value so object keys come out sorted
    let json = serde_json::to_vec(&serde_json::to_value(&header)?)?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::Format("checkpoint header too large".into()))?;

    let mut bytes = Vec::with_capacity(12 + json.len() + 8 * network.param_count());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&header_len.to_le_bytes());
    bytes.extend_from_slice(&json);
    for p in network.params() {
        for &v in p.data() {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(Network<T>, CheckpointHeader)> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < header_len {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..header_len])?;
    let mut values = body[header_len..].chunks_exact(8);
    if !values.remainder().is_empty() {
        return Err(Error::Format("parameter section is not a whole number of f64 values".into()));
    }

    let layers: Vec<Layer<T>> = header.layers.iter().map(Layer::from_spec).collect();
    let mut network = Network::from_layers(header.config.clone(), header.seed, layers)?;
    let shapes: Vec<Vec<usize>> = network.params().iter().map(|p| p.shape().to_vec()).collect();
    if shapes != header.param_shapes {
        return Err(Error::Format("parameter shapes disagree with the layer manifest".into()));
    }
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if values.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameter values, manifest needs {expected}",
            values.len()
        )));
    }
    for p in network.params_mut() {
        let data: Vec<T> = values
            .by_ref()
            .take(p.len())
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().unwrap())))
            .collect();
        *p = Tensor::new(p.shape().to_vec(), data)?;
    }
    Ok((network, header))
}

pub fn save<T: Scalar>(network: &Network<T>, metadata: &BTreeMap<String, serde_json::Value>, path: &Path) -> Result<()> {
    let bytes = to_bytes(network, metadata)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Network<T>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_network;

    fn small() -> Network<f64> {
        build_network(&NetworkConfig::desk().with_input_size(20, 20), 77).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let net = small();
        let mut meta = BTreeMap::new();
        meta.insert("split_seed".to_string(), serde_json::json!(42));
        let bytes = to_bytes(&net, &meta).unwrap();
        let (back, header) = from_bytes::<f64>(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(header.metadata, meta);
        assert_eq!(to_bytes(&back, &meta).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = to_bytes(&small(), &BTreeMap::new()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f64>(&bad), Err(Error::Format(_))));
        bytes[4] = 9;
        let err = from_bytes::<f64>(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn rejects_truncation() {
        let bytes = to_bytes(&small(), &BTreeMap::new()).unwrap();
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 8]).is_err());
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 3]).is_err());
    }
}
