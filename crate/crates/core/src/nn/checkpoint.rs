use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layer::LayerSpec;
use super::network::{BnStats, Network};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FWCKPT01";

/// A network plus caller-defined metadata and auxiliary value blocks
/// (for instance optimizer moments).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub meta: serde_json::Value,
    pub extra: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    param_shapes: Vec<Vec<usize>>,
    stats_sizes: Vec<usize>,
    extra_sizes: Vec<usize>,
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Self {
            network,
            meta: serde_json::Value::Null,
            extra: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.network;
        let params = net.params();
        let stats = net.bn_stats();
        let header = Header {
            input_shape: net.input_shape().to_vec(),
            layers: net.specs(),
            param_shapes: params.iter().map(|t| t.shape().to_vec()).collect(),
            stats_sizes: stats.iter().map(|s| s.mean.len()).collect(),
            extra_sizes: self.extra.iter().map(Vec::len).collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let values = params
            .iter()
            .flat_map(|t| t.data().iter())
            .chain(stats.iter().flat_map(|s| s.mean.iter().chain(&s.var)))
            .chain(self.extra.iter().flatten());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::format(origin, "not a network checkpoint"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| Error::format(origin, "truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::format(origin, e.to_string()))?;
        let payload = &bytes[16 + hlen..];
        let n_params: usize = header.param_shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let n_stats: usize = header.stats_sizes.iter().map(|s| 2 * s).sum();
        let n_extra: usize = header.extra_sizes.iter().sum();
        if payload.len() != 8 * (n_params + n_stats + n_extra) {
            return Err(Error::format(origin, "payload size does not match header"));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
        let params = header
            .param_shapes
            .iter()
            .map(|s| Tensor::from_vec(s, take(s.iter().product())))
            .collect::<Result<Vec<_>>>()?;
        let stats = header
            .stats_sizes
            .iter()
            .map(|&n| BnStats {
                mean: take(n),
                var: take(n),
            })
            .collect();
        let extra = header.extra_sizes.iter().map(|&n| take(n)).collect();
        let network = Network::from_parts(&header.input_shape, header.layers, params, stats)
            .map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(Self {
            network,
            meta: header.meta,
            extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
