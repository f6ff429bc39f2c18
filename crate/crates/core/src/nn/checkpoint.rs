//! `FFW1` checkpoint files: magic, u32 LE header length, JSON header, then raw
//! little-endian f32 arrays (network weights, optional probe, optional gates).

use super::{Architecture, Network, Tensor};
use crate::error::{Error, Result};
use crate::gating::GateMode;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"FFW1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epochs_seen: f64,
    pub batches_seen: u64,
    pub dataset: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateSection {
    pub mode: GateMode,
    pub tau: f64,
    pub arrays: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub weights: Vec<Tensor<f32>>,
    pub probe: Option<Vec<Tensor<f32>>>,
    pub gates: Option<GateSection>,
    pub seed: u64,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GateHeader {
    mode: GateMode,
    tau: f64,
    shapes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    architecture: Architecture,
    seed: u64,
    meta: TrainingMeta,
    probe: Option<Vec<Vec<usize>>>,
    gates: Option<GateHeader>,
}

fn shapes(ts: &[Tensor<f32>]) -> Vec<Vec<usize>> {
    ts.iter().map(|t| t.shape.clone()).collect()
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, seed: u64, meta: TrainingMeta) -> Self {
        Checkpoint { arch: net.arch.clone(), weights: net.params.clone(), probe: None, gates: None, seed, meta }
    }

    pub fn network(&self) -> Result<Network<f32>> {
        Network::from_params(self.arch.clone(), self.weights.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            architecture: self.arch.clone(),
            seed: self.seed,
            meta: self.meta.clone(),
            probe: self.probe.as_deref().map(shapes),
            gates: self
                .gates
                .as_ref()
                .map(|g| GateHeader { mode: g.mode, tau: g.tau, shapes: shapes(&g.arrays) }),
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
        let mut out = Vec::with_capacity(8 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        let probe = self.probe.iter().flatten();
        let gates = self.gates.iter().flat_map(|g| g.arrays.iter());
        for t in self.weights.iter().chain(probe).chain(gates) {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an FFW1 checkpoint".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(8..8 + len).ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        header.architecture.validate()?;
        let mut cursor = 8 + len;
        let mut read = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 4 * n)
                .ok_or_else(|| Error::Format("truncated array data".into()))?;
            cursor += 4 * n;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(shape, data)
        };
        let weights = header.architecture.param_shapes().iter().map(|s| read(s)).collect::<Result<Vec<_>>>()?;
        let probe = match &header.probe {
            Some(ss) => Some(ss.iter().map(|s| read(s)).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        let gates = match &header.gates {
            Some(g) => Some(GateSection {
                mode: g.mode,
                tau: g.tau,
                arrays: g.shapes.iter().map(|s| read(s)).collect::<Result<Vec<_>>>()?,
            }),
            None => None,
        };
        if cursor != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cursor)));
        }
        Ok(Checkpoint { arch: header.architecture, weights, probe, gates, seed: header.seed, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
