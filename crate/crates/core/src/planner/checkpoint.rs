//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `MRPLANW1`, a little-endian `u64` header length, a UTF-8 JSON
//! header, then every parameter tensor as little-endian `f64` values in declared order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PlannerConfig, PlannerWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MRPLANW1";

/// Everything in the header besides the tensor table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub optimizer: String,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub epoch: usize,
    pub steps: u64,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: u32,
    config: PlannerConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(out: &mut impl Write, weights: &PlannerWeights, meta: &CheckpointMeta) -> Result<()> {
    weights.validate()?;
    let layout = weights.layout();
    let header = Header {
        format: 1,
        config: weights.config.clone(),
        meta: meta.clone(),
        tensors: layout
            .names()
            .iter()
            .zip(&weights.tensors)
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for t in &weights.tensors {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<(PlannerWeights, CheckpointMeta)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a planner checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(Error::Checkpoint(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format != 1 {
        return Err(Error::Checkpoint(format!("unsupported format version {}", header.format)));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            input.read_exact(&mut buf).map_err(|_| Error::Checkpoint(format!("truncated block {}", entry.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(Tensor::new(entry.shape.clone(), data).map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?);
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    let weights = PlannerWeights {
        config: header.config,
        tensors,
    };
    weights.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let layout = weights.layout();
    for (entry, name) in header.tensors.iter().zip(layout.names()) {
        if &entry.name != name {
            return Err(Error::Checkpoint(format!("block {} where {name} was expected", entry.name)));
        }
    }
    Ok((weights, header.meta))
}

pub fn save_checkpoint(path: &Path, weights: &PlannerWeights, meta: &CheckpointMeta) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, weights, meta)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(PlannerWeights, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::Variant;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_exact(seed in 0u64..1000, variant in 0usize..3, features in 1usize..6, share in any::<bool>()) {
            let cfg = PlannerConfig {
                features,
                variant: Variant::ALL[variant],
                share_update: share,
                ..PlannerConfig::default()
            };
            let w = PlannerWeights::init(&cfg, seed).unwrap();
            let meta = CheckpointMeta { optimizer: "adam".into(), seed, epoch: 3, ..Default::default() };
            let mut bytes = Vec::new();
            write_checkpoint(&mut bytes, &w, &meta).unwrap();
            let (back, meta_back) = read_checkpoint(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back, w);
            prop_assert_eq!(meta_back, meta);
        }
    }

    #[test]
    fn rejects_corruption() {
        let w = PlannerWeights::init(&PlannerConfig { features: 4, ..Default::default() }, 1).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &w, &CheckpointMeta::default()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
        let truncated = &bytes[..bytes.len() - 3];
        assert!(read_checkpoint(&mut &truncated[..]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(&mut extra.as_slice()).is_err());
    }
}
