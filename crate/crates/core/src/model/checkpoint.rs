//! Checkpoint serialization: JSON header plus raw little-endian tensors.
//!
//! The header is self-describing (dtype, architecture, step count, RNG state,
//! provenance, tensor index, payload hash); loading rejects any mismatch
//! between the header and the requested scalar type or the stored shapes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::atomic_write;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"ICLCKPT1";

/// Training state stored alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    /// Free-form provenance: regime, direction, k, parent checkpoint, config
    /// echo. Recorded verbatim in the header.
    pub provenance: Value,
}

impl CheckpointMeta {
    pub fn fresh(seed: u64) -> Self {
        Self {
            step: 0,
            rng_seed: seed,
            rng_word_pos: 0,
            provenance: Value::Null,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: ModelConfig,
    step: u64,
    rng_seed: u64,
    rng_word_pos: u128,
    provenance: Value,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

/// Identifier of a checkpoint: prefix of the payload hash.
pub fn checkpoint_id_of(payload_sha256: &str) -> String {
    payload_sha256[..12].to_string()
}

pub fn save<F: Scalar>(params: &ModelParams<F>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let named = params.named_tensors();
    let mut payload = Vec::new();
    for (_, _, slice) in &named {
        for &v in *slice {
            v.write_le(&mut payload);
        }
    }
    let digest = hex(&Sha256::digest(&payload));
    let header = Header {
        dtype: F::DTYPE.to_string(),
        config: params.config.clone(),
        step: meta.step,
        rng_seed: meta.rng_seed,
        rng_word_pos: meta.rng_word_pos,
        provenance: meta.provenance.clone(),
        tensors: named
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
        payload_sha256: digest,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    atomic_write(path, &out)
}

/// Load a checkpoint, rejecting dtype, config, shape or integrity mismatches.
/// Returns the parameters, metadata and the checkpoint id.
pub fn load<F: Scalar>(path: &Path) -> Result<(ModelParams<F>, CheckpointMeta, String)> {
    let bytes = fs::read(path)?;
    let fail = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(fail("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    if header.dtype != F::DTYPE {
        return Err(fail(format!(
            "dtype mismatch: file holds {}, caller expects {}",
            header.dtype,
            F::DTYPE
        )));
    }
    header.config.validate()?;
    let payload = &bytes[16 + header_len..];
    let digest = hex(&Sha256::digest(payload));
    if digest != header.payload_sha256 {
        return Err(fail("payload hash mismatch".into()));
    }

    let mut params = ModelParams::<F>::init(header.config.clone(), 0)?.zeros_like();
    {
        let expected = params.named_tensors();
        if expected.len() != header.tensors.len() {
            return Err(fail(format!(
                "tensor count mismatch: file has {}, config implies {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape, _), entry) in expected.iter().zip(&header.tensors) {
            if *name != entry.name || *shape != entry.shape {
                return Err(fail(format!(
                    "tensor mismatch: file has {} {:?}, config implies {} {:?}",
                    entry.name, entry.shape, name, shape
                )));
            }
        }
    }
    let total: usize = params
        .named_tensors()
        .iter()
        .map(|(_, _, s)| s.len())
        .sum();
    if payload.len() != total * F::BYTE_WIDTH {
        return Err(fail(format!(
            "payload size {} does not match {} parameters",
            payload.len(),
            total
        )));
    }
    let mut offset = 0;
    for slice in params.param_slices_mut() {
        for v in slice.iter_mut() {
            *v = F::read_le(&payload[offset..]);
            offset += F::BYTE_WIDTH;
        }
    }
    let meta = CheckpointMeta {
        step: header.step,
        rng_seed: header.rng_seed,
        rng_word_pos: header.rng_word_pos,
        provenance: header.provenance,
    };
    Ok((params, meta, checkpoint_id_of(&digest)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let params = ModelParams::<f32>::init(ModelConfig::mini(), 21).unwrap();
        let meta = CheckpointMeta {
            step: 123,
            rng_seed: 7,
            rng_word_pos: 99,
            provenance: json!({"regime": "fewshot", "direction": "direct", "k": 16}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&params, &meta, &path).unwrap();
        let (loaded, lmeta, id) = load::<f32>(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(lmeta.step, 123);
        assert_eq!(lmeta.rng_word_pos, 99);
        assert_eq!(lmeta.provenance["k"], 16);
        assert_eq!(id.len(), 12);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let params = ModelParams::<f32>::init(ModelConfig::mini(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&params, &CheckpointMeta::fresh(3), &path).unwrap();
        assert!(load::<f64>(&path).is_err());
    }

    #[test]
    fn corruption_is_rejected() {
        let params = ModelParams::<f32>::init(ModelConfig::mini(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&params, &CheckpointMeta::fresh(3), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(load::<f32>(&path).is_err());
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("noise.bin");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load::<f32>(&path).is_err());
    }
}
