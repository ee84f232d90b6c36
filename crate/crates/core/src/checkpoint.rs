//! Checkpoint archive: magic, version, a JSON header describing every tensor
//! and the payload hash, then the raw little-endian `f32` payload.
//!
//! ```text
//! b"M3DTCKPT" | u32 version | u64 header length | header JSON | payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Normalizer};
use crate::moe::MoeConfig;
use crate::params::{Component, ParamEntry, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"M3DTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub stage: u32,
    pub step: u64,
    pub model: ModelConfig,
    pub normalizer: Normalizer,
    pub moe: Option<MoeConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub component: Component,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    metadata: CheckpointMeta,
    payload_length: u64,
    payload_sha256: String,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Serialize to the archive byte layout.
pub fn encode(params: &ParamSet, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(params.num_scalars() * 4);
    let mut tensors = BTreeMap::new();
    for (name, e) in params.iter() {
        let offset = payload.len() as u64;
        for v in e.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.insert(
            name.clone(),
            TensorEntry {
                shape: e.tensor.shape().to_vec(),
                offset,
                length: payload.len() as u64 - offset,
                component: e.component,
                trainable: e.trainable,
            },
        );
    }
    let header = Header {
        metadata: meta.clone(),
        payload_length: payload.len() as u64,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        tensors,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse archive bytes; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(ParamSet, CheckpointMeta)> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected: expected as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < 8 {
        return Err(truncated(8));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < 20 {
        return Err(truncated(20));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnknownVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(header_len).ok_or_else(|| truncated(usize::MAX))?;
    if bytes.len() < header_end {
        return Err(truncated(header_end));
    }
    let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
    let payload = &bytes[header_end..];
    let expected = header_end + header.payload_length as usize;
    if payload.len() < header.payload_length as usize {
        return Err(truncated(expected));
    }
    if payload.len() > header.payload_length as usize {
        return Err(Error::InvalidArgument(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            payload.len() - header.payload_length as usize
        )));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(Error::HashMismatch { path: path.to_path_buf() });
    }
    let mut params = ParamSet::new();
    let mut covered = 0u64;
    let mut entries: Vec<(&String, &TensorEntry)> = header.tensors.iter().collect();
    entries.sort_by_key(|(_, e)| e.offset);
    for (name, e) in entries {
        let numel: usize = e.shape.iter().product();
        if e.offset != covered || e.length != 4 * numel as u64 || e.offset + e.length > header.payload_length {
            return Err(Error::InvalidArgument(format!(
                "{}: tensor `{name}` has an inconsistent extent",
                path.display()
            )));
        }
        covered += e.length;
        let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert_entry(
            name.clone(),
            ParamEntry {
                tensor: Tensor::new(e.shape.clone(), data)?,
                component: e.component,
                trainable: e.trainable,
            },
        );
    }
    if covered != header.payload_length {
        return Err(Error::InvalidArgument(format!(
            "{}: tensors cover {covered} of {} payload bytes",
            path.display(),
            header.payload_length
        )));
    }
    Ok((params, header.metadata))
}

pub fn save_checkpoint(params: &ParamSet, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = encode(params, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_backbone, Activation};
    use crate::moe::{attach_moe, RoutingMode};

    fn sample() -> (ParamSet, CheckpointMeta) {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            hidden_dim: 8,
            context_k: 2,
            prompt_kstar: 1,
            max_state_dim: 4,
            max_action_dim: 2,
            dropout: 0.0,
            max_episode_len: 8,
            activation: Activation::Relu,
        };
        let moe = MoeConfig {
            n_experts: 2,
            router_layers: 3,
            router_hidden: 4,
            routing_mode: RoutingMode::Dense,
        };
        let mut p = init_backbone(&cfg, 3).unwrap();
        attach_moe(&mut p, &cfg, &moe, 4).unwrap();
        p.set_trainable_where(|_, c| c == Component::Router);
        let meta = CheckpointMeta {
            config_hash: "abc".into(),
            stage: 2,
            step: 17,
            model: cfg,
            normalizer: Normalizer::identity(4),
            moe: Some(moe),
        };
        (p, meta)
    }

    #[test]
    fn round_trip_is_bit_exact_and_stable() {
        let (p, meta) = sample();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&p, &meta, &a).unwrap();
        let (loaded, m2) = load_checkpoint(&a).unwrap();
        assert_eq!(m2, meta);
        for (name, e) in p.iter() {
            let l = loaded.get(name).unwrap();
            assert!(l.tensor.bit_eq(&e.tensor));
            assert_eq!((l.component, l.trainable), (e.component, e.trainable));
        }
        save_checkpoint(&loaded, &m2, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn corruption_errors_are_distinct() {
        let (p, meta) = sample();
        let bytes = encode(&p, &meta).unwrap();
        let path = Path::new("x.ckpt");

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x01;
        assert!(matches!(decode(&flipped, path), Err(Error::HashMismatch { .. })));

        assert!(matches!(decode(&bytes[..bytes.len() - 3], path), Err(Error::Truncated { .. })));
        assert!(matches!(decode(&bytes[..15], path), Err(Error::Truncated { .. })));

        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(decode(&version, path), Err(Error::UnknownVersion { version: 9, .. })));

        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(decode(&magic, path), Err(Error::BadMagic { .. })));
    }
}
