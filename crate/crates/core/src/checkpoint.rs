//! Single-file checkpoints.
//!
//! Layout: magic `PHDF0001`, `u64` little-endian header length, UTF-8 JSON
//! header, little-endian `f32` payloads in table order, then the SHA-256 of
//! the payload bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use phdiff_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::def_fusion::AblationFlags;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};

pub const MAGIC: &[u8; 8] = b"PHDF0001";
const MAGIC_FAMILY: &[u8; 4] = b"PHDF";
const CHECKSUM_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    pub t_default: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub fingerprint: String,
    pub config: ModelConfig,
    pub schedule: ScheduleInfo,
    pub ablation: AblationFlags,
    pub arrays: Vec<ArrayEntry>,
}

/// Serialized bytes of a state; parameters are narrowed to `f32`.
pub fn encode_state<T: Scalar>(state: &ModelState<T>) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for (_, store) in state.stores() {
        for (name, t) in store.iter() {
            arrays.push(ArrayEntry { name: name.to_string(), dtype: "float32".into(), shape: t.shape().to_vec() });
            for v in t.data() {
                payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    let c = &state.config;
    let header = Header {
        fingerprint: c.fingerprint(),
        config: c.clone(),
        schedule: ScheduleInfo { t_default: c.t_default, beta_start: c.beta_start, beta_end: c.beta_end },
        ablation: state.ablation,
        arrays,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len() + CHECKSUM_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn save_state<T: Scalar>(state: &ModelState<T>, path: &Path) -> Result<()> {
    let bytes = encode_state(state)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parses and verifies the header; the payload checksum is checked too.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("truncated: missing magic or header length".into()));
    }
    if &bytes[..8] != MAGIC {
        if &bytes[..4] == MAGIC_FAMILY {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {:?}",
                String::from_utf8_lossy(&bytes[4..8])
            )));
        }
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    for a in &header.arrays {
        if a.dtype != "float32" {
            return Err(Error::Checkpoint(format!("array {}: unsupported dtype {}", a.name, a.dtype)));
        }
    }
    let n: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
    let rest = &body[hlen..];
    if rest.len() != 4 * n + CHECKSUM_LEN {
        return Err(Error::Checkpoint(format!(
            "truncated or oversized payload: {} bytes for {n} values",
            rest.len()
        )));
    }
    let (payload, sum) = rest.split_at(4 * n);
    if Sha256::digest(payload).as_slice() != sum {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }
    if header.config.fingerprint() != header.fingerprint {
        return Err(Error::Fingerprint { expected: header.config.fingerprint(), found: header.fingerprint });
    }
    Ok((header, payload))
}

pub fn decode_state<T: Scalar>(bytes: &[u8]) -> Result<ModelState<T>> {
    let (header, payload) = read_header(bytes)?;
    let mut state = ModelState::new(header.config.clone())?;
    state.ablation = header.ablation;
    let mut offset = 0;
    let mut seen = 0;
    for a in &header.arrays {
        let n: usize = a.shape.iter().product();
        let data = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        offset += 4 * n;
        let t = Tensor::new(&a.shape, data)?;
        let mut placed = false;
        for (_, store) in state.stores_mut() {
            if store.find(&a.name).is_some() {
                store.set(&a.name, t).map_err(Error::Checkpoint)?;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Checkpoint(format!("unknown array {}", a.name)));
        }
        seen += 1;
    }
    let expected: usize = state.stores().iter().map(|(_, s)| s.len()).sum();
    if seen != expected {
        return Err(Error::Checkpoint(format!("checkpoint has {seen} arrays, model needs {expected}")));
    }
    Ok(state)
}

pub fn load_state<T: Scalar>(path: &Path) -> Result<ModelState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_state(&bytes)
}

/// Loads a state and checks that it was built for `expected`'s architecture.
pub fn load_state_for<T: Scalar>(path: &Path, expected: &ModelConfig) -> Result<ModelState<T>> {
    let state: ModelState<T> = load_state(path)?;
    let (want, found) = (expected.fingerprint(), state.config.fingerprint());
    if want != found {
        return Err(Error::Fingerprint { expected: want, found });
    }
    Ok(state)
}
