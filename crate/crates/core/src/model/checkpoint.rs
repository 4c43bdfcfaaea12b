//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic, a little-endian `u32` format version, a `u32`
//! header length, the JSON header, the base parameters, the optional prompt
//! parameters (all little-endian), then the SHA-256 of every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::prompt::PromptParams;
use super::scalar::Scalar;
use super::transformer::Model;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VCPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub dtype: String,
    pub base_len: usize,
    pub base_checksum: String,
    pub prompt_k: Option<usize>,
    pub prompt_len: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub model: Model<F>,
    pub prompts: Option<PromptParams<F>>,
    pub vocab_hash: String,
}

pub fn to_bytes<F: Scalar>(
    model: &Model<F>,
    prompts: Option<&PromptParams<F>>,
    vocab_hash: &str,
) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config().clone(),
        vocab_hash: vocab_hash.to_string(),
        dtype: F::DTYPE.to_string(),
        base_len: model.params().len(),
        base_checksum: model.checksum(),
        prompt_k: prompts.map(PromptParams::k),
        prompt_len: prompts.map_or(0, |p| p.data().len()),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + (header.base_len + header.prompt_len) * F::BYTES + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in model.params() {
        v.put_le(&mut out);
    }
    if let Some(p) = prompts {
        for &v in p.data() {
            v.put_le(&mut out);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn bad(msg: &str) -> Error {
    Error::BadCheckpoint(msg.to_string())
}

pub fn from_bytes<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    let actual = Sha256::digest(body);
    if actual.as_slice() != stored {
        return Err(Error::ChecksumMismatch {
            expected: hex::encode(stored),
            actual: hex::encode(actual),
        });
    }
    let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    let json = body.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json)?;
    if header.dtype != F::DTYPE {
        return Err(bad(&format!(
            "checkpoint holds {} parameters, {} requested",
            header.dtype,
            F::DTYPE
        )));
    }
    let data = &body[16 + hlen..];
    if data.len() != (header.base_len + header.prompt_len) * F::BYTES {
        return Err(bad("parameter section has the wrong size"));
    }
    let values: Vec<F> = data.chunks_exact(F::BYTES).map(F::get_le).collect();
    let (base, prompt) = values.split_at(header.base_len);
    let model = Model::from_params(header.config.clone(), base.to_vec())?;
    if model.checksum() != header.base_checksum {
        return Err(Error::ChecksumMismatch {
            expected: header.base_checksum,
            actual: model.checksum(),
        });
    }
    let prompts = match header.prompt_k {
        Some(k) => Some(PromptParams::from_data(&header.config, k, prompt.to_vec())?),
        None => None,
    };
    Ok(Checkpoint {
        model,
        prompts,
        vocab_hash: header.vocab_hash,
    })
}

pub fn save<F: Scalar>(
    path: &Path,
    model: &Model<F>,
    prompts: Option<&PromptParams<F>>,
    vocab_hash: &str,
) -> Result<()> {
    let bytes = to_bytes(model, prompts, vocab_hash)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
