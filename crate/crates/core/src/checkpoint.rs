//! Versioned checkpoint format.
//!
//! Layout: the 8-byte magic `TFLOWCK1`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every parameter array as little-endian IEEE-754
//! `f64` values in header order.
//!
//! The header records the architecture, the ordered `(name, shape)` list and
//! optionally the effective run configuration that produced the weights.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::net::{Arch, ModelParams};

pub const MAGIC: &[u8; 8] = b"TFLOWCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub arch: Arch,
    pub arrays: Vec<ArraySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<BTreeMap<String, String>>,
}

pub fn encode(params: &ModelParams, config: Option<&BTreeMap<String, String>>) -> Result<Vec<u8>> {
    params.validate()?;
    let header = Header {
        format_version: FORMAT_VERSION,
        arch: params.arch,
        arrays: params
            .array_specs()
            .into_iter()
            .map(|(name, shape)| ArraySpec { name, shape })
            .collect(),
        config: config.cloned(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for slice in params.slices() {
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, Header)> {
    let found = bytes.len() as u64;
    let need = |needed: usize| -> Result<()> {
        if bytes.len() < needed {
            return Err(CheckpointError::Truncated {
                needed: needed as u64,
                found,
            }
            .into());
        }
        Ok(())
    };
    need(MAGIC.len())?;
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..8].to_vec(),
        }
        .into());
    }
    need(16)?;
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16usize
        .checked_add(usize::try_from(header_len).map_err(|_| CheckpointError::Header("header length overflow".into()))?)
        .ok_or_else(|| CheckpointError::Header("header length overflow".into()))?;
    need(header_end)?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(header.format_version).into());
    }

    let mut params = ModelParams::zeros(header.arch)
        .map_err(|e| CheckpointError::ShapeMismatch(format!("invalid architecture: {e}")))?;
    let expected = params.array_specs();
    if expected.len() != header.arrays.len() {
        return Err(CheckpointError::ShapeMismatch(format!(
            "header lists {} arrays, architecture has {}",
            header.arrays.len(),
            expected.len()
        ))
        .into());
    }
    for ((name, shape), spec) in expected.iter().zip(&header.arrays) {
        if *name != spec.name || *shape != spec.shape {
            return Err(CheckpointError::ShapeMismatch(format!(
                "array `{}` {:?} where architecture expects `{}` {:?}",
                spec.name, spec.shape, name, shape
            ))
            .into());
        }
    }

    let payload_len = 8 * params.num_params();
    need(header_end + payload_len)?;
    let trailing = bytes.len() - header_end - payload_len;
    if trailing != 0 {
        return Err(CheckpointError::TrailingBytes(trailing as u64).into());
    }
    let mut values = bytes[header_end..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for slice in params.slices_mut() {
        for (dst, v) in slice.iter_mut().zip(&mut values) {
            *dst = v;
        }
    }
    params.validate()?;
    Ok((params, header))
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_with_config(params, path, None)
}

pub fn save_checkpoint_with_config(
    params: &ModelParams,
    path: impl AsRef<Path>,
    config: Option<&BTreeMap<String, String>>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(params, config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_checkpoint(path).map(|(p, _)| p)
}

/// Loads parameters together with the header (architecture and echoed config).
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, Header)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
