//! `EMGM` checkpoint files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "EMGM" | version: u16 | header_len: u32 | header JSON | tensor bytes (f32) | crc32(tensor bytes): u32
//! ```
//!
//! The header carries the model config, normalization statistics and the
//! tensor manifest (name, shape, byte offset into the tensor section).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams, Normalizer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMGM";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    normalization: Normalizer,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

pub(crate) fn write_container(
    magic: &[u8; 4],
    version: u16,
    header: &[u8],
    body: &[u8],
) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + header.len() + body.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(body);
    out.extend_from_slice(&crc32fast::hash(body).to_le_bytes());
    out
}

/// Splits a container into `(header, body)` after checking magic, version,
/// lengths and the body CRC.
pub(crate) fn read_container<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    version: u16,
    what: &str,
) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 10 {
        return Err(Error::Format(format!(
            "{what}: truncated file ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "{what}: bad magic {:?}",
            &bytes[..4]
        )));
    }
    let found = u16::from_le_bytes([bytes[4], bytes[5]]);
    if found != version {
        return Err(Error::Format(format!(
            "{what}: version {found} unsupported (expected {version})"
        )));
    }
    let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + hlen + 4 {
        return Err(Error::Format(format!("{what}: truncated header")));
    }
    let header = &bytes[10..10 + hlen];
    let body = &bytes[10 + hlen..bytes.len() - 4];
    let tail = &bytes[bytes.len() - 4..];
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored {
        return Err(Error::Checksum(format!(
            "{what}: tensor section CRC mismatch"
        )));
    }
    Ok((header, body))
}

pub(crate) fn tensors_to_body<'a>(
    tensors: impl Iterator<Item = (&'a String, &'a Tensor)>,
) -> (Vec<ManifestEntry>, Vec<u8>) {
    let mut manifest = Vec::new();
    let mut body = Vec::new();
    for (name, t) in tensors {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: body.len(),
        });
        body.extend_from_slice(&t.to_le_bytes());
    }
    (manifest, body)
}

pub(crate) fn body_to_tensors(
    manifest: &[ManifestEntry],
    body: &[u8],
    what: &str,
) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for e in manifest {
        let numel: usize = e.shape.iter().product();
        let end = e.offset + numel * 4;
        if end > body.len() {
            return Err(Error::Format(format!(
                "{what}: tensor {} runs past end of data",
                e.name
            )));
        }
        let data = body[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(out)
}

/// CRC32 of the tensor section a checkpoint of `params` would contain.
pub fn tensor_crc(params: &ModelParams) -> u32 {
    crc32fast::hash(&tensors_to_body(params.iter()).1)
}

/// Serializes `model` to checkpoint bytes.
pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let (tensors, body) = tensors_to_body(model.params.iter());
    let header = Header {
        config: model.config.clone(),
        normalization: model.norm.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header)?;
    Ok(write_container(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        &header,
        &body,
    ))
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    model.params.check_manifest(&model.config)?;
    fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Model> {
    let (header, body) = read_container(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
    let header: Header = serde_json::from_slice(header)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    header.config.validate()?;
    let tensors = body_to_tensors(&header.tensors, body, "checkpoint")?;
    let params = ModelParams::from_map(tensors);
    params.check_manifest(&header.config)?;
    if header.normalization.channels() != header.config.channels {
        return Err(Error::Manifest(
            "normalization channel count differs from config".into(),
        ));
    }
    Ok(Model {
        config: header.config,
        norm: header.normalization,
        params,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    parse_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and verifies its tensors against `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    model.params.check_manifest(expected)?;
    Ok(model)
}
