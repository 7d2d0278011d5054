//! `EMGA` adapter sidecar files.
//!
//! Same container as checkpoints (magic, u16 version, u32 header length,
//! JSON header, f32 data, CRC32 of the data). The header records the CRC of
//! the base checkpoint's tensor section so adapters cannot be applied to a
//! different base.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LoraPair, LoraState};
use crate::error::{Error, Result};
use crate::model::{
    body_to_tensors, read_container, tensor_crc, tensors_to_body, write_container, ManifestEntry,
    ModelParams,
};

pub const ADAPTER_MAGIC: &[u8; 4] = b"EMGA";
pub const ADAPTER_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    base_crc: u32,
    rank: usize,
    alpha: f32,
    targets: Vec<String>,
    tensors: Vec<ManifestEntry>,
}

pub fn save_adapters(lora: &LoraState, base: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let named: Vec<(String, &crate::numerics::Tensor)> = lora
        .pairs
        .iter()
        .flat_map(|(b, p)| [(LoraState::a_name(b), &p.a), (LoraState::b_name(b), &p.b)])
        .collect();
    let (tensors, body) = tensors_to_body(named.iter().map(|(n, t)| (n, *t)));
    let header = Header {
        base_crc: tensor_crc(base),
        rank: lora.rank,
        alpha: lora.alpha,
        targets: lora.targets(),
        tensors,
    };
    let header = serde_json::to_vec(&header)?;
    fs::write(
        path,
        write_container(ADAPTER_MAGIC, ADAPTER_VERSION, &header, &body),
    )?;
    Ok(())
}

/// Loads adapters and checks that they were trained against `base`.
pub fn load_adapters(path: impl AsRef<Path>, base: &ModelParams) -> Result<LoraState> {
    let bytes = fs::read(path)?;
    let (header, body) = read_container(&bytes, ADAPTER_MAGIC, ADAPTER_VERSION, "adapter file")?;
    let header: Header = serde_json::from_slice(header)
        .map_err(|e| Error::Format(format!("adapter header: {e}")))?;
    let crc = tensor_crc(base);
    if header.base_crc != crc {
        return Err(Error::Checksum(format!(
            "adapters were trained on base {:08x}, got {crc:08x}",
            header.base_crc
        )));
    }
    let mut tensors = body_to_tensors(&header.tensors, body, "adapter file")?;
    let mut lora = LoraState {
        rank: header.rank,
        alpha: header.alpha,
        pairs: Default::default(),
    };
    for target in header.targets {
        let missing = |n: String| Error::Manifest(format!("adapter file lacks tensor {n}"));
        let a = tensors
            .remove(&LoraState::a_name(&target))
            .ok_or_else(|| missing(LoraState::a_name(&target)))?;
        let b = tensors
            .remove(&LoraState::b_name(&target))
            .ok_or_else(|| missing(LoraState::b_name(&target)))?;
        let w = base.get(&target)?;
        let pair = LoraPair {
            base_name: target.clone(),
            a,
            b,
        };
        super::lora_effective_weight(w, &pair, lora.alpha, lora.rank)?;
        lora.pairs.insert(target, pair);
    }
    Ok(lora)
}
