//! `EMGR` recording files.
//!
//! `"EMGR" | version: u16 | header_len: u32 | header JSON | body | crc32(body): u32`
//! where the body holds, per sample, `C` little-endian f32 values followed by
//! one u8 label.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Population, Recording, SetKind};
use crate::error::{Error, Result};
use crate::model::{read_container, write_container};
use crate::numerics::Tensor;

pub const RECORDING_MAGIC: &[u8; 4] = b"EMGR";
pub const RECORDING_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    subject_id: String,
    population: Population,
    set_kind: String,
    condition: String,
    sample_rate_hz: f32,
    channels: usize,
    num_samples: usize,
    label_map: BTreeMap<String, String>,
}

fn label_map() -> BTreeMap<String, String> {
    [("0", "relax"), ("1", "open"), ("2", "close")]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

pub fn recording_bytes(rec: &Recording) -> Result<Vec<u8>> {
    let c = rec.channels();
    let header = Header {
        subject_id: rec.subject_id.clone(),
        population: rec.population,
        set_kind: rec.set_kind.as_str().to_string(),
        condition: rec.condition.clone(),
        sample_rate_hz: rec.sample_rate_hz,
        channels: c,
        num_samples: rec.num_samples(),
        label_map: label_map(),
    };
    let mut body = Vec::with_capacity(rec.num_samples() * (4 * c + 1));
    for (t, &label) in rec.labels.iter().enumerate() {
        for v in rec.row(t) {
            body.extend_from_slice(&v.to_le_bytes());
        }
        let label = u8::try_from(label)
            .map_err(|_| Error::Label(format!("label {label} does not fit a byte")))?;
        body.push(label);
    }
    let header = serde_json::to_vec(&header)?;
    Ok(write_container(
        RECORDING_MAGIC,
        RECORDING_VERSION,
        &header,
        &body,
    ))
}

pub fn write_recording(rec: &Recording, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, recording_bytes(rec)?)?;
    Ok(())
}

pub fn parse_recording(bytes: &[u8]) -> Result<Recording> {
    let (header, body) = read_container(bytes, RECORDING_MAGIC, RECORDING_VERSION, "recording")?;
    let h: Header = serde_json::from_slice(header)
        .map_err(|e| Error::Format(format!("recording header: {e}")))?;
    let set_kind: SetKind = h.set_kind.parse()?;
    if h.channels == 0 {
        return Err(Error::Format("recording declares zero channels".into()));
    }
    let stride = 4 * h.channels + 1;
    if body.len() != h.num_samples * stride {
        return Err(Error::Format(format!(
            "recording body has {} bytes; {} samples of {} channels need {}",
            body.len(),
            h.num_samples,
            h.channels,
            h.num_samples * stride
        )));
    }
    let mut samples = Vec::with_capacity(h.num_samples * h.channels);
    let mut labels = Vec::with_capacity(h.num_samples);
    for rec in body.chunks_exact(stride) {
        for v in rec[..stride - 1].chunks_exact(4) {
            samples.push(f32::from_le_bytes([v[0], v[1], v[2], v[3]]));
        }
        let label = rec[stride - 1] as usize;
        if label >= h.label_map.len().max(1) {
            return Err(Error::Label(format!(
                "recording label {label} outside label map"
            )));
        }
        labels.push(label);
    }
    Ok(Recording {
        subject_id: h.subject_id,
        population: h.population,
        set_kind,
        condition: h.condition,
        sample_rate_hz: h.sample_rate_hz,
        samples: Tensor::new(vec![h.num_samples, h.channels], samples)?,
        labels,
    })
}

pub fn read_recording(path: impl AsRef<Path>) -> Result<Recording> {
    parse_recording(&fs::read(path)?)
}
