//! Checkpoint serialization.
//!
//! Layout, all little-endian:
//!
//! ```text
//! [u32 config_len][config JSON, compact][f64 x n params][u32 crc32]
//! ```
//!
//! Parameters are the registry's flat vector in registration order, so a
//! checkpoint only loads into a model built from its own embedded config.
//! The trailing CRC-32 (IEEE polynomial, reflected) covers every byte
//! before it; any mismatch, truncation or malformed field reports the file
//! as corrupt rather than guessing.

use super::TrainConfig;
use crate::{Error, Result};
use std::path::Path;
use std::sync::OnceLock;

static CRC_TABLE: OnceLock<[u32; 256]> = OnceLock::new();

fn crc_table() -> &'static [u32; 256] {
    CRC_TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, entry) in table.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *entry = c;
        }
        table
    })
}

/// CRC-32 of `data` (the common zlib/PNG variant).
pub fn crc32(data: &[u8]) -> u32 {
    let table = crc_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in data {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

pub fn write_checkpoint(path: &Path, config: &TrainConfig, params: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(config)?;
    let mut bytes = Vec::with_capacity(8 + json.len() + params.len() * 8);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for p in params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    let crc = crc32(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(TrainConfig, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    let corrupt = |why: String| Error::Corrupt(format!("{}: {why}", path.display()));

    if bytes.len() < 8 {
        return Err(corrupt(format!("{} bytes is too short for any checkpoint", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("checked four bytes"));
    let actual = crc32(body);
    if stored != actual {
        return Err(corrupt(format!(
            "checksum mismatch (stored {stored:#010x}, computed {actual:#010x})"
        )));
    }

    let json_len = u32::from_le_bytes(body[..4].try_into().expect("checked four bytes")) as usize;
    let rest = &body[4..];
    if rest.len() < json_len {
        return Err(corrupt(format!(
            "config length {json_len} exceeds remaining {} bytes",
            rest.len()
        )));
    }
    let config: TrainConfig = serde_json::from_slice(&rest[..json_len])
        .map_err(|e| corrupt(format!("embedded config does not parse: {e}")))?;
    config
        .validate()
        .map_err(|e| corrupt(format!("embedded config is invalid: {e}")))?;

    let param_bytes = &rest[json_len..];
    if param_bytes.len() % 8 != 0 {
        return Err(corrupt(format!(
            "parameter section is {} bytes, not a multiple of 8",
            param_bytes.len()
        )));
    }
    let params: Vec<f64> = param_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of eight")))
        .collect();
    Ok((config, params))
}
