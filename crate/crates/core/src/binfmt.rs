//! Shared container for feature caches and checkpoints: a JSON header followed
//! by a row-major little-endian `f32` payload.
//!
//! Layout: 4-byte magic, `u64` LE header length, header bytes, payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"SSFC";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSCK";

pub fn write_file<H: Serialize>(path: &Path, magic: &[u8; 4], header: &H, payload: &[f32]) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(magic)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for v in payload {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_file<H: DeserializeOwned>(path: &Path, magic: &[u8; 4]) -> Result<(H, Vec<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(bad("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: H = serde_json::from_slice(body)?;
    let payload = &bytes[12 + hlen..];
    if payload.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}
