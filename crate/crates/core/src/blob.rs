//! Versioned container used by the checkpoint and packed-plan files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic (format specific, ASCII)
//! 8       4     version: u32
//! 12      8     header_len: u64
//! 20      H     header: UTF-8 JSON, `header_len` bytes
//! 20+H    ...   payload: concatenated blobs; the header gives each blob's
//!               byte offset (relative to the payload start) and length
//! ```

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

pub fn write_container<H: Serialize>(
    mut w: impl Write,
    magic: &[u8; 8],
    version: u32,
    header: &H,
    payload: &[u8],
) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(payload)?;
    Ok(())
}

pub fn read_container<H: DeserializeOwned>(
    mut r: impl Read,
    magic: &[u8; 8],
    version: u32,
) -> Result<(H, Vec<u8>)> {
    let mut fixed = [0u8; 20];
    r.read_exact(&mut fixed)?;
    if &fixed[..8] != magic {
        return Err(Error::Format("bad magic".into()));
    }
    let found = u32::from_le_bytes(fixed[8..12].try_into().unwrap());
    if found != version {
        return Err(Error::Format(format!(
            "unsupported version {found}, expected {version}"
        )));
    }
    let header_len = u64::from_le_bytes(fixed[12..20].try_into().unwrap()) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header = serde_json::from_slice(&header)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    Ok((header, payload))
}

pub(crate) fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) -> (usize, usize) {
    let offset = buf.len();
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    (offset, buf.len() - offset)
}

pub(crate) fn read_f64s(payload: &[u8], offset: usize, len: usize) -> Result<Vec<f64>> {
    let bytes = payload
        .get(offset..offset + len)
        .ok_or_else(|| Error::Format("blob out of bounds".into()))?;
    if len % 8 != 0 {
        return Err(Error::Format("f64 blob length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn slice<'a>(payload: &'a [u8], offset: usize, len: usize) -> Result<&'a [u8]> {
    payload
        .get(offset..offset + len)
        .ok_or_else(|| Error::Format("blob out of bounds".into()))
}
