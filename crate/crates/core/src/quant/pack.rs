//! Packed-plan file: a [`crate::blob`] container holding every layer of a
//! student.
//!
//! Header JSON (version 1):
//!
//! ```json
//! {"layers": [
//!   {"layer_id": "...", "precision": "w4", "group_size": 288, "shape": [out, in],
//!    "codes": [offset, len], "scales": [offset, len]},
//!   {"layer_id": "...", "precision": "fp16", "group_size": 64, "shape": [out, in]}
//! ]}
//! ```
//!
//! Integer codes are stored two's complement at exactly `bits` bits each,
//! row-major, packed LSB-first into a byte stream per layer. Scales are
//! row-major `f64` LE, one per (row, group). Passthrough layers carry no
//! blobs; their weights come from the teacher checkpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grouped::GroupQuantWeights;
use super::plan::Precision;
use crate::blob::{push_f64s, read_container, read_f64s, slice, write_container};
use crate::{Error, Result};

pub const PACK_MAGIC: &[u8; 8] = b"DPLNPACK";
pub const PACK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum PackedLayer {
    Quantized(GroupQuantWeights),
    Passthrough {
        layer_id: String,
        precision: Precision,
        group_size: usize,
        shape: (usize, usize),
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    layer_id: String,
    precision: Precision,
    group_size: usize,
    shape: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    codes: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scales: Option<[usize; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    layers: Vec<Entry>,
}

fn pack_codes(codes: &[i8], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; (codes.len() * bits as usize).div_ceil(8)];
    let mask = (1u16 << bits) - 1;
    for (i, &c) in codes.iter().enumerate() {
        let v = (c as i16 as u16) & mask;
        for b in 0..bits as usize {
            if v >> b & 1 == 1 {
                let pos = i * bits as usize + b;
                out[pos / 8] |= 1 << (pos % 8);
            }
        }
    }
    out
}

fn unpack_codes(bytes: &[u8], n: usize, bits: u8) -> Vec<i8> {
    (0..n)
        .map(|i| {
            let mut v: u16 = 0;
            for b in 0..bits as usize {
                let pos = i * bits as usize + b;
                if bytes[pos / 8] >> (pos % 8) & 1 == 1 {
                    v |= 1 << b;
                }
            }
            // Sign-extend from `bits`.
            let shift = 16 - bits as u32;
            (((v << shift) as i16) >> shift) as i8
        })
        .collect()
}

pub fn save_packed(layers: &[PackedLayer], path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(layers.len());
    for layer in layers {
        match layer {
            PackedLayer::Quantized(q) => {
                let precision = Precision::ALL
                    .into_iter()
                    .find(|p| p.int_bits() == Some(q.bits))
                    .ok_or_else(|| Error::invalid(format!("no precision for {} bits", q.bits)))?;
                let bytes = pack_codes(&q.codes, q.bits);
                let codes = [payload.len(), bytes.len()];
                payload.extend_from_slice(&bytes);
                let (off, len) = push_f64s(&mut payload, &q.scales);
                entries.push(Entry {
                    layer_id: q.layer_id.clone(),
                    precision,
                    group_size: q.group_size,
                    shape: [q.rows, q.cols],
                    codes: Some(codes),
                    scales: Some([off, len]),
                });
            }
            PackedLayer::Passthrough {
                layer_id,
                precision,
                group_size,
                shape,
            } => entries.push(Entry {
                layer_id: layer_id.clone(),
                precision: *precision,
                group_size: *group_size,
                shape: [shape.0, shape.1],
                codes: None,
                scales: None,
            }),
        }
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_container(file, PACK_MAGIC, PACK_VERSION, &Header { layers: entries }, &payload)
}

pub fn load_packed(path: &Path) -> Result<Vec<PackedLayer>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let (header, payload): (Header, Vec<u8>) = read_container(file, PACK_MAGIC, PACK_VERSION)?;
    header
        .layers
        .into_iter()
        .map(|e| {
            let (rows, cols) = (e.shape[0], e.shape[1]);
            match (e.precision.int_bits(), e.codes, e.scales) {
                (Some(bits), Some(codes), Some(scales)) => {
                    let bytes = slice(&payload, codes[0], codes[1])?;
                    if bytes.len() != (rows * cols * bits as usize).div_ceil(8) {
                        return Err(Error::Format(format!("bad code blob for `{}`", e.layer_id)));
                    }
                    let scales = read_f64s(&payload, scales[0], scales[1])?;
                    if scales.len() != rows * cols.div_ceil(e.group_size.max(1)) {
                        return Err(Error::Format(format!("bad scale blob for `{}`", e.layer_id)));
                    }
                    Ok(PackedLayer::Quantized(GroupQuantWeights {
                        layer_id: e.layer_id,
                        bits,
                        group_size: e.group_size,
                        rows,
                        cols,
                        codes: unpack_codes(bytes, rows * cols, bits),
                        scales,
                    }))
                }
                (None, None, None) => Ok(PackedLayer::Passthrough {
                    layer_id: e.layer_id,
                    precision: e.precision,
                    group_size: e.group_size,
                    shape: (rows, cols),
                }),
                _ => Err(Error::Format(format!("inconsistent entry for `{}`", e.layer_id))),
            }
        })
        .collect()
}
