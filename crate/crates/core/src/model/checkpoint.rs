//! Teacher checkpoint: a [`crate::blob`] container whose header maps each
//! tensor name to its shape and blob; every tensor is row-major `f64` LE.
//!
//! Header JSON:
//! `{"seed": u64, "num_steps": usize, "tensors": [{"name", "shape", "offset", "len"}]}`
//! with names `<layer_id>.weight`, `<layer_id>.bias` and `class_embed`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{layer_table, Linear, TinyDiT};
use crate::blob::{push_f64s, read_container, read_f64s, write_container};
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DPLNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    seed: u64,
    num_steps: usize,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &TinyDiT, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (info, layer) in layer_table().iter().zip(model.layers()) {
        let (offset, len) = push_f64s(&mut payload, layer.weight.as_slice());
        tensors.push(TensorEntry {
            name: format!("{}.weight", info.id),
            shape: vec![layer.weight.rows(), layer.weight.cols()],
            offset,
            len,
        });
        let (offset, len) = push_f64s(&mut payload, &layer.bias);
        tensors.push(TensorEntry {
            name: format!("{}.bias", info.id),
            shape: vec![layer.bias.len()],
            offset,
            len,
        });
    }
    let ce = model.class_embed();
    let (offset, len) = push_f64s(&mut payload, ce.as_slice());
    tensors.push(TensorEntry {
        name: "class_embed".into(),
        shape: vec![ce.rows(), ce.cols()],
        offset,
        len,
    });
    let header = Header {
        seed: model.seed,
        num_steps: model.num_steps,
        tensors,
    };
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_container(file, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<TinyDiT> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let (header, payload): (Header, Vec<u8>) =
        read_container(file, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let find = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
        let e = header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` missing")))?;
        let values = read_f64s(&payload, e.offset, e.len)?;
        if values.len() != e.shape.iter().product::<usize>() {
            return Err(Error::Format(format!("tensor `{name}` has wrong length")));
        }
        Ok((e.shape.clone(), values))
    };
    let matrix = |name: &str| -> Result<Matrix> {
        let (shape, values) = find(name)?;
        if shape.len() != 2 {
            return Err(Error::Format(format!("tensor `{name}` is not 2-D")));
        }
        Ok(Matrix::from_vec(shape[0], shape[1], values))
    };
    let mut layers = Vec::new();
    for info in layer_table() {
        let weight = matrix(&format!("{}.weight", info.id))?;
        let (_, bias) = find(&format!("{}.bias", info.id))?;
        layers.push(Linear { weight, bias });
    }
    let class_embed = matrix("class_embed")?;
    TinyDiT::from_parts(header.seed, header.num_steps, layers, class_embed)
}
