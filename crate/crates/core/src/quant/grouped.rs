//! Grouped symmetric weight quantization with one scale per (row, group).

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;
use crate::{Error, Result};

/// Scales never drop below this, so all-zero groups stay well defined.
pub const SCALE_FLOOR: f64 = 1e-12;

/// Largest symmetric code magnitude for `bits`.
#[inline]
pub fn qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// Round-half-away-from-zero of `w / scale`, clamped to `±qmax`.
#[inline]
pub fn quantize_value(w: f64, scale: f64, qmax: i32) -> i32 {
    ((w / scale).round() as i64).clamp(-(qmax as i64), qmax as i64) as i32
}

#[inline]
pub(crate) fn group_scale(values: impl Iterator<Item = f64>, qmax: i32) -> f64 {
    let amax = values.fold(0.0f64, |m, v| m.max(v.abs()));
    (amax / qmax as f64).max(SCALE_FLOOR)
}

/// Integer weight codes (out×in) with per-(row, group) scales along the
/// input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupQuantWeights {
    pub layer_id: String,
    pub bits: u8,
    pub group_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i8>,
    /// Row-major `rows × num_groups`.
    pub scales: Vec<f64>,
}

impl GroupQuantWeights {
    pub fn num_groups(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    #[inline]
    pub fn code(&self, r: usize, c: usize) -> i8 {
        self.codes[r * self.cols + c]
    }

    #[inline]
    pub fn scale(&self, r: usize, group: usize) -> f64 {
        self.scales[r * self.num_groups() + group]
    }

    pub fn max_scale(&self) -> f64 {
        self.scales.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_scale(&self) -> f64 {
        self.scales.iter().sum::<f64>() / self.scales.len() as f64
    }

    pub fn with_layer_id(mut self, id: impl Into<String>) -> Self {
        self.layer_id = id.into();
        self
    }
}

pub(crate) fn check_bits(bits: u8) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::invalid(format!(
            "weight bit width {bits} unsupported (2..=8)"
        )));
    }
    Ok(())
}

/// Round-to-nearest grouped quantization.
pub fn quantize_grouped(w: &Matrix, bits: u8, group_size: usize) -> Result<GroupQuantWeights> {
    check_bits(bits)?;
    if group_size == 0 {
        return Err(Error::invalid("group size must be positive"));
    }
    if !w.is_finite() {
        return Err(Error::invalid("weights contain non-finite values"));
    }
    let (rows, cols) = w.shape();
    let q = qmax(bits);
    let groups = cols.div_ceil(group_size);
    let mut codes = vec![0i8; rows * cols];
    let mut scales = Vec::with_capacity(rows * groups);
    for r in 0..rows {
        let row = w.row(r);
        for g in 0..groups {
            let range = g * group_size..((g + 1) * group_size).min(cols);
            let scale = group_scale(row[range.clone()].iter().copied(), q);
            scales.push(scale);
            for c in range {
                codes[r * cols + c] = quantize_value(row[c], scale, q) as i8;
            }
        }
    }
    Ok(GroupQuantWeights {
        layer_id: String::new(),
        bits,
        group_size,
        rows,
        cols,
        codes,
        scales,
    })
}

/// `w' = code · scale` per element.
pub fn dequantize(q: &GroupQuantWeights) -> Matrix {
    let groups = q.num_groups();
    Matrix::from_fn(q.rows, q.cols, |r, c| {
        q.codes[r * q.cols + c] as f64 * q.scales[r * groups + c / q.group_size]
    })
}
