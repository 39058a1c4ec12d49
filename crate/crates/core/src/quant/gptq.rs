//! Hessian-guided grouped quantization (GPTQ without act-order).
//!
//! `H = XᵀX + λI` with `λ = 0.01·mean(diag H)`. Columns are quantized left
//! to right; each column's rounding error, divided by the diagonal of the
//! upper Cholesky factor `U` of `H⁻¹`, is pushed into the remaining columns
//! along row `i` of `U`. Group scales are fixed from the error-updated
//! weights when a group starts.

use nalgebra::DMatrix;

use super::grouped::{check_bits, group_scale, qmax, quantize_value, GroupQuantWeights};
use crate::tensor::Matrix;
use crate::{Error, Result};

const DAMP: f64 = 0.01;
const DAMP_RETRIES: usize = 3;

/// Upper Cholesky factor of the damped inverse Hessian, reusable across
/// bit widths and group sizes for one layer.
#[derive(Debug, Clone)]
pub struct HessianFactor {
    upper: Matrix,
}

impl HessianFactor {
    pub fn from_inputs(x: &Matrix) -> Result<Self> {
        let d = x.cols();
        if x.rows() < d {
            return Err(Error::invalid(format!(
                "GPTQ needs at least {d} calibration rows, got {}",
                x.rows()
            )));
        }
        Self::from_hessian(&x.gram())
    }

    pub fn from_hessian(h: &Matrix) -> Result<Self> {
        let d = h.rows();
        let mean_diag = (0..d).map(|i| h.get(i, i)).sum::<f64>() / d as f64;
        let mut lambda = (DAMP * mean_diag).max(1e-10);
        for _ in 0..=DAMP_RETRIES {
            let damped = DMatrix::from_fn(d, d, |r, c| {
                h.get(r, c) + if r == c { lambda } else { 0.0 }
            });
            if let Some(upper) = inverse_cholesky_upper(damped) {
                return Ok(Self { upper });
            }
            lambda *= 10.0;
        }
        Err(Error::numeric(
            "gptq",
            format!("Cholesky failed after {DAMP_RETRIES} damping escalations"),
        ))
    }

    pub fn dim(&self) -> usize {
        self.upper.rows()
    }
}

fn inverse_cholesky_upper(h: DMatrix<f64>) -> Option<Matrix> {
    let d = h.nrows();
    let inv = h.cholesky()?.inverse();
    let sym = DMatrix::from_fn(d, d, |r, c| 0.5 * (inv[(r, c)] + inv[(c, r)]));
    let l = sym.cholesky()?.unpack();
    let upper = Matrix::from_fn(d, d, |r, c| l[(c, r)]);
    if !upper.is_finite() || (0..d).any(|i| upper.get(i, i) <= 0.0) {
        return None;
    }
    Some(upper)
}

/// Packs `w` (out×in) against calibration inputs `x` (N×in).
pub fn gptq_pack(w: &Matrix, x: &Matrix, bits: u8, group_size: usize) -> Result<GroupQuantWeights> {
    if x.cols() != w.cols() {
        return Err(Error::invalid("calibration width differs from layer input width"));
    }
    let factor = HessianFactor::from_inputs(x)?;
    gptq_pack_with(w, &factor, bits, group_size)
}

pub fn gptq_pack_with(
    w: &Matrix,
    factor: &HessianFactor,
    bits: u8,
    group_size: usize,
) -> Result<GroupQuantWeights> {
    check_bits(bits)?;
    if group_size == 0 {
        return Err(Error::invalid("group size must be positive"));
    }
    let (rows, cols) = w.shape();
    if factor.dim() != cols {
        return Err(Error::invalid("Hessian factor dimension mismatch"));
    }
    if !w.is_finite() {
        return Err(Error::invalid("weights contain non-finite values"));
    }
    let q = qmax(bits);
    let groups = cols.div_ceil(group_size);
    let u = &factor.upper;
    let mut work = w.clone();
    let mut codes = vec![0i8; rows * cols];
    let mut scales = vec![0.0; rows * groups];

    for i in 0..cols {
        let g = i / group_size;
        if i % group_size == 0 {
            let end = ((g + 1) * group_size).min(cols);
            for r in 0..rows {
                scales[r * groups + g] = group_scale(work.row(r)[i..end].iter().copied(), q);
            }
        }
        let d = u.get(i, i);
        let u_row = &u.row(i)[i + 1..];
        for r in 0..rows {
            let scale = scales[r * groups + g];
            let row = work.row_mut(r);
            let code = quantize_value(row[i], scale, q);
            codes[r * cols + i] = code as i8;
            let err = (row[i] - code as f64 * scale) / d;
            for (dst, &uij) in row[i + 1..].iter_mut().zip(u_row) {
                *dst -= err * uij;
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

/// `‖X·Wᵀ − X·Ŵᵀ‖² / rows(X)`: calibration-output reconstruction error.
pub fn output_mse(x: &Matrix, w: &Matrix, w_hat: &Matrix) -> f64 {
    let a = x.matmul_t(w);
    let b = x.matmul_t(w_hat);
    a.dist_sq(&b) / x.rows() as f64
}
