//! Reference integer GEMM: integer products accumulated in `i32` over runs
//! of input features that share both an activation and a weight scale, then
//! rescaled and summed across runs in floating point.

use super::grouped::GroupQuantWeights;
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Largest magnitude an `i32` accumulator may reach.
pub const ACC_LIMIT: i64 = i32::MAX as i64;

/// Symmetric activation codes with one scale per (row, group) along the
/// feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantActivations {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub bits: u8,
    pub codes: Vec<i16>,
    /// Row-major `rows × num_groups`.
    pub scales: Vec<f64>,
}

impl QuantActivations {
    pub fn num_groups(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    /// `code · scale` per element.
    pub fn dequantize(&self) -> Matrix {
        let groups = self.num_groups();
        Matrix::from_fn(self.rows, self.cols, |r, c| {
            self.codes[r * self.cols + c] as f64 * self.scales[r * groups + c / self.group_size]
        })
    }
}

/// Feature run `[start, end)` with its activation and weight group.
#[derive(Debug, Clone, Copy)]
struct Segment {
    start: usize,
    end: usize,
    act_group: usize,
    weight_group: usize,
}

fn segments(cols: usize, act_group: usize, weight_group: usize) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < cols {
        let a_end = (start / act_group + 1) * act_group;
        let w_end = (start / weight_group + 1) * weight_group;
        let end = a_end.min(w_end).min(cols);
        out.push(Segment {
            start,
            end,
            act_group: start / act_group,
            weight_group: start / weight_group,
        });
        start = end;
    }
    out
}

/// Shape check and the accumulator overflow guard shared by both kernels.
fn prepare(a: &QuantActivations, w: &GroupQuantWeights) -> Result<Vec<Segment>> {
    if a.cols != w.cols {
        return Err(Error::invalid(format!(
            "inner dimension mismatch: activations {} vs weights {}",
            a.cols, w.cols
        )));
    }
    let segs = segments(a.cols, a.group_size, w.group_size);
    // Worst case from the code widths, not the observed codes.
    let a_max = (1i64 << (a.bits.clamp(2, 16) - 1)) - 1;
    let w_max = (1i64 << (w.bits.clamp(2, 8) - 1)) - 1;
    let longest = segs.iter().map(|s| s.end - s.start).max().unwrap_or(0) as i64;
    if longest * a_max * w_max > ACC_LIMIT {
        return Err(Error::numeric(
            w.layer_id.clone(),
            format!("int32 accumulator could overflow ({longest}·{a_max}·{w_max})"),
        ));
    }
    Ok(segs)
}

/// `A · Wᵀ` on integer operands. Weight codes of any width are widened to
/// 8-bit operands; activation codes may be up to 16 bits wide.
///
/// Per-segment integer dot products run through a blocked GEMM on codes
/// held as `f64`. The overflow guard bounds every partial sum below 2^31,
/// far inside the 2^53 range where `f64` integer arithmetic is exact, so the
/// accumulators equal the `i32` ones bit for bit (see [`int_gemm_scalar`]).
pub fn int_gemm(a: &QuantActivations, w: &GroupQuantWeights) -> Result<Matrix> {
    let segs = prepare(a, w)?;
    let (m, k, n) = (a.rows, a.cols, w.rows);
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(out);
    }
    let a_codes: Vec<f64> = a.codes.iter().map(|&c| c as f64).collect();
    let w_codes: Vec<f64> = w.codes.iter().map(|&c| c as f64).collect();
    let a_groups = a.num_groups();
    let w_groups = w.num_groups();
    let mut acc = vec![0.0f64; m * n];
    for s in &segs {
        let len = s.end - s.start;
        // SAFETY: offsets and strides stay inside the row-major code
        // buffers (`m×k`, `n×k`) and the `m×n` accumulator.
        unsafe {
            matrixmultiply::dgemm(
                m,
                len,
                n,
                1.0,
                a_codes.as_ptr().add(s.start),
                k as isize,
                1,
                w_codes.as_ptr().add(s.start),
                1,
                k as isize,
                0.0,
                acc.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        for r in 0..m {
            let a_scale = a.scales[r * a_groups + s.act_group];
            let dst = out.row_mut(r);
            for (o, d) in dst.iter_mut().enumerate() {
                let w_scale = w.scales[o * w_groups + s.weight_group];
                *d += acc[r * n + o] * (a_scale * w_scale);
            }
        }
    }
    Ok(out)
}

/// Straightforward `i32`-accumulator version of [`int_gemm`].
pub fn int_gemm_scalar(a: &QuantActivations, w: &GroupQuantWeights) -> Result<Matrix> {
    let segs = prepare(a, w)?;
    let a_groups = a.num_groups();
    let w_groups = w.num_groups();
    let mut out = Matrix::zeros(a.rows, w.rows);
    for r in 0..a.rows {
        let a_row = &a.codes[r * a.cols..(r + 1) * a.cols];
        let a_scales = &a.scales[r * a_groups..(r + 1) * a_groups];
        let dst = out.row_mut(r);
        for (o, d) in dst.iter_mut().enumerate() {
            let w_row = &w.codes[o * w.cols..(o + 1) * w.cols];
            let w_scales = &w.scales[o * w_groups..(o + 1) * w_groups];
            let mut total = 0.0;
            for s in &segs {
                let mut acc: i32 = 0;
                for (x, y) in a_row[s.start..s.end].iter().zip(&w_row[s.start..s.end]) {
                    acc += *x as i32 * *y as i32;
                }
                total += acc as f64 * (a_scales[s.act_group] * w_scales[s.weight_group]);
            }
            *d = total;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, quantize_grouped};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quant_acts(m: &Matrix, bits: u8, group: usize) -> QuantActivations {
        let q = quantize_grouped(m, bits, group).unwrap();
        QuantActivations {
            rows: q.rows,
            cols: q.cols,
            group_size: group,
            bits,
            codes: q.codes.iter().map(|&c| c as i16).collect(),
            scales: q.scales,
        }
    }

    #[test]
    fn segments_split_on_both_group_grids() {
        let s = segments(10, 4, 3);
        let bounds: Vec<_> = s.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(bounds, vec![(0, 3), (3, 4), (4, 6), (6, 8), (8, 9), (9, 10)]);
    }

    #[test]
    fn identity_activations_select_weight_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Matrix::from_fn(5, 6, |_, _| rng.random_range(-1.0..1.0));
        let qw = quantize_grouped(&w, 4, 3).unwrap();
        let a = QuantActivations {
            rows: 6,
            cols: 6,
            group_size: 6,
            bits: 8,
            codes: Matrix::identity(6).as_slice().iter().map(|&v| v as i16).collect(),
            scales: vec![1.0; 6],
        };
        let out = int_gemm(&a, &qw).unwrap();
        assert_eq!(out, dequantize(&qw).transpose());
    }

    #[test]
    fn zero_codes_give_zero() {
        let qw = quantize_grouped(&Matrix::zeros(3, 4), 8, 2).unwrap();
        let a = quant_acts(&Matrix::zeros(2, 4), 8, 4);
        assert_eq!(int_gemm(&a, &qw).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn matches_float_gemm_on_dequantized_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::from_fn(4, 16, |_, _| rng.random_range(-3.0..3.0));
        // Stored out×in, i.e. the 16×8 right operand transposed.
        let w = Matrix::from_fn(8, 16, |_, _| rng.random_range(-1.0..1.0));
        let qa = quant_acts(&x, 8, 8);
        let qw = quantize_grouped(&w, 8, 8).unwrap();
        let int_out = int_gemm(&qa, &qw).unwrap();
        let float_out = qa.dequantize().matmul_t(&dequantize(&qw));
        let rel = (int_out.dist_sq(&float_out) / float_out.frobenius_sq()).sqrt();
        assert!(rel <= 1e-4, "relative error {rel}");
    }

    #[test]
    fn mismatched_inner_dimension_rejected() {
        let qw = quantize_grouped(&Matrix::zeros(3, 4), 8, 2).unwrap();
        let a = quant_acts(&Matrix::zeros(2, 5), 8, 5);
        assert!(int_gemm(&a, &qw).is_err());
    }

    proptest::proptest! {
        #[test]
        fn blocked_kernel_equals_scalar_kernel(
            seed in 0u64..1000,
            rows in 1usize..6,
            cols in 1usize..40,
            out in 1usize..7,
            ag in 1usize..20,
            wg in 1usize..20,
            bits in proptest::sample::select(vec![3u8, 4, 6, 8]),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-3.0..3.0));
            let w = Matrix::from_fn(out, cols, |_, _| rng.random_range(-1.0..1.0));
            let qa = quant_acts(&x, 8, ag);
            let qw = quantize_grouped(&w, bits, wg).unwrap();
            proptest::prop_assert_eq!(int_gemm(&qa, &qw).unwrap(), int_gemm_scalar(&qa, &qw).unwrap());
        }
    }
}
