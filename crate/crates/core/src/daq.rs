//! Dynamic activation quantization.
//!
//! For every row (one token of one sample at one timestep) and every group
//! of `g_a` consecutive features:
//!
//! ```text
//! τ = Percentile(|v|, p)          nearest rank, floored at 1e-12
//! α = τ / (2^(b-1) - 1)
//! v̂ = α · round(clip(v, -τ, τ) / α)   round half away from zero
//! ```
//!
//! The bit width `b` comes from the phase bin of the current timestep.

use serde::{Deserialize, Serialize};

use crate::quant::{qmax, QuantActivations};
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const TAU_FLOOR: f64 = 1e-12;
pub const SUPPORTED_ACT_BITS: [u8; 4] = [4, 6, 8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseBin {
    Early,
    Mid,
    Late,
}

impl PhaseBin {
    pub const ALL: [PhaseBin; 3] = [PhaseBin::Early, PhaseBin::Mid, PhaseBin::Late];

    pub fn name(self) -> &'static str {
        match self {
            PhaseBin::Early => "early",
            PhaseBin::Mid => "mid",
            PhaseBin::Late => "late",
        }
    }
}

/// Activation bits per phase bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinBits {
    pub early: u8,
    pub mid: u8,
    pub late: u8,
}

impl BinBits {
    pub fn uniform(bits: u8) -> Self {
        Self {
            early: bits,
            mid: bits,
            late: bits,
        }
    }

    pub fn get(&self, bin: PhaseBin) -> u8 {
        match bin {
            PhaseBin::Early => self.early,
            PhaseBin::Mid => self.mid,
            PhaseBin::Late => self.late,
        }
    }

    pub fn get_mut(&mut self, bin: PhaseBin) -> &mut u8 {
        match bin {
            PhaseBin::Early => &mut self.early,
            PhaseBin::Mid => &mut self.mid,
            PhaseBin::Late => &mut self.late,
        }
    }
}

/// Contents of `daq.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaqPolicy {
    pub bits: BinBits,
    pub percentile: f64,
    pub group_size: usize,
    /// Bin boundaries as fractions of T; a boundary step belongs to the
    /// later bin.
    pub boundaries: [f64; 2],
}

impl Default for DaqPolicy {
    fn default() -> Self {
        Self {
            bits: BinBits::uniform(8),
            percentile: 99.9,
            group_size: 128,
            boundaries: [1.0 / 3.0, 2.0 / 3.0],
        }
    }
}

impl DaqPolicy {
    pub fn uniform(bits: u8) -> Self {
        Self {
            bits: BinBits::uniform(bits),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for bin in PhaseBin::ALL {
            let b = self.bits.get(bin);
            if !SUPPORTED_ACT_BITS.contains(&b) {
                return Err(Error::invalid(format!(
                    "activation bits {b} for {} bin unsupported by the kernel (allowed {:?})",
                    bin.name(),
                    SUPPORTED_ACT_BITS
                )));
            }
        }
        if !(self.percentile > 50.0 && self.percentile <= 100.0) {
            return Err(Error::invalid(format!(
                "percentile {} outside (50, 100]",
                self.percentile
            )));
        }
        let [a, b] = self.boundaries;
        if !(0.0 < a && a < b && b < 1.0) {
            return Err(Error::invalid(format!(
                "bin boundaries {a}, {b} must be strictly increasing inside (0, 1)"
            )));
        }
        if self.group_size == 0 {
            return Err(Error::invalid("activation group size must be positive"));
        }
        Ok(())
    }

    pub fn bin(&self, t: usize, num_steps: usize) -> PhaseBin {
        phase_bin(t, num_steps, self.boundaries)
    }

    pub fn bits_at(&self, t: usize, num_steps: usize) -> u8 {
        self.bits.get(self.bin(t, num_steps))
    }
}

/// Bin of step `t`: the boundary steps are `⌊b·T⌋` and each belongs to the
/// later bin.
pub fn phase_bin(t: usize, num_steps: usize, boundaries: [f64; 2]) -> PhaseBin {
    let edge = |b: f64| (b * num_steps as f64 + 1e-9).floor() as usize;
    if t < edge(boundaries[0]) {
        PhaseBin::Early
    } else if t < edge(boundaries[1]) {
        PhaseBin::Mid
    } else {
        PhaseBin::Late
    }
}

/// Nearest-rank percentile of `|v|`. `scratch` is reused to avoid
/// allocation on hot paths.
fn abs_percentile(v: &[f64], p: f64, scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend(v.iter().map(|x| x.abs()));
    let n = scratch.len();
    let rank = ((p / 100.0 * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let (_, kth, _) = scratch.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    kth.max(TAU_FLOOR)
}

#[inline]
fn code_of(x: f64, tau: f64, alpha: f64, q: i32) -> i32 {
    let c = (x.clamp(-tau, tau) / alpha).round() as i32;
    c.clamp(-q, q)
}

/// Quantizes one group vector; returns `(v̂, τ, α)`.
pub fn daq_quantize(v: &[f64], percentile: f64, bits: u8) -> (Vec<f64>, f64, f64) {
    assert!(!v.is_empty(), "empty activation group");
    assert!((2..=16).contains(&bits), "unsupported activation width {bits}");
    let mut scratch = Vec::with_capacity(v.len());
    let tau = abs_percentile(v, percentile, &mut scratch);
    let q = qmax_wide(bits);
    let alpha = tau / q as f64;
    let v_hat = v
        .iter()
        .map(|&x| alpha * code_of(x, tau, alpha, q) as f64)
        .collect();
    (v_hat, tau, alpha)
}

#[inline]
fn qmax_wide(bits: u8) -> i32 {
    if bits <= 8 {
        qmax(bits)
    } else {
        (1i32 << (bits - 1)) - 1
    }
}

/// Dynamic quantization of a whole activation matrix. Returns the codes and
/// the mean τ over all (row, group) pairs.
pub fn quantize_activations(
    x: &Matrix,
    bits: u8,
    percentile: f64,
    group_size: usize,
) -> (QuantActivations, f64) {
    let (rows, cols) = x.shape();
    let groups = cols.div_ceil(group_size);
    let q = qmax_wide(bits);
    let mut codes = vec![0i16; rows * cols];
    let mut scales = Vec::with_capacity(rows * groups);
    let mut scratch = Vec::with_capacity(group_size.min(cols));
    let mut tau_sum = 0.0;
    for r in 0..rows {
        let row = x.row(r);
        for g in 0..groups {
            let range = g * group_size..((g + 1) * group_size).min(cols);
            let tau = abs_percentile(&row[range.clone()], percentile, &mut scratch);
            let alpha = tau / q as f64;
            tau_sum += tau;
            scales.push(alpha);
            for c in range {
                codes[r * cols + c] = code_of(row[c], tau, alpha, q) as i16;
            }
        }
    }
    let mean_tau = tau_sum / (rows * groups).max(1) as f64;
    (
        QuantActivations {
            rows,
            cols,
            group_size,
            bits,
            codes,
            scales,
        },
        mean_tau,
    )
}

/// Quantization with fixed per-group clip thresholds (no run-time scales).
pub fn quantize_static(x: &Matrix, taus: &[f64], group_size: usize, bits: u8) -> QuantActivations {
    let (rows, cols) = x.shape();
    let groups = cols.div_ceil(group_size);
    assert_eq!(taus.len(), groups, "one static threshold per group");
    let q = qmax_wide(bits);
    let alphas: Vec<f64> = taus.iter().map(|t| t.max(TAU_FLOOR) / q as f64).collect();
    let mut codes = vec![0i16; rows * cols];
    let mut scales = Vec::with_capacity(rows * groups);
    for r in 0..rows {
        scales.extend_from_slice(&alphas);
        for c in 0..cols {
            let g = c / group_size;
            codes[r * cols + c] = code_of(x.get(r, c), taus[g].max(TAU_FLOOR), alphas[g], q) as i16;
        }
    }
    QuantActivations {
        rows,
        cols,
        group_size,
        bits,
        codes,
        scales,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn representable_grid_roundtrips() {
        let alpha = 0.5 / 127.0;
        let v: Vec<f64> = (-127..=127).step_by(3).map(|k| k as f64 * alpha).collect();
        let mut v = v;
        v.push(0.5);
        let (v_hat, tau, a) = daq_quantize(&v, 100.0, 8);
        assert_eq!(tau, 0.5);
        assert!((a - alpha).abs() < 1e-18);
        for (x, y) in v.iter().zip(&v_hat) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn outlier_is_clipped() {
        let mut v: Vec<f64> = (0..99).map(|i| (i as f64 / 99.0) - 0.5).collect();
        v.push(100.0);
        let (v_hat, tau, _) = daq_quantize(&v, 99.0, 8);
        assert!(tau <= 1.0);
        assert!(v_hat[99] <= tau + 1e-15);
    }

    #[test]
    fn zero_vector_uses_floor() {
        let (v_hat, tau, alpha) = daq_quantize(&[0.0; 16], 99.9, 8);
        assert_eq!(tau, TAU_FLOOR);
        assert!(alpha > 0.0);
        assert!(v_hat.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn error_bound_on_unclipped_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
        let (v_hat, tau, alpha) = daq_quantize(&v, 99.9, 8);
        for (x, y) in v.iter().zip(&v_hat) {
            if x.abs() <= tau {
                assert!((x - y).abs() <= alpha / 2.0 + 1e-15);
            }
        }
    }

    #[test]
    fn phase_bin_boundaries() {
        let b = [1.0 / 3.0, 2.0 / 3.0];
        assert_eq!(phase_bin(0, 100, b), PhaseBin::Early);
        assert_eq!(phase_bin(32, 100, b), PhaseBin::Early);
        assert_eq!(phase_bin(33, 100, b), PhaseBin::Mid);
        assert_eq!(phase_bin(65, 100, b), PhaseBin::Mid);
        assert_eq!(phase_bin(66, 100, b), PhaseBin::Late);
        assert_eq!(phase_bin(99, 100, b), PhaseBin::Late);
    }

    #[test]
    fn policy_validation() {
        assert!(DaqPolicy::default().validate().is_ok());
        assert!(DaqPolicy::uniform(5).validate().is_err());
        let mut p = DaqPolicy::default();
        p.percentile = 50.0;
        assert!(p.validate().is_err());
        let mut p = DaqPolicy::default();
        p.boundaries = [0.6, 0.3];
        assert!(p.validate().is_err());
    }

    #[test]
    fn matrix_quantization_matches_group_quantizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Matrix::from_fn(3, 200, |_, _| rng.sample(StandardNormal));
        let (qa, _) = quantize_activations(&x, 8, 99.9, 128);
        let deq = qa.dequantize();
        for r in 0..3 {
            for (g, range) in [(0, 0..128), (1, 128..200)] {
                let (v_hat, _, alpha) = daq_quantize(&x.row(r)[range.clone()], 99.9, 8);
                assert_eq!(qa.scales[r * 2 + g], alpha);
                for (c, v) in range.zip(v_hat) {
                    assert!((deq.get(r, c) - v).abs() < 1e-15);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn codes_fit_and_values_within_tau(
            v in proptest::collection::vec(-50.0f64..50.0, 1..300),
            p in 50.5f64..=100.0,
            bits in prop::sample::select(vec![4u8, 6, 8, 16]),
        ) {
            let (v_hat, tau, alpha) = daq_quantize(&v, p, bits);
            prop_assert!(alpha > 0.0);
            let q = qmax_wide(bits) as f64;
            for y in &v_hat {
                prop_assert!(y.abs() <= tau * (1.0 + 1e-12));
                let code = (y / alpha).round();
                prop_assert!(code.abs() <= q);
            }
            let again = daq_quantize(&v, p, bits);
            prop_assert_eq!(again.0, v_hat);
        }

        #[test]
        fn mse_nonincreasing_in_bits(seed in any::<u64>(), n in 64usize..256) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let mse = |b: u8| {
                let (v_hat, _, _) = daq_quantize(&v, 99.9, b);
                v.iter().zip(&v_hat).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64
            };
            let errs: Vec<f64> = SUPPORTED_ACT_BITS.iter().map(|&b| mse(b)).collect();
            for w in errs.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }
}
