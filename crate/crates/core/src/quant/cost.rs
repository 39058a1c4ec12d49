//! Analytic cost model: latency units, BitOps and byte-exact model size.
//!
//! * `MACs(ℓ) = out·in·rows_per_forward`
//! * `c_lat(ℓ, b_w, b_a) = MACs·b_w·b_a / 64`
//! * `c_mem(ℓ, b_w, g) = ⌈params·b_w / 8⌉ + scale_bytes·out·⌈in/g⌉` for
//!   integer layers, `params·2` (FP16) or `params·4` (FP32) for passthrough
//! * `c_step(t) = Σ_ℓ c_lat(ℓ)·(1 + overhead·[ℓ runs dynamic activation quantization])`
//!
//! Passthrough layers compute with activations at their own width (16/32).

use crate::daq::DaqPolicy;
use crate::model::{layer_table, LayerInfo, TinyDiT};
use crate::{Error, Result};

use super::plan::{BitPlan, Precision};

pub const DEFAULT_SCALE_BYTES: u64 = 2;
pub const DEFAULT_DAQ_OVERHEAD: f64 = 0.01;

/// How integer layers quantize their inputs.
#[derive(Debug, Clone, Copy)]
pub enum ActBits<'a> {
    /// Dynamic per-step quantization; bits from the policy's phase bin.
    Daq(&'a DaqPolicy),
    /// A single fixed width with no run-time scale computation.
    Static(u8),
}

#[derive(Debug, Clone)]
pub struct CostModel {
    layers: Vec<LayerInfo>,
    num_steps: usize,
    pub scale_bytes: u64,
    pub daq_overhead: f64,
    /// Bytes of parameters that are never quantized (biases, class table).
    fixed_bytes: u64,
}

impl CostModel {
    pub fn new(model: &TinyDiT) -> Self {
        Self {
            layers: layer_table(),
            num_steps: model.num_steps,
            scale_bytes: DEFAULT_SCALE_BYTES,
            daq_overhead: DEFAULT_DAQ_OVERHEAD,
            fixed_bytes: 4 * model.full_precision_params() as u64,
        }
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn fixed_bytes(&self) -> u64 {
        self.fixed_bytes
    }

    pub fn macs(&self, layer: usize) -> u64 {
        self.layers[layer].macs()
    }

    pub fn c_lat(&self, layer: usize, w_bits: u32, a_bits: u32) -> f64 {
        (self.macs(layer) * w_bits as u64 * a_bits as u64) as f64 / 64.0
    }

    pub fn c_mem(&self, layer: usize, precision: Precision, group_size: usize) -> u64 {
        let info = &self.layers[layer];
        let params = info.params() as u64;
        match precision {
            Precision::Fp16 => params * 2,
            Precision::Fp32 => params * 4,
            p => {
                let groups = info.in_features.div_ceil(group_size.max(1)) as u64;
                (params * p.bits() as u64).div_ceil(8)
                    + self.scale_bytes * info.out_features as u64 * groups
            }
        }
    }

    /// Activation width a layer computes with at step `t`.
    pub fn act_bits(&self, precision: Precision, act: ActBits<'_>, t: usize) -> u32 {
        match precision {
            Precision::Fp16 => 16,
            Precision::Fp32 => 32,
            _ => match act {
                ActBits::Daq(policy) => policy.bits_at(t, self.num_steps) as u32,
                ActBits::Static(b) => b as u32,
            },
        }
    }

    /// Latency units of one layer at step `t`, DAQ overhead included.
    pub fn layer_latency(&self, layer: usize, precision: Precision, act: ActBits<'_>, t: usize) -> f64 {
        let base = self.c_lat(layer, precision.bits(), self.act_bits(precision, act, t));
        if precision.is_int() && matches!(act, ActBits::Daq(_)) {
            base * (1.0 + self.daq_overhead)
        } else {
            base
        }
    }

    /// Latency units of one denoiser forward at step `t`.
    pub fn step_cost(&self, plan: &BitPlan, act: ActBits<'_>, t: usize) -> f64 {
        plan.layers
            .iter()
            .enumerate()
            .map(|(i, a)| self.layer_latency(i, a.precision, act, t))
            .sum()
    }

    /// Latency units of a full sampling run over `schedule`.
    pub fn latency(&self, plan: &BitPlan, act: ActBits<'_>, schedule: &[usize]) -> f64 {
        schedule.iter().map(|&t| self.step_cost(plan, act, t)).sum()
    }

    /// `Σ_{t∈schedule} Σ_ℓ MACs(ℓ)·b_w(ℓ)·b_a(ℓ, t)`.
    pub fn bitops(&self, plan: &BitPlan, act: ActBits<'_>, schedule: &[usize]) -> u64 {
        schedule
            .iter()
            .map(|&t| {
                plan.layers
                    .iter()
                    .enumerate()
                    .map(|(i, a)| {
                        self.macs(i) * a.precision.bits() as u64
                            * self.act_bits(a.precision, act, t) as u64
                    })
                    .sum::<u64>()
            })
            .sum()
    }

    /// Quantized layer bytes plus full-precision bytes for everything else.
    pub fn model_size_bytes(&self, plan: &BitPlan) -> Result<u64> {
        if plan.layers.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "plan covers {} layers, model has {}",
                plan.layers.len(),
                self.layers.len()
            )));
        }
        plan.validate()?;
        Ok(self.quantized_bytes(plan) + self.fixed_bytes)
    }

    /// Σ_ℓ c_mem over the plan (no fixed overhead).
    pub fn quantized_bytes(&self, plan: &BitPlan) -> u64 {
        plan.layers
            .iter()
            .enumerate()
            .map(|(i, a)| self.c_mem(i, a.precision, a.group_size))
            .sum()
    }

    /// Size with every layer at FP32.
    pub fn fp32_size_bytes(&self) -> u64 {
        self.layers.iter().map(|l| 4 * l.params() as u64).sum::<u64>() + self.fixed_bytes
    }
}
