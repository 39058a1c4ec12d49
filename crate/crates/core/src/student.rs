//! Quantized student: the teacher's architecture with every linear layer
//! replaced according to a [`BitPlan`].
//!
//! Integer layers hold packed codes and scales. How their inputs are
//! treated depends on the [`ActivationMode`]:
//!
//! * `Float`: weight-only quantization, dequantized weights in a float GEMM.
//! * `Dynamic`: per-row, per-group run-time scales from a [`DaqPolicy`],
//!   integer GEMM.
//! * `Static`: one fixed clip threshold per layer, integer GEMM.
//!
//! Passthrough layers (FP16/FP32) run the teacher's float path unchanged, so
//! an all-passthrough student is bit-identical to the teacher.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::daq::{phase_bin, quantize_activations, quantize_static, BinBits, DaqPolicy};
use crate::model::LayerCapture;
use crate::model::{layer_table, ForwardObserver, Linear, LinearExec, StepContext, TinyDiT};
use crate::quant::{
    dequantize, gptq_pack_with, int_gemm, quantize_grouped, BitPlan, GroupQuantWeights,
    HessianFactor, PackedLayer, Precision,
};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Packed codes plus their dequantized float image.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeights {
    pub q: GroupQuantWeights,
    pub deq: Matrix,
}

impl PackedWeights {
    pub fn new(q: GroupQuantWeights) -> Self {
        let deq = dequantize(&q);
        Self { q, deq }
    }
}

type FactorSlot = OnceLock<std::result::Result<Arc<HessianFactor>, String>>;

/// Memoized weight packing shared by every student built for one teacher.
///
/// With calibration inputs the packer is GPTQ; without them it falls back to
/// round-to-nearest. Results are keyed by `(layer, bits, group)`.
pub struct PackCache {
    inputs: Vec<Option<Matrix>>,
    factors: Vec<FactorSlot>,
    packed: Mutex<HashMap<(usize, u8, usize), Arc<PackedWeights>>>,
}

impl std::fmt::Debug for PackCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PackCache")
            .field("layers_with_inputs", &self.inputs.iter().filter(|x| x.is_some()).count())
            .finish()
    }
}

impl PackCache {
    /// Round-to-nearest packing for every layer.
    pub fn rtn() -> Self {
        Self::from_inputs(vec![None; layer_table().len()])
    }

    /// GPTQ packing from per-layer calibration inputs (model layer order).
    pub fn from_inputs(inputs: Vec<Option<Matrix>>) -> Self {
        let factors = (0..inputs.len()).map(|_| OnceLock::new()).collect();
        Self {
            inputs,
            factors,
            packed: Mutex::new(HashMap::new()),
        }
    }

    /// GPTQ packing from capture reservoirs.
    pub fn from_captures(captures: &[LayerCapture]) -> Self {
        let mut inputs = vec![None; layer_table().len()];
        for c in captures {
            inputs[c.index] = Some(c.reservoir_matrix());
        }
        Self::from_inputs(inputs)
    }

    pub fn is_gptq(&self, index: usize) -> bool {
        self.inputs.get(index).is_some_and(Option::is_some)
    }

    fn factor(&self, index: usize) -> Result<Option<Arc<HessianFactor>>> {
        let Some(x) = &self.inputs[index] else {
            return Ok(None);
        };
        let slot = self.factors[index].get_or_init(|| {
            HessianFactor::from_inputs(x)
                .map(Arc::new)
                .map_err(|e| e.to_string())
        });
        match slot {
            Ok(f) => Ok(Some(f.clone())),
            Err(msg) => Err(Error::numeric(layer_table()[index].id.clone(), msg.clone())),
        }
    }

    pub fn get(
        &self,
        model: &TinyDiT,
        index: usize,
        bits: u8,
        group_size: usize,
    ) -> Result<Arc<PackedWeights>> {
        let key = (index, bits, group_size);
        if let Some(hit) = self.packed.lock().expect("pack cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let w = &model.layer(index).weight;
        let id = layer_table()[index].id.clone();
        let q = match self.factor(index)? {
            Some(f) => gptq_pack_with(w, &f, bits, group_size)?,
            None => quantize_grouped(w, bits, group_size)?,
        }
        .with_layer_id(id);
        let packed = Arc::new(PackedWeights::new(q));
        let mut map = self.packed.lock().expect("pack cache poisoned");
        Ok(map.entry(key).or_insert(packed).clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ActivationMode {
    Float,
    Dynamic(DaqPolicy),
    /// One clip threshold per layer (model layer order); bits per phase bin.
    Static {
        taus: Vec<f64>,
        bits: BinBits,
        boundaries: [f64; 2],
    },
}

#[derive(Debug, Clone)]
enum Kernel {
    Passthrough,
    Quantized(Arc<PackedWeights>),
}

#[derive(Debug, Clone)]
pub struct Student {
    plan: BitPlan,
    kernels: Vec<Kernel>,
    mode: ActivationMode,
}

fn check_plan(plan: &BitPlan) -> Result<()> {
    let n = layer_table().len();
    if plan.layers.len() != n {
        plan.validate()?;
        return Err(Error::invalid(format!(
            "plan has {} layers, model has {n}",
            plan.layers.len()
        )));
    }
    plan.validate()
}

fn check_mode(mode: &ActivationMode) -> Result<()> {
    match mode {
        ActivationMode::Float => Ok(()),
        ActivationMode::Dynamic(p) => p.validate(),
        ActivationMode::Static {
            taus,
            bits,
            boundaries,
        } => {
            if taus.len() != layer_table().len() {
                return Err(Error::invalid("static mode needs one threshold per layer"));
            }
            DaqPolicy {
                bits: *bits,
                boundaries: *boundaries,
                ..DaqPolicy::default()
            }
            .validate()
        }
    }
}

impl Student {
    pub fn build(
        model: &TinyDiT,
        plan: &BitPlan,
        cache: &PackCache,
        mode: ActivationMode,
    ) -> Result<Self> {
        check_plan(plan)?;
        check_mode(&mode)?;
        let kernels = plan
            .layers
            .iter()
            .enumerate()
            .map(|(i, a)| match a.precision.int_bits() {
                Some(bits) => Ok(Kernel::Quantized(cache.get(model, i, bits, a.group_size)?)),
                None => Ok(Kernel::Passthrough),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            plan: plan.clone(),
            kernels,
            mode,
        })
    }

    /// Rebuilds a student from a packed-plan file's layers.
    pub fn from_packed(layers: Vec<PackedLayer>, mode: ActivationMode) -> Result<Self> {
        check_mode(&mode)?;
        let table = layer_table();
        if layers.len() != table.len() {
            return Err(Error::invalid(format!(
                "packed file has {} layers, model has {}",
                layers.len(),
                table.len()
            )));
        }
        let mut plan_layers = Vec::with_capacity(layers.len());
        let mut kernels = Vec::with_capacity(layers.len());
        for (info, layer) in table.iter().zip(layers) {
            let (id, precision, group_size, kernel) = match layer {
                PackedLayer::Quantized(q) => {
                    let p = match q.bits {
                        3 => Precision::W3,
                        4 => Precision::W4,
                        6 => Precision::W6,
                        8 => Precision::W8,
                        b => return Err(Error::Format(format!("unsupported packed width {b}"))),
                    };
                    (q.layer_id.clone(), p, q.group_size, Kernel::Quantized(Arc::new(PackedWeights::new(q))))
                }
                PackedLayer::Passthrough {
                    layer_id,
                    precision,
                    group_size,
                    ..
                } => (layer_id, precision, group_size, Kernel::Passthrough),
            };
            if id != info.id {
                return Err(Error::invalid(format!(
                    "packed layer `{id}` where `{}` was expected",
                    info.id
                )));
            }
            plan_layers.push(crate::quant::LayerAssignment {
                layer_id: id,
                precision,
                group_size,
                frozen: false,
            });
            kernels.push(kernel);
        }
        Ok(Self {
            plan: BitPlan {
                layers: plan_layers,
            },
            kernels,
            mode,
        })
    }

    /// Switches integer layers to dynamic activation quantization.
    pub fn attach_daq(mut self, policy: DaqPolicy) -> Result<Self> {
        policy.validate()?;
        self.mode = ActivationMode::Dynamic(policy);
        Ok(self)
    }

    pub fn with_mode(mut self, mode: ActivationMode) -> Result<Self> {
        check_mode(&mode)?;
        self.mode = mode;
        Ok(self)
    }

    pub fn plan(&self) -> &BitPlan {
        &self.plan
    }

    pub fn mode(&self) -> &ActivationMode {
        &self.mode
    }

    pub fn packed_weights(&self, index: usize) -> Option<&PackedWeights> {
        match &self.kernels[index] {
            Kernel::Quantized(p) => Some(p),
            Kernel::Passthrough => None,
        }
    }

    pub fn packed_layers(&self) -> Vec<PackedLayer> {
        let table = layer_table();
        self.kernels
            .iter()
            .zip(&self.plan.layers)
            .zip(&table)
            .map(|((k, a), info)| match k {
                Kernel::Quantized(p) => PackedLayer::Quantized(p.q.clone()),
                Kernel::Passthrough => PackedLayer::Passthrough {
                    layer_id: a.layer_id.clone(),
                    precision: a.precision,
                    group_size: a.group_size,
                    shape: (info.out_features, info.in_features),
                },
            })
            .collect()
    }

    /// SHA-256 over the plan, activation mode and every packed code and
    /// scale, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.plan).expect("plan serializes"));
        h.update(serde_json::to_vec(&self.mode).expect("mode serializes"));
        for k in &self.kernels {
            match k {
                Kernel::Passthrough => h.update([0u8]),
                Kernel::Quantized(p) => {
                    h.update([1u8, p.q.bits]);
                    h.update((p.q.group_size as u64).to_le_bytes());
                    h.update(p.q.codes.iter().map(|&c| c as u8).collect::<Vec<_>>());
                    for s in &p.q.scales {
                        h.update(s.to_bits().to_le_bytes());
                    }
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl LinearExec for Student {
    fn linear(
        &self,
        index: usize,
        layer: &Linear,
        input: &Matrix,
        step: StepContext,
        observer: &mut dyn ForwardObserver,
    ) -> Result<Matrix> {
        let packed = match &self.kernels[index] {
            Kernel::Passthrough => return Ok(layer.forward(input)),
            Kernel::Quantized(p) => p,
        };
        let mut out = match &self.mode {
            ActivationMode::Float => input.matmul_t(&packed.deq),
            ActivationMode::Dynamic(policy) => {
                let bits = policy.bits_at(step.t, step.num_steps);
                let (qa, mean_tau) =
                    quantize_activations(input, bits, policy.percentile, policy.group_size);
                observer.on_activation_scale(index, mean_tau);
                int_gemm(&qa, &packed.q)?
            }
            ActivationMode::Static {
                taus,
                bits,
                boundaries,
            } => {
                let b = bits.get(phase_bin(step.t, step.num_steps, *boundaries));
                let qa = quantize_static(input, &taus[index..=index], input.cols(), b);
                int_gemm(&qa, &packed.q)?
            }
        };
        out.add_row_vector(&layer.bias);
        Ok(out)
    }
}

/// Per-layer static clip threshold: the largest magnitude in the captured
/// input envelopes.
pub fn static_taus(captures: &[LayerCapture]) -> Vec<f64> {
    let mut taus = vec![1.0; layer_table().len()];
    for c in captures {
        taus[c.index] = c
            .envelopes_or_zero()
            .iter()
            .map(|&(lo, hi)| lo.abs().max(hi.abs()))
            .fold(0.0, f64::max);
    }
    taus
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Latent, NoObserver, LATENT_LEN};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(seed: u64) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Latent::from_vec((0..LATENT_LEN).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn passthrough_student_is_teacher() {
        let model = TinyDiT::new(3, 100);
        let plan = BitPlan::uniform(Precision::Fp16, 64);
        let s = Student::build(&model, &plan, &PackCache::rtn(), ActivationMode::Dynamic(DaqPolicy::default()))
            .unwrap();
        let x = noise(1);
        let a = model.forward(&x, 30, 4).unwrap();
        let b = model.forward_with(&s, &x, 30, 4, &mut NoObserver).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn w8a8_matches_dequantized_float_path() {
        let model = TinyDiT::new(4, 100);
        let plan = BitPlan::uniform(Precision::W8, 64);
        let cache = PackCache::rtn();
        let int = Student::build(&model, &plan, &cache, ActivationMode::Dynamic(DaqPolicy::uniform(8))).unwrap();
        let float = Student::build(&model, &plan, &cache, ActivationMode::Float).unwrap();
        let x = noise(2);
        let a = model.forward_with(&int, &x, 10, 1, &mut NoObserver).unwrap();
        let b = model.forward_with(&float, &x, 10, 1, &mut NoObserver).unwrap();
        let rel = (a.dist_sq(&b) / b.norm_sq()).sqrt();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn plan_mismatch_lists_layers() {
        let model = TinyDiT::new(0, 100);
        let mut plan = BitPlan::uniform(Precision::W8, 64);
        plan.layers.pop();
        let err = Student::build(&model, &plan, &PackCache::rtn(), ActivationMode::Float).unwrap_err();
        assert!(err.to_string().contains("final_proj"), "{err}");
    }

    #[test]
    fn packed_roundtrip_keeps_fingerprint() {
        let model = TinyDiT::new(5, 100);
        let mut plan = BitPlan::uniform(Precision::W4, 288);
        plan.layers[0].precision = Precision::Fp16;
        let s = Student::build(&model, &plan, &PackCache::rtn(), ActivationMode::Float).unwrap();
        let back = Student::from_packed(s.packed_layers(), ActivationMode::Float).unwrap();
        assert_eq!(s.fingerprint(), back.fingerprint());
    }

    #[test]
    fn unsupported_daq_bits_rejected() {
        let model = TinyDiT::new(0, 100);
        let plan = BitPlan::uniform(Precision::W8, 64);
        let s = Student::build(&model, &plan, &PackCache::rtn(), ActivationMode::Float).unwrap();
        assert!(s.attach_daq(DaqPolicy::uniform(5)).is_err());
    }
}
