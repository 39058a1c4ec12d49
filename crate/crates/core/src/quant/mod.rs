//! Grouped symmetric quantization, the reference integer GEMM, GPTQ-style
//! packing, the analytic cost model and the packed-plan file.

mod cost;
mod gemm;
mod gptq;
mod grouped;
mod pack;
mod plan;

pub use cost::{ActBits, CostModel, DEFAULT_DAQ_OVERHEAD, DEFAULT_SCALE_BYTES};
pub use gemm::{int_gemm, int_gemm_scalar, QuantActivations, ACC_LIMIT};
pub use gptq::{gptq_pack, gptq_pack_with, output_mse, HessianFactor};
pub use grouped::{dequantize, qmax, quantize_grouped, quantize_value, GroupQuantWeights};
pub use pack::{load_packed, save_packed, PackedLayer, PACK_MAGIC, PACK_VERSION};
pub use grouped::SCALE_FLOOR;
pub use plan::{BitPlan, LayerAssignment, Precision};
