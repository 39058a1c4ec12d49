//! Training-free joint planning of weight precision, dynamic activation
//! quantization and denoising-step pruning for a small diffusion transformer.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`model`]: the deterministic toy teacher (TinyDiT), noise schedule,
//!   DDIM sampler, capture hooks and checkpoint I/O.
//! * [`quant`]: grouped symmetric quantization, the reference integer GEMM,
//!   GPTQ-style packing and the analytic cost model.
//! * [`calibration`]: per-layer statistics, PCA rank, sensitivity scores,
//!   tiering and the seed bit plan.
//! * [`daq`]: per-sample, per-timestep, per-group activation quantization.
//! * [`pruning`]: per-step drift, protected-tail schedule selection,
//!   Lorenz coverage and Gini.
//! * [`search`]: bit plans, evolutionary refinement with successive halving,
//!   the drift-plus-penalty score and the budgeted planner.
//! * [`deploy`]: student construction, pruned sampling and reports.
//! * [`pipeline`]: run configuration and the stage runners used by the CLI.

mod blob;
pub mod calibration;
pub mod daq;
pub mod deploy;
mod eval;
mod error;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod quant;
pub mod search;
pub mod student;
pub mod tensor;

pub use error::{Error, Result};
pub use eval::{EvalSet, Fidelity};
