//! Selective state space model: parameters, quantizer assignment, the scan
//! and the surrounding Mamba block.

mod assignment;
pub(crate) mod engine;
mod model;
mod ops;
mod params;
mod sensitivity;

pub use assignment::{QuantizerAssignment, Slot};
pub use engine::{BlockGrads, Ste};
pub use model::{ModelGrads, ModelQuant, ModelSpec, SsmClassifier};
pub use ops::{
    discretize, mamba_block_forward, mamba_block_forward_with, scan_recurrence, ssm_scan_fp,
    ssm_scan_quant, SsmTrace,
};
pub use params::{BlockDims, MambaBlockWeights, SsmParams};
pub use sensitivity::{sensitivity_sweep, Sensitivity, SENSITIVITY_TARGETS};
