pub mod calib;
pub mod error;
pub mod harness;
pub mod ptq;
pub mod quant;
pub mod recon;
pub mod rng;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
