use serde::{Deserialize, Serialize};

use super::{ModelQuant, Slot, SsmClassifier};
use crate::calib::Initializer;
use crate::error::{Error, Result};
use crate::ptq::{single_slot_quant, ModelCalib};
use crate::tensor::Tensor;

/// Activations a sensitivity sweep may target.
pub const SENSITIVITY_TARGETS: [Slot; 6] = [Slot::H, Slot::Abar, Slot::B, Slot::Delta, Slot::C, Slot::X];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub target: Slot,
    /// `None` leaves the target in floating point.
    pub bits: Option<u8>,
    pub ltsq: bool,
    pub fp_accuracy: f64,
    pub q_accuracy: f64,
    /// `fp_accuracy - q_accuracy`.
    pub drop: f64,
}

/// Accuracy drop from quantizing only `target` in every block (uniform,
/// percentile-initialized, or LtSQ for the decay when `ltsq` is set).
pub fn sensitivity_sweep(
    model: &SsmClassifier,
    calib: &ModelCalib,
    x: &Tensor,
    labels: &[usize],
    target: &str,
    bits: Option<u8>,
    ltsq: bool,
) -> Result<Sensitivity> {
    let slot = Slot::from_target(target)?;
    if !SENSITIVITY_TARGETS.contains(&slot) {
        return Err(Error::UnknownTarget(target.to_string()));
    }
    let fp_accuracy = model.accuracy(x, labels, None)?;
    let q_accuracy = match bits {
        None => model.accuracy(x, labels, Some(&ModelQuant::disabled(model.blocks.len())))?,
        Some(b) => {
            let q = single_slot_quant(model, calib, slot, b, Initializer::Percentile, ltsq)?;
            model.accuracy(x, labels, Some(&q))?
        }
    };
    Ok(Sensitivity {
        target: slot,
        bits,
        ltsq,
        fp_accuracy,
        q_accuracy,
        drop: fp_accuracy - q_accuracy,
    })
}
