//! Quantize/dequantize kernels.
//!
//! All kernels round half to even. Codes are unsigned integers in
//! `[0, 2^bits - 1]`; the scalar routines work in `f64` and the tensor
//! routines wrap them.

mod log2;
mod shift;
mod tgq;
mod uniform;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use log2::{
    log2_code, log2_fake_quant, ltsq_code, ltsq_dequant, ltsq_fake_quant, route_for_median,
    skewness_route, Route,
};
pub use shift::{shift_decay, shift_decay_scalar};
pub use tgq::{num_groups, tgq_fake_quant, tgq_group_index, time_axis};
pub use uniform::{init_scale_zero, uniform_code, uniform_dequant, uniform_fake_quant};

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// Largest code of a `bits`-wide quantizer.
pub fn qmax(bits: u8) -> i32 {
    (1i32 << bits) - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantKind {
    Uniform,
    Log2,
    Ltsq,
    Tgq,
}

/// State of a single quantizer.
///
/// Uniform quantizers carry one `(scale, zero_point)` pair, temporal group
/// quantizers one pair per group, and the log-domain kinds none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub kind: QuantKind,
    pub bits: u8,
    pub scales: Vec<f64>,
    pub zero_points: Vec<i32>,
    pub group_length: Option<usize>,
    pub seq_length: Option<usize>,
}

impl QuantParams {
    pub fn uniform(bits: u8, scale: f64, zero_point: i32) -> Result<Self> {
        let p = Self {
            kind: QuantKind::Uniform,
            bits,
            scales: vec![scale],
            zero_points: vec![zero_point],
            group_length: None,
            seq_length: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn ltsq(bits: u8) -> Result<Self> {
        Self::parameter_free(QuantKind::Ltsq, bits)
    }

    pub fn log2(bits: u8) -> Result<Self> {
        Self::parameter_free(QuantKind::Log2, bits)
    }

    fn parameter_free(kind: QuantKind, bits: u8) -> Result<Self> {
        let p = Self {
            kind,
            bits,
            scales: vec![],
            zero_points: vec![],
            group_length: None,
            seq_length: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn tgq(
        bits: u8,
        scales: Vec<f64>,
        zero_points: Vec<i32>,
        group_length: usize,
        seq_length: usize,
    ) -> Result<Self> {
        let p = Self {
            kind: QuantKind::Tgq,
            bits,
            scales,
            zero_points,
            group_length: Some(group_length),
            seq_length: Some(seq_length),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return bad(format!("bits {} outside [{MIN_BITS}, {MAX_BITS}]", self.bits));
        }
        if self.scales.len() != self.zero_points.len() {
            return bad(format!(
                "{} scales but {} zero points",
                self.scales.len(),
                self.zero_points.len()
            ));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return bad(format!("scale {s} is not positive"));
        }
        let top = qmax(self.bits);
        if let Some(z) = self.zero_points.iter().find(|z| !(0..=top).contains(*z)) {
            return bad(format!("zero point {z} outside [0, {top}]"));
        }
        match self.kind {
            QuantKind::Uniform if self.scales.len() != 1 => {
                bad(format!("uniform quantizer needs 1 scale, has {}", self.scales.len()))
            }
            QuantKind::Ltsq | QuantKind::Log2 if !self.scales.is_empty() => {
                bad(format!("{:?} quantizer is parameter-free", self.kind))
            }
            QuantKind::Tgq => {
                let (Some(lambda), Some(len)) = (self.group_length, self.seq_length) else {
                    return bad("TGQ needs group_length and seq_length".into());
                };
                if lambda == 0 || len == 0 {
                    return bad("TGQ group_length and seq_length must be positive".into());
                }
                let g = num_groups(len, lambda);
                if self.scales.len() != g {
                    return bad(format!(
                        "TGQ with L={len}, λ={lambda} needs {g} scales, has {}",
                        self.scales.len()
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Whether the quantizer has learnable scales.
    pub fn is_affine(&self) -> bool {
        matches!(self.kind, QuantKind::Uniform | QuantKind::Tgq)
    }

    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }

    /// `(scale, zero_point)` used for time step `t`; group 0 for uniform.
    pub fn affine_for_step(&self, t: usize) -> (f64, i32) {
        let g = match (self.kind, self.group_length, self.seq_length) {
            (QuantKind::Tgq, Some(lambda), Some(len)) => group_of(t, lambda, len),
            _ => 0,
        };
        (self.scales[g], self.zero_points[g])
    }
}

pub(crate) fn group_of(t: usize, lambda: usize, len: usize) -> usize {
    (t / lambda).min(num_groups(len, lambda) - 1)
}

/// Integer codes produced by a quantizer, with the parameters that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<u8>,
    pub params: QuantParams,
}

impl QTensor {
    /// Codes minus the zero point of the group each element belongs to.
    pub fn centered(&self) -> Vec<i64> {
        match self.params.kind {
            QuantKind::Uniform => {
                let z = i64::from(self.params.zero_points[0]);
                self.codes.iter().map(|&q| i64::from(q) - z).collect()
            }
            QuantKind::Tgq => {
                let axis = time_axis(&self.shape).unwrap_or(0);
                let steps = self.shape[axis];
                let inner: usize = self.shape[axis + 1..].iter().product();
                self.codes
                    .iter()
                    .enumerate()
                    .map(|(i, &q)| {
                        let t = (i / inner) % steps;
                        let (_, z) = self.params.affine_for_step(t);
                        i64::from(q) - i64::from(z)
                    })
                    .collect()
            }
            QuantKind::Log2 | QuantKind::Ltsq => self.codes.iter().map(|&q| i64::from(q)).collect(),
        }
    }
}

pub(crate) fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!(
            "bits {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validation() {
        assert!(QuantParams::uniform(4, 0.1, 0).is_ok());
        assert!(QuantParams::uniform(4, 0.0, 0).is_err());
        assert!(QuantParams::uniform(4, 0.1, 16).is_err());
        assert!(QuantParams::uniform(1, 0.1, 0).is_err());
        assert!(QuantParams::uniform(9, 0.1, 0).is_err());
        assert!(QuantParams::ltsq(4).unwrap().scales.is_empty());
        // L=197, λ=10 -> 19 groups
        assert!(QuantParams::tgq(4, vec![1.0; 19], vec![0; 19], 10, 197).is_ok());
        assert!(QuantParams::tgq(4, vec![1.0; 20], vec![0; 20], 10, 197).is_err());
    }

    #[test]
    fn params_json_schema() {
        let p = QuantParams::tgq(4, vec![0.5, 0.25], vec![8, 7], 2, 4).unwrap();
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "kind": "tgq", "bits": 4, "scales": [0.5, 0.25], "zero_points": [8, 7],
                "group_length": 2, "seq_length": 4
            })
        );
        let back: QuantParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }
}
