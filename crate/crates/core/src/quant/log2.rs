use serde::{Deserialize, Serialize};

use super::{check_bits, qmax, QTensor, QuantParams};
use crate::error::{Error, Result};
use crate::tensor::{median, Tensor};

/// `clip(round(-log2 x), 0, 2^bits - 1)` for `x` in `(0, 1]`.
pub fn log2_code(x: f64, bits: u8) -> Result<i32> {
    if !(x > 0.0 && x <= 1.0) {
        return Err(Error::Log2Domain(x));
    }
    Ok((-x.log2()).round_ties_even().clamp(0.0, f64::from(qmax(bits))) as i32)
}

pub fn log2_fake_quant(x: &Tensor, bits: u8) -> Result<(QTensor, Tensor)> {
    check_bits(bits)?;
    let mut codes = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    for &v in x.data() {
        let q = log2_code(f64::from(v), bits)?;
        codes.push(q as u8);
        xhat.push((-f64::from(q)).exp2() as f32);
    }
    Ok((
        QTensor {
            shape: x.shape().to_vec(),
            codes,
            params: QuantParams::log2(bits)?,
        },
        Tensor::new(x.shape().to_vec(), xhat)?,
    ))
}

/// Log-domain code of the decay `a`: `clip(round(-log2(1 - a)), 0, 2^bits - 1)`.
///
/// `a >= 1` saturates at the largest code: `exp(delta * A)` rounds to
/// exactly one whenever `delta * A` is below the float resolution.
pub fn ltsq_code(a: f64, bits: u8) -> Result<i32> {
    if a.is_nan() || a < 0.0 {
        return Err(Error::AbarOutOfRange(a));
    }
    let top = qmax(bits);
    if a >= 1.0 {
        return Ok(top);
    }
    Ok((-(1.0 - a).log2()).round_ties_even().clamp(0.0, f64::from(top)) as i32)
}

/// `1 - 2^-code`.
pub fn ltsq_dequant(code: i32) -> f64 {
    1.0 - (-f64::from(code)).exp2()
}

pub fn ltsq_fake_quant(a: &Tensor, bits: u8) -> Result<(QTensor, Tensor)> {
    check_bits(bits)?;
    let mut codes = Vec::with_capacity(a.len());
    let mut ahat = Vec::with_capacity(a.len());
    for &v in a.data() {
        let q = ltsq_code(f64::from(v), bits)?;
        codes.push(q as u8);
        ahat.push(ltsq_dequant(q) as f32);
    }
    Ok((
        QTensor {
            shape: a.shape().to_vec(),
            codes,
            params: QuantParams::ltsq(bits)?,
        },
        Tensor::new(a.shape().to_vec(), ahat)?,
    ))
}

/// Which quantizer a discrete decay tensor is routed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Ltsq,
    Uniform,
}

/// LtSQ iff the median over every calibration element exceeds `alpha`.
pub fn skewness_route(abar_calib: &Tensor, alpha: f64) -> Result<Route> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(route_for_median(median(abar_calib)?, alpha))
}

pub fn route_for_median(median: f64, alpha: f64) -> Route {
    if median > alpha {
        Route::Ltsq
    } else {
        Route::Uniform
    }
}
