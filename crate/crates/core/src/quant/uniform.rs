use super::{check_bits, qmax, QTensor, QuantKind, QuantParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `clip(round(x / s) + z, 0, 2^bits - 1)`.
pub fn uniform_code(x: f64, scale: f64, zero_point: i32, bits: u8) -> i32 {
    let q = (x / scale).round_ties_even() + f64::from(zero_point);
    q.clamp(0.0, f64::from(qmax(bits))) as i32
}

pub fn uniform_dequant(code: i32, scale: f64, zero_point: i32) -> f64 {
    scale * f64::from(code - zero_point)
}

/// Tensor-wise affine fake quantization.
pub fn uniform_fake_quant(x: &Tensor, p: &QuantParams) -> Result<(QTensor, Tensor)> {
    if p.kind != QuantKind::Uniform {
        return Err(Error::InvalidParams(format!(
            "uniform_fake_quant called with a {:?} quantizer",
            p.kind
        )));
    }
    p.validate()?;
    let (s, z) = (p.scales[0], p.zero_points[0]);
    let mut codes = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    for &v in x.data() {
        let q = uniform_code(f64::from(v), s, z, p.bits);
        codes.push(q as u8);
        xhat.push(uniform_dequant(q, s, z) as f32);
    }
    let q = QTensor {
        shape: x.shape().to_vec(),
        codes,
        params: p.clone(),
    };
    Ok((q, Tensor::new(x.shape().to_vec(), xhat)?))
}

/// Scale and zero point covering `[lb, ub]`.
///
/// The range is first widened to contain zero, so that the zero point
/// `clip(round(-lb / s), 0, 2^bits - 1)` never has to be clipped and the
/// whole widened range stays representable.
pub fn init_scale_zero(lb: f64, ub: f64, bits: u8) -> Result<(f64, i32)> {
    check_bits(bits)?;
    if !(lb.is_finite() && ub.is_finite()) || ub <= lb {
        return Err(Error::DegenerateRange { lb, ub });
    }
    let (lb, ub) = (lb.min(0.0), ub.max(0.0));
    let top = qmax(bits);
    let s = (ub - lb) / f64::from(top);
    let z = (-lb / s).round_ties_even().clamp(0.0, f64::from(top)) as i32;
    Ok((s, z))
}
