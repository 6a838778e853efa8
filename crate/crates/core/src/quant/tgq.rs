use super::{group_of, uniform_code, uniform_dequant, QTensor, QuantKind, QuantParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `max(1, floor(L / λ))`.
pub fn num_groups(seq_length: usize, group_length: usize) -> usize {
    (seq_length / group_length.max(1)).max(1)
}

/// Zero-based group of time step `t`; trailing steps that do not fill a
/// whole group join the last one.
pub fn tgq_group_index(t: usize, group_length: usize, seq_length: usize) -> Result<usize> {
    if group_length == 0 {
        return Err(Error::InvalidArgument("group length must be at least 1".into()));
    }
    if t >= seq_length {
        return Err(Error::TimeStepOutOfRange { t, len: seq_length });
    }
    Ok(group_of(t, group_length, seq_length))
}

/// Time axis of a hidden-state tensor: 0 for `(L, D, N)`, 1 for `(B, L, D, N)`.
pub fn time_axis(shape: &[usize]) -> Result<usize> {
    match shape.len() {
        3 => Ok(0),
        4 => Ok(1),
        n => Err(Error::ShapeMismatch(format!(
            "hidden states must be (L, D, N) or (B, L, D, N), got rank {n}"
        ))),
    }
}

/// Temporal group quantization: each time slice uses the affine
/// parameters of its group.
pub fn tgq_fake_quant(h: &Tensor, p: &QuantParams) -> Result<(QTensor, Tensor)> {
    if p.kind != QuantKind::Tgq {
        return Err(Error::InvalidParams(format!(
            "tgq_fake_quant called with a {:?} quantizer",
            p.kind
        )));
    }
    p.validate()?;
    let axis = time_axis(h.shape())?;
    let steps = h.shape()[axis];
    if Some(steps) != p.seq_length {
        return Err(Error::ShapeMismatch(format!(
            "tensor has {steps} time steps, quantizer expects {:?}",
            p.seq_length
        )));
    }
    let inner: usize = h.shape()[axis + 1..].iter().product();
    let mut codes = Vec::with_capacity(h.len());
    let mut hhat = Vec::with_capacity(h.len());
    for (i, &v) in h.data().iter().enumerate() {
        let t = (i / inner) % steps;
        let (s, z) = p.affine_for_step(t);
        let q = uniform_code(f64::from(v), s, z, p.bits);
        codes.push(q as u8);
        hhat.push(uniform_dequant(q, s, z) as f32);
    }
    Ok((
        QTensor {
            shape: h.shape().to_vec(),
            codes,
            params: p.clone(),
        },
        Tensor::new(h.shape().to_vec(), hhat)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{init_scale_zero, uniform_fake_quant};
    use crate::tensor::{mse_of, percentile_of};

    #[test]
    fn group_index_examples() {
        assert_eq!(tgq_group_index(25, 10, 197).unwrap(), 2);
        // 19 groups, remainder steps 190..196 merged into group 18
        assert_eq!(num_groups(197, 10), 19);
        assert_eq!(tgq_group_index(196, 10, 197).unwrap(), 18);
        assert_eq!(tgq_group_index(3, 50, 20).unwrap(), 0);
        assert!(matches!(
            tgq_group_index(20, 5, 20),
            Err(Error::TimeStepOutOfRange { .. })
        ));
        assert!(tgq_group_index(0, 0, 20).is_err());
    }

    #[test]
    fn scale_count_mismatch_rejected() {
        let mut p = QuantParams::tgq(4, vec![1.0, 1.0], vec![8, 8], 2, 4).unwrap();
        p.scales.push(1.0);
        p.zero_points.push(8);
        let h = Tensor::zeros(vec![4, 1, 1]);
        assert!(tgq_fake_quant(&h, &p).is_err());
    }

    #[test]
    fn identical_groups_match_uniform() {
        let data: Vec<f32> = (0..4 * 3 * 2).map(|i| (i as f32 * 0.37).sin()).collect();
        let h = Tensor::new(vec![4, 3, 2], data).unwrap();
        let tg = QuantParams::tgq(4, vec![0.1, 0.1], vec![8, 8], 2, 4).unwrap();
        let un = QuantParams::uniform(4, 0.1, 8).unwrap();
        let (qa, a) = tgq_fake_quant(&h, &tg).unwrap();
        let (qb, b) = uniform_fake_quant(&h, &un).unwrap();
        assert_eq!(qa.codes, qb.codes);
        assert_eq!(a, b);
    }

    #[test]
    fn batched_layout_uses_axis_one() {
        let h = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 8.0, 1.0, 8.0]).unwrap();
        let p = QuantParams::tgq(4, vec![0.125, 1.0], vec![0, 0], 1, 2).unwrap();
        let (q, _) = tgq_fake_quant(&h, &p).unwrap();
        assert_eq!(q.codes, vec![8, 8, 8, 8]);
        assert_eq!(q.centered(), vec![8, 8, 8, 8]);
    }

    /// Slices of magnitude ~1, ~1, ~8, ~8: per-group scales help the small
    /// slices compared with one tensor-wise scale.
    #[test]
    fn per_group_scales_reduce_small_slice_error() {
        let (l, inner) = (4usize, 64usize);
        let mut data = Vec::with_capacity(l * inner);
        for t in 0..l {
            let mag = if t < 2 { 1.0 } else { 8.0 };
            for i in 0..inner {
                data.push(mag * ((i as f32 * 0.731 + t as f32).sin()));
            }
        }
        let h = Tensor::new(vec![l, inner, 1], data.clone()).unwrap();
        let pct = |v: &[f32]| {
            (percentile_of(v, 1.0).unwrap(), percentile_of(v, 99.0).unwrap())
        };
        let (lo, hi) = pct(&data);
        let (s, z) = init_scale_zero(lo, hi, 4).unwrap();
        let tensor_wise = QuantParams::uniform(4, s, z).unwrap();
        let (g0lo, g0hi) = pct(&data[..2 * inner]);
        let (g1lo, g1hi) = pct(&data[2 * inner..]);
        let (s0, z0) = init_scale_zero(g0lo, g0hi, 4).unwrap();
        let (s1, z1) = init_scale_zero(g1lo, g1hi, 4).unwrap();
        let grouped = QuantParams::tgq(4, vec![s0, s1], vec![z0, z1], 2, 4).unwrap();

        let (_, a) = uniform_fake_quant(&h, &tensor_wise).unwrap();
        let (_, b) = tgq_fake_quant(&h, &grouped).unwrap();
        for t in 0..2 {
            let r = t * inner..(t + 1) * inner;
            let e_tensor = mse_of(&a.data()[r.clone()], &data[r.clone()]);
            let e_group = mse_of(&b.data()[r.clone()], &data[r]);
            assert!(e_group < e_tensor, "slice {t}: {e_group} vs {e_tensor}");
        }
    }
}
