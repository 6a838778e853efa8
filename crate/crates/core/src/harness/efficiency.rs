//! Theoretical storage and bit-operation counts of a quantized classifier.

use serde::{Deserialize, Serialize};

use crate::calib::BitPolicy;
use crate::error::{Error, Result};
use crate::ssm::ModelSpec;

const FP_BITS: u64 = 32;

/// A Vim-B-sized network: 24 blocks of width 768 over 197 tokens of 16x16x3
/// patches, 1000 classes.
pub fn vim_b_like() -> ModelSpec {
    ModelSpec {
        blocks: 24,
        seq_len: 197,
        d_input: 768,
        d_model: 768,
        d_inner: 1536,
        d_state: 16,
        conv_width: 4,
        dt_rank: Some(48),
        classes: 1000,
    }
}

/// One weight-bearing or activation-only operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub weight_bits: u8,
    /// Bits of the operand the weights (or the other activation) multiply.
    pub act_bits: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub ops: Vec<OpCost>,
    pub params: u64,
    pub macs: u64,
    /// Floating-point operations of the unquantized model, two per MAC.
    pub flops: u64,
    pub storage_bits: u64,
    pub fp_storage_bits: u64,
    pub bops: u64,
    pub fp_bops: u64,
    pub storage_reduction: f64,
    pub bops_reduction: f64,
    /// Equal to `bops_reduction`: FLOPs are normalized by operand widths.
    pub flops_reduction: f64,
}

struct Counter<'a> {
    policy: &'a BitPolicy,
    ops: Vec<OpCost>,
}

impl Counter<'_> {
    fn linear(&mut self, name: &str, params: u64, macs: u64) {
        self.ops.push(OpCost {
            name: name.to_string(),
            params,
            macs,
            weight_bits: self.policy.bits_for(&format!("{name}.weight")),
            act_bits: self.policy.bits_for(&format!("{name}.act")),
        });
    }

    /// Products between two activations, or a weight-free stored tensor.
    fn custom(&mut self, name: &str, params: u64, macs: u64, weight_bits: u8, act_bits: u8) {
        self.ops.push(OpCost {
            name: name.to_string(),
            params,
            macs,
            weight_bits,
            act_bits,
        });
    }
}

/// Counts every operator of `spec` under `policy`, per input sequence.
/// Bit widths up to 32 are accepted here; 32 means unquantized.
///
/// Weight bits come from `<op>.weight`, input activation bits from
/// `<op>.act`. The scan's products pair `ssm.abar` with `ssm.h`, `ssm.delta`
/// with `ssm.B` and `ssm.x`, and `ssm.C` with `ssm.h`. Biases are stored at
/// their layer's weight width.
pub fn estimate_efficiency(spec: &ModelSpec, policy: &BitPolicy) -> Result<EfficiencyReport> {
    spec.validate()?;
    let widths = [policy.default_weight_bits, policy.default_act_bits]
        .into_iter()
        .chain(policy.overrides.iter().map(|o| o.bits));
    for b in widths {
        if !(2..=FP_BITS as u8).contains(&b) {
            return Err(Error::Config(format!("bit width {b} outside [2, {FP_BITS}]")));
        }
    }
    if let Some(o) = policy.overrides.iter().find(|o| glob::Pattern::new(&o.pattern).is_err()) {
        return Err(Error::Config(format!("bad pattern `{}`", o.pattern)));
    }
    let dims = spec.block_dims();
    let l = spec.seq_len as u64;
    let (c, m, d, n, r, k) = (
        spec.d_input as u64,
        spec.d_model as u64,
        dims.d_inner as u64,
        dims.d_state as u64,
        dims.dt_rank as u64,
        dims.conv_width as u64,
    );
    let mut cn = Counter { policy, ops: Vec::new() };
    cn.linear("patch_embed", m * c + m, l * m * c);
    for b in 0..spec.blocks {
        let p = |s: &str| format!("block{b}.{s}");
        let bits = |s: &str| policy.bits_for(&p(s));
        cn.linear(&p("in_proj"), 2 * d * m, l * 2 * d * m);
        cn.linear(&p("conv1d"), d * k + d, l * d * k);
        cn.custom(&p("x_proj"), (r + 2 * n) * d, l * (r + 2 * n) * d, bits("x_proj.weight"), bits("ssm.x"));
        cn.linear(&p("dt_proj"), d * r + d, l * d * r);
        cn.custom(&p("ssm.A"), d * n, l * d * n, bits("ssm.A"), bits("ssm.delta"));
        cn.custom(&p("ssm.decay"), 0, l * d * n, bits("ssm.abar"), bits("ssm.h"));
        cn.custom(&p("ssm.input"), 0, 2 * l * d * n, bits("ssm.delta"), bits("ssm.B").max(bits("ssm.x")));
        cn.custom(&p("ssm.output"), 0, l * d * n, bits("ssm.C"), bits("ssm.h"));
        cn.custom(&p("ssm.D"), d, l * d, bits("ssm.D"), bits("ssm.x"));
        cn.linear(&p("out_proj"), m * d, l * m * d);
    }
    let classes = spec.classes as u64;
    cn.linear("head", classes * m + classes, classes * m);

    let ops = cn.ops;
    let params: u64 = ops.iter().map(|o| o.params).sum();
    let macs: u64 = ops.iter().map(|o| o.macs).sum();
    let storage_bits: u64 = ops.iter().map(|o| o.params * u64::from(o.weight_bits)).sum();
    let bops: u64 = ops.iter().map(|o| o.macs * u64::from(o.weight_bits) * u64::from(o.act_bits)).sum();
    let fp_storage_bits = params * FP_BITS;
    let fp_bops = macs * FP_BITS * FP_BITS;
    let reduction = |q: u64, fp: u64| if fp == 0 { 0.0 } else { 1.0 - q as f64 / fp as f64 };
    let bops_reduction = reduction(bops, fp_bops);
    Ok(EfficiencyReport {
        params,
        macs,
        flops: 2 * macs,
        storage_bits,
        fp_storage_bits,
        bops,
        fp_bops,
        storage_reduction: reduction(storage_bits, fp_storage_bits),
        bops_reduction,
        flops_reduction: bops_reduction,
        ops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_precision_saves_nothing() {
        let r = estimate_efficiency(&ModelSpec::default(), &BitPolicy::new(32, 32)).unwrap();
        assert_eq!(r.storage_reduction, 0.0);
        assert_eq!(r.bops_reduction, 0.0);
        assert_eq!(r.flops, 2 * r.macs);
    }

    #[test]
    fn uniform_six_bit_weights() {
        let r = estimate_efficiency(&vim_b_like(), &BitPolicy::new(6, 6)).unwrap();
        assert!((r.storage_reduction - 0.8125).abs() < 1e-12);
        assert!((r.bops_reduction - (1.0 - 36.0 / 1024.0)).abs() < 1e-12);
    }
}
