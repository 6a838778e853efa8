use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{MAX_BITS, MIN_BITS};

/// One `pattern -> bits` rule. Patterns are shell globs over full tensor
/// names such as `block3.conv1d.act`; the first matching rule wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitOverride {
    pub pattern: String,
    pub bits: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitPolicy {
    pub default_weight_bits: u8,
    pub default_act_bits: u8,
    #[serde(default)]
    pub overrides: Vec<BitOverride>,
}

impl BitPolicy {
    pub fn new(default_weight_bits: u8, default_act_bits: u8) -> Self {
        Self {
            default_weight_bits,
            default_act_bits,
            overrides: Vec::new(),
        }
    }

    /// 8-bit first and last layer, plus 8-bit activations feeding the input
    /// projection, the causal convolution and the timescale projection.
    pub fn mixed_precision(default_weight_bits: u8, default_act_bits: u8) -> Self {
        let rule = |p: &str| BitOverride {
            pattern: p.to_string(),
            bits: 8,
        };
        Self {
            default_weight_bits,
            default_act_bits,
            overrides: vec![
                rule("patch_embed.*"),
                rule("head.*"),
                rule("*.in_proj.act"),
                rule("*.conv1d.act"),
                rule("*.dt_proj.act"),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |b: u8| (MIN_BITS..=MAX_BITS).contains(&b);
        if !ok(self.default_weight_bits) || !ok(self.default_act_bits) {
            return Err(Error::Config(format!(
                "default bits W{}A{} outside [{MIN_BITS}, {MAX_BITS}]",
                self.default_weight_bits, self.default_act_bits
            )));
        }
        for o in &self.overrides {
            if !ok(o.bits) {
                return Err(Error::Config(format!(
                    "override `{}` has bits {} outside [{MIN_BITS}, {MAX_BITS}]",
                    o.pattern, o.bits
                )));
            }
            glob::Pattern::new(&o.pattern)
                .map_err(|e| Error::Config(format!("bad pattern `{}`: {e}", o.pattern)))?;
        }
        Ok(())
    }

    pub fn bits_for(&self, tensor_name: &str) -> u8 {
        apply_bit_policy(self, tensor_name)
    }
}

/// Weights are named `*.weight` or are the SSM's `A` / `D` parameters.
pub fn is_weight_name(name: &str) -> bool {
    matches!(name.rsplit('.').next(), Some("weight" | "A" | "D"))
}

pub fn apply_bit_policy(policy: &BitPolicy, tensor_name: &str) -> u8 {
    for o in &policy.overrides {
        if glob::Pattern::new(&o.pattern).is_ok_and(|p| p.matches(tensor_name)) {
            return o.bits;
        }
    }
    if is_weight_name(tensor_name) {
        policy.default_weight_bits
    } else {
        policy.default_act_bits
    }
}
