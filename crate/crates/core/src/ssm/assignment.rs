use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{QuantKind, QuantParams, Route};

/// A quantizable tensor inside one Mamba block.
///
/// Full names are prefixed with the block, e.g. `block2.ssm.h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    #[serde(rename = "in_proj.weight")]
    InProjWeight,
    #[serde(rename = "conv1d.weight")]
    Conv1dWeight,
    #[serde(rename = "x_proj.weight")]
    XProjWeight,
    #[serde(rename = "dt_proj.weight")]
    DtProjWeight,
    #[serde(rename = "out_proj.weight")]
    OutProjWeight,
    #[serde(rename = "ssm.A")]
    A,
    #[serde(rename = "ssm.D")]
    D,
    /// Block input entering the input projection.
    #[serde(rename = "in_proj.act")]
    InProjAct,
    /// SSM branch of the input projection, entering the causal conv.
    #[serde(rename = "conv1d.act")]
    Conv1dAct,
    /// SSM input `x_t` (conv output after SiLU).
    #[serde(rename = "ssm.x")]
    X,
    /// Low-rank timescale features entering `dt_proj`.
    #[serde(rename = "dt_proj.act")]
    DtProjAct,
    #[serde(rename = "ssm.delta")]
    Delta,
    #[serde(rename = "ssm.B")]
    B,
    #[serde(rename = "ssm.C")]
    C,
    #[serde(rename = "ssm.abar")]
    Abar,
    #[serde(rename = "ssm.h")]
    H,
    /// Gated SSM output entering the output projection.
    #[serde(rename = "out_proj.act")]
    OutProjAct,
}

impl Slot {
    pub const ALL: [Slot; 17] = [
        Slot::InProjWeight,
        Slot::Conv1dWeight,
        Slot::XProjWeight,
        Slot::DtProjWeight,
        Slot::OutProjWeight,
        Slot::A,
        Slot::D,
        Slot::InProjAct,
        Slot::Conv1dAct,
        Slot::X,
        Slot::DtProjAct,
        Slot::Delta,
        Slot::B,
        Slot::C,
        Slot::Abar,
        Slot::H,
        Slot::OutProjAct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::InProjWeight => "in_proj.weight",
            Slot::Conv1dWeight => "conv1d.weight",
            Slot::XProjWeight => "x_proj.weight",
            Slot::DtProjWeight => "dt_proj.weight",
            Slot::OutProjWeight => "out_proj.weight",
            Slot::A => "ssm.A",
            Slot::D => "ssm.D",
            Slot::InProjAct => "in_proj.act",
            Slot::Conv1dAct => "conv1d.act",
            Slot::X => "ssm.x",
            Slot::DtProjAct => "dt_proj.act",
            Slot::Delta => "ssm.delta",
            Slot::B => "ssm.B",
            Slot::C => "ssm.C",
            Slot::Abar => "ssm.abar",
            Slot::H => "ssm.h",
            Slot::OutProjAct => "out_proj.act",
        }
    }

    pub fn is_weight(self) -> bool {
        matches!(
            self,
            Slot::InProjWeight
                | Slot::Conv1dWeight
                | Slot::XProjWeight
                | Slot::DtProjWeight
                | Slot::OutProjWeight
                | Slot::A
                | Slot::D
        )
    }

    /// Short activation names used by the sensitivity sweep.
    pub fn from_target(target: &str) -> Result<Slot> {
        match target {
            "h" | "h_t" => Ok(Slot::H),
            "abar" | "A_bar" | "abar_t" => Ok(Slot::Abar),
            "B" | "B_t" => Ok(Slot::B),
            "C" | "C_t" => Ok(Slot::C),
            "delta" | "Delta" | "delta_t" => Ok(Slot::Delta),
            "x" | "x_t" => Ok(Slot::X),
            other => Slot::ALL
                .into_iter()
                .find(|s| !s.is_weight() && s.name() == other)
                .ok_or_else(|| Error::UnknownTarget(other.to_string())),
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Slot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Slot::ALL
            .into_iter()
            .find(|slot| slot.name() == s)
            .ok_or_else(|| Error::UnknownTarget(s.to_string()))
    }
}

/// Quantizer of every slot of one block; `None` keeps a slot in floating point.
///
/// Every slot must be present, so a forgotten tensor is an error rather
/// than a silent full-precision leak.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantizerAssignment {
    pub slots: BTreeMap<Slot, Option<QuantParams>>,
}

impl QuantizerAssignment {
    /// All slots present and in floating point.
    pub fn disabled() -> Self {
        Self {
            slots: Slot::ALL.into_iter().map(|s| (s, None)).collect(),
        }
    }

    /// Floating point everywhere except `slot`.
    pub fn only(slot: Slot, params: QuantParams) -> Self {
        let mut qa = Self::disabled();
        qa.set(slot, Some(params));
        qa
    }

    pub fn set(&mut self, slot: Slot, params: Option<QuantParams>) {
        self.slots.insert(slot, params);
    }

    pub fn get(&self, slot: Slot) -> Result<Option<&QuantParams>> {
        self.slots
            .get(&slot)
            .map(Option::as_ref)
            .ok_or_else(|| Error::MissingAssignment(slot.name().to_string()))
    }

    pub fn get_mut(&mut self, slot: Slot) -> Option<&mut QuantParams> {
        self.slots.get_mut(&slot).and_then(Option::as_mut)
    }

    pub fn validate(&self) -> Result<()> {
        for slot in Slot::ALL {
            let Some(p) = self.get(slot)? else { continue };
            p.validate()?;
            if slot.is_weight() && p.kind != QuantKind::Uniform {
                return Err(Error::InvalidParams(format!(
                    "{slot}: weights take tensor-wise uniform quantizers, got {:?}",
                    p.kind
                )));
            }
            if slot != Slot::Abar && matches!(p.kind, QuantKind::Ltsq | QuantKind::Log2) {
                return Err(Error::InvalidParams(format!(
                    "{slot}: log-domain quantizers only apply to the discrete decay"
                )));
            }
        }
        Ok(())
    }

    /// How the discrete decay is quantized, if at all.
    pub fn abar_route(&self) -> Option<Route> {
        match self.slots.get(&Slot::Abar)?.as_ref()?.kind {
            QuantKind::Ltsq | QuantKind::Log2 => Some(Route::Ltsq),
            _ => Some(Route::Uniform),
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.slots.values().all(Option::is_none)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for s in Slot::ALL {
            assert_eq!(s.name().parse::<Slot>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
    }

    #[test]
    fn weight_names_match_bit_policy() {
        for s in Slot::ALL {
            assert_eq!(s.is_weight(), crate::calib::is_weight_name(s.name()), "{s}");
        }
    }

    #[test]
    fn missing_slot_is_an_error() {
        let mut qa = QuantizerAssignment::disabled();
        qa.slots.remove(&Slot::H);
        assert!(matches!(qa.get(Slot::H), Err(Error::MissingAssignment(n)) if n == "ssm.h"));
        assert!(qa.validate().is_err());
    }

    #[test]
    fn routing_flag() {
        let mut qa = QuantizerAssignment::disabled();
        assert_eq!(qa.abar_route(), None);
        qa.set(Slot::Abar, Some(QuantParams::ltsq(4).unwrap()));
        assert_eq!(qa.abar_route(), Some(Route::Ltsq));
        qa.set(Slot::Abar, Some(QuantParams::uniform(4, 0.1, 0).unwrap()));
        assert_eq!(qa.abar_route(), Some(Route::Uniform));
    }

    #[test]
    fn log_quantizers_rejected_off_abar() {
        let qa = QuantizerAssignment::only(Slot::H, QuantParams::ltsq(4).unwrap());
        assert!(qa.validate().is_err());
        let qa = QuantizerAssignment::only(Slot::A, QuantParams::ltsq(4).unwrap());
        assert!(qa.validate().is_err());
    }

    #[test]
    fn targets() {
        assert_eq!(Slot::from_target("h_t").unwrap(), Slot::H);
        assert_eq!(Slot::from_target("ssm.delta").unwrap(), Slot::Delta);
        assert!(matches!(Slot::from_target("ssm.A"), Err(Error::UnknownTarget(_))));
        assert!(Slot::from_target("y").is_err());
    }

    #[test]
    fn json_roundtrip() {
        let mut qa = QuantizerAssignment::disabled();
        qa.set(Slot::Abar, Some(QuantParams::ltsq(4).unwrap()));
        let s = serde_json::to_string(&qa).unwrap();
        assert!(s.contains("\"ssm.abar\""));
        let back: QuantizerAssignment = serde_json::from_str(&s).unwrap();
        assert_eq!(back, qa);
    }
}
