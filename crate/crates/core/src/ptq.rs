//! Whole-model calibration and quantizer construction.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{init_params, BitPolicy, CalibStats, Initializer};
use crate::error::{Error, Result};
use crate::quant::{init_scale_zero, num_groups, route_for_median, QuantParams, Route};
use crate::rng::derive_seed;
use crate::ssm::engine::{BlockCore, BlockTape};
use crate::ssm::{MambaBlockWeights, ModelQuant, QuantizerAssignment, Slot, SsmClassifier};
use crate::tensor::Tensor;

/// Sequences forwarded together before their activations are folded into
/// the statistics; bounds the memory held by traces.
const CHUNK: usize = 64;
/// Reservoir size of each per-time-step hidden-state statistic.
const STEP_CAPACITY: usize = 4096;

/// Statistics of every activation of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCalib {
    pub slots: BTreeMap<Slot, CalibStats>,
    /// Hidden-state statistics of each time step.
    pub h_steps: Vec<CalibStats>,
}

impl BlockCalib {
    fn new(seq_len: usize, fresh: &mut impl FnMut(usize) -> CalibStats) -> Self {
        Self {
            slots: BLOCK_SLOTS.iter().map(|&s| (s, fresh(CalibStats::DEFAULT_CAPACITY))).collect(),
            h_steps: (0..seq_len).map(|_| fresh(STEP_CAPACITY)).collect(),
        }
    }

    fn observe(&mut self, bt: &BlockTape) -> Result<()> {
        for (slot, stats) in self.slots.iter_mut() {
            let v = bt.slot_values(*slot).expect("block activation slot");
            stats.observe_f64(&v)?;
        }
        let h = &bt.ssm.h;
        let per = h.len() / self.h_steps.len();
        for (t, st) in self.h_steps.iter_mut().enumerate() {
            st.observe_f64(&h[t * per..(t + 1) * per])?;
        }
        Ok(())
    }

    /// Hidden-state statistics of time steps `range`.
    pub fn h_range(&self, range: std::ops::Range<usize>) -> Result<CalibStats> {
        let parts: Vec<&CalibStats> = self.h_steps[range].iter().collect();
        CalibStats::merged(&parts)
    }

    pub fn h_all(&self) -> Result<CalibStats> {
        self.h_range(0..self.h_steps.len())
    }

    pub fn get(&self, slot: Slot) -> Result<CalibStats> {
        if slot == Slot::H {
            return self.h_all();
        }
        self.slots
            .get(&slot)
            .cloned()
            .ok_or_else(|| Error::MissingAssignment(slot.name().to_string()))
    }
}

/// Statistics gathered from the floating-point model on a calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCalib {
    pub seq_len: usize,
    pub samples: usize,
    pub embed_act: CalibStats,
    pub head_act: CalibStats,
    pub blocks: Vec<BlockCalib>,
}

const BLOCK_SLOTS: [Slot; 9] = [
    Slot::InProjAct,
    Slot::Conv1dAct,
    Slot::X,
    Slot::DtProjAct,
    Slot::Delta,
    Slot::B,
    Slot::C,
    Slot::Abar,
    Slot::OutProjAct,
];

/// Runs the floating-point model over `x` `(B, L, C_in)` and records every
/// quantizable activation.
pub fn calibrate_model(model: &SsmClassifier, x: &Tensor, seed: u64) -> Result<ModelCalib> {
    let [b, l, c] = *x.shape() else {
        return Err(Error::ShapeMismatch(format!("calibration data must be (B, L, C), got {:?}", x.shape())));
    };
    if c != model.spec.d_input {
        return Err(Error::ShapeMismatch(format!("calibration data has {c} features, model expects {}", model.spec.d_input)));
    }
    let pm = model.prepare(None)?;
    let mut stream = 0u64;
    let mut fresh = |cap: usize| {
        stream += 1;
        CalibStats::new(cap, derive_seed(seed, stream))
    };
    let mut embed_act = fresh(CalibStats::DEFAULT_CAPACITY);
    let mut head_act = fresh(CalibStats::DEFAULT_CAPACITY);
    let mut blocks: Vec<BlockCalib> = (0..model.blocks.len()).map(|_| BlockCalib::new(l, &mut fresh)).collect();

    let xs = x.to_f64();
    for chunk in xs.chunks(CHUNK * l * c) {
        let tapes = chunk
            .par_chunks(l * c)
            .map(|s| pm.forward(s, l))
            .collect::<Result<Vec<_>>>()?;
        for tape in &tapes {
            embed_act.observe_f64(&tape.xq)?;
            head_act.observe_f64(&tape.pooled)?;
            for (bc, bt) in blocks.iter_mut().zip(&tape.blocks) {
                bc.observe(bt)?;
            }
        }
    }
    Ok(ModelCalib {
        seq_len: l,
        samples: b,
        embed_act,
        head_act,
        blocks,
    })
}

/// Statistics of a standalone floating-point block on `x` `(B, L, M)`.
pub fn calibrate_block(block: &MambaBlockWeights, x: &Tensor, seed: u64) -> Result<BlockCalib> {
    let m = block.dims.d_model;
    let [_, l, w] = *x.shape() else {
        return Err(Error::ShapeMismatch(format!("block input must be (B, L, M), got {:?}", x.shape())));
    };
    if w != m {
        return Err(Error::ShapeMismatch(format!("block input width {w}, block expects {m}")));
    }
    let core = BlockCore::prepare(block, None, false, None)?;
    let mut stream = 0u64;
    let mut fresh = |cap: usize| {
        stream += 1;
        CalibStats::new(cap, derive_seed(seed, stream))
    };
    let mut bc = BlockCalib::new(l, &mut fresh);
    for chunk in x.to_f64().chunks(CHUNK * l * m) {
        let tapes = chunk
            .par_chunks(l * m)
            .map(|s| core.forward(s, l, None))
            .collect::<Result<Vec<_>>>()?;
        for t in &tapes {
            bc.observe(t)?;
        }
    }
    Ok(bc)
}

/// `init_params` that tolerates collapsed ranges. A range the initializer
/// cannot use falls back to min/max; a constant tensor gets a range from
/// zero to its value, and an all-zero one the unit range.
pub fn params_or_fallback(stats: &CalibStats, init: Initializer, bits: u8) -> Result<QuantParams> {
    match init_params(stats, init, bits) {
        Err(Error::DegenerateRange { .. }) => {}
        other => return other,
    }
    let (mut lb, mut ub) = (stats.min.min(0.0), stats.max.max(0.0));
    if ub <= lb {
        (lb, ub) = (-1.0, 1.0);
    }
    let (s, z) = init_scale_zero(lb, ub, bits)?;
    QuantParams::uniform(bits, s, z)
}

/// How calibrated statistics become quantizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantRecipe {
    pub policy: BitPolicy,
    pub initializer: Initializer,
    /// Skewness boundary of the decay routing.
    pub alpha: f64,
    /// Temporal group length.
    pub lambda: usize,
    /// Route skewed decays to LtSQ (otherwise always uniform).
    pub ltsq: bool,
    /// Group the hidden state over time (otherwise tensor-wise).
    pub tgq: bool,
    pub use_shift: bool,
}

impl QuantRecipe {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.lambda == 0 {
            return Err(Error::Config("lambda must be at least 1".into()));
        }
        Ok(())
    }
}

/// Routing of one block's decay quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub block: usize,
    pub median: f64,
    pub route: Route,
}

/// Builds all quantizers of `model` from calibration statistics.
pub fn build_quant(model: &SsmClassifier, calib: &ModelCalib, recipe: &QuantRecipe) -> Result<(ModelQuant, Vec<RouteDecision>)> {
    recipe.validate()?;
    if calib.blocks.len() != model.blocks.len() {
        return Err(Error::Config(format!(
            "calibration covers {} blocks, model has {}",
            calib.blocks.len(),
            model.blocks.len()
        )));
    }
    let bits = |name: &str| recipe.policy.bits_for(name);
    let weight = |name: &str, t: &Tensor| -> Result<QuantParams> {
        params_or_fallback(&CalibStats::from_values(t.data(), 0)?, Initializer::Minmax, bits(name))
    };
    let mut q = ModelQuant::disabled(model.blocks.len());
    q.use_shift = recipe.use_shift;
    q.embed_weight = Some(weight("patch_embed.weight", &model.embed_w)?);
    q.embed_act = Some(params_or_fallback(&calib.embed_act, recipe.initializer, bits("patch_embed.act"))?);
    q.head_weight = Some(weight("head.weight", &model.head_w)?);
    q.head_act = Some(params_or_fallback(&calib.head_act, recipe.initializer, bits("head.act"))?);

    let mut routes = Vec::with_capacity(model.blocks.len());
    for (k, (w, bc)) in model.blocks.iter().zip(&calib.blocks).enumerate() {
        let (qa, route) = block_assignment(k, w, bc, recipe)?;
        q.blocks[k] = qa;
        routes.push(route);
    }
    q.validate(&model.spec)?;
    Ok((q, routes))
}

/// Quantizers of block `k` (names `block{k}.*` for the bit policy).
pub fn block_assignment(
    k: usize,
    w: &MambaBlockWeights,
    bc: &BlockCalib,
    recipe: &QuantRecipe,
) -> Result<(QuantizerAssignment, RouteDecision)> {
    recipe.validate()?;
    let tensors: BTreeMap<&str, &Tensor> = w.named_tensors().into_iter().collect();
    let mut qa = QuantizerAssignment::disabled();
    let mut decision = None;
    for slot in Slot::ALL {
        let name = format!("block{k}.{slot}");
        let b = recipe.policy.bits_for(&name);
        let params = match slot {
            s if s.is_weight() => params_or_fallback(&CalibStats::from_values(tensors[s.name()].data(), 0)?, Initializer::Minmax, b)?,
            Slot::Abar => {
                let stats = bc.get(Slot::Abar)?;
                let median = stats.median()?;
                let route = if recipe.ltsq {
                    route_for_median(median, recipe.alpha)
                } else {
                    Route::Uniform
                };
                decision = Some(RouteDecision { block: k, median, route });
                match route {
                    Route::Ltsq => QuantParams::ltsq(b)?,
                    Route::Uniform => params_or_fallback(&stats, recipe.initializer, b)?,
                }
            }
            Slot::H if recipe.tgq => {
                let len = bc.h_steps.len();
                let g = num_groups(len, recipe.lambda);
                let (mut scales, mut zero_points) = (Vec::with_capacity(g), Vec::with_capacity(g));
                for i in 0..g {
                    let lo = i * recipe.lambda;
                    let hi = if i + 1 == g { len } else { lo + recipe.lambda };
                    let p = params_or_fallback(&bc.h_range(lo..hi)?, recipe.initializer, b)?;
                    scales.push(p.scales[0]);
                    zero_points.push(p.zero_points[0]);
                }
                QuantParams::tgq(b, scales, zero_points, recipe.lambda, len)?
            }
            _ => params_or_fallback(&bc.get(slot)?, recipe.initializer, b)?,
        };
        qa.set(slot, Some(params));
    }
    let decision = decision.expect("decay slot visited");
    Ok((qa, decision))
}

/// A quantizer configured for one activation only, everything else in
/// floating point.
pub fn single_slot_quant(
    model: &SsmClassifier,
    calib: &ModelCalib,
    slot: Slot,
    bits: u8,
    initializer: Initializer,
    abar_ltsq: bool,
) -> Result<ModelQuant> {
    let mut q = ModelQuant::disabled(model.blocks.len());
    for (k, bc) in calib.blocks.iter().enumerate() {
        let p = if slot == Slot::Abar && abar_ltsq {
            QuantParams::ltsq(bits)?
        } else {
            params_or_fallback(&bc.get(slot)?, initializer, bits)?
        };
        q.blocks[k] = QuantizerAssignment::only(slot, p);
    }
    Ok(q)
}
