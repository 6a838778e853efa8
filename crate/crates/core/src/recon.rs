//! Block-wise reconstruction of quantizer scales.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{time_axis, QuantKind, QuantParams};
use crate::rng::seeded;
use crate::ssm::engine::{fq_one, BlockCore, BlockGrads, BlockTape};
use crate::ssm::{MambaBlockWeights, ModelQuant, QuantizerAssignment, Slot, SsmClassifier};
use crate::tensor::Tensor;

/// Scales never drop below this after an update.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub iterations: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub batch_size: usize,
    pub seed: u64,
    /// Also learn the scales of weight quantizers.
    pub learn_weight_scales: bool,
    /// Full-set loss is measured every this many iterations to track the
    /// best assignment seen.
    pub eval_every: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 4e-4,
            betas: (0.9, 0.999),
            batch_size: 2,
            seed: 0,
            learn_weight_scales: true,
            eval_every: 25,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_beta = |b: f64| b > 0.0 && b < 1.0;
        if self.iterations == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("iterations, batch_size and eval_every must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and non-negative", self.lr)));
        }
        if !ok_beta(self.betas.0) || !ok_beta(self.betas.1) {
            return Err(Error::Config(format!("betas {:?} must lie in (0, 1)", self.betas)));
        }
        Ok(())
    }
}

/// Loss gradient per scale, keyed by quantizer name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaleGradients {
    pub grads: BTreeMap<String, Vec<f64>>,
}

impl ScaleGradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }
}

/// Affine scales of an assignment keyed by slot name.
pub fn scales_of(qa: &QuantizerAssignment) -> BTreeMap<String, Vec<f64>> {
    qa.slots
        .iter()
        .filter_map(|(s, p)| p.as_ref().filter(|p| p.is_affine()).map(|p| (s.name().to_string(), p.scales.clone())))
        .collect()
}

/// `qa` with the given scales substituted.
pub fn with_scales(qa: &QuantizerAssignment, scales: &BTreeMap<String, Vec<f64>>) -> Result<QuantizerAssignment> {
    let mut out = qa.clone();
    for (name, s) in scales {
        let slot: Slot = name.parse()?;
        let p = out
            .get_mut(slot)
            .ok_or_else(|| Error::MissingAssignment(name.clone()))?;
        if p.scales.len() != s.len() {
            return Err(Error::ShapeMismatch(format!("{name}: {} scales, got {}", p.scales.len(), s.len())));
        }
        p.scales.clone_from(s);
    }
    Ok(out)
}

/// Straight-through local gradients of one quantizer, per element:
/// `d xhat / d x` and `d xhat / d s` (w.r.t. the scale of the element's group).
pub fn ste_fake_quant_grads(x: &Tensor, p: &QuantParams) -> Result<(Vec<f64>, Vec<f64>)> {
    p.validate()?;
    let (steps, inner) = match p.kind {
        QuantKind::Tgq => {
            let axis = time_axis(x.shape())?;
            (x.shape()[axis], x.shape()[axis + 1..].iter().product::<usize>())
        }
        _ => (1, x.len()),
    };
    let mut dx = Vec::with_capacity(x.len());
    let mut ds = Vec::with_capacity(x.len());
    for (i, &v) in x.data().iter().enumerate() {
        let step = (i / inner) % steps;
        let (_, r) = fq_one(p, f64::from(v), step, None)?;
        dx.push(if r.pass { 1.0 } else { 0.0 });
        ds.push(if p.is_affine() { r.slope } else { 0.0 });
    }
    Ok((dx, ds))
}

/// A quantized block evaluated on a batch, kept for the backward pass.
pub struct QuantTrace<'a> {
    core: BlockCore<'a>,
    tapes: Vec<BlockTape>,
    seq_len: usize,
}

fn split_batch(x: &Tensor, width: usize) -> Result<(usize, usize, Vec<f64>)> {
    match *x.shape() {
        [b, l, w] if w == width => Ok((b, l, x.to_f64())),
        [l, w] if w == width => Ok((1, l, x.to_f64())),
        _ => Err(Error::ShapeMismatch(format!("expected (B, L, {width}), got {:?}", x.shape()))),
    }
}

impl<'a> QuantTrace<'a> {
    /// Forward of `block` under `qa` on `x` `(B, L, M)`.
    pub fn record(x: &Tensor, block: &MambaBlockWeights, qa: &'a QuantizerAssignment, use_shift: bool) -> Result<Self> {
        let (_, l, xs) = split_batch(x, block.dims.d_model)?;
        let core = BlockCore::prepare(block, Some(qa), use_shift, None)?;
        let tapes = xs
            .par_chunks(l * block.dims.d_model)
            .map(|s| core.forward(s, l, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { core, tapes, seq_len: l })
    }

    pub fn output(&self) -> Result<Tensor> {
        let m = self.core.dims.d_model;
        let data: Vec<f64> = self.tapes.iter().flat_map(|t| t.out.iter().copied()).collect();
        Tensor::from_f64(vec![self.tapes.len(), self.seq_len, m], &data)
    }

    /// Mean squared error of the block output against `targets`, with the
    /// rounding and clipping decisions of this trace frozen.
    pub fn frozen_loss(
        &self,
        block: &MambaBlockWeights,
        qa: &QuantizerAssignment,
        scales: &BTreeMap<String, Vec<f64>>,
        targets: &Tensor,
    ) -> Result<f64> {
        let qa2 = with_scales(qa, scales)?;
        let core = BlockCore::prepare(block, Some(&qa2), self.core.ssm.use_shift, Some(&self.core))?;
        let t = targets.to_f64();
        let step = self.seq_len * self.core.dims.d_model;
        let mut sum = 0.0;
        for (k, tape) in self.tapes.iter().enumerate() {
            let out = core.forward(&tape.u, self.seq_len, Some(tape))?.out;
            sum += out.iter().zip(&t[k * step..(k + 1) * step]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(sum / t.len() as f64)
    }
}

/// Gradient of `mse(q_out, fp_out)` w.r.t. every scale of the traced block.
pub fn backward_block(fp_out: &Tensor, trace: &QuantTrace<'_>) -> Result<ScaleGradients> {
    Ok(backward_grads(fp_out, trace)?.1.scales_named())
}

fn backward_grads(fp_out: &Tensor, trace: &QuantTrace<'_>) -> Result<(f64, BlockGrads)> {
    if trace.tapes.is_empty() {
        return Err(Error::MissingTrace("quantized block forward"));
    }
    let m = trace.core.dims.d_model;
    let step = trace.seq_len * m;
    if fp_out.len() != step * trace.tapes.len() {
        return Err(Error::ShapeMismatch(format!(
            "target has {} values, trace covers {}",
            fp_out.len(),
            step * trace.tapes.len()
        )));
    }
    let t = fp_out.to_f64();
    let total = t.len() as f64;
    let per = trace
        .tapes
        .par_iter()
        .zip(t.par_chunks(step))
        .map(|(tape, target)| {
            let diff: Vec<f64> = tape.out.iter().zip(target).map(|(a, b)| a - b).collect();
            let loss: f64 = diff.iter().map(|d| d * d).sum();
            let d_out: Vec<f64> = diff.iter().map(|d| 2.0 * d / total).collect();
            let mut g = BlockGrads::default();
            trace.core.backward(tape, &d_out, &mut g);
            (loss, g)
        })
        .collect::<Vec<_>>();
    let mut grads = BlockGrads::default();
    let mut loss = 0.0;
    for (l, g) in &per {
        loss += l;
        grads.accumulate(g);
    }
    Ok((loss / total, grads))
}

trait NamedScales {
    fn scales_named(self) -> ScaleGradients;
}

impl NamedScales for BlockGrads {
    fn scales_named(self) -> ScaleGradients {
        ScaleGradients {
            grads: self.scales.into_iter().map(|(s, v)| (s.name().to_string(), v)).collect(),
        }
    }
}

/// Central differences `(f(s + h) - f(s - h)) / 2h` per scale, with
/// `h = eps * |s|` (or `eps` when `s == 0`).
pub fn finite_diff_grads<F>(loss_fn: F, scales: &BTreeMap<String, Vec<f64>>, eps: f64) -> Result<ScaleGradients>
where
    F: Fn(&BTreeMap<String, Vec<f64>>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut grads = BTreeMap::new();
    for (name, vals) in scales {
        let mut g = Vec::with_capacity(vals.len());
        for i in 0..vals.len() {
            let h = if vals[i] == 0.0 { eps } else { eps * vals[i].abs() };
            let mut up = scales.clone();
            let mut down = scales.clone();
            up.get_mut(name).expect("present")[i] += h;
            down.get_mut(name).expect("present")[i] -= h;
            g.push((loss_fn(&up)? - loss_fn(&down)?) / (2.0 * h));
        }
        grads.insert(name.clone(), g);
    }
    Ok(ScaleGradients { grads })
}

/// `base * 0.5 * (1 + cos(pi * t / total))`.
pub fn cosine_lr(base: f64, t: usize, total: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total.max(1) as f64).cos())
}

/// Adam with per-parameter state keyed by name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>, i32)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64) {
        let (m, v, t) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()], 0));
        *t += 1;
        let c1 = 1.0 - self.beta1.powi(*t);
        let c2 = 1.0 - self.beta2.powi(*t);
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// One row of a loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconResult {
    pub assignment: QuantizerAssignment,
    /// Full-set block-output MSE before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Minibatch losses.
    pub curve: Vec<LossPoint>,
    /// Full-set losses at each evaluation point, and their running minimum.
    pub evals: Vec<(usize, f64)>,
    pub best_so_far: Vec<f64>,
}

pub fn write_curve_csv(curve: &[LossPoint], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("iteration,loss,lr\n");
    for p in curve {
        text.push_str(&format!("{},{},{}\n", p.iteration, p.loss, p.lr));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn stack_seqs(seqs: &[&Vec<f64>], l: usize, m: usize) -> Result<Tensor> {
    let data: Vec<f64> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    Tensor::from_f64(vec![seqs.len(), l, m], &data)
}

fn full_loss(block: &MambaBlockWeights, qa: &QuantizerAssignment, use_shift: bool, x: &Tensor, target: &Tensor) -> Result<f64> {
    let trace = QuantTrace::record(x, block, qa, use_shift)?;
    crate::tensor::mse(&trace.output()?, target)
}

/// Learns the affine scales of `qa` so the quantized block reproduces the
/// floating-point outputs `targets` from (quantized-prefix) inputs `inputs`.
///
/// Each iteration draws `batch_size` sequences, takes one Adam step with a
/// cosine-annealed rate and clamps scales to [`SCALE_FLOOR`]. Zero points
/// never change. Returns the assignment with the lowest full-set loss seen.
pub fn reconstruct_block(
    block: &MambaBlockWeights,
    qa: &QuantizerAssignment,
    inputs: &Tensor,
    targets: &Tensor,
    use_shift: bool,
    cfg: &ReconConfig,
) -> Result<ReconResult> {
    cfg.validate()?;
    let (b, l, _) = split_batch(inputs, block.dims.d_model)?;
    let m = block.dims.d_model;
    if targets.shape() != inputs.shape() {
        return Err(Error::ShapeMismatch(format!("inputs {:?} vs targets {:?}", inputs.shape(), targets.shape())));
    }
    let xs: Vec<Vec<f64>> = inputs.to_f64().chunks(l * m).map(<[f64]>::to_vec).collect();
    let ts: Vec<Vec<f64>> = targets.to_f64().chunks(l * m).map(<[f64]>::to_vec).collect();

    let learnable = |slot: Slot| cfg.learn_weight_scales || !slot.is_weight();
    let mut current = qa.clone();
    let initial_loss = full_loss(block, &current, use_shift, inputs, targets)?;
    let mut best = (initial_loss, current.clone());
    let mut evals = vec![(0, initial_loss)];
    let mut best_so_far = vec![initial_loss];
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut adam = Adam::new(cfg.betas.0, cfg.betas.1);
    let mut rng = seeded(cfg.seed);
    let mut last_loss = initial_loss;

    for it in 0..cfg.iterations {
        let lr = cosine_lr(cfg.lr, it, cfg.iterations);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..b)).collect();
        let bx = stack_seqs(&idx.iter().map(|&i| &xs[i]).collect::<Vec<_>>(), l, m)?;
        let bt = stack_seqs(&idx.iter().map(|&i| &ts[i]).collect::<Vec<_>>(), l, m)?;
        let trace = QuantTrace::record(&bx, block, &current, use_shift)?;
        let (loss, grads) = backward_grads(&bt, &trace)?;
        drop(trace);
        if !loss.is_finite() || grads.scales.values().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                lr,
                last_loss,
            });
        }
        last_loss = loss;
        curve.push(LossPoint { iteration: it, loss, lr });
        for (slot, g) in &grads.scales {
            if !learnable(*slot) {
                continue;
            }
            if let Some(p) = current.get_mut(*slot) {
                adam.step(slot.name(), &mut p.scales, g, lr);
                p.scales.iter_mut().for_each(|s| *s = s.max(SCALE_FLOOR));
            }
        }
        if (it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iterations {
            let full = full_loss(block, &current, use_shift, inputs, targets)?;
            if !full.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: it,
                    lr,
                    last_loss,
                });
            }
            evals.push((it + 1, full));
            if full < best.0 {
                best = (full, current.clone());
            }
            best_so_far.push(best.0);
        }
    }
    Ok(ReconResult {
        assignment: best.1,
        initial_loss,
        final_loss: best.0,
        curve,
        evals,
        best_so_far,
    })
}

/// Reconstructs every block in order. Block `k` sees inputs produced by the
/// already reconstructed quantized blocks before it and is trained towards
/// the floating-point model's block-`k` outputs.
pub fn reconstruct_model(
    model: &SsmClassifier,
    q: &ModelQuant,
    calib_x: &Tensor,
    cfg: &ReconConfig,
) -> Result<(ModelQuant, Vec<ReconResult>)> {
    let mut q = q.clone();
    let mut results = Vec::with_capacity(model.blocks.len());
    let (_, l, _) = split_batch(calib_x, model.spec.d_input)?;
    let m = model.spec.d_model;
    for k in 0..model.blocks.len() {
        let fp_in = model.block_inputs(calib_x, None, k)?;
        let q_in = model.block_inputs(calib_x, Some(&q), k)?;
        let fp_in = stack_seqs(&fp_in.iter().collect::<Vec<_>>(), l, m)?;
        let q_in = stack_seqs(&q_in.iter().collect::<Vec<_>>(), l, m)?;
        let target = crate::ssm::mamba_block_forward(&fp_in, &model.blocks[k], None)?;
        let mut block_cfg = cfg.clone();
        block_cfg.seed = crate::rng::derive_seed(cfg.seed, k as u64);
        let r = reconstruct_block(&model.blocks[k], &q.blocks[k], &q_in, &target, q.use_shift, &block_cfg)?;
        q.blocks[k] = r.assignment.clone();
        results.push(r);
    }
    Ok((q, results))
}
