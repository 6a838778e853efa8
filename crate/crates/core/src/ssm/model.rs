use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::assignment::{QuantizerAssignment, Slot};
use super::engine::{fq_one, linear, linear_back, BlockCore, BlockGrads, BlockTape, Ste};
use super::params::{BlockDims, MambaBlockWeights};
use crate::error::{Error, Result};
use crate::quant::{QuantKind, QuantParams};
use crate::rng::{derive_seed, normal, seeded};
use crate::tensor::Tensor;

/// Shape of a sequence classifier built from Mamba blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub blocks: usize,
    /// Sequence length `L`.
    pub seq_len: usize,
    /// Features per input time step.
    pub d_input: usize,
    pub d_model: usize,
    /// Channels of each SSM (`D`).
    pub d_inner: usize,
    /// State size (`N`).
    pub d_state: usize,
    /// Causal conv width (`K`).
    pub conv_width: usize,
    pub dt_rank: Option<usize>,
    pub classes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            blocks: 1,
            seq_len: 32,
            d_input: 4,
            d_model: 8,
            d_inner: 16,
            d_state: 8,
            conv_width: 4,
            dt_rank: None,
            classes: 2,
        }
    }
}

impl ModelSpec {
    pub fn block_dims(&self) -> BlockDims {
        let mut d = BlockDims::new(self.d_model, self.d_inner, self.d_state);
        d.conv_width = self.conv_width;
        if let Some(r) = self.dt_rank {
            d.dt_rank = r;
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        if [self.blocks, self.seq_len, self.d_input, self.classes].contains(&0) {
            return Err(Error::Config(format!("model sizes must be positive: {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::Config("a classifier needs at least 2 classes".into()));
        }
        self.block_dims().validate()
    }
}

/// Input embedding, a stack of Mamba blocks, mean pooling over time and a
/// linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmClassifier {
    pub spec: ModelSpec,
    /// `(M, C_in)`
    pub embed_w: Tensor,
    /// `(M,)`
    pub embed_b: Tensor,
    pub blocks: Vec<MambaBlockWeights>,
    /// `(classes, M)`
    pub head_w: Tensor,
    /// `(classes,)`
    pub head_b: Tensor,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: ModelSpec,
    tensors: Vec<String>,
}

/// Quantizers of a whole classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelQuant {
    pub embed_weight: Option<QuantParams>,
    pub embed_act: Option<QuantParams>,
    pub head_weight: Option<QuantParams>,
    pub head_act: Option<QuantParams>,
    pub blocks: Vec<QuantizerAssignment>,
    /// Evaluate LtSQ decays with the integer shift kernel.
    #[serde(default = "default_true")]
    pub use_shift: bool,
}

fn default_true() -> bool {
    true
}

impl ModelQuant {
    pub fn disabled(blocks: usize) -> Self {
        Self {
            embed_weight: None,
            embed_act: None,
            head_weight: None,
            head_act: None,
            blocks: vec![QuantizerAssignment::disabled(); blocks],
            use_shift: true,
        }
    }

    /// Every quantizer with its full name, e.g. `block0.ssm.h`.
    pub fn named(&self) -> Vec<(String, Option<&QuantParams>)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), self.embed_weight.as_ref()),
            ("patch_embed.act".to_string(), self.embed_act.as_ref()),
        ];
        for (k, qa) in self.blocks.iter().enumerate() {
            for (slot, p) in &qa.slots {
                out.push((format!("block{k}.{slot}"), p.as_ref()));
            }
        }
        out.push(("head.weight".to_string(), self.head_weight.as_ref()));
        out.push(("head.act".to_string(), self.head_act.as_ref()));
        out
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Option<QuantParams>> {
        match name {
            "patch_embed.weight" => return Ok(&mut self.embed_weight),
            "patch_embed.act" => return Ok(&mut self.embed_act),
            "head.weight" => return Ok(&mut self.head_weight),
            "head.act" => return Ok(&mut self.head_act),
            _ => {}
        }
        let (k, slot) = split_block_name(name)?;
        let qa = self
            .blocks
            .get_mut(k)
            .ok_or_else(|| Error::UnknownTarget(name.to_string()))?;
        Ok(qa.slots.entry(slot).or_insert(None))
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.blocks.len() != spec.blocks {
            return Err(Error::Config(format!(
                "quantizer config covers {} blocks, model has {}",
                self.blocks.len(),
                spec.blocks
            )));
        }
        for (name, p) in self.named() {
            let Some(p) = p else { continue };
            p.validate()?;
            let outer = name.starts_with("patch_embed") || name.starts_with("head");
            if outer && p.kind != QuantKind::Uniform {
                return Err(Error::InvalidParams(format!("{name}: expected a uniform quantizer")));
            }
        }
        self.blocks.iter().try_for_each(QuantizerAssignment::validate)
    }
}

/// `blockK.rest` → `(K, slot)`.
pub(crate) fn split_block_name(name: &str) -> Result<(usize, Slot)> {
    let unknown = || Error::UnknownTarget(name.to_string());
    let rest = name.strip_prefix("block").ok_or_else(unknown)?;
    let (k, slot) = rest.split_once('.').ok_or_else(unknown)?;
    Ok((k.parse().map_err(|_| unknown())?, slot.parse().map_err(|_| unknown())?))
}

/// Gradients of a classifier loss, keyed by full tensor / quantizer name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelGrads {
    pub weights: BTreeMap<String, Vec<f64>>,
    pub scales: BTreeMap<String, Vec<f64>>,
}

impl ModelGrads {
    fn accumulate(&mut self, other: &ModelGrads) {
        for (dst, src) in [(&mut self.weights, &other.weights), (&mut self.scales, &other.scales)] {
            for (k, v) in src {
                let e = dst.entry(k.clone()).or_default();
                if e.is_empty() {
                    e.resize(v.len(), 0.0);
                }
                e.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            }
        }
    }
}

impl SsmClassifier {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(seed);
        let (m, c) = (spec.d_model, spec.d_input);
        let gauss = |rng: &mut _, n: usize, std: f64| -> Vec<f32> { (0..n).map(|_| (normal(rng) * std) as f32).collect() };
        let embed_w = Tensor::new(vec![m, c], gauss(&mut rng, m * c, 1.0 / (c as f64).sqrt()))?;
        let head_w = Tensor::new(
            vec![spec.classes, m],
            gauss(&mut rng, spec.classes * m, 1.0 / (m as f64).sqrt()),
        )?;
        let blocks = (0..spec.blocks)
            .map(|k| MambaBlockWeights::init(spec.block_dims(), derive_seed(seed, k as u64 + 1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            embed_w,
            embed_b: Tensor::zeros(vec![m]),
            blocks,
            head_w,
            head_b: Tensor::zeros(vec![spec.classes]),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.embed_w),
            ("patch_embed.bias".to_string(), &self.embed_b),
        ];
        for (k, b) in self.blocks.iter().enumerate() {
            out.extend(b.named_tensors().into_iter().map(|(n, t)| (format!("block{k}.{n}"), t)));
        }
        out.push(("head.weight".to_string(), &self.head_w));
        out.push(("head.bias".to_string(), &self.head_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &mut self.embed_w),
            ("patch_embed.bias".to_string(), &mut self.embed_b),
        ];
        for (k, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_tensors_mut().into_iter().map(|(n, t)| (format!("block{k}.{n}"), t)));
        }
        out.push(("head.weight".to_string(), &mut self.head_w));
        out.push(("head.bias".to_string(), &mut self.head_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Writes `manifest.json` plus one tensor blob pair per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let named = self.named_tensors();
        for (name, t) in &named {
            t.save(&dir.join(name))?;
        }
        let manifest = Manifest {
            spec: self.spec,
            tensors: named.into_iter().map(|(n, _)| n).collect(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut model = Self::init(manifest.spec, 0)?;
        for (name, t) in model.named_tensors_mut() {
            if !manifest.tensors.contains(&name) {
                return Err(Error::Config(format!("manifest lacks tensor `{name}`")));
            }
            let loaded = Tensor::load(&dir.join(&name))?;
            if loaded.shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: manifest spec implies {:?}, file has {:?}",
                    t.shape(),
                    loaded.shape()
                )));
            }
            *t = loaded;
        }
        for b in &model.blocks {
            b.validate()?;
        }
        Ok(model)
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        match *x.shape() {
            [b, l, c] if c == self.spec.d_input => Ok((b, l)),
            _ => Err(Error::ShapeMismatch(format!(
                "model input must be (B, L, {}), got {:?}",
                self.spec.d_input,
                x.shape()
            ))),
        }
    }

    pub(crate) fn prepare<'a>(&self, q: Option<&'a ModelQuant>) -> Result<PreparedModel<'a>> {
        PreparedModel::new(self, q)
    }

    /// Logits `(B, classes)` for inputs `(B, L, C_in)`.
    pub fn logits(&self, x: &Tensor, q: Option<&ModelQuant>) -> Result<Tensor> {
        let (b, l) = self.check_input(x)?;
        let pm = self.prepare(q)?;
        let xs = x.to_f64();
        let rows = xs
            .par_chunks(l * self.spec.d_input)
            .map(|s| pm.forward(s, l).map(|t| t.logits))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_f64(vec![b, self.spec.classes], &rows.concat())
    }

    pub fn predict(&self, x: &Tensor, q: Option<&ModelQuant>) -> Result<Vec<usize>> {
        let logits = self.logits(x, q)?;
        Ok(logits
            .data()
            .chunks(self.spec.classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize], q: Option<&ModelQuant>) -> Result<f64> {
        let pred = self.predict(x, q)?;
        if pred.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs but {} labels",
                pred.len(),
                labels.len()
            )));
        }
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub fn loss_and_grads(&self, x: &Tensor, labels: &[usize], q: Option<&ModelQuant>) -> Result<(f64, ModelGrads)> {
        let (b, l) = self.check_input(x)?;
        if labels.len() != b {
            return Err(Error::ShapeMismatch(format!("{b} inputs but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.spec.classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range")));
        }
        let pm = self.prepare(q)?;
        let xs = x.to_f64();
        let per = xs
            .par_chunks(l * self.spec.d_input)
            .zip(labels.par_iter())
            .map(|(s, &y)| -> Result<(f64, ModelGrads)> {
                let tape = pm.forward(s, l)?;
                let mx = tape.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = tape.logits.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                let loss = z.ln() + mx - tape.logits[y];
                let dlogits: Vec<f64> = exps
                    .iter()
                    .enumerate()
                    .map(|(i, e)| (e / z - if i == y { 1.0 } else { 0.0 }) / b as f64)
                    .collect();
                Ok((loss, pm.backward(&tape, &dlogits)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = ModelGrads::default();
        let mut loss = 0.0;
        for (lv, g) in &per {
            loss += lv;
            grads.accumulate(g);
        }
        Ok((loss / b as f64, grads))
    }

    /// Per-sequence `(L, M)` inputs of block `k`, with quantizers `q` active
    /// in everything before it.
    pub fn block_inputs(&self, x: &Tensor, q: Option<&ModelQuant>, k: usize) -> Result<Vec<Vec<f64>>> {
        if k >= self.blocks.len() {
            return Err(Error::InvalidArgument(format!("block {k} out of range")));
        }
        let (_, l) = self.check_input(x)?;
        let pm = self.prepare(q)?;
        x.to_f64()
            .par_chunks(l * self.spec.d_input)
            .map(|s| pm.prefix(s, l, k))
            .collect()
    }
}

/// A classifier with its quantized weights materialized.
pub(crate) struct PreparedModel<'a> {
    spec: ModelSpec,
    embed_w: Vec<f64>,
    embed_b: Vec<f64>,
    embed_w_ste: Vec<Ste>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
    head_w_ste: Vec<Ste>,
    pub blocks: Vec<BlockCore<'a>>,
    embed_act: Option<&'a QuantParams>,
    head_act: Option<&'a QuantParams>,
}

pub(crate) struct ModelTape {
    x_ste: Vec<Ste>,
    /// Embedding input after its quantizer.
    pub xq: Vec<f64>,
    pub blocks: Vec<BlockTape>,
    /// Mean-pooled features before the head quantizer.
    pub pooled: Vec<f64>,
    p_ste: Vec<Ste>,
    pq: Vec<f64>,
    pub logits: Vec<f64>,
}

fn fq_vec(p: Option<&QuantParams>, x: &[f64]) -> Result<(Vec<f64>, Vec<Ste>)> {
    let Some(p) = p else {
        return Ok((x.to_vec(), Vec::new()));
    };
    let mut out = Vec::with_capacity(x.len());
    let mut ste = Vec::with_capacity(x.len());
    for &v in x {
        let (xh, r) = fq_one(p, v, 0, None)?;
        out.push(xh);
        ste.push(r);
    }
    Ok((out, ste))
}

/// Gradient through a quantizer's records; scale gradient summed into `ds`.
fn ste_chain(ste: &[Ste], g: &[f64]) -> (Vec<f64>, Option<f64>) {
    if ste.is_empty() {
        return (g.to_vec(), None);
    }
    let ds = g.iter().zip(ste).map(|(g, r)| g * r.slope).sum();
    let dx = g.iter().zip(ste).map(|(&g, r)| if r.pass { g } else { 0.0 }).collect();
    (dx, Some(ds))
}

impl<'a> PreparedModel<'a> {
    fn new(m: &SsmClassifier, q: Option<&'a ModelQuant>) -> Result<Self> {
        if let Some(q) = q {
            q.validate(&m.spec)?;
        }
        let (embed_w, embed_w_ste) = fq_vec(q.and_then(|q| q.embed_weight.as_ref()), &m.embed_w.to_f64())?;
        let (head_w, head_w_ste) = fq_vec(q.and_then(|q| q.head_weight.as_ref()), &m.head_w.to_f64())?;
        let use_shift = q.is_none_or(|q| q.use_shift);
        let blocks = m
            .blocks
            .iter()
            .enumerate()
            .map(|(k, w)| BlockCore::prepare(w, q.map(|q| &q.blocks[k]), use_shift, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: m.spec,
            embed_w,
            embed_b: m.embed_b.to_f64(),
            embed_w_ste,
            head_w,
            head_b: m.head_b.to_f64(),
            head_w_ste,
            blocks,
            embed_act: q.and_then(|q| q.embed_act.as_ref()),
            head_act: q.and_then(|q| q.head_act.as_ref()),
        })
    }

    fn embed(&self, x: &[f64], l: usize) -> Result<(Vec<f64>, Vec<Ste>, Vec<f64>)> {
        let (c, m) = (self.spec.d_input, self.spec.d_model);
        let (xq, x_ste) = fq_vec(self.embed_act, x)?;
        let mut e = linear(&xq, l, c, &self.embed_w, m);
        for row in e.chunks_mut(m) {
            row.iter_mut().zip(&self.embed_b).for_each(|(v, b)| *v += b);
        }
        Ok((xq, x_ste, e))
    }

    /// Input of block `k` for one sequence.
    pub fn prefix(&self, x: &[f64], l: usize, k: usize) -> Result<Vec<f64>> {
        let (_, _, mut r) = self.embed(x, l)?;
        for b in &self.blocks[..k] {
            r = b.forward(&r, l, None)?.out;
        }
        Ok(r)
    }

    pub fn forward(&self, x: &[f64], l: usize) -> Result<ModelTape> {
        let (m, nc) = (self.spec.d_model, self.spec.classes);
        let (xq, x_ste, mut r) = self.embed(x, l)?;
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let t = b.forward(&r, l, None)?;
            r = t.out.clone();
            tapes.push(t);
        }
        let mut pooled = vec![0.0; m];
        for row in r.chunks(m) {
            pooled.iter_mut().zip(row).for_each(|(p, v)| *p += v);
        }
        pooled.iter_mut().for_each(|p| *p /= l as f64);
        let (pq, p_ste) = fq_vec(self.head_act, &pooled)?;
        let mut logits = linear(&pq, 1, m, &self.head_w, nc);
        logits.iter_mut().zip(&self.head_b).for_each(|(v, b)| *v += b);
        Ok(ModelTape {
            x_ste,
            xq,
            blocks: tapes,
            pooled,
            p_ste,
            pq,
            logits,
        })
    }

    pub fn backward(&self, tape: &ModelTape, dlogits: &[f64]) -> ModelGrads {
        let (c, m, nc) = (self.spec.d_input, self.spec.d_model, self.spec.classes);
        let l = tape.xq.len() / c;
        let mut g = ModelGrads::default();
        let mut d_pq = vec![0.0; m];
        let mut d_hw = vec![0.0; nc * m];
        linear_back(dlogits, &tape.pq, &self.head_w, 1, m, nc, &mut d_pq, &mut d_hw);
        g.weights.insert("head.bias".into(), dlogits.to_vec());
        let (d_pooled, ds) = ste_chain(&tape.p_ste, &d_pq);
        if let Some(ds) = ds {
            g.scales.insert("head.act".into(), vec![ds]);
        }
        self.weight_grad(&mut g, "head", &self.head_w_ste, d_hw);

        let mut d_r: Vec<f64> = (0..l * m).map(|i| d_pooled[i % m] / l as f64).collect();
        for (k, (core, bt)) in self.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let mut bg = BlockGrads::default();
            d_r = core.backward(bt, &d_r, &mut bg);
            for (name, v) in bg.weights {
                g.weights.insert(format!("block{k}.{name}"), v);
            }
            for (slot, v) in bg.scales {
                g.scales.insert(format!("block{k}.{slot}"), v);
            }
        }
        let mut d_xq = vec![0.0; l * c];
        let mut d_ew = vec![0.0; m * c];
        linear_back(&d_r, &tape.xq, &self.embed_w, l, c, m, &mut d_xq, &mut d_ew);
        let mut d_eb = vec![0.0; m];
        for row in d_r.chunks(m) {
            d_eb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        g.weights.insert("patch_embed.bias".into(), d_eb);
        if let (_, Some(ds)) = ste_chain(&tape.x_ste, &d_xq) {
            g.scales.insert("patch_embed.act".into(), vec![ds]);
        }
        self.weight_grad(&mut g, "patch_embed", &self.embed_w_ste, d_ew);
        g
    }

    fn weight_grad(&self, g: &mut ModelGrads, prefix: &str, ste: &[Ste], dw_hat: Vec<f64>) {
        let (dw, ds) = ste_chain(ste, &dw_hat);
        g.weights.insert(format!("{prefix}.weight"), dw);
        if let Some(ds) = ds {
            g.scales.insert(format!("{prefix}.weight"), vec![ds]);
        }
    }
}
