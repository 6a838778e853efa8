//! Per-sequence forward and backward passes of the selective scan and the
//! Mamba block in `f64`.
//!
//! Every fake-quantized element leaves an [`Ste`] record. A forward pass can
//! be replayed with the records of an earlier pass frozen in place, which
//! turns each quantizer into the affine map its straight-through gradient
//! describes. Finite differences of a frozen replay are what the analytic
//! gradients are checked against.

use std::collections::BTreeMap;

use super::assignment::{QuantizerAssignment, Slot};
use super::params::{BlockDims, MambaBlockWeights, SsmParams};
use crate::error::{Error, Result};
use crate::quant::{
    log2_code, ltsq_code, ltsq_dequant, shift_decay_scalar, QuantKind, QuantParams,
};
use crate::tensor::Tensor;

/// Straight-through record of one fake-quantized element.
///
/// Affine quantizers: `pass` is false when the code was clipped; `slope`
/// is `d xhat / d s`, i.e. `(xhat - x) / s` in range and `q - z` when
/// clipped. Log-domain quantizers always pass and store `xhat - x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ste {
    pub pass: bool,
    pub slope: f64,
}

/// Fake-quantizes one value at time step `step`.
pub(crate) fn fq_one(p: &QuantParams, x: f64, step: usize, frozen: Option<Ste>) -> Result<(f64, Ste)> {
    match p.kind {
        QuantKind::Uniform | QuantKind::Tgq => {
            let (s, z) = p.affine_for_step(step);
            if let Some(r) = frozen {
                let xhat = if r.pass { x + s * r.slope } else { s * r.slope };
                return Ok((xhat, r));
            }
            let q = (x / s).round_ties_even() + f64::from(z);
            let top = f64::from(p.qmax());
            if (0.0..=top).contains(&q) {
                let xhat = s * (q - f64::from(z));
                Ok((xhat, Ste { pass: true, slope: (xhat - x) / s }))
            } else {
                let c = q.clamp(0.0, top) - f64::from(z);
                Ok((s * c, Ste { pass: false, slope: c }))
            }
        }
        QuantKind::Ltsq | QuantKind::Log2 => {
            if let Some(r) = frozen {
                return Ok((x + r.slope, r));
            }
            let xhat = if p.kind == QuantKind::Ltsq {
                ltsq_dequant(ltsq_code(x, p.bits)?)
            } else {
                (-f64::from(log2_code(x, p.bits)?)).exp2()
            };
            Ok((xhat, Ste { pass: true, slope: xhat - x }))
        }
    }
}

/// Fake-quantizes a row-major `(rows, width)` slice, row `t` at step `t`.
fn fq_rows(
    p: Option<&QuantParams>,
    x: &[f64],
    width: usize,
    frozen: Option<&[Ste]>,
) -> Result<(Vec<f64>, Vec<Ste>)> {
    let Some(p) = p else {
        return Ok((x.to_vec(), Vec::new()));
    };
    let mut out = Vec::with_capacity(x.len());
    let mut ste = Vec::with_capacity(x.len());
    for (i, &v) in x.iter().enumerate() {
        let (xhat, r) = fq_one(p, v, i / width, frozen.map(|f| f[i]))?;
        out.push(xhat);
        ste.push(r);
    }
    Ok((out, ste))
}

/// Chains `dxhat` through the records of `p`, adding scale gradients into
/// `ds` and returning `dx`.
fn ste_back(p: Option<&QuantParams>, ste: &[Ste], dxhat: &[f64], width: usize, ds: &mut Vec<f64>) -> Vec<f64> {
    let Some(p) = p else {
        return dxhat.to_vec();
    };
    let affine = p.is_affine();
    if affine && ds.is_empty() {
        ds.resize(p.scales.len(), 0.0);
    }
    dxhat
        .iter()
        .zip(ste)
        .enumerate()
        .map(|(i, (&g, r))| {
            if affine {
                ds[group(p, i / width)] += g * r.slope;
            }
            if r.pass {
                g
            } else {
                0.0
            }
        })
        .collect()
}

fn group(p: &QuantParams, step: usize) -> usize {
    match (p.kind, p.group_length, p.seq_length) {
        (QuantKind::Tgq, Some(lambda), Some(len)) => crate::quant::group_of(step, lambda, len),
        _ => 0,
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `y[r, o] = sum_i w[o, i] x[r, i]`.
pub(crate) fn linear(x: &[f64], rows: usize, in_dim: usize, w: &[f64], out_dim: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out_dim];
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let wo = &w[o * in_dim..(o + 1) * in_dim];
            y[r * out_dim + o] = wo.iter().zip(xr).map(|(a, b)| a * b).sum();
        }
    }
    y
}

/// Backward of [`linear`], accumulating into `dx` and `dw`.
pub(crate) fn linear_back(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    dx: &mut [f64],
    dw: &mut [f64],
) {
    for r in 0..rows {
        for o in 0..out_dim {
            let g = dy[r * out_dim + o];
            if g == 0.0 {
                continue;
            }
            for i in 0..in_dim {
                dx[r * in_dim + i] += g * w[o * in_dim + i];
                dw[o * in_dim + i] += g * x[r * in_dim + i];
            }
        }
    }
}

/// Fake-quantized weight values and their records.
fn quantize_weight(
    p: Option<&QuantParams>,
    w: &Tensor,
    frozen: Option<&[Ste]>,
) -> Result<(Vec<f64>, Vec<Ste>)> {
    // a single row so every element sits at step 0
    fq_rows(p, &w.to_f64(), w.len(), frozen)
}

/// Activation quantizers resolved from an assignment.
#[derive(Debug, Clone, Default)]
pub(crate) struct Acts<'a> {
    map: BTreeMap<Slot, &'a QuantParams>,
}

impl<'a> Acts<'a> {
    fn new(qa: Option<&'a QuantizerAssignment>, slots: &[Slot]) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(qa) = qa {
            for &s in slots {
                if let Some(p) = qa.get(s)? {
                    p.validate()?;
                    map.insert(s, p);
                }
            }
        }
        Ok(Self { map })
    }

    fn get(&self, s: Slot) -> Option<&'a QuantParams> {
        self.map.get(&s).copied()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        for (slot, p) in &self.map {
            if p.kind == QuantKind::Tgq && p.seq_length != Some(len) {
                return Err(Error::ShapeMismatch(format!(
                    "{slot}: temporal groups built for L={:?}, sequence has L={len}",
                    p.seq_length
                )));
            }
        }
        Ok(())
    }
}

const SSM_ACTS: [Slot; 7] = [Slot::X, Slot::DtProjAct, Slot::B, Slot::C, Slot::Delta, Slot::Abar, Slot::H];
const BLOCK_ACTS: [Slot; 3] = [Slot::InProjAct, Slot::Conv1dAct, Slot::OutProjAct];

/// Gradients of one pass, keyed by parameter name and by quantizer slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockGrads {
    pub weights: BTreeMap<&'static str, Vec<f64>>,
    pub scales: BTreeMap<Slot, Vec<f64>>,
}

impl BlockGrads {
    /// Adds `other` elementwise.
    pub fn accumulate(&mut self, other: &BlockGrads) {
        for (k, v) in &other.weights {
            add_into(self.weights.entry(k).or_default(), v);
        }
        for (k, v) in &other.scales {
            add_into(self.scales.entry(*k).or_default(), v);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.weights.values_mut().chain(self.scales.values_mut()) {
            v.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

fn add_into(dst: &mut Vec<f64>, src: &[f64]) {
    if dst.is_empty() {
        dst.resize(src.len(), 0.0);
    }
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// The selective scan with its (fake-quantized) parameters.
#[derive(Debug, Clone)]
pub(crate) struct SsmCore<'a> {
    pub d: usize,
    pub n: usize,
    pub r: usize,
    pub w_x: Vec<f64>,
    pub w_delta: Vec<f64>,
    pub b_delta: Vec<f64>,
    pub a: Vec<f64>,
    pub d_skip: Vec<f64>,
    pub acts: Acts<'a>,
    pub weight_ste: BTreeMap<Slot, Vec<Ste>>,
    pub use_shift: bool,
}

/// Everything the scan backward needs from one sequence.
#[derive(Debug, Clone, Default)]
pub(crate) struct SsmTape {
    pub l: usize,
    /// SSM input before its quantizer, `(L, D)`.
    pub x: Vec<f64>,
    pub xq: Vec<f64>,
    /// `[dt_low | B | C]` before their quantizers, `(L, R + 2N)`.
    pub proj: Vec<f64>,
    pub dlq: Vec<f64>,
    pub bq: Vec<f64>,
    pub cq: Vec<f64>,
    pub dpre: Vec<f64>,
    pub delta: Vec<f64>,
    pub dq: Vec<f64>,
    /// `(L, D, N)` blocks.
    pub abar: Vec<f64>,
    pub aq: Vec<f64>,
    pub h: Vec<f64>,
    pub hq: Vec<f64>,
    /// Shift-path decay minus `aq * h_prev`; empty when the multiply path ran.
    pub resid: Vec<f64>,
    pub y: Vec<f64>,
    pub ste: BTreeMap<Slot, Vec<Ste>>,
}

impl SsmTape {
    /// Pre-quantizer values of an activation slot, row-major over time.
    pub fn slot_values(&self, slot: Slot) -> Option<Vec<f64>> {
        let w = self.proj.len() / self.l.max(1);
        let (r, n) = (w - 2 * (self.bq.len() / self.l.max(1)), self.bq.len() / self.l.max(1));
        let cols = |lo: usize, hi: usize| -> Vec<f64> {
            self.proj
                .chunks(w)
                .flat_map(|row| row[lo..hi].iter().copied())
                .collect()
        };
        match slot {
            Slot::X => Some(self.x.clone()),
            Slot::DtProjAct => Some(cols(0, r)),
            Slot::B => Some(cols(r, r + n)),
            Slot::C => Some(cols(r + n, r + 2 * n)),
            Slot::Delta => Some(self.delta.clone()),
            Slot::Abar => Some(self.abar.clone()),
            Slot::H => Some(self.h.clone()),
            _ => None,
        }
    }
}

impl<'a> SsmCore<'a> {
    pub fn prepare(
        p: &SsmParams,
        qa: Option<&'a QuantizerAssignment>,
        use_shift: bool,
        frozen: Option<&BTreeMap<Slot, Vec<Ste>>>,
    ) -> Result<Self> {
        p.validate()?;
        let acts = Acts::new(qa, &SSM_ACTS)?;
        let mut weight_ste = BTreeMap::new();
        let mut quant = |slot: Slot, t: &Tensor| -> Result<Vec<f64>> {
            let pq = match qa {
                Some(qa) => qa.get(slot)?,
                None => None,
            };
            let (v, ste) = quantize_weight(pq, t, frozen.and_then(|f| f.get(&slot)).map(Vec::as_slice))?;
            if pq.is_some() {
                weight_ste.insert(slot, ste);
            }
            Ok(v)
        };
        let w_x = quant(Slot::XProjWeight, &p.w_x)?;
        let w_delta = quant(Slot::DtProjWeight, &p.w_delta)?;
        let a = quant(Slot::A, &p.a)?;
        let d_skip = quant(Slot::D, &p.d_skip)?;
        Ok(Self {
            d: p.d_inner(),
            n: p.d_state(),
            r: p.dt_rank(),
            w_x,
            w_delta,
            b_delta: p.b_delta.to_f64(),
            a,
            d_skip,
            acts,
            weight_ste,
            use_shift,
        })
    }

    fn shift_active(&self) -> bool {
        self.use_shift
            && self.acts.get(Slot::Abar).is_some_and(|p| p.kind == QuantKind::Ltsq)
            && self.acts.get(Slot::H).is_some_and(QuantParams::is_affine)
    }

    /// Runs the scan on one `(L, D)` sequence.
    pub fn forward(&self, x: &[f64], l: usize, frozen: Option<&SsmTape>) -> Result<SsmTape> {
        let (d, n, r) = (self.d, self.n, self.r);
        if x.len() != l * d {
            return Err(Error::ShapeMismatch(format!(
                "SSM input has {} values, expected L={l} x D={d}",
                x.len()
            )));
        }
        self.acts.check_len(l)?;
        let fz = |s: Slot| frozen.and_then(|f| f.ste.get(&s)).map(Vec::as_slice);
        let mut ste = BTreeMap::new();
        let mut keep = |s: Slot, v: Vec<Ste>| {
            if self.acts.get(s).is_some() {
                ste.insert(s, v);
            }
        };

        let (xq, s) = fq_rows(self.acts.get(Slot::X), x, d, fz(Slot::X))?;
        keep(Slot::X, s);
        let w = r + 2 * n;
        let proj = linear(&xq, l, d, &self.w_x, w);
        let cols = |lo: usize, hi: usize| -> Vec<f64> {
            proj.chunks(w).flat_map(|row| row[lo..hi].iter().copied()).collect()
        };
        let (dlq, s) = fq_rows(self.acts.get(Slot::DtProjAct), &cols(0, r), r, fz(Slot::DtProjAct))?;
        keep(Slot::DtProjAct, s);
        let (bq, s) = fq_rows(self.acts.get(Slot::B), &cols(r, r + n), n, fz(Slot::B))?;
        keep(Slot::B, s);
        let (cq, s) = fq_rows(self.acts.get(Slot::C), &cols(r + n, w), n, fz(Slot::C))?;
        keep(Slot::C, s);

        let mut dpre = linear(&dlq, l, r, &self.w_delta, d);
        for row in dpre.chunks_mut(d) {
            row.iter_mut().zip(&self.b_delta).for_each(|(v, b)| *v += b);
        }
        let delta: Vec<f64> = dpre.iter().map(|&v| softplus(v)).collect();
        let (dq, s) = fq_rows(self.acts.get(Slot::Delta), &delta, d, fz(Slot::Delta))?;
        keep(Slot::Delta, s);

        let dn = d * n;
        let mut abar = vec![0.0; l * dn];
        for t in 0..l {
            for di in 0..d {
                for ni in 0..n {
                    abar[t * dn + di * n + ni] = (dq[t * d + di] * self.a[di * n + ni]).exp();
                }
            }
        }
        let pa = self.acts.get(Slot::Abar);
        let (aq, s) = fq_rows(pa, &abar, dn, fz(Slot::Abar))?;
        keep(Slot::Abar, s);

        let ph = self.acts.get(Slot::H);
        let shift = self.shift_active();
        let frozen_h = fz(Slot::H);
        let mut h = vec![0.0; l * dn];
        let mut hq = vec![0.0; l * dn];
        let mut ste_h = Vec::with_capacity(if ph.is_some() { l * dn } else { 0 });
        let mut resid = if shift { vec![0.0; l * dn] } else { Vec::new() };
        let mut y = vec![0.0; l * d];
        for t in 0..l {
            for di in 0..d {
                let xt = xq[t * d + di];
                let mut acc = self.d_skip[di] * xt;
                for ni in 0..n {
                    let i = t * dn + di * n + ni;
                    let prev = if t > 0 { hq[i - dn] } else { 0.0 };
                    let mut decay = aq[i] * prev;
                    if shift {
                        let e = match frozen {
                            Some(f) => f.resid[i],
                            None if t == 0 => 0.0,
                            None => {
                                let (hp, ap) = (ph.expect("shift needs h"), pa.expect("shift needs abar"));
                                let (s_prev, _) = hp.affine_for_step(t - 1);
                                let v = (prev / s_prev).round() as i64;
                                let code = ltsq_code(abar[i], ap.bits)?;
                                shift_decay_scalar(v, code as u32, s_prev) - decay
                            }
                        };
                        resid[i] = e;
                        decay += e;
                    }
                    let hv = decay + dq[t * d + di] * bq[t * n + ni] * xt;
                    h[i] = hv;
                    let hv_q = match ph {
                        Some(p) => {
                            let (v, r) = fq_one(p, hv, t, frozen_h.map(|f| f[i]))?;
                            ste_h.push(r);
                            v
                        }
                        None => hv,
                    };
                    hq[i] = hv_q;
                    acc += cq[t * n + ni] * hv_q;
                }
                y[t * d + di] = acc;
            }
        }
        if ph.is_some() {
            ste.insert(Slot::H, ste_h);
        }
        Ok(SsmTape {
            l,
            x: x.to_vec(),
            xq,
            proj,
            dlq,
            bq,
            cq,
            dpre,
            delta,
            dq,
            abar,
            aq,
            h,
            hq,
            resid,
            y,
            ste,
        })
    }

    /// Backward through time. Returns the gradient w.r.t. the pre-quantizer
    /// SSM input and accumulates parameter and scale gradients into `g`.
    pub fn backward(&self, tape: &SsmTape, dy: &[f64], g: &mut BlockGrads) -> Vec<f64> {
        let (l, d, n, r) = (tape.l, self.d, self.n, self.r);
        let dn = d * n;
        let mut ds = |s: Slot| std::mem::take(g.scales.entry(s).or_default());
        let mut ds_h = ds(Slot::H);
        let mut ds_abar = ds(Slot::Abar);
        let mut ds_delta = ds(Slot::Delta);
        let mut ds_dl = ds(Slot::DtProjAct);
        let mut ds_b = ds(Slot::B);
        let mut ds_c = ds(Slot::C);
        let mut ds_x = ds(Slot::X);

        let mut g_xq = vec![0.0; l * d];
        let mut g_cq = vec![0.0; l * n];
        let mut g_bq = vec![0.0; l * n];
        let mut g_dq = vec![0.0; l * d];
        let mut g_aq = vec![0.0; l * dn];
        let mut g_dskip = vec![0.0; d];

        let ph = self.acts.get(Slot::H);
        if let Some(p) = ph {
            if p.is_affine() && ds_h.is_empty() {
                ds_h.resize(p.scales.len(), 0.0);
            }
        }
        let ste_h = tape.ste.get(&Slot::H);
        let mut carry = vec![0.0; dn];
        for t in (0..l).rev() {
            for di in 0..d {
                let gy = dy[t * d + di];
                let xt = tape.xq[t * d + di];
                g_xq[t * d + di] += gy * self.d_skip[di];
                g_dskip[di] += gy * xt;
                let dqt = tape.dq[t * d + di];
                for ni in 0..n {
                    let i = t * dn + di * n + ni;
                    let c = di * n + ni;
                    g_cq[t * n + ni] += gy * tape.hq[i];
                    let g_hq = gy * tape.cq[t * n + ni] + carry[c];
                    let g_h = match (ph, ste_h) {
                        (Some(p), Some(rec)) => {
                            let rr = rec[i];
                            if p.is_affine() {
                                ds_h[group(p, t)] += g_hq * rr.slope;
                            }
                            if rr.pass {
                                g_hq
                            } else {
                                0.0
                            }
                        }
                        _ => g_hq,
                    };
                    let prev = if t > 0 { tape.hq[i - dn] } else { 0.0 };
                    g_aq[i] = g_h * prev;
                    carry[c] = g_h * tape.aq[i];
                    let b = tape.bq[t * n + ni];
                    g_dq[t * d + di] += g_h * b * xt;
                    g_bq[t * n + ni] += g_h * dqt * xt;
                    g_xq[t * d + di] += g_h * dqt * b;
                }
            }
        }

        let pa = self.acts.get(Slot::Abar);
        let g_abar = ste_back(pa, tape.ste.get(&Slot::Abar).map_or(&[], Vec::as_slice), &g_aq, dn, &mut ds_abar);
        let mut g_a = vec![0.0; dn];
        for t in 0..l {
            for di in 0..d {
                let dqt = tape.dq[t * d + di];
                let mut acc = 0.0;
                for ni in 0..n {
                    let i = t * dn + di * n + ni;
                    let ga = g_abar[i] * tape.abar[i];
                    acc += ga * self.a[di * n + ni];
                    g_a[di * n + ni] += ga * dqt;
                }
                g_dq[t * d + di] += acc;
            }
        }

        let pd = self.acts.get(Slot::Delta);
        let g_delta = ste_back(pd, tape.ste.get(&Slot::Delta).map_or(&[], Vec::as_slice), &g_dq, d, &mut ds_delta);
        let g_dpre: Vec<f64> = g_delta.iter().zip(&tape.dpre).map(|(g, &v)| g * sigmoid(v)).collect();
        let mut g_dlq = vec![0.0; l * r];
        let mut g_wd = vec![0.0; d * r];
        linear_back(&g_dpre, &tape.dlq, &self.w_delta, l, r, d, &mut g_dlq, &mut g_wd);
        let mut g_bd = vec![0.0; d];
        for row in g_dpre.chunks(d) {
            g_bd.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }

        let rec = |s: Slot| tape.ste.get(&s).map_or(&[][..], Vec::as_slice);
        let g_dl = ste_back(self.acts.get(Slot::DtProjAct), rec(Slot::DtProjAct), &g_dlq, r, &mut ds_dl);
        let g_b = ste_back(self.acts.get(Slot::B), rec(Slot::B), &g_bq, n, &mut ds_b);
        let g_c = ste_back(self.acts.get(Slot::C), rec(Slot::C), &g_cq, n, &mut ds_c);
        let w = r + 2 * n;
        let mut g_proj = vec![0.0; l * w];
        for t in 0..l {
            let row = &mut g_proj[t * w..(t + 1) * w];
            row[..r].copy_from_slice(&g_dl[t * r..(t + 1) * r]);
            row[r..r + n].copy_from_slice(&g_b[t * n..(t + 1) * n]);
            row[r + n..].copy_from_slice(&g_c[t * n..(t + 1) * n]);
        }
        let mut g_wx = vec![0.0; w * d];
        linear_back(&g_proj, &tape.xq, &self.w_x, l, d, w, &mut g_xq, &mut g_wx);
        let g_x = ste_back(self.acts.get(Slot::X), rec(Slot::X), &g_xq, d, &mut ds_x);

        for (s, v) in [
            (Slot::H, ds_h),
            (Slot::Abar, ds_abar),
            (Slot::Delta, ds_delta),
            (Slot::DtProjAct, ds_dl),
            (Slot::B, ds_b),
            (Slot::C, ds_c),
            (Slot::X, ds_x),
        ] {
            g.scales.insert(s, v);
        }
        self.weight_grad(g, Slot::XProjWeight, "x_proj.weight", g_wx);
        self.weight_grad(g, Slot::DtProjWeight, "dt_proj.weight", g_wd);
        self.weight_grad(g, Slot::A, "ssm.A", g_a);
        self.weight_grad(g, Slot::D, "ssm.D", g_dskip);
        add_into(g.weights.entry("dt_proj.bias").or_default(), &g_bd);
        g.scales.retain(|_, v| !v.is_empty());
        g_x
    }

    fn weight_grad(&self, g: &mut BlockGrads, slot: Slot, name: &'static str, dw_hat: Vec<f64>) {
        weight_grad(&self.weight_ste, g, slot, name, dw_hat);
    }
}

/// Chains the gradient w.r.t. a fake-quantized weight into the float weight
/// and, when quantized, its scale.
fn weight_grad(
    records: &BTreeMap<Slot, Vec<Ste>>,
    g: &mut BlockGrads,
    slot: Slot,
    name: &'static str,
    dw_hat: Vec<f64>,
) {
    let dw = match records.get(&slot) {
        Some(rec) => {
            let ds: f64 = dw_hat.iter().zip(rec).map(|(g, r)| g * r.slope).sum();
            add_into(g.scales.entry(slot).or_default(), &[ds]);
            dw_hat
                .iter()
                .zip(rec)
                .map(|(&g, r)| if r.pass { g } else { 0.0 })
                .collect()
        }
        None => dw_hat,
    };
    add_into(g.weights.entry(name).or_default(), &dw);
}

/// A Mamba block with its (fake-quantized) parameters.
#[derive(Debug, Clone)]
pub(crate) struct BlockCore<'a> {
    pub dims: BlockDims,
    pub w_in: Vec<f64>,
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    pub w_out: Vec<f64>,
    pub ssm: SsmCore<'a>,
    pub acts: Acts<'a>,
    pub weight_ste: BTreeMap<Slot, Vec<Ste>>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct BlockTape {
    pub l: usize,
    pub u: Vec<f64>,
    pub uq: Vec<f64>,
    /// Input projection output `(L, 2D)`: SSM branch then gate.
    pub xz: Vec<f64>,
    pub xc: Vec<f64>,
    /// Convolution output before SiLU.
    pub conv: Vec<f64>,
    pub ssm: SsmTape,
    pub g: Vec<f64>,
    pub gq: Vec<f64>,
    pub out: Vec<f64>,
    pub ste: BTreeMap<Slot, Vec<Ste>>,
}

impl BlockTape {
    pub fn slot_values(&self, slot: Slot) -> Option<Vec<f64>> {
        let d = self.xc.len() / self.l.max(1);
        match slot {
            Slot::InProjAct => Some(self.u.clone()),
            Slot::Conv1dAct => Some(self.xz.chunks(2 * d).flat_map(|r| r[..d].iter().copied()).collect()),
            Slot::OutProjAct => Some(self.g.clone()),
            s => self.ssm.slot_values(s),
        }
    }
}

impl<'a> BlockCore<'a> {
    pub fn prepare(
        w: &MambaBlockWeights,
        qa: Option<&'a QuantizerAssignment>,
        use_shift: bool,
        frozen: Option<&BlockCore<'_>>,
    ) -> Result<Self> {
        w.validate()?;
        if let Some(qa) = qa {
            qa.validate()?;
        }
        let ssm = SsmCore::prepare(&w.ssm, qa, use_shift, frozen.map(|f| &f.ssm.weight_ste))?;
        let acts = Acts::new(qa, &BLOCK_ACTS)?;
        let mut weight_ste = BTreeMap::new();
        let mut quant = |slot: Slot, t: &Tensor| -> Result<Vec<f64>> {
            let pq = match qa {
                Some(qa) => qa.get(slot)?,
                None => None,
            };
            let fz = frozen.and_then(|f| f.weight_ste.get(&slot)).map(Vec::as_slice);
            let (v, ste) = quantize_weight(pq, t, fz)?;
            if pq.is_some() {
                weight_ste.insert(slot, ste);
            }
            Ok(v)
        };
        let w_in = quant(Slot::InProjWeight, &w.w_in)?;
        let conv_w = quant(Slot::Conv1dWeight, &w.conv_w)?;
        let w_out = quant(Slot::OutProjWeight, &w.w_out)?;
        Ok(Self {
            dims: w.dims,
            w_in,
            conv_w,
            conv_b: w.conv_b.to_f64(),
            w_out,
            ssm,
            acts,
            weight_ste,
        })
    }

    /// One `(L, M)` sequence through the block.
    pub fn forward(&self, u: &[f64], l: usize, frozen: Option<&BlockTape>) -> Result<BlockTape> {
        let BlockDims {
            d_model: m,
            d_inner: d,
            conv_width: k,
            ..
        } = self.dims;
        if u.len() != l * m {
            return Err(Error::ShapeMismatch(format!(
                "block input has {} values, expected L={l} x M={m}",
                u.len()
            )));
        }
        self.acts.check_len(l)?;
        let fz = |s: Slot| frozen.and_then(|f| f.ste.get(&s)).map(Vec::as_slice);
        let mut ste = BTreeMap::new();

        let (uq, s) = fq_rows(self.acts.get(Slot::InProjAct), u, m, fz(Slot::InProjAct))?;
        if self.acts.get(Slot::InProjAct).is_some() {
            ste.insert(Slot::InProjAct, s);
        }
        let xz = linear(&uq, l, m, &self.w_in, 2 * d);
        let x_in: Vec<f64> = xz.chunks(2 * d).flat_map(|r| r[..d].iter().copied()).collect();
        let (xc, s) = fq_rows(self.acts.get(Slot::Conv1dAct), &x_in, d, fz(Slot::Conv1dAct))?;
        if self.acts.get(Slot::Conv1dAct).is_some() {
            ste.insert(Slot::Conv1dAct, s);
        }
        let mut conv = vec![0.0; l * d];
        for t in 0..l {
            for di in 0..d {
                let mut acc = self.conv_b[di];
                for j in 0..k {
                    // tap j reads x[t - (k - 1) + j]
                    if let Some(src) = (t + j).checked_sub(k - 1) {
                        acc += self.conv_w[di * k + j] * xc[src * d + di];
                    }
                }
                conv[t * d + di] = acc;
            }
        }
        let xs: Vec<f64> = conv.iter().map(|&v| silu(v)).collect();
        let ssm = self.ssm.forward(&xs, l, frozen.map(|f| &f.ssm))?;

        let mut g = vec![0.0; l * d];
        for t in 0..l {
            for di in 0..d {
                g[t * d + di] = ssm.y[t * d + di] * silu(xz[t * 2 * d + d + di]);
            }
        }
        let (gq, s) = fq_rows(self.acts.get(Slot::OutProjAct), &g, d, fz(Slot::OutProjAct))?;
        if self.acts.get(Slot::OutProjAct).is_some() {
            ste.insert(Slot::OutProjAct, s);
        }
        let mut out = linear(&gq, l, d, &self.w_out, m);
        out.iter_mut().zip(u).for_each(|(o, x)| *o += x);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(BlockTape {
            l,
            u: u.to_vec(),
            uq,
            xz,
            xc,
            conv,
            ssm,
            g,
            gq,
            out,
            ste,
        })
    }

    /// Backward of [`BlockCore::forward`]; returns the gradient w.r.t. the
    /// block input and accumulates into `grads`.
    pub fn backward(&self, tape: &BlockTape, d_out: &[f64], grads: &mut BlockGrads) -> Vec<f64> {
        let BlockDims {
            d_model: m,
            d_inner: d,
            conv_width: k,
            ..
        } = self.dims;
        let l = tape.l;
        let rec = |s: Slot| tape.ste.get(&s).map_or(&[][..], Vec::as_slice);

        let mut d_u = d_out.to_vec();
        let mut g_gq = vec![0.0; l * d];
        let mut g_wout = vec![0.0; m * d];
        linear_back(d_out, &tape.gq, &self.w_out, l, d, m, &mut g_gq, &mut g_wout);
        let mut ds = std::mem::take(grads.scales.entry(Slot::OutProjAct).or_default());
        let g_g = ste_back(self.acts.get(Slot::OutProjAct), rec(Slot::OutProjAct), &g_gq, d, &mut ds);
        grads.scales.insert(Slot::OutProjAct, ds);

        let mut g_y = vec![0.0; l * d];
        let mut g_xz = vec![0.0; l * 2 * d];
        for t in 0..l {
            for di in 0..d {
                let zv = tape.xz[t * 2 * d + d + di];
                g_y[t * d + di] = g_g[t * d + di] * silu(zv);
                g_xz[t * 2 * d + d + di] = g_g[t * d + di] * tape.ssm.y[t * d + di] * silu_grad(zv);
            }
        }
        let g_xs = self.ssm.backward(&tape.ssm, &g_y, grads);
        let g_conv: Vec<f64> = g_xs.iter().zip(&tape.conv).map(|(g, &c)| g * silu_grad(c)).collect();

        let mut g_xc = vec![0.0; l * d];
        let mut g_cw = vec![0.0; d * k];
        let mut g_cb = vec![0.0; d];
        for t in 0..l {
            for di in 0..d {
                let gc = g_conv[t * d + di];
                g_cb[di] += gc;
                for j in 0..k {
                    if let Some(src) = (t + j).checked_sub(k - 1) {
                        g_cw[di * k + j] += gc * tape.xc[src * d + di];
                        g_xc[src * d + di] += gc * self.conv_w[di * k + j];
                    }
                }
            }
        }
        let mut ds = std::mem::take(grads.scales.entry(Slot::Conv1dAct).or_default());
        let g_xin = ste_back(self.acts.get(Slot::Conv1dAct), rec(Slot::Conv1dAct), &g_xc, d, &mut ds);
        grads.scales.insert(Slot::Conv1dAct, ds);
        for t in 0..l {
            g_xz[t * 2 * d..t * 2 * d + d].copy_from_slice(&g_xin[t * d..(t + 1) * d]);
        }
        let mut g_uq = vec![0.0; l * m];
        let mut g_win = vec![0.0; 2 * d * m];
        linear_back(&g_xz, &tape.uq, &self.w_in, l, m, 2 * d, &mut g_uq, &mut g_win);
        let mut ds = std::mem::take(grads.scales.entry(Slot::InProjAct).or_default());
        let g_u = ste_back(self.acts.get(Slot::InProjAct), rec(Slot::InProjAct), &g_uq, m, &mut ds);
        grads.scales.insert(Slot::InProjAct, ds);
        d_u.iter_mut().zip(&g_u).for_each(|(a, b)| *a += b);

        weight_grad(&self.weight_ste, grads, Slot::OutProjWeight, "out_proj.weight", g_wout);
        weight_grad(&self.weight_ste, grads, Slot::Conv1dWeight, "conv1d.weight", g_cw);
        weight_grad(&self.weight_ste, grads, Slot::InProjWeight, "in_proj.weight", g_win);
        add_into(grads.weights.entry("conv1d.bias").or_default(), &g_cb);
        grads.scales.retain(|_, v| !v.is_empty());
        d_u
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};

    #[test]
    fn frozen_replay_reproduces_live_pass() {
        let p = QuantParams::uniform(4, 0.1, 8).unwrap();
        for x in [-3.0, -0.37, 0.0, 0.42, 5.0] {
            let (xhat, r) = fq_one(&p, x, 0, None).unwrap();
            let (again, _) = fq_one(&p, x, 0, Some(r)).unwrap();
            assert!((xhat - again).abs() < 1e-15);
        }
    }

    #[test]
    fn ste_record_values() {
        let p = QuantParams::uniform(4, 1.0, 0).unwrap();
        let (_, r) = fq_one(&p, 100.0, 0, None).unwrap();
        assert_eq!(r, Ste { pass: false, slope: 15.0 });
        let (_, r) = fq_one(&p, 3.0, 0, None).unwrap();
        assert_eq!(r, Ste { pass: true, slope: 0.0 });
    }

    #[test]
    fn shift_decay_stays_within_one_hidden_step() {
        let dims = BlockDims::new(4, 3, 4);
        let w = MambaBlockWeights::init(dims, 5).unwrap();
        let x: Vec<f64> = normal_vec(&mut seeded(6), 12 * 3, 1.0).into_iter().map(f64::from).collect();
        let mut qa = QuantizerAssignment::disabled();
        qa.set(Slot::Abar, Some(QuantParams::ltsq(8).unwrap()));
        qa.set(Slot::H, Some(QuantParams::uniform(8, 0.01, 128).unwrap()));
        let core = SsmCore::prepare(&w.ssm, Some(&qa), true, None).unwrap();
        let tape = core.forward(&x, 12, None).unwrap();
        assert!(tape.resid.iter().any(|e| *e != 0.0));
        assert!(tape.resid.iter().all(|e| e.abs() < 0.01), "{:?}", tape.resid);
        let plain = SsmCore::prepare(&w.ssm, Some(&qa), false, None).unwrap().forward(&x, 12, None).unwrap();
        assert!(plain.resid.is_empty());
    }

    fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], eps: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += eps;
                b[i] -= eps;
                (f(&a) - f(&b)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn fp_block_input_gradient_matches_finite_difference() {
        let dims = BlockDims::new(4, 6, 3);
        let w = MambaBlockWeights::init(dims, 11).unwrap();
        let core = BlockCore::prepare(&w, None, false, None).unwrap();
        let l = 5;
        let u: Vec<f64> = normal_vec(&mut seeded(2), l * 4, 1.0).into_iter().map(f64::from).collect();
        let target: Vec<f64> = normal_vec(&mut seeded(3), l * 4, 1.0).into_iter().map(f64::from).collect();
        let loss = |u: &[f64]| -> f64 {
            let t = core.forward(u, l, None).unwrap();
            t.out.iter().zip(&target).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
        };
        let tape = core.forward(&u, l, None).unwrap();
        let d_out: Vec<f64> = tape.out.iter().zip(&target).map(|(a, b)| a - b).collect();
        let mut g = BlockGrads::default();
        let du = core.backward(&tape, &d_out, &mut g);
        let fd = finite_diff(loss, &u, 1e-6);
        for (a, b) in du.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
        assert!(g.scales.is_empty());
        assert_eq!(g.weights.len(), 9);
    }
}
