use rayon::prelude::*;

use super::assignment::QuantizerAssignment;
use super::engine::{BlockCore, SsmCore, SsmTape};
use super::params::{MambaBlockWeights, SsmParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `abar = exp(delta * A)` and `bbar = delta * B`.
///
/// `delta` is `(..., D)`, `A` is `(D, N)` and `B` is `(..., N)` with the same
/// leading dimensions; both outputs are `(..., D, N)`.
pub fn discretize(delta: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let [d, n] = *a.shape() else {
        return Err(Error::ShapeMismatch(format!("A must be (D, N), got {:?}", a.shape())));
    };
    let lead = &delta.shape()[..delta.shape().len() - 1];
    if delta.shape().last() != Some(&d) || b.shape().last() != Some(&n) || &b.shape()[..b.shape().len() - 1] != lead {
        return Err(Error::ShapeMismatch(format!(
            "delta {:?}, A {:?}, B {:?}",
            delta.shape(),
            a.shape(),
            b.shape()
        )));
    }
    if let Some(v) = delta.data().iter().find(|&&v| v <= 0.0) {
        return Err(Error::InvalidParams(format!("delta must be positive, got {v}")));
    }
    if let Some(v) = a.data().iter().find(|&&v| v >= 0.0) {
        return Err(Error::InvalidParams(format!("A must be negative, got {v}")));
    }
    let rows: usize = lead.iter().product();
    let mut abar = Vec::with_capacity(rows * d * n);
    let mut bbar = Vec::with_capacity(rows * d * n);
    for r in 0..rows {
        for di in 0..d {
            let dt = f64::from(delta.data()[r * d + di]);
            for ni in 0..n {
                abar.push((dt * f64::from(a.data()[di * n + ni])).exp() as f32);
                bbar.push((dt * f64::from(b.data()[r * n + ni])) as f32);
            }
        }
    }
    let mut shape = lead.to_vec();
    shape.extend([d, n]);
    Ok((Tensor::new(shape.clone(), abar)?, Tensor::new(shape, bbar)?))
}

/// The bare recurrence on already discretized inputs of one sequence:
/// `h_t = abar_t * h_{t-1} + bbar_t * x_t`, `y_t = C_t h_t + D x_t`, `h_0 = 0`.
///
/// `abar`, `bbar`: `(L, D, N)`; `x`: `(L, D)`; `c`: `(L, N)`; `d_skip`: `(D,)`.
pub fn scan_recurrence(abar: &Tensor, bbar: &Tensor, x: &Tensor, c: &Tensor, d_skip: &Tensor) -> Result<Tensor> {
    let [l, d, n] = *abar.shape() else {
        return Err(Error::ShapeMismatch(format!("abar must be (L, D, N), got {:?}", abar.shape())));
    };
    if bbar.shape() != abar.shape() || x.shape() != [l, d] || c.shape() != [l, n] || d_skip.shape() != [d] {
        return Err(Error::ShapeMismatch(format!(
            "abar {:?}, bbar {:?}, x {:?}, C {:?}, D {:?}",
            abar.shape(),
            bbar.shape(),
            x.shape(),
            c.shape(),
            d_skip.shape()
        )));
    }
    let (ab, bb, xs, cs, ds) = (abar.to_f64(), bbar.to_f64(), x.to_f64(), c.to_f64(), d_skip.to_f64());
    let mut h = vec![0.0; d * n];
    let mut y = Vec::with_capacity(l * d);
    for t in 0..l {
        for di in 0..d {
            let xt = xs[t * d + di];
            let mut acc = ds[di] * xt;
            for ni in 0..n {
                let i = (t * d + di) * n + ni;
                let hv = &mut h[di * n + ni];
                *hv = ab[i] * *hv + bb[i] * xt;
                acc += cs[t * n + ni] * *hv;
            }
            y.push(acc);
        }
    }
    Tensor::from_f64(vec![l, d], &y)
}

/// Activations recorded by [`ssm_scan_fp`], each with a leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmTrace {
    /// `(B, L, D)`
    pub delta: Tensor,
    /// `(B, L, N)`
    pub b: Tensor,
    /// `(B, L, N)`
    pub c: Tensor,
    /// `(B, L, D, N)`
    pub abar: Tensor,
    /// `(B, L, D, N)`
    pub h: Tensor,
}

/// Splits `(B, L, W)` or `(L, W)` into `(B, L)`.
fn batch_len(x: &Tensor, width: usize, what: &str) -> Result<(usize, usize, bool)> {
    match *x.shape() {
        [b, l, w] if w == width => Ok((b, l, true)),
        [l, w] if w == width => Ok((1, l, false)),
        _ => Err(Error::ShapeMismatch(format!(
            "{what} must be (B, L, {width}) or (L, {width}), got {:?}",
            x.shape()
        ))),
    }
}

fn run_ssm(x: &Tensor, core: &SsmCore<'_>) -> Result<(Vec<SsmTape>, usize, usize, bool)> {
    let (b, l, batched) = batch_len(x, core.d, "x")?;
    let xs = x.to_f64();
    let step = l * core.d;
    let tapes = xs
        .par_chunks(step)
        .map(|seq| core.forward(seq, l, None))
        .collect::<Result<Vec<_>>>()?;
    Ok((tapes, b, l, batched))
}

fn stack(tapes: &[SsmTape], batched: bool, inner: &[usize], f: impl Fn(&SsmTape) -> &Vec<f64>) -> Result<Tensor> {
    let data: Vec<f64> = tapes.iter().flat_map(|t| f(t).iter().copied()).collect();
    let mut shape = if batched { vec![tapes.len()] } else { vec![] };
    shape.extend_from_slice(inner);
    Tensor::from_f64(shape, &data)
}

/// Floating-point selective scan over `(B, L, D)` or `(L, D)` inputs.
pub fn ssm_scan_fp(x: &Tensor, p: &SsmParams, record_trace: bool) -> Result<(Tensor, Option<SsmTrace>)> {
    let core = SsmCore::prepare(p, None, false, None)?;
    let (tapes, b, l, batched) = run_ssm(x, &core)?;
    let (d, n) = (core.d, core.n);
    let y = stack(&tapes, batched, &[l, d], |t| &t.y)?;
    let trace = if record_trace {
        let lead = |inner: &[usize]| {
            let mut s = vec![b, l];
            s.extend_from_slice(inner);
            s
        };
        let cat = |f: &dyn Fn(&SsmTape) -> Vec<f64>, shape: Vec<usize>| -> Result<Tensor> {
            let data: Vec<f64> = tapes.iter().flat_map(f).collect();
            Tensor::from_f64(shape, &data)
        };
        Some(SsmTrace {
            delta: cat(&|t| t.delta.clone(), lead(&[d]))?,
            b: cat(&|t| t.bq.clone(), lead(&[n]))?,
            c: cat(&|t| t.cq.clone(), lead(&[n]))?,
            abar: cat(&|t| t.abar.clone(), lead(&[d, n]))?,
            h: cat(&|t| t.h.clone(), lead(&[d, n]))?,
        })
    } else {
        None
    };
    Ok((y, trace))
}

/// Fake-quantized selective scan. Block-level slots of `qa` are ignored.
///
/// With `use_shift`, an LtSQ-routed decay and a quantized hidden state, the
/// decay product is evaluated on integer codes with [`crate::quant::shift_decay`].
pub fn ssm_scan_quant(
    x: &Tensor,
    p: &SsmParams,
    qa: &QuantizerAssignment,
    use_shift: bool,
) -> Result<Tensor> {
    qa.validate()?;
    let core = SsmCore::prepare(p, Some(qa), use_shift, None)?;
    let (tapes, _, l, batched) = run_ssm(x, &core)?;
    stack(&tapes, batched, &[l, core.d], |t| &t.y)
}

/// One Mamba block over `(B, L, M)` or `(L, M)` inputs. `qa = None` runs in
/// floating point; the shift decay path is used whenever it applies.
pub fn mamba_block_forward(x: &Tensor, w: &MambaBlockWeights, qa: Option<&QuantizerAssignment>) -> Result<Tensor> {
    mamba_block_forward_with(x, w, qa, true)
}

pub fn mamba_block_forward_with(
    x: &Tensor,
    w: &MambaBlockWeights,
    qa: Option<&QuantizerAssignment>,
    use_shift: bool,
) -> Result<Tensor> {
    let core = BlockCore::prepare(w, qa, use_shift, None)?;
    let m = w.dims.d_model;
    let (_, l, batched) = batch_len(x, m, "x")?;
    let xs = x.to_f64();
    let outs = xs
        .par_chunks(l * m)
        .map(|seq| core.forward(seq, l, None).map(|t| t.out))
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<f64> = outs.concat();
    let mut shape = if batched { vec![outs.len()] } else { vec![] };
    shape.extend([l, m]);
    Tensor::from_f64(shape, &data)
}
