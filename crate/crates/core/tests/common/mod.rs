#![allow(dead_code)]

use std::collections::BTreeMap;

use qssm::calib::{choose_range, init_params, init_tgq, BitPolicy, CalibStats, Initializer};
use qssm::harness::OutlierStream;
use qssm::ptq::{block_assignment, calibrate_block, QuantRecipe};
use qssm::quant::{ltsq_fake_quant, num_groups, tgq_fake_quant, uniform_fake_quant, QuantParams};
use qssm::recon::{backward_block, finite_diff_grads, scales_of, QuantTrace};
use qssm::rng::{normal_vec, seeded};
use qssm::ssm::{mamba_block_forward, BlockDims, MambaBlockWeights, QuantizerAssignment, SsmParams};
use qssm::Tensor;
use rand::Rng;

/// A small random block with calibrated quantizers and its FP targets.
pub struct BlockCase {
    pub block: MambaBlockWeights,
    pub qa: QuantizerAssignment,
    pub x: Tensor,
    pub target: Tensor,
    pub use_shift: bool,
}

pub fn block_case(seed: u64) -> BlockCase {
    let mut rng = seeded(seed);
    let mut dims = BlockDims::new(rng.random_range(2..=5), rng.random_range(1..=4), rng.random_range(1..=3));
    dims.conv_width = rng.random_range(1..=4);
    let block = MambaBlockWeights::init(dims, seed ^ 0x5eed).unwrap();
    let (b, l) = (rng.random_range(1..=2), rng.random_range(2..=8));
    let x = Tensor::new(vec![b, l, dims.d_model], normal_vec(&mut rng, b * l * dims.d_model, 1.0)).unwrap();
    let calib = calibrate_block(&block, &x, seed).unwrap();
    let recipe = QuantRecipe {
        policy: BitPolicy::new(rng.random_range(4..=8), rng.random_range(3..=8)),
        initializer: [Initializer::Minmax, Initializer::Percentile, Initializer::Omse][rng.random_range(0..3)],
        alpha: rng.random_range(0.0..1.0),
        lambda: rng.random_range(1..=4),
        ltsq: rng.random(),
        tgq: rng.random(),
        use_shift: rng.random(),
    };
    let (qa, _) = block_assignment(0, &block, &calib, &recipe).unwrap();
    let target = mamba_block_forward(&x, &block, None).unwrap();
    BlockCase {
        block,
        qa,
        x,
        target,
        use_shift: recipe.use_shift,
    }
}

/// Relative disagreement `max|a - f| / max|f|` between analytic and
/// finite-difference scale gradients of one case, and the number of scales.
pub fn gradient_agreement(case: &BlockCase) -> (f64, usize) {
    let trace = QuantTrace::record(&case.x, &case.block, &case.qa, case.use_shift).unwrap();
    let analytic = backward_block(&case.target, &trace).unwrap();
    let scales: BTreeMap<String, Vec<f64>> = scales_of(&case.qa);
    let fd = finite_diff_grads(
        |s| trace.frozen_loss(&case.block, &case.qa, s, &case.target),
        &scales,
        1e-4,
    )
    .unwrap();
    let (mut diff, mut size, mut n) = (0.0f64, 0.0f64, 0);
    for (name, f) in &fd.grads {
        let a = analytic.get(name).unwrap_or(&[]);
        for (i, &fv) in f.iter().enumerate() {
            let av = a.get(i).copied().unwrap_or(0.0);
            diff = diff.max((av - fv).abs());
            size = size.max(fv.abs());
            n += 1;
        }
    }
    let err = if size == 0.0 { diff } else { diff / size };
    (err, n)
}

fn quant_error(x: &Tensor, p: &QuantParams) -> f64 {
    let (_, xhat) = uniform_fake_quant(x, p).unwrap();
    qssm::tensor::mse(x, &xhat).unwrap()
}

/// MSE of tensor-wise uniform and of λ-grouped quantization of `h`
/// `(L, D, N)`, both Percentile-initialized from `h` itself.
pub fn tgq_vs_tensor_mse(h: &Tensor, lambda: usize, bits: u8) -> (f64, f64) {
    let l = h.shape()[0];
    let per = h.len() / l;
    let tensor = init_params(&CalibStats::from_values(h.data(), 0).unwrap(), Initializer::Percentile, bits).unwrap();
    let groups: Vec<CalibStats> = (0..num_groups(l, lambda))
        .map(|g| {
            let lo = g * lambda;
            let hi = if g + 1 == num_groups(l, lambda) { l } else { lo + lambda };
            CalibStats::from_values(&h.data()[lo * per..hi * per], 0).unwrap()
        })
        .collect();
    let grouped = init_tgq(&groups, Initializer::Percentile, bits, lambda, l).unwrap();
    let (_, hhat) = tgq_fake_quant(h, &grouped).unwrap();
    (qssm::tensor::mse(h, &hhat).unwrap(), quant_error(h, &tensor))
}

/// MSE of LtSQ and of Percentile-initialized uniform quantization of `a`.
pub fn ltsq_vs_uniform_mse(a: &Tensor, bits: u8) -> (f64, f64) {
    let (_, ahat) = ltsq_fake_quant(a, bits).unwrap();
    let p = init_params(&CalibStats::from_values(a.data(), 0).unwrap(), Initializer::Percentile, bits).unwrap();
    (qssm::tensor::mse(a, &ahat).unwrap(), quant_error(a, &p))
}

pub struct InitComparison {
    pub percentile_dense: f64,
    pub omse_dense: f64,
    pub minmax_dense: f64,
    pub percentile_ub: f64,
    pub omse_ub: f64,
}

/// Quantization error of each initializer restricted to the dense region.
pub fn compare_initializers(stream: &OutlierStream, bits: u8) -> InitComparison {
    let stats = CalibStats::from_values(stream.values.data(), 0).unwrap();
    let dense: Vec<f32> = stream.values.data().iter().copied().filter(|&v| f64::from(v) < stream.dense_max).collect();
    let dense = Tensor::from_vec(dense).unwrap();
    let pick = |i| choose_range(&stats, i, bits).unwrap();
    let (p, o, m) = (pick(Initializer::Percentile), pick(Initializer::Omse), pick(Initializer::Minmax));
    InitComparison {
        percentile_dense: quant_error(&dense, &p.params),
        omse_dense: quant_error(&dense, &o.params),
        minmax_dense: quant_error(&dense, &m.params),
        percentile_ub: p.ub,
        omse_ub: o.ub,
    }
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// The recurrence written out directly from the parameter tensors.
pub fn direct_scan(x: &[f32], b: usize, l: usize, p: &SsmParams) -> Vec<f64> {
    let (d, n, r) = (p.d_inner(), p.d_state(), p.dt_rank());
    let wx = p.w_x.to_f64();
    let wd = p.w_delta.to_f64();
    let bd = p.b_delta.to_f64();
    let a = p.a.to_f64();
    let dk = p.d_skip.to_f64();
    let mut out = Vec::new();
    for bi in 0..b {
        let mut h = vec![0.0; d * n];
        for t in 0..l {
            let xt: Vec<f64> = (0..d).map(|i| f64::from(x[(bi * l + t) * d + i])).collect();
            let proj: Vec<f64> = (0..r + 2 * n)
                .map(|row| (0..d).map(|i| wx[row * d + i] * xt[i]).sum())
                .collect();
            for i in 0..d {
                let pre: f64 = bd[i] + (0..r).map(|k| wd[i * r + k] * proj[k]).sum::<f64>();
                let delta = softplus(pre);
                let mut y = dk[i] * xt[i];
                for j in 0..n {
                    let ab = (delta * a[i * n + j]).exp();
                    h[i * n + j] = ab * h[i * n + j] + delta * proj[r + j] * xt[i];
                    y += proj[r + n + j] * h[i * n + j];
                }
                out.push(y);
            }
        }
    }
    out
}

pub fn ssm_instance(seed: u64, d: usize, n: usize) -> SsmParams {
    SsmParams::init(&BlockDims::new(4, d, n), &mut seeded(seed), 1e-3, 0.1).unwrap()
}
