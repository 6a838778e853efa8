mod common;

use qssm::recon::{reconstruct_block, ReconConfig};
use qssm::ssm::QuantizerAssignment;

fn cfg(lr: f64) -> ReconConfig {
    ReconConfig {
        iterations: 40,
        lr,
        eval_every: 5,
        ..ReconConfig::default()
    }
}

fn params(qa: &QuantizerAssignment) -> Vec<(Vec<f64>, Vec<i32>)> {
    qa.slots.values().flatten().map(|p| (p.scales.clone(), p.zero_points.clone())).collect()
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let case = common::block_case(11);
    let r = reconstruct_block(&case.block, &case.qa, &case.x, &case.target, case.use_shift, &cfg(0.0)).unwrap();
    assert_eq!(params(&r.assignment), params(&case.qa));
    assert_eq!(r.final_loss, r.initial_loss);
}

#[test]
fn runs_are_bit_reproducible() {
    let case = common::block_case(12);
    let run = || reconstruct_block(&case.block, &case.qa, &case.x, &case.target, case.use_shift, &cfg(1e-2)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.assignment, b.assignment);
    assert_eq!(a.curve, b.curve);
}

#[test]
fn zero_points_stay_and_scales_stay_positive() {
    for seed in 20..26 {
        let case = common::block_case(seed);
        let r = reconstruct_block(&case.block, &case.qa, &case.x, &case.target, case.use_shift, &cfg(5e-2)).unwrap();
        for ((s_new, z_new), (_, z_old)) in params(&r.assignment).iter().zip(params(&case.qa)) {
            assert_eq!(z_new, &z_old);
            assert!(s_new.iter().all(|&s| s >= 1e-8));
        }
        assert!(r.final_loss <= r.initial_loss);
        assert!(r.best_so_far.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r.curve.len(), 40);
    }
}

#[test]
fn bad_configs_are_rejected() {
    let case = common::block_case(13);
    for bad in [
        ReconConfig { lr: f64::NAN, ..cfg(0.0) },
        ReconConfig { iterations: 0, ..cfg(0.0) },
        ReconConfig { betas: (1.0, 0.9), ..cfg(0.0) },
    ] {
        assert!(reconstruct_block(&case.block, &case.qa, &case.x, &case.target, case.use_shift, &bad).is_err());
    }
}
