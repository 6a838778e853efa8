use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::toy::{train_toy_model, Dataset, TrainReport};
use crate::error::Result;
use crate::ptq::{build_quant, calibrate_model, RouteDecision};
use crate::quant::Route;
use crate::recon::reconstruct_model;
use crate::rng::derive_seed;
use crate::ssm::{ModelQuant, SsmClassifier};

/// A trained floating-point model with the data it was trained on.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: SsmClassifier,
    pub train: Dataset,
    pub val: Dataset,
    pub report: TrainReport,
}

/// Trains the configured toy model.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (model, report, train, val) = train_toy_model(&cfg.dataset.task, &cfg.model, &cfg.train, cfg.seed)?;
    Ok(Prepared {
        model,
        train,
        val,
        report,
    })
}

/// SHA-256 of the canonical JSON of `value`.
pub fn stage_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub hash: String,
    pub metrics: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecon {
    pub block: usize,
    pub initial_mse: f64,
    pub final_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtqReport {
    pub seed: u64,
    pub fp_accuracy: f64,
    /// After scale initialization, before reconstruction.
    pub init_accuracy: f64,
    pub accuracy: f64,
    pub routes: Vec<RouteDecision>,
    pub reconstruction: Vec<BlockRecon>,
    pub stages: Vec<StageReport>,
    pub quant: ModelQuant,
}

impl PtqReport {
    pub fn ltsq_blocks(&self) -> usize {
        self.routes.iter().filter(|r| r.route == Route::Ltsq).count()
    }
}

fn stage<T: Serialize>(name: &str, artifact: &T, metrics: serde_json::Value) -> Result<StageReport> {
    Ok(StageReport {
        stage: name.to_string(),
        hash: stage_hash(artifact)?,
        metrics,
    })
}

/// calibrate, route, init, reconstruct, eval, in that order.
pub fn run_ptq_pipeline(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<PtqReport> {
    cfg.validate()?;
    let model = &prepared.model;
    let calib_set = prepared.train.head(cfg.dataset.calib_samples)?;
    let eval = &prepared.val;
    let fp_accuracy = model.accuracy(&eval.x, &eval.labels, None)?;
    let mut stages = Vec::with_capacity(5);

    let calib = calibrate_model(model, &calib_set.x, derive_seed(cfg.seed, 10))?;
    stages.push(stage(
        "calibrate",
        &calib,
        serde_json::json!({ "samples": calib.samples, "seq_len": calib.seq_len }),
    )?);

    let (quant, routes) = if cfg.quantize {
        build_quant(model, &calib, &cfg.recipe())?
    } else {
        (ModelQuant::disabled(model.blocks.len()), Vec::new())
    };
    stages.push(stage("route", &routes, serde_json::to_value(&routes)?)?);

    let init_accuracy = model.accuracy(&eval.x, &eval.labels, Some(&quant))?;
    stages.push(stage("init", &quant, serde_json::json!({ "accuracy": init_accuracy }))?);

    let (quant, reconstruction) = if cfg.quantize && cfg.reconstruct {
        let mut rc = cfg.recon.clone();
        rc.seed = derive_seed(cfg.seed, rc.seed.wrapping_add(11));
        let (q, results) = reconstruct_model(model, &quant, &calib_set.x, &rc)?;
        let blocks = results
            .iter()
            .enumerate()
            .map(|(block, r)| BlockRecon {
                block,
                initial_mse: r.initial_loss,
                final_mse: r.final_loss,
            })
            .collect();
        (q, blocks)
    } else {
        (quant, Vec::new())
    };
    stages.push(stage("reconstruct", &quant, serde_json::to_value(&reconstruction)?)?);

    let accuracy = model.accuracy(&eval.x, &eval.labels, Some(&quant))?;
    stages.push(stage(
        "eval",
        &(fp_accuracy, accuracy),
        serde_json::json!({ "fp_accuracy": fp_accuracy, "accuracy": accuracy }),
    )?);

    Ok(PtqReport {
        seed: cfg.seed,
        fp_accuracy,
        init_accuracy,
        accuracy,
        routes,
        reconstruction,
        stages,
        quant,
    })
}

/// Overrides applied to a base config at one sweep point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepPoint {
    pub label: String,
    pub alpha: Option<f64>,
    pub lambda: Option<usize>,
    pub weight_bits: Option<u8>,
    pub act_bits: Option<u8>,
    pub ltsq: Option<bool>,
    pub tgq: Option<bool>,
    pub initializer: Option<crate::calib::Initializer>,
}

impl SweepPoint {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.weight_bits {
            c.weight_bits = v;
        }
        if let Some(v) = self.act_bits {
            c.act_bits = v;
        }
        if let Some(v) = self.ltsq {
            c.ltsq = v;
        }
        if let Some(v) = self.tgq {
            c.tgq = v;
        }
        if let Some(v) = self.initializer {
            c.initializer = v;
        }
        c
    }
}

/// The standard component ablation: uniform baseline, each method alone, both.
pub fn ablation_points() -> Vec<SweepPoint> {
    [("uniform", false, false), ("ltsq", true, false), ("tgq", false, true), ("ltsq+tgq", true, true)]
        .into_iter()
        .map(|(label, ltsq, tgq)| SweepPoint {
            label: label.to_string(),
            ltsq: Some(ltsq),
            tgq: Some(tgq),
            ..SweepPoint::default()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub report: PtqReport,
}

/// Runs every point against the same trained model, in parallel.
pub fn sweep(base: &ExperimentConfig, prepared: &Prepared, points: &[SweepPoint]) -> Result<Vec<SweepRow>> {
    points
        .par_iter()
        .map(|p| {
            let report = run_ptq_pipeline(&p.apply(base), prepared)?;
            Ok(SweepRow {
                point: p.clone(),
                report,
            })
        })
        .collect()
}
