//! Activation distribution exports: decay medians and routes, per-step
//! hidden-state quartiles, histograms.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calib::CalibStats;
use crate::error::{Error, Result};
use crate::ptq::calibrate_model;
use crate::quant::{route_for_median, Route};
use crate::ssm::{Slot, SsmClassifier};
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub t: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Equal-width bins over `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn of(values: &[f32], bins: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if bins == 0 {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        let lo = values.iter().fold(f64::INFINITY, |a, &v| a.min(f64::from(v)));
        let hi = values.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(f64::from(v)));
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0u64; bins];
        for &v in values {
            let i = if width > 0.0 {
                (((f64::from(v) - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[i] += 1;
        }
        Ok(Self { lo, hi, counts })
    }

    pub fn edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + w * i as f64, self.lo + w * (i + 1) as f64)
    }
}

/// One row per time step; min and max are exact, quartiles come from the
/// step's reservoir.
pub fn h_step_summaries(steps: &[CalibStats]) -> Result<Vec<StepSummary>> {
    steps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let sum = s.summary()?;
            Ok(StepSummary {
                t,
                min: sum.min,
                q1: sum.p25,
                median: sum.median,
                q3: sum.p75,
                max: sum.max,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbarSummary {
    pub median: f64,
    pub route: Route,
}

pub fn abar_summary(stats: &CalibStats, alpha: f64) -> Result<AbarSummary> {
    let median = stats.median()?;
    Ok(AbarSummary {
        median,
        route: route_for_median(median, alpha),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDistributions {
    pub block: usize,
    pub abar: AbarSummary,
    pub h_steps: Vec<StepSummary>,
    pub abar_hist: Histogram,
    pub h_hist: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub samples: usize,
    pub alpha: f64,
    pub blocks: Vec<BlockDistributions>,
}

/// Forwards `x` `(B, L, C)` through the floating-point model and summarizes
/// the decay and hidden-state distributions of every SSM.
pub fn analyze_distributions(model: &SsmClassifier, x: &Tensor, alpha: f64, seed: u64) -> Result<DistributionReport> {
    let calib = calibrate_model(model, x, seed)?;
    let blocks = calib
        .blocks
        .iter()
        .enumerate()
        .map(|(block, bc)| {
            let abar = bc.get(Slot::Abar)?;
            let h = bc.h_all()?;
            Ok(BlockDistributions {
                block,
                abar: abar_summary(&abar, alpha)?,
                h_steps: h_step_summaries(&bc.h_steps)?,
                abar_hist: Histogram::of(abar.reservoir(), HISTOGRAM_BINS)?,
                h_hist: Histogram::of(h.reservoir(), HISTOGRAM_BINS)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DistributionReport {
        samples: calib.samples,
        alpha,
        blocks,
    })
}

fn write_text(path: PathBuf, text: &str) -> Result<PathBuf> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `distributions.json` plus `routes.csv`, `h_steps.csv`,
/// `abar_hist.csv` and `h_hist.csv` into `dir`.
pub fn write_distribution_report(report: &DistributionReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut routes = String::from("block,abar_median,route\n");
    let mut steps = String::from("block,t,min,q1,median,q3,max\n");
    let mut abar_hist = String::from("block,bin_lo,bin_hi,count\n");
    let mut h_hist = abar_hist.clone();
    for b in &report.blocks {
        let route = serde_json::to_value(b.abar.route)?;
        let _ = writeln!(routes, "{},{},{}", b.block, b.abar.median, route.as_str().unwrap_or_default());
        for s in &b.h_steps {
            let _ = writeln!(steps, "{},{},{},{},{},{},{}", b.block, s.t, s.min, s.q1, s.median, s.q3, s.max);
        }
        for (hist, out) in [(&b.abar_hist, &mut abar_hist), (&b.h_hist, &mut h_hist)] {
            for (i, c) in hist.counts.iter().enumerate() {
                let (lo, hi) = hist.edges(i);
                let _ = writeln!(out, "{},{lo},{hi},{c}", b.block);
            }
        }
    }
    Ok(vec![
        write_text(dir.join("distributions.json"), &serde_json::to_string_pretty(report)?)?,
        write_text(dir.join("routes.csv"), &routes)?,
        write_text(dir.join("h_steps.csv"), &steps)?,
        write_text(dir.join("abar_hist.csv"), &abar_hist)?,
        write_text(dir.join("h_hist.csv"), &h_hist)?,
    ])
}
