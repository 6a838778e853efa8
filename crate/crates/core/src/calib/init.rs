use serde::{Deserialize, Serialize};

use super::CalibStats;
use crate::error::{Error, Result};
use crate::quant::{init_scale_zero, uniform_code, uniform_dequant, QuantParams};

/// How a quantization range is chosen from calibration statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Initializer {
    Minmax,
    Percentile,
    Omse,
}

impl std::str::FromStr for Initializer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "minmax" => Ok(Self::Minmax),
            "percentile" => Ok(Self::Percentile),
            "omse" => Ok(Self::Omse),
            other => Err(Error::Config(format!(
                "unknown initializer `{other}` (expected minmax, percentile or omse)"
            ))),
        }
    }
}

pub const DEFAULT_P_LO: f64 = 1.0;
pub const DEFAULT_P_HI: f64 = 99.0;

/// A chosen range and the quantizer it produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeChoice {
    pub lb: f64,
    pub ub: f64,
    pub params: QuantParams,
}

/// Result of the clip-ratio search.
#[derive(Debug, Clone, PartialEq)]
pub struct OmseChoice {
    pub clip_ratio: f64,
    pub range: RangeChoice,
    pub mse: f64,
}

fn require_nonempty(stats: &CalibStats) -> Result<()> {
    if stats.is_empty() {
        Err(Error::EmptyInput)
    } else {
        Ok(())
    }
}

fn range_choice(lb: f64, ub: f64, bits: u8) -> Result<RangeChoice> {
    let (s, z) = init_scale_zero(lb, ub, bits)?;
    Ok(RangeChoice {
        lb,
        ub,
        params: QuantParams::uniform(bits, s, z)?,
    })
}

pub fn minmax_range(stats: &CalibStats, bits: u8) -> Result<RangeChoice> {
    require_nonempty(stats)?;
    range_choice(stats.min, stats.max, bits)
}

pub fn percentile_range(stats: &CalibStats, bits: u8, p_lo: f64, p_hi: f64) -> Result<RangeChoice> {
    require_nonempty(stats)?;
    range_choice(stats.percentile(p_lo)?, stats.percentile(p_hi)?, bits)
}

/// Mean squared fake-quantization error of `values` under `p`.
pub fn quant_mse(values: &[f32], p: &QuantParams) -> f64 {
    let (s, z) = (p.scales[0], p.zero_points[0]);
    let sum: f64 = values
        .iter()
        .map(|&v| {
            let x = f64::from(v);
            let e = uniform_dequant(uniform_code(x, s, z, p.bits), s, z) - x;
            e * e
        })
        .sum();
    sum / values.len().max(1) as f64
}

/// Grid search over clip ratios `c = k/100, k = 1..=100` of the range
/// `[c·min, c·max]`, minimizing the reservoir MSE. Ties keep the smaller `c`.
pub fn omse_search(stats: &CalibStats, bits: u8) -> Result<OmseChoice> {
    require_nonempty(stats)?;
    let mut best: Option<OmseChoice> = None;
    for k in 1..=100u32 {
        let c = f64::from(k) / 100.0;
        let Ok(range) = range_choice(c * stats.min, c * stats.max, bits) else {
            continue;
        };
        let mse = quant_mse(stats.reservoir(), &range.params);
        if best.as_ref().is_none_or(|b| mse < b.mse) {
            best = Some(OmseChoice {
                clip_ratio: c,
                range,
                mse,
            });
        }
    }
    best.ok_or(Error::DegenerateRange {
        lb: stats.min,
        ub: stats.max,
    })
}

pub fn init_minmax(stats: &CalibStats, bits: u8) -> Result<QuantParams> {
    Ok(minmax_range(stats, bits)?.params)
}

pub fn init_percentile(stats: &CalibStats, bits: u8, p_lo: f64, p_hi: f64) -> Result<QuantParams> {
    Ok(percentile_range(stats, bits, p_lo, p_hi)?.params)
}

pub fn init_omse(stats: &CalibStats, bits: u8) -> Result<QuantParams> {
    Ok(omse_search(stats, bits)?.range.params)
}

pub fn choose_range(stats: &CalibStats, init: Initializer, bits: u8) -> Result<RangeChoice> {
    match init {
        Initializer::Minmax => minmax_range(stats, bits),
        Initializer::Percentile => percentile_range(stats, bits, DEFAULT_P_LO, DEFAULT_P_HI),
        Initializer::Omse => Ok(omse_search(stats, bits)?.range),
    }
}

pub fn init_params(stats: &CalibStats, init: Initializer, bits: u8) -> Result<QuantParams> {
    Ok(choose_range(stats, init, bits)?.params)
}

/// Temporal group quantizer with one range per group of time steps.
pub fn init_tgq(
    groups: &[CalibStats],
    init: Initializer,
    bits: u8,
    group_length: usize,
    seq_length: usize,
) -> Result<QuantParams> {
    let mut scales = Vec::with_capacity(groups.len());
    let mut zero_points = Vec::with_capacity(groups.len());
    for g in groups {
        let p = init_params(g, init, bits)?;
        scales.push(p.scales[0]);
        zero_points.push(p.zero_points[0]);
    }
    QuantParams::tgq(bits, scales, zero_points, group_length, seq_length)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::qmax;
    use crate::rng::{normal, seeded};
    use rand::Rng;

    fn stats(values: &[f32]) -> CalibStats {
        let mut s = CalibStats::with_seed(0);
        s.observe_values(values).unwrap();
        s
    }

    #[test]
    fn minmax_examples() {
        let p = init_minmax(&stats(&[0.0, 7.0, 15.0]), 4).unwrap();
        assert_eq!((p.scales[0], p.zero_points[0]), (1.0, 0));
        let p = init_minmax(&stats(&[-1.0, 0.3, 1.0]), 8).unwrap();
        assert!((p.scales[0] - 2.0 / 255.0).abs() < 1e-12);
        assert_eq!(p.zero_points[0], 128);
        assert!(matches!(
            init_minmax(&stats(&[2.0, 2.0]), 4),
            Err(Error::DegenerateRange { .. })
        ));
        assert!(init_minmax(&CalibStats::with_seed(0), 4).is_err());
    }

    fn outlier_stream() -> Vec<f32> {
        let mut rng = seeded(21);
        let mut v: Vec<f32> = (0..10_000).map(|_| rng.random::<f32>()).collect();
        v[5000] = 100.0;
        v
    }

    #[test]
    fn minmax_dominated_by_outlier() {
        let p = init_minmax(&stats(&outlier_stream()), 4).unwrap();
        assert!((p.scales[0] - 100.0 / 15.0).abs() < 1e-3, "{}", p.scales[0]);
    }

    #[test]
    fn percentile_examples() {
        let grid: Vec<f32> = (0..=100).map(|i| i as f32).collect();
        let r = percentile_range(&stats(&grid), 8, 1.0, 99.0).unwrap();
        assert!((r.lb - 1.0).abs() < 1e-9 && (r.ub - 99.0).abs() < 1e-9);

        assert!(matches!(
            init_percentile(&stats(&[4.0; 50]), 4, 1.0, 99.0),
            Err(Error::DegenerateRange { .. })
        ));

        let r = percentile_range(&stats(&outlier_stream()), 4, 1.0, 99.0).unwrap();
        assert!((r.ub - 1.0).abs() < 0.02, "{}", r.ub);
        assert!((r.params.scales[0] - 1.0 / 15.0).abs() < 0.002);
    }

    #[test]
    fn omse_exact_grid_picks_full_range() {
        let b = 4;
        let grid: Vec<f32> = (0..=qmax(b)).map(|k| k as f32 / qmax(b) as f32).collect();
        let c = omse_search(&stats(&grid), b).unwrap();
        assert_eq!(c.clip_ratio, 1.0);
        assert!(c.mse < 1e-14, "{}", c.mse);
    }

    #[test]
    fn omse_no_worse_than_minmax_on_gaussian() {
        let mut rng = seeded(2);
        let v: Vec<f32> = (0..20_000).map(|_| normal(&mut rng) as f32).collect();
        let s = stats(&v);
        let c = omse_search(&s, 8).unwrap();
        assert!((0.01..=1.0).contains(&c.clip_ratio));
        let mm = quant_mse(s.reservoir(), &init_minmax(&s, 8).unwrap());
        assert!(c.mse <= mm);
    }

    #[test]
    fn omse_stretched_by_outliers() {
        let mut rng = seeded(4);
        let n = 65_536;
        let mut v: Vec<f32> = (0..n).map(|_| normal(&mut rng) as f32).collect();
        let mut dense = vec![true; n];
        for i in (0..n).step_by(1000) {
            v[i] = 50.0;
            dense[i] = false;
        }
        let s = stats(&v);
        let dense_vals: Vec<f32> = v.iter().zip(&dense).filter(|(_, d)| **d).map(|(x, _)| *x).collect();
        let om = omse_search(&s, 4).unwrap();
        let pc = percentile_range(&s, 4, 1.0, 99.0).unwrap();
        assert!(om.range.ub > pc.ub);
        assert!(quant_mse(&dense_vals, &om.range.params) > quant_mse(&dense_vals, &pc.params));
    }

    #[test]
    fn tgq_init_builds_one_pair_per_group() {
        let g: Vec<CalibStats> = (1..=3).map(|m| stats(&[-(m as f32), m as f32])).collect();
        let p = init_tgq(&g, Initializer::Minmax, 4, 2, 6).unwrap();
        assert_eq!(p.scales.len(), 3);
        assert!(p.scales.windows(2).all(|w| w[0] < w[1]));
        assert!(init_tgq(&g, Initializer::Minmax, 4, 2, 8).is_err());
    }

    #[test]
    fn initializer_parses() {
        assert_eq!("OMSE".parse::<Initializer>().unwrap(), Initializer::Omse);
        assert!("kl".parse::<Initializer>().is_err());
    }
}
