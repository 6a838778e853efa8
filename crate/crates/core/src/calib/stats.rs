use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{bounded, splitmix64};
use crate::tensor::{percentile_sorted, Tensor};

/// Running statistics of one calibrated tensor.
///
/// `min`/`max` are exact over everything observed; percentiles and the
/// median come from a uniform reservoir sample (Algorithm R) whose
/// replacement draws are a SplitMix64 hash of `(seed, index)`, so the
/// sample depends only on the seed and the stream contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibStats {
    pub min: f64,
    pub max: f64,
    pub count: u64,
    pub capacity: usize,
    pub seed: u64,
    reservoir: Vec<f32>,
}

/// The scalar summary written next to full statistics dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub min: f64,
    pub max: f64,
    pub count: u64,
    pub retained: usize,
    pub p01: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub p99: f64,
}

impl CalibStats {
    pub const DEFAULT_CAPACITY: usize = 65_536;

    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            min: 0.0,
            max: 0.0,
            count: 0,
            capacity: capacity.max(1),
            seed,
            reservoir: Vec::new(),
        }
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(Self::DEFAULT_CAPACITY, seed)
    }

    /// Statistics of a whole tensor, e.g. a weight.
    pub fn from_values(values: &[f32], seed: u64) -> Result<Self> {
        let mut s = Self::new(values.len().max(Self::DEFAULT_CAPACITY), seed);
        s.observe_values(values)?;
        Ok(s)
    }

    pub fn observe(&mut self, batch: &Tensor) -> Result<()> {
        self.observe_values(batch.data())
    }

    pub fn observe_values(&mut self, batch: &[f32]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyInput);
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        for &v in batch {
            self.push(v);
        }
        Ok(())
    }

    /// `f64` variant used by the model tracer.
    pub fn observe_f64(&mut self, batch: &[f64]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyInput);
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        for &v in batch {
            self.push(v as f32);
        }
        Ok(())
    }

    fn push(&mut self, v: f32) {
        let x = f64::from(v);
        if self.count == 0 {
            self.min = x;
            self.max = x;
        } else {
            self.min = self.min.min(x);
            self.max = self.max.max(x);
        }
        let index = self.count;
        self.count += 1;
        if self.reservoir.len() < self.capacity {
            self.reservoir.push(v);
        } else {
            let j = bounded(splitmix64(self.seed ^ splitmix64(index)), index + 1) as usize;
            if j < self.capacity {
                self.reservoir[j] = v;
            }
        }
    }

    /// Statistics of the concatenation of several streams.
    ///
    /// The merged reservoir is the union of the parts' reservoirs, which is a
    /// uniform sample when every part saw the same number of values (as the
    /// per-time-step statistics of a hidden state do).
    pub fn merged(parts: &[&CalibStats]) -> Result<Self> {
        let first = parts.iter().find(|p| !p.is_empty()).ok_or(Error::EmptyInput)?;
        let mut out = Self::new(parts.iter().map(|p| p.reservoir.len()).sum(), first.seed);
        out.min = first.min;
        out.max = first.max;
        for p in parts.iter().filter(|p| !p.is_empty()) {
            out.min = out.min.min(p.min);
            out.max = out.max.max(p.max);
            out.count += p.count;
            out.reservoir.extend_from_slice(&p.reservoir);
        }
        Ok(out)
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn reservoir(&self) -> &[f32] {
        &self.reservoir
    }

    fn sorted(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.reservoir.iter().map(|&x| f64::from(x)).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn percentile(&self, p: f64) -> Result<f64> {
        percentile_sorted(&self.sorted(), p)
    }

    pub fn median(&self) -> Result<f64> {
        self.percentile(50.0)
    }

    pub fn summary(&self) -> Result<StatsSummary> {
        let sorted = self.sorted();
        let p = |q| percentile_sorted(&sorted, q);
        Ok(StatsSummary {
            min: self.min,
            max: self.max,
            count: self.count,
            retained: sorted.len(),
            p01: p(1.0)?,
            p25: p(25.0)?,
            median: p(50.0)?,
            p75: p(75.0)?,
            p99: p(99.0)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::percentile_of;
    use rand::Rng;

    #[test]
    fn first_batch_sets_bounds() {
        let mut s = CalibStats::with_seed(0);
        s.observe(&Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert_eq!((s.min, s.max, s.count), (1.0, 3.0, 3));
    }

    #[test]
    fn bounds_accumulate_across_batches() {
        let mut s = CalibStats::with_seed(0);
        s.observe_values(&[-1.0, 0.0]).unwrap();
        s.observe_values(&[0.0, 5.0]).unwrap();
        assert_eq!((s.min, s.max, s.count), (-1.0, 5.0, 4));
    }

    #[test]
    fn rejects_empty_and_nan() {
        let mut s = CalibStats::with_seed(0);
        assert!(matches!(s.observe_values(&[]), Err(Error::EmptyInput)));
        assert!(matches!(s.observe_values(&[1.0, f32::NAN]), Err(Error::NonFinite)));
        assert!(matches!(s.observe_f64(&[f64::INFINITY]), Err(Error::NonFinite)));
        assert!(s.is_empty());
    }

    #[test]
    fn reservoir_is_bounded_and_observed() {
        let mut s = CalibStats::new(16, 9);
        let stream: Vec<f32> = (0..1000).map(|i| i as f32).collect();
        s.observe_values(&stream).unwrap();
        assert_eq!(s.reservoir().len(), 16);
        assert!(s.reservoir().iter().all(|v| stream.contains(v)));
        // late elements get in
        assert!(s.reservoir().iter().any(|&v| v >= 16.0));
    }

    #[test]
    fn reservoir_percentile_tracks_full_stream() {
        let mut rng = seeded(3);
        let stream: Vec<f32> = (0..1_000_000).map(|_| rng.random::<f32>()).collect();
        let mut s = CalibStats::new(CalibStats::DEFAULT_CAPACITY, 3);
        for chunk in stream.chunks(4096) {
            s.observe_values(chunk).unwrap();
        }
        let exact = percentile_of(&stream, 99.0).unwrap();
        let approx = s.percentile(99.0).unwrap();
        assert!((exact - 0.99).abs() < 0.002, "{exact}");
        assert!((approx - 0.99).abs() < 0.01, "{approx}");
    }

    #[test]
    fn deterministic_given_seed() {
        let stream: Vec<f32> = (0..5000).map(|i| (i as f32 * 0.1).sin()).collect();
        let mut a = CalibStats::new(64, 5);
        let mut b = CalibStats::new(64, 5);
        a.observe_values(&stream).unwrap();
        for c in stream.chunks(7) {
            b.observe_values(c).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn merge_keeps_exact_bounds() {
        let a = CalibStats::from_values(&[1.0, 2.0], 0).unwrap();
        let b = CalibStats::from_values(&[-3.0, 0.5], 0).unwrap();
        let m = CalibStats::merged(&[&a, &b]).unwrap();
        assert_eq!((m.min, m.max, m.count), (-3.0, 2.0, 4));
        assert_eq!(m.reservoir().len(), 4);
        assert!(CalibStats::merged(&[]).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let mut s = CalibStats::new(8, 1);
        s.observe_values(&[0.5, -0.25, 3.0]).unwrap();
        let back: CalibStats = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(s.summary().unwrap().median, 0.5);
    }
}
