//! Synthetic activations with the shapes seen in trained selective SSMs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal, seeded};
use crate::tensor::{median_of, Tensor};

/// Spread of the logits behind [`gen_longtailed_abar`].
pub const ABAR_LOGIT_STD: f64 = 0.5;
/// Last-to-first envelope ratio of the `grow` and `rise-fall` profiles.
pub const DEFAULT_RAMP: f64 = 5.0;
const MEDIAN_TOL: f64 = 0.02;
const BISECTION_STEPS: usize = 80;

/// Decay values `exp(-softplus(g))`, `g ~ N(mu, ABAR_LOGIT_STD^2)`, with `mu`
/// found by bisection so the sample median lands on `target_median`.
pub fn gen_longtailed_abar(target_median: f64, shape: &[usize], seed: u64) -> Result<Tensor> {
    if !(target_median > 0.0 && target_median < 1.0) {
        return Err(Error::InvalidArgument(format!("target median {target_median} outside (0, 1)")));
    }
    let n: usize = shape.iter().product();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rng = seeded(seed);
    let noise: Vec<f64> = (0..n).map(|_| normal(&mut rng) * ABAR_LOGIT_STD).collect();
    // exp(-softplus(g)) = sigmoid(-g)
    let sample = |mu: f64| -> Vec<f32> {
        noise
            .iter()
            .map(|e| {
                let v = 1.0 / (1.0 + (mu + e).exp());
                v.clamp(f64::from(f32::MIN_POSITIVE), 1.0 - f64::EPSILON) as f32
            })
            .collect()
    };
    // the median falls as mu grows
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    let mut best: Option<(f64, Vec<f32>)> = None;
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let v = sample(mid);
        let m = median_of(&v)?;
        let err = (m - target_median).abs();
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, v));
        }
        if m > target_median {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    match best {
        Some((err, v)) if err <= MEDIAN_TOL && v.iter().all(|&a| a > 0.0 && a < 1.0) => Tensor::new(shape.to_vec(), v),
        _ => Err(Error::UnreachableMedian {
            target: target_median,
            iterations: BISECTION_STEPS,
        }),
    }
}

/// Time envelope of synthetic hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Linear ramp.
    Grow,
    /// Sinusoid.
    Periodic,
    /// Triangle.
    RiseFall,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grow" => Ok(Self::Grow),
            "periodic" => Ok(Self::Periodic),
            "rise-fall" | "rise_fall" => Ok(Self::RiseFall),
            other => Err(Error::UnknownProfile(other.to_string())),
        }
    }
}

/// Periods of the `periodic` envelope over the whole sequence.
const PERIODS: f64 = 4.0;

impl Profile {
    /// Envelope at step `t` of `l`, with `ramp` the peak-to-start ratio.
    pub fn envelope(self, t: usize, l: usize, ramp: f64) -> f64 {
        let u = t as f64 / (l - 1).max(1) as f64;
        match self {
            Self::Grow => 1.0 + (ramp - 1.0) * u,
            Self::Periodic => {
                let mid = 0.5 * (1.0 + ramp);
                let amp = 0.5 * (ramp - 1.0);
                mid + amp * (2.0 * std::f64::consts::PI * PERIODS * t as f64 / l as f64).sin()
            }
            Self::RiseFall => 1.0 + (ramp - 1.0) * (1.0 - (2.0 * u - 1.0).abs()),
        }
    }
}

/// Hidden states `(L, shape...)`: Gaussian noise scaled by the profile's
/// envelope at each time step.
pub fn gen_dynamic_hidden(profile: Profile, l: usize, shape: &[usize], seed: u64) -> Result<Tensor> {
    gen_dynamic_hidden_with(profile, l, shape, seed, DEFAULT_RAMP)
}

pub fn gen_dynamic_hidden_with(profile: Profile, l: usize, shape: &[usize], seed: u64, ramp: f64) -> Result<Tensor> {
    if l < 2 {
        return Err(Error::InvalidArgument(format!("sequence length {l} < 2")));
    }
    if !(ramp >= 1.0 && ramp.is_finite()) {
        return Err(Error::InvalidArgument(format!("ramp factor {ramp} must be at least 1")));
    }
    let per: usize = shape.iter().product();
    let mut rng = seeded(seed);
    let mut data = Vec::with_capacity(l * per);
    for t in 0..l {
        let e = profile.envelope(t, l, ramp);
        data.extend((0..per).map(|_| (normal(&mut rng) * e) as f32));
    }
    let mut full = vec![l];
    full.extend_from_slice(shape);
    Tensor::new(full, data)
}

/// A dense bulk in `[0, 1)` plus a sparse set of outliers with magnitudes
/// log-uniform in `[1, outlier_scale]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierStream {
    pub values: Tensor,
    /// Upper edge of the dense region.
    pub dense_max: f64,
}

pub fn gen_dense_outliers(n: usize, outlier_frac: f64, outlier_scale: f64, seed: u64) -> Result<OutlierStream> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if !(0.0..1.0).contains(&outlier_frac) {
        return Err(Error::InvalidArgument(format!("outlier fraction {outlier_frac} outside [0, 1)")));
    }
    let mut rng = seeded(seed);
    let values: Vec<f32> = (0..n)
        .map(|_| {
            let dense: f64 = rng.random();
            if rng.random::<f64>() < outlier_frac {
                outlier_scale.powf(rng.random::<f64>()) as f32
            } else {
                dense as f32
            }
        })
        .collect();
    Ok(OutlierStream {
        values: Tensor::from_vec(values)?,
        dense_max: 1.0,
    })
}
