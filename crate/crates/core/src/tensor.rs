//! Dense row-major `f32` tensors and the order statistics the quantizers need.
//!
//! Tensors are plain values: every operation returns a new tensor and
//! nothing is shared, so distinct tensors can be processed from different
//! threads without coordination. Statistics accumulate in `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` matches the data length and
    /// that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Applies `f` elementwise; the result must stay finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min(&self) -> Result<f64> {
        self.data
            .iter()
            .map(|&v| f64::from(v))
            .reduce(f64::min)
            .ok_or(Error::EmptyInput)
    }

    pub fn max(&self) -> Result<f64> {
        self.data
            .iter()
            .map(|&v| f64::from(v))
            .reduce(f64::max)
            .ok_or(Error::EmptyInput)
    }

    pub fn mean(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64)
    }

    /// Writes `<stem>.f32` (raw little-endian values) and `<stem>.json`
    /// (shape sidecar).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (bin, meta) = tensor_paths(stem);
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let sidecar = TensorMeta {
            shape: self.shape.clone(),
            dtype: "f32".into(),
            order: "row-major".into(),
        };
        let text = serde_json::to_string(&sidecar)?;
        fs::write(&meta, text).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (bin, meta) = tensor_paths(stem);
        let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let sidecar: TensorMeta = serde_json::from_str(&text)?;
        if sidecar.dtype != "f32" || sidecar.order != "row-major" {
            return Err(Error::InvalidArgument(format!(
                "{}: unsupported dtype/order {}/{}",
                meta.display(),
                sidecar.dtype,
                sidecar.order
            )));
        }
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{}: {} bytes is not a whole number of f32 values",
                bin.display(),
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(sidecar.shape, data)
    }
}

/// JSON sidecar of the on-disk tensor format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
}

/// `<stem>.f32` and `<stem>.json`; the suffix is appended, so dotted tensor
/// names like `block0.in_proj.weight` keep their full name.
fn tensor_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".f32"), with(".json"))
}

/// Linearly interpolated order statistic at rank `p/100 * (n-1)` (R-7).
pub fn percentile(t: &Tensor, p: f64) -> Result<f64> {
    percentile_of(t.data(), p)
}

pub fn percentile_of(values: &[f32], p: f64) -> Result<f64> {
    let mut sorted: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, p)
}

/// Same as [`percentile_of`] on data already sorted ascending.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "percentile {p} outside [0, 100]"
        )));
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

pub fn median(t: &Tensor) -> Result<f64> {
    percentile(t, 50.0)
}

pub fn median_of(values: &[f32]) -> Result<f64> {
    percentile_of(values, 50.0)
}

/// Mean squared elementwise difference.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(mse_of(a.data(), b.data()))
}

pub(crate) fn mse_of(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    sum / a.len() as f64
}

/// `mse` over `f64` buffers.
pub fn mse_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}
