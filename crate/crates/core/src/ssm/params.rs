use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal, seeded, ChaCha8Rng};
use crate::tensor::Tensor;
use rand::Rng;

/// Sizes of one Mamba block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    /// Residual stream width.
    pub d_model: usize,
    /// Expanded channel count seen by the SSM (D).
    pub d_inner: usize,
    /// State size per channel (N).
    pub d_state: usize,
    /// Rank of the timescale projection.
    pub dt_rank: usize,
    /// Causal convolution width (K).
    pub conv_width: usize,
}

impl BlockDims {
    pub fn new(d_model: usize, d_inner: usize, d_state: usize) -> Self {
        Self {
            d_model,
            d_inner,
            d_state,
            dt_rank: d_model.div_ceil(16).max(1),
            conv_width: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_model, self.d_inner, self.d_state, self.dt_rank, self.conv_width].contains(&0) {
            return Err(Error::Config(format!("block dims must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Output width of the `x_proj` projection: `[dt_low | B | C]`.
    pub fn x_proj_width(&self) -> usize {
        self.dt_rank + 2 * self.d_state
    }
}

/// Parameters of the selective SSM itself.
///
/// `w_x` maps the SSM input to `[dt_low | B_t | C_t]`; `w_delta` and
/// `b_delta` lift `dt_low` to the pre-softplus timescale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmParams {
    /// `(D, N)`, strictly negative.
    pub a: Tensor,
    /// `(D,)` skip connection.
    pub d_skip: Tensor,
    /// `(R + 2N, D)`.
    pub w_x: Tensor,
    /// `(D, R)`.
    pub w_delta: Tensor,
    /// `(D,)`.
    pub b_delta: Tensor,
}

impl SsmParams {
    pub fn d_inner(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_state(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn dt_rank(&self) -> usize {
        self.w_delta.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = match self.a.shape() {
            [d, n] => (*d, *n),
            s => return Err(Error::ShapeMismatch(format!("A must be (D, N), got {s:?}"))),
        };
        if let Some(v) = self.a.data().iter().find(|&&v| v >= 0.0) {
            return Err(Error::InvalidParams(format!("A must be strictly negative, found {v}")));
        }
        let r = self.w_delta.shape().get(1).copied().unwrap_or(0);
        let expect = |t: &Tensor, shape: &[usize], name: &str| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::ShapeMismatch(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )))
            }
        };
        expect(&self.d_skip, &[d], "D")?;
        expect(&self.w_delta, &[d, r], "w_delta")?;
        expect(&self.b_delta, &[d], "b_delta")?;
        expect(&self.w_x, &[r + 2 * n, d], "w_x")
    }

    /// Mamba-style initialization: `A[d, n] = -(n + 1)`, timescales
    /// log-uniform in `[dt_min, dt_max]` through the softplus bias.
    pub fn init(dims: &BlockDims, rng: &mut ChaCha8Rng, dt_min: f64, dt_max: f64) -> Result<Self> {
        let (d, n, r) = (dims.d_inner, dims.d_state, dims.dt_rank);
        let a: Vec<f32> = (0..d * n).map(|i| -((i % n) as f32 + 1.0)).collect();
        let d_skip: Vec<f32> = (0..d).map(|_| (1.0 + 0.1 * normal(rng)) as f32).collect();
        let w_x = gaussian(rng, r + 2 * n, d, 1.0 / (d as f64).sqrt());
        let w_delta = gaussian(rng, d, r, 1.0 / (r as f64).sqrt());
        let b_delta: Vec<f32> = (0..d)
            .map(|_| {
                let u: f64 = rng.random();
                let dt = (dt_min.ln() + u * (dt_max.ln() - dt_min.ln())).exp();
                // softplus^-1(dt)
                (dt + (-(-dt).exp_m1()).ln()) as f32
            })
            .collect();
        Ok(Self {
            a: Tensor::new(vec![d, n], a)?,
            d_skip: Tensor::new(vec![d], d_skip)?,
            w_x: Tensor::new(vec![r + 2 * n, d], w_x)?,
            w_delta: Tensor::new(vec![d, r], w_delta)?,
            b_delta: Tensor::new(vec![d], b_delta)?,
        })
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f32> {
    (0..rows * cols).map(|_| (normal(rng) * std) as f32).collect()
}

/// All learnable parameters of one Mamba block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MambaBlockWeights {
    pub dims: BlockDims,
    /// `(2D, M)`: rows `0..D` feed the SSM branch, rows `D..2D` the gate.
    pub w_in: Tensor,
    /// `(D, K)` depthwise causal kernel; tap `K-1` is the current step.
    pub conv_w: Tensor,
    /// `(D,)`.
    pub conv_b: Tensor,
    /// `(M, D)`.
    pub w_out: Tensor,
    pub ssm: SsmParams,
}

impl MambaBlockWeights {
    pub fn init(dims: BlockDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = seeded(seed);
        let (m, d, k) = (dims.d_model, dims.d_inner, dims.conv_width);
        let w_in = gaussian(&mut rng, 2 * d, m, 1.0 / (m as f64).sqrt());
        let bound = 1.0 / (k as f64).sqrt();
        let conv_w: Vec<f32> = (0..d * k)
            .map(|_| (bound * (2.0 * rng.random::<f64>() - 1.0)) as f32)
            .collect();
        let conv_b: Vec<f32> = (0..d)
            .map(|_| (0.1 * bound * (2.0 * rng.random::<f64>() - 1.0)) as f32)
            .collect();
        let w_out = gaussian(&mut rng, m, d, 1.0 / (d as f64).sqrt());
        let ssm = SsmParams::init(&dims, &mut rng, 1e-3, 1e-1)?;
        let w = Self {
            dims,
            w_in: Tensor::new(vec![2 * d, m], w_in)?,
            conv_w: Tensor::new(vec![d, k], conv_w)?,
            conv_b: Tensor::new(vec![d], conv_b)?,
            w_out: Tensor::new(vec![m, d], w_out)?,
            ssm,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.ssm.validate()?;
        let BlockDims {
            d_model: m,
            d_inner: d,
            d_state: n,
            dt_rank: r,
            conv_width: k,
        } = self.dims;
        let checks: [(&Tensor, Vec<usize>, &str); 6] = [
            (&self.w_in, vec![2 * d, m], "w_in"),
            (&self.conv_w, vec![d, k], "conv_w"),
            (&self.conv_b, vec![d], "conv_b"),
            (&self.w_out, vec![m, d], "w_out"),
            (&self.ssm.a, vec![d, n], "A"),
            (&self.ssm.w_delta, vec![d, r], "w_delta"),
        ];
        for (t, shape, name) in checks {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Named tensors in manifest order (names relative to the block).
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("in_proj.weight", &self.w_in),
            ("conv1d.weight", &self.conv_w),
            ("conv1d.bias", &self.conv_b),
            ("x_proj.weight", &self.ssm.w_x),
            ("dt_proj.weight", &self.ssm.w_delta),
            ("dt_proj.bias", &self.ssm.b_delta),
            ("ssm.A", &self.ssm.a),
            ("ssm.D", &self.ssm.d_skip),
            ("out_proj.weight", &self.w_out),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("in_proj.weight", &mut self.w_in),
            ("conv1d.weight", &mut self.conv_w),
            ("conv1d.bias", &mut self.conv_b),
            ("x_proj.weight", &mut self.ssm.w_x),
            ("dt_proj.weight", &mut self.ssm.w_delta),
            ("dt_proj.bias", &mut self.ssm.b_delta),
            ("ssm.A", &mut self.ssm.a),
            ("ssm.D", &mut self.ssm.d_skip),
            ("out_proj.weight", &mut self.w_out),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}
