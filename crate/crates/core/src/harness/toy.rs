//! A small sequence classification task and its trainer.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recon::{cosine_lr, Adam};
use crate::rng::{derive_seed, normal, seeded};
use crate::ssm::{ModelSpec, SsmClassifier};
use crate::tensor::Tensor;

/// Labeled sequences. A marker is a constant offset along a fixed direction
/// held for `motif_len` steps. Class 1 carries it inside the first quarter of
/// the sequence, class 0 after `late_start`, so the class is only visible to
/// a model that remembers when the marker passed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTask {
    pub train: usize,
    pub val: usize,
    pub motif_len: usize,
    pub amplitude: f64,
    pub noise: f64,
    /// Fraction of the sequence before which class-0 markers never start.
    pub late_start: f64,
    /// Label is the sign of the sequence mean instead.
    pub trivial: bool,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            train: 1024,
            val: 512,
            motif_len: 8,
            amplitude: 1.0,
            noise: 1.0,
            late_start: 0.5,
            trivial: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(B, L, C)`.
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples `idx` as a new dataset.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        let [_, l, c] = *self.x.shape() else { unreachable!("dataset is (B, L, C)") };
        let per = l * c;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * per..(i + 1) * per]);
        }
        Ok(Dataset {
            x: Tensor::new(vec![idx.len(), l, c], data)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn head(&self, n: usize) -> Result<Dataset> {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }
}

impl ToyTask {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.train == 0 || self.val == 0 {
            return Err(Error::Config("train and val sizes must be positive".into()));
        }
        if spec.classes != 2 {
            return Err(Error::Config(format!("the toy task has 2 classes, spec has {}", spec.classes)));
        }
        if !(self.noise >= 0.0 && self.amplitude > 0.0) {
            return Err(Error::Config("noise must be non-negative and amplitude positive".into()));
        }
        if !(0.0..1.0).contains(&self.late_start) {
            return Err(Error::Config(format!("late_start {} outside [0, 1)", self.late_start)));
        }
        if !self.trivial && (self.motif_len == 0 || self.motif_len > spec.seq_len / 4) {
            return Err(Error::Config(format!(
                "motif length {} must be in [1, L/4 = {}]",
                self.motif_len,
                spec.seq_len / 4
            )));
        }
        Ok(())
    }

    fn direction(&self, c: usize) -> Vec<f64> {
        let mut rng = seeded(0x006d_071f);
        (0..c)
            .map(|_| if rng.random::<bool>() { self.amplitude } else { -self.amplitude })
            .collect()
    }

    /// `n` balanced samples of length `l` with `c` features.
    pub fn generate(&self, n: usize, l: usize, c: usize, seed: u64) -> Result<Dataset> {
        let mut rng = seeded(seed);
        let direction = self.direction(c);
        let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        labels.shuffle(&mut rng);
        let mut data = Vec::with_capacity(n * l * c);
        for &y in &labels {
            let mut seq: Vec<f64> = (0..l * c).map(|_| normal(&mut rng) * self.noise).collect();
            if self.trivial {
                let shift = if y == 1 { 0.5 } else { -0.5 };
                seq.iter_mut().for_each(|v| *v += shift);
            } else {
                let m = self.motif_len;
                let start = if y == 1 {
                    rng.random_range(0..=l / 4 - m)
                } else {
                    let lo = ((self.late_start * l as f64).ceil() as usize).clamp(l / 4, l - m);
                    rng.random_range(lo..=l - m)
                };
                for row in seq.chunks_mut(c).skip(start).take(m) {
                    row.iter_mut().zip(&direction).for_each(|(v, d)| *v += d);
                }
            }
            data.extend(seq.into_iter().map(|v| v as f32));
        }
        Ok(Dataset {
            x: Tensor::new(vec![n, l, c], data)?,
            labels,
        })
    }

    /// Train and validation splits for `spec`, drawn from independent streams.
    pub fn splits(&self, spec: &ModelSpec, seed: u64) -> Result<(Dataset, Dataset)> {
        self.validate(spec)?;
        let (l, c) = (spec.seq_len, spec.d_input);
        Ok((
            self.generate(self.train, l, c, derive_seed(seed, 1))?,
            self.generate(self.val, l, c, derive_seed(seed, 2))?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub target_accuracy: f64,
    pub min_accuracy: f64,
    /// Decoupled decay applied to weight matrices after each Adam step.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            batch_size: 32,
            max_epochs: 60,
            target_accuracy: 0.95,
            min_accuracy: 0.80,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub val_accuracy: f64,
    pub train_loss: Vec<f64>,
}

/// Trains a floating-point classifier with Adam on cross-entropy. Stops once
/// the validation accuracy reaches `target_accuracy`.
pub fn train_toy_model(
    task: &ToyTask,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(SsmClassifier, TrainReport, Dataset, Dataset)> {
    spec.validate()?;
    if cfg.batch_size == 0 || cfg.max_epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("train batch size, epochs and lr must be positive".into()));
    }
    if !(cfg.weight_decay >= 0.0) {
        return Err(Error::Config(format!("weight decay {} must be non-negative", cfg.weight_decay)));
    }
    let (train, val) = task.splits(spec, seed)?;
    let mut model = SsmClassifier::init(*spec, derive_seed(seed, 3))?;
    let mut adam = Adam::new(0.9, 0.999);
    let mut rng = seeded(derive_seed(seed, 4));
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.max_epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::new();
    let mut acc = 0.0;
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk)?;
            let (loss, grads) = model.loss_and_grads(&batch.x, &batch.labels, None)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: step,
                    lr: cosine_lr(cfg.lr, step, total),
                    last_loss: epoch_loss,
                });
            }
            epoch_loss += loss * chunk.len() as f64;
            let lr = cosine_lr(cfg.lr, step, total);
            for (name, t) in model.named_tensors_mut() {
                let g = &grads.weights[&name];
                let mut p = t.to_f64();
                if name.ends_with("ssm.A") {
                    // A = -exp(a_log)
                    let mut a_log: Vec<f64> = p.iter().map(|a| (-a).ln()).collect();
                    let g_log: Vec<f64> = g.iter().zip(&p).map(|(g, a)| g * a).collect();
                    adam.step(&name, &mut a_log, &g_log, lr);
                    p = a_log.iter().map(|v| -v.exp()).collect();
                } else {
                    adam.step(&name, &mut p, g, lr);
                    if name.ends_with("weight") {
                        p.iter_mut().for_each(|v| *v -= lr * cfg.weight_decay * *v);
                    }
                }
                *t = Tensor::from_f64(t.shape().to_vec(), &p)?;
            }
            step += 1;
        }
        losses.push(epoch_loss / train.len() as f64);
        acc = model.accuracy(&val.x, &val.labels, None)?;
        if acc >= cfg.target_accuracy {
            return Ok((
                model,
                TrainReport {
                    epochs: epoch,
                    val_accuracy: acc,
                    train_loss: losses,
                },
                train,
                val,
            ));
        }
    }
    if acc < cfg.min_accuracy {
        return Err(Error::TaskTooHard {
            accuracy: acc,
            required: cfg.min_accuracy,
        });
    }
    Ok((
        model,
        TrainReport {
            epochs: cfg.max_epochs,
            val_accuracy: acc,
            train_loss: losses,
        },
        train,
        val,
    ))
}
