use std::path::Path;

use serde::{Deserialize, Serialize};

use super::toy::{ToyTask, TrainConfig};
use crate::calib::{BitPolicy, Initializer};
use crate::error::{Error, Result};
use crate::ptq::QuantRecipe;
use crate::recon::ReconConfig;
use crate::ssm::ModelSpec;

/// Data used by an experiment: the toy task and how much of it each stage sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub task: ToyTask,
    /// Training sequences used for calibration and reconstruction.
    pub calib_samples: usize,
    /// Sequences forwarded by `analyze`.
    pub analyze_batch: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            task: ToyTask::default(),
            calib_samples: 256,
            analyze_batch: 32,
        }
    }
}

/// Everything one run needs. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub weight_bits: u8,
    pub act_bits: u8,
    /// 8-bit first/last layers and the projection/conv inputs.
    pub eight_bit_overrides: bool,
    /// Replaces the policy built from the three fields above.
    pub bit_policy: Option<BitPolicy>,
    pub alpha: f64,
    pub lambda: usize,
    pub initializer: Initializer,
    pub ltsq: bool,
    pub tgq: bool,
    /// Integer shift kernel for LtSQ decays instead of the fake-quant product.
    pub use_shift: bool,
    /// `false` leaves every quantizer disabled.
    pub quantize: bool,
    pub reconstruct: bool,
    pub recon: ReconConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            weight_bits: 6,
            act_bits: 4,
            eight_bit_overrides: true,
            bit_policy: None,
            alpha: 0.9,
            lambda: 10,
            initializer: Initializer::Percentile,
            ltsq: true,
            tgq: true,
            use_shift: false,
            quantize: true,
            reconstruct: true,
            recon: ReconConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetSpec::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Reads TOML or JSON, chosen by extension (TOML otherwise).
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn policy(&self) -> BitPolicy {
        match &self.bit_policy {
            Some(p) => p.clone(),
            None if self.eight_bit_overrides => BitPolicy::mixed_precision(self.weight_bits, self.act_bits),
            None => BitPolicy::new(self.weight_bits, self.act_bits),
        }
    }

    pub fn recipe(&self) -> QuantRecipe {
        QuantRecipe {
            policy: self.policy(),
            initializer: self.initializer,
            alpha: self.alpha,
            lambda: self.lambda,
            ltsq: self.ltsq,
            tgq: self.tgq,
            use_shift: self.use_shift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.recipe().validate()?;
        self.recon.validate()?;
        self.dataset.task.validate(&self.model)?;
        if self.dataset.calib_samples == 0 || self.dataset.analyze_batch == 0 {
            return Err(Error::Config("calib_samples and analyze_batch must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_both_formats() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let toml_text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<ExperimentConfig>(&toml_text).unwrap(), cfg);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg: ExperimentConfig = toml::from_str("alpha = 0.8\n[model]\nseq_len = 16\n").unwrap();
        assert_eq!(cfg.alpha, 0.8);
        assert_eq!(cfg.model.seq_len, 16);
        assert_eq!(cfg.lambda, 10);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("alpah = 0.8").is_err());
        let cfg = ExperimentConfig {
            alpha: 1.5,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            lambda: 0,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
