//! Experiment documents: dataset, backbone, auxiliary module and training
//! settings in one JSON file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::auxiliary::{AuxiliarySpec, DEFAULT_KD_TEMPERATURE, DEFAULT_KD_WEIGHT};
use crate::data::DatasetSpec;
use crate::element::DType;
use crate::error::{Error, Result};
use crate::net::{InputShape, NetworkSpec};
use crate::optim::{LrSchedule, OptimizerConfig};
use crate::quant::{PrecisionPolicy, MAX_BITS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Auxi,
    AdditionalLoss,
    Kd,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Auxi, Method::AdditionalLoss, Method::Kd];

    pub fn id(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Auxi => "auxi",
            Method::AdditionalLoss => "additional_loss",
            Method::Kd => "kd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.id() == s).ok_or_else(|| {
            Error::usage(format!("unknown method {s:?}; expected baseline, auxi, additional_loss or kd"))
        })
    }
}

/// Epoch count, batching and optimization for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub lr: LrSchedule,
}

impl StageConfig {
    /// Full-precision pretraining: SGD, momentum 0.9, lr 0.1.
    pub fn pretrain_default(epochs: usize) -> Self {
        Self { epochs, batch_size: 64, optimizer: OptimizerConfig::sgd(0.9), lr: LrSchedule::constant(0.1) }
    }

    /// Quantized fine-tuning: Adam, lr 1e-3.
    pub fn finetune_default(epochs: usize) -> Self {
        Self { epochs, batch_size: 64, optimizer: OptimizerConfig::adam(), lr: LrSchedule::constant(1e-3) }
    }

    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push(format!("{prefix}.batch_size must be positive"));
        }
        v.extend(self.optimizer.violations().into_iter().map(|m| format!("{prefix}.optimizer: {m}")));
        v.extend(self.lr.violations(self.epochs).into_iter().map(|m| format!("{prefix}.lr: {m}")));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub beta: f64,
    pub temperature: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { beta: DEFAULT_KD_WEIGHT, temperature: DEFAULT_KD_TEMPERATURE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// Bitwidth `k` of interior weights and activations. Absent means full
    /// precision; 1 selects binary.
    #[serde(default)]
    pub bits: Option<u32>,
    pub seed: u64,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    #[serde(flatten)]
    pub stage: StageConfig,
    /// Per-tap loss weights for the additional-loss method; defaults to 1 each.
    #[serde(default)]
    pub head_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub kd: KdConfig,
}

fn default_dtype() -> DType {
    DType::F32
}

impl TrainConfig {
    pub fn policy(&self) -> PrecisionPolicy {
        match self.bits {
            None => PrecisionPolicy::full(),
            Some(1) => PrecisionPolicy::binary(),
            Some(k) => PrecisionPolicy::uniform(k),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.stage.violations("train");
        if let Some(k) = self.bits {
            if k == 0 || k > MAX_BITS {
                v.push(format!("train.bits must be in 1..={MAX_BITS}, got {k}"));
            }
        }
        if let Some(w) = &self.head_weights {
            if w.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
                v.push(format!("train.head_weights must be finite and non-negative, got {w:?}"));
            }
        }
        if !(self.kd.temperature > 0.0) {
            v.push(format!("train.kd.temperature must be positive, got {}", self.kd.temperature));
        }
        if !(self.kd.beta >= 0.0) {
            v.push(format!("train.kd.beta must be non-negative, got {}", self.kd.beta));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Either a full spec or `{"preset": "plain4" | "res4", "input", "num_classes"}`.
    #[serde(deserialize_with = "network_or_preset")]
    pub network: NetworkSpec,
    #[serde(default)]
    pub auxiliary: Option<AuxiliarySpec>,
    /// Full-precision stage run before fine-tuning. Absent: fine-tune from
    /// the initialization.
    #[serde(default)]
    pub pretrain: Option<StageConfig>,
    pub train: TrainConfig,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NetworkDoc {
    Preset {
        preset: String,
        input: InputShape,
        num_classes: usize,
        #[serde(default)]
        policy: Option<PrecisionPolicy>,
        #[serde(default)]
        tap_indices: Option<Vec<usize>>,
    },
    Full(NetworkSpec),
}

fn network_or_preset<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<NetworkSpec, D::Error> {
    match NetworkDoc::deserialize(d)? {
        NetworkDoc::Full(spec) => Ok(spec),
        NetworkDoc::Preset { preset, input, num_classes, policy, tap_indices } => {
            let mut spec =
                NetworkSpec::preset(&preset, input, num_classes, policy.unwrap_or_else(PrecisionPolicy::full))
                    .map_err(serde::de::Error::custom)?;
            spec.tap_indices = tap_indices;
            Ok(spec)
        }
    }
}

impl ExperimentConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.dataset.violations();
        v.extend(self.network.violations());
        if let Some(a) = &self.auxiliary {
            v.extend(a.violations(&self.network));
        }
        if let Some(p) = &self.pretrain {
            v.extend(p.violations("pretrain"));
        }
        v.extend(self.train.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Validation(vec![format!("config: {e}")]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Validation(v) => {
                Error::Validation(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect())
            }
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Source, SynthKind};

    pub(crate) fn blobs_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec {
                source: Source::Synthetic {
                    synth: SynthKind::Blobs,
                    n: 64,
                    classes: 2,
                    seed: 1,
                    size: 8,
                    n_test: None,
                },
                normalization: None,
                augment: Default::default(),
                train_limit: None,
                test_limit: None,
                downsample: None,
                classes: 2,
            },
            network: NetworkSpec::preset(
                "plain4",
                InputShape { channels: 2, height: 8, width: 8 },
                2,
                PrecisionPolicy::full(),
            )
            .unwrap(),
            auxiliary: None,
            pretrain: Some(StageConfig::pretrain_default(2)),
            train: TrainConfig {
                method: Method::Baseline,
                bits: Some(2),
                seed: 3,
                dtype: DType::F64,
                stage: StageConfig::finetune_default(2),
                head_weights: None,
                kd: KdConfig::default(),
            },
        }
    }

    #[test]
    fn json_round_trip() {
        let cfg = blobs_config();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn violations_are_collected_across_sections() {
        let mut cfg = blobs_config();
        cfg.train.stage.batch_size = 0;
        cfg.train.bits = Some(0);
        cfg.train.stage.lr.milestones = vec![5];
        let v = cfg.violations();
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn preset_shorthand_expands() {
        let mut v: serde_json::Value = serde_json::from_str(&blobs_config().to_json()).unwrap();
        v["network"] = serde_json::json!({
            "preset": "plain4",
            "input": {"channels": 2, "height": 8, "width": 8},
            "num_classes": 2
        });
        let cfg = ExperimentConfig::from_json(&v.to_string()).unwrap();
        assert_eq!(cfg.network, blobs_config().network);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("additional_loss".parse::<Method>().unwrap(), Method::AdditionalLoss);
        assert!(matches!("auxiliary".parse::<Method>(), Err(Error::Usage(_))));
    }

    #[test]
    fn ill_typed_fields_fail_validation() {
        let text = cfg_text_with_bad_type();
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Validation(_))));
    }

    fn cfg_text_with_bad_type() -> String {
        let mut v: serde_json::Value = serde_json::from_str(&blobs_config().to_json()).unwrap();
        v["train"]["epochs"] = serde_json::json!("ten");
        v.to_string()
    }
}
