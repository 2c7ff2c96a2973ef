//! JSON run configuration. Every section has defaults modelled on the CUB-200
//! regime (100 base classes, ten 10-way 5-shot stages, λ_reg = 0.3,
//! λ_inter = 0.1, α = 0.001, d_h = 4, Adam at lr 1e-4). The one required key is
//! `protocol.base_support` unless `test_per_class` is a number. Unknown keys are
//! rejected at every level.

use serde::{Deserialize, Serialize};

use crate::embedding_store::ProtocolSpec;
use crate::error::{EptError, Result};
use crate::nep::{Metric, NepSettings};
use crate::prototype::{Components, PoolSettings};
use crate::train::{LogitSource, TrainConfig};

/// Component switches. `nep = false` swaps the ridge classifier for
/// `fallback_metric` at both train and test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub nep: bool,
    pub cs: bool,
    pub ta: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { nep: true, cs: true, ta: true }
    }
}

impl Ablation {
    pub const NEP_ONLY: Ablation = Ablation { nep: true, cs: false, ta: false };

    pub fn components(&self) -> Components {
        Components { class_offsets: self.cs, task_offsets: self.ta }
    }

    /// Applies one CLI token: `full`, `nep-only`, `no-cs`, `no-ta`, `no-nep`,
    /// `cs-only` or `ta-only`.
    pub fn apply_token(&mut self, token: &str) -> Result<()> {
        match token {
            "full" => *self = Ablation::default(),
            "nep-only" | "raw" => *self = Ablation::NEP_ONLY,
            "cs-only" => *self = Ablation { nep: true, cs: true, ta: false },
            "ta-only" => *self = Ablation { nep: true, cs: false, ta: true },
            "no-cs" => self.cs = false,
            "no-ta" => self.ta = false,
            "no-nep" => self.nep = false,
            other => return Err(EptError::Config(format!("unknown ablation {other:?}"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainLogits {
    /// Negative NEP residuals, backpropagated through the ridge solve.
    #[default]
    Nep,
    /// Negative squared Euclidean distance to the calibrated prototypes.
    Distance,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: ProtocolSpec,
    pub train: TrainConfig,
    pub nep: NepSettings,
    pub pool: PoolSettings,
    pub ablation: Ablation,
    pub fallback_metric: Metric,
    pub train_logits: TrainLogits,
    pub precision: Precision,
    /// Shift applied to incremental-stage support samples (0 = none).
    pub support_bias: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            protocol: ProtocolSpec::default(),
            train: TrainConfig::default(),
            nep: NepSettings::default(),
            pool: PoolSettings::default(),
            ablation: Ablation::default(),
            fallback_metric: Metric::Euclidean,
            train_logits: TrainLogits::Nep,
            precision: Precision::F64,
            support_bias: 0.0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| EptError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate().map_err(|e| EptError::Config(e.to_string()))?;
        self.train.validate()?;
        self.nep.validate()?;
        self.pool.validate()?;
        if !(self.support_bias >= 0.0) || !self.support_bias.is_finite() {
            return Err(EptError::Config(format!("support_bias must be non-negative, got {}", self.support_bias)));
        }
        Ok(())
    }

    pub fn logit_source(&self) -> LogitSource {
        if !self.ablation.nep {
            return LogitSource::Metric(self.fallback_metric);
        }
        match self.train_logits {
            TrainLogits::Nep => LogitSource::Nep,
            TrainLogits::Distance => LogitSource::Metric(Metric::SquaredEuclidean),
        }
    }
}
