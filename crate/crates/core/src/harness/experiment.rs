use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HarnessError, Mode, RunConfig};
use crate::model::{pretrain, BvpNetMini, ModelConfig, PretrainConfig, PretrainMeta, PretrainOutcome};
use crate::synth::SuiteSpec;

/// Everything needed to reproduce a pretrain + adapt experiment. Missing
/// keys take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub source: SuiteSpec,
    pub target: SuiteSpec,
    pub model: ModelConfig,
    /// Seeds parameter initialization.
    pub init_seed: u64,
    pub pretrain: PretrainConfig,
    /// Shared settings of every adaptation run; `run.mode` is the mode of
    /// single-run commands.
    pub run: RunConfig,
    /// Modes compared by multi-seed suites.
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: SuiteSpec::source_default(),
            target: SuiteSpec::target_default(),
            model: ModelConfig::default(),
            init_seed: 0,
            pretrain: PretrainConfig::default(),
            run: RunConfig::default(),
            modes: vec![Mode::NoAdapt, Mode::Cici],
            seeds: (0..5).collect(),
        }
    }
}

/// Hex SHA-256 of the canonical JSON form of a suite spec.
pub fn suite_digest(spec: &SuiteSpec) -> String {
    let json = serde_json::to_vec(spec).expect("suite spec serializes");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// One run config per entry of `modes`, sharing `run`.
    pub fn run_configs(&self) -> Vec<RunConfig> {
        self.modes
            .iter()
            .map(|&mode| RunConfig {
                mode,
                ..self.run.clone()
            })
            .collect()
    }

    /// Initializes the model and trains it on the source suite.
    pub fn pretrain(&self) -> Result<(PretrainOutcome, PretrainMeta), HarnessError> {
        let model = BvpNetMini::init(self.model, self.init_seed)?;
        let instances = self
            .source
            .instances()
            .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        let outcome = pretrain(model, &instances, &self.pretrain)?;
        let meta = PretrainMeta {
            seed: self.init_seed,
            epochs: self.pretrain.epochs,
            source_digest: suite_digest(&self.source),
        };
        Ok((outcome, meta))
    }
}
