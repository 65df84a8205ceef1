//! Experiment configuration: a sectioned key-value schema accepted as TOML
//! (canonical) or JSON (alternative encoding of the same structure).
//! Unknown keys are rejected; every run records the fully resolved config
//! into its manifest.

use crate::dynamics::{BenchmarkParams, DriftUncertaintyForm};
use crate::error::{Error, Result};
use crate::l1drac::{AdaptationSign, L1Config};
use crate::policy::SignConvention;
use crate::simulate::{InitialLaw, Partition};
use crate::tasil::{JacNorm, OptimizerConfig, TrainMode};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub state_dim: usize,
    pub drift_gain: f64,
    pub input_gain: f64,
    pub h_widths: Vec<usize>,
    pub h_weight_std: f64,
    pub h_seed: u64,
    pub lambda_mu_offset: f64,
    pub lambda_mu_slope: f64,
    pub lambda_sigma_offset: f64,
    pub lambda_sigma_slope: f64,
    pub lambda_mu_form: DriftUncertaintyForm,
    pub expert_sign: SignConvention,
    pub k_gain: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        let p = BenchmarkParams::default();
        SystemSection {
            state_dim: p.state_dim,
            drift_gain: p.drift_gain,
            input_gain: p.input_gain,
            h_widths: p.h_widths,
            h_weight_std: p.h_weight_std,
            h_seed: 1,
            lambda_mu_offset: p.lambda_mu_offset,
            lambda_mu_slope: p.lambda_mu_slope,
            lambda_sigma_offset: p.lambda_sigma_offset,
            lambda_sigma_slope: p.lambda_sigma_slope,
            lambda_mu_form: p.drift_uncertainty_form,
            expert_sign: SignConvention::CancelH,
            k_gain: 2.0,
        }
    }
}

impl SystemSection {
    pub fn benchmark_params(&self) -> BenchmarkParams {
        BenchmarkParams {
            state_dim: self.state_dim,
            drift_gain: self.drift_gain,
            input_gain: self.input_gain,
            h_widths: self.h_widths.clone(),
            h_weight_std: self.h_weight_std,
            lambda_mu_offset: self.lambda_mu_offset,
            lambda_mu_slope: self.lambda_mu_slope,
            lambda_sigma_offset: self.lambda_sigma_offset,
            lambda_sigma_slope: self.lambda_sigma_slope,
            drift_uncertainty_form: self.lambda_mu_form,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub horizon: f64,
    pub knots: usize,
    pub substeps: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            horizon: 10.0,
            knots: 100,
            substeps: 10,
        }
    }
}

impl PartitionSection {
    pub fn partition(&self) -> Result<Partition> {
        Partition::new(self.horizon, self.knots, self.substeps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub n_trajectories: usize,
    pub policy_widths: Vec<usize>,
    pub lr: f64,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub use_hard_max: bool,
    pub jac_norm: JacNorm,
    pub initial_law: InitialLaw,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            n_trajectories: 20,
            policy_widths: vec![4, 16, 4],
            lr: 1e-3,
            steps: 5000,
            beta_start: 1.0,
            beta_end: 50.0,
            use_hard_max: false,
            jac_norm: JacNorm::Operator2,
            initial_law: InitialLaw::UniformBox {
                lo: vec![-1.0; 4],
                hi: vec![1.0; 4],
            },
        }
    }
}

impl TrainingSection {
    pub fn optimizer(&self, mode: TrainMode) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            use_hard_max: self.use_hard_max,
            jac_norm: self.jac_norm,
            mode,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct L1Section {
    pub omega: f64,
    pub ts: f64,
    pub lambda_s: f64,
    pub adaptation_sign_variant: AdaptationSign,
}

impl Default for L1Section {
    fn default() -> Self {
        let c = L1Config::default();
        L1Section {
            omega: c.omega,
            ts: c.ts,
            lambda_s: c.lambda_s,
            adaptation_sign_variant: c.sign_variant,
        }
    }
}

impl L1Section {
    pub fn l1_config(&self) -> L1Config {
        L1Config {
            omega: self.omega,
            ts: self.ts,
            lambda_s: self.lambda_s,
            sign_variant: self.adaptation_sign_variant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub ensemble_size: usize,
    pub coupling: CouplingChoice,
    pub d_law: InitialLaw,
    /// secondary marginal for product coupling; defaults to d_law
    pub d_bar_law: Option<InitialLaw>,
    pub shift: Vec<f64>,
    pub scale: f64,
    pub p_orders: Vec<usize>,
    pub failure_deltas: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CouplingChoice {
    #[default]
    Synchronous,
    Product,
    Shifted,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            ensemble_size: 100,
            coupling: CouplingChoice::Synchronous,
            d_law: InitialLaw::UniformBox {
                lo: vec![-1.0; 4],
                hi: vec![1.0; 4],
            },
            d_bar_law: None,
            shift: vec![0.0; 4],
            scale: 1.0,
            p_orders: vec![1, 2, 3],
            failure_deltas: vec![0.1, 0.05],
        }
    }
}

impl EvaluationSection {
    pub fn coupling_spec(&self) -> crate::metrics::CouplingSpec {
        use crate::metrics::{CouplingMode, CouplingSpec};
        let mode = match self.coupling {
            CouplingChoice::Synchronous => CouplingMode::Synchronous,
            CouplingChoice::Product => CouplingMode::Product,
            CouplingChoice::Shifted => CouplingMode::Shifted {
                shift: self.shift.clone(),
                scale: self.scale,
            },
        };
        CouplingSpec {
            mode,
            d_law: self.d_law.clone(),
            d_bar_law: self.d_bar_law.clone().or_else(|| Some(self.d_law.clone())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub system: SystemSection,
    pub partition: PartitionSection,
    pub training: TrainingSection,
    pub l1: L1Section,
    pub evaluation: EvaluationSection,
}

impl ExperimentConfig {
    /// Structural checks beyond what the schema enforces.
    pub fn validate(&self) -> Result<()> {
        let partition = self.partition.partition()?;
        self.l1.l1_config().validate(partition.dt_sub())?;
        self.training.initial_law.validate()?;
        if !self.training.initial_law.has_compact_support() {
            return Err(Error::InvalidConfig(
                "training initial law must have compact support".into(),
            ));
        }
        if self.training.initial_law.dim() != self.system.state_dim {
            return Err(Error::InvalidConfig(
                "training initial law dimension mismatch".into(),
            ));
        }
        if self.evaluation.d_law.dim() != self.system.state_dim {
            return Err(Error::InvalidConfig(
                "evaluation initial law dimension mismatch".into(),
            ));
        }
        if self.system.h_widths.first() != Some(&self.system.state_dim)
            || self.system.h_widths.last() != Some(&self.system.state_dim)
        {
            return Err(Error::InvalidConfig(
                "h widths must start and end at the state dimension".into(),
            ));
        }
        if self.training.policy_widths.first() != Some(&self.system.state_dim)
            || self.training.policy_widths.last() != Some(&self.system.state_dim)
        {
            return Err(Error::InvalidConfig(
                "policy widths must map state_dim to input_dim".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Load by extension: `.json` as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }
}

/// Wall-clock timing of one pipeline stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Artifact produced by a run, with content checksum.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
}

/// Written before a run starts and finalized when it ends; replaying the
/// recorded config and seed reproduces every artifact bit for bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub status: String,
    pub artifacts: Vec<ArtifactEntry>,
    pub timings: Vec<StageTiming>,
    pub certification: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, config: ExperimentConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            status: "pending".into(),
            artifacts: Vec::new(),
            timings: Vec::new(),
            certification: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_is_identity() {
        let config = ExperimentConfig::default();
        let text = config.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(config, back);
        // and once more through the serializer
        assert_eq!(text, back.to_toml().unwrap());
    }

    #[test]
    fn json_is_an_equivalent_encoding() {
        let config = ExperimentConfig::default();
        let text = serde_json::to_string(&config).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentConfig::default().to_toml().unwrap();
        text.push_str("\n[system_extra]\nfoo = 1\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let bad_key = "master_seed = 3\nunknown_top_level = true\n";
        assert!(ExperimentConfig::from_toml(bad_key).is_err());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let config = ExperimentConfig::from_toml("master_seed = 9\n").unwrap();
        assert_eq!(config.master_seed, 9);
        assert_eq!(config.partition.knots, 100);
    }

    #[test]
    fn bad_ts_fails_validation() {
        let mut config = ExperimentConfig::default();
        config.l1.ts = 0.0137;
        assert!(config.validate().is_err());
    }

    #[test]
    fn gaussian_training_law_rejected() {
        let mut config = ExperimentConfig::default();
        config.training.initial_law = InitialLaw::Gaussian {
            mean: vec![0.0; 4],
            std: vec![1.0; 4],
        };
        assert!(config.validate().is_err());
    }
}
