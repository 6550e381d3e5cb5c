//! Experiment configuration: a single JSON file describing the dataset, the
//! base architecture, and any number of pruning runs and from-scratch
//! training runs.
//!
//! ```json
//! {
//!   "dataset": { "synth": { "n_train": 50000, "n_test": 10000,
//!                            "feature_dim": 64, "pos_balance_train": 0.753,
//!                            "pos_balance_test": 0.799, "difficulty": 3.0,
//!                            "seed": 7 } },
//!   "model": { "scale": 0.125 },
//!   "train": { "epochs": 10, "batch_size": 128,
//!              "learning_rate": 0.01, "seed": 1 },
//!   "runs": [ { "name": "obdsd_param", "level": "parameter",
//!               "method": "obd_sd", "rounds": 10, "seeds": [1, 2, 3] } ],
//!   "scratch": [ { "name": "half_neurons", "mode": "neuron_fraction",
//!                  "amount": 0.5, "seeds": [1] } ],
//!   "output_dir": "out"
//! }
//! ```
//!
//! `dataset.csv` with `train`/`test` paths replaces `synth` for user data;
//! `model.spec` gives the full architecture instead of `scale`.

use serde::Deserialize;

use crate::damage::DamageMethod;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::nn::model::ModelSpec;
use crate::nn::train::TrainConfig;
use crate::prune::{
    FinetuneSpec, PruneLevel, PruneSchedule, PruneScope, ScratchMode, SelectionMethod,
};
use crate::scalar::Precision;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    #[serde(default = "default_target_fpr")]
    pub target_fpr: f64,
    #[serde(default)]
    pub runs: Vec<RunConfig>,
    #[serde(default)]
    pub scratch: Vec<ScratchRunConfig>,
    #[serde(default)]
    pub output_dir: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DatasetConfig {
    Synth(SynthConfig),
    Csv { train: String, test: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Full architecture; mutually exclusive with `scale`.
    #[serde(default)]
    pub spec: Option<ModelSpec>,
    /// Width multiplier applied to the default 1024/768/512/512/512 stack.
    #[serde(default)]
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f32,
    #[serde(default)]
    pub seed: u64,
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub level: String,
    pub method: String,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    pub rounds: usize,
    #[serde(default = "default_one")]
    pub finetune_epochs: usize,
    #[serde(default = "default_finetune_samples")]
    pub finetune_samples: usize,
    #[serde(default = "default_batch_size")]
    pub finetune_batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub finetune_learning_rate: f32,
    #[serde(default = "default_scope")]
    pub scope: String,
    #[serde(default = "default_one")]
    pub layer_floor: usize,
    #[serde(default = "default_damage_samples")]
    pub damage_samples: usize,
    #[serde(default = "default_true")]
    pub recompute_damage: bool,
    #[serde(default = "default_true")]
    pub include_biases: bool,
    pub seeds: Vec<u64>,
}

impl RunConfig {
    pub fn level(&self) -> Result<PruneLevel> {
        PruneLevel::from_name(&self.level).ok_or_else(|| {
            Error::Config(format!(
                "runs[{}].level: unknown level `{}` (parameter | neuron)",
                self.name, self.level
            ))
        })
    }

    pub fn method(&self) -> Result<SelectionMethod> {
        SelectionMethod::from_name(&self.method).ok_or_else(|| {
            Error::Config(format!(
                "runs[{}].method: unknown method `{}` (random | magnitude | obd | obd_sd | lm | dropout | merge)",
                self.name, self.method
            ))
        })
    }

    pub fn scope(&self) -> Result<PruneScope> {
        PruneScope::from_name(&self.scope).ok_or_else(|| {
            Error::Config(format!(
                "runs[{}].scope: unknown scope `{}` (per_layer | global)",
                self.name, self.scope
            ))
        })
    }

    pub fn schedule(&self, seed: u64, target_fpr: f64) -> Result<PruneSchedule> {
        let mut s = PruneSchedule::new(self.level()?, self.method()?, self.rounds, seed);
        s.fraction_per_round = self.fraction;
        s.finetune = FinetuneSpec {
            epochs: self.finetune_epochs,
            sample_count: self.finetune_samples,
            batch_size: self.finetune_batch_size,
            learning_rate: self.finetune_learning_rate,
        };
        s.scope = self.scope()?;
        s.layer_floor = self.layer_floor;
        s.damage_sample_count = self.damage_samples;
        s.target_fpr = target_fpr;
        s.recompute_damage = self.recompute_damage;
        s.include_biases = self.include_biases;
        s.precision = Precision::F32;
        s.validate()
            .map_err(|e| Error::Config(format!("runs[{}]: {e}", self.name)))?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScratchRunConfig {
    pub name: String,
    pub mode: String,
    pub amount: f64,
    pub seeds: Vec<u64>,
    /// Training epochs; defaults to the base model's budget.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_one")]
    pub layer_floor: usize,
}

impl ScratchRunConfig {
    pub fn mode(&self) -> Result<ScratchMode> {
        ScratchMode::from_name(&self.mode).ok_or_else(|| {
            Error::Config(format!(
                "scratch[{}].mode: unknown mode `{}` (neuron_fraction | connection_fraction | from_neuron_report)",
                self.name, self.mode
            ))
        })
    }

    /// Which pruning level this scratch family compares against in reports.
    pub fn analog_level(&self) -> Result<PruneLevel> {
        Ok(match self.mode()? {
            ScratchMode::ConnectionFraction => PruneLevel::Parameter,
            ScratchMode::NeuronFraction | ScratchMode::FromNeuronReport => PruneLevel::Neuron,
        })
    }
}

fn default_target_fpr() -> f64 {
    0.001
}
fn default_fraction() -> f64 {
    0.10
}
fn default_one() -> usize {
    1
}
fn default_finetune_samples() -> usize {
    10_000
}
fn default_batch_size() -> usize {
    128
}
fn default_learning_rate() -> f32 {
    0.01
}
fn default_scope() -> String {
    "per_layer".into()
}
fn default_damage_samples() -> usize {
    4096
}
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.spec.is_none() == self.model.scale.is_none() {
            return Err(Error::Config(
                "model: exactly one of `spec` or `scale` must be given".into(),
            ));
        }
        if let DatasetConfig::Synth(s) = &self.dataset {
            s.validate()
                .map_err(|e| Error::Config(format!("dataset.synth: {e}")))?;
        }
        if let DatasetConfig::Csv { train, test } = &self.dataset {
            if train == test {
                return Err(Error::Config(
                    "dataset.csv: train and test must be distinct files".into(),
                ));
            }
        }
        if !(self.target_fpr > 0.0 && self.target_fpr < 1.0) {
            return Err(Error::Config(format!(
                "target_fpr {} outside (0, 1)",
                self.target_fpr
            )));
        }
        let mut names = std::collections::BTreeSet::new();
        for r in &self.runs {
            if !names.insert(r.name.clone()) {
                return Err(Error::Config(format!("duplicate run name `{}`", r.name)));
            }
            if r.seeds.is_empty() {
                return Err(Error::Config(format!("runs[{}].seeds is empty", r.name)));
            }
            let level = r.level()?;
            let method = r.method()?;
            r.scope()?;
            if level == PruneLevel::Parameter {
                match method {
                    SelectionMethod::Damage(_) => {}
                    _ => {
                        return Err(Error::Config(format!(
                            "runs[{}]: method `{}` is neuron-level only",
                            r.name, r.method
                        )))
                    }
                }
            }
            if let SelectionMethod::Damage(DamageMethod::ObdSd) = method {
                if r.damage_samples < 2 {
                    return Err(Error::Config(format!(
                        "runs[{}]: obd_sd needs damage_samples >= 2",
                        r.name
                    )));
                }
            }
        }
        for s in &self.scratch {
            if !names.insert(s.name.clone()) {
                return Err(Error::Config(format!("duplicate run name `{}`", s.name)));
            }
            if s.seeds.is_empty() {
                return Err(Error::Config(format!("scratch[{}].seeds is empty", s.name)));
            }
            s.mode()?;
            if !(0.0..1.0).contains(&s.amount) {
                return Err(Error::Config(format!(
                    "scratch[{}].amount {} outside [0, 1)",
                    s.name, s.amount
                )));
            }
        }
        Ok(())
    }

    /// Resolves the base architecture against the dataset feature width.
    pub fn resolve_spec(&self, feature_dim: usize) -> Result<ModelSpec> {
        let spec = match (&self.model.spec, self.model.scale) {
            (Some(s), None) => {
                if s.input_dim != feature_dim {
                    return Err(Error::Config(format!(
                        "model.spec.input_dim {} != dataset feature dim {feature_dim}",
                        s.input_dim
                    )));
                }
                s.clone()
            }
            (None, Some(scale)) => ModelSpec::scaled_default(feature_dim, scale)
                .map_err(|e| Error::Config(format!("model.scale: {e}")))?,
            _ => unreachable!("validated"),
        };
        spec.validate()
            .map_err(|e| Error::Config(format!("model.spec: {e}")))?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dataset": { "synth": { "n_train": 1000, "n_test": 200,
                                 "feature_dim": 8, "pos_balance_train": 0.75,
                                 "pos_balance_test": 0.8, "difficulty": 3.0,
                                 "seed": 1 } },
        "model": { "scale": 0.03125 },
        "train": { "epochs": 2, "seed": 3 }
    }"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.target_fpr, 0.001);
        let spec = cfg.resolve_spec(8).unwrap();
        assert_eq!(spec.hidden_widths(), vec![32, 24, 16, 16, 16]);
    }

    #[test]
    fn unknown_fields_are_reported() {
        let bad = MINIMAL.replace("\"epochs\": 2", "\"epochs\": 2, \"optimizer\": \"adam\"");
        let err = ExperimentConfig::from_json(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("optimizer"), "{msg}");
    }

    #[test]
    fn duplicate_run_names_are_rejected() {
        let with_runs = MINIMAL.replace(
            "\"train\": { \"epochs\": 2, \"seed\": 3 }",
            r#""train": { "epochs": 2, "seed": 3 },
               "runs": [
                 { "name": "a", "level": "parameter", "method": "random", "rounds": 1, "seeds": [1] },
                 { "name": "a", "level": "parameter", "method": "magnitude", "rounds": 1, "seeds": [1] }
               ]"#,
        );
        let err = ExperimentConfig::from_json(&with_runs).unwrap_err();
        assert!(err.to_string().contains("duplicate run name"));
    }

    #[test]
    fn parameter_level_rejects_neuron_only_methods() {
        let with_runs = MINIMAL.replace(
            "\"train\": { \"epochs\": 2, \"seed\": 3 }",
            r#""train": { "epochs": 2, "seed": 3 },
               "runs": [
                 { "name": "m", "level": "parameter", "method": "merge", "rounds": 1, "seeds": [1] }
               ]"#,
        );
        let err = ExperimentConfig::from_json(&with_runs).unwrap_err();
        assert!(err.to_string().contains("neuron-level only"));
    }

    #[test]
    fn model_requires_exactly_one_of_spec_and_scale() {
        let neither = MINIMAL.replace("{ \"scale\": 0.03125 }", "{}");
        assert!(ExperimentConfig::from_json(&neither).is_err());
    }
}
