//! Experiment configuration: strict TOML with every unknown key rejected,
//! so ablation configs cannot silently typo a knob.

use crate::ccfa::TargetStrategy;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::trainer::{AugmentationMode, ExperimentSetup, ModelConfig, StageConfig};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Which experiment variant to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// No augmentation.
    Baseline,
    /// Cross-class augmentation with the configured target strategy.
    Ccfa,
    /// Attack toward each sample's own (old) label.
    CcfaGt,
    /// Uniformly random eligible target classes.
    CcfaRandom,
    /// Lowest-confidence target classes.
    CcfaFarthest,
    /// PASS-style Gaussian-noise feature augmentation.
    GaussianNoise,
}

/// Exactly one data source must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticSpec>,
    pub feature_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub initial: usize,
    pub increment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory prefix; defaults to the method name.
    #[serde(default)]
    pub name: Option<String>,
    pub data: DataConfig,
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub stage: StageConfig,
    #[serde(default = "default_memory")]
    pub memory_per_class: usize,
    pub method: Method,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Explicit class permutation; defaults to a shuffle derived from the
    /// run seed.
    #[serde(default)]
    pub class_order: Option<Vec<usize>>,
    /// Attack the just-trained model instead of the previous snapshot
    /// during fine-tuning.
    #[serde(default)]
    pub finetune_attacks_current: bool,
    /// Write points_*.csv dumps after the run.
    #[serde(default)]
    pub dump_points: bool,
}

fn default_memory() -> usize {
    20
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.synthetic, &self.data.feature_file) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "exactly one data source: both synthetic and feature_file set".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "exactly one data source: neither synthetic nor feature_file set".into(),
                ))
            }
            _ => {}
        }
        if self.memory_per_class == 0 {
            return Err(Error::Config("memory_per_class must be >= 1".into()));
        }
        if self.stage.batch_size == 0 {
            return Err(Error::Config("stage.batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.stage.momentum) {
            return Err(Error::Config("stage.momentum must lie in [0, 1)".into()));
        }
        if self.stage.attack.alpha_lo > self.stage.attack.alpha_hi {
            return Err(Error::Config("attack alpha_lo must be <= alpha_hi".into()));
        }
        if self.stage.attack.top_k == 0 {
            return Err(Error::Config("attack top_k must be >= 1".into()));
        }
        Ok(())
    }

    /// Run directory name for a given seed.
    pub fn run_id(&self, seed: u64) -> String {
        let base = match &self.name {
            Some(n) => n.clone(),
            None => method_slug(self.method).to_string(),
        };
        format!("{base}_seed{seed}")
    }

    /// Translate the method into the trainer setup, overriding the attack's
    /// target strategy for the ablation methods.
    pub fn setup_for_seed(&self, seed: u64) -> ExperimentSetup {
        let mut stage = self.stage.clone();
        let mode = match self.method {
            Method::Baseline => AugmentationMode::None,
            Method::GaussianNoise => AugmentationMode::GaussianNoise,
            Method::Ccfa => AugmentationMode::Ccfa,
            Method::CcfaGt => {
                stage.attack.target_strategy = TargetStrategy::GroundTruth;
                AugmentationMode::Ccfa
            }
            Method::CcfaRandom => {
                stage.attack.target_strategy = TargetStrategy::Random;
                AugmentationMode::Ccfa
            }
            Method::CcfaFarthest => {
                stage.attack.target_strategy = TargetStrategy::Farthest;
                AugmentationMode::Ccfa
            }
        };
        ExperimentSetup {
            model: self.model.clone(),
            stage,
            memory_per_class: self.memory_per_class,
            mode,
            finetune_attacks_current: self.finetune_attacks_current,
            seed,
        }
    }
}

pub fn method_slug(method: Method) -> &'static str {
    match method {
        Method::Baseline => "baseline",
        Method::Ccfa => "ccfa",
        Method::CcfaGt => "ccfa_gt",
        Method::CcfaRandom => "ccfa_random",
        Method::CcfaFarthest => "ccfa_farthest",
        Method::GaussianNoise => "gaussian_noise",
    }
}

pub fn method_from_slug(slug: &str) -> Result<Method> {
    Ok(match slug {
        "baseline" => Method::Baseline,
        "ccfa" => Method::Ccfa,
        "ccfa_gt" => Method::CcfaGt,
        "ccfa_random" => Method::CcfaRandom,
        "ccfa_farthest" => Method::CcfaFarthest,
        "gaussian_noise" => Method::GaussianNoise,
        other => return Err(Error::Config(format!("unknown method '{other}'"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
method = "ccfa"

[data.synthetic]
dim = 4
classes = 4
train_per_class = 10
test_per_class = 4
concentration = 20.0

[split]
initial = 2
increment = 1
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.method, Method::Ccfa);
        assert_eq!(cfg.memory_per_class, 20);
        assert_eq!(cfg.stage.attack.multiplier, 5);
    }

    #[test]
    fn unknown_key_is_named() {
        let bad = format!("{MINIMAL}\nfoo = 1\n");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
    }

    #[test]
    fn nested_unknown_key_is_named() {
        let bad = MINIMAL.replace("[split]", "[stage]\nbogus_knob = 3\n\n[split]");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("bogus_knob"), "{err}");
    }

    #[test]
    fn dual_source_rejected() {
        let bad = format!("{MINIMAL}\n[data]\nfeature_file = \"x.bin\"\n");
        // toml will reject the duplicate [data] table; express it inline.
        let _ = bad;
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.data.feature_file = Some(PathBuf::from("x.bin"));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn resolved_round_trip_parses_back() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn ablation_methods_override_strategy() {
        let cfg = ExperimentConfig::from_toml(&MINIMAL.replace("\"ccfa\"", "\"ccfa_gt\"")).unwrap();
        let setup = cfg.setup_for_seed(1);
        assert_eq!(
            setup.stage.attack.target_strategy,
            TargetStrategy::GroundTruth
        );
    }
}
