//! File configuration.
//!
//! A run is configured by one TOML file whose keys mirror the experiment
//! structures. Every key is optional (an empty file is the standard setup),
//! unknown keys are hard errors, and `load_config(serialize(c)) == c` for
//! any valid configuration. The `[bench]` table accepts either explicit
//! generator fields or `preset = "standard-bench"`; explicit fields override
//! the preset they sit next to.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{standard_bench, BenchSpec};
use crate::error::{Error, Result};
use crate::model::{Activation, LossKind, ModelSpec};
use crate::pipeline::{ExperimentConfig, ReplayReference};
use crate::policy::{DualState, PolicyHyper};
use crate::selection::SelectionConfig;
use crate::verify::VerifySuite;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub seed: u64,
    pub episodes: usize,
    pub steps: usize,
    pub target_steps: usize,
    pub learning_rate: f64,
    pub delta: f64,
    pub eval_every: usize,
    pub cluster_refresh_every: usize,
    pub refresh_anchor: bool,
    pub pretrain_general_steps: usize,
    pub anchor_size: usize,
    pub use_active_anchor: bool,
    pub replay_reference: ReplayReference,
    pub use_rl_policy: bool,
    pub static_alpha: f64,
    pub navigator: ModelSection,
    pub target: ModelSection,
    pub selection: SelectionConfig,
    pub policy: PolicyHyper,
    pub dual: DualState,
    pub bench: BenchSection,
    pub verify: VerifySuite,
}

impl Default for FileConfig {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        FileConfig {
            seed: exp.seed,
            episodes: exp.episodes,
            steps: exp.steps,
            target_steps: exp.target_steps,
            learning_rate: exp.learning_rate,
            delta: exp.delta,
            eval_every: exp.eval_every,
            cluster_refresh_every: exp.cluster_refresh_every,
            refresh_anchor: exp.refresh_anchor,
            pretrain_general_steps: exp.pretrain_general_steps,
            anchor_size: exp.anchor_size,
            use_active_anchor: exp.use_active_anchor,
            replay_reference: exp.replay_reference,
            use_rl_policy: exp.use_rl_policy,
            static_alpha: exp.static_alpha,
            navigator: ModelSection::from_spec(&exp.navigator),
            target: ModelSection::from_spec(&exp.target),
            selection: exp.selection,
            policy: exp.policy,
            dual: exp.dual,
            bench: BenchSection::default(),
            verify: VerifySuite::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layer_widths: vec![16, 16, 1],
            activation: Activation::Tanh,
            loss: LossKind::SquaredError,
        }
    }
}

impl ModelSection {
    fn from_spec(spec: &ModelSpec) -> Self {
        ModelSection {
            layer_widths: spec.layer_widths.clone(),
            activation: spec.activation,
            loss: spec.loss,
        }
    }

    fn to_spec(&self, what: &str) -> Result<ModelSpec> {
        ModelSpec::new(self.layer_widths.clone(), self.activation, self.loss)
            .map_err(|e| Error::Config(format!("{what}: {e}")))
    }
}

/// Generator settings; a preset expands first and explicit keys override it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_domain: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_general: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conflict_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synergy_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl BenchSection {
    pub fn expand(&self) -> Result<BenchSpec> {
        let mut spec = match self.preset.as_deref() {
            None | Some("standard-bench") => standard_bench(),
            Some(other) => {
                return Err(Error::Config(format!("bench.preset: unknown preset `{other}`")))
            }
        };
        if let Some(v) = self.input_dim {
            spec.input_dim = v;
        }
        if let Some(v) = self.n_domain {
            spec.n_domain = v;
        }
        if let Some(v) = self.n_general {
            spec.n_general = v;
        }
        if let Some(v) = self.conflict_fraction {
            spec.conflict_fraction = v;
        }
        if let Some(v) = self.synergy_fraction {
            spec.synergy_fraction = v;
        }
        if let Some(v) = self.noise_std {
            spec.noise_std = v;
        }
        if let Some(v) = self.seed {
            spec.seed = v;
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl FileConfig {
    /// Materializes the experiment configuration, validating everything.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let config = ExperimentConfig {
            navigator: self.navigator.to_spec("navigator")?,
            target: self.target.to_spec("target")?,
            anchor_size: self.anchor_size,
            use_active_anchor: self.use_active_anchor,
            replay_reference: self.replay_reference,
            use_rl_policy: self.use_rl_policy,
            static_alpha: self.static_alpha,
            selection: self.selection,
            policy: self.policy,
            dual: self.dual,
            episodes: self.episodes,
            steps: self.steps,
            target_steps: self.target_steps,
            learning_rate: self.learning_rate,
            delta: self.delta,
            eval_every: self.eval_every,
            cluster_refresh_every: self.cluster_refresh_every,
            refresh_anchor: self.refresh_anchor,
            pretrain_general_steps: self.pretrain_general_steps,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn bench_spec(&self) -> Result<BenchSpec> {
        self.bench.expand()
    }

    pub fn verify_suite(&self) -> Result<VerifySuite> {
        self.verify.validate()?;
        Ok(self.verify.clone())
    }

    /// Applies a run-seed override to every seeded section.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.bench.seed = Some(seed);
        self.verify.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parses and fully validates a configuration file. Unknown keys are
/// reported with their key paths; an empty file yields the defaults.
pub fn load_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<FileConfig> {
    let config: FileConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    // Surface validation errors eagerly so the CLI fails before running.
    config.experiment()?;
    config.bench_spec()?;
    config.verify_suite()?;
    Ok(config)
}
