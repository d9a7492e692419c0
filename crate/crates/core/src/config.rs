//! Strict TOML experiment configuration.
//!
//! ```toml
//! seed = 0
//! output_dir = "crisp-out"
//!
//! [protocol]
//! n_ini = 4
//! n_inc = 2
//! steps = 3
//!
//! [generator]        # GeneratorConfig fields except the seed
//! [train]            # optimisation and model size
//! [ablation]         # use_arsp, use_isc, use_ic, init_strategy
//! ```
//!
//! Every section and key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::continual_engine::{ClassIncrementalProtocol, InitStrategy, Regime, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::prompts::SimilarityMode;
use crate::seeding;
use crate::synthbench::GeneratorConfig;

pub const OUTPUT_DIR_ENV: &str = "CRISP_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub n_ini: usize,
    pub n_inc: usize,
    pub steps: usize,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            n_ini: 4,
            n_inc: 2,
            steps: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    /// Videos per category at step 0.
    pub videos_per_category: usize,
    /// Scale incremental steps so every step holds as many videos as step 0.
    pub balance_steps: bool,
    pub frames_per_video: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub blob_min: usize,
    pub blob_max: usize,
    pub max_instances: usize,
    pub motion_step: usize,
    pub noise: f64,
    pub feature_dim: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            videos_per_category: g.videos_per_category,
            balance_steps: true,
            frames_per_video: g.frames_per_video,
            grid_height: g.grid_height,
            grid_width: g.grid_width,
            blob_min: g.blob_min,
            blob_max: g.blob_max,
            max_instances: g.max_instances,
            motion_step: g.motion_step,
            noise: g.noise,
            feature_dim: g.feature_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub iterations_per_step: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub lambda_isc: f64,
    pub lambda_ic: f64,
    pub similarity: SimilarityMode,
    pub regime: Regime,
    pub no_object_weight: f64,
    pub queries_per_category: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub prompt_scale: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            iterations_per_step: t.iterations_per_step,
            batch_size: t.batch_size,
            grad_clip: t.grad_clip,
            lambda_isc: t.weights.lambda_isc,
            lambda_ic: t.weights.lambda_ic,
            similarity: t.similarity,
            regime: t.regime,
            no_object_weight: t.no_object_weight,
            queries_per_category: t.queries_per_category,
            num_layers: t.num_layers,
            ffn_dim: t.ffn_dim,
            prompt_scale: t.prompt_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub use_arsp: bool,
    pub use_isc: bool,
    pub use_ic: bool,
    pub init_strategy: InitStrategy,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            use_arsp: true,
            use_isc: true,
            use_ic: true,
            init_strategy: InitStrategy::Pca,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub protocol: ProtocolSection,
    pub generator: GeneratorSection,
    pub train: TrainSection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("crisp-out"),
            protocol: ProtocolSection::default(),
            generator: GeneratorSection::default(),
            train: TrainSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the line and column of the offence.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(one_line(&toml_error(text, &e))))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let protocol = self.protocol()?;
        for t in 0..protocol.steps {
            self.generator_config(&protocol, t).validate()?;
        }
        self.train_config().validate()
    }

    pub fn protocol(&self) -> Result<ClassIncrementalProtocol> {
        let p = &self.protocol;
        ClassIncrementalProtocol::new(p.n_ini, p.n_inc, p.steps)
    }

    /// Generator settings for step `t` with the named `generator` sub-seed.
    pub fn generator_config(&self, protocol: &ClassIncrementalProtocol, t: usize) -> GeneratorConfig {
        let g = &self.generator;
        let step_classes = protocol.class_sets[t].len();
        let videos_per_category = if g.balance_steps {
            (g.videos_per_category * protocol.n_ini).div_ceil(step_classes)
        } else {
            g.videos_per_category
        };
        GeneratorConfig {
            num_categories: protocol.num_categories(),
            videos_per_category,
            frames_per_video: g.frames_per_video,
            grid_height: g.grid_height,
            grid_width: g.grid_width,
            blob_min: g.blob_min,
            blob_max: g.blob_max,
            max_instances: g.max_instances,
            motion_step: g.motion_step,
            noise: g.noise,
            feature_dim: g.feature_dim,
            seed: seeding::sub_seed(self.seed, "generator"),
        }
    }

    /// Training settings with the named `training` sub-seed.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let a = &self.ablation;
        TrainConfig {
            learning_rate: t.learning_rate,
            iterations_per_step: t.iterations_per_step,
            batch_size: t.batch_size,
            grad_clip: t.grad_clip,
            seed: seeding::sub_seed(self.seed, "training"),
            weights: LossWeights {
                lambda_isc: t.lambda_isc,
                lambda_ic: t.lambda_ic,
            },
            init_strategy: a.init_strategy,
            similarity: t.similarity,
            regime: t.regime,
            use_arsp: a.use_arsp,
            use_isc: a.use_isc,
            use_ic: a.use_ic,
            no_object_weight: t.no_object_weight,
            queries_per_category: t.queries_per_category,
            num_layers: t.num_layers,
            ffn_dim: t.ffn_dim,
            prompt_scale: t.prompt_scale,
        }
    }

    /// `CRISP_OUTPUT_DIR` when set, else the configured directory.
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map_or_else(|| self.output_dir.clone(), PathBuf::from)
    }
}

/// "line L, column C: message" from a TOML error.
fn toml_error(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message();
    match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            format!("line {line}, column {column}: {msg}")
        }
        None => msg.to_string(),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_takes_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.protocol().unwrap().class_sets.len(), 3);
    }

    #[test]
    fn unknown_key_is_named_with_position() {
        let err = ExperimentConfig::from_toml("seed = 1\n[train]\nlr = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("config-error: line 3, column 1"), "{msg}");
        assert!(msg.contains("lr"), "{msg}");
    }

    #[test]
    fn sections_map_onto_engine_configs() {
        let c = ExperimentConfig::from_toml(
            "seed = 7\n[ablation]\nuse_ic = false\ninit_strategy = \"replicate_average\"\n[train]\nlambda_isc = 1.5\n",
        )
        .unwrap();
        let t = c.train_config();
        assert!(!t.use_ic && t.use_arsp);
        assert_eq!(t.init_strategy, InitStrategy::ReplicateAverage);
        assert_eq!(t.weights.lambda_isc, 1.5);
        assert_ne!(t.seed, c.generator_config(&c.protocol().unwrap(), 0).seed);
    }

    #[test]
    fn balanced_steps_hold_equal_video_counts() {
        let c = ExperimentConfig::default();
        let p = c.protocol().unwrap();
        let per_step: Vec<usize> = (0..p.steps)
            .map(|t| c.generator_config(&p, t).videos_per_category * p.class_sets[t].len())
            .collect();
        assert_eq!(per_step, vec![252, 252, 252]);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("[generator]\nblob_max = 40\n").is_err());
        assert!(ExperimentConfig::from_toml("[protocol]\nn_ini = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nbatch_size = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("seed = \"x\"\n").is_err());
    }
}
