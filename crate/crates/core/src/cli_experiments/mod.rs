//! Experiment configuration, checkpoints, training and evaluation drivers,
//! and plot-data emission.

pub mod checkpoint;
pub mod eval;
pub mod plot;
pub mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta_learning::TrainConfig;
use crate::networks::{Activation, Architecture, MlpSpec};
use crate::task_environments::{BlobEnv, Environment, FeatureEpisodes, RegressionEnv};

pub use checkpoint::{Checkpoint, ModelState};
pub use eval::{run_eval, EvalReport};
pub use plot::emit_plot_data;
pub use run::{run_train, TrainOutcome};

pub const REGRESSION_PRESET: &str = "regression-appendix-d";
pub const CLASSIFICATION_PRESET: &str = "classification-appendix-f";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Simpa,
    Maml,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Simpa => "simpa",
            Mode::Maml => "maml",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureEnvConfig {
    pub path: PathBuf,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_v_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    Regression(RegressionEnv),
    Blobs(BlobEnv),
    Features(FeatureEnvConfig),
}

impl EnvConfig {
    pub fn build(&self) -> Result<Environment> {
        Ok(match self {
            EnvConfig::Regression(e) => Environment::Regression(*e),
            EnvConfig::Blobs(e) => {
                e.validate()?;
                Environment::Blobs(*e)
            }
            EnvConfig::Features(f) => Environment::Features(FeatureEpisodes::load(&f.path, f.n_way, f.k_shot, f.m_v_per_class)?),
        })
    }
}

/// Hidden widths of the four networks; input and output widths follow the
/// environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub latent_dim: usize,
    pub base_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
}

impl ArchConfig {
    pub fn build(&self, input_dim: usize, output_dim: usize) -> Result<Architecture> {
        let base = MlpSpec::with_hidden(input_dim, &self.base_hidden, output_dim, Activation::Relu, Activation::Identity)?;
        Architecture::new(base, self.latent_dim, &self.generator_hidden, &self.discriminator_hidden, &self.encoder_hidden, Activation::Tanh)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Reliability bins (classification) or interior coverage levels + 1 (regression).
    pub bins: usize,
    /// Draws per query point from the regression predictive used for coverage.
    pub readout_draws: usize,
    /// Grid size of the regression curve emitted for plotting.
    pub curve_points: usize,
    /// Hidden query set size for bound checks; regression only.
    pub oracle_points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub mode: Mode,
    pub environment: EnvConfig,
    pub architecture: ArchConfig,
    pub train: TrainConfig,
    pub checkpoint_every: u64,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn regression_preset() -> Self {
        Self {
            name: REGRESSION_PRESET.into(),
            mode: Mode::Simpa,
            environment: EnvConfig::Regression(RegressionEnv::default()),
            architecture: ArchConfig {
                latent_dim: 40,
                base_hidden: vec![40, 40],
                generator_hidden: vec![128, 512],
                discriminator_hidden: vec![512, 128, 40],
                encoder_hidden: vec![40, 40],
            },
            train: TrainConfig::regression_default(),
            checkpoint_every: 500,
            eval: EvalConfig { bins: 10, readout_draws: 256, curve_points: 201, oracle_points: None },
        }
    }

    pub fn classification_preset() -> Self {
        let env = BlobEnv { n_way: 5, k_shot: 1, m_v_per_class: 15, dim: 16, center_scale: 4.0, min_center_distance: 4.0, point_std: 1.0 };
        Self {
            name: CLASSIFICATION_PRESET.into(),
            mode: Mode::Simpa,
            environment: EnvConfig::Blobs(env),
            architecture: ArchConfig {
                latent_dim: 128,
                base_hidden: vec![128, 32],
                generator_hidden: vec![256, 512],
                discriminator_hidden: vec![512, 256, 128],
                encoder_hidden: vec![256, 256],
            },
            train: TrainConfig::classification_default(),
            checkpoint_every: 500,
            eval: EvalConfig { bins: 10, readout_draws: 256, curve_points: 0, oracle_points: None },
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            REGRESSION_PRESET => Some(Self::regression_preset()),
            CLASSIFICATION_PRESET => Some(Self::classification_preset()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name or the path of a JSON config file.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(p) = Self::preset(spec) {
            return Ok(p);
        }
        Self::from_json(&std::fs::read_to_string(Path::new(spec))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.checkpoint_every == 0 {
            return Err(Error::Config { field: "checkpoint_every".into(), reason: "must be at least 1".into() });
        }
        if self.architecture.latent_dim == 0 {
            return Err(Error::Config { field: "architecture.latent_dim".into(), reason: "must be at least 1".into() });
        }
        if self.eval.bins == 0 || self.eval.readout_draws == 0 {
            return Err(Error::Config { field: "eval".into(), reason: "bins and readout_draws must be positive".into() });
        }
        if let EnvConfig::Blobs(b) = &self.environment {
            b.validate().map_err(|e| Error::Config { field: "environment".into(), reason: e.to_string() })?;
        }
        Ok(())
    }

    pub fn environment(&self) -> Result<Environment> {
        let mut env = self.environment.build()?;
        if let (Environment::Regression(r), Some(n)) = (&mut env, self.eval.oracle_points) {
            r.oracle_points = Some(n);
        }
        Ok(env)
    }

    pub fn architecture_for(&self, env: &Environment) -> Result<Architecture> {
        self.architecture.build(env.input_dim(), env.output_dim())
    }
}

/// Names the offending field when serde reports one.
fn config_error(e: serde_json::Error) -> Error {
    let msg = e.to_string();
    let field = msg.split('`').nth(1).filter(|_| msg.starts_with("missing field") || msg.starts_with("unknown field"));
    match field {
        Some(f) => Error::Config { field: f.to_string(), reason: msg.clone() },
        None => Error::Json(e),
    }
}
