//! Declarative run configuration.
//!
//! Runs are described by a flat TOML document with `[model]`, `[inference]`,
//! `[train]`, `[data]` and `[eval]` sections. Every field has a default;
//! unknown keys are rejected. Command-line flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use snlds_core::data::{BouncingBallConfig, Dataset, VehicleConfig};
use snlds_core::eval::Alignment;
use snlds_core::inference::InferenceConfig;
use snlds_core::model::{DiscreteInput, ModelConfig, TransitionFamily};
use snlds_core::nn::Activation;
use snlds_core::train::{AnnealSchedule, LrSchedule, Method, TrainConfig};

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub inference: InferenceSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_states: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    /// "linear", "mlp" or "gru".
    pub transition_family: String,
    /// "prev_observation" or "none".
    pub discrete_input: String,
    pub emission_hidden: Vec<usize>,
    pub transition_hidden: Vec<usize>,
    pub transition_gru_units: usize,
    pub discrete_hidden: Vec<usize>,
    /// "relu" or "tanh".
    pub activation: String,
    pub init_obs_log_scale: f64,
    pub init_trans_log_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            num_states: 3,
            latent_dim: 4,
            obs_dim: 1,
            transition_family: "gru".into(),
            discrete_input: "prev_observation".into(),
            emission_hidden: vec![8],
            transition_hidden: vec![32, 32],
            transition_gru_units: 4,
            discrete_hidden: vec![16],
            activation: "relu".into(),
            init_obs_log_scale: 0.0,
            init_trans_log_scale: 0.0,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> Result<ModelConfig> {
        let transition_family = match self.transition_family.as_str() {
            "linear" => TransitionFamily::Linear,
            "mlp" => TransitionFamily::Mlp,
            "gru" => TransitionFamily::Gru,
            other => bail!("unknown transition family {other:?} (expected linear, mlp or gru)"),
        };
        let discrete_input = match self.discrete_input.as_str() {
            "prev_observation" => DiscreteInput::PrevObservation,
            "none" => DiscreteInput::None,
            other => bail!("unknown discrete input {other:?} (expected prev_observation or none)"),
        };
        Ok(ModelConfig {
            num_states: self.num_states,
            latent_dim: self.latent_dim,
            obs_dim: self.obs_dim,
            transition_family,
            discrete_input,
            emission_hidden: self.emission_hidden.clone(),
            transition_hidden: self.transition_hidden.clone(),
            transition_gru_units: self.transition_gru_units,
            discrete_hidden: self.discrete_hidden.clone(),
            hidden_activation: parse_activation(&self.activation)?,
            init_obs_log_scale: self.init_obs_log_scale,
            init_trans_log_scale: self.init_trans_log_scale,
        })
    }
}

fn parse_activation(name: &str) -> Result<Activation> {
    match name {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        other => bail!("unknown activation {other:?} (expected relu or tanh)"),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub encoder_units: usize,
    pub causal_units: usize,
    pub state_head_hidden: Vec<usize>,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            encoder_units: 16,
            causal_units: 16,
            state_head_hidden: vec![32],
        }
    }
}

impl InferenceSection {
    pub fn to_inference_config(&self, model: &ModelConfig) -> InferenceConfig {
        InferenceConfig {
            obs_dim: model.obs_dim,
            latent_dim: model.latent_dim,
            encoder_units: self.encoder_units,
            causal_units: self.causal_units,
            state_head_hidden: self.state_head_hidden.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub initial_value: f64,
    pub decay_rate: f64,
    pub decay_steps: usize,
    pub start_step: usize,
    pub floor: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            initial_value: 0.0,
            decay_rate: 1.0,
            decay_steps: 1,
            start_step: 0,
            floor: 0.0,
        }
    }
}

impl ScheduleSection {
    fn to_schedule(&self) -> AnnealSchedule {
        AnnealSchedule {
            initial_value: self.initial_value,
            decay_rate: self.decay_rate,
            decay_steps: self.decay_steps,
            start_step: self.start_step,
            floor: self.floor,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSection {
    pub peak: f64,
    pub warmup_init: f64,
    pub warmup_steps: usize,
    pub decay_steps: usize,
    pub min: f64,
}

impl Default for LrSection {
    fn default() -> Self {
        LrSection {
            peak: 1e-3,
            warmup_init: 1e-3,
            warmup_steps: 0,
            decay_steps: 0,
            min: 1e-3,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// "marginalized" or "gumbel".
    pub method: String,
    pub total_steps: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub metrics_every: usize,
    pub checkpoint_every: usize,
    pub learning_rate: LrSection,
    pub beta: ScheduleSection,
    pub tau: ScheduleSection,
    pub gumbel_tau: ScheduleSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            method: "marginalized".into(),
            total_steps: 10_000,
            batch_size: 32,
            clip_norm: 5.0,
            metrics_every: 500,
            checkpoint_every: 0,
            learning_rate: LrSection::default(),
            beta: ScheduleSection::default(),
            tau: ScheduleSection {
                initial_value: 1.0,
                floor: 1.0,
                ..ScheduleSection::default()
            },
            gumbel_tau: ScheduleSection {
                initial_value: 1.0,
                floor: 0.5,
                ..ScheduleSection::default()
            },
        }
    }
}

impl TrainSection {
    pub fn method(&self) -> Result<Method> {
        match self.method.as_str() {
            "marginalized" => Ok(Method::Marginalized),
            "gumbel" => Ok(Method::GumbelSoftmax),
            other => bail!("unknown training method {other:?} (expected marginalized or gumbel)"),
        }
    }

    pub fn to_train_config(&self, seed: u64, alignment: Alignment) -> TrainConfig {
        TrainConfig {
            total_steps: self.total_steps,
            start_step: 0,
            batch_size: self.batch_size,
            seed,
            learning_rate: LrSchedule {
                warmup_init: self.learning_rate.warmup_init,
                peak: self.learning_rate.peak,
                warmup_steps: self.learning_rate.warmup_steps,
                decay_steps: self.learning_rate.decay_steps,
                min: self.learning_rate.min,
            },
            beta: self.beta.to_schedule(),
            tau: self.tau.to_schedule(),
            gumbel_tau: self.gumbel_tau.to_schedule(),
            clip_norm: self.clip_norm,
            metrics_every: self.metrics_every,
            checkpoint_every: self.checkpoint_every,
            eval_alignment: alignment,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// "bouncing_ball", "vehicle", or "file".
    pub generator: String,
    /// Dataset container path when `generator = "file"`.
    pub path: Option<PathBuf>,
    /// Held-out container path when `generator = "file"`.
    pub eval_path: Option<PathBuf>,
    pub num_sequences: usize,
    pub eval_sequences: usize,
    pub sequence_length: usize,
    pub noise_std: Option<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            generator: "bouncing_ball".into(),
            path: None,
            eval_path: None,
            num_sequences: 1000,
            eval_sequences: 200,
            sequence_length: 100,
            noise_std: None,
        }
    }
}

impl DataSection {
    /// Generate or load the training and held-out datasets. Generated
    /// held-out sequences use the trajectory substreams after the training
    /// ones, so the two never overlap.
    pub fn build(&self, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
        match self.generator.as_str() {
            "file" => {
                let path = self
                    .path
                    .as_ref()
                    .context("data.generator = \"file\" needs data.path")?;
                let train = Dataset::load(path)?;
                let eval = match &self.eval_path {
                    Some(p) => Some(Dataset::load(p)?),
                    None => None,
                };
                Ok((train, eval))
            }
            name => {
                let total = self.num_sequences + self.eval_sequences;
                let all = self.generate(name, seed, self.sequence_length, total)?;
                let mut train = all;
                let eval_set = Dataset {
                    trajectories: train.trajectories.split_off(self.num_sequences),
                };
                let eval = (!eval_set.is_empty()).then_some(eval_set);
                Ok((train, eval))
            }
        }
    }

    pub fn generate(&self, name: &str, seed: u64, steps: usize, count: usize) -> Result<Dataset> {
        match name {
            "bouncing_ball" => {
                let mut cfg = BouncingBallConfig::default();
                if let Some(std) = self.noise_std {
                    cfg.noise_std = std;
                }
                Ok(snlds_core::data::gen_bouncing_ball(seed, steps, count, &cfg)?)
            }
            "vehicle" => {
                let mut cfg = VehicleConfig::default();
                if let Some(std) = self.noise_std {
                    cfg.noise_std = std;
                }
                Ok(snlds_core::data::gen_vehicle(seed, steps, count, &cfg)?)
            }
            other => bail!("unknown generator {other:?} (expected bouncing_ball, vehicle or file)"),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// "permutation", "greedy" or "merging".
    pub alignment: String,
    pub tolerances: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            alignment: "permutation".into(),
            tolerances: vec![0, 5],
        }
    }
}

impl EvalSection {
    pub fn alignment(&self) -> Result<Alignment> {
        match self.alignment.as_str() {
            "permutation" => Ok(Alignment::Permutation),
            "greedy" => Ok(Alignment::Greedy),
            "merging" => Ok(Alignment::Merging),
            other => bail!("unknown alignment {other:?} (expected permutation, greedy or merging)"),
        }
    }
}
