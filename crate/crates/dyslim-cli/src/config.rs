//! Run configuration file: one JSON document with system / model /
//! objective / training / evaluation sections. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use dyslim::eval::W1Feature;
use dyslim::metrics::SinkhornConfig;
use dyslim::models::StepperSpec;
use dyslim::objectives::{DiscountSchedule, DyslimConfig};
use dyslim::systems::ks::KsConfig;
use dyslim::systems::lorenz::LorenzGenConfig;
use dyslim::training::{
    AdamParams, LrSchedule, PushforwardLengthSampling, RolloutSchedule, TrainConfig,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KsGeneration {
    pub config: KsConfig,
    pub n_trajectories: usize,
    pub record_steps: usize,
    pub seed: u64,
}

impl Default for KsGeneration {
    fn default() -> Self {
        Self {
            config: KsConfig::default(),
            n_trajectories: 8,
            record_steps: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSection {
    Lorenz {
        #[serde(default)]
        generation: LorenzGenConfig,
    },
    Ks {
        #[serde(default)]
        generation: KsGeneration,
    },
}

impl SystemSection {
    pub fn name(&self) -> &'static str {
        match self {
            SystemSection::Lorenz { .. } => "lorenz",
            SystemSection::Ks { .. } => "ks",
        }
    }
}

fn default_checkpoint_interval() -> u64 {
    10_000
}

fn default_pf_sampling() -> PushforwardLengthSampling {
    PushforwardLengthSampling::Uniform
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub total_steps: u64,
    pub batch_size: usize,
    pub window: usize,
    pub rollout: RolloutSchedule,
    #[serde(default = "default_pf_sampling")]
    pub pushforward_length_sampling: PushforwardLengthSampling,
    pub discount: DiscountSchedule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: u64,
    #[serde(default)]
    pub adam: AdamParams,
}

fn default_sd_every() -> usize {
    1
}

fn default_max_snapshots() -> usize {
    2000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Rollout length in recorded steps, including the initial state.
    pub rollout_steps: usize,
    #[serde(default = "default_sd_every")]
    pub sd_every: usize,
    #[serde(default)]
    pub sinkhorn: SinkhornConfig,
    /// Defaults to the per-system feature set when omitted.
    #[serde(default)]
    pub features: Option<Vec<W1Feature>>,
    #[serde(default = "default_max_snapshots")]
    pub max_snapshots: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub system: SystemSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<StepperSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<DyslimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvalSection>,
}

impl RunConfigFile {
    /// Overrides every seed the command line can take over.
    pub fn override_seed(&mut self, seed: u64) {
        match &mut self.system {
            SystemSection::Lorenz { generation } => generation.seed = seed,
            SystemSection::Ks { generation } => generation.seed = seed,
        }
        if let Some(training) = &mut self.training {
            training.seed = seed;
        }
    }

    pub fn train_config(&self) -> Option<TrainConfig> {
        let training = self.training.as_ref()?;
        let objective = self.objective.clone()?;
        Some(TrainConfig {
            system: self.system.name().to_string(),
            objective,
            learning_rate: training.learning_rate,
            lr_schedule: training.lr_schedule,
            total_steps: training.total_steps,
            batch_size: training.batch_size,
            window: training.window,
            rollout: training.rollout,
            pushforward_length_sampling: training.pushforward_length_sampling,
            discount: training.discount,
            seed: training.seed,
            checkpoint_interval: training.checkpoint_interval,
            adam: training.adam,
        })
    }
}
