//! Lorenz 63 dynamics and dataset generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{rk4_step, GenError};
use crate::dataio::{DatasetHeader, Normalizer, TrajectoryDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }
}

/// Pre-warmup initial states are drawn uniformly from this box; the long
/// warmup makes the exact choice immaterial.
pub const INIT_BOX: [(f64, f64); 3] = [(-20.0, 20.0), (-25.0, 25.0), (5.0, 45.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LorenzGenConfig {
    pub params: LorenzParams,
    /// Solver step.
    pub h: f64,
    pub warmup_steps: usize,
    pub downsample_factor: usize,
    pub n_trajectories: usize,
    /// Raw solver steps recorded per trajectory (before downsampling).
    pub steps_per_trajectory: usize,
    pub seed: u64,
}

impl Default for LorenzGenConfig {
    fn default() -> Self {
        Self {
            params: LorenzParams::default(),
            h: 0.001,
            warmup_steps: 100_000,
            downsample_factor: 400,
            n_trajectories: 16,
            steps_per_trajectory: 40_000,
            seed: 0,
        }
    }
}

impl LorenzGenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.h <= 0.0 {
            return Err(GenError::InvalidConfig("h must be positive".into()));
        }
        if self.downsample_factor == 0 {
            return Err(GenError::InvalidConfig(
                "downsample_factor must be >= 1".into(),
            ));
        }
        if self.n_trajectories == 0 || self.steps_per_trajectory < self.downsample_factor {
            return Err(GenError::InvalidConfig(
                "need at least one trajectory and one recorded state".into(),
            ));
        }
        Ok(())
    }

    /// Recorded states per trajectory after downsampling.
    pub fn recorded_steps(&self) -> usize {
        self.steps_per_trajectory / self.downsample_factor
    }

    /// Effective sampling interval of the recorded states.
    pub fn effective_dt(&self) -> f64 {
        self.h * self.downsample_factor as f64
    }
}

pub fn lorenz_rhs(state: &[f64; 3], p: &LorenzParams) -> [f64; 3] {
    let [x, y, z] = *state;
    [
        p.sigma * (y - x),
        p.rho * x - y - x * z,
        x * y - p.beta * z,
    ]
}

/// Per-trajectory RNG stream: one ChaCha8 generator keyed by the dataset
/// seed with the trajectory index as the stream id, so generation order and
/// worker count cannot change the data.
fn trajectory_rng(seed: u64, trajectory: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trajectory as u64);
    rng
}

fn simulate_trajectory(
    config: &LorenzGenConfig,
    trajectory: usize,
) -> Result<Vec<f64>, GenError> {
    let mut rng = trajectory_rng(config.seed, trajectory);
    let mut state = [
        rng.gen_range(INIT_BOX[0].0..INIT_BOX[0].1),
        rng.gen_range(INIT_BOX[1].0..INIT_BOX[1].1),
        rng.gen_range(INIT_BOX[2].0..INIT_BOX[2].1),
    ];
    let rhs = |u: &[f64; 3]| lorenz_rhs(u, &config.params);
    for step in 0..config.warmup_steps {
        state = rk4_step(&rhs, &state, config.h);
        if !state.iter().all(|v| v.is_finite()) {
            return Err(GenError::Blowup { trajectory, step });
        }
    }
    let records = config.recorded_steps();
    let mut out = Vec::with_capacity(records * 3);
    for rec in 0..records {
        for sub in 0..config.downsample_factor {
            state = rk4_step(&rhs, &state, config.h);
            if !state.iter().all(|v| v.is_finite()) {
                return Err(GenError::Blowup {
                    trajectory,
                    step: config.warmup_steps + rec * config.downsample_factor + sub,
                });
            }
        }
        out.extend_from_slice(&state);
    }
    Ok(out)
}

/// Generates, warms up, and downsamples trajectories; deterministic per seed.
pub fn generate_lorenz_dataset(config: &LorenzGenConfig) -> Result<TrajectoryDataset, GenError> {
    config.validate()?;
    let trajectories: Vec<Vec<f64>> = (0..config.n_trajectories)
        .into_par_iter()
        .map(|t| simulate_trajectory(config, t))
        .collect::<Result<_, _>>()?;
    let payload: Vec<f64> = trajectories.into_iter().flatten().collect();
    let normalizer = Normalizer::fit(&payload, 3);
    let header = DatasetHeader {
        system: "lorenz".into(),
        state_dim: 3,
        n_trajectories: config.n_trajectories,
        steps_per_trajectory: config.recorded_steps(),
        dt: config.effective_dt(),
        generation: serde_json::to_value(config).expect("config serializes"),
        normalizer,
        config_hash: None,
    };
    Ok(TrajectoryDataset::new(header, payload)?)
}
