//! Optimizer, schedules, batch sampling, and the training loop with
//! checkpointing and first-class divergence handling.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, ParamStore, Tape, TapeError};
use crate::dataio::{self, DataIoError, Normalizer, TensorArchive, TrajectoryDataset};
use crate::models::{BoundStepper, ModelError, StepperSpec, Surrogate};
use crate::objectives::{
    dyslim_total, BaseObjective, DiscountSchedule, DyslimConfig, ObjectiveError, WindowBatch,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config is for system {config:?} but the dataset holds {dataset:?}")]
    SystemMismatch { config: String, dataset: String },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint was written for config {checkpoint}, refusing resume under {current}")]
    ConfigHashMismatch { checkpoint: String, current: String },
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    DataIo(#[from] DataIoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators, shaped like the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamParams,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, hyper: AdamParams) -> Self {
        let shapes: Vec<Tensor> = store
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            hyper,
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    /// Standard bias-corrected update. Leaves all state untouched when any
    /// gradient is non-finite, so the caller can record a failure.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
    ) -> Result<(), TrainError> {
        if !grads.all_finite() {
            return Err(TrainError::InvalidConfig(
                "non-finite gradients reached the optimizer".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.hyper.beta1;
        let b2 = self.hyper.beta2;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for slot in 0..store.len() {
            let g = grads.slot(slot).data();
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            let p = store.value_at_mut(slot).data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.hyper.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// base·factor^⌊step/interval⌋
    Staircase { factor: f64, interval: u64 },
}

pub fn lr_at(base: f64, schedule: &LrSchedule, step: u64) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Staircase { factor, interval } => {
            base * factor.powi((step / interval) as i32)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSchedule {
    /// Steps between single increments of the rollout length.
    pub increment_interval: u64,
    pub max_len: usize,
}

pub fn rollout_len_at(schedule: &RolloutSchedule, step: u64) -> usize {
    let grown = 1 + (step / schedule.increment_interval) as usize;
    grown.min(schedule.max_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PushforwardLengthSampling {
    Fixed,
    /// Effective length drawn uniformly from 1..=ℓ per batch.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub system: String,
    pub objective: DyslimConfig,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Longest window the sampler may request (ℓ + 1 states).
    pub window: usize,
    pub rollout: RolloutSchedule,
    pub pushforward_length_sampling: PushforwardLengthSampling,
    pub discount: DiscountSchedule,
    pub seed: u64,
    pub checkpoint_interval: u64,
    #[serde(default)]
    pub adam: AdamParams,
}

impl TrainConfig {
    /// Full-scale Lorenz defaults; desk runs shrink steps and batch.
    pub fn lorenz_defaults() -> Self {
        Self {
            system: "lorenz".into(),
            objective: DyslimConfig::default(),
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Constant,
            total_steps: 500_000,
            batch_size: 2048,
            window: 10,
            rollout: RolloutSchedule {
                increment_interval: 50_000,
                max_len: 10,
            },
            pushforward_length_sampling: PushforwardLengthSampling::Uniform,
            discount: DiscountSchedule {
                ratio: 0.1,
                floor: 1e-7,
            },
            seed: 0,
            checkpoint_interval: 10_000,
            adam: AdamParams::default(),
        }
    }

    /// Full-scale Kuramoto–Sivashinsky defaults.
    pub fn ks_defaults() -> Self {
        Self {
            system: "ks".into(),
            objective: DyslimConfig {
                base: BaseObjective::Curriculum,
                ..DyslimConfig::default()
            },
            learning_rate: 5e-4,
            lr_schedule: LrSchedule::Staircase {
                factor: 0.5,
                interval: 60_000,
            },
            total_steps: 300_000,
            batch_size: 128,
            window: 10,
            rollout: RolloutSchedule {
                increment_interval: 60_000,
                max_len: 5,
            },
            pushforward_length_sampling: PushforwardLengthSampling::Uniform,
            discount: DiscountSchedule {
                ratio: 0.9,
                floor: 1e-3,
            },
            seed: 0,
            checkpoint_interval: 10_000,
            adam: AdamParams::default(),
        }
    }

    /// Pushforward variants floor the discount at 1e-4 on Lorenz.
    pub fn lorenz_pushforward_discount() -> DiscountSchedule {
        DiscountSchedule {
            ratio: 0.1,
            floor: 1e-4,
        }
    }

    fn validate(&self, dataset: &TrajectoryDataset) -> Result<(), TrainError> {
        if self.system != dataset.header.system {
            return Err(TrainError::SystemMismatch {
                config: self.system.clone(),
                dataset: dataset.header.system.clone(),
            });
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size and total_steps must be positive".into(),
            ));
        }
        if self.rollout.max_len == 0 || self.rollout.increment_interval == 0 {
            return Err(TrainError::InvalidConfig(
                "rollout schedule needs max_len >= 1 and a positive interval".into(),
            ));
        }
        if self.window < self.rollout.max_len + 1 {
            return Err(TrainError::InvalidConfig(format!(
                "window {} cannot cover rollouts of length {}",
                self.window, self.rollout.max_len
            )));
        }
        if dataset.header.steps_per_trajectory < self.window {
            return Err(TrainError::InvalidConfig(format!(
                "trajectories hold {} states, window needs {}",
                dataset.header.steps_per_trajectory, self.window
            )));
        }
        Ok(())
    }
}

/// Uniformly samples `batch` windows of `horizon + 1` consecutive states,
/// normalized with the given normalizer.
pub fn sample_windows(
    dataset: &TrajectoryDataset,
    normalizer: &Normalizer,
    rng: &mut ChaCha8Rng,
    batch: usize,
    horizon: usize,
) -> Result<WindowBatch, TrainError> {
    let t = dataset.header.steps_per_trajectory;
    let d = dataset.header.state_dim;
    if horizon + 1 > t {
        return Err(TrainError::InvalidConfig(format!(
            "window of {} states exceeds trajectory length {t}",
            horizon + 1
        )));
    }
    let mut starts = Vec::with_capacity(batch);
    for _ in 0..batch {
        let traj = rng.gen_range(0..dataset.header.n_trajectories);
        let start = rng.gen_range(0..t - horizon);
        starts.push((traj, start));
    }
    let mut states = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let mut data = vec![0.0; batch * d];
        for (i, &(traj, start)) in starts.iter().enumerate() {
            normalizer.apply_into(dataset.state(traj, start + k), &mut data[i * d..(i + 1) * d]);
        }
        states.push(Tensor::new(vec![batch, d], data).unwrap());
    }
    Ok(WindowBatch { states })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    InProgress,
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub step: u64,
    pub detail: String,
}

/// One training-log entry. `wall_ms` is measurement, not state: determinism
/// comparisons go through [`LogRow::determinism_key`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub rollout_len: usize,
    pub base: f64,
    pub reg_unconditional: f64,
    pub reg_conditional: f64,
    pub total: f64,
    pub wall_ms: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str =
        "step,lr,rollout_len,loss_base,loss_reg_uncond,loss_reg_cond,loss_total,wall_ms";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.step,
            self.lr,
            self.rollout_len,
            self.base,
            self.reg_unconditional,
            self.reg_conditional,
            self.total,
            self.wall_ms
        )
    }

    /// Everything except wall-clock, for bitwise reproducibility checks.
    pub fn determinism_key(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.rollout_len,
            self.base,
            self.reg_unconditional,
            self.reg_conditional,
            self.total
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngSnapshot {
    seed: u64,
    stream: u64,
    /// u128 word position, serialized as a decimal string.
    word_pos: String,
}

impl RngSnapshot {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| TrainError::BadCheckpoint("unparseable rng word position".into()))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    step: u64,
    status: RunStatus,
    config_hash: String,
    system: String,
    model_spec: StepperSpec,
    normalizer: Normalizer,
    adam: AdamParams,
    adam_step: u64,
    rng: RngSnapshot,
}

/// Everything needed to resume a run bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub status: RunStatus,
    pub config_hash: String,
    pub system: String,
    pub model_spec: StepperSpec,
    pub normalizer: Normalizer,
    pub params: ParamStore,
    pub adam: AdamState,
    rng: RngSnapshot,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), DataIoError> {
        let meta = CheckpointMeta {
            kind: "checkpoint".into(),
            step: self.step,
            status: self.status,
            config_hash: self.config_hash.clone(),
            system: self.system.clone(),
            model_spec: self.model_spec.clone(),
            normalizer: self.normalizer.clone(),
            adam: self.adam.hyper,
            adam_step: self.adam.step,
            rng: self.rng.clone(),
        };
        let mut archive =
            TensorArchive::new(serde_json::to_value(&meta).expect("meta serializes"));
        for (name, tensor) in self.params.iter() {
            archive.push(&format!("param/{name}"), tensor.clone());
        }
        for (slot, (name, _)) in self.params.iter().enumerate() {
            archive.push(&format!("adam_m/{name}"), self.adam.m[slot].clone());
            archive.push(&format!("adam_v/{name}"), self.adam.v[slot].clone());
        }
        dataio::write_archive(&archive, path)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let archive = dataio::read_archive(path)?;
        let meta: CheckpointMeta = serde_json::from_value(archive.meta.clone())
            .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
        let params = archive.param_store("param")?;
        let mut adam = AdamState::new(&params, meta.adam);
        adam.step = meta.adam_step;
        for (slot, (name, _)) in params.iter().enumerate() {
            let m = archive
                .get(&format!("adam_m/{name}"))
                .ok_or_else(|| TrainError::BadCheckpoint(format!("missing adam_m/{name}")))?;
            let v = archive
                .get(&format!("adam_v/{name}"))
                .ok_or_else(|| TrainError::BadCheckpoint(format!("missing adam_v/{name}")))?;
            adam.m[slot] = m.clone();
            adam.v[slot] = v.clone();
        }
        Ok(Self {
            step: meta.step,
            status: meta.status,
            config_hash: meta.config_hash,
            system: meta.system,
            model_spec: meta.model_spec,
            normalizer: meta.normalizer,
            params,
            adam,
            rng: meta.rng,
        })
    }

    pub fn surrogate(&self) -> Surrogate {
        Surrogate {
            spec: self.model_spec.clone(),
            params: self.params.clone(),
        }
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub status: RunStatus,
    pub log: Vec<LogRow>,
    pub failures: Vec<FailureEvent>,
    /// Checkpoints written at `checkpoint_interval` boundaries, by step.
    pub interval_checkpoints: Vec<Checkpoint>,
}

struct TrainLoop<'a> {
    config: &'a TrainConfig,
    dataset: &'a TrajectoryDataset,
    config_hash: String,
    normalizer: Normalizer,
    surrogate: Surrogate,
    adam: AdamState,
    rng: ChaCha8Rng,
    step: u64,
}

impl<'a> TrainLoop<'a> {
    fn checkpoint(&self, status: RunStatus) -> Checkpoint {
        Checkpoint {
            step: self.step,
            status,
            config_hash: self.config_hash.clone(),
            system: self.config.system.clone(),
            model_spec: self.surrogate.spec.clone(),
            normalizer: self.normalizer.clone(),
            params: self.surrogate.params.clone(),
            adam: self.adam.clone(),
            rng: RngSnapshot::capture(self.config.seed, &self.rng),
        }
    }

    fn run(mut self) -> Result<TrainOutcome, TrainError> {
        let mut log = Vec::new();
        let mut failures = Vec::new();
        let mut interval_checkpoints = Vec::new();
        let mut status = RunStatus::Completed;

        while self.step < self.config.total_steps {
            let started = Instant::now();
            let step = self.step;
            let lr = lr_at(self.config.learning_rate, &self.config.lr_schedule, step);
            let scheduled_len = rollout_len_at(&self.config.rollout, step);
            let horizon = if self.config.objective.base == BaseObjective::Pushforward
                && self.config.pushforward_length_sampling == PushforwardLengthSampling::Uniform
                && scheduled_len > 1
            {
                self.rng.gen_range(1..=scheduled_len)
            } else {
                scheduled_len
            };
            let batch = sample_windows(
                self.dataset,
                &self.normalizer,
                &mut self.rng,
                self.config.batch_size,
                horizon,
            )?;

            let mut tape = Tape::new();
            let step_result = (|| -> Result<_, ObjectiveError> {
                let bound = BoundStepper::bind(&mut tape, &self.surrogate)?;
                let loss = dyslim_total(
                    &mut tape,
                    &bound,
                    &batch,
                    &self.config.objective,
                    horizon,
                    &self.config.discount,
                )?;
                let grads = tape.backward(loss.total)?;
                Ok((loss, grads))
            })();

            let (loss, grads) = match step_result {
                Ok(ok) => ok,
                Err(err) if is_divergence(&err) => {
                    failures.push(FailureEvent {
                        step,
                        detail: err.to_string(),
                    });
                    status = RunStatus::Diverged;
                    break;
                }
                Err(err) => return Err(err.into()),
            };
            if !loss.total_value.is_finite() || !grads.all_finite() {
                failures.push(FailureEvent {
                    step,
                    detail: "non-finite loss or gradient".into(),
                });
                status = RunStatus::Diverged;
                break;
            }

            self.adam
                .update(&mut self.surrogate.params, &grads, lr)
                .expect("gradients were checked finite");
            self.step += 1;

            log.push(LogRow {
                step,
                lr,
                rollout_len: horizon,
                base: loss.base_value,
                reg_unconditional: loss.reg_unconditional_value,
                reg_conditional: loss.reg_conditional_value,
                total: loss.total_value,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });

            if self.config.checkpoint_interval > 0
                && self.step % self.config.checkpoint_interval == 0
                && self.step < self.config.total_steps
            {
                interval_checkpoints.push(self.checkpoint(RunStatus::InProgress));
            }
        }

        let checkpoint = self.checkpoint(status);
        Ok(TrainOutcome {
            checkpoint,
            status,
            log,
            failures,
            interval_checkpoints,
        })
    }
}

fn is_divergence(err: &ObjectiveError) -> bool {
    match err {
        ObjectiveError::Tape(TapeError::NonFinite { .. }) => true,
        ObjectiveError::Model(ModelError::Rollout { source, .. }) => {
            matches!(source, TapeError::NonFinite { .. })
        }
        ObjectiveError::Model(ModelError::Tape(TapeError::NonFinite { .. })) => true,
        _ => false,
    }
}

/// Trains from a fresh initialization. Deterministic per seed in this
/// single-threaded loop; divergence ends the run with a failed-status
/// checkpoint rather than an error.
pub fn train(
    model: &StepperSpec,
    config: &TrainConfig,
    dataset: &TrajectoryDataset,
    config_hash: &str,
) -> Result<TrainOutcome, TrainError> {
    config.validate(dataset)?;
    if model.state_dim() != dataset.header.state_dim {
        return Err(TrainError::InvalidConfig(format!(
            "model dimension {} vs dataset dimension {}",
            model.state_dim(),
            dataset.header.state_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX); // one private stream for the whole run
    let surrogate = Surrogate::new(model.clone(), config.seed);
    let adam = AdamState::new(&surrogate.params, config.adam);
    TrainLoop {
        config,
        dataset,
        config_hash: config_hash.to_string(),
        normalizer: dataset.header.normalizer.clone(),
        surrogate,
        adam,
        rng,
        step: 0,
    }
    .run()
}

/// Continues a checkpointed run to `config.total_steps`; bitwise equivalent
/// to the uninterrupted run.
pub fn resume(
    checkpoint: Checkpoint,
    config: &TrainConfig,
    dataset: &TrajectoryDataset,
    config_hash: &str,
) -> Result<TrainOutcome, TrainError> {
    config.validate(dataset)?;
    if checkpoint.config_hash != config_hash {
        return Err(TrainError::ConfigHashMismatch {
            checkpoint: checkpoint.config_hash,
            current: config_hash.to_string(),
        });
    }
    let rng = checkpoint.rng.restore()?;
    TrainLoop {
        config,
        dataset,
        config_hash: config_hash.to_string(),
        normalizer: checkpoint.normalizer.clone(),
        surrogate: Surrogate {
            spec: checkpoint.model_spec.clone(),
            params: checkpoint.params,
        },
        adam: checkpoint.adam,
        rng,
        step: checkpoint.step,
    }
    .run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::MlpStepperSpec;
    use crate::systems::lorenz::{generate_lorenz_dataset, LorenzGenConfig};

    fn scalar_store(value: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(value)).unwrap();
        store
    }

    fn scalar_grads(store: &ParamStore, g: f64) -> Gradients {
        let mut tape = Tape::new();
        let ids = tape.bind_params(store).unwrap();
        let scaled = tape.scale(ids[0], g).unwrap();
        let out = tape.sum(scaled).unwrap();
        tape.backward(out).unwrap()
    }

    #[test]
    fn adam_zero_grads_leave_params() {
        let mut store = scalar_store(1.5);
        let grads = scalar_grads(&store, 0.0);
        let mut adam = AdamState::new(&store, AdamParams::default());
        adam.update(&mut store, &grads, 1e-2).unwrap();
        assert_eq!(store.get("w").unwrap().item().unwrap(), 1.5);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        for &g in &[2.0, -0.5] {
            let mut store = scalar_store(0.0);
            let grads = scalar_grads(&store, g);
            let mut adam = AdamState::new(&store, AdamParams::default());
            let lr = 1e-3;
            adam.update(&mut store, &grads, lr).unwrap();
            let got = store.get("w").unwrap().item().unwrap();
            let expected = -lr * g.signum();
            assert!(
                (got - expected).abs() <= lr * 1e-6,
                "g={g}: got {got}, expected {expected}"
            );
        }
    }

    #[test]
    fn adam_first_step_scale_invariance() {
        let lr = 1e-3;
        let run = |g: f64| {
            let mut store = scalar_store(0.0);
            let grads = scalar_grads(&store, g);
            let mut adam = AdamState::new(&store, AdamParams::default());
            adam.update(&mut store, &grads, lr).unwrap();
            store.get("w").unwrap().item().unwrap()
        };
        assert!((run(1.0) - run(10.0)).abs() <= lr * 1e-6);
    }

    #[test]
    fn lr_schedule_values() {
        assert_eq!(lr_at(1e-4, &LrSchedule::Constant, 123_456), 1e-4);
        let staircase = LrSchedule::Staircase {
            factor: 0.5,
            interval: 60_000,
        };
        assert_eq!(lr_at(5e-4, &staircase, 0), 5e-4);
        assert_eq!(lr_at(5e-4, &staircase, 59_999), 5e-4);
        assert_eq!(lr_at(5e-4, &staircase, 60_000), 2.5e-4);
    }

    #[test]
    fn rollout_schedule_values() {
        let schedule = RolloutSchedule {
            increment_interval: 50_000,
            max_len: 10,
        };
        assert_eq!(rollout_len_at(&schedule, 0), 1);
        assert_eq!(rollout_len_at(&schedule, 49_999), 1);
        assert_eq!(rollout_len_at(&schedule, 50_000), 2);
        assert_eq!(rollout_len_at(&schedule, 499_999), 10);
        assert_eq!(rollout_len_at(&schedule, 10_000_000), 10);
    }

    fn tiny_dataset(seed: u64) -> TrajectoryDataset {
        generate_lorenz_dataset(&LorenzGenConfig {
            warmup_steps: 200,
            steps_per_trajectory: 3000,
            downsample_factor: 100,
            n_trajectories: 4,
            seed,
            ..LorenzGenConfig::default()
        })
        .unwrap()
    }

    fn tiny_config(total_steps: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            total_steps,
            checkpoint_interval: 50,
            rollout: RolloutSchedule {
                increment_interval: 40,
                max_len: 3,
            },
            window: 10,
            ..TrainConfig::lorenz_defaults()
        }
    }

    fn tiny_model() -> StepperSpec {
        StepperSpec::Mlp(MlpStepperSpec {
            state_dim: 3,
            hidden: vec![8],
            delta_t: 0.4,
        })
    }

    #[test]
    fn sampled_windows_are_deterministic_and_in_bounds() {
        let dataset = tiny_dataset(1);
        let norm = dataset.header.normalizer.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = sample_windows(&dataset, &norm, &mut rng, 4, 2).unwrap();
        assert_eq!(batch.states.len(), 3);
        assert_eq!(batch.states[0].shape(), &[4, 3]);

        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let batch2 = sample_windows(&dataset, &norm, &mut rng2, 4, 2).unwrap();
        assert_eq!(batch, batch2);

        assert!(matches!(
            sample_windows(&dataset, &norm, &mut rng, 4, 1000),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn smoke_run_completes_with_finite_loss() {
        let dataset = tiny_dataset(2);
        let config = tiny_config(100);
        let outcome = train(&tiny_model(), &config, &dataset, "hash").unwrap();
        assert_eq!(outcome.status, RunStatus::Completed);
        assert_eq!(outcome.log.len(), 100);
        assert_eq!(outcome.checkpoint.step, 100);
        assert!(outcome.log.last().unwrap().total.is_finite());
        assert_eq!(outcome.interval_checkpoints.len(), 1);
    }

    #[test]
    fn zero_lambda_run_matches_base_run_bitwise() {
        let dataset = tiny_dataset(3);
        let mut config = tiny_config(40);
        config.objective.lambda1 = 0.0;
        config.objective.lambda2 = 0.0;
        let a = train(&tiny_model(), &config, &dataset, "hash").unwrap();
        let b = train(&tiny_model(), &config, &dataset, "hash").unwrap();
        let keys = |o: &TrainOutcome| {
            o.log
                .iter()
                .map(LogRow::determinism_key)
                .collect::<Vec<_>>()
        };
        assert_eq!(keys(&a), keys(&b));
        assert!(a.log.iter().all(|r| r.reg_unconditional == 0.0));
        assert!(a
            .log
            .iter()
            .zip(&b.log)
            .all(|(x, y)| x.total.to_bits() == y.total.to_bits() && x.base.to_bits() == y.base.to_bits()));
    }

    #[test]
    fn same_seed_checkpoints_are_bitwise_identical() {
        let dataset = tiny_dataset(4);
        let config = tiny_config(30);
        let a = train(&tiny_model(), &config, &dataset, "hash").unwrap();
        let b = train(&tiny_model(), &config, &dataset, "hash").unwrap();
        for ((_, ta), (_, tb)) in a
            .checkpoint
            .params
            .iter()
            .zip(b.checkpoint.params.iter())
        {
            assert!(ta
                .data()
                .iter()
                .zip(tb.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let dataset = tiny_dataset(5);
        let config = tiny_config(60);
        let full = train(&tiny_model(), &config, &dataset, "hash").unwrap();

        let mut half_config = config.clone();
        half_config.total_steps = 25;
        let half = train(&tiny_model(), &half_config, &dataset, "hash").unwrap();
        let resumed = resume(half.checkpoint, &config, &dataset, "hash").unwrap();

        assert_eq!(resumed.checkpoint.step, 60);
        let full_tail: Vec<String> = full.log[25..]
            .iter()
            .map(LogRow::determinism_key)
            .collect();
        let resumed_log: Vec<String> = resumed
            .log
            .iter()
            .map(LogRow::determinism_key)
            .collect();
        assert_eq!(full_tail, resumed_log);
        for ((_, ta), (_, tb)) in full
            .checkpoint
            .params
            .iter()
            .zip(resumed.checkpoint.params.iter())
        {
            assert!(ta
                .data()
                .iter()
                .zip(tb.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_roundtrips_bitwise() {
        let dataset = tiny_dataset(6);
        let config = tiny_config(10);
        let outcome = train(&tiny_model(), &config, &dataset, "hash").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dysl");
        outcome.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(outcome.checkpoint, loaded);
    }

    #[test]
    fn huge_lr_diverges_with_failure_event() {
        let dataset = tiny_dataset(7);
        let mut config = tiny_config(5000);
        // Adam updates are sign-like, so parameters grow by ~lr per step;
        // this reaches the f64 overflow range within a couple of steps.
        config.learning_rate = 1e200;
        let outcome = train(&tiny_model(), &config, &dataset, "hash").unwrap();
        assert_eq!(outcome.status, RunStatus::Diverged);
        assert_eq!(outcome.failures.len(), 1);
        assert_eq!(outcome.checkpoint.status, RunStatus::Diverged);
        assert!(outcome.checkpoint.step < 5000);
    }

    #[test]
    fn system_mismatch_is_rejected() {
        let dataset = tiny_dataset(8);
        let mut config = tiny_config(10);
        config.system = "ks".into();
        assert!(matches!(
            train(&tiny_model(), &config, &dataset, "hash"),
            Err(TrainError::SystemMismatch { .. })
        ));
    }
}
