use std::time::Instant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use dyslim::eval::{evaluate, EvalOptions};
use dyslim::models::{MlpStepperSpec, StepperSpec};
use dyslim::objectives::{BaseObjective, DyslimConfig, RegEstimator, KernelSpec};
use dyslim::systems::lorenz::{generate_lorenz_dataset, LorenzGenConfig};
use dyslim::training::{train, RolloutSchedule, TrainConfig};

fn main() {
    let t0 = Instant::now();
    let train_data = generate_lorenz_dataset(&LorenzGenConfig {
        h: 0.002,
        warmup_steps: 20_000,
        downsample_factor: 200,
        n_trajectories: 200,
        steps_per_trajectory: 20_000,
        seed: 1000,
        ..LorenzGenConfig::default()
    })
    .unwrap();
    let test_data = generate_lorenz_dataset(&LorenzGenConfig {
        h: 0.002,
        warmup_steps: 20_000,
        downsample_factor: 200,
        n_trajectories: 50,
        steps_per_trajectory: 20_200 + 200,
        seed: 2000,
        ..LorenzGenConfig::default()
    })
    .unwrap();
    println!("datasets: {:.1}s", t0.elapsed().as_secs_f64());

    let model = StepperSpec::Mlp(MlpStepperSpec::default());
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50_000u64);
    let batch = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(128usize);

    let base_config = |lambda1: f64, lambda2: f64, seed: u64| TrainConfig {
        objective: DyslimConfig {
            base: BaseObjective::OneStep,
            lambda1,
            lambda2,
            kernel: KernelSpec::default(),
            estimator: RegEstimator::Biased,
            pushforward_additive: false,
        },
        batch_size: batch,
        total_steps: steps,
        checkpoint_interval: u64::MAX,
        rollout: RolloutSchedule { increment_interval: u64::MAX, max_len: 1 },
        window: 10,
        seed,
        ..TrainConfig::lorenz_defaults()
    };

    for (label, l1, l2) in [("base", 0.0, 0.0), ("dyslim", 1.0, 100.0)] {
        for seed in [1u64, 2, 3] {
            let t1 = Instant::now();
            let outcome = train(&model, &base_config(l1, l2, seed), &train_data, "pilot").unwrap();
            let train_s = t1.elapsed().as_secs_f64();
            let surrogate = outcome.checkpoint.surrogate();
            let opts = EvalOptions::lorenz(101);
            let report = evaluate(&surrogate, &test_data, &outcome.checkpoint.normalizer, &opts).unwrap();
            let m = report.metrics;
            let decorr = m
                .cosine_similarity
                .iter()
                .position(|&c| c < 0.5)
                .unwrap_or(m.cosine_similarity.len());
            let sd100 = m.sinkhorn_divergence.iter().find(|(t, _, _)| *t == 100).map(|(_, v, _)| *v).unwrap_or(f64::NAN);
            println!(
                "{label} seed {seed}: status {:?}, {train_s:.1}s train ({:.2} ms/step), survivors {}/{}, decorr_step {decorr}, SD@100 {sd100:.4}, covRMSE {:.4}",
                outcome.status,
                train_s * 1e3 / steps as f64,
                m.survivors,
                m.total_trajectories,
                m.cov_rmse,
            );
        }
    }
}
