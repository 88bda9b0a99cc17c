use std::time::Instant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use dyslim::models::{MlpStepperSpec, StepperSpec};
use dyslim::objectives::{BaseObjective, DyslimConfig, KernelSpec, RegEstimator, DiscountSchedule};
use dyslim::systems::lorenz::{generate_lorenz_dataset, LorenzGenConfig};
use dyslim::training::{train, PushforwardLengthSampling, RolloutSchedule, TrainConfig};

fn main() {
    let data = generate_lorenz_dataset(&LorenzGenConfig {
        h: 0.002, warmup_steps: 2000, downsample_factor: 200,
        n_trajectories: 32, steps_per_trajectory: 8000, seed: 7,
        ..LorenzGenConfig::default()
    }).unwrap();
    let model = StepperSpec::Mlp(MlpStepperSpec::default());
    let steps = 1000u64;

    let mk = |base: BaseObjective, l1: f64, l2: f64, max_len: usize| TrainConfig {
        objective: DyslimConfig {
            base, lambda1: l1, lambda2: l2,
            kernel: KernelSpec::default(),
            estimator: RegEstimator::Biased,
            pushforward_additive: false,
        },
        batch_size: 64,
        total_steps: steps,
        checkpoint_interval: u64::MAX,
        rollout: RolloutSchedule { increment_interval: 1, max_len },
        window: 11,
        pushforward_length_sampling: PushforwardLengthSampling::Fixed,
        discount: DiscountSchedule { ratio: 0.9, floor: 1e-4 },
        seed: 1,
        ..TrainConfig::lorenz_defaults()
    };

    for (label, base, max_len) in [
        ("one-step l=1", BaseObjective::OneStep, 1),
        ("curriculum l=5", BaseObjective::Curriculum, 5),
        ("curriculum l=10", BaseObjective::Curriculum, 10),
        ("pushforward l=10", BaseObjective::Pushforward, 10),
    ] {
        let mut times = [f64::INFINITY; 2];
        for _rep in 0..3 {
        for (slot, (l1, l2)) in [(0.0, 0.0), (0.0, 100.0)].iter().enumerate() {
            let t0 = Instant::now();
            let out = train(&model, &mk(base, *l1, *l2, max_len), &data, "t").unwrap();
            assert_eq!(out.log.len() as u64, steps);
            times[slot] = times[slot].min(t0.elapsed().as_secs_f64() * 1e3 / steps as f64);
        }
        }
        println!(
            "{label}: base {:.3} ms/step, dyslim {:.3} ms/step, ratio {:.3}",
            times[0], times[1], times[1] / times[0]
        );
    }
}
