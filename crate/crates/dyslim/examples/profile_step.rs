use std::time::Instant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use dyslim::autodiff::Tape;
use dyslim::models::{BoundStepper, MlpStepperSpec, StepperSpec, Surrogate};
use dyslim::objectives::{
    dyslim_total, mmd2_on_tape, BaseObjective, DiscountSchedule, DyslimConfig, KernelSpec,
    RegEstimator, WindowBatch,
};
use dyslim::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn time(label: &str, reps: usize, mut f: impl FnMut()) {
    let t0 = Instant::now();
    for _ in 0..reps {
        f();
    }
    println!("{label}: {:.3} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);
}

fn main() {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(128);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = StepperSpec::Mlp(MlpStepperSpec::default());
    let surrogate = Surrogate::new(spec, 0);
    let mk = |rng: &mut ChaCha8Rng| {
        Tensor::new(vec![batch, 3], (0..batch * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let windows = WindowBatch {
        states: vec![mk(&mut rng), mk(&mut rng)],
    };
    let omega = DiscountSchedule { ratio: 0.1, floor: 1e-7 };
    let config = |l1: f64, l2: f64| DyslimConfig {
        base: BaseObjective::OneStep,
        lambda1: l1,
        lambda2: l2,
        kernel: KernelSpec::default(),
        estimator: RegEstimator::Biased,
        pushforward_additive: false,
    };

    let reps = 300;
    time("mmd FIRST (fresh heap)", reps, || {
        let mut tape = Tape::new();
        let a = tape.leaf(windows.states[0].clone()).unwrap();
        let b = tape.leaf(windows.states[1].clone()).unwrap();
        let _ = mmd2_on_tape(&mut tape, a, b, &KernelSpec::default(), RegEstimator::Biased).unwrap();
    });
    time("base forward+backward", reps, || {
        let mut tape = Tape::new();
        let bound = BoundStepper::bind(&mut tape, &surrogate).unwrap();
        let loss = dyslim_total(&mut tape, &bound, &windows, &config(0.0, 0.0), 1, &omega).unwrap();
        let _ = tape.backward(loss.total).unwrap();
    });
    time("dyslim forward+backward", reps, || {
        let mut tape = Tape::new();
        let bound = BoundStepper::bind(&mut tape, &surrogate).unwrap();
        let loss = dyslim_total(&mut tape, &bound, &windows, &config(1.0, 100.0), 1, &omega).unwrap();
        let _ = tape.backward(loss.total).unwrap();
    });
    time("dyslim forward only", reps, || {
        let mut tape = Tape::new();
        let bound = BoundStepper::bind(&mut tape, &surrogate).unwrap();
        let _ = dyslim_total(&mut tape, &bound, &windows, &config(1.0, 100.0), 1, &omega).unwrap();
    });
    time("one mmd2 graph fwd (no grad inputs)", reps, || {
        let mut tape = Tape::new();
        let a = tape.leaf(windows.states[0].clone()).unwrap();
        let b = tape.leaf(windows.states[1].clone()).unwrap();
        let _ = mmd2_on_tape(&mut tape, a, b, &KernelSpec::default(), RegEstimator::Biased).unwrap();
    });
    time("pairwise only", reps, || {
        let mut tape = Tape::new();
        let a = tape.leaf(windows.states[0].clone()).unwrap();
        let b = tape.leaf(windows.states[1].clone()).unwrap();
        let _ = tape.pairwise_sq_dists(a, b).unwrap();
    });
}
