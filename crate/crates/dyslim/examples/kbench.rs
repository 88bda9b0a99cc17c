use std::time::Instant;
use dyslim::autodiff::Tape;
use dyslim::objectives::{mmd2_on_tape, KernelSpec, RegEstimator};
use dyslim::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let n = 128;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mk = |rng: &mut ChaCha8Rng| Tensor::new(vec![n, 3], (0..n*3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let a = mk(&mut rng);
    let b = mk(&mut rng);
    let reps = 500;

    // tapes dropped each iteration (normal)
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let ai = tape.leaf(a.clone()).unwrap();
        let bi = tape.leaf(b.clone()).unwrap();
        let m = mmd2_on_tape(&mut tape, ai, bi, &KernelSpec::default(), RegEstimator::Biased).unwrap();
        std::hint::black_box(&m);
    }
    println!("drop-per-iter: {:.3} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);

    // tapes kept alive (no frees)
    let mut keep = Vec::new();
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let ai = tape.leaf(a.clone()).unwrap();
        let bi = tape.leaf(b.clone()).unwrap();
        let m = mmd2_on_tape(&mut tape, ai, bi, &KernelSpec::default(), RegEstimator::Biased).unwrap();
        std::hint::black_box(&m);
        keep.push(tape);
    }
    println!("keep-alive: {:.3} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);
    drop(keep);
}
