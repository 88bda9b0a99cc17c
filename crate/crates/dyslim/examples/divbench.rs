use std::time::Instant;
fn main() {
    let n = 16384;
    let d: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37) % 5.0 + 0.1).collect();
    let mut out = vec![0.0f64; n];
    let reps = 2000;
    let t0 = Instant::now();
    for _ in 0..reps {
        for (o, &x) in out.iter_mut().zip(&d) {
            *o = 1.0 / (0.25 + x);
        }
        std::hint::black_box(&mut out);
    }
    let per = t0.elapsed().as_secs_f64() * 1e9 / (reps * n) as f64;
    println!("div: {per:.2} ns/element");
    let t0 = Instant::now();
    for _ in 0..reps {
        for (o, &x) in out.iter_mut().zip(&d) {
            *o = 0.25 * x + 1.0;
        }
        std::hint::black_box(&mut out);
    }
    let per = t0.elapsed().as_secs_f64() * 1e9 / (reps * n) as f64;
    println!("fma: {per:.2} ns/element");
    // four divisions accumulated, like the kernel mixture
    let sigmas = [0.2f64, 0.5, 0.9, 1.3];
    let t0 = Instant::now();
    for _ in 0..reps {
        for (o, &x) in out.iter_mut().zip(&d) {
            let mut acc = 0.0;
            for s in sigmas {
                let s2 = s * s;
                acc += s2 / (s2 + x);
            }
            *o = acc;
        }
        std::hint::black_box(&mut out);
    }
    let per = t0.elapsed().as_secs_f64() * 1e9 / (reps * n) as f64;
    println!("4-band mixture: {per:.2} ns/element");
}
