// Hand-optimized floor: full one-step + both MMD regs, value+gradient w.r.t.
// the 64x3 prediction matrix (the upstream MLP backward is the base cost).
use std::time::Instant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 64;
const D: usize = 3;
const SIG: [f64; 4] = [0.2, 0.5, 0.9, 1.3];

fn kernel_and_grad(a: &[f64], b: &[f64], k: &mut [f64], slope: &mut [f64]) {
    // K[i,j] and dK/dD[i,j] for the 4-band RQ mixture
    for i in 0..N {
        let (a0, a1, a2) = (a[i * 3], a[i * 3 + 1], a[i * 3 + 2]);
        for j in 0..N {
            let d0 = a0 - b[j * 3];
            let d1 = a1 - b[j * 3 + 1];
            let d2 = a2 - b[j * 3 + 2];
            let dist = d0 * d0 + d1 * d1 + d2 * d2;
            let mut kv = 0.0;
            let mut sv = 0.0;
            for s in SIG {
                let s2 = s * s;
                let r = 1.0 / (s2 + dist);
                kv += s2 * r;
                sv -= s2 * r * r;
            }
            k[i * N + j] = kv;
            slope[i * N + j] = sv;
        }
    }
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u0: Vec<f64> = (0..N * D).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let truth: Vec<f64> = (0..N * D).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let preds: Vec<f64> = (0..N * D).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut grad = vec![0.0f64; N * D];
    let mut kbuf = vec![0.0f64; N * N];
    let mut sbuf = vec![0.0f64; N * N];
    let reps = 3000;
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..reps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let inv_nn = 1.0 / (N * N) as f64;
        let mut loss = 0.0;
        // base misfit
        for i in 0..N * D {
            let diff = preds[i] - truth[i];
            loss += diff * diff / N as f64;
            grad[i] += 2.0 * diff / N as f64;
        }
        // three gradful matrices: (u0,u0) value only; (preds,preds); (u0,preds); (truth,*)
        // reg_u: K(u0,u0) fwd only
        kernel_and_grad(&u0, &u0, &mut kbuf, &mut sbuf);
        loss += kbuf.iter().sum::<f64>() * inv_nn;
        // K(preds,preds) shared by both regs: weight λ1+λ2 = 101
        kernel_and_grad(&preds, &preds, &mut kbuf, &mut sbuf);
        loss += 101.0 * kbuf.iter().sum::<f64>() * inv_nn;
        for i in 0..N {
            for j in 0..N {
                let g = 101.0 * inv_nn * 2.0 * sbuf[i * N + j];
                for c in 0..D {
                    let diff = preds[i * D + c] - preds[j * D + c];
                    grad[i * D + c] += g * diff;
                    grad[j * D + c] -= g * diff;
                }
            }
        }
        // K(u0,preds) cross, weight -2·λ1
        kernel_and_grad(&u0, &preds, &mut kbuf, &mut sbuf);
        loss -= 2.0 * kbuf.iter().sum::<f64>() * inv_nn;
        for i in 0..N {
            for j in 0..N {
                let g = -2.0 * inv_nn * sbuf[i * N + j] * 2.0;
                for c in 0..D {
                    grad[j * D + c] -= g * (u0[i * D + c] - preds[j * D + c]);
                }
            }
        }
        // K(truth,truth) fwd only ×λ2, K(truth,preds) cross ×λ2
        kernel_and_grad(&truth, &truth, &mut kbuf, &mut sbuf);
        loss += 100.0 * kbuf.iter().sum::<f64>() * inv_nn;
        kernel_and_grad(&truth, &preds, &mut kbuf, &mut sbuf);
        loss -= 200.0 * kbuf.iter().sum::<f64>() * inv_nn;
        for i in 0..N {
            for j in 0..N {
                let g = -200.0 * inv_nn * sbuf[i * N + j] * 2.0;
                for c in 0..D {
                    grad[j * D + c] -= g * (truth[i * D + c] - preds[j * D + c]);
                }
            }
        }
        sink += loss + grad[0];
    }
    let per = t0.elapsed().as_secs_f64() * 1e6 / reps as f64;
    println!("hand-written reg floor (5 matrices, value+grad): {per:.1} us/step (sink {sink:.3})");
}
