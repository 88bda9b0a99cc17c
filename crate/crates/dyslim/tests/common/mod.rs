//! Shared helpers for integration tests: finite-difference gradient oracles
//! and small random-tensor generators.

#![allow(dead_code)]

use dyslim::autodiff::{NodeId, Tape};
use dyslim::tensor::Tensor;
use rand::Rng;

/// Builds a scalar graph from parameter nodes. Called once per evaluation;
/// the tape is rebuilt every time, so the builder must be deterministic.
pub type ScalarGraph = dyn Fn(&mut Tape, &[NodeId]) -> NodeId;

pub fn eval_scalar(builder: &ScalarGraph, params: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| tape.param(p.clone()).unwrap())
        .collect();
    let out = builder(&mut tape, &ids);
    tape.value(out).item().unwrap()
}

pub fn ad_gradients(builder: &ScalarGraph, params: &[Tensor]) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| tape.param(p.clone()).unwrap())
        .collect();
    let out = builder(&mut tape, &ids);
    let grads = tape.backward(out).unwrap();
    grads.slots().to_vec()
}

/// Central finite differences of the builder's scalar output with respect to
/// every parameter element.
pub fn fd_gradients(builder: &ScalarGraph, params: &[Tensor], step: f64) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = Tensor::zeros(params[pi].shape().to_vec());
        for j in 0..params[pi].len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[j] += step;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[j] -= step;
            let diff = eval_scalar(builder, &plus) - eval_scalar(builder, &minus);
            grad.data_mut()[j] = diff / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    let denom = a.abs().max(b.abs()).max(1.0);
    (a - b).abs() <= tol * denom
}

/// Asserts reverse-mode gradients match central differences (step 1e-6,
/// relative error 1e-4) for every parameter element.
pub fn assert_grads_match(builder: &ScalarGraph, params: &[Tensor], context: &str) {
    let ad = ad_gradients(builder, params);
    let fd = fd_gradients(builder, params, 1e-6);
    for (slot, (ag, fg)) in ad.iter().zip(&fd).enumerate() {
        for (j, (&a, &f)) in ag.data().iter().zip(fg.data()).enumerate() {
            assert!(
                rel_close(a, f, 1e-4),
                "{context}: param {slot} element {j}: ad={a} fd={f}"
            );
        }
    }
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random values bounded away from zero, for kink-free ReLU probing.
pub fn random_tensor_offzero<R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}
