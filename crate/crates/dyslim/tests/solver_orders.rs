//! Convergence-order checks for the ground-truth integrators.

use dyslim::systems::ks::{KsConfig, KsSolver};
use dyslim::systems::lorenz::{lorenz_rhs, LorenzParams};
use dyslim::systems::rk4_step;
use std::f64::consts::PI;

fn integrate_lorenz(start: [f64; 3], h: f64, t_final: f64) -> [f64; 3] {
    let params = LorenzParams::default();
    let rhs = |u: &[f64; 3]| lorenz_rhs(u, &params);
    let steps = (t_final / h).round() as usize;
    let mut state = start;
    for _ in 0..steps {
        state = rk4_step(&rhs, &state, h);
    }
    state
}

fn err3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Halving h shrinks the error vs an h/64 reference by ~2⁴. The step sizes
/// must divide T exactly or the comparison picks up a time-offset error.
#[test]
fn rk4_lorenz_error_ratio_is_fourth_order() {
    let start = [10.0, 10.0, 25.0];
    let h = 0.01;
    let reference = integrate_lorenz(start, h / 64.0, 1.0);
    let coarse = err3(&integrate_lorenz(start, h, 1.0), &reference);
    let fine = err3(&integrate_lorenz(start, h / 2.0, 1.0), &reference);
    let ratio = coarse / fine;
    assert!(
        (14.0..=18.0).contains(&ratio),
        "error ratio {ratio} outside [14, 18] (coarse {coarse}, fine {fine})"
    );
}

fn integrate_ks(u0: &[f64], config: &KsConfig, t_final: f64) -> Vec<f64> {
    let solver = KsSolver::new(config).unwrap();
    let steps = (t_final / config.h).round() as usize;
    let mut v = solver.to_spectral(u0);
    for _ in 0..steps {
        solver.step_spectral(&mut v);
    }
    solver.to_physical(&v)
}

fn err_vec(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Self-convergence vs an h/16 reference; halving h must gain at least 2³.
#[test]
fn ks_solver_self_convergence_order() {
    let base = KsConfig {
        n_grid: 64,
        h: 0.05,
        sample_interval: 0.05,
        warmup_time: 0.0,
        ..KsConfig::default()
    };
    let n = base.n_grid;
    let u0: Vec<f64> = (0..n)
        .map(|i| {
            let x = i as f64 * base.length / n as f64;
            0.6 * (2.0 * PI * x / base.length).sin() + 0.3 * (4.0 * PI * x / base.length).cos()
        })
        .collect();
    let t_final = 1.0;

    let with_h = |h: f64| {
        let config = KsConfig {
            h,
            sample_interval: h,
            ..base.clone()
        };
        integrate_ks(&u0, &config, t_final)
    };

    let reference = with_h(base.h / 16.0);
    let coarse = err_vec(&with_h(base.h), &reference);
    let fine = err_vec(&with_h(base.h / 2.0), &reference);
    let ratio = coarse / fine;
    assert!(
        ratio >= 8.0,
        "self-convergence ratio {ratio} < 8 (coarse {coarse}, fine {fine})"
    );
}
