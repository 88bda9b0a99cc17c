//! Ground-truth dynamics: Lorenz 63 with RK4 and Kuramoto–Sivashinsky with a
//! pseudo-spectral exponential integrator, plus dataset generation.

pub mod ks;
pub mod lorenz;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("trajectory {trajectory}: non-finite state at step {step}")]
    Blowup { trajectory: usize, step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    DataIo(#[from] crate::dataio::DataIoError),
}

/// Classical fourth-order Runge–Kutta update. Exact for constant fields,
/// local truncation error O(h⁵) otherwise.
pub fn rk4_step<const D: usize>(
    rhs: &impl Fn(&[f64; D]) -> [f64; D],
    state: &[f64; D],
    h: f64,
) -> [f64; D] {
    let k1 = rhs(state);
    let mut mid = *state;
    for i in 0..D {
        mid[i] = state[i] + 0.5 * h * k1[i];
    }
    let k2 = rhs(&mid);
    for i in 0..D {
        mid[i] = state[i] + 0.5 * h * k2[i];
    }
    let k3 = rhs(&mid);
    for i in 0..D {
        mid[i] = state[i] + h * k3[i];
    }
    let k4 = rhs(&mid);
    let mut out = *state;
    for i in 0..D {
        out[i] = state[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}
