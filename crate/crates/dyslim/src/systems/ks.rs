//! Kuramoto–Sivashinsky dynamics, `∂_t u = −u u_x − ν u_xx − ν u_xxxx` on a
//! periodic domain, integrated pseudo-spectrally with a fourth-order
//! exponential time-differencing Runge–Kutta scheme (diagonal linear part
//! integrated exactly, quadratic term dealiased by the 2/3 rule).

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::GenError;
use crate::dataio::{DatasetHeader, Normalizer, TrajectoryDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcConfig {
    /// Number of superposed sinusoids.
    pub n_modes: usize,
    /// Allowed wavenumbers as multiples of 2π/L.
    pub wave_multipliers: Vec<usize>,
    pub amplitude_range: (f64, f64),
    pub phase_range: (f64, f64),
}

impl Default for IcConfig {
    fn default() -> Self {
        Self {
            n_modes: 30,
            wave_multipliers: vec![1, 2, 3],
            amplitude_range: (-0.5, 0.5),
            phase_range: (0.0, 2.0 * PI),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KsConfig {
    /// Domain length.
    pub length: f64,
    /// Grid points; must be a power of two.
    pub n_grid: usize,
    pub viscosity: f64,
    /// Solver step.
    pub h: f64,
    /// Interval between recorded states; must be an integer multiple of `h`.
    pub sample_interval: f64,
    /// Time integrated and discarded before recording.
    pub warmup_time: f64,
    pub ic: IcConfig,
}

impl Default for KsConfig {
    fn default() -> Self {
        Self {
            length: 64.0,
            n_grid: 512,
            viscosity: 1.0,
            h: 0.001,
            sample_interval: 0.2,
            warmup_time: 20.0,
            ic: IcConfig::default(),
        }
    }
}

impl KsConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if !self.n_grid.is_power_of_two() {
            return Err(GenError::InvalidConfig(format!(
                "n_grid must be a power of two, got {}",
                self.n_grid
            )));
        }
        if self.h <= 0.0 || self.length <= 0.0 || self.viscosity <= 0.0 {
            return Err(GenError::InvalidConfig(
                "h, length, viscosity must be positive".into(),
            ));
        }
        let ratio = self.sample_interval / self.h;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(GenError::InvalidConfig(format!(
                "sample_interval {} is not an integer multiple of h {}",
                self.sample_interval, self.h
            )));
        }
        Ok(())
    }

    pub fn steps_per_sample(&self) -> usize {
        (self.sample_interval / self.h).round() as usize
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_time / self.h).round() as usize
    }
}

/// φ1, φ2, φ3 with series fallback near zero; the closed forms cancel badly
/// for small |z|.
fn phi123(z: f64) -> (f64, f64, f64) {
    if z.abs() > 0.5 {
        let ez = z.exp();
        let p1 = (ez - 1.0) / z;
        let p2 = (ez - 1.0 - z) / (z * z);
        let p3 = (ez - 1.0 - z - 0.5 * z * z) / (z * z * z);
        (p1, p2, p3)
    } else {
        // φj(z) = Σ_{n≥0} z^n / (n + j)!
        let mut p = [0.0f64; 3];
        for (j, pj) in p.iter_mut().enumerate() {
            let mut term = 1.0;
            for f in 1..=(j + 1) {
                term /= f as f64;
            }
            let mut acc = term;
            for n in 1..=18 {
                term *= z / (n + j + 1) as f64;
                acc += term;
            }
            *pj = acc;
        }
        (p[0], p[1], p[2])
    }
}

/// Spectral KS integrator. One instance per worker; holds FFT plans and
/// precomputed exponential coefficients for the configured step size.
pub struct KsSolver {
    config: KsConfig,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    wavenumbers: Vec<f64>,
    e_full: Vec<f64>,
    e_half: Vec<f64>,
    q: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    f3: Vec<f64>,
    dealias_keep: Vec<bool>,
    nonlinear: bool,
}

impl KsSolver {
    pub fn new(config: &KsConfig) -> Result<Self, GenError> {
        config.validate()?;
        let n = config.n_grid;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);

        let mut wavenumbers = vec![0.0; n];
        for (m, k) in wavenumbers.iter_mut().enumerate() {
            let signed = if m <= n / 2 {
                m as isize
            } else {
                m as isize - n as isize
            };
            *k = 2.0 * PI * signed as f64 / config.length;
        }

        let h = config.h;
        let nu = config.viscosity;
        let mut e_full = vec![0.0; n];
        let mut e_half = vec![0.0; n];
        let mut q = vec![0.0; n];
        let mut f1 = vec![0.0; n];
        let mut f2 = vec![0.0; n];
        let mut f3 = vec![0.0; n];
        for m in 0..n {
            let k = wavenumbers[m];
            let k2 = k * k;
            let lin = nu * k2 - nu * k2 * k2;
            let z = h * lin;
            e_full[m] = z.exp();
            e_half[m] = (0.5 * z).exp();
            let (p1_half, _, _) = phi123(0.5 * z);
            let (p1, p2, p3) = phi123(z);
            q[m] = 0.5 * h * p1_half;
            f1[m] = h * (p1 - 3.0 * p2 + 4.0 * p3);
            f2[m] = h * (p2 - 2.0 * p3);
            f3[m] = h * (4.0 * p3 - p2);
        }

        let dealias_keep = (0..n)
            .map(|m| {
                let signed = if m <= n / 2 { m } else { n - m };
                signed <= n / 3
            })
            .collect();

        Ok(Self {
            config: config.clone(),
            fft,
            ifft,
            wavenumbers,
            e_full,
            e_half,
            q,
            f1,
            f2,
            f3,
            dealias_keep,
            nonlinear: true,
        })
    }

    /// Disables the advection term; used to validate the exact linear part.
    pub fn with_nonlinearity(mut self, enabled: bool) -> Self {
        self.nonlinear = enabled;
        self
    }

    pub fn config(&self) -> &KsConfig {
        &self.config
    }

    pub fn to_spectral(&self, state: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = state.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        buf
    }

    pub fn to_physical(&self, spectral: &[Complex<f64>]) -> Vec<f64> {
        let mut buf = spectral.to_vec();
        self.ifft.process(&mut buf);
        let scale = 1.0 / self.config.n_grid as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    /// `N(v̂) = −½ i k · dealias(FFT(u²))`, the advection term `−u u_x`
    /// written as a perfect derivative and squared in physical space.
    fn nonlinear_term(&self, v: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let n = self.config.n_grid;
        if !self.nonlinear {
            return vec![Complex::new(0.0, 0.0); n];
        }
        let u = self.to_physical(v);
        let mut sq: Vec<Complex<f64>> = u.iter().map(|&x| Complex::new(x * x, 0.0)).collect();
        self.fft.process(&mut sq);
        sq.iter()
            .enumerate()
            .map(|(m, &w)| {
                if self.dealias_keep[m] {
                    Complex::new(0.0, -0.5 * self.wavenumbers[m]) * w
                } else {
                    Complex::new(0.0, 0.0)
                }
            })
            .collect()
    }

    /// One exponential-RK4 step on a spectral state.
    pub fn step_spectral(&self, v: &mut Vec<Complex<f64>>) {
        let n = self.config.n_grid;
        let nv = self.nonlinear_term(v);

        let mut a = vec![Complex::new(0.0, 0.0); n];
        for m in 0..n {
            a[m] = v[m] * self.e_half[m] + nv[m] * self.q[m];
        }
        let na = self.nonlinear_term(&a);

        let mut b = vec![Complex::new(0.0, 0.0); n];
        for m in 0..n {
            b[m] = v[m] * self.e_half[m] + na[m] * self.q[m];
        }
        let nb = self.nonlinear_term(&b);

        let mut c = vec![Complex::new(0.0, 0.0); n];
        for m in 0..n {
            c[m] = a[m] * self.e_half[m] + (nb[m] * 2.0 - nv[m]) * self.q[m];
        }
        let nc = self.nonlinear_term(&c);

        for m in 0..n {
            v[m] = v[m] * self.e_full[m]
                + nv[m] * self.f1[m]
                + (na[m] + nb[m]) * (2.0 * self.f2[m])
                + nc[m] * self.f3[m];
        }
    }

    /// One step through physical space.
    pub fn step_physical(&self, state: &[f64]) -> Result<Vec<f64>, GenError> {
        let mut v = self.to_spectral(state);
        self.step_spectral(&mut v);
        let out = self.to_physical(&v);
        if !out.iter().all(|x| x.is_finite()) {
            return Err(GenError::Blowup {
                trajectory: 0,
                step: 0,
            });
        }
        Ok(out)
    }
}

/// Advances the KS dynamics by one step `h`.
pub fn ks_step(state: &[f64], config: &KsConfig) -> Result<Vec<f64>, GenError> {
    KsSolver::new(config)?.step_physical(state)
}

/// Random superposition of `n_modes` sinusoids on the uniform grid.
pub fn ks_initial_condition<R: Rng>(
    rng: &mut R,
    ic: &IcConfig,
    n_grid: usize,
    length: f64,
) -> Vec<f64> {
    let mut field = vec![0.0; n_grid];
    for _ in 0..ic.n_modes {
        let mult = ic.wave_multipliers[rng.gen_range(0..ic.wave_multipliers.len())];
        let omega = 2.0 * PI * mult as f64 / length;
        let amplitude = rng.gen_range(ic.amplitude_range.0..ic.amplitude_range.1);
        let phase = rng.gen_range(ic.phase_range.0..ic.phase_range.1);
        for (i, f) in field.iter_mut().enumerate() {
            let x = i as f64 * length / n_grid as f64;
            *f += amplitude * (omega * x + phase).sin();
        }
    }
    field
}

fn trajectory_rng(seed: u64, trajectory: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trajectory as u64);
    rng
}

fn simulate_trajectory(
    config: &KsConfig,
    record_steps: usize,
    seed: u64,
    trajectory: usize,
) -> Result<Vec<f64>, GenError> {
    let solver = KsSolver::new(config)?;
    let mut rng = trajectory_rng(seed, trajectory);
    let u0 = ks_initial_condition(&mut rng, &config.ic, config.n_grid, config.length);
    let mut v = solver.to_spectral(&u0);

    let blowup = |step: usize| GenError::Blowup { trajectory, step };
    for step in 0..config.warmup_steps() {
        solver.step_spectral(&mut v);
        if !v[0].re.is_finite() {
            return Err(blowup(step));
        }
    }

    let mut out = Vec::with_capacity(record_steps * config.n_grid);
    let per_sample = config.steps_per_sample();
    for rec in 0..record_steps {
        if rec > 0 {
            for sub in 0..per_sample {
                solver.step_spectral(&mut v);
                if !v[0].re.is_finite() {
                    return Err(blowup(config.warmup_steps() + (rec - 1) * per_sample + sub));
                }
            }
        }
        let u = solver.to_physical(&v);
        if !u.iter().all(|x| x.is_finite()) {
            return Err(blowup(config.warmup_steps() + rec * per_sample));
        }
        out.extend_from_slice(&u);
    }
    Ok(out)
}

/// Samples initial conditions, integrates through warmup, and records
/// `record_steps` states per trajectory every `sample_interval`.
pub fn generate_ks_dataset(
    config: &KsConfig,
    n_trajectories: usize,
    record_steps: usize,
    seed: u64,
) -> Result<TrajectoryDataset, GenError> {
    config.validate()?;
    if n_trajectories == 0 || record_steps == 0 {
        return Err(GenError::InvalidConfig(
            "need at least one trajectory and one recorded state".into(),
        ));
    }
    let trajectories: Vec<Vec<f64>> = (0..n_trajectories)
        .into_par_iter()
        .map(|t| simulate_trajectory(config, record_steps, seed, t))
        .collect::<Result<_, _>>()?;
    let payload: Vec<f64> = trajectories.into_iter().flatten().collect();
    let normalizer = Normalizer::fit(&payload, config.n_grid);
    let generation = serde_json::json!({
        "config": serde_json::to_value(config).expect("config serializes"),
        "n_trajectories": n_trajectories,
        "record_steps": record_steps,
        "seed": seed,
    });
    let header = DatasetHeader {
        system: "ks".into(),
        state_dim: config.n_grid,
        n_trajectories,
        steps_per_trajectory: record_steps,
        dt: config.sample_interval,
        generation,
        normalizer,
        config_hash: None,
    };
    Ok(TrajectoryDataset::new(header, payload)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> KsConfig {
        KsConfig {
            length: 64.0,
            n_grid: 128,
            h: 0.01,
            sample_interval: 0.1,
            warmup_time: 0.5,
            ..KsConfig::default()
        }
    }

    #[test]
    fn zero_field_is_fixed() {
        let config = small_config();
        let out = ks_step(&vec![0.0; config.n_grid], &config).unwrap();
        assert!(out.iter().all(|&v| v.abs() <= 1e-14));
    }

    #[test]
    fn constant_field_is_fixed() {
        let config = small_config();
        let c = 0.7;
        let out = ks_step(&vec![c; config.n_grid], &config).unwrap();
        for v in out {
            assert!((v - c).abs() <= 1e-12, "drifted to {v}");
        }
    }

    #[test]
    fn single_mode_linear_decay_matches_exponential() {
        let config = small_config();
        let solver = KsSolver::new(&config).unwrap().with_nonlinearity(false);
        let n = config.n_grid;
        let k = 2.0 * PI / config.length;
        let u0: Vec<f64> = (0..n)
            .map(|i| (k * i as f64 * config.length / n as f64).sin())
            .collect();
        let steps = 50;
        let mut u = u0.clone();
        for _ in 0..steps {
            u = solver.step_physical(&u).unwrap();
        }
        let nu = config.viscosity;
        let factor = ((nu * k * k - nu * k * k * k * k) * config.h * steps as f64).exp();
        for (a, b) in u.iter().zip(&u0) {
            let expected = b * factor;
            assert!(
                (a - expected).abs() <= 1e-6 * factor.max(1e-30),
                "got {a}, expected {expected}"
            );
        }
    }

    #[test]
    fn spatial_mean_is_conserved() {
        let config = small_config();
        let solver = KsSolver::new(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut u = ks_initial_condition(&mut rng, &config.ic, config.n_grid, config.length);
        // shift so the mean is nonzero
        u.iter_mut().for_each(|v| *v += 0.3);
        let mean0: f64 = u.iter().sum::<f64>() / u.len() as f64;
        for _ in 0..1000 {
            u = solver.step_physical(&u).unwrap();
        }
        let mean1: f64 = u.iter().sum::<f64>() / u.len() as f64;
        assert!((mean1 - mean0).abs() <= 1e-8, "drift {}", mean1 - mean0);
    }

    #[test]
    fn initial_condition_respects_amplitude_bound() {
        let ic = IcConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = ks_initial_condition(&mut rng, &ic, 256, 64.0);
        let bound = 0.5 * ic.n_modes as f64;
        assert!(u.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn initial_condition_empty_sum_is_zero() {
        let ic = IcConfig {
            n_modes: 0,
            ..IcConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = ks_initial_condition(&mut rng, &ic, 64, 64.0);
        assert!(u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_sinusoid_is_sampled_exactly() {
        let ic = IcConfig {
            n_modes: 1,
            wave_multipliers: vec![1],
            amplitude_range: (0.5 - 1e-12, 0.5),
            phase_range: (0.0, 1e-12),
            ..IcConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 64;
        let length = 64.0;
        let u = ks_initial_condition(&mut rng, &ic, n, length);
        for (i, v) in u.iter().enumerate() {
            let x = i as f64 * length / n as f64;
            let expected = 0.5 * (2.0 * PI / length * x).sin();
            assert!((v - expected).abs() <= 1e-9);
        }
    }

    #[test]
    fn dataset_shapes_and_determinism() {
        let config = KsConfig {
            n_grid: 64,
            h: 0.05,
            sample_interval: 0.2,
            warmup_time: 1.0,
            ..KsConfig::default()
        };
        let a = generate_ks_dataset(&config, 2, 5, 11).unwrap();
        assert_eq!(a.header.steps_per_trajectory, 5);
        assert_eq!(a.header.state_dim, 64);
        assert_eq!(a.payload().len(), 2 * 5 * 64);
        let b = generate_ks_dataset(&config, 2, 5, 11).unwrap();
        assert!(a
            .payload()
            .iter()
            .zip(b.payload())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn non_power_of_two_grid_is_rejected() {
        let config = KsConfig {
            n_grid: 100,
            ..KsConfig::default()
        };
        assert!(matches!(
            KsSolver::new(&config),
            Err(GenError::InvalidConfig(_))
        ));
    }

    #[test]
    fn recorded_fields_stay_bounded() {
        let config = KsConfig {
            n_grid: 128,
            h: 0.01,
            sample_interval: 0.2,
            warmup_time: 10.0,
            ..KsConfig::default()
        };
        let ds = generate_ks_dataset(&config, 1, 50, 2).unwrap();
        assert!(ds.payload().iter().all(|v| v.abs() < 10.0));
    }
}
