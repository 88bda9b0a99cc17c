//! Evaluation harness: rolls a one-step map out from held-out initial
//! conditions and assembles the metric report. Trajectories that blow up are
//! recorded and excluded; metrics run over the survivors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Normalizer, TrajectoryDataset};
use crate::metrics::{
    cosine_similarity_series, cov_rmse, melr, sinkhorn_divergence, tcm, w1_empirical_1d,
    MelrWeighting, MetricError, MetricReport, SinkhornConfig, TrajView,
};
use crate::models::{ModelError, Surrogate};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset holds {got} steps per trajectory, rollout needs {needed}")]
    DatasetTooShort { needed: usize, got: usize },
    #[error("every trajectory blew up before the rollout finished")]
    NoSurvivors { failures: Vec<TrajectoryFailure> },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// A one-step map acting on `[batch, D]` states in normalized space.
pub trait OneStepMap: Sync {
    fn advance(&self, states: &Tensor) -> Result<Tensor, ModelError>;
}

impl OneStepMap for Surrogate {
    fn advance(&self, states: &Tensor) -> Result<Tensor, ModelError> {
        self.apply_batch(states)
    }
}

/// A 1D observable whose distribution over the ensemble is compared by W1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum W1Feature {
    /// One state coordinate.
    Dim { index: usize, name: String },
    /// Product of two coordinates.
    Product { a: usize, b: usize, name: String },
    /// Periodic finite-difference derivative pooled over the grid.
    SpatialDerivative { order: u8 },
}

impl W1Feature {
    pub fn name(&self) -> String {
        match self {
            W1Feature::Dim { name, .. } | W1Feature::Product { name, .. } => name.clone(),
            W1Feature::SpatialDerivative { order } => {
                if *order == 1 {
                    "u_x".into()
                } else {
                    "u_xx".into()
                }
            }
        }
    }

    fn values(&self, state: &[f64], dx: f64) -> Vec<f64> {
        match self {
            W1Feature::Dim { index, .. } => vec![state[*index]],
            W1Feature::Product { a, b, .. } => vec![state[*a] * state[*b]],
            W1Feature::SpatialDerivative { order } => {
                crate::metrics::spatial_derivatives(state, dx, *order)
            }
        }
    }
}

/// The Lorenz feature set: coordinates and the nonlinear cross products.
pub fn lorenz_features() -> Vec<W1Feature> {
    let dim = |index: usize, name: &str| W1Feature::Dim {
        index,
        name: name.into(),
    };
    vec![
        dim(0, "x"),
        dim(1, "y"),
        dim(2, "z"),
        W1Feature::Product {
            a: 0,
            b: 1,
            name: "xy".into(),
        },
        W1Feature::Product {
            a: 0,
            b: 2,
            name: "xz".into(),
        },
    ]
}

/// The KS feature set: first and second spatial derivatives.
pub fn ks_features() -> Vec<W1Feature> {
    vec![
        W1Feature::SpatialDerivative { order: 1 },
        W1Feature::SpatialDerivative { order: 2 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Rollout length, including the shared initial state.
    pub rollout_steps: usize,
    /// Sinkhorn divergence computed every this many steps.
    pub sd_every: usize,
    pub sinkhorn: SinkhornConfig,
    pub features: Vec<W1Feature>,
    /// Snapshot cap for spectra and covariance (strided subsample).
    pub max_snapshots: usize,
    /// Energy-spectrum metrics; only meaningful for field states.
    pub spectra: bool,
    /// Grid spacing for derivative features.
    pub dx: f64,
}

impl EvalOptions {
    pub fn lorenz(rollout_steps: usize) -> Self {
        Self {
            rollout_steps,
            sd_every: 1,
            sinkhorn: SinkhornConfig::default(),
            features: lorenz_features(),
            max_snapshots: 2000,
            spectra: false,
            dx: 1.0,
        }
    }

    pub fn ks(rollout_steps: usize, dx: f64) -> Self {
        Self {
            rollout_steps,
            sd_every: 10,
            sinkhorn: SinkhornConfig::default(),
            features: ks_features(),
            max_snapshots: 2000,
            spectra: true,
            dx,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryFailure {
    pub trajectory: usize,
    /// Rollout step at which the state left the finite range.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: MetricReport,
    pub failures: Vec<TrajectoryFailure>,
}

/// Rolls one trajectory in normalized space and returns the denormalized
/// states, or the step at which it blew up.
fn roll_one<S: OneStepMap>(
    stepper: &S,
    normalizer: &Normalizer,
    initial_raw: &[f64],
    steps: usize,
) -> Result<Vec<f64>, usize> {
    let d = initial_raw.len();
    let mut out = Vec::with_capacity(steps * d);
    out.extend_from_slice(initial_raw);
    let mut state = Tensor::new(vec![1, d], normalizer.apply(initial_raw)).unwrap();
    for step in 1..steps {
        state = match stepper.advance(&state) {
            Ok(next) if next.all_finite() => next,
            _ => return Err(step),
        };
        out.extend_from_slice(&normalizer.invert(state.data()));
    }
    Ok(out)
}

/// Runs the full evaluation: normalized-space rollout from each held-out
/// initial condition, metrics in raw (denormalized) space over survivors.
pub fn evaluate<S: OneStepMap>(
    stepper: &S,
    dataset: &TrajectoryDataset,
    normalizer: &Normalizer,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let t = opts.rollout_steps;
    let d = dataset.header.state_dim;
    let n_total = dataset.header.n_trajectories;
    if dataset.header.steps_per_trajectory < t || t == 0 {
        return Err(EvalError::DatasetTooShort {
            needed: t.max(1),
            got: dataset.header.steps_per_trajectory,
        });
    }

    let rolled: Vec<Result<Vec<f64>, usize>> = (0..n_total)
        .into_par_iter()
        .map(|i| roll_one(stepper, normalizer, dataset.state(i, 0), t))
        .collect();

    let mut failures = Vec::new();
    let mut pred_data = Vec::new();
    let mut truth_data = Vec::new();
    for (i, r) in rolled.iter().enumerate() {
        match r {
            Ok(states) => {
                pred_data.extend_from_slice(states);
                for step in 0..t {
                    truth_data.extend_from_slice(dataset.state(i, step));
                }
            }
            Err(step) => failures.push(TrajectoryFailure {
                trajectory: i,
                step: *step,
            }),
        }
    }
    let survivors = n_total - failures.len();
    if survivors == 0 {
        return Err(EvalError::NoSurvivors { failures });
    }
    let pred = TrajView::new(&pred_data, survivors, t, d);
    let truth = TrajView::new(&truth_data, survivors, t, d);

    let cosine = cosine_similarity_series(&truth, &pred)?;

    let mut sd_series = Vec::new();
    let sd_steps: Vec<usize> = (0..t).step_by(opts.sd_every.max(1)).collect();
    let sd_values: Vec<(usize, f64, bool)> = sd_steps
        .par_iter()
        .map(|&step| {
            let gather = |view: &TrajView| {
                let mut data = Vec::with_capacity(survivors * d);
                for i in 0..survivors {
                    data.extend_from_slice(view.state(i, step));
                }
                Tensor::new(vec![survivors, d], data).unwrap()
            };
            let result = sinkhorn_divergence(&gather(&truth), &gather(&pred), &opts.sinkhorn)
                .expect("matched shapes");
            (step, result.value, result.converged)
        })
        .collect();
    sd_series.extend(sd_values);

    // Time-averaged W1 distance between the ensembles of each feature.
    let mut w1_features = Vec::with_capacity(opts.features.len());
    for feature in &opts.features {
        let mut acc = 0.0;
        for step in 0..t {
            let mut tv = Vec::new();
            let mut pv = Vec::new();
            for i in 0..survivors {
                tv.extend(feature.values(truth.state(i, step), opts.dx));
                pv.extend(feature.values(pred.state(i, step), opts.dx));
            }
            acc += w1_empirical_1d(&tv, &pv)?;
        }
        w1_features.push((feature.name(), acc / t as f64));
    }

    // Strided snapshot subsample for the quadratic-cost aggregates.
    let total_snapshots = survivors * t;
    let stride = total_snapshots.div_ceil(opts.max_snapshots).max(1);
    let mut pred_snaps: Vec<&[f64]> = Vec::new();
    let mut truth_snaps: Vec<&[f64]> = Vec::new();
    for flat in (0..total_snapshots).step_by(stride) {
        let (i, step) = (flat / t, flat % t);
        pred_snaps.push(pred.state(i, step));
        truth_snaps.push(truth.state(i, step));
    }

    let (melr_value, melr_weighted) = if opts.spectra {
        let plain = melr(&pred_snaps, &truth_snaps, MelrWeighting::Unweighted)?;
        let weighted = melr(&pred_snaps, &truth_snaps, MelrWeighting::Weighted)?;
        (Some(plain.value), Some(weighted.value))
    } else {
        (None, None)
    };

    let cov = cov_rmse(&pred_snaps, &truth_snaps)?;
    let tcm_value = tcm(&pred, &truth, dataset.header.dt)?;

    Ok(EvalReport {
        metrics: MetricReport {
            cosine_similarity: cosine,
            sinkhorn_divergence: sd_series,
            melr: melr_value,
            melr_weighted,
            cov_rmse: cov,
            w1_features,
            tcm: tcm_value,
            survivors,
            total_trajectories: n_total,
        },
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::lorenz::{generate_lorenz_dataset, lorenz_rhs, LorenzGenConfig, LorenzParams};
    use crate::systems::rk4_step;

    /// Ground-truth stepper: integrates the true dynamics over one effective
    /// sample interval, mapped through the normalizer.
    struct TrueLorenzStep {
        normalizer: Normalizer,
        h: f64,
        substeps: usize,
    }

    impl OneStepMap for TrueLorenzStep {
        fn advance(&self, states: &Tensor) -> Result<Tensor, ModelError> {
            let params = LorenzParams::default();
            let rhs = |u: &[f64; 3]| lorenz_rhs(u, &params);
            let n = states.shape()[0];
            let mut out = Vec::with_capacity(n * 3);
            for i in 0..n {
                let raw = self.normalizer.invert(states.row(i));
                let mut u = [raw[0], raw[1], raw[2]];
                for _ in 0..self.substeps {
                    u = rk4_step(&rhs, &u, self.h);
                }
                out.extend(self.normalizer.apply(&u));
            }
            Ok(Tensor::new(vec![n, 3], out).unwrap())
        }
    }

    /// Identity map: the frozen-state baseline.
    struct IdentityStep;

    impl OneStepMap for IdentityStep {
        fn advance(&self, states: &Tensor) -> Result<Tensor, ModelError> {
            Ok(states.clone())
        }
    }

    fn test_dataset() -> TrajectoryDataset {
        generate_lorenz_dataset(&LorenzGenConfig {
            warmup_steps: 4000,
            steps_per_trajectory: 2500,
            downsample_factor: 50,
            h: 0.008,
            n_trajectories: 12,
            seed: 77,
            ..LorenzGenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn perfect_stepper_scores_perfectly() {
        let dataset = test_dataset();
        let normalizer = dataset.header.normalizer.clone();
        let stepper = TrueLorenzStep {
            normalizer: normalizer.clone(),
            h: 0.008,
            substeps: 50,
        };
        let opts = EvalOptions::lorenz(30);
        let report = evaluate(&stepper, &dataset, &normalizer, &opts).unwrap();
        let m = &report.metrics;
        assert_eq!(m.survivors, 12);
        assert!(m.cosine_similarity.iter().all(|&c| c > 0.999), "{:?}", m.cosine_similarity);
        assert!(m.sinkhorn_divergence.iter().all(|&(_, v, _)| v.abs() <= 1e-6));
        assert!(m.cov_rmse <= 1e-9);
        assert!(m.tcm <= 1e-9);
        assert!(m.w1_features.iter().all(|(_, v)| *v <= 1e-9));
    }

    #[test]
    fn identity_stepper_decorrelates_and_diverges_in_sd() {
        let dataset = test_dataset();
        let normalizer = dataset.header.normalizer.clone();
        let opts = EvalOptions::lorenz(41);
        let report = evaluate(&IdentityStep, &dataset, &normalizer, &opts).unwrap();
        let m = &report.metrics;
        // shared initial state, then decay
        assert!((m.cosine_similarity[0] - 1.0).abs() <= 1e-12);
        let tail = m.cosine_similarity.last().unwrap();
        assert!(*tail < 0.7, "tail cosine {tail}");
        assert!(*tail < m.cosine_similarity[1]);
        // SD at t = 40 well above SD at t = 0
        let first = m.sinkhorn_divergence.first().unwrap().1;
        let last = m.sinkhorn_divergence.last().unwrap().1;
        assert!(last > first + 1.0, "SD {first} -> {last}");
    }

    /// Blows up partway through the rollout on one trajectory.
    struct FlakyStep {
        poison: f64,
    }

    impl OneStepMap for FlakyStep {
        fn advance(&self, states: &Tensor) -> Result<Tensor, ModelError> {
            let mut out = states.clone();
            for v in out.data_mut() {
                *v *= 1.0 + self.poison * v.abs();
            }
            Ok(out)
        }
    }

    #[test]
    fn blowups_become_failure_rows() {
        let dataset = test_dataset();
        let normalizer = dataset.header.normalizer.clone();
        let opts = EvalOptions::lorenz(25);
        let report = evaluate(&FlakyStep { poison: 1.8 }, &dataset, &normalizer, &opts);
        match report {
            Ok(r) => {
                assert!(r.metrics.survivors < 12);
                assert!(!r.failures.is_empty());
            }
            Err(EvalError::NoSurvivors { .. }) => {}
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }
}
