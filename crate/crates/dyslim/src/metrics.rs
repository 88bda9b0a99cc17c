//! Evaluation metrics: ensemble cosine similarity, entropic OT / Sinkhorn
//! divergence, 1D Wasserstein-1, energy spectra with MELR, covariance RMSE,
//! autocorrelation-time comparison, and periodic finite-difference features.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("sample counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("{0}")]
    UndefinedValue(String),
    #[error("grid size {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("series too short: {got} steps, need at least {needed}")]
    SeriesTooShort { needed: usize, got: usize },
}

/// Borrowed view over an ensemble of trajectories, layout `[traj][time][dim]`.
#[derive(Clone, Copy)]
pub struct TrajView<'a> {
    pub data: &'a [f64],
    pub n_traj: usize,
    pub n_steps: usize,
    pub dim: usize,
}

impl<'a> TrajView<'a> {
    pub fn new(data: &'a [f64], n_traj: usize, n_steps: usize, dim: usize) -> Self {
        debug_assert_eq!(data.len(), n_traj * n_steps * dim);
        Self {
            data,
            n_traj,
            n_steps,
            dim,
        }
    }

    pub fn state(&self, traj: usize, t: usize) -> &[f64] {
        let base = (traj * self.n_steps + t) * self.dim;
        &self.data[base..base + self.dim]
    }

    /// Scalar series at one location of one trajectory.
    pub fn location_series(&self, traj: usize, loc: usize) -> Vec<f64> {
        (0..self.n_steps)
            .map(|t| self.state(traj, t)[loc])
            .collect()
    }
}

fn check_matched(truth: &TrajView, pred: &TrajView) -> Result<(), MetricError> {
    if truth.n_traj != pred.n_traj || truth.n_steps != pred.n_steps || truth.dim != pred.dim {
        return Err(MetricError::ShapeMismatch(
            vec![truth.n_traj, truth.n_steps, truth.dim],
            vec![pred.n_traj, pred.n_steps, pred.dim],
        ));
    }
    Ok(())
}

/// Per-time-step mean cosine between truth and prediction deviations from the
/// ground-truth ensemble mean. Zero-norm deviations drop the trajectory.
pub fn cosine_similarity_series(
    truth: &TrajView,
    pred: &TrajView,
) -> Result<Vec<f64>, MetricError> {
    check_matched(truth, pred)?;
    let d = truth.dim;
    let mut out = Vec::with_capacity(truth.n_steps);
    for t in 0..truth.n_steps {
        let mut mean = vec![0.0; d];
        for i in 0..truth.n_traj {
            for (m, v) in mean.iter_mut().zip(truth.state(i, t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= truth.n_traj as f64);

        let mut total = 0.0;
        let mut counted = 0usize;
        for i in 0..truth.n_traj {
            let (u, p) = (truth.state(i, t), pred.state(i, t));
            let mut dot = 0.0;
            let mut nu = 0.0;
            let mut np = 0.0;
            for c in 0..d {
                let du = u[c] - mean[c];
                let dp = p[c] - mean[c];
                dot += du * dp;
                nu += du * du;
                np += dp * dp;
            }
            if nu == 0.0 || np == 0.0 {
                continue;
            }
            total += dot / (nu.sqrt() * np.sqrt());
            counted += 1;
        }
        if counted == 0 {
            return Err(MetricError::UndefinedValue(format!(
                "all trajectories excluded at time step {t}"
            )));
        }
        out.push(total / counted as f64);
    }
    Ok(out)
}

/// Entropic regularization strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonSpec {
    Absolute(f64),
    /// Fraction of the mean of the cost matrix.
    RelativeToMeanCost(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub epsilon: EpsilonSpec,
    pub max_iterations: usize,
    /// Convergence threshold on the max marginal violation.
    pub threshold: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: EpsilonSpec::RelativeToMeanCost(0.05),
            max_iterations: 2000,
            threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornResult {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn sq_dist_matrix(x: &Tensor, y: &Tensor) -> Result<Vec<f64>, MetricError> {
    let (xs, ys) = (x.shape(), y.shape());
    if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[1] {
        return Err(MetricError::ShapeMismatch(xs.to_vec(), ys.to_vec()));
    }
    let (n, m, d) = (xs[0], ys[0], xs[1]);
    let mut cost = vec![0.0; n * m];
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..m {
            let yj = &y.data()[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for c in 0..d {
                let diff = xi[c] - yj[c];
                acc += diff * diff;
            }
            cost[i * m + j] = acc;
        }
    }
    Ok(cost)
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Entropic OT value on a precomputed cost matrix, log-domain Sinkhorn with
/// uniform marginals.
fn sinkhorn_on_cost(
    cost: &[f64],
    n: usize,
    m: usize,
    eps: f64,
    cfg: &SinkhornConfig,
) -> SinkhornResult {
    let a = 1.0 / n as f64;
    let b = 1.0 / m as f64;
    let ln_a = a.ln();
    let ln_b = b.ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iterations {
        iterations = it + 1;
        for i in 0..n {
            let row = &cost[i * m..(i + 1) * m];
            let lse = logsumexp((0..m).map(|j| (g[j] - row[j]) / eps + ln_b));
            f[i] = -eps * lse;
        }
        for j in 0..m {
            let lse = logsumexp((0..n).map(|i| (f[i] - cost[i * m + j]) / eps + ln_a));
            g[j] = -eps * lse;
        }
        // After the g update the column marginals are exact; check rows.
        let mut violation = 0.0f64;
        for i in 0..n {
            let mut row_sum = 0.0;
            for j in 0..m {
                row_sum += a * b * ((f[i] + g[j] - cost[i * m + j]) / eps).exp();
            }
            violation = violation.max((row_sum - a).abs());
        }
        if violation < cfg.threshold {
            converged = true;
            break;
        }
    }
    // Primal value including the entropic term, from the final plan.
    let mut transport = 0.0;
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..m {
            let exponent = (f[i] + g[j] - cost[i * m + j]) / eps;
            let pi = a * b * exponent.exp();
            transport += pi * cost[i * m + j];
            kl += pi * exponent;
        }
    }
    SinkhornResult {
        value: transport + eps * kl,
        converged,
        iterations,
    }
}

fn resolve_epsilon(cost: &[f64], spec: EpsilonSpec) -> f64 {
    match spec {
        EpsilonSpec::Absolute(e) => e,
        EpsilonSpec::RelativeToMeanCost(frac) => {
            let mean = cost.iter().sum::<f64>() / cost.len() as f64;
            frac * mean
        }
    }
}

/// Entropic OT cost `W_ε(X, Y)` with quadratic ground cost.
pub fn sinkhorn_cost(
    x: &Tensor,
    y: &Tensor,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult, MetricError> {
    let cost = sq_dist_matrix(x, y)?;
    let eps = resolve_epsilon(&cost, cfg.epsilon);
    if eps <= 0.0 {
        // All points coincide; any feasible plan is free.
        return Ok(SinkhornResult {
            value: 0.0,
            converged: true,
            iterations: 0,
        });
    }
    Ok(sinkhorn_on_cost(
        &cost,
        x.shape()[0],
        y.shape()[0],
        eps,
        cfg,
    ))
}

/// Debiased divergence `2W_ε(X,Y) − W_ε(X,X) − W_ε(Y,Y)`. One ε, resolved
/// from the cross-cost matrix, is shared by all three subproblems so the
/// debiasing identity holds exactly.
pub fn sinkhorn_divergence(
    x: &Tensor,
    y: &Tensor,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult, MetricError> {
    let cross = sq_dist_matrix(x, y)?;
    let eps = resolve_epsilon(&cross, cfg.epsilon);
    if eps <= 0.0 {
        return Ok(SinkhornResult {
            value: 0.0,
            converged: true,
            iterations: 0,
        });
    }
    let (n, m) = (x.shape()[0], y.shape()[0]);
    let xy = sinkhorn_on_cost(&cross, n, m, eps, cfg);
    let xx = sinkhorn_on_cost(&sq_dist_matrix(x, x)?, n, n, eps, cfg);
    let yy = sinkhorn_on_cost(&sq_dist_matrix(y, y)?, m, m, eps, cfg);
    Ok(SinkhornResult {
        value: 2.0 * xy.value - xx.value - yy.value,
        converged: xy.converged && xx.converged && yy.converged,
        iterations: xy.iterations.max(xx.iterations).max(yy.iterations),
    })
}

/// Exact 1D Wasserstein-1 between equal-size samples via the quantile
/// coupling.
pub fn w1_empirical_1d(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::CountMismatch(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(MetricError::UndefinedValue("empty samples".into()));
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    Ok(xs
        .iter()
        .zip(&ys)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / x.len() as f64)
}

/// Energies per wavenumber magnitude, `K = 0..=N/2`, unnormalized DFT.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumBins {
    pub energies: Vec<f64>,
}

impl SpectrumBins {
    pub fn max_wavenumber(&self) -> usize {
        self.energies.len() - 1
    }

    pub fn total_energy(&self) -> f64 {
        self.energies.iter().sum()
    }
}

/// `E(K) = Σ_{|k|=K} |û_k|²` — bins K and N−K together so the bins exactly
/// partition the DFT coefficients.
pub fn energy_spectrum(u: &[f64]) -> Result<SpectrumBins, MetricError> {
    let n = u.len();
    if !n.is_power_of_two() {
        return Err(MetricError::NotPowerOfTwo(n));
    }
    let mut buf: Vec<Complex<f64>> = u.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mut energies = vec![0.0; n / 2 + 1];
    for (idx, c) in buf.iter().enumerate() {
        let k = if idx <= n / 2 { idx } else { n - idx };
        energies[k] += c.norm_sqr();
    }
    Ok(SpectrumBins { energies })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MelrWeighting {
    Unweighted,
    Weighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelrResult {
    pub value: f64,
    /// Bins dropped because either averaged spectrum was zero there.
    pub excluded_bins: Vec<usize>,
}

fn mean_spectrum(snapshots: &[&[f64]]) -> Result<Vec<f64>, MetricError> {
    let first = snapshots
        .first()
        .ok_or_else(|| MetricError::UndefinedValue("no snapshots".into()))?;
    let mut acc = vec![0.0; first.len() / 2 + 1];
    for snap in snapshots {
        if snap.len() != first.len() {
            return Err(MetricError::CountMismatch(snap.len(), first.len()));
        }
        let bins = energy_spectrum(snap)?;
        for (a, e) in acc.iter_mut().zip(&bins.energies) {
            *a += e;
        }
    }
    let scale = 1.0 / snapshots.len() as f64;
    acc.iter_mut().for_each(|a| *a *= scale);
    Ok(acc)
}

/// Relative floor under which a spectral bin counts as zero; DFT roundoff
/// leaves ~1e-30 in bins that are structurally empty.
const SPECTRUM_ZERO_FLOOR: f64 = 1e-12;

/// Mean energy log ratio between snapshot-averaged spectra. Zero bins are
/// excluded and reported; weights renormalize over the surviving bins.
pub fn melr(
    pred_snapshots: &[&[f64]],
    ref_snapshots: &[&[f64]],
    weighting: MelrWeighting,
) -> Result<MelrResult, MetricError> {
    let pred = mean_spectrum(pred_snapshots)?;
    let reference = mean_spectrum(ref_snapshots)?;
    if pred.len() != reference.len() {
        return Err(MetricError::CountMismatch(pred.len(), reference.len()));
    }
    let floor = |spectrum: &[f64]| {
        spectrum.iter().fold(0.0f64, |a, &b| a.max(b)) * SPECTRUM_ZERO_FLOOR
    };
    let (pred_floor, ref_floor) = (floor(&pred), floor(&reference));
    let mut excluded = Vec::new();
    let mut included = Vec::new();
    for k in 0..pred.len() {
        if pred[k] <= pred_floor || reference[k] <= ref_floor {
            excluded.push(k);
        } else {
            included.push(k);
        }
    }
    if included.is_empty() {
        return Err(MetricError::UndefinedValue(
            "every spectral bin was zero on one side".into(),
        ));
    }
    let value = match weighting {
        MelrWeighting::Unweighted => {
            let w = 1.0 / included.len() as f64;
            included
                .iter()
                .map(|&k| w * (pred[k] / reference[k]).ln().abs())
                .sum()
        }
        MelrWeighting::Weighted => {
            let total: f64 = included.iter().map(|&k| reference[k]).sum();
            included
                .iter()
                .map(|&k| reference[k] / total * (pred[k] / reference[k]).ln().abs())
                .sum()
        }
    };
    Ok(MelrResult {
        value,
        excluded_bins: excluded,
    })
}

fn covariance(snapshots: &[&[f64]]) -> Result<Vec<f64>, MetricError> {
    let first = snapshots
        .first()
        .ok_or_else(|| MetricError::UndefinedValue("no snapshots".into()))?;
    let d = first.len();
    let s = snapshots.len();
    let mut mean = vec![0.0; d];
    for snap in snapshots {
        for (m, v) in mean.iter_mut().zip(*snap) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= s as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for snap in snapshots {
        for c in 0..d {
            centered[c] = snap[c] - mean[c];
        }
        for i in 0..d {
            let ci = centered[i];
            let row = &mut cov[i * d..(i + 1) * d];
            for (r, cj) in row.iter_mut().zip(&centered) {
                *r += ci * cj;
            }
        }
    }
    // 1/S normalization over all pooled snapshots.
    cov.iter_mut().for_each(|c| *c /= s as f64);
    Ok(cov)
}

/// Relative Frobenius error between empirical state covariances.
pub fn cov_rmse(pred_snapshots: &[&[f64]], ref_snapshots: &[&[f64]]) -> Result<f64, MetricError> {
    if pred_snapshots.len() < 2 || ref_snapshots.len() < 2 {
        return Err(MetricError::UndefinedValue(
            "need at least 2 snapshots per side".into(),
        ));
    }
    let cp = covariance(pred_snapshots)?;
    let cr = covariance(ref_snapshots)?;
    if cp.len() != cr.len() {
        return Err(MetricError::CountMismatch(cp.len(), cr.len()));
    }
    let norm_ref: f64 = cr.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_ref == 0.0 {
        return Err(MetricError::UndefinedValue(
            "reference covariance is zero".into(),
        ));
    }
    let diff: f64 = cp
        .iter()
        .zip(&cr)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff / norm_ref)
}

/// Biased-normalization autocorrelation ρ(lag) = C(lag)/C(0) with
/// C(lag) = (1/N)Σ(u_k − ū)(u_{k−lag} − ū). Returns None for a
/// zero-variance series.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Option<Vec<f64>> {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let c0: f64 = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return None;
    }
    let mut rho = Vec::with_capacity(max_lag + 1);
    rho.push(1.0);
    for lag in 1..=max_lag {
        let c: f64 = (lag..n).map(|k| centered[k] * centered[k - lag]).sum::<f64>() / n as f64;
        rho.push(c / c0);
    }
    Some(rho)
}

/// τ = Δt·(1 + 2Σρ(t_i)), sum truncated at the first negative ρ.
pub fn autocorr_time_from_rho(rho: &[f64], dt: f64) -> f64 {
    let mut acc = 0.0;
    for &r in &rho[1..] {
        if r < 0.0 {
            break;
        }
        acc += r;
    }
    dt * (1.0 + 2.0 * acc)
}

fn mean_autocorr_time(view: &TrajView, dt: f64) -> Result<f64, MetricError> {
    if view.n_steps < 10 {
        return Err(MetricError::SeriesTooShort {
            needed: 10,
            got: view.n_steps,
        });
    }
    let max_lag = view.n_steps - 1;
    let mut total = 0.0;
    let mut counted = 0usize;
    for traj in 0..view.n_traj {
        for loc in 0..view.dim {
            let series = view.location_series(traj, loc);
            if let Some(rho) = autocorrelation(&series, max_lag) {
                total += autocorr_time_from_rho(&rho, dt);
                counted += 1;
            }
        }
    }
    if counted == 0 {
        return Err(MetricError::UndefinedValue(
            "every location had zero variance".into(),
        ));
    }
    Ok(total / counted as f64)
}

/// Absolute difference of mean autocorrelation times.
pub fn tcm(pred: &TrajView, reference: &TrajView, dt: f64) -> Result<f64, MetricError> {
    Ok((mean_autocorr_time(pred, dt)? - mean_autocorr_time(reference, dt)?).abs())
}

/// Central differences with circular wrap; `order` is 1 or 2.
pub fn spatial_derivatives(u: &[f64], dx: f64, order: u8) -> Vec<f64> {
    let n = u.len();
    (0..n)
        .map(|i| {
            let prev = u[(i + n - 1) % n];
            let next = u[(i + 1) % n];
            match order {
                1 => (next - prev) / (2.0 * dx),
                _ => (next - 2.0 * u[i] + prev) / (dx * dx),
            }
        })
        .collect()
}

/// Evaluation results: per-time-step series plus scalar aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cosine_similarity: Vec<f64>,
    /// (time step, value, converged) triples.
    pub sinkhorn_divergence: Vec<(usize, f64, bool)>,
    pub melr: Option<f64>,
    pub melr_weighted: Option<f64>,
    pub cov_rmse: f64,
    /// Named 1D features and their time-averaged W1 distances.
    pub w1_features: Vec<(String, f64)>,
    pub tcm: f64,
    /// Trajectories that stayed finite for the whole rollout.
    pub survivors: usize,
    pub total_trajectories: usize,
}
