//! Training objectives: one-step / discounted multi-step / pushforward
//! losses, rational-quadratic MMD regularizers (conditional and
//! unconditional, biased and unbiased estimators), their composition, and a
//! brute-force assignment oracle for the discrete W2 bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NodeId, Tape, TapeError};
use crate::models::{BoundStepper, ModelError, SgPattern};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("sample sets must be [n, d] matrices with matching d; got {0:?} vs {1:?}")]
    SampleShape(Vec<usize>, Vec<usize>),
    #[error("unbiased estimator needs at least 2 samples per set, got {n} and {m}")]
    TooFewSamples { n: usize, m: usize },
    #[error("biased estimator expects equal set sizes, got {n} and {m}")]
    SizeMismatch { n: usize, m: usize },
    #[error("empty kernel bandwidth set")]
    EmptyBandwidths,
    #[error("window batch holds {got} steps, need at least {needed}")]
    WindowTooShort { needed: usize, got: usize },
    #[error("assignment oracle is limited to n <= 8, got {0}")]
    AssignmentTooLarge(usize),
    #[error("rollout length must be >= 1")]
    ZeroRollout,
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mixture of rational quadratic kernels, `κ(u,v) = Σ_q σ_q²/(σ_q² + ‖u−v‖²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSpec {
    pub bandwidths: Vec<f64>,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            bandwidths: vec![0.2, 0.5, 0.9, 1.3],
        }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.bandwidths.is_empty() {
            return Err(ObjectiveError::EmptyBandwidths);
        }
        Ok(())
    }

    /// κ(u, u), the kernel value at zero distance.
    pub fn self_value(&self) -> f64 {
        self.bandwidths.len() as f64
    }

    pub fn eval(&self, sq_dist: f64) -> f64 {
        self.bandwidths
            .iter()
            .map(|s| {
                let s2 = s * s;
                s2 / (s2 + sq_dist)
            })
            .sum()
    }
}

/// ω(k) = max(r^(k−1), floor); ω(1) = 1 and non-increasing in k.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscountSchedule {
    pub ratio: f64,
    pub floor: f64,
}

impl DiscountSchedule {
    pub fn weight(&self, k: usize) -> f64 {
        debug_assert!(k >= 1);
        self.ratio.powi(k as i32 - 1).max(self.floor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseObjective {
    OneStep,
    Curriculum,
    Pushforward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegEstimator {
    /// V-statistic with all terms (zero for a perfect model).
    #[default]
    Biased,
    /// U-statistic with within-set diagonals excluded; may be negative.
    Unbiased,
}

/// Gradient path through the regularizer's model rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    /// Gradients through the full composition.
    Curriculum,
    /// All but the final application detached.
    Pushforward,
}

impl RegMode {
    fn sg_pattern(self) -> SgPattern {
        match self {
            RegMode::Curriculum => SgPattern::None,
            RegMode::Pushforward => SgPattern::DetachBeforeLast,
        }
    }
}

/// Objective composition: base loss plus λ1·unconditional + λ2·conditional
/// MMD² regularization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DyslimConfig {
    pub base: BaseObjective,
    pub lambda1: f64,
    pub lambda2: f64,
    pub kernel: KernelSpec,
    pub estimator: RegEstimator,
    /// Keep the one-step term alongside the pushforward loss instead of
    /// replacing it.
    pub pushforward_additive: bool,
}

impl Default for DyslimConfig {
    fn default() -> Self {
        Self {
            base: BaseObjective::OneStep,
            lambda1: 1.0,
            lambda2: 100.0,
            kernel: KernelSpec::default(),
            estimator: RegEstimator::Biased,
            pushforward_additive: false,
        }
    }
}

/// A batch of along-trajectory windows: `states[k]` holds the `[n, D]` batch
/// of states k steps after the window start.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub states: Vec<Tensor>,
}

impl WindowBatch {
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn batch_size(&self) -> usize {
        self.states.first().map_or(0, |s| s.shape()[0])
    }

    fn require_horizon(&self, needed: usize) -> Result<(), ObjectiveError> {
        if self.horizon() < needed {
            return Err(ObjectiveError::WindowTooShort {
                needed,
                got: self.horizon(),
            });
        }
        Ok(())
    }
}

fn check_sample_sets(u: &Tensor, v: &Tensor) -> Result<(usize, usize), ObjectiveError> {
    let (us, vs) = (u.shape(), v.shape());
    if us.len() != 2 || vs.len() != 2 || us[1] != vs[1] {
        return Err(ObjectiveError::SampleShape(us.to_vec(), vs.to_vec()));
    }
    Ok((us[0], vs[0]))
}

/// Dense kernel matrix `K[i, j] = κ(u_i, v_j)`, row-major n×m.
pub fn rq_kernel_matrix(
    u: &Tensor,
    v: &Tensor,
    kernel: &KernelSpec,
) -> Result<Vec<f64>, ObjectiveError> {
    kernel.validate()?;
    let (n, m) = check_sample_sets(u, v)?;
    let d = u.shape()[1];
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ui = u.row(i);
        for j in 0..m {
            let vj = &v.data()[j * d..(j + 1) * d];
            let mut sq = 0.0;
            for c in 0..d {
                let diff = ui[c] - vj[c];
                sq += diff * diff;
            }
            out[i * m + j] = kernel.eval(sq);
        }
    }
    Ok(out)
}

/// U-statistic MMD²: within-set diagonals excluded, full cross term. May be
/// negative.
pub fn mmd2_unbiased(u: &Tensor, v: &Tensor, kernel: &KernelSpec) -> Result<f64, ObjectiveError> {
    let (n, m) = check_sample_sets(u, v)?;
    if n < 2 || m < 2 {
        return Err(ObjectiveError::TooFewSamples { n, m });
    }
    let kuu = rq_kernel_matrix(u, u, kernel)?;
    let kvv = rq_kernel_matrix(v, v, kernel)?;
    let kuv = rq_kernel_matrix(u, v, kernel)?;
    let off_diag = |k: &[f64], size: usize| {
        let total: f64 = k.iter().sum();
        let diag: f64 = (0..size).map(|i| k[i * size + i]).sum();
        total - diag
    };
    Ok(off_diag(&kuu, n) / (n * (n - 1)) as f64
        + off_diag(&kvv, m) / (m * (m - 1)) as f64
        - 2.0 * kuv.iter().sum::<f64>() / (n * m) as f64)
}

/// V-statistic MMD² with all terms; non-negative, zero iff the multisets
/// coincide. Expects equal set sizes.
pub fn mmd2_biased(u: &Tensor, v: &Tensor, kernel: &KernelSpec) -> Result<f64, ObjectiveError> {
    let (n, m) = check_sample_sets(u, v)?;
    if n != m {
        return Err(ObjectiveError::SizeMismatch { n, m });
    }
    let kuu = rq_kernel_matrix(u, u, kernel)?;
    let kvv = rq_kernel_matrix(v, v, kernel)?;
    let kuv = rq_kernel_matrix(u, v, kernel)?;
    let nn = (n * n) as f64;
    Ok((kuu.iter().sum::<f64>() + kvv.iter().sum::<f64>() - 2.0 * kuv.iter().sum::<f64>()) / nn)
}

/// Kernel matrix node κ(a_i, b_j) on the tape.
fn kernel_matrix_node(
    tape: &mut Tape,
    a: NodeId,
    b: NodeId,
    kernel: &KernelSpec,
) -> Result<NodeId, ObjectiveError> {
    let d = tape.pairwise_sq_dists(a, b)?;
    Ok(tape.rq_kernel(d, &kernel.bandwidths)?)
}

/// Σ_{ij} κ(a_i, a_j) without materializing the matrix; for within-data
/// terms that carry no gradient.
fn rq_kernel_self_sum(a: &Tensor, kernel: &KernelSpec) -> f64 {
    let n = a.shape()[0];
    let d = a.shape()[1];
    let data = a.data();
    let mut total = 0.0;
    if d == 3 {
        for i in 0..n {
            let (a0, a1, a2) = (data[i * 3], data[i * 3 + 1], data[i * 3 + 2]);
            for j in 0..n {
                let d0 = a0 - data[j * 3];
                let d1 = a1 - data[j * 3 + 1];
                let d2 = a2 - data[j * 3 + 2];
                total += kernel.eval(d0 * d0 + d1 * d1 + d2 * d2);
            }
        }
    } else {
        for i in 0..n {
            let ai = &data[i * d..(i + 1) * d];
            for j in 0..n {
                let aj = &data[j * d..(j + 1) * d];
                let sq: f64 = ai.iter().zip(aj).map(|(x, y)| (x - y) * (x - y)).sum();
                total += kernel.eval(sq);
            }
        }
    }
    total
}

/// MMD² where the first set is pure data: its within-set term is a constant
/// scalar, so only the model-side and cross matrices live on the tape.
fn mmd2_const_first(
    tape: &mut Tape,
    first: &Tensor,
    first_node: NodeId,
    model: NodeId,
    kvv: NodeId,
    kernel: &KernelSpec,
    estimator: RegEstimator,
) -> Result<NodeId, ObjectiveError> {
    let (n, m) = check_sample_sets(first, tape.value(model))?;
    let kuv = kernel_matrix_node(tape, first_node, model, kernel)?;
    let uu_sum = rq_kernel_self_sum(first, kernel);
    match estimator {
        RegEstimator::Biased => {
            if n != m {
                return Err(ObjectiveError::SizeMismatch { n, m });
            }
            let uu = tape.leaf(Tensor::scalar(uu_sum / (n * n) as f64))?;
            let m_vv = tape.mean(kvv)?;
            let m_uv = tape.mean(kuv)?;
            let within = tape.add(uu, m_vv)?;
            let cross = tape.scale(m_uv, -2.0)?;
            Ok(tape.add(within, cross)?)
        }
        RegEstimator::Unbiased => {
            if n < 2 || m < 2 {
                return Err(ObjectiveError::TooFewSamples { n, m });
            }
            let uu_off = (uu_sum - n as f64 * kernel.self_value()) / (n * (n - 1)) as f64;
            let uu = tape.leaf(Tensor::scalar(uu_off))?;
            let vv_total = tape.sum(kvv)?;
            let vv_diag = tape.leaf(Tensor::scalar(m as f64 * kernel.self_value()))?;
            let vv_off = tape.sub(vv_total, vv_diag)?;
            let vv = tape.scale(vv_off, 1.0 / (m * (m - 1)) as f64)?;
            let s_uv = tape.sum(kuv)?;
            let cross = tape.scale(s_uv, -2.0 / (n * m) as f64)?;
            let within = tape.add(uu, vv)?;
            Ok(tape.add(within, cross)?)
        }
    }
}

/// MMD² from precomputed kernel-matrix nodes; lets composite objectives
/// share the expensive within-set matrix of the model predictions.
fn mmd2_from_kernels(
    tape: &mut Tape,
    kuu: NodeId,
    kvv: NodeId,
    kuv: NodeId,
    n: usize,
    m: usize,
    kernel: &KernelSpec,
    estimator: RegEstimator,
) -> Result<NodeId, ObjectiveError> {
    match estimator {
        RegEstimator::Biased => {
            if n != m {
                return Err(ObjectiveError::SizeMismatch { n, m });
            }
            let m_uu = tape.mean(kuu)?;
            let m_vv = tape.mean(kvv)?;
            let m_uv = tape.mean(kuv)?;
            let within = tape.add(m_uu, m_vv)?;
            let cross = tape.scale(m_uv, -2.0)?;
            Ok(tape.add(within, cross)?)
        }
        RegEstimator::Unbiased => {
            if n < 2 || m < 2 {
                return Err(ObjectiveError::TooFewSamples { n, m });
            }
            // The diagonal of a within-set kernel matrix is exactly
            // |bandwidths| per row, a constant with zero gradient.
            let within_term = |tape: &mut Tape,
                                   k: NodeId,
                                   size: usize|
             -> Result<NodeId, ObjectiveError> {
                let total = tape.sum(k)?;
                let diag = tape.leaf(Tensor::scalar(size as f64 * kernel.self_value()))?;
                let off = tape.sub(total, diag)?;
                Ok(tape.scale(off, 1.0 / (size * (size - 1)) as f64)?)
            };
            let t_uu = within_term(tape, kuu, n)?;
            let t_vv = within_term(tape, kvv, m)?;
            let s_uv = tape.sum(kuv)?;
            let t_uv = tape.scale(s_uv, -2.0 / (n * m) as f64)?;
            let within = tape.add(t_uu, t_vv)?;
            Ok(tape.add(within, t_uv)?)
        }
    }
}

/// MMD² between two sample-set nodes, on the tape.
pub fn mmd2_on_tape(
    tape: &mut Tape,
    u: NodeId,
    v: NodeId,
    kernel: &KernelSpec,
    estimator: RegEstimator,
) -> Result<NodeId, ObjectiveError> {
    kernel.validate()?;
    let (n, m) = check_sample_sets(tape.value(u), tape.value(v))?;
    let kuu = kernel_matrix_node(tape, u, u, kernel)?;
    let kvv = kernel_matrix_node(tape, v, v, kernel)?;
    let kuv = kernel_matrix_node(tape, u, v, kernel)?;
    mmd2_from_kernels(tape, kuu, kvv, kuv, n, m, kernel, estimator)
}

/// Mean over the batch of the squared L2 misfit between two `[n, D]` nodes.
fn mean_sq_misfit(tape: &mut Tape, pred: NodeId, target: NodeId) -> Result<NodeId, ObjectiveError> {
    let n = tape.value(pred).shape()[0];
    let diff = tape.sub(pred, target)?;
    let total = tape.sq_norm(diff)?;
    Ok(tape.scale(total, 1.0 / n as f64)?)
}

/// One-step objective: mean ‖S(u_j) − u_{j+1}‖².
pub fn loss_one_step(
    tape: &mut Tape,
    stepper: &BoundStepper,
    inputs: &Tensor,
    targets: &Tensor,
) -> Result<NodeId, ObjectiveError> {
    let u = tape.leaf(inputs.clone())?;
    let t = tape.leaf(targets.clone())?;
    let pred = stepper.step(tape, u)?;
    mean_sq_misfit(tape, pred, t)
}

/// Discounted multi-step objective: mean Σ_k ω(k)·‖S^k(u_j) − u_{j+k}‖²,
/// gradients through the full composition.
pub fn loss_multistep(
    tape: &mut Tape,
    stepper: &BoundStepper,
    batch: &WindowBatch,
    horizon: usize,
    omega: &DiscountSchedule,
) -> Result<NodeId, ObjectiveError> {
    if horizon == 0 {
        return Err(ObjectiveError::ZeroRollout);
    }
    batch.require_horizon(horizon)?;
    let u0 = tape.leaf(batch.states[0].clone())?;
    let preds = stepper.rollout(tape, u0, horizon, SgPattern::None)?;
    let mut acc: Option<NodeId> = None;
    for k in 1..=horizon {
        let target = tape.leaf(batch.states[k].clone())?;
        let misfit = mean_sq_misfit(tape, preds[k - 1], target)?;
        let weighted = tape.scale(misfit, omega.weight(k))?;
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted)?,
            None => weighted,
        });
    }
    Ok(acc.expect("horizon >= 1"))
}

/// Pushforward objective: mean ω(ℓ)·‖S(sg(S^(ℓ−1)(u_j))) − u_{j+ℓ}‖²;
/// gradients flow only through the final application.
pub fn loss_pushforward(
    tape: &mut Tape,
    stepper: &BoundStepper,
    batch: &WindowBatch,
    horizon: usize,
    omega: &DiscountSchedule,
) -> Result<NodeId, ObjectiveError> {
    if horizon == 0 {
        return Err(ObjectiveError::ZeroRollout);
    }
    batch.require_horizon(horizon)?;
    let u0 = tape.leaf(batch.states[0].clone())?;
    let preds = stepper.rollout(tape, u0, horizon, SgPattern::DetachBeforeLast)?;
    let target = tape.leaf(batch.states[horizon].clone())?;
    let misfit = mean_sq_misfit(tape, preds[horizon - 1], target)?;
    Ok(tape.scale(misfit, omega.weight(horizon))?)
}

/// Unconditional regularization: MMD² between the batch initial states and
/// their ℓ-step model pushforward.
pub fn reg_unconditional(
    tape: &mut Tape,
    stepper: &BoundStepper,
    ics: &Tensor,
    horizon: usize,
    kernel: &KernelSpec,
    mode: RegMode,
    estimator: RegEstimator,
) -> Result<NodeId, ObjectiveError> {
    if horizon == 0 {
        return Err(ObjectiveError::ZeroRollout);
    }
    let u0 = tape.leaf(ics.clone())?;
    let preds = stepper.rollout(tape, u0, horizon, mode.sg_pattern())?;
    mmd2_on_tape(tape, u0, preds[horizon - 1], kernel, estimator)
}

/// Conditional regularization: MMD² between the true ℓ-step evolutions from
/// the data and the model's ℓ-step evolutions of the same initial states.
pub fn reg_conditional(
    tape: &mut Tape,
    stepper: &BoundStepper,
    batch: &WindowBatch,
    horizon: usize,
    kernel: &KernelSpec,
    mode: RegMode,
    estimator: RegEstimator,
) -> Result<NodeId, ObjectiveError> {
    if horizon == 0 {
        return Err(ObjectiveError::ZeroRollout);
    }
    batch.require_horizon(horizon)?;
    let u0 = tape.leaf(batch.states[0].clone())?;
    let preds = stepper.rollout(tape, u0, horizon, mode.sg_pattern())?;
    let truth = tape.leaf(batch.states[horizon].clone())?;
    mmd2_on_tape(tape, truth, preds[horizon - 1], kernel, estimator)
}

/// Composed objective values for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DyslimLoss {
    pub total: NodeId,
    pub base_value: f64,
    pub reg_unconditional_value: f64,
    pub reg_conditional_value: f64,
    pub total_value: f64,
}

/// Builds base + λ1·reg_u + λ2·reg_c on one tape, sharing a single model
/// rollout across all three terms. Regularizers with zero weight are skipped
/// entirely, so a λ = 0 run is bitwise identical to the plain base run.
pub fn dyslim_total(
    tape: &mut Tape,
    stepper: &BoundStepper,
    batch: &WindowBatch,
    config: &DyslimConfig,
    horizon: usize,
    omega: &DiscountSchedule,
) -> Result<DyslimLoss, ObjectiveError> {
    if horizon == 0 {
        return Err(ObjectiveError::ZeroRollout);
    }
    batch.require_horizon(match config.base {
        BaseObjective::OneStep => horizon.max(1),
        _ => horizon,
    })?;
    let with_regs = config.lambda1 > 0.0 || config.lambda2 > 0.0;

    let sg = match config.base {
        BaseObjective::Pushforward => SgPattern::DetachBeforeLast,
        _ => SgPattern::None,
    };
    let u0 = tape.leaf(batch.states[0].clone())?;
    // The one-step base only needs the rollout up to its own horizon when no
    // regularizer consumes the longer pushforward.
    let roll_len = match config.base {
        BaseObjective::OneStep if !with_regs => 1,
        _ => horizon,
    };
    let preds = stepper.rollout(tape, u0, roll_len, sg)?;

    let base = match config.base {
        BaseObjective::OneStep => {
            let target = tape.leaf(batch.states[1].clone())?;
            mean_sq_misfit(tape, preds[0], target)?
        }
        BaseObjective::Curriculum => {
            let mut acc: Option<NodeId> = None;
            for k in 1..=horizon {
                let target = tape.leaf(batch.states[k].clone())?;
                let misfit = mean_sq_misfit(tape, preds[k - 1], target)?;
                let weighted = tape.scale(misfit, omega.weight(k))?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, weighted)?,
                    None => weighted,
                });
            }
            acc.expect("horizon >= 1")
        }
        BaseObjective::Pushforward => {
            let target = tape.leaf(batch.states[horizon].clone())?;
            let misfit = mean_sq_misfit(tape, preds[horizon - 1], target)?;
            let pf = tape.scale(misfit, omega.weight(horizon))?;
            if config.pushforward_additive {
                // The rollout's first state is detached, so take a fresh
                // gradient-carrying step for the auxiliary one-step term.
                let pred1 = stepper.step(tape, u0)?;
                let target1 = tape.leaf(batch.states[1].clone())?;
                let one = mean_sq_misfit(tape, pred1, target1)?;
                tape.add(pf, one)?
            } else {
                pf
            }
        }
    };

    let mut total = base;
    let mut reg_u_value = 0.0;
    let mut reg_c_value = 0.0;
    if with_regs {
        // Both regularizers compare against the same model pushforward, so
        // the within-set kernel matrix of the predictions is shared; the
        // data-side within-set terms are gradient-free constants.
        let final_pred = preds[horizon - 1];
        let kvv = kernel_matrix_node(tape, final_pred, final_pred, &config.kernel)?;
        if config.lambda1 > 0.0 {
            let reg = mmd2_const_first(
                tape,
                &batch.states[0],
                u0,
                final_pred,
                kvv,
                &config.kernel,
                config.estimator,
            )?;
            reg_u_value = tape.value(reg).item().expect("scalar");
            let weighted = tape.scale(reg, config.lambda1)?;
            total = tape.add(total, weighted)?;
        }
        if config.lambda2 > 0.0 {
            let truth = tape.leaf(batch.states[horizon].clone())?;
            let reg = mmd2_const_first(
                tape,
                &batch.states[horizon],
                truth,
                final_pred,
                kvv,
                &config.kernel,
                config.estimator,
            )?;
            reg_c_value = tape.value(reg).item().expect("scalar");
            let weighted = tape.scale(reg, config.lambda2)?;
            total = tape.add(total, weighted)?;
        }
    }

    Ok(DyslimLoss {
        total,
        base_value: tape.value(base).item().expect("scalar"),
        reg_unconditional_value: reg_u_value,
        reg_conditional_value: reg_c_value,
        total_value: tape.value(total).item().expect("scalar"),
    })
}

/// Minimum over permutations of the mean squared pair cost; brute force, a
/// test oracle for sets of up to 8 points.
pub fn discrete_w2_assignment(x: &Tensor, y: &Tensor) -> Result<f64, ObjectiveError> {
    let (n, m) = check_sample_sets(x, y)?;
    if n != m {
        return Err(ObjectiveError::SizeMismatch { n, m });
    }
    if n > 8 {
        return Err(ObjectiveError::AssignmentTooLarge(n));
    }
    let d = x.shape()[1];
    let cost = |i: usize, j: usize| {
        let (xi, yj) = (x.row(i), &y.data()[j * d..(j + 1) * d]);
        xi.iter()
            .zip(yj)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum();
        if total < best {
            best = total;
        }
    });
    Ok(best / n as f64)
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}
