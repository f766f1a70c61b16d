//! Statistics along a learning trajectory.
//!
//! Everything here is evaluated at stored weights: the per-sample gradient
//! covariance trace, the accumulated trajectory complexity `C`, the probe
//! `gamma_tilde = |grad F_S'| / |grad F_S|`, the diversity ratio `V`, the
//! subset-bias factor `gamma'`, relative progress ratios and the split of the
//! generalization gap into first-order and remainder parts. The holdout set
//! `S'` stands in for the population wherever a population quantity appears.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::models::{grad_mean, per_sample_grads, GradMatrix, ModelSpec};
use crate::numerics::{axpy, dot, norm, norm_sq, sub, RngStream, SignVector};
use crate::optim::{Mode, Recorder, StepRecord};

/// Values more negative than this (relative to the second moment) mean a gradient bug.
const TRACE_CLAMP_TOL: f64 = 1e-9;

/// Largest `n` for which exhaustive subset enumeration is allowed.
pub const MAX_EXHAUSTIVE_N: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySnapshot {
    pub t: usize,
    pub epoch: usize,
    pub eta: f64,
    pub f_s: f64,
    pub f_sprime: f64,
    pub grad_norm_s: f64,
    pub grad_norm_sprime: f64,
    pub grad_dot: f64,
    pub trace_sigma: f64,
    /// `eta * |grad F_S|`
    pub delta: f64,
    pub c_cum: f64,
    pub gamma_tilde: Option<f64>,
    /// Progress ratios of the interval ending at this snapshot.
    pub rp: Option<f64>,
    pub trp: Option<f64>,
    /// Set when the complexity increment into this snapshot was skipped
    /// because `grad F_S` vanished while the covariance did not.
    pub degenerate_gradient: bool,
}

impl TrajectorySnapshot {
    /// `1 + Tr(Sigma) / |grad F_S|^2`, or `None` at a vanishing gradient with nonzero spread.
    pub fn noise_ratio(&self) -> Option<f64> {
        noise_ratio(self.trace_sigma, self.grad_norm_s)
    }
}

fn noise_ratio(trace_sigma: f64, grad_norm: f64) -> Option<f64> {
    if grad_norm > 0.0 {
        Some(1.0 + trace_sigma / (grad_norm * grad_norm))
    } else if trace_sigma == 0.0 {
        Some(1.0)
    } else {
        None
    }
}

/// How random subsets `U` of the training set are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetSampling {
    /// Each sample joins `U` independently with probability 1/2 (Rademacher signs).
    #[default]
    Rademacher,
    /// `|U|` uniform on `1..n-1`, then `U` uniform among subsets of that size.
    UniformSize,
    /// Every one of the `2^n` subsets; only for `n <= MAX_EXHAUSTIVE_N`.
    Exhaustive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubsetEstimatorConfig {
    pub k_samples: usize,
    /// Subsample size for the gradient second moment; `None` uses all of `S`.
    pub n_sp: Option<usize>,
    pub seed: u64,
    pub sampling: SubsetSampling,
    /// Resampled batches per snapshot for the `M2` / `M4` moments.
    pub moment_batches: usize,
}

impl Default for SubsetEstimatorConfig {
    fn default() -> Self {
        Self {
            k_samples: 1024,
            n_sp: None,
            seed: 0,
            sampling: SubsetSampling::Rademacher,
            moment_batches: 64,
        }
    }
}

impl SubsetEstimatorConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k_samples == 0 {
            return Err(Error::invalid("k_samples must be >= 1"));
        }
        if let Some(sp) = self.n_sp {
            if sp == 0 || sp > n {
                return Err(Error::invalid(format!("n_sp {sp} outside [1, {n}]")));
            }
        }
        if self.sampling == SubsetSampling::Exhaustive && n > MAX_EXHAUSTIVE_N {
            return Err(Error::invalid(format!(
                "exhaustive subset enumeration needs n <= {MAX_EXHAUSTIVE_N}, got {n}"
            )));
        }
        Ok(())
    }

    pub fn n_sp_for(&self, n: usize) -> usize {
        self.n_sp.unwrap_or(n).min(n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceSigma {
    pub trace: f64,
    pub grad_norm: f64,
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `Tr(Sigma) = mean_i |grad f_i|^2 - |grad F_S|^2`.
///
/// `grad F_S` is always exact; the second moment uses a uniform subsample of
/// `n_sp` rows when `n_sp < n`. With the full set, roundoff negatives clamp to
/// zero and anything beyond that is an error; a subsampled estimate clamps at zero.
pub fn grad_trace_sigma(
    spec: &ModelSpec,
    w: &[f64],
    data: &Dataset,
    n_sp: usize,
    rng: &mut RngStream,
) -> Result<TraceSigma> {
    let n = data.len();
    if n_sp == 0 || n_sp > n {
        return Err(Error::invalid(format!("n_sp {n_sp} outside [1, {n}]")));
    }
    let (loss, grad, second) = if n_sp == n {
        let all: Vec<usize> = (0..n).collect();
        let g = per_sample_grads(spec, w, data, &all)?;
        let loss = g.losses().iter().sum::<f64>() / n as f64;
        let second = g.row_norms_sq().iter().sum::<f64>() / n as f64;
        (loss, g.mean(), second)
    } else {
        let (loss, grad) = grad_mean(spec, w, data)?;
        let idx = rng.distinct_indices(n, n_sp);
        let g = per_sample_grads(spec, w, data, &idx)?;
        let second = g.row_norms_sq().iter().sum::<f64>() / n_sp as f64;
        (loss, grad, second)
    };
    let gn2 = norm_sq(&grad);
    let mut trace = second - gn2;
    if trace < 0.0 {
        if n_sp < n || trace >= -TRACE_CLAMP_TOL * second.max(1.0) {
            trace = 0.0;
        } else {
            return Err(Error::NumericDomain {
                location: "covariance trace".into(),
                detail: format!("second moment {second} below squared mean norm {gn2}"),
            });
        }
    }
    Ok(TraceSigma {
        trace,
        grad_norm: gn2.sqrt(),
        loss,
        grad,
    })
}

/// Scale `(n - b) / (b (n - 1))` relating batch-noise covariance to `Sigma`.
pub fn noise_cov_scale(n: usize, b: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("noise covariance scale needs n >= 2"));
    }
    if b == 0 || b > n {
        return Err(Error::invalid(format!("batch size {b} outside [1, {n}]")));
    }
    Ok((n - b) as f64 / (b as f64 * (n - 1) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityStep {
    pub c_next: f64,
    pub degenerate: bool,
}

/// `C_next = C_prev - 2 (F_curr - F_prev) / sqrt(n) * sqrt(1 + Tr(Sigma) / |grad F_S|^2)`.
///
/// A zero gradient with zero covariance contributes with ratio 1; a zero
/// gradient with nonzero covariance skips the increment and flags it.
pub fn complexity_update(
    c_prev: f64,
    f_prev: f64,
    f_curr: f64,
    trace_sigma: f64,
    grad_norm: f64,
    n: usize,
) -> Result<ComplexityStep> {
    if n == 0 {
        return Err(Error::invalid("complexity update needs n >= 1"));
    }
    match noise_ratio(trace_sigma, grad_norm) {
        Some(ratio) => Ok(ComplexityStep {
            c_next: c_prev - 2.0 * (f_curr - f_prev) / (n as f64).sqrt() * ratio.sqrt(),
            degenerate: false,
        }),
        None => Ok(ComplexityStep {
            c_next: c_prev,
            degenerate: true,
        }),
    }
}

/// `|grad F_S'| / |grad F_S|`; `None` when the training gradient vanishes.
pub fn gamma_tilde(grad_norm_sprime: f64, grad_norm_s: f64) -> Option<f64> {
    (grad_norm_s > 0.0).then(|| grad_norm_sprime / grad_norm_s)
}

/// Draws subsets of `[0, n)` as sign vectors according to a sampling scheme.
struct SubsetDraws {
    n: usize,
    sampling: SubsetSampling,
    rng: RngStream,
    remaining: u64,
    next_mask: u64,
}

impl SubsetDraws {
    fn new(n: usize, cfg: &SubsetEstimatorConfig, rng: RngStream) -> Self {
        let remaining = match cfg.sampling {
            SubsetSampling::Exhaustive => 1u64 << n,
            _ => cfg.k_samples as u64,
        };
        Self {
            n,
            sampling: cfg.sampling,
            rng,
            remaining,
            next_mask: 0,
        }
    }
}

impl Iterator for SubsetDraws {
    type Item = SignVector;

    fn next(&mut self) -> Option<SignVector> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(match self.sampling {
            SubsetSampling::Rademacher => crate::numerics::rademacher_signs(&mut self.rng, self.n).expect("n >= 1"),
            SubsetSampling::UniformSize => {
                let mut signs = vec![-1i8; self.n];
                if self.n >= 2 {
                    let size = 1 + self.rng.index(self.n - 1);
                    for i in self.rng.distinct_indices(self.n, size) {
                        signs[i] = 1;
                    }
                }
                SignVector::from_signs(signs).expect("signs are +-1")
            }
            SubsetSampling::Exhaustive => {
                let mask = self.next_mask;
                self.next_mask += 1;
                SignVector::from_mask(mask, self.n)
            }
        })
    }
}

/// `(1/n) sum_i sigma_i g_i`
pub fn signed_mean(grads: &GradMatrix, signs: &SignVector) -> Vec<f64> {
    let mut acc = vec![0.0; grads.cols()];
    for (i, s) in signs.iter().enumerate() {
        axpy(s, grads.row(i), &mut acc);
    }
    let n = grads.rows() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    acc
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityEstimate {
    /// `|grad F_S| / D_hat`, `None` when `D_hat = 0` (the bound is trivial).
    pub v: Option<f64>,
    /// Monte-Carlo (or exhaustive) mean of `|(1/n) sum sigma_i g_i|`.
    pub d_hat: f64,
    /// Standard error of `d_hat`; zero for exhaustive enumeration.
    pub std_err: f64,
    pub grad_norm: f64,
    pub draws: usize,
}

/// Diversity ratio `V` from precomputed per-sample gradients.
pub fn diversity_from_grads(
    grads: &GradMatrix,
    cfg: &SubsetEstimatorConfig,
    rng: RngStream,
) -> Result<DiversityEstimate> {
    let n = grads.rows();
    if n < 2 {
        return Err(Error::invalid("V needs n >= 2"));
    }
    cfg.validate(n)?;
    let grad_norm = norm(&grads.mean());
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut draws = 0usize;
    for signs in SubsetDraws::new(n, cfg, rng) {
        let d = norm(&signed_mean(grads, &signs));
        sum += d;
        sum_sq += d * d;
        draws += 1;
    }
    let mean = sum / draws as f64;
    let std_err = if cfg.sampling == SubsetSampling::Exhaustive || draws < 2 {
        0.0
    } else {
        let var = ((sum_sq - draws as f64 * mean * mean) / (draws as f64 - 1.0)).max(0.0);
        (var / draws as f64).sqrt()
    };
    Ok(DiversityEstimate {
        v: (mean > 0.0).then(|| grad_norm / mean),
        d_hat: mean,
        std_err,
        grad_norm,
        draws,
    })
}

/// Stream tags for estimator randomness under `SubsetEstimatorConfig::seed`.
pub mod streams {
    pub const DIVERSITY: u64 = 0x0d;
    pub const GAMMA_PRIME: u64 = 0x0e;
    pub const TRACE_SUBSAMPLE: u64 = 0x0f;
    pub const MOMENTS: u64 = 0x10;
}

pub fn estimate_v(
    spec: &ModelSpec,
    w: &[f64],
    data: &Dataset,
    cfg: &SubsetEstimatorConfig,
) -> Result<DiversityEstimate> {
    let all: Vec<usize> = (0..data.len()).collect();
    let grads = per_sample_grads(spec, w, data, &all)?;
    diversity_from_grads(&grads, cfg, RngStream::new(cfg.seed, streams::DIVERSITY))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GammaPrimeEstimate {
    /// `max{1, inner_max} * gamma`
    pub value: f64,
    /// Largest sampled `|U| |grad F_U| / (n |grad F_S|)` over snapshots.
    pub inner_max: f64,
    /// `max{1, max_i |grad f_i| / |grad F_S|} * gamma`, an upper bracket for `value`.
    pub envelope: f64,
    /// Snapshots skipped because `grad F_S` vanished.
    pub skipped: usize,
}

/// Sampled inner maximum of `|sum_{i in U} g_i| / (n |grad F_S|)` over proper nonempty `U`,
/// plus the per-sample envelope. `None` when the mean gradient is zero.
pub fn subset_ratio_max(grads: &GradMatrix, cfg: &SubsetEstimatorConfig, rng: RngStream) -> Result<Option<(f64, f64)>> {
    let n = grads.rows();
    cfg.validate(n)?;
    let mean = grads.mean();
    let gs = norm(&mean);
    if gs == 0.0 {
        return Ok(None);
    }
    let scale = 1.0 / (n as f64 * gs);
    let mut inner: f64 = 0.0;
    let mut acc = vec![0.0; grads.cols()];
    for signs in SubsetDraws::new(n, cfg, rng) {
        let members = signs.positive_indices();
        if members.is_empty() || members.len() == n {
            continue;
        }
        acc.iter_mut().for_each(|v| *v = 0.0);
        for &i in &members {
            axpy(1.0, grads.row(i), &mut acc);
        }
        inner = inner.max(norm(&acc) * scale);
    }
    let envelope = grads.row_norms_sq().iter().fold(0.0_f64, |m, &v| m.max(v.sqrt())) / gs;
    Ok(Some((inner, envelope)))
}

pub fn estimate_gamma_prime(
    spec: &ModelSpec,
    weights: &[Vec<f64>],
    data: &Dataset,
    gamma: f64,
    cfg: &SubsetEstimatorConfig,
) -> Result<GammaPrimeEstimate> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut inner_max: f64 = 0.0;
    let mut envelope: f64 = 0.0;
    let mut skipped = 0;
    for (k, w) in weights.iter().enumerate() {
        let grads = per_sample_grads(spec, w, data, &all)?;
        let rng = RngStream::new(cfg.seed, streams::GAMMA_PRIME).substream(streams::GAMMA_PRIME << 32 | k as u64);
        match subset_ratio_max(&grads, cfg, rng)? {
            Some((inner, env)) => {
                inner_max = inner_max.max(inner);
                envelope = envelope.max(env);
            }
            None => skipped += 1,
        }
    }
    Ok(GammaPrimeEstimate {
        value: inner_max.max(1.0) * gamma,
        inner_max,
        envelope: envelope.max(1.0) * gamma,
        skipped,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProgressRatios {
    pub rp: Option<f64>,
    pub trp: Option<f64>,
}

/// Relative progress of one GD step against its first-order prediction:
/// `rp = dF_S / (eta |grad F_S|^2)`, `trp = dF_S' / (eta grad F_S . grad F_S')`.
pub fn rp_trp_gd(
    f_s_prev: f64,
    f_s_curr: f64,
    f_sp_prev: f64,
    f_sp_curr: f64,
    eta: f64,
    grad_s_prev: &[f64],
    grad_sp_prev: &[f64],
) -> ProgressRatios {
    let rp_den = eta * norm_sq(grad_s_prev);
    let trp_den = eta * dot(grad_s_prev, grad_sp_prev);
    ProgressRatios {
        rp: (rp_den != 0.0).then(|| (f_s_curr - f_s_prev) / rp_den),
        trp: (trp_den != 0.0).then(|| (f_sp_curr - f_sp_prev) / trp_den),
    }
}

/// Progress ratios from a weight displacement, for intervals spanning several
/// (possibly stochastic) steps whose summed rate is `eta_eff`.
///
/// The train gradient is recovered as `(x_prev - x_curr) / eta_eff`, giving
/// `rp = eta_eff dF_S / |dx|^2` and `trp = dF_S' / ((x_prev - x_curr) . grad F_S'(x_prev))`.
pub fn rp_trp_displacement(
    x_prev: &[f64],
    x_curr: &[f64],
    f_s: (f64, f64),
    f_sp: (f64, f64),
    eta_eff: f64,
    grad_sp_prev: &[f64],
) -> ProgressRatios {
    let step = sub(x_prev, x_curr);
    let disp = norm_sq(&step);
    let trp_den = dot(&step, grad_sp_prev);
    ProgressRatios {
        rp: (disp != 0.0).then(|| eta_eff * (f_s.1 - f_s.0) / disp),
        trp: (trp_den != 0.0).then(|| (f_sp.1 - f_sp.0) / trp_den),
    }
}

/// Epoch-level SGD approximation with effective rate `(n / b) eta`.
/// Returns the ratios and the effective rate.
#[allow(clippy::too_many_arguments)]
pub fn rp_trp_sgd_approx(
    x_prev: &[f64],
    x_curr: &[f64],
    f_s: (f64, f64),
    f_sp: (f64, f64),
    eta: f64,
    b: usize,
    n: usize,
    grad_sp_prev: &[f64],
) -> (ProgressRatios, f64) {
    let eta_eff = n as f64 / b as f64 * eta;
    (
        rp_trp_displacement(x_prev, x_curr, f_s, f_sp, eta_eff, grad_sp_prev),
        eta_eff,
    )
}

/// Weights and both mean gradients at a snapshot, kept for the gap decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordedState {
    pub t: usize,
    pub w: Vec<f64>,
    pub grad_s: Vec<f64>,
    pub grad_sprime: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenDecomposition {
    /// `(F_S'(J_t) - F_S'(J_{t-1})) - (F_S(J_t) - F_S(J_{t-1}))` for `t = 1..T`.
    pub per_step: Vec<f64>,
    /// `sum_t (J_t - J_{t-1}) . (grad F_S'(J_{t-1}) - grad F_S(J_{t-1}))`
    pub gen_lin: f64,
    /// Gap growth not explained by the first-order part.
    pub gen_nl: f64,
    pub initial_gap: f64,
    pub final_gap: f64,
}

pub fn gen_decomposition(snapshots: &[TrajectorySnapshot], states: &[RecordedState]) -> Result<GenDecomposition> {
    let first = snapshots
        .first()
        .ok_or_else(|| Error::IncompleteTrajectory("no snapshots".into()))?;
    if first.t != 0 {
        return Err(Error::IncompleteTrajectory("step-0 snapshot missing".into()));
    }
    if let Some((k, s)) = snapshots.iter().enumerate().find(|(k, s)| s.t != *k) {
        return Err(Error::IncompleteTrajectory(format!(
            "snapshot {k} is at step {}, per-step snapshots required",
            s.t
        )));
    }
    if states.len() != snapshots.len() || states.iter().zip(snapshots).any(|(a, b)| a.t != b.t) {
        return Err(Error::IncompleteTrajectory(
            "stored weights and gradients must accompany every snapshot".into(),
        ));
    }

    let mut per_step = Vec::with_capacity(snapshots.len().saturating_sub(1));
    let mut gen_lin = 0.0;
    for k in 1..snapshots.len() {
        let (prev, curr) = (&snapshots[k - 1], &snapshots[k]);
        per_step.push((curr.f_sprime - prev.f_sprime) - (curr.f_s - prev.f_s));
        let dw = sub(&states[k].w, &states[k - 1].w);
        let dg = sub(&states[k - 1].grad_sprime, &states[k - 1].grad_s);
        gen_lin += dot(&dw, &dg);
    }
    let initial_gap = first.f_sprime - first.f_s;
    let last = snapshots.last().expect("non-empty");
    let final_gap = last.f_sprime - last.f_s;
    Ok(GenDecomposition {
        per_step,
        gen_lin,
        gen_nl: (final_gap - initial_gap) - gen_lin,
        initial_gap,
        final_gap,
    })
}

/// Recorder computing a [`TrajectorySnapshot`] at each snapshot step.
pub struct SnapshotRecorder<'a> {
    spec: &'a ModelSpec,
    train: &'a Dataset,
    holdout: &'a Dataset,
    n_sp: usize,
    mode: Mode,
    rng: RngStream,
    keep_states: bool,
    states: Vec<RecordedState>,
    history: Vec<TrajectorySnapshot>,
    prev: Option<PrevSnapshot>,
    eta_since_prev: f64,
    steps_since_prev: usize,
}

struct PrevSnapshot {
    f_s: f64,
    f_sp: f64,
    c_cum: f64,
    eta: f64,
    w: Vec<f64>,
    grad_s: Vec<f64>,
    grad_sp: Vec<f64>,
}

impl<'a> SnapshotRecorder<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        train: &'a Dataset,
        holdout: &'a Dataset,
        mode: Mode,
        estimators: &SubsetEstimatorConfig,
    ) -> Self {
        Self {
            spec,
            train,
            holdout,
            n_sp: estimators.n_sp_for(train.len()),
            mode,
            rng: RngStream::new(estimators.seed, streams::TRACE_SUBSAMPLE),
            keep_states: false,
            states: Vec::new(),
            history: Vec::new(),
            prev: None,
            eta_since_prev: 0.0,
            steps_since_prev: 0,
        }
    }

    /// Also keep weights and gradients at every snapshot.
    pub fn keep_states(mut self, keep: bool) -> Self {
        self.keep_states = keep;
        self
    }

    pub fn states(&self) -> &[RecordedState] {
        &self.states
    }

    pub fn into_states(self) -> Vec<RecordedState> {
        self.states
    }

    /// Snapshots taken so far; survives a run that aborts midway.
    pub fn history(&self) -> &[TrajectorySnapshot] {
        &self.history
    }
}

impl Recorder for SnapshotRecorder<'_> {
    type Snapshot = TrajectorySnapshot;

    fn snapshot(&mut self, t: usize, epoch: usize, eta: f64, w: &[f64]) -> Result<TrajectorySnapshot> {
        let stats = grad_trace_sigma(self.spec, w, self.train, self.n_sp, &mut self.rng)?;
        let (f_sp, grad_sp) = grad_mean(self.spec, w, self.holdout)?;
        let grad_norm_sp = norm(&grad_sp);
        let grad_dot = dot(&stats.grad, &grad_sp);

        let mut c_cum = 0.0;
        let mut degenerate = false;
        let mut ratios = ProgressRatios::default();
        if let Some(prev) = &self.prev {
            let upd = complexity_update(
                prev.c_cum,
                prev.f_s,
                stats.loss,
                stats.trace,
                stats.grad_norm,
                self.train.len(),
            )?;
            c_cum = upd.c_next;
            degenerate = upd.degenerate;
            ratios = if self.mode == Mode::Gd && self.steps_since_prev == 1 {
                rp_trp_gd(
                    prev.f_s,
                    stats.loss,
                    prev.f_sp,
                    f_sp,
                    prev.eta,
                    &prev.grad_s,
                    &prev.grad_sp,
                )
            } else {
                rp_trp_displacement(
                    &prev.w,
                    w,
                    (prev.f_s, stats.loss),
                    (prev.f_sp, f_sp),
                    self.eta_since_prev,
                    &prev.grad_sp,
                )
            };
        }

        let snap = TrajectorySnapshot {
            t,
            epoch,
            eta,
            f_s: stats.loss,
            f_sprime: f_sp,
            grad_norm_s: stats.grad_norm,
            grad_norm_sprime: grad_norm_sp,
            grad_dot,
            trace_sigma: stats.trace,
            delta: eta * stats.grad_norm,
            c_cum,
            gamma_tilde: gamma_tilde(grad_norm_sp, stats.grad_norm),
            rp: ratios.rp,
            trp: ratios.trp,
            degenerate_gradient: degenerate,
        };
        if self.keep_states {
            self.states.push(RecordedState {
                t,
                w: w.to_vec(),
                grad_s: stats.grad.clone(),
                grad_sprime: grad_sp.clone(),
            });
        }
        self.prev = Some(PrevSnapshot {
            f_s: stats.loss,
            f_sp,
            c_cum,
            eta,
            w: w.to_vec(),
            grad_s: stats.grad,
            grad_sp,
        });
        self.eta_since_prev = 0.0;
        self.steps_since_prev = 0;
        self.history.push(snap.clone());
        Ok(snap)
    }

    fn after_step(&mut self, record: &StepRecord, _w_next: &[f64]) -> Result<()> {
        self.eta_since_prev += record.eta;
        self.steps_since_prev += 1;
        Ok(())
    }
}

pub const TRAJECTORY_COLUMNS: [&str; 14] = [
    "t",
    "epoch",
    "eta",
    "F_S",
    "F_Sprime",
    "grad_norm_S",
    "grad_norm_Sprime",
    "grad_dot",
    "trace_sigma",
    "delta",
    "C_cum",
    "gamma_tilde",
    "rp",
    "trp",
];

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes snapshots as `trajectory.csv` rows; missing values are empty cells.
pub fn write_trajectory_csv<W: Write>(out: W, snapshots: &[TrajectorySnapshot]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| Error::io("<trajectory.csv>", std::io::Error::other(e));
    w.write_record(TRAJECTORY_COLUMNS).map_err(to_err)?;
    for s in snapshots {
        w.write_record([
            s.t.to_string(),
            s.epoch.to_string(),
            s.eta.to_string(),
            s.f_s.to_string(),
            s.f_sprime.to_string(),
            s.grad_norm_s.to_string(),
            s.grad_norm_sprime.to_string(),
            s.grad_dot.to_string(),
            s.trace_sigma.to_string(),
            s.delta.to_string(),
            s.c_cum.to_string(),
            fmt_opt(s.gamma_tilde),
            fmt_opt(s.rp),
            fmt_opt(s.trp),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io("<trajectory.csv>", e))
}
