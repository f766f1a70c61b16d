//! Constant estimation and evaluation of the trajectory bounds and the
//! uniform-stability baselines.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::models::{hessian_vector_product, linear_top_curvature, per_sample_grads, GradMatrix, ModelKind, ModelSpec};
use crate::numerics::{norm_sq, power_iteration_top_eig, RngStream};
use crate::optim::{sample_batch, OptimConfig, Schedule};
use crate::trajectory::{
    diversity_from_grads, streams, subset_ratio_max, RecordedState, SubsetEstimatorConfig, TrajectorySnapshot,
};

/// Upper quantile of early-phase `gamma_tilde` that marks the end of the stable phase.
pub const DEFAULT_GAMMA_QUANTILE: f64 = 0.95;
/// Snapshots at which the Hessian spectrum is probed for non-linear models.
const SHARPNESS_PROBES: usize = 10;
const POWER_ITERS: usize = 200;
const POWER_TOL: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimates {
    pub l_hat: f64,
    pub beta_hat: f64,
    pub m2_sq: f64,
    pub m4_fourth: f64,
    pub gamma: f64,
    pub gamma_prime: f64,
    /// Per-sample envelope bracketing `gamma_prime` from above.
    pub gamma_prime_envelope: f64,
    pub v_m: f64,
    pub eta_m: f64,
    pub zeta: f64,
    pub t0: usize,
    pub n: usize,
    pub t: usize,
    pub b: usize,
    /// `V` was undefined or zero at every snapshot.
    pub trivial: bool,
    /// Snapshots skipped by the `V` / `gamma'` estimators because the mean gradient vanished.
    pub skipped_snapshots: usize,
}

/// Sharpness of the empirical loss at `w`: the exact top curvature for the
/// linear model, power iteration on Hessian-vector products otherwise.
pub fn sharpness(spec: &ModelSpec, w: &[f64], data: &Dataset) -> Result<f64> {
    sharpness_with_iters(spec, w, data, POWER_ITERS)
}

/// [`sharpness`] with an explicit power-iteration budget.
pub fn sharpness_with_iters(spec: &ModelSpec, w: &[f64], data: &Dataset, iters: usize) -> Result<f64> {
    match spec.kind {
        ModelKind::Linear => Ok(linear_top_curvature(data)),
        ModelKind::Mlp => {
            let h = 1e-5 * w.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            let eig = power_iteration_top_eig(
                |v| hessian_vector_product(spec, w, data, v, h),
                w.len(),
                iters,
                POWER_TOL,
            )?;
            Ok(eig.value.max(0.0))
        }
    }
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Batch-gradient moments `(E |grad F_B|^2, E |grad F_B|^4)` at one snapshot.
fn batch_moments(grads: &GradMatrix, b: usize, draws: usize, rng: &mut RngStream) -> Result<(f64, f64)> {
    let n = grads.rows();
    if b == n {
        let g2 = norm_sq(&grads.mean());
        return Ok((g2, g2 * g2));
    }
    let mut m2 = 0.0;
    let mut m4 = 0.0;
    let mut acc = vec![0.0; grads.cols()];
    for _ in 0..draws {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for i in sample_batch(rng, n, b)? {
            crate::numerics::axpy(1.0 / b as f64, grads.row(i), &mut acc);
        }
        let g2 = norm_sq(&acc);
        m2 += g2;
        m4 += g2 * g2;
    }
    Ok((m2 / draws as f64, m4 / draws as f64))
}

/// Start of the late phase and the slack `zeta` by which `gamma_tilde`
/// overshoots its early-phase level from there on.
///
/// `T0` is the first snapshot whose `gamma_tilde` exceeds the given quantile of
/// the first quarter of snapshots. `zeta = max_{t >= T0} (|grad F_S'| - gamma_0 |grad F_S|)_+`
/// where `gamma_0` is the largest `gamma_tilde` before `T0`.
pub fn relaxed_phase(snapshots: &[TrajectorySnapshot], gamma_quantile: f64) -> Result<(usize, f64, f64)> {
    let last = snapshots.last().ok_or_else(|| Error::invalid("empty trajectory"))?;
    if !(0.0..=1.0).contains(&gamma_quantile) {
        return Err(Error::invalid(format!(
            "gamma quantile {gamma_quantile} outside [0, 1]"
        )));
    }
    let early_len = snapshots.len().div_ceil(4).max(1);
    let early: Vec<f64> = snapshots[..early_len].iter().filter_map(|s| s.gamma_tilde).collect();
    if early.is_empty() {
        return Ok((last.t, 0.0, 0.0));
    }
    let threshold = quantile(&early, gamma_quantile);
    let k0 = snapshots
        .iter()
        .position(|s| s.gamma_tilde.is_some_and(|g| g > threshold))
        .unwrap_or(snapshots.len() - 1);
    let gamma_early = snapshots[..k0]
        .iter()
        .filter_map(|s| s.gamma_tilde)
        .fold(threshold, f64::max);
    let zeta = snapshots[k0..]
        .iter()
        .map(|s| match s.gamma_tilde {
            Some(g) => s.grad_norm_s * (g - gamma_early).max(0.0),
            None => s.grad_norm_sprime,
        })
        .fold(0.0, f64::max);
    Ok((snapshots[k0].t, zeta, gamma_early))
}

pub struct ConstantInputs<'a> {
    pub spec: &'a ModelSpec,
    pub snapshots: &'a [TrajectorySnapshot],
    pub states: &'a [RecordedState],
    /// Learning rate of every step taken.
    pub etas: &'a [f64],
    pub train: &'a Dataset,
    pub optim: &'a OptimConfig,
}

pub fn estimate_constants(input: &ConstantInputs<'_>, cfg: &SubsetEstimatorConfig) -> Result<ConstantEstimates> {
    let ConstantInputs {
        spec,
        snapshots,
        states,
        etas,
        train,
        optim,
    } = *input;
    if snapshots.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    if states.len() != snapshots.len() || states.iter().zip(snapshots).any(|(a, b)| a.t != b.t) {
        return Err(Error::IncompleteTrajectory(
            "constant estimation needs the weights stored at every snapshot".into(),
        ));
    }
    let n = train.len();
    cfg.validate(n)?;
    let all: Vec<usize> = (0..n).collect();

    let mut l_hat: f64 = 0.0;
    let mut v_m: f64 = 0.0;
    let mut v_defined = false;
    let mut inner_max: f64 = 0.0;
    let mut envelope: f64 = 0.0;
    let mut skipped = 0;
    let mut m2_sq: f64 = 0.0;
    let mut m4_fourth: f64 = 0.0;
    let mut moment_rng = RngStream::new(cfg.seed, streams::MOMENTS);
    for (k, state) in states.iter().enumerate() {
        let grads = per_sample_grads(spec, &state.w, train, &all)?;
        l_hat = l_hat.max(grads.row_norms_sq().iter().fold(0.0_f64, |m, &v| m.max(v)).sqrt());

        let tag = (k as u64) << 8;
        let div = diversity_from_grads(
            &grads,
            cfg,
            RngStream::new(cfg.seed, streams::DIVERSITY).substream(tag | streams::DIVERSITY),
        )?;
        match div.v {
            Some(v) => {
                v_defined = true;
                v_m = v_m.max(v);
            }
            None => skipped += 1,
        }
        let rng = RngStream::new(cfg.seed, streams::GAMMA_PRIME).substream(tag | streams::GAMMA_PRIME);
        if let Some((inner, env)) = subset_ratio_max(&grads, cfg, rng)? {
            inner_max = inner_max.max(inner);
            envelope = envelope.max(env);
        }
        let (m2, m4) = batch_moments(
            &grads,
            optim.batch_size.min(n),
            cfg.moment_batches.max(1),
            &mut moment_rng,
        )?;
        m2_sq = m2_sq.max(m2);
        m4_fourth = m4_fourth.max(m4);
    }

    let beta_hat = match spec.kind {
        ModelKind::Linear => linear_top_curvature(train),
        ModelKind::Mlp => {
            let probes = SHARPNESS_PROBES.min(states.len());
            let mut best: f64 = 0.0;
            for j in 0..probes {
                let k = if probes == 1 {
                    0
                } else {
                    j * (states.len() - 1) / (probes - 1)
                };
                best = best.max(sharpness(spec, &states[k].w, train)?);
            }
            best
        }
    };

    let gammas: Vec<f64> = snapshots.iter().filter_map(|s| s.gamma_tilde).collect();
    let gamma_defined = !gammas.is_empty();
    let gamma = if gamma_defined {
        gammas.iter().copied().fold(0.0, f64::max)
    } else {
        1.0
    };
    let (t0, zeta, _) = relaxed_phase(snapshots, DEFAULT_GAMMA_QUANTILE)?;
    let eta_m = etas
        .iter()
        .copied()
        .chain(snapshots.iter().map(|s| s.eta))
        .fold(0.0, f64::max);

    Ok(ConstantEstimates {
        l_hat,
        beta_hat,
        m2_sq,
        m4_fourth,
        gamma,
        gamma_prime: inner_max.max(1.0) * gamma,
        gamma_prime_envelope: envelope.max(1.0) * gamma,
        v_m,
        eta_m,
        zeta,
        t0,
        n,
        t: snapshots.last().expect("non-empty").t,
        b: optim.batch_size,
        trivial: !v_defined || v_m == 0.0 || !gamma_defined,
        skipped_snapshots: skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    HardtConvex,
    HardtNonconvex,
    Zhang,
    Bassily,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::HardtConvex,
        BaselineKind::HardtNonconvex,
        BaselineKind::Zhang,
        BaselineKind::Bassily,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::HardtConvex => "hardt_convex",
            BaselineKind::HardtNonconvex => "hardt_nonconvex",
            BaselineKind::Zhang => "zhang",
            BaselineKind::Bassily => "bassily",
        }
    }

    fn formula(self) -> &'static str {
        match self {
            BaselineKind::HardtConvex => "2 L^2 / n * sum_t eta_t",
            BaselineKind::HardtNonconvex => "(1 + 1/c) / (n - 1) * (2 c L^2 / beta)^(1/(c+1)) * T^(c/(c+1))",
            BaselineKind::Zhang => "16 L^2 T^c / n^(1+c)",
            BaselineKind::Bassily => "2 L^2 sqrt(sum_{t<T-1} eta_t^2) + 4 L^2 / n * sum_{t<T-1} eta_t",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundMethod {
    Main,
    Smooth,
    Relaxed,
    Baseline(BaselineKind),
}

impl BoundMethod {
    pub fn name(self) -> &'static str {
        match self {
            BoundMethod::Main => "ours_main",
            BoundMethod::Smooth => "ours_smooth",
            BoundMethod::Relaxed => "ours_relaxed",
            BoundMethod::Baseline(kind) => kind.name(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub method: BoundMethod,
    pub value: f64,
    /// Scale of the unconstanted `O(eta_m)` remainder; never part of `value`.
    pub remainder_scale: Option<f64>,
    pub constants: ConstantEstimates,
    pub aggregates: Vec<(String, f64)>,
    pub formula: String,
}

impl BoundReport {
    pub fn aggregate(&self, name: &str) -> Option<f64> {
        self.aggregates.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }

    /// Re-evaluates the formula from the stored constants and aggregates.
    pub fn recompute(&self) -> Result<f64> {
        evaluate(self.method, &self.constants, &self.aggregates)
    }
}

fn need(aggregates: &[(String, f64)], name: &str) -> Result<f64> {
    aggregates
        .iter()
        .find(|(k, _)| k == name)
        .map(|&(_, v)| v)
        .ok_or_else(|| Error::invalid(format!("missing aggregate `{name}`")))
}

fn main_value(est: &ConstantEstimates, c_cum: f64) -> f64 {
    est.gamma_prime * est.v_m * c_cum
}

/// Pure evaluation of a bound formula.
pub fn evaluate(method: BoundMethod, est: &ConstantEstimates, aggregates: &[(String, f64)]) -> Result<f64> {
    let n = est.n as f64;
    let l2 = est.l_hat * est.l_hat;
    let value = match method {
        BoundMethod::Main => main_value(est, need(aggregates, "C_cum")?),
        BoundMethod::Smooth => {
            let c = need(aggregates, "c")?;
            let term1 = main_value(est, need(aggregates, "C_cum")?);
            let noise_sum = need(aggregates, "smooth_noise_sum")?;
            if c == 0.0 {
                term1
            } else {
                let term2 = 2.0 * c * c * est.gamma_prime * est.v_m * est.m4_fourth.sqrt() * noise_sum.sqrt();
                // empty sum before the first step
                let term3 = if est.t == 0 {
                    0.0
                } else {
                    2.0 * c * c * est.m2_sq / est.beta_hat
                };
                term1 + term2 + term3
            }
        }
        BoundMethod::Relaxed => {
            main_value(est, need(aggregates, "C_cum")?) + 0.5 * need(aggregates, "tail_delta_sum")? * est.zeta
        }
        BoundMethod::Baseline(BaselineKind::HardtConvex) => 2.0 * l2 / n * need(aggregates, "sum_eta")?,
        BoundMethod::Baseline(BaselineKind::HardtNonconvex) => {
            let c = need(aggregates, "c")?;
            let t = est.t as f64;
            (1.0 + 1.0 / c) / (n - 1.0) * (2.0 * c * l2 / est.beta_hat).powf(1.0 / (c + 1.0)) * t.powf(c / (c + 1.0))
        }
        BoundMethod::Baseline(BaselineKind::Zhang) => {
            let c = need(aggregates, "c")?;
            16.0 * l2 * (est.t as f64).powf(c) / n.powf(1.0 + c)
        }
        BoundMethod::Baseline(BaselineKind::Bassily) => {
            2.0 * l2 * need(aggregates, "sum_eta_sq_head")?.sqrt() + 4.0 * l2 / n * need(aggregates, "sum_eta_head")?
        }
    };
    if !value.is_finite() {
        return Err(Error::NumericDomain {
            location: method.name().into(),
            detail: format!("bound evaluated to {value}"),
        });
    }
    Ok(value)
}

fn report(
    method: BoundMethod,
    est: &ConstantEstimates,
    aggregates: Vec<(String, f64)>,
    formula: &str,
    remainder: bool,
) -> Result<BoundReport> {
    let value = evaluate(method, est, &aggregates)?;
    Ok(BoundReport {
        method,
        value,
        remainder_scale: remainder.then_some(est.eta_m),
        constants: est.clone(),
        aggregates,
        formula: formula.to_string(),
    })
}

fn check_trajectory(est: &ConstantEstimates, snapshots: &[TrajectorySnapshot]) -> Result<f64> {
    if est.trivial {
        return Err(Error::TrivialBound(
            "diversity ratio undefined along the trajectory (all mean gradients vanish)".into(),
        ));
    }
    let first = snapshots
        .first()
        .ok_or_else(|| Error::IncompleteTrajectory("no snapshots".into()))?;
    if first.t != 0 {
        return Err(Error::IncompleteTrajectory("step-0 snapshot missing".into()));
    }
    if snapshots.windows(2).any(|w| w[1].t <= w[0].t) {
        return Err(Error::IncompleteTrajectory("snapshot steps must increase".into()));
    }
    let last = snapshots.last().expect("non-empty");
    if last.t != est.t {
        return Err(Error::IncompleteTrajectory(format!(
            "snapshots end at step {} but the estimates cover {}",
            last.t, est.t
        )));
    }
    Ok(last.c_cum)
}

/// `gamma' V_m C(J_T)`; the `O(eta_m)` remainder is reported as `remainder_scale`.
pub fn bound_trajectory_main(est: &ConstantEstimates, snapshots: &[TrajectorySnapshot]) -> Result<BoundReport> {
    let c_cum = check_trajectory(est, snapshots)?;
    report(
        BoundMethod::Main,
        est,
        vec![("C_cum".into(), c_cum)],
        "gamma' * V_m * C_cum(T) + O(eta_m)",
        true,
    )
}

/// `sum_{s=a}^{b-1} 1 / (s + 1)^4`
fn inv_fourth_sum(a: usize, b: usize) -> f64 {
    (a..b).map(|s| (s as f64 + 1.0).powi(-4)).sum()
}

/// `sum_{t<T} (1 + Tr Sigma_t / |grad F_S|^2) / (n beta^2 (t + 1)^4)`, each snapshot
/// standing in for the steps up to the next one.
pub fn smooth_noise_sum(snapshots: &[TrajectorySnapshot], n: usize, beta: f64) -> f64 {
    let mut sum = 0.0;
    for (k, s) in snapshots.iter().enumerate() {
        let end = snapshots.get(k + 1).map_or(s.t, |next| next.t);
        if let Some(ratio) = s.noise_ratio() {
            sum += ratio * inv_fourth_sum(s.t, end);
        }
    }
    sum / (n as f64 * beta * beta)
}

fn inverse_time_c(schedule: &Schedule, beta_hat: f64) -> Result<f64> {
    match *schedule {
        Schedule::InverseTime { c, beta } => {
            let rel = (beta - beta_hat).abs() / beta_hat.max(f64::MIN_POSITIVE);
            if rel > 1e-9 {
                return Err(Error::invalid(format!(
                    "inverse-time schedule uses beta = {beta} but the estimated smoothness is {beta_hat}"
                )));
            }
            Ok(c)
        }
        _ => Err(Error::invalid(
            "this bound requires an inverse-time learning-rate schedule",
        )),
    }
}

/// Three-term bound for `eta_t = c / (beta (t + 1))`.
pub fn bound_trajectory_smooth(
    est: &ConstantEstimates,
    snapshots: &[TrajectorySnapshot],
    schedule: &Schedule,
) -> Result<BoundReport> {
    let c = inverse_time_c(schedule, est.beta_hat)?;
    bound_trajectory_smooth_with_c(est, snapshots, c)
}

/// As [`bound_trajectory_smooth`] with `c` given directly; `c = 0` reduces to the main term.
pub fn bound_trajectory_smooth_with_c(
    est: &ConstantEstimates,
    snapshots: &[TrajectorySnapshot],
    c: f64,
) -> Result<BoundReport> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::invalid(format!("c must be >= 0, got {c}")));
    }
    if c > 0.0 && (est.beta_hat.is_nan() || est.beta_hat <= 0.0) {
        return Err(Error::invalid("beta_hat must be positive"));
    }
    let c_cum = check_trajectory(est, snapshots)?;
    let noise = if c > 0.0 {
        smooth_noise_sum(snapshots, est.n, est.beta_hat)
    } else {
        0.0
    };
    report(
        BoundMethod::Smooth,
        est,
        vec![
            ("C_cum".into(), c_cum),
            ("smooth_noise_sum".into(), noise),
            ("c".into(), c),
        ],
        "gamma' V_m C_cum(T) + 2 c^2 gamma' V_m M4^2 sqrt(smooth_noise_sum) + 2 c^2 M2^2 / beta",
        false,
    )
}

/// `sum_{t >= T0} eta_t |grad F_S(J_t)|` through the final step, each snapshot
/// weighted by the steps it stands for.
pub fn tail_delta_sum(snapshots: &[TrajectorySnapshot], t0: usize) -> f64 {
    let mut sum = 0.0;
    for (k, s) in snapshots.iter().enumerate() {
        if s.t < t0 {
            continue;
        }
        let weight = snapshots.get(k + 1).map_or(1, |next| next.t - s.t);
        sum += s.delta * weight as f64;
    }
    sum
}

pub fn bound_trajectory_relaxed(est: &ConstantEstimates, snapshots: &[TrajectorySnapshot]) -> Result<BoundReport> {
    let c_cum = check_trajectory(est, snapshots)?;
    if est.t0 > est.t {
        return Err(Error::invalid(format!("T0 = {} exceeds T = {}", est.t0, est.t)));
    }
    report(
        BoundMethod::Relaxed,
        est,
        vec![
            ("C_cum".into(), c_cum),
            ("tail_delta_sum".into(), tail_delta_sum(snapshots, est.t0)),
        ],
        "gamma' V_m C_cum(T) + 1/2 * zeta * sum_{t>=T0} eta_t |grad F_S|",
        true,
    )
}

/// Stability baselines evaluated with `L = L_hat`, `beta = beta_hat`.
/// `etas` holds the learning rate of every step taken.
pub fn bound_stability_baseline(
    kind: BaselineKind,
    est: &ConstantEstimates,
    etas: &[f64],
    schedule: &Schedule,
) -> Result<BoundReport> {
    if !(est.l_hat.is_finite() && est.l_hat >= 0.0) {
        return Err(Error::invalid("missing constant L_hat"));
    }
    if est.n < 2 {
        return Err(Error::invalid("missing constant n (needs n >= 2)"));
    }
    let head = &etas[..etas.len().saturating_sub(1)];
    let aggregates: Vec<(String, f64)> = match kind {
        BaselineKind::HardtConvex => vec![("sum_eta".into(), etas.iter().sum())],
        BaselineKind::HardtNonconvex | BaselineKind::Zhang => {
            if est.beta_hat.is_nan() || est.beta_hat <= 0.0 {
                return Err(Error::invalid("missing constant beta_hat"));
            }
            let c = match *schedule {
                Schedule::InverseTime { c, .. } => c,
                _ => {
                    return Err(Error::invalid(format!(
                        "{} requires an inverse-time schedule (constant c)",
                        kind.name()
                    )))
                }
            };
            vec![("c".into(), c)]
        }
        BaselineKind::Bassily => vec![
            ("sum_eta_sq_head".into(), head.iter().map(|e| e * e).sum()),
            ("sum_eta_head".into(), head.iter().sum()),
        ],
    };
    report(BoundMethod::Baseline(kind), est, aggregates, kind.formula(), false)
}

pub const CONSTANT_COLUMNS: [&str; 14] = [
    "L_hat",
    "beta_hat",
    "M2_sq",
    "M4_fourth",
    "gamma",
    "gamma_prime",
    "V_m",
    "eta_m",
    "zeta",
    "T0",
    "n",
    "T",
    "b",
    "trivial",
];

fn constant_cells(c: &ConstantEstimates) -> Vec<String> {
    vec![
        c.l_hat.to_string(),
        c.beta_hat.to_string(),
        c.m2_sq.to_string(),
        c.m4_fourth.to_string(),
        c.gamma.to_string(),
        c.gamma_prime.to_string(),
        c.v_m.to_string(),
        c.eta_m.to_string(),
        c.zeta.to_string(),
        c.t0.to_string(),
        c.n.to_string(),
        c.t.to_string(),
        c.b.to_string(),
        c.trivial.to_string(),
    ]
}

/// Writes `bounds.csv`: method, value, remainder_scale and the constants behind each row.
pub fn write_bounds_csv<W: Write>(out: W, reports: &[BoundReport]) -> Result<()> {
    let to_err = |e: csv::Error| Error::io("<bounds.csv>", std::io::Error::other(e));
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["method", "value", "remainder_scale"];
    header.extend(CONSTANT_COLUMNS);
    w.write_record(&header).map_err(to_err)?;
    for r in reports {
        let mut row = vec![
            r.method.name().to_string(),
            r.value.to_string(),
            crate::trajectory::fmt_opt(r.remainder_scale),
        ];
        row.extend(constant_cells(&r.constants));
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io("<bounds.csv>", e))
}
