//! Plain GD/SGD: `w <- w - eta_t * grad F_B(w)`, with learning-rate schedules,
//! batch sampling, early stopping and a recorder hook.

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::models::{grad_mean_over, loss_mean, ModelSpec};
use crate::numerics::{all_finite, norm, RngStream};

/// Weights larger than this in norm count as divergence.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant {
        eta0: f64,
    },
    /// `c / (beta (t + 1))`
    InverseTime {
        c: f64,
        beta: f64,
    },
    /// Cosine annealing from `eta0` to `eta_min` over `t_max` steps, then flat at `eta_min`.
    Cosine {
        eta0: f64,
        eta_min: f64,
        t_max: usize,
    },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "schedule {name} must be positive and finite, got {v}"
                )))
            }
        };
        match *self {
            Schedule::Constant { eta0 } => positive("eta0", eta0),
            Schedule::InverseTime { c, beta } => {
                positive("c", c)?;
                positive("beta", beta)
            }
            Schedule::Cosine { eta0, eta_min, t_max } => {
                positive("eta0", eta0)?;
                if !(eta_min >= 0.0 && eta_min <= eta0) {
                    return Err(Error::invalid(format!(
                        "cosine eta_min {eta_min} must lie in [0, eta0]"
                    )));
                }
                if t_max == 0 {
                    return Err(Error::invalid("cosine t_max must be >= 1"));
                }
                Ok(())
            }
        }
    }
}

pub fn lr_at(schedule: &Schedule, t: usize) -> f64 {
    match *schedule {
        Schedule::Constant { eta0 } => eta0,
        Schedule::InverseTime { c, beta } => c / (beta * (t as f64 + 1.0)),
        Schedule::Cosine { eta0, eta_min, t_max } => {
            if t >= t_max {
                eta_min
            } else {
                let phase = std::f64::consts::PI * t as f64 / t_max as f64;
                eta_min + 0.5 * (eta0 - eta_min) * (1.0 + phase.cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Gd,
    Sgd,
}

/// How SGD picks its batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSampling {
    /// A fresh uniform size-b subset every step.
    #[default]
    Independent,
    /// Shuffle once per epoch and walk it in chunks of b.
    EpochPermutation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub max_steps: usize,
    pub stop_train_loss: Option<f64>,
    pub snapshot_every: usize,
    pub seed: u64,
    pub sampling: BatchSampling,
}

impl OptimConfig {
    pub fn gd(schedule: Schedule, max_steps: usize, n: usize, seed: u64) -> Self {
        Self {
            mode: Mode::Gd,
            batch_size: n,
            schedule,
            max_steps,
            stop_train_loss: None,
            snapshot_every: 1,
            seed,
            sampling: BatchSampling::Independent,
        }
    }

    pub fn sgd(schedule: Schedule, batch_size: usize, max_steps: usize, seed: u64) -> Self {
        Self {
            mode: Mode::Sgd,
            batch_size,
            schedule,
            max_steps,
            stop_train_loss: None,
            snapshot_every: 1,
            seed,
            sampling: BatchSampling::Independent,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        self.schedule.validate()?;
        match self.mode {
            Mode::Gd if self.batch_size != n => {
                return Err(Error::invalid(format!(
                    "GD needs batch_size = n = {n}, got {}",
                    self.batch_size
                )));
            }
            Mode::Sgd if self.batch_size == 0 || self.batch_size > n => {
                return Err(Error::invalid(format!(
                    "SGD batch_size {} outside [1, {n}]",
                    self.batch_size
                )));
            }
            _ => {}
        }
        if self.snapshot_every == 0 {
            return Err(Error::invalid("snapshot_every must be >= 1"));
        }
        if let Some(stop) = self.stop_train_loss {
            if !stop.is_finite() {
                return Err(Error::invalid("stop_train_loss must be finite"));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }
}

/// `b` distinct indices uniform over size-`b` subsets of `[0, n)`, sorted.
pub fn sample_batch(rng: &mut RngStream, n: usize, b: usize) -> Result<Vec<usize>> {
    if b == 0 || b > n {
        return Err(Error::invalid(format!("batch size {b} outside [1, {n}]")));
    }
    if b == n {
        return Ok((0..n).collect());
    }
    Ok(rng.distinct_indices(n, b))
}

/// Stateful batch source for one run.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    b: usize,
    mode: Mode,
    sampling: BatchSampling,
    rng: RngStream,
    perm: Vec<usize>,
    cursor: usize,
}

/// Substream reserved for batch sampling within a run seed.
pub const BATCH_STREAM: u64 = 0x0b;

impl BatchSampler {
    pub fn new(cfg: &OptimConfig, n: usize) -> Self {
        Self {
            n,
            b: cfg.batch_size,
            mode: cfg.mode,
            sampling: cfg.sampling,
            rng: RngStream::new(cfg.seed, BATCH_STREAM),
            perm: Vec::new(),
            cursor: 0,
        }
    }

    pub fn next_batch(&mut self) -> Result<Vec<usize>> {
        match (self.mode, self.sampling) {
            (Mode::Gd, _) => Ok((0..self.n).collect()),
            (Mode::Sgd, BatchSampling::Independent) => sample_batch(&mut self.rng, self.n, self.b),
            (Mode::Sgd, BatchSampling::EpochPermutation) => {
                if self.cursor >= self.perm.len() {
                    self.perm = self.rng.permutation(self.n);
                    self.cursor = 0;
                }
                let end = (self.cursor + self.b).min(self.n);
                let mut batch = self.perm[self.cursor..end].to_vec();
                self.cursor = end;
                batch.sort_unstable();
                Ok(batch)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub eta: f64,
    pub batch: Vec<usize>,
    /// Mean loss over the batch at the pre-step weights.
    pub batch_loss: f64,
}

/// One update from `w`; returns the new weights and what was done.
pub fn step(
    spec: &ModelSpec,
    w: &[f64],
    data: &Dataset,
    cfg: &OptimConfig,
    t: usize,
    sampler: &mut BatchSampler,
) -> Result<(Vec<f64>, StepRecord)> {
    let eta = lr_at(&cfg.schedule, t);
    let batch = sampler.next_batch()?;
    let diverged = |w_norm: f64, detail: String| Error::Diverged {
        step: t,
        w_norm,
        detail,
    };
    let (batch_loss, g) = grad_mean_over(spec, w, data, &batch).map_err(|e| match e {
        Error::NumericDomain { location, detail } => diverged(norm(w), format!("{location}: {detail}")),
        other => other,
    })?;
    let w_next: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - eta * gi).collect();
    let w_norm = norm(&w_next);
    if !all_finite(&w_next) || w_norm > DIVERGENCE_NORM {
        return Err(diverged(w_norm, "weights left the finite region".into()));
    }
    Ok((
        w_next,
        StepRecord {
            t,
            eta,
            batch,
            batch_loss,
        },
    ))
}

/// Observer invoked by [`train`].
pub trait Recorder {
    type Snapshot;

    /// Called at step 0, every `snapshot_every` steps and at the final step.
    /// `eta` is the rate the schedule assigns to step `t`.
    fn snapshot(&mut self, t: usize, epoch: usize, eta: f64, w: &[f64]) -> Result<Self::Snapshot>;

    /// Called after every update with the weights it produced.
    fn after_step(&mut self, _record: &StepRecord, _w_next: &[f64]) -> Result<()> {
        Ok(())
    }
}

/// Recorder that keeps nothing.
pub struct NoRecorder;

impl Recorder for NoRecorder {
    type Snapshot = ();

    fn snapshot(&mut self, _t: usize, _epoch: usize, _eta: f64, _w: &[f64]) -> Result<()> {
        Ok(())
    }
}

/// Feeds the same trajectory to two recorders.
impl<A: Recorder, B: Recorder> Recorder for (A, B) {
    type Snapshot = (A::Snapshot, B::Snapshot);

    fn snapshot(&mut self, t: usize, epoch: usize, eta: f64, w: &[f64]) -> Result<Self::Snapshot> {
        Ok((self.0.snapshot(t, epoch, eta, w)?, self.1.snapshot(t, epoch, eta, w)?))
    }

    fn after_step(&mut self, record: &StepRecord, w_next: &[f64]) -> Result<()> {
        self.0.after_step(record, w_next)?;
        self.1.after_step(record, w_next)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub w_final: Vec<f64>,
    pub snapshots: Vec<S>,
    pub records: Vec<StepRecord>,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Runs up to `cfg.max_steps` updates on `train_set`, stopping once the full
/// training loss drops below `cfg.stop_train_loss`. `w0` must not depend on the
/// training data.
pub fn train<R: Recorder>(
    spec: &ModelSpec,
    w0: Vec<f64>,
    train_set: &Dataset,
    cfg: &OptimConfig,
    recorder: &mut R,
) -> Result<TrainOutcome<R::Snapshot>> {
    spec.validate()?;
    let n = train_set.len();
    cfg.validate(n)?;
    let per_epoch = cfg.steps_per_epoch(n);
    let mut sampler = BatchSampler::new(cfg, n);
    let mut w = w0;
    let mut snapshots = vec![recorder.snapshot(0, 0, lr_at(&cfg.schedule, 0), &w)?];
    let mut records = Vec::with_capacity(cfg.max_steps);
    let mut last_snap = 0;
    let mut stopped_early = false;
    let mut t = 0;

    while t < cfg.max_steps {
        let (w_next, record) = step(spec, &w, train_set, cfg, t, &mut sampler)?;
        recorder.after_step(&record, &w_next)?;
        records.push(record);
        w = w_next;
        t += 1;

        if let Some(stop) = cfg.stop_train_loss {
            let f = loss_mean(spec, &w, train_set).map_err(|e| Error::Diverged {
                step: t,
                w_norm: norm(&w),
                detail: e.to_string(),
            })?;
            if f < stop {
                stopped_early = true;
            }
        }
        let last = stopped_early || t == cfg.max_steps;
        if t % cfg.snapshot_every == 0 || last {
            snapshots.push(recorder.snapshot(t, t / per_epoch, lr_at(&cfg.schedule, t), &w)?);
            last_snap = t;
        }
        if stopped_early {
            break;
        }
    }
    debug_assert_eq!(last_snap, t);
    Ok(TrainOutcome {
        w_final: w,
        snapshots,
        records,
        steps: t,
        stopped_early,
    })
}
