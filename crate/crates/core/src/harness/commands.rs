use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::bounds::{
    bound_stability_baseline, bound_trajectory_main, bound_trajectory_relaxed, bound_trajectory_smooth,
    estimate_constants, sharpness, sharpness_with_iters, write_bounds_csv, BaselineKind, BoundReport, ConstantInputs,
};
use crate::datasets::{generate_toy, inject_label_noise, load_csv_dataset, split_train_holdout, Dataset, ToyConfig};
use crate::error::{Error, Result};
use crate::models::{init_params, ModelSpec};
use crate::numerics::RngStream;
use crate::optim::{lr_at, train, Mode, OptimConfig, Schedule};
use crate::trajectory::{
    write_trajectory_csv, RecordedState, SnapshotRecorder, SubsetEstimatorConfig, TrajectorySnapshot,
};

use super::config::{DataSource, Experiment, ExperimentConfig};
use super::plot::{emit_svg_plots, PlotSpec};

const INIT_STREAM: u64 = 0x11;
const LABEL_NOISE_STREAM: u64 = 0x12;
const SPLIT_STREAM: u64 = 0x13;

/// Per-run changes applied on top of a config (used by the sweeps).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Overrides {
    pub label_noise: Option<f64>,
    pub eta0: Option<f64>,
}

pub struct Prepared {
    pub spec: ModelSpec,
    pub train: Dataset,
    pub holdout: Dataset,
    pub optim: OptimConfig,
    pub w0: Vec<f64>,
    pub estimators: SubsetEstimatorConfig,
}

pub fn load_data(cfg: &ExperimentConfig, seed: u64, label_noise: f64) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    let (train, holdout) = match d.source {
        DataSource::Toy => {
            let (train, test, _) = generate_toy(&ToyConfig {
                n_train: d.n_train,
                n_test: d.n_test,
                dim: d.dim,
                seed,
            })?;
            (train, test)
        }
        DataSource::Csv => {
            let path = d
                .path
                .as_ref()
                .ok_or_else(|| Error::config("dataset.path", "required"))?;
            let data = load_csv_dataset(path, &d.label_column)?;
            match &d.holdout_path {
                Some(h) => (data, load_csv_dataset(h, &d.label_column)?),
                None => split_train_holdout(&data, d.holdout_fraction, &mut RngStream::new(seed, SPLIT_STREAM))?,
            }
        }
    };
    let train = if label_noise > 0.0 {
        inject_label_noise(&train, label_noise, &mut RngStream::new(seed, LABEL_NOISE_STREAM))?
    } else {
        train
    };
    Ok((train, holdout))
}

fn estimator_seed(base: u64, seed: u64) -> u64 {
    base ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64, ov: Overrides) -> Result<Prepared> {
    let (train, holdout) = load_data(cfg, seed, ov.label_noise.unwrap_or(cfg.dataset.label_noise))?;
    let spec = cfg.model.spec(train.dim())?;
    let w0 = init_params(&spec, &mut RngStream::new(seed, INIT_STREAM))?;
    let mut section = cfg.optim.clone();
    if let Some(eta) = ov.eta0 {
        section.schedule.eta0 = eta;
    }
    let beta_hat = if section.schedule.needs_beta_estimate() {
        Some(sharpness(&spec, &w0, &train)?)
    } else {
        None
    };
    let optim = section.resolve(train.len(), seed, beta_hat)?;
    let mut estimators = cfg.estimators.clone();
    estimators.seed = estimator_seed(cfg.estimators.seed, seed);
    estimators
        .validate(train.len())
        .map_err(|e| Error::config("estimators", e.to_string()))?;
    Ok(Prepared {
        spec,
        train,
        holdout,
        optim,
        w0,
        estimators,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub step: usize,
    pub detail: String,
}

pub struct Run {
    pub snapshots: Vec<TrajectorySnapshot>,
    pub states: Vec<RecordedState>,
    /// Learning rate of every step taken.
    pub etas: Vec<f64>,
    pub steps: usize,
    pub stopped_early: bool,
    pub diverged: Option<Divergence>,
}

fn divergence_of(err: &Error) -> Option<Divergence> {
    match err {
        Error::Diverged { step, detail, .. } => Some(Divergence {
            step: *step,
            detail: detail.clone(),
        }),
        Error::NumericDomain { location, detail } => Some(Divergence {
            step: usize::MAX,
            detail: format!("{location}: {detail}"),
        }),
        _ => None,
    }
}

/// Trains and records snapshots. With `allow_divergence`, a run that blows up
/// returns what was recorded up to that point instead of an error.
pub fn run_trajectory(p: &Prepared, keep_states: bool, allow_divergence: bool) -> Result<Run> {
    let mut rec =
        SnapshotRecorder::new(&p.spec, &p.train, &p.holdout, p.optim.mode, &p.estimators).keep_states(keep_states);
    match train(&p.spec, p.w0.clone(), &p.train, &p.optim, &mut rec) {
        Ok(out) => Ok(Run {
            snapshots: out.snapshots,
            etas: out.records.iter().map(|r| r.eta).collect(),
            steps: out.steps,
            stopped_early: out.stopped_early,
            diverged: None,
            states: rec.into_states(),
        }),
        Err(err) => {
            let Some(mut div) = divergence_of(&err).filter(|_| allow_divergence) else {
                return Err(err);
            };
            let snapshots = rec.history().to_vec();
            let last = snapshots.last().map_or(0, |s| s.t);
            if div.step == usize::MAX {
                div.step = last;
            }
            Ok(Run {
                etas: (0..div.step).map(|t| lr_at(&p.optim.schedule, t)).collect(),
                steps: div.step,
                stopped_early: false,
                diverged: Some(div),
                states: rec.into_states(),
                snapshots,
            })
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn per_seed(stem: &str, seed: u64, multi: bool) -> String {
    if multi {
        format!("{stem}_seed{seed}.csv")
    } else {
        format!("{stem}.csv")
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let to_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.write_record(r).map_err(to_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    write_bytes(path, &bytes)
}

fn write_trajectory(path: &Path, snapshots: &[TrajectorySnapshot]) -> Result<()> {
    let mut buf = Vec::new();
    write_trajectory_csv(&mut buf, snapshots)?;
    write_bytes(path, &buf)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Written files, in creation order.
pub type Written = Vec<PathBuf>;

// ---------------------------------------------------------------- toy table

#[derive(Clone, Debug, PartialEq)]
pub struct ToyRow {
    /// `None` for the seed-mean row.
    pub seed: Option<u64>,
    pub gen_error: f64,
    pub ours_main: f64,
    pub ours_smooth: Option<f64>,
    pub ours_relaxed: f64,
    pub hardt_convex: f64,
    pub hardt_nonconvex: Option<f64>,
    pub zhang: Option<f64>,
    pub bassily: f64,
}

#[derive(Clone, Debug)]
pub struct ToyTable {
    pub rows: Vec<ToyRow>,
    pub mean: ToyRow,
    pub reports: Vec<(u64, Vec<BoundReport>)>,
    pub files: Written,
}

/// Trains one seed and evaluates every bound on its trajectory.
pub fn toy_bounds(cfg: &ExperimentConfig, seed: u64) -> Result<(ToyRow, Vec<BoundReport>, Run)> {
    let p = prepare(cfg, seed, Overrides::default())?;
    let run = run_trajectory(&p, true, false)?;
    let est = estimate_constants(
        &ConstantInputs {
            spec: &p.spec,
            snapshots: &run.snapshots,
            states: &run.states,
            etas: &run.etas,
            train: &p.train,
            optim: &p.optim,
        },
        &p.estimators,
    )?;
    let inverse = matches!(p.optim.schedule, Schedule::InverseTime { .. });
    let main = bound_trajectory_main(&est, &run.snapshots)?;
    let smooth = if inverse {
        Some(bound_trajectory_smooth(&est, &run.snapshots, &p.optim.schedule)?)
    } else {
        None
    };
    let relaxed = bound_trajectory_relaxed(&est, &run.snapshots)?;
    let mut reports = vec![main.clone()];
    reports.extend(smooth.clone());
    reports.push(relaxed.clone());
    let mut baseline = |kind| -> Result<Option<f64>> {
        if !inverse && matches!(kind, BaselineKind::HardtNonconvex | BaselineKind::Zhang) {
            return Ok(None);
        }
        let r = bound_stability_baseline(kind, &est, &run.etas, &p.optim.schedule)?;
        let v = r.value;
        reports.push(r);
        Ok(Some(v))
    };
    let hardt_convex = baseline(BaselineKind::HardtConvex)?.expect("always defined");
    let hardt_nonconvex = baseline(BaselineKind::HardtNonconvex)?;
    let zhang = baseline(BaselineKind::Zhang)?;
    let bassily = baseline(BaselineKind::Bassily)?.expect("always defined");
    let last = run.snapshots.last().expect("step-0 snapshot");
    let row = ToyRow {
        seed: Some(seed),
        gen_error: last.f_sprime - last.f_s,
        ours_main: main.value,
        ours_smooth: smooth.map(|r| r.value),
        ours_relaxed: relaxed.value,
        hardt_convex,
        hardt_nonconvex,
        zhang,
        bassily,
    };
    Ok((row, reports, run))
}

fn seed_context(seed: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Diverged { step, w_norm, detail } => Error::Diverged {
            step,
            w_norm,
            detail: format!("seed {seed}: {detail}"),
        },
        other => other,
    }
}

pub const TOY_TABLE_COLUMNS: [&str; 9] = [
    "seed",
    "gen_error",
    "ours_main",
    "ours_smooth",
    "ours_relaxed",
    "hardt_convex",
    "hardt_nonconvex",
    "zhang",
    "bassily",
];

pub fn cmd_toy_table(cfg: &ExperimentConfig, plots: bool) -> Result<ToyTable> {
    let out = &cfg.output_dir;
    ensure_dir(out)?;
    let multi = cfg.seeds.len() > 1;
    let mut rows = Vec::new();
    let mut all_reports = Vec::new();
    let mut files = Vec::new();
    for &seed in &cfg.seeds {
        let (row, reports, run) = toy_bounds(cfg, seed).map_err(seed_context(seed))?;
        let traj = out.join(per_seed("trajectory", seed, multi));
        write_trajectory(&traj, &run.snapshots)?;
        files.push(traj.clone());
        let bounds = out.join(per_seed("bounds", seed, multi));
        let mut buf = Vec::new();
        write_bounds_csv(&mut buf, &reports)?;
        write_bytes(&bounds, &buf)?;
        files.push(bounds);
        if plots {
            let stem = per_seed("trajectory", seed, multi).trim_end_matches(".csv").to_string();
            files.extend(emit_svg_plots(
                &traj,
                &[PlotSpec::new(&format!("{stem}_loss"), "t", &["F_S", "F_Sprime"])],
                out,
            )?);
        }
        rows.push(row);
        all_reports.push((seed, reports));
    }
    let mean_row = ToyRow {
        seed: None,
        gen_error: mean(&rows.iter().map(|r| r.gen_error).collect::<Vec<_>>()),
        ours_main: mean(&rows.iter().map(|r| r.ours_main).collect::<Vec<_>>()),
        ours_smooth: mean_opt(rows.iter().map(|r| r.ours_smooth)),
        ours_relaxed: mean(&rows.iter().map(|r| r.ours_relaxed).collect::<Vec<_>>()),
        hardt_convex: mean(&rows.iter().map(|r| r.hardt_convex).collect::<Vec<_>>()),
        hardt_nonconvex: mean_opt(rows.iter().map(|r| r.hardt_nonconvex)),
        zhang: mean_opt(rows.iter().map(|r| r.zhang)),
        bassily: mean(&rows.iter().map(|r| r.bassily).collect::<Vec<_>>()),
    };
    let cells: Vec<Vec<String>> = rows
        .iter()
        .chain(std::iter::once(&mean_row))
        .map(|r| {
            vec![
                r.seed.map_or("mean".to_string(), |s| s.to_string()),
                r.gen_error.to_string(),
                r.ours_main.to_string(),
                cell(r.ours_smooth),
                r.ours_relaxed.to_string(),
                r.hardt_convex.to_string(),
                cell(r.hardt_nonconvex),
                cell(r.zhang),
                r.bassily.to_string(),
            ]
        })
        .collect();
    let table = out.join("toy_table.csv");
    write_csv(&table, &TOY_TABLE_COLUMNS, &cells)?;
    files.push(table);
    Ok(ToyTable {
        rows,
        mean: mean_row,
        reports: all_reports,
        files,
    })
}

// ---------------------------------------------------------------- track

#[derive(Clone, Debug, PartialEq)]
pub struct TrackPoint {
    pub epoch: usize,
    pub t: usize,
    pub f_s: f64,
    pub f_sprime: f64,
    pub c_cum: f64,
    pub f_s_plus_c: f64,
    /// `dC / dF_S` over the interval ending here; missing when `F_S` did not move.
    pub dc_df: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrackSeries {
    pub seed: u64,
    pub points: Vec<TrackPoint>,
}

pub fn track_series(snapshots: &[TrajectorySnapshot]) -> Vec<TrackPoint> {
    snapshots
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let dc_df = (k > 0)
                .then(|| {
                    let prev = &snapshots[k - 1];
                    let df = s.f_s - prev.f_s;
                    (df != 0.0).then(|| (s.c_cum - prev.c_cum) / df)
                })
                .flatten();
            TrackPoint {
                epoch: s.epoch,
                t: s.t,
                f_s: s.f_s,
                f_sprime: s.f_sprime,
                c_cum: s.c_cum,
                f_s_plus_c: s.f_s + s.c_cum,
                dc_df,
            }
        })
        .collect()
}

pub const TRACK_COLUMNS: [&str; 7] = ["epoch", "t", "F_S", "F_Sprime", "C_cum", "F_S_plus_C", "dC_dF_S"];

pub fn cmd_track(cfg: &ExperimentConfig, plots: bool) -> Result<(Vec<TrackSeries>, Written)> {
    let out = &cfg.output_dir;
    ensure_dir(out)?;
    let multi = cfg.seeds.len() > 1;
    let mut series = Vec::new();
    let mut files = Vec::new();
    for &seed in &cfg.seeds {
        let p = prepare(cfg, seed, Overrides::default())?;
        let run = run_trajectory(&p, false, false).map_err(seed_context(seed))?;
        let traj = out.join(per_seed("trajectory", seed, multi));
        write_trajectory(&traj, &run.snapshots)?;
        files.push(traj);
        let points = track_series(&run.snapshots);
        let rows: Vec<Vec<String>> = points
            .iter()
            .map(|p| {
                vec![
                    p.epoch.to_string(),
                    p.t.to_string(),
                    p.f_s.to_string(),
                    p.f_sprime.to_string(),
                    p.c_cum.to_string(),
                    p.f_s_plus_c.to_string(),
                    cell(p.dc_df),
                ]
            })
            .collect();
        let name = per_seed("track", seed, multi);
        let path = out.join(&name);
        write_csv(&path, &TRACK_COLUMNS, &rows)?;
        files.push(path.clone());
        if plots {
            let stem = name.trim_end_matches(".csv");
            files.extend(emit_svg_plots(
                &path,
                &[
                    PlotSpec::new(&format!("{stem}_fit"), "epoch", &["F_S_plus_C", "F_Sprime", "F_S"]),
                    PlotSpec::new(&format!("{stem}_dc_df"), "epoch", &["dC_dF_S"]),
                ],
                out,
            )?);
        }
        series.push(TrackSeries { seed, points });
    }
    Ok((series, files))
}

// ---------------------------------------------------------------- assumption

#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionPoint {
    pub epoch: usize,
    pub t: usize,
    pub f_s: f64,
    pub f_sprime: f64,
    pub gamma_tilde: Option<f64>,
    /// The same probe with `S' = S`.
    pub gamma_tilde_control: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AssumptionSeries {
    pub seed: u64,
    pub points: Vec<AssumptionPoint>,
    /// `max_t gamma_tilde`
    pub gamma: Option<f64>,
    pub gamma_control: Option<f64>,
    /// Median over the first quarter of snapshots.
    pub early_median: Option<f64>,
    /// Largest value over the final tenth of snapshots.
    pub final_decile_max: Option<f64>,
}

pub const ASSUMPTION_COLUMNS: [&str; 6] = ["epoch", "t", "F_S", "F_Sprime", "gamma_tilde", "gamma_tilde_control"];

pub fn cmd_assumption(cfg: &ExperimentConfig, plots: bool) -> Result<(Vec<AssumptionSeries>, Written)> {
    let out = &cfg.output_dir;
    ensure_dir(out)?;
    let multi = cfg.seeds.len() > 1;
    let mut all = Vec::new();
    let mut files = Vec::new();
    for &seed in &cfg.seeds {
        let p = prepare(cfg, seed, Overrides::default())?;
        let mut recorders = (
            SnapshotRecorder::new(&p.spec, &p.train, &p.holdout, p.optim.mode, &p.estimators),
            SnapshotRecorder::new(&p.spec, &p.train, &p.train, p.optim.mode, &p.estimators),
        );
        let outcome = train(&p.spec, p.w0.clone(), &p.train, &p.optim, &mut recorders).map_err(seed_context(seed))?;
        let points: Vec<AssumptionPoint> = outcome
            .snapshots
            .iter()
            .map(|(s, c)| AssumptionPoint {
                epoch: s.epoch,
                t: s.t,
                f_s: s.f_s,
                f_sprime: s.f_sprime,
                gamma_tilde: s.gamma_tilde,
                gamma_tilde_control: c.gamma_tilde,
            })
            .collect();
        let defined = |range: &[AssumptionPoint]| range.iter().filter_map(|p| p.gamma_tilde).collect::<Vec<_>>();
        let quarter = points.len().div_ceil(4);
        let tenth = points.len().div_ceil(10);
        let max = |v: Vec<f64>| v.into_iter().reduce(f64::max);
        let series = AssumptionSeries {
            seed,
            gamma: max(defined(&points)),
            gamma_control: max(points.iter().filter_map(|p| p.gamma_tilde_control).collect()),
            early_median: median(&defined(&points[..quarter])),
            final_decile_max: max(defined(&points[points.len() - tenth..])),
            points,
        };
        let rows: Vec<Vec<String>> = series
            .points
            .iter()
            .map(|p| {
                vec![
                    p.epoch.to_string(),
                    p.t.to_string(),
                    p.f_s.to_string(),
                    p.f_sprime.to_string(),
                    cell(p.gamma_tilde),
                    cell(p.gamma_tilde_control),
                ]
            })
            .collect();
        let name = per_seed("assumption", seed, multi);
        let path = out.join(&name);
        write_csv(&path, &ASSUMPTION_COLUMNS, &rows)?;
        files.push(path.clone());
        if plots {
            let stem = name.trim_end_matches(".csv");
            files.extend(emit_svg_plots(
                &path,
                &[
                    PlotSpec::new(
                        &format!("{stem}_gamma"),
                        "epoch",
                        &["gamma_tilde", "gamma_tilde_control"],
                    ),
                    PlotSpec::new(&format!("{stem}_loss"), "epoch", &["F_S", "F_Sprime"]),
                ],
                out,
            )?);
        }
        all.push(series);
    }
    let summary: Vec<Vec<String>> = all
        .iter()
        .map(|s| {
            vec![
                s.seed.to_string(),
                cell(s.gamma),
                cell(s.gamma_control),
                cell(s.early_median),
                cell(s.final_decile_max),
            ]
        })
        .collect();
    let path = out.join("assumption_summary.csv");
    write_csv(
        &path,
        &["seed", "gamma", "gamma_control", "early_median", "final_decile_max"],
        &summary,
    )?;
    files.push(path);
    Ok((all, files))
}

// ---------------------------------------------------------------- sweeps

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub sweep_param: &'static str,
    pub value: f64,
    pub seed: u64,
    pub gen_error: Option<f64>,
    pub c_final: Option<f64>,
    pub stopped_at: usize,
    pub reached_stop: bool,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepMean {
    pub value: f64,
    pub gen_error: Option<f64>,
    pub c_final: Option<f64>,
    pub stopped_at: f64,
    /// Seeds that did not diverge.
    pub completed: usize,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub sweep_param: &'static str,
    pub rows: Vec<SweepRow>,
    pub means: Vec<SweepMean>,
    pub files: Written,
}

fn sweep_cell(cfg: &ExperimentConfig, param: &'static str, value: f64, seed: u64) -> Result<SweepRow> {
    let ov = match cfg.experiment {
        Experiment::SweepLr => Overrides {
            eta0: Some(value),
            ..Overrides::default()
        },
        _ => Overrides {
            label_noise: Some(value),
            ..Overrides::default()
        },
    };
    let p = prepare(cfg, seed, ov)?;
    let run = run_trajectory(&p, false, true)?;
    let last = run.snapshots.last();
    let ok = run.diverged.is_none();
    Ok(SweepRow {
        sweep_param: param,
        value,
        seed,
        gen_error: last.filter(|_| ok).map(|s| s.f_sprime - s.f_s),
        c_final: last.filter(|_| ok).map(|s| s.c_cum),
        stopped_at: run.steps,
        reached_stop: run.stopped_early,
        diverged: !ok,
    })
}

pub fn sweep_means(values: &[f64], rows: &[SweepRow]) -> Vec<SweepMean> {
    values
        .iter()
        .map(|&v| {
            let cell_rows: Vec<&SweepRow> = rows.iter().filter(|r| r.value == v).collect();
            let done: Vec<&&SweepRow> = cell_rows.iter().filter(|r| !r.diverged).collect();
            let avg = |f: &dyn Fn(&SweepRow) -> Option<f64>| -> Option<f64> {
                let xs: Vec<f64> = done.iter().filter_map(|r| f(r)).collect();
                (!xs.is_empty()).then(|| mean(&xs))
            };
            SweepMean {
                value: v,
                gen_error: avg(&|r| r.gen_error),
                c_final: avg(&|r| r.c_final),
                stopped_at: mean(&cell_rows.iter().map(|r| r.stopped_at as f64).collect::<Vec<_>>()),
                completed: done.len(),
            }
        })
        .collect()
}

pub fn cmd_sweep(cfg: &ExperimentConfig, plots: bool) -> Result<SweepResult> {
    let param = match cfg.experiment {
        Experiment::SweepNoise => "label_noise",
        Experiment::SweepLr => "learning_rate",
        other => return Err(Error::config("experiment", format!("`{other}` is not a sweep"))),
    };
    let out = &cfg.output_dir;
    ensure_dir(out)?;
    let values = cfg.sweep_values();
    let cells: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(v, s)| sweep_cell(cfg, param, v, s))
        .collect::<Result<_>>()?;
    let means = sweep_means(&values, &rows);

    let mut files = Vec::new();
    let row_cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.sweep_param.to_string(),
                r.value.to_string(),
                r.seed.to_string(),
                cell(r.gen_error),
                cell(r.c_final),
                r.stopped_at.to_string(),
                r.reached_stop.to_string(),
                r.diverged.to_string(),
            ]
        })
        .collect();
    let path = out.join("sweep.csv");
    write_csv(
        &path,
        &[
            "sweep_param",
            "value",
            "seed",
            "gen_error",
            "C_final",
            "stopped_at",
            "reached_stop",
            "diverged",
        ],
        &row_cells,
    )?;
    files.push(path);
    let mean_cells: Vec<Vec<String>> = means
        .iter()
        .map(|m| {
            vec![
                param.to_string(),
                m.value.to_string(),
                cell(m.gen_error),
                cell(m.c_final),
                m.stopped_at.to_string(),
                m.completed.to_string(),
            ]
        })
        .collect();
    let mpath = out.join("sweep_means.csv");
    write_csv(
        &mpath,
        &[
            "sweep_param",
            "value",
            "gen_error",
            "C_final",
            "stopped_at",
            "completed",
        ],
        &mean_cells,
    )?;
    files.push(mpath.clone());
    if plots {
        files.extend(emit_svg_plots(
            &mpath,
            &[
                PlotSpec::new("sweep_gen_error", "value", &["gen_error"]),
                PlotSpec::new("sweep_c_final", "value", &["C_final"]),
            ],
            out,
        )?);
    }
    Ok(SweepResult {
        sweep_param: param,
        rows,
        means,
        files,
    })
}

// ---------------------------------------------------------------- edge of stability

#[derive(Clone, Debug, PartialEq)]
pub struct EosPoint {
    pub epoch: usize,
    pub t: usize,
    pub eta: f64,
    pub f_s: f64,
    pub f_sprime: f64,
    pub rp: Option<f64>,
    pub trp: Option<f64>,
    pub sharpness: Option<f64>,
    /// `2 / eta` for GD, `2 / eta_eff` with `eta_eff = (n / b) eta` for SGD.
    pub stability_limit: f64,
}

#[derive(Clone, Debug)]
pub struct EosSeries {
    pub seed: u64,
    pub points: Vec<EosPoint>,
    pub diverged: Option<Divergence>,
}

pub const EOS_COLUMNS: [&str; 9] = [
    "epoch",
    "t",
    "eta",
    "F_S",
    "F_Sprime",
    "rp",
    "trp",
    "sharpness",
    "two_over_eta",
];

pub fn cmd_eos(cfg: &ExperimentConfig, plots: bool) -> Result<(Vec<EosSeries>, Written)> {
    let out = &cfg.output_dir;
    ensure_dir(out)?;
    let multi = cfg.seeds.len() > 1;
    let mut all = Vec::new();
    let mut files = Vec::new();
    for &seed in &cfg.seeds {
        let p = prepare(cfg, seed, Overrides::default())?;
        let run = run_trajectory(&p, true, true)?;
        let n = p.train.len() as f64;
        let scale = match p.optim.mode {
            Mode::Gd => 1.0,
            Mode::Sgd => n / p.optim.batch_size as f64,
        };
        let mut points = Vec::with_capacity(run.snapshots.len());
        for (k, s) in run.snapshots.iter().enumerate() {
            let sharp = match run.states.get(k) {
                Some(state) if k % cfg.eos.sharpness_every == 0 => {
                    Some(sharpness_with_iters(&p.spec, &state.w, &p.train, cfg.eos.power_iters)?)
                }
                _ => None,
            };
            points.push(EosPoint {
                epoch: s.epoch,
                t: s.t,
                eta: s.eta,
                f_s: s.f_s,
                f_sprime: s.f_sprime,
                rp: s.rp,
                trp: s.trp,
                sharpness: sharp,
                stability_limit: 2.0 / (scale * s.eta),
            });
        }
        let rows: Vec<Vec<String>> = points
            .iter()
            .map(|p| {
                vec![
                    p.epoch.to_string(),
                    p.t.to_string(),
                    p.eta.to_string(),
                    p.f_s.to_string(),
                    p.f_sprime.to_string(),
                    cell(p.rp),
                    cell(p.trp),
                    cell(p.sharpness),
                    p.stability_limit.to_string(),
                ]
            })
            .collect();
        let name = per_seed("eos", seed, multi);
        let path = out.join(&name);
        write_csv(&path, &EOS_COLUMNS, &rows)?;
        files.push(path.clone());
        if plots && points.len() > 1 {
            let stem = name.trim_end_matches(".csv");
            files.extend(emit_svg_plots(
                &path,
                &[
                    PlotSpec::new(&format!("{stem}_rp"), "epoch", &["rp", "trp"]),
                    PlotSpec::new(&format!("{stem}_sharpness"), "epoch", &["sharpness", "two_over_eta"]),
                ],
                out,
            )?);
        }
        all.push(EosSeries {
            seed,
            points,
            diverged: run.diverged,
        });
    }
    Ok((all, files))
}

/// What a command produced.
pub enum Outcome {
    ToyTable(ToyTable),
    Track(Vec<TrackSeries>),
    Assumption(Vec<AssumptionSeries>),
    Sweep(SweepResult),
    Eos(Vec<EosSeries>),
}

impl Outcome {
    /// First divergence recorded by a non-sweep command.
    pub fn divergence(&self) -> Option<(u64, &Divergence)> {
        match self {
            Outcome::Eos(series) => series.iter().find_map(|s| s.diverged.as_ref().map(|d| (s.seed, d))),
            _ => None,
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, plots: bool) -> Result<Outcome> {
    Ok(match cfg.experiment {
        Experiment::ToyTable => Outcome::ToyTable(cmd_toy_table(cfg, plots)?),
        Experiment::Track => Outcome::Track(cmd_track(cfg, plots)?.0),
        Experiment::Assumption => Outcome::Assumption(cmd_assumption(cfg, plots)?.0),
        Experiment::SweepNoise | Experiment::SweepLr => Outcome::Sweep(cmd_sweep(cfg, plots)?),
        Experiment::Eos => Outcome::Eos(cmd_eos(cfg, plots)?.0),
    })
}
