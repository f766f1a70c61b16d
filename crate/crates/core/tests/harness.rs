use std::path::Path;

use trajbound::bounds::evaluate;
use trajbound::harness::commands::{cmd_eos, cmd_sweep, cmd_toy_table, prepare, run_trajectory, Overrides};
use trajbound::harness::{Experiment, ExperimentConfig};

fn small(exp: Experiment, dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(exp);
    cfg.output_dir = dir.to_path_buf();
    cfg.dataset.n_train = 40;
    cfg.dataset.n_test = 200;
    cfg.optim.epochs = Some(5);
    cfg.estimators.k_samples = 64;
    cfg
}

#[test]
fn zero_epoch_run_has_zero_trajectory_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Experiment::ToyTable, dir.path());
    cfg.optim.epochs = Some(0);
    let table = cmd_toy_table(&cfg, false).unwrap();
    for (seed, row) in cfg.seeds.iter().zip(&table.rows) {
        let p = prepare(&cfg, *seed, Overrides::default()).unwrap();
        let run = run_trajectory(&p, false, false).unwrap();
        assert_eq!(run.snapshots.len(), 1);
        let s = &run.snapshots[0];
        assert_eq!(row.gen_error, s.f_sprime - s.f_s);
        assert_eq!(row.ours_main, 0.0);
        assert_eq!(row.ours_relaxed, 0.0);
        assert_eq!(row.ours_smooth, Some(0.0));
    }
}

#[test]
fn toy_table_mean_row_and_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let table = cmd_toy_table(&small(Experiment::ToyTable, dir.path()), false).unwrap();
    let k = table.rows.len() as f64;
    let mean = |f: fn(&trajbound::harness::commands::ToyRow) -> f64| table.rows.iter().map(f).sum::<f64>() / k;
    assert!((table.mean.gen_error - mean(|r| r.gen_error)).abs() <= 1e-12);
    assert!((table.mean.ours_main - mean(|r| r.ours_main)).abs() <= 1e-12);
    assert!((table.mean.bassily - mean(|r| r.bassily)).abs() <= 1e-12);
    for (_, reports) in &table.reports {
        for r in reports {
            assert_eq!(
                r.recompute().unwrap().to_bits(),
                r.value.to_bits(),
                "{}",
                r.method.name()
            );
            assert_eq!(
                evaluate(r.method, &r.constants, &r.aggregates).unwrap().to_bits(),
                r.value.to_bits()
            );
        }
    }
    let text = std::fs::read_to_string(dir.path().join("toy_table.csv")).unwrap();
    assert!(text
        .starts_with("seed,gen_error,ours_main,ours_smooth,ours_relaxed,hardt_convex,hardt_nonconvex,zhang,bassily\n"));
    assert_eq!(text.lines().count(), 1 + table.rows.len() + 1);
    assert!(text.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn single_point_grid_means_equal_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Experiment::SweepNoise, dir.path());
    cfg.seeds = vec![4];
    cfg.sweep.values = Some(vec![0.1]);
    let res = cmd_sweep(&cfg, false).unwrap();
    assert_eq!(res.rows.len(), 1);
    assert_eq!(res.means.len(), 1);
    assert_eq!(res.means[0].gen_error, res.rows[0].gen_error);
    assert_eq!(res.means[0].c_final, res.rows[0].c_final);
    assert_eq!(res.means[0].completed, 1);
}

#[test]
fn diverged_sweep_cells_become_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Experiment::SweepLr, dir.path());
    cfg.seeds = vec![0, 1];
    cfg.model.loss = trajbound::models::Loss::Squared;
    cfg.sweep.values = Some(vec![0.01, 1e4]);
    let res = cmd_sweep(&cfg, false).unwrap();
    assert_eq!(res.rows.len(), 4);
    for r in &res.rows {
        assert_eq!(r.diverged, r.value == 1e4, "{r:?}");
        assert_eq!(r.gen_error.is_none(), r.diverged);
    }
    assert_eq!(res.means[1].completed, 0);
    assert_eq!(res.means[1].c_final, None);
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().filter(|l| l.ends_with(",true")).count(), 2);
}

#[test]
fn eos_small_step_rp_near_minus_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::preset(Experiment::Eos);
    cfg.output_dir = dir.path().to_path_buf();
    cfg.optim.schedule.eta0 = 0.01;
    cfg.optim.epochs = Some(100);
    let (series, _) = cmd_eos(&cfg, false).unwrap();
    let rps: Vec<f64> = series[0].points.iter().filter_map(|p| p.rp).collect();
    let mean = rps.iter().sum::<f64>() / rps.len() as f64;
    assert!((-1.2..=-0.8).contains(&mean), "mean rp {mean}");
    for p in &series[0].points {
        assert_eq!(p.stability_limit, 2.0 / 0.01);
    }
    assert!(series[0].points.iter().step_by(10).all(|p| p.sharpness.is_some()));
    assert!(series[0].points[1].sharpness.is_none());
}

#[test]
fn eos_sgd_limit_uses_effective_rate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Experiment::Eos, dir.path());
    cfg.optim.mode = trajbound::optim::Mode::Sgd;
    cfg.optim.batch_size = 10;
    let (series, _) = cmd_eos(&cfg, false).unwrap();
    let eta = cfg.optim.schedule.eta0;
    assert_eq!(series[0].points[0].stability_limit, 2.0 / (eta * 40.0 / 10.0));
}

#[test]
fn eos_divergence_keeps_partial_series() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Experiment::Eos, dir.path());
    cfg.optim.schedule.eta0 = 1e4;
    let (series, _) = cmd_eos(&cfg, false).unwrap();
    assert!(series[0].diverged.is_some());
    assert!(!series[0].points.is_empty());
    assert!(dir.path().join("eos.csv").exists());
}

#[test]
fn shipped_configs_match_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for exp in Experiment::ALL {
        let path = root.join(format!("{}.toml", exp.name()));
        let cfg = trajbound::harness::parse_config(&path).unwrap();
        assert_eq!(cfg, ExperimentConfig::preset(exp), "{}", path.display());
    }
}

#[test]
fn output_files_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Experiment::Track, dir.path());
    cfg.seeds = vec![3, 8];
    trajbound::harness::run_experiment(&cfg, true).unwrap();
    for name in [
        "track_seed3.csv",
        "track_seed8.csv",
        "trajectory_seed3.csv",
        "track_seed8_fit.svg",
    ] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}
