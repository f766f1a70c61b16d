use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trajbound::harness::{parse_config, run_experiment, Experiment, ExperimentConfig, Outcome};
use trajbound::Error;

#[derive(Parser)]
#[command(
    name = "trajbound",
    version,
    about = "Trajectory-complexity generalization bounds and experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bound comparison on the linear toy problem.
    #[command(alias = "toy_table")]
    ToyTable(RunArgs),
    /// Track F_S + C against the held-out loss.
    Track(RunArgs),
    /// Probe the held-out / train gradient-norm ratio over training.
    Assumption(RunArgs),
    /// Sweep label noise.
    #[command(alias = "sweep_noise")]
    SweepNoise(RunArgs),
    /// Sweep the learning rate.
    #[command(alias = "sweep_lr")]
    SweepLr(RunArgs),
    /// Relative progress and sharpness at large step sizes.
    Eos(RunArgs),
    /// Print or write the preset config for an experiment.
    #[command(alias = "init_config")]
    InitConfig {
        experiment: Experiment,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; the preset is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds (overrides `seeds`).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Also write SVG plots.
    #[arg(long)]
    plots: bool,
}

/// Failure class, mapped to the process exit code.
enum Stage {
    Config,
    Run,
}

fn exit_code(stage: Stage, err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Parse { .. } | Error::Schema(_) => 2,
        Error::InvalidArgument(_) if matches!(stage, Stage::Config) => 2,
        Error::Diverged { .. } | Error::NumericDomain { .. } => 3,
        Error::Io { .. } => 4,
        _ => 1,
    }
}

fn load(experiment: Experiment, args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::preset(experiment),
    };
    if cfg.experiment != experiment {
        return Err(Error::Config {
            key: "experiment".into(),
            detail: format!("config is for `{}`, command is `{}`", cfg.experiment, experiment),
        });
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn report(outcome: &Outcome) {
    match outcome {
        Outcome::ToyTable(t) => {
            println!("seed  gen_error  ours_main  hardt_nonconvex  zhang  bassily");
            for r in t.rows.iter().chain(std::iter::once(&t.mean)) {
                println!(
                    "{:>4}  {:.4}  {:.4}  {}  {}  {:.4}",
                    r.seed.map_or("mean".into(), |s| s.to_string()),
                    r.gen_error,
                    r.ours_main,
                    fmt_opt(r.hardt_nonconvex),
                    fmt_opt(r.zhang),
                    r.bassily
                );
            }
        }
        Outcome::Track(series) => {
            for s in series {
                if let Some(p) = s.points.last() {
                    println!(
                        "seed {}: F_S {:.4}  F_S' {:.4}  C {:.4}",
                        s.seed, p.f_s, p.f_sprime, p.c_cum
                    );
                }
            }
        }
        Outcome::Assumption(series) => {
            for s in series {
                println!(
                    "seed {}: gamma {}  control {}  early median {}",
                    s.seed,
                    fmt_opt(s.gamma),
                    fmt_opt(s.gamma_control),
                    fmt_opt(s.early_median)
                );
            }
        }
        Outcome::Sweep(s) => {
            println!("{}  gen_error  C_final  completed", s.sweep_param);
            for m in &s.means {
                println!(
                    "{}  {}  {}  {}",
                    m.value,
                    fmt_opt(m.gen_error),
                    fmt_opt(m.c_final),
                    m.completed
                );
            }
        }
        Outcome::Eos(series) => {
            for s in series {
                println!("seed {}: {} snapshots", s.seed, s.points.len());
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, args) = match cli.command {
        Command::InitConfig { experiment, out } => {
            let text = match ExperimentConfig::preset(experiment).to_toml_string() {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            return match out {
                Some(path) => match std::fs::write(&path, text) {
                    Ok(()) => ExitCode::SUCCESS,
                    Err(e) => {
                        eprintln!("error: {}: {e}", path.display());
                        ExitCode::from(4)
                    }
                },
                None => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
            };
        }
        Command::ToyTable(a) => (Experiment::ToyTable, a),
        Command::Track(a) => (Experiment::Track, a),
        Command::Assumption(a) => (Experiment::Assumption, a),
        Command::SweepNoise(a) => (Experiment::SweepNoise, a),
        Command::SweepLr(a) => (Experiment::SweepLr, a),
        Command::Eos(a) => (Experiment::Eos, a),
    };
    let cfg = match load(experiment, &args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(Stage::Config, &e));
        }
    };
    match run_experiment(&cfg, args.plots) {
        Ok(outcome) => {
            report(&outcome);
            if let Some((seed, d)) = outcome.divergence() {
                eprintln!("error: seed {seed} diverged at step {}: {}", d.step, d.detail);
                return ExitCode::from(3);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(Stage::Run, &e))
        }
    }
}
