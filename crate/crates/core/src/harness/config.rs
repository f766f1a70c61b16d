//! TOML experiment configuration.
//!
//! Every section rejects unknown keys. Missing keys take the defaults below;
//! `preset` gives the shipped configuration for each experiment.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Loss, ModelKind, ModelSpec};
use crate::optim::{BatchSampling, Mode, OptimConfig, Schedule};
use crate::trajectory::SubsetEstimatorConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    ToyTable,
    Track,
    Assumption,
    SweepNoise,
    SweepLr,
    Eos,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::ToyTable,
        Experiment::Track,
        Experiment::Assumption,
        Experiment::SweepNoise,
        Experiment::SweepLr,
        Experiment::Eos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::ToyTable => "toy_table",
            Experiment::Track => "track",
            Experiment::Assumption => "assumption",
            Experiment::SweepNoise => "sweep_noise",
            Experiment::SweepLr => "sweep_lr",
            Experiment::Eos => "eos",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.replace('-', "_");
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == key)
            .ok_or_else(|| Error::config("experiment", format!("unknown experiment `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Toy,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    /// Fraction of training labels flipped before training.
    pub label_noise: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Separate holdout file; when absent the CSV is split by `holdout_fraction`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout_path: Option<PathBuf>,
    pub label_column: String,
    pub holdout_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Toy,
            n_train: 100,
            n_test: 1000,
            dim: 20,
            label_noise: 0.0,
            path: None,
            holdout_path: None,
            label_column: "label".into(),
            holdout_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden widths for `mlp`.
    pub hidden: Vec<usize>,
    pub loss: Loss,
    /// Output classes for cross-entropy.
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Linear,
            hidden: vec![32],
            loss: Loss::Squared,
            classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize) -> Result<ModelSpec> {
        let spec = match self.kind {
            ModelKind::Linear => {
                if self.loss != Loss::Squared {
                    return Err(Error::config("model.loss", "the linear model uses squared loss"));
                }
                ModelSpec::linear(input_dim)
            }
            ModelKind::Mlp => {
                let out = match self.loss {
                    Loss::Squared => 1,
                    Loss::CrossEntropy => self.classes,
                };
                let mut widths = vec![input_dim];
                widths.extend(&self.hidden);
                widths.push(out);
                ModelSpec::mlp(widths, self.loss)
            }
        };
        spec.validate().map_err(|e| Error::config("model", e.to_string()))?;
        Ok(spec)
    }
}

/// `beta` of an inverse-time schedule: a number, or `"auto"` for the
/// estimated smoothness at initialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSetting {
    Auto(AutoWord),
    Value(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoWord {
    Auto,
}

impl Default for BetaSetting {
    fn default() -> Self {
        BetaSetting::Auto(AutoWord::Auto)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Constant,
    InverseTime,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub eta0: f64,
    pub c: f64,
    pub beta: BetaSetting,
    pub eta_min: f64,
    /// Cosine horizon in steps; defaults to the step budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_max: Option<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Constant,
            eta0: 0.05,
            c: 1.0,
            beta: BetaSetting::default(),
            eta_min: 0.0,
            t_max: None,
        }
    }
}

impl ScheduleConfig {
    pub fn needs_beta_estimate(&self) -> bool {
        self.kind == ScheduleKind::InverseTime && matches!(self.beta, BetaSetting::Auto(_))
    }

    pub fn resolve(&self, beta_hat: Option<f64>, budget: usize) -> Result<Schedule> {
        let schedule = match self.kind {
            ScheduleKind::Constant => Schedule::Constant { eta0: self.eta0 },
            ScheduleKind::InverseTime => Schedule::InverseTime {
                c: self.c,
                beta: match self.beta {
                    BetaSetting::Value(b) => b,
                    BetaSetting::Auto(_) => beta_hat
                        .ok_or_else(|| Error::config("optim.schedule.beta", "no estimate available for `auto`"))?,
                },
            },
            ScheduleKind::Cosine => Schedule::Cosine {
                eta0: self.eta0,
                eta_min: self.eta_min,
                t_max: self.t_max.unwrap_or(budget.max(1)),
            },
        };
        schedule
            .validate()
            .map_err(|e| Error::config("optim.schedule", e.to_string()))?;
        Ok(schedule)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub mode: Mode,
    /// Ignored for `gd`, which always uses the full training set.
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_train_loss: Option<f64>,
    /// Steps between snapshots; defaults to one epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<usize>,
    pub sampling: BatchSampling,
    pub schedule: ScheduleConfig,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            mode: Mode::Sgd,
            batch_size: 10,
            epochs: Some(200),
            max_steps: None,
            stop_train_loss: None,
            snapshot_every: None,
            sampling: BatchSampling::Independent,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl OptimSection {
    pub fn batch_size_for(&self, n: usize) -> usize {
        match self.mode {
            Mode::Gd => n,
            Mode::Sgd => self.batch_size,
        }
    }

    /// Total step budget: the smaller of `epochs` worth of steps and `max_steps`.
    pub fn step_budget(&self, n: usize) -> Result<usize> {
        let b = self.batch_size_for(n).max(1);
        let per_epoch = n.div_ceil(b);
        match (self.epochs, self.max_steps) {
            (Some(e), Some(m)) => Ok((e * per_epoch).min(m)),
            (Some(e), None) => Ok(e * per_epoch),
            (None, Some(m)) => Ok(m),
            (None, None) => Err(Error::config("optim", "set `epochs` or `max_steps`")),
        }
    }

    pub fn resolve(&self, n: usize, seed: u64, beta_hat: Option<f64>) -> Result<OptimConfig> {
        let budget = self.step_budget(n)?;
        let b = self.batch_size_for(n);
        let cfg = OptimConfig {
            mode: self.mode,
            batch_size: b,
            schedule: self.schedule.resolve(beta_hat, budget)?,
            max_steps: budget,
            stop_train_loss: self.stop_train_loss,
            snapshot_every: self.snapshot_every.unwrap_or(n.div_ceil(b.max(1))),
            seed,
            sampling: self.sampling,
        };
        cfg.validate(n).map_err(|e| Error::config("optim", e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Grid values; defaults depend on the sweep.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

pub const DEFAULT_NOISE_GRID: [f64; 4] = [0.0, 0.1, 0.2, 0.3];
pub const DEFAULT_LR_GRID: [f64; 5] = [0.005, 0.01, 0.02, 0.05, 0.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EosSection {
    /// Sharpness is computed at every this many snapshots.
    pub sharpness_every: usize,
    pub power_iters: usize,
}

impl Default for EosSection {
    fn default() -> Self {
        Self {
            sharpness_every: 1,
            power_iters: 100,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub estimators: SubsetEstimatorConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub eos: EosSection,
}

fn check(cond: bool, key: &str, detail: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(key, detail))
    }
}

impl ExperimentConfig {
    /// Defaults for `experiment` with nothing else set.
    pub fn minimal(experiment: Experiment) -> Self {
        Self {
            experiment,
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            optim: OptimSection::default(),
            estimators: SubsetEstimatorConfig::default(),
            sweep: SweepSection::default(),
            eos: EosSection::default(),
        }
    }

    /// The shipped configuration for each experiment.
    pub fn preset(experiment: Experiment) -> Self {
        let mut cfg = Self::minimal(experiment);
        let mlp = |loss| ModelConfig {
            kind: ModelKind::Mlp,
            hidden: vec![32],
            loss,
            classes: 2,
        };
        match experiment {
            Experiment::ToyTable => {
                cfg.optim.batch_size = 1;
                cfg.optim.schedule = ScheduleConfig {
                    kind: ScheduleKind::InverseTime,
                    ..ScheduleConfig::default()
                };
            }
            Experiment::Track => {
                cfg.model = mlp(Loss::CrossEntropy);
                cfg.dataset.label_noise = 0.4;
                cfg.optim.schedule.eta0 = 0.1;
            }
            Experiment::Assumption => {
                cfg.model = mlp(Loss::Squared);
                cfg.optim.epochs = Some(100);
                cfg.optim.schedule.eta0 = 0.01;
            }
            Experiment::SweepNoise => {
                cfg.model = mlp(Loss::CrossEntropy);
                cfg.optim.schedule.eta0 = 0.1;
                cfg.optim.epochs = Some(2000);
                cfg.optim.stop_train_loss = Some(0.2);
                cfg.sweep.values = Some(DEFAULT_NOISE_GRID.to_vec());
            }
            Experiment::SweepLr => {
                cfg.model = mlp(Loss::CrossEntropy);
                cfg.dataset.label_noise = 0.2;
                cfg.optim.epochs = Some(2000);
                cfg.optim.stop_train_loss = Some(0.2);
                cfg.sweep.values = Some(DEFAULT_LR_GRID.to_vec());
            }
            Experiment::Eos => {
                cfg.model = mlp(Loss::Squared);
                cfg.seeds = vec![0];
                cfg.optim.mode = Mode::Gd;
                cfg.optim.epochs = Some(300);
                cfg.optim.schedule.eta0 = 0.05;
                cfg.eos.sharpness_every = 10;
            }
        }
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .map(|s| {
                    let line = text[..s.start].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_else(|| "<document>".into());
            Error::config(key, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<serialize>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        check(!self.seeds.is_empty(), "seeds", "at least one seed is required")?;
        let d = &self.dataset;
        check(
            (0.0..=1.0).contains(&d.label_noise),
            "dataset.label_noise",
            "must lie in [0, 1]",
        )?;
        match d.source {
            DataSource::Toy => {
                check(d.n_train >= 2, "dataset.n_train", "must be >= 2")?;
                check(d.n_test >= 1, "dataset.n_test", "must be >= 1")?;
                check(d.dim >= 1, "dataset.dim", "must be >= 1")?;
            }
            DataSource::Csv => {
                check(d.path.is_some(), "dataset.path", "required for a csv dataset")?;
                if d.holdout_path.is_none() {
                    check(
                        d.holdout_fraction > 0.0 && d.holdout_fraction < 1.0,
                        "dataset.holdout_fraction",
                        "must lie in (0, 1)",
                    )?;
                }
            }
        }
        if self.model.kind == ModelKind::Mlp {
            check(
                !self.model.hidden.is_empty(),
                "model.hidden",
                "an mlp needs at least one hidden layer",
            )?;
            check(
                self.model.hidden.iter().all(|&h| h > 0),
                "model.hidden",
                "widths must be >= 1",
            )?;
        }
        if self.model.loss == Loss::CrossEntropy {
            check(self.model.classes >= 2, "model.classes", "must be >= 2")?;
        }
        check(self.optim.batch_size >= 1, "optim.batch_size", "must be >= 1")?;
        check(
            self.optim.epochs.is_some() || self.optim.max_steps.is_some(),
            "optim",
            "set `epochs` or `max_steps`",
        )?;
        if let Some(e) = self.optim.snapshot_every {
            check(e >= 1, "optim.snapshot_every", "must be >= 1")?;
        }
        let s = &self.optim.schedule;
        check(
            s.eta0 > 0.0 && s.eta0.is_finite(),
            "optim.schedule.eta0",
            "must be positive",
        )?;
        check(s.c > 0.0 && s.c.is_finite(), "optim.schedule.c", "must be positive")?;
        if let BetaSetting::Value(b) = s.beta {
            check(
                b > 0.0 && b.is_finite(),
                "optim.schedule.beta",
                "must be positive or \"auto\"",
            )?;
        }
        check(self.estimators.k_samples >= 1, "estimators.k_samples", "must be >= 1")?;
        check(
            self.estimators.moment_batches >= 1,
            "estimators.moment_batches",
            "must be >= 1",
        )?;
        check(self.eos.sharpness_every >= 1, "eos.sharpness_every", "must be >= 1")?;
        check(self.eos.power_iters >= 1, "eos.power_iters", "must be >= 1")?;
        match self.experiment {
            Experiment::SweepNoise | Experiment::SweepLr => {
                let grid = self.sweep_values();
                check(!grid.is_empty(), "sweep.values", "grid must not be empty")?;
                check(
                    grid.iter().all(|v| v.is_finite()),
                    "sweep.values",
                    "values must be finite",
                )?;
                if self.experiment == Experiment::SweepNoise {
                    check(
                        grid.iter().all(|v| (0.0..=1.0).contains(v)),
                        "sweep.values",
                        "noise levels must lie in [0, 1]",
                    )?;
                } else {
                    check(
                        grid.iter().all(|&v| v > 0.0),
                        "sweep.values",
                        "learning rates must be positive",
                    )?;
                    check(
                        self.optim.schedule.kind == ScheduleKind::Constant,
                        "optim.schedule.kind",
                        "the learning-rate sweep varies a constant schedule",
                    )?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn sweep_values(&self) -> Vec<f64> {
        match (&self.sweep.values, self.experiment) {
            (Some(v), _) => v.clone(),
            (None, Experiment::SweepLr) => DEFAULT_LR_GRID.to_vec(),
            (None, _) => DEFAULT_NOISE_GRID.to_vec(),
        }
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml_str("experiment = \"toy_table\"\n").unwrap();
        assert_eq!(cfg.dataset.dim, 20);
        assert_eq!(cfg.optim.batch_size, 10);
        assert_eq!(cfg.estimators.k_samples, 1024);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_eq!(cfg, ExperimentConfig::minimal(Experiment::ToyTable));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_toml_str("experiment = \"track\"\n[optim]\nlearning_rte = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rte"), "{msg}");
        assert!(matches!(err, Error::Config { .. }));
        let err = ExperimentConfig::from_toml_str("experiment = \"track\"\nlearning_rte = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rte"));
    }

    #[test]
    fn presets_round_trip() {
        for e in Experiment::ALL {
            let cfg = ExperimentConfig::preset(e);
            cfg.validate().unwrap();
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg, "{text}");
        }
    }

    #[test]
    fn beta_accepts_auto_or_number() {
        let auto = ExperimentConfig::from_toml_str(
            "experiment = \"toy_table\"\n[optim.schedule]\nkind = \"inverse_time\"\nbeta = \"auto\"\n",
        )
        .unwrap();
        assert!(auto.optim.schedule.needs_beta_estimate());
        let fixed = ExperimentConfig::from_toml_str(
            "experiment = \"toy_table\"\n[optim.schedule]\nkind = \"inverse_time\"\nbeta = 2.5\n",
        )
        .unwrap();
        assert_eq!(fixed.optim.schedule.beta, BetaSetting::Value(2.5));
        assert!(
            ExperimentConfig::from_toml_str("experiment = \"toy_table\"\n[optim.schedule]\nbeta = \"big\"\n").is_err()
        );
    }

    #[test]
    fn validation_names_keys() {
        let cases = [
            ("experiment = \"track\"\nseeds = []\n", "seeds"),
            (
                "experiment = \"track\"\n[dataset]\nlabel_noise = 1.5\n",
                "dataset.label_noise",
            ),
            ("experiment = \"sweep_lr\"\n[sweep]\nvalues = []\n", "sweep.values"),
            ("experiment = \"track\"\n[dataset]\nsource = \"csv\"\n", "dataset.path"),
        ];
        for (text, key) in cases {
            match ExperimentConfig::from_toml_str(text) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn step_budget_combines_epochs_and_cap() {
        let mut o = OptimSection::default();
        assert_eq!(o.step_budget(100).unwrap(), 2000);
        o.max_steps = Some(50);
        assert_eq!(o.step_budget(100).unwrap(), 50);
        o.epochs = None;
        assert_eq!(o.step_budget(100).unwrap(), 50);
        o.mode = Mode::Gd;
        o.epochs = Some(3);
        o.max_steps = None;
        assert_eq!(o.step_budget(100).unwrap(), 3);
    }

    #[test]
    fn experiment_names_parse() {
        assert_eq!("toy-table".parse::<Experiment>().unwrap(), Experiment::ToyTable);
        assert_eq!("sweep_lr".parse::<Experiment>().unwrap(), Experiment::SweepLr);
        assert!("nope".parse::<Experiment>().is_err());
    }
}
