//! Loss-configuration grid and one-dimensional hyperparameter sweeps, each
//! trained over several seeds and scored on the validation split.

use std::fmt;
use std::str::FromStr;

use log::{info, warn};

use super::{evaluate, EvalError};
use crate::config::RunConfig;
use crate::run::{train_run, RunError};
use crate::synthdata::{Dataset, LabeledImage};

/// Rows of the loss-combination grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationRow {
    /// Plain CAM training: no mixing, no regularizers.
    Baseline,
    MixupCls,
    MixupClsEnt,
    MixupClsCon,
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [
        Self::Baseline,
        Self::MixupCls,
        Self::MixupClsEnt,
        Self::MixupClsCon,
        Self::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::MixupCls => "mixup_cls",
            Self::MixupClsEnt => "mixup_cls_ent",
            Self::MixupClsCon => "mixup_cls_con",
            Self::Full => "full",
        }
    }

    /// `base` with mixing and regularizers switched per row. Enabled
    /// regularizers keep the weights configured in `base`.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let (mixup, ent, con) = match self {
            Self::Baseline => (false, false, false),
            Self::MixupCls => (true, false, false),
            Self::MixupClsEnt => (true, true, false),
            Self::MixupClsCon => (true, false, true),
            Self::Full => (true, true, true),
        };
        RunConfig {
            mixup,
            lambda_ent: if ent { base.lambda_ent } else { 0.0 },
            lambda_con: if con { base.lambda_con } else { 0.0 },
            ..base.clone()
        }
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationRow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|r| r.name()).collect();
            format!("unknown ablation row `{s}` (expected one of {})", names.join(", "))
        })
    }
}

/// Hyperparameters that can be swept on top of the full configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    LambdaEnt,
    LambdaCon,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::LambdaEnt => "lambda_ent",
            Self::LambdaCon => "lambda_con",
        }
    }

    pub fn apply(self, base: &RunConfig, value: f64) -> RunConfig {
        let mut cfg = AblationRow::Full.apply(base);
        match self {
            Self::Alpha => cfg.alpha = value,
            Self::LambdaEnt => cfg.lambda_ent = value,
            Self::LambdaCon => cfg.lambda_con = value,
        }
        cfg
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "lambda_ent" => Ok(Self::LambdaEnt),
            "lambda_con" => Ok(Self::LambdaCon),
            other => Err(format!(
                "unknown sweep parameter `{other}` (alpha, lambda_ent, lambda_con)"
            )),
        }
    }
}

/// Mean and sample standard deviation (zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub miou: f64,
    pub coverage: f64,
    pub uniformity: f64,
    pub accuracy: f64,
}

/// One configuration's results across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub label: String,
    pub results: Vec<SeedResult>,
    /// Seeds whose training diverged, with the reason.
    pub failures: Vec<(u64, String)>,
}

impl AblationCell {
    pub fn failed(&self) -> bool {
        !self.failures.is_empty()
    }

    fn stat(&self, f: impl Fn(&SeedResult) -> f64) -> MeanStd {
        MeanStd::of(&self.results.iter().map(f).collect::<Vec<_>>())
    }

    pub fn miou(&self) -> MeanStd {
        self.stat(|r| r.miou)
    }

    pub fn coverage(&self) -> MeanStd {
        self.stat(|r| r.coverage)
    }

    pub fn uniformity(&self) -> MeanStd {
        self.stat(|r| r.uniformity)
    }

    pub fn accuracy(&self) -> MeanStd {
        self.stat(|r| r.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub const HEADERS: [&'static str; 11] = [
        "config",
        "seeds",
        "miou_mean",
        "miou_std",
        "coverage_mean",
        "coverage_std",
        "uniformity_mean",
        "uniformity_std",
        "accuracy_mean",
        "accuracy_std",
        "status",
    ];

    pub fn get(&self, label: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.label == label)
    }

    pub fn rows(&self) -> Vec<Vec<String>> {
        self.cells
            .iter()
            .map(|c| {
                let mut row = vec![c.label.clone(), c.results.len().to_string()];
                for s in [c.miou(), c.coverage(), c.uniformity(), c.accuracy()] {
                    row.push(format!("{:.4}", s.mean));
                    row.push(format!("{:.4}", s.std));
                }
                row.push(if c.failed() {
                    format!("failed {}/{}", c.failures.len(), c.failures.len() + c.results.len())
                } else {
                    "ok".into()
                });
                row
            })
            .collect()
    }
}

/// Trains and scores every `(label, config)` for each seed. The seed replaces
/// the config's own seed for initialization, augmentation and batch order;
/// the datasets are shared. Divergence marks the configuration failed and
/// the harness moves on.
pub fn run_ablation(
    configs: &[(String, RunConfig)],
    seeds: &[u64],
    train: &[LabeledImage],
    val: &Dataset,
) -> Result<AblationTable, EvalError> {
    let mut table = AblationTable::default();
    for (label, base) in configs {
        let mut cell = AblationCell {
            label: label.clone(),
            results: Vec::new(),
            failures: Vec::new(),
        };
        for &seed in seeds {
            let cfg = RunConfig { seed, ..base.clone() };
            match train_run(&cfg, train, val, None, None) {
                Ok(outcome) => {
                    let report = evaluate(&outcome.net, val, &cfg.pseudo_config())?;
                    info!(
                        "{label} seed {seed}: mIoU {:.4} coverage {:.4} uniformity {:.4}",
                        report.iou.miou, report.coverage, report.uniformity
                    );
                    cell.results.push(SeedResult {
                        seed,
                        miou: report.iou.miou,
                        coverage: report.coverage,
                        uniformity: report.uniformity,
                        accuracy: report.accuracy,
                    });
                }
                Err(RunError::Eval(e)) => return Err(e),
                Err(e) => {
                    warn!("{label} seed {seed} failed: {e}");
                    cell.failures.push((seed, e.to_string()));
                }
            }
        }
        table.cells.push(cell);
    }
    Ok(table)
}
