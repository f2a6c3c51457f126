use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::finetune::{finetune, Backbone, FoldResult, TaskDataset};
use super::pretrain::{pretrain, PretrainPaths};
use super::{TrainConfig, FINETUNE_FRACTIONS, PRETRAIN_FRACTIONS};
use crate::corpus::SplitPlan;
use crate::network::ModelConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PretrainFraction,
    FinetuneFraction,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PretrainFraction => "pretrain_fraction",
            SweepAxis::FinetuneFraction => "finetune_fraction",
        }
    }

    pub fn allowed(self) -> &'static [f64] {
        match self {
            SweepAxis::PretrainFraction => &PRETRAIN_FRACTIONS,
            SweepAxis::FinetuneFraction => &FINETUNE_FRACTIONS,
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain_fraction" => Ok(SweepAxis::PretrainFraction),
            "finetune_fraction" => Ok(SweepAxis::FinetuneFraction),
            _ => Err(Error::Parameter(format!("unknown sweep axis {s:?}"))),
        }
    }
}

/// One fold of one sweep cell; the results-table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub experiment_id: String,
    pub axis: String,
    pub fraction: f64,
    pub fold: usize,
    pub accuracy: f64,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub experiment_id: String,
    pub axis: String,
    pub fraction: f64,
    pub mean: f64,
    pub std: f64,
    pub n_folds: usize,
}

pub struct SweepInputs<'a> {
    pub experiment_id: String,
    /// Pre-training chunks; used by the pre-training axis.
    pub corpus: &'a [Array2<f32>],
    pub model_config: &'a ModelConfig,
    /// Backbone for the fine-tuning axis. `None` trains from scratch.
    pub checkpoint: Option<&'a Checkpoint>,
    pub task: &'a TaskDataset,
    pub split: &'a SplitPlan,
    pub pretrain: &'a TrainConfig,
    pub finetune: &'a TrainConfig,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
    pub folds: Vec<(f64, Vec<FoldResult>)>,
    pub checkpoints: Vec<(f64, Checkpoint)>,
}

/// Runs the pipeline once per value of `axis` and tabulates fold accuracies.
pub fn sweep(axis: SweepAxis, values: &[f64], inputs: &SweepInputs) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(Error::Parameter("sweep needs at least one value".into()));
    }
    for &v in values {
        if !axis.allowed().iter().any(|&a| (a - v).abs() < 1e-12) {
            return Err(Error::Parameter(format!("{v} is not a valid {axis} (allowed {:?})", axis.allowed())));
        }
    }
    let mut rows = Vec::new();
    let mut folds = Vec::new();
    let mut checkpoints = Vec::new();
    for &v in values {
        let results = match axis {
            SweepAxis::PretrainFraction => {
                let cfg = TrainConfig { pretrain_fraction: v, ..inputs.pretrain.clone() };
                let ck = pretrain(inputs.corpus, inputs.model_config, &cfg, &PretrainPaths::default())?.checkpoint;
                let r = finetune(Backbone::Pretrained(&ck), inputs.task, inputs.split, inputs.finetune)?;
                checkpoints.push((v, ck));
                r
            }
            SweepAxis::FinetuneFraction => {
                let cfg = TrainConfig { finetune_fraction: v, ..inputs.finetune.clone() };
                let backbone = match inputs.checkpoint {
                    Some(ck) => Backbone::Pretrained(ck),
                    None => Backbone::Scratch(inputs.model_config),
                };
                finetune(backbone, inputs.task, inputs.split, &cfg)?
            }
        };
        for r in &results {
            rows.push(SweepRow {
                experiment_id: inputs.experiment_id.clone(),
                axis: axis.name().into(),
                fraction: v,
                fold: r.fold,
                accuracy: r.accuracy,
                lr: r.lr,
                seed: inputs.finetune.seed,
            });
        }
        folds.push((v, results));
    }
    let summary = summarize(&rows);
    Ok(SweepOutcome { rows, summary, folds, checkpoints })
}

/// Mean and sample standard deviation of fold accuracy per
/// `(experiment, axis, fraction)`, in first-appearance order.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String, f64)> = Vec::new();
    for r in rows {
        let k = (r.experiment_id.clone(), r.axis.clone(), r.fraction);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(experiment_id, axis, fraction)| {
            let acc: Vec<f64> = rows
                .iter()
                .filter(|r| r.experiment_id == experiment_id && r.axis == axis && r.fraction == fraction)
                .map(|r| r.accuracy)
                .collect();
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let std = if acc.len() > 1 {
                (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SummaryRow { experiment_id, axis, fraction, mean, std, n_folds: acc.len() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(f: f64, fold: usize, acc: f64) -> SweepRow {
        SweepRow { experiment_id: "e".into(), axis: "finetune_fraction".into(), fraction: f, fold, accuracy: acc, lr: 1e-3, seed: 0 }
    }

    #[test]
    fn summary_statistics() {
        let rows = vec![row(1.0, 0, 0.8), row(1.0, 1, 1.0), row(0.5, 0, 0.6)];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert!((s[0].mean - 0.9).abs() < 1e-12);
        assert!((s[0].std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!((s[1].n_folds, s[1].std), (1, 0.0));
    }

    #[test]
    fn axis_parsing() {
        assert_eq!("finetune_fraction".parse::<SweepAxis>().unwrap(), SweepAxis::FinetuneFraction);
        assert!("lr".parse::<SweepAxis>().is_err());
    }
}
