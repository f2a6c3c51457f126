//! Pre-training, fine-tuning under freeze policies, evaluation and sweeps.

pub mod checkpoint;
pub mod finetune;
pub mod optim;
pub mod pretrain;
pub mod step;
pub mod sweep;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use finetune::{evaluate, finetune, score, Backbone, EpochRecord, Evaluation, FoldResult, TaskDataset, Trial};
pub use optim::{Adam, AdamConfig};
pub use pretrain::{pretrain, BandPowerCache, LogRow, PretrainOutcome, PretrainPaths};
pub use sweep::{sweep, summarize, SweepAxis, SweepInputs, SweepOutcome, SweepRow, SummaryRow};

use crate::network::Model;
use crate::nn::Trainable;
use crate::objectives::DEFAULT_LAMBDA;
use crate::{Error, Result};

pub const PRETRAIN_FRACTIONS: [f64; 5] = [1.0, 0.5, 0.1, 0.01, 0.001];
pub const FINETUNE_FRACTIONS: [f64; 4] = [1.0, 0.5, 0.3, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Finetune,
    Scratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Vanilla,
    Knowledge,
}

impl Objective {
    pub fn lambda(self) -> f64 {
        match self {
            Objective::Vanilla => 0.0,
            Objective::Knowledge => DEFAULT_LAMBDA,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Objective::Vanilla => "vanilla-s4",
            Objective::Knowledge => "knowledge-s4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    LinearProbe,
    LastS4,
    AllS4,
    FullyTrainable,
}

impl FreezePolicy {
    pub const ALL: [FreezePolicy; 4] =
        [FreezePolicy::LinearProbe, FreezePolicy::LastS4, FreezePolicy::AllS4, FreezePolicy::FullyTrainable];

    pub fn name(self) -> &'static str {
        match self {
            FreezePolicy::LinearProbe => "linear_probe",
            FreezePolicy::LastS4 => "last_s4",
            FreezePolicy::AllS4 => "all_s4",
            FreezePolicy::FullyTrainable => "fully_trainable",
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FreezePolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown freeze policy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub objective: Objective,
    pub iterations: usize,
    pub batch_size: usize,
    pub finetune_batch_size: usize,
    pub lr: f64,
    pub lr_grid: Vec<f64>,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
    pub n_fc: usize,
    pub pretrain_fraction: f64,
    pub finetune_fraction: f64,
    /// Iterations between intermediate checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Pretrain,
            objective: Objective::Knowledge,
            iterations: 500_000,
            batch_size: 32,
            finetune_batch_size: 64,
            lr: 1e-3,
            lr_grid: vec![1e-3, 1e-4],
            seed: 0,
            freeze_policy: FreezePolicy::LinearProbe,
            n_fc: 1,
            pretrain_fraction: 1.0,
            finetune_fraction: 1.0,
            checkpoint_interval: 0,
            max_epochs: 50,
            patience: 10,
            validation_fraction: 0.2,
        }
    }
}

fn in_set(v: f64, set: &[f64]) -> bool {
    set.iter().any(|&s| (s - v).abs() < 1e-12)
}

impl TrainConfig {
    pub fn lambda(&self) -> f64 {
        self.objective.lambda()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.batch_size == 0 || self.finetune_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.lr_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return bad("learning rates must be positive".into());
        }
        if self.lr_grid.is_empty() {
            return bad("lr_grid must not be empty".into());
        }
        if !in_set(self.pretrain_fraction, &PRETRAIN_FRACTIONS) {
            return bad(format!("pretrain_fraction {} not in {PRETRAIN_FRACTIONS:?}", self.pretrain_fraction));
        }
        if !in_set(self.finetune_fraction, &FINETUNE_FRACTIONS) {
            return bad(format!("finetune_fraction {} not in {FINETUNE_FRACTIONS:?}", self.finetune_fraction));
        }
        if !(1..=2).contains(&self.n_fc) {
            return bad(format!("n_fc must be 1 or 2, got {}", self.n_fc));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction {} outside (0, 1)", self.validation_fraction));
        }
        Ok(())
    }
}

/// Trainable parameters of a classifier under `policy`.
pub fn apply_freeze_policy(model: &Model, policy: FreezePolicy) -> Result<Trainable> {
    if model.head_config.is_none() {
        return Err(Error::Parameter("freeze policies apply to models with a classification head".into()));
    }
    let last = format!("temporal.s4.{}.", model.config.n_s4.saturating_sub(1));
    Ok(Trainable::from_fn(&model.store, |name| {
        let head = name.starts_with("head.");
        match policy {
            FreezePolicy::LinearProbe => head,
            FreezePolicy::LastS4 => head || (model.config.n_s4 > 0 && name.starts_with(&last)),
            FreezePolicy::AllS4 => head || name.starts_with("temporal."),
            FreezePolicy::FullyTrainable => !(name.starts_with("decoder.") || name.starts_with("projector.")),
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{HeadConfig, ModelConfig};

    #[test]
    fn policy_names_round_trip() {
        for p in FreezePolicy::ALL {
            assert_eq!(p.name().parse::<FreezePolicy>().unwrap(), p);
        }
        assert!(matches!("everything".parse::<FreezePolicy>(), Err(Error::Parameter(_))));
    }

    #[test]
    fn trainable_sets() {
        let m = Model::classifier(ModelConfig::tiny(), HeadConfig::new(1, 2), 0).unwrap();
        let probe = apply_freeze_policy(&m, FreezePolicy::LinearProbe).unwrap();
        assert_eq!(m.count_trainable(&probe), 8 * 2 + 2);
        let last = apply_freeze_policy(&m, FreezePolicy::LastS4).unwrap();
        let s4_1 = m.store.numel_with_prefix("temporal.s4.1.");
        assert_eq!(m.count_trainable(&last), 18 + s4_1);
        let all = apply_freeze_policy(&m, FreezePolicy::AllS4).unwrap();
        assert_eq!(m.count_trainable(&all), 18 + m.store.numel_with_prefix("temporal."));
        let full = apply_freeze_policy(&m, FreezePolicy::FullyTrainable).unwrap();
        assert_eq!(m.count_trainable(&full), m.store.numel());
        assert_eq!(
            m.count_trainable(&full) - m.count_trainable(&all),
            m.count_parameters().breakdown["encoder"]
        );
        let pre = Model::pretraining(ModelConfig::tiny(), 0).unwrap();
        assert!(apply_freeze_policy(&pre, FreezePolicy::LinearProbe).is_err());
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let c = TrainConfig { finetune_fraction: 0.7, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { pretrain_fraction: 0.01, ..TrainConfig::default() };
        c.validate().unwrap();
        assert_eq!(Objective::Vanilla.lambda(), 0.0);
        assert_eq!(Objective::Knowledge.lambda(), 5.0);
        assert_eq!(Objective::Knowledge.label(), "knowledge-s4");
    }
}
