use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::optim::{Adam, AdamConfig};
use super::step::{classification_gradients, predict_logits};
use super::{apply_freeze_policy, FreezePolicy, TrainConfig};
use crate::corpus::{subset_fraction, SplitPlan};
use crate::network::{HeadConfig, Model, ModelConfig};
use crate::nn::{mix_seed, Trainable};
use crate::objectives::{argmax_rows, cross_entropy};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub subject: String,
    pub label: usize,
    /// `[channels × chunk_len]`.
    pub data: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub n_classes: usize,
    pub trials: Vec<Trial>,
}

impl TaskDataset {
    pub fn subjects(&self) -> Vec<String> {
        self.trials.iter().map(|t| t.subject.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials.is_empty() {
            return Err(Error::Data(format!("task {} has no trials", self.name)));
        }
        if self.n_classes < 2 {
            return Err(Error::Parameter("a task needs at least two classes".into()));
        }
        if let Some(t) = self.trials.iter().find(|t| t.label >= self.n_classes) {
            return Err(Error::Data(format!("label {} out of range for {} classes", t.label, self.n_classes)));
        }
        Ok(())
    }
}

/// Where fine-tuning starts from.
#[derive(Debug, Clone, Copy)]
pub enum Backbone<'a> {
    Pretrained(&'a Checkpoint),
    Scratch(&'a ModelConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub accuracy: f64,
    pub n_eval: usize,
    pub lr: f64,
    pub epochs: usize,
    pub confusion: Vec<Vec<usize>>,
    pub eval_subjects: Vec<String>,
    /// Curve of the final retraining run.
    pub curve: Vec<EpochRecord>,
}

pub fn score(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(Error::Data(format!("class index out of range: {p}/{l}")));
        }
        confusion[l][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    Ok(Evaluation { accuracy: correct as f64 / labels.len() as f64, confusion, n: labels.len() })
}

/// Evaluation-mode accuracy of a classifier on raw trials.
pub fn evaluate(model: &Model, trials: &[Trial]) -> Result<Evaluation> {
    let n_classes = model
        .head_config
        .map(|h| h.n_classes)
        .ok_or_else(|| Error::Parameter("model has no classification head".into()))?;
    if trials.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let inputs: Vec<Array2<f64>> = trials.iter().map(|t| t.data.mapv(f64::from)).collect();
    let refs: Vec<&Array2<f64>> = inputs.iter().collect();
    let prep = model.prepare();
    let preds = predictions(model, &prep, 0, &refs)?;
    let labels: Vec<usize> = trials.iter().map(|t| t.label).collect();
    score(&preds, &labels, n_classes)
}

fn predictions(model: &Model, prep: &crate::network::Prepared, start: usize, inputs: &[&Array2<f64>]) -> Result<Vec<usize>> {
    let logits = predict_logits(model, prep, start, inputs)?;
    let views: Vec<_> = logits.iter().map(|l| l.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
    Ok(argmax_rows(stacked.view()))
}

fn subject_hash(subjects: &[String]) -> String {
    let mut sorted = subjects.to_vec();
    sorted.sort();
    let mut h = Sha256::new();
    for s in sorted {
        h.update(s.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

struct Fitted {
    curve: Vec<EpochRecord>,
    best_epoch: usize,
    best_val: f64,
    best_loss: f64,
}

struct FitSpec<'a> {
    start: usize,
    feats: &'a [Array2<f64>],
    labels: &'a [usize],
    trainable: &'a Trainable,
    batch: usize,
    seed: u64,
}

fn fit(
    model: &mut Model,
    spec: &FitSpec,
    train: &[usize],
    val: Option<&[usize]>,
    lr: f64,
    epochs: usize,
    patience: usize,
) -> Result<Fitted> {
    let n_classes = model.head_config.map_or(0, |h| h.n_classes);
    let mut opt = Adam::new(&model.store, AdamConfig::with_lr(lr));
    let mut curve = Vec::new();
    let (mut best_val, mut best_loss, mut best_epoch, mut since) = (f64::NEG_INFINITY, f64::INFINITY, 0, 0);
    let mut order = train.to_vec();
    for epoch in 1..=epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, epoch as u64])));
        let mut loss_sum = 0.0;
        for (k, batch) in order.chunks(spec.batch).enumerate() {
            let xs: Vec<&Array2<f64>> = batch.iter().map(|&i| &spec.feats[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| spec.labels[i]).collect();
            let prep = model.prepare();
            let step_seed = mix_seed(&[spec.seed, epoch as u64, k as u64]);
            let (loss, grads) =
                classification_gradients(model, &prep, spec.start, &xs, &ys, spec.trainable, Some(step_seed))?;
            if !loss.is_finite() {
                return Err(Error::Divergence { iteration: epoch, value: loss });
            }
            loss_sum += loss * batch.len() as f64;
            opt.update(&mut model.store, &grads, spec.trainable);
        }
        let validation = match val {
            Some(v) if !v.is_empty() => {
                let prep = model.prepare();
                let xs: Vec<&Array2<f64>> = v.iter().map(|&i| &spec.feats[i]).collect();
                let ys: Vec<usize> = v.iter().map(|&i| spec.labels[i]).collect();
                let logits = predict_logits(model, &prep, spec.start, &xs)?;
                let mut loss = 0.0;
                for (l, &y) in logits.iter().zip(&ys) {
                    loss += cross_entropy(l.view(), y)?.0;
                }
                let views: Vec<_> = logits.iter().map(|l| l.view()).collect();
                let stacked = ndarray::stack(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
                let acc = score(&argmax_rows(stacked.view()), &ys, n_classes)?.accuracy;
                Some((acc, loss / ys.len() as f64))
            }
            _ => None,
        };
        curve.push(EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_accuracy: validation.map(|v| v.0),
        });
        if let Some((acc, loss)) = validation {
            // Accuracy decides; validation loss breaks ties on a plateau.
            if acc > best_val || (acc == best_val && loss < best_loss) {
                best_val = acc;
                best_loss = loss;
                best_epoch = epoch;
                since = 0;
            } else {
                since += 1;
                if since >= patience {
                    break;
                }
            }
        }
    }
    if val.is_none() {
        best_epoch = epochs;
    }
    Ok(Fitted { curve, best_epoch: best_epoch.max(1), best_val, best_loss })
}

/// Splits `train` into inner training and validation indices, by subject
/// when at least two subjects are present.
fn inner_split(train: &[usize], trials: &[Trial], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects: Vec<&str> =
        train.iter().map(|&i| trials[i].subject.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    if subjects.len() >= 2 {
        subjects.shuffle(&mut rng);
        let n_val = ((subjects.len() as f64 * fraction).round() as usize).clamp(1, subjects.len() - 1);
        let val: BTreeSet<&str> = subjects[..n_val].iter().copied().collect();
        let (v, t): (Vec<usize>, Vec<usize>) = train.iter().partition(|&&i| val.contains(trials[i].subject.as_str()));
        (t, v)
    } else {
        let mut idx = train.to_vec();
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len().saturating_sub(1).max(1));
        let val = idx[..n_val].to_vec();
        let mut rest = idx[n_val..].to_vec();
        rest.sort_unstable();
        (rest, val)
    }
}

/// Cross-validated fine-tuning. Returns one result per fold of `split`.
pub fn finetune(backbone: Backbone, data: &TaskDataset, split: &SplitPlan, cfg: &TrainConfig) -> Result<Vec<FoldResult>> {
    cfg.validate()?;
    data.validate()?;
    let head = HeadConfig::new(cfg.n_fc, data.n_classes);
    let base = match backbone {
        Backbone::Pretrained(ck) => {
            let mut m = Model::classifier(ck.model.config.clone(), head, cfg.seed)?;
            m.load_matching(&ck.model.store)?;
            m
        }
        Backbone::Scratch(config) => {
            if cfg.freeze_policy != FreezePolicy::FullyTrainable {
                return Err(Error::Parameter(format!(
                    "freeze policy {} needs a pre-trained checkpoint",
                    cfg.freeze_policy
                )));
            }
            Model::classifier(config.clone(), head, cfg.seed)?
        }
    };
    let want = (base.config.in_channels, base.config.chunk_len);
    if let Some(t) = data.trials.iter().find(|t| t.data.dim() != want) {
        return Err(Error::shape(format!("trials must be {want:?}, found {:?}", t.data.dim())));
    }
    let trainable = apply_freeze_policy(&base, cfg.freeze_policy)?;
    let start = base.first_trainable_stage(&trainable);

    // Stages below `start` are frozen, so their outputs are computed once.
    let prep = base.prepare();
    let feats: Vec<Array2<f64>> = data
        .trials
        .par_iter()
        .map(|t| base.features_sample(&prep, t.data.mapv(f64::from).view(), start))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = data.trials.iter().map(|t| t.label).collect();
    drop(prep);

    let mut results = Vec::new();
    for fold in 0..split.n_folds() {
        let eval_subjects = split.eval_subjects(fold);
        let train_subjects = split.train_subjects(fold);
        let eval_set: BTreeSet<&String> = eval_subjects.iter().collect();
        if train_subjects.iter().any(|s| eval_set.contains(s)) || subject_hash(&eval_subjects) == subject_hash(&train_subjects) {
            return Err(Error::Split(format!("fold {fold}: evaluation subjects leak into training")));
        }
        let train_set: BTreeSet<&String> = train_subjects.iter().collect();
        let all_train: Vec<usize> = (0..data.trials.len()).filter(|&i| train_set.contains(&data.trials[i].subject)).collect();
        let eval_idx: Vec<usize> = (0..data.trials.len()).filter(|&i| eval_set.contains(&data.trials[i].subject)).collect();
        if eval_idx.is_empty() {
            return Err(Error::Data(format!("fold {fold}: no evaluation trials")));
        }
        let fold_seed = mix_seed(&[cfg.seed, 21, fold as u64]);
        let train_idx = subset_fraction(&all_train, cfg.finetune_fraction, fold_seed)?;
        for c in 0..data.n_classes {
            if !train_idx.iter().any(|&i| labels[i] == c) {
                return Err(Error::Split(format!("fold {fold}: class {c} absent from training trials")));
            }
        }

        let (inner_train, inner_val) = inner_split(&train_idx, &data.trials, cfg.validation_fraction, fold_seed);
        let mut best: Option<(f64, f64, f64, usize)> = None;
        for (k, &lr) in cfg.lr_grid.iter().enumerate() {
            let mut model = base.clone();
            let spec = FitSpec {
                start,
                feats: &feats,
                labels: &labels,
                trainable: &trainable,
                batch: cfg.finetune_batch_size,
                seed: mix_seed(&[fold_seed, 22, k as u64]),
            };
            let fitted = fit(&mut model, &spec, &inner_train, Some(&inner_val), lr, cfg.max_epochs, cfg.patience)?;
            let better = best.map_or(true, |(acc, loss, _, _)| {
                fitted.best_val > acc || (fitted.best_val == acc && fitted.best_loss < loss)
            });
            if better {
                best = Some((fitted.best_val, fitted.best_loss, lr, fitted.best_epoch));
            }
        }
        let (_, _, lr, epochs) = best.expect("non-empty lr grid");
        let mut model = base.clone();
        let spec = FitSpec {
            start,
            feats: &feats,
            labels: &labels,
            trainable: &trainable,
            batch: cfg.finetune_batch_size,
            seed: mix_seed(&[fold_seed, 23]),
        };
        let fitted = fit(&mut model, &spec, &train_idx, None, lr, epochs, cfg.patience)?;
        let prep = model.prepare();
        let xs: Vec<&Array2<f64>> = eval_idx.iter().map(|&i| &feats[i]).collect();
        let ys: Vec<usize> = eval_idx.iter().map(|&i| labels[i]).collect();
        let ev = score(&predictions(&model, &prep, start, &xs)?, &ys, data.n_classes)?;
        results.push(FoldResult {
            fold,
            accuracy: ev.accuracy,
            n_eval: ev.n,
            lr,
            epochs,
            confusion: ev.confusion,
            eval_subjects,
            curve: fitted.curve,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant_predictors() {
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        assert_eq!(score(&labels, &labels, 4).unwrap().accuracy, 1.0);
        let ev = score(&[1; 8], &labels, 4).unwrap();
        assert_eq!(ev.accuracy, 0.25);
        for (c, row) in ev.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&l| l == c).count());
        }
        let trace: usize = (0..4).map(|c| ev.confusion[c][c]).sum();
        assert_eq!(trace as f64 / ev.n as f64, ev.accuracy);
        assert!(matches!(score(&[], &[], 2), Err(Error::Data(_))));
    }

    #[test]
    fn inner_split_is_subject_wise() {
        let trials: Vec<Trial> = (0..20)
            .map(|i| Trial { subject: format!("s{}", i % 5), label: i % 2, data: Array2::zeros((1, 1)) })
            .collect();
        let idx: Vec<usize> = (0..20).collect();
        let (t, v) = inner_split(&idx, &trials, 0.2, 1);
        assert_eq!(t.len() + v.len(), 20);
        let vs: BTreeSet<&str> = v.iter().map(|&i| trials[i].subject.as_str()).collect();
        assert_eq!(vs.len(), 1);
        assert!(t.iter().all(|&i| !vs.contains(trials[i].subject.as_str())));
        let single: Vec<Trial> = trials.iter().map(|t| Trial { subject: "only".into(), ..t.clone() }).collect();
        let (t, v) = inner_split(&idx, &single, 0.2, 1);
        assert_eq!((t.len(), v.len()), (16, 4));
    }
}
