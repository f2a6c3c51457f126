use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::network::{Model, OutputGrads, Outputs, Prepared};
use crate::nn::{mix_seed, Grads, Trainable};
use crate::objectives::{channel_cosine, cross_entropy, l1_with_grad, LossReport};
use crate::{Error, Result};

/// Samples per gradient accumulation group. Groups are reduced in index
/// order, so results do not depend on the thread count.
pub const GROUP: usize = 4;

fn reduce<T: Send>(
    n: usize,
    store: &crate::nn::ParamStore,
    per_sample: impl Fn(usize, &mut Grads) -> Result<T> + Sync,
) -> Result<(Vec<T>, Grads)> {
    let groups: Vec<(Vec<T>, Grads)> = (0..n.div_ceil(GROUP))
        .into_par_iter()
        .map(|g| {
            let mut grads = Grads::zeros(store);
            let mut vals = Vec::new();
            for i in g * GROUP..((g + 1) * GROUP).min(n) {
                vals.push(per_sample(i, &mut grads)?);
            }
            Ok((vals, grads))
        })
        .collect::<Result<_>>()?;
    let mut total = Grads::zeros(store);
    let mut all = Vec::with_capacity(n);
    for (vals, g) in groups {
        total.accumulate(&g);
        all.extend(vals);
    }
    Ok((all, total))
}

/// Combined pretext loss of a batch and its parameter gradients.
///
/// `targets` hold ground-truth log band powers as `[channels·bands × windows]`.
/// `step_seed` enables dropout.
pub fn pretext_gradients(
    model: &Model,
    prep: &Prepared,
    inputs: &[Array2<f64>],
    targets: &[Array2<f64>],
    lambda: f64,
    trainable: &Trainable,
    step_seed: Option<u64>,
) -> Result<(LossReport, Grads)> {
    let n = inputs.len();
    if n == 0 || targets.len() != n {
        return Err(Error::shape(format!("{n} inputs with {} targets", targets.len())));
    }
    let b = n as f64;
    let (vals, grads) = reduce(n, &model.store, |i, grads| {
        let seed = step_seed.map(|s| mix_seed(&[s, i as u64]));
        let trace = model.forward_sample(prep, 0, inputs[i].view(), seed, Outputs::PRETEXT)?;
        let (cos, dcos) = channel_cosine(inputs[i].view(), trace.recon.as_ref().expect("recon").view())?;
        let (l1, sign) = l1_with_grad(targets[i].view(), trace.power.as_ref().expect("power").view())?;
        let dout = OutputGrads {
            recon: Some(dcos * (-1.0 / b)),
            power: Some(sign * (lambda / b)),
            logits: None,
        };
        model.backward_sample(prep, &trace, &dout, trainable, grads)?;
        Ok((cos, l1))
    })?;
    let cos_loss = 1.0 - vals.iter().map(|v| v.0).sum::<f64>() / b;
    let knowledge = vals.iter().map(|v| v.1).sum::<f64>() / b;
    Ok((LossReport::new(cos_loss, knowledge, lambda), grads))
}

/// Mean cross-entropy of a batch entering the model at stage `start`.
pub fn classification_gradients(
    model: &Model,
    prep: &Prepared,
    start: usize,
    inputs: &[&Array2<f64>],
    labels: &[usize],
    trainable: &Trainable,
    step_seed: Option<u64>,
) -> Result<(f64, Grads)> {
    let n = inputs.len();
    if n == 0 || labels.len() != n {
        return Err(Error::shape(format!("{n} inputs with {} labels", labels.len())));
    }
    let b = n as f64;
    let (losses, grads) = reduce(n, &model.store, |i, grads| {
        let seed = step_seed.map(|s| mix_seed(&[s, i as u64]));
        let trace = model.forward_sample(prep, start, inputs[i].view(), seed, Outputs::LOGITS)?;
        let (loss, dl) = cross_entropy(trace.logits.as_ref().expect("logits").view(), labels[i])?;
        let dout = OutputGrads { logits: Some(dl / b), ..OutputGrads::default() };
        model.backward_sample(prep, &trace, &dout, trainable, grads)?;
        Ok(loss)
    })?;
    Ok((losses.iter().sum::<f64>() / b, grads))
}

/// Evaluation-mode logits for inputs entering at stage `start`.
pub fn predict_logits(model: &Model, prep: &Prepared, start: usize, inputs: &[&Array2<f64>]) -> Result<Vec<Array1<f64>>> {
    inputs
        .par_iter()
        .map(|x| {
            let t = model.forward_sample(prep, start, x.view(), None, Outputs::LOGITS)?;
            Ok(t.logits.expect("logits"))
        })
        .collect()
}
