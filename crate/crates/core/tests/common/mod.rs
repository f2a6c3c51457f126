#![allow(dead_code)]

use kgs4::network::{Model, Outputs};
use kgs4::nn::{Grads, ParamStore, Trainable};
use kgs4::objectives::{channel_cosine, l1_with_grad, LossReport};
use kgs4::training::step::pretext_gradients;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random2(shape: (usize, usize), seed: u64, scale: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-scale..scale))
}

/// Combined loss computed directly from forward outputs, independent of the
/// gradient code path.
pub fn combined(model: &Model, inputs: &[Array2<f64>], targets: &[Array2<f64>], lambda: f64, seed: Option<u64>) -> f64 {
    let prep = model.prepare();
    let b = inputs.len() as f64;
    let (mut cos, mut l1) = (0.0, 0.0);
    for (i, (x, t)) in inputs.iter().zip(targets).enumerate() {
        let s = seed.map(|s| kgs4::nn::mix_seed(&[s, i as u64]));
        let tr = model.forward_sample(&prep, 0, x.view(), s, Outputs::PRETEXT).unwrap();
        cos += channel_cosine(x.view(), tr.recon.as_ref().unwrap().view()).unwrap().0;
        l1 += l1_with_grad(t.view(), tr.power.as_ref().unwrap().view()).unwrap().0;
    }
    LossReport::new(1.0 - cos / b, l1 / b, lambda).combined
}

pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Central differences for every parameter entry; relative error uses a
/// 1e-4 floor on the denominator.
pub fn gradient_check(
    model: &Model,
    inputs: &[Array2<f64>],
    targets: &[Array2<f64>],
    lambda: f64,
    seed: Option<u64>,
) -> GradCheck {
    let tr = Trainable::all(&model.store);
    let prep = model.prepare();
    let (_, grads): (LossReport, Grads) = pretext_gradients(model, &prep, inputs, targets, lambda, &tr, seed).unwrap();
    let eps = 1e-6;
    let mut out = GradCheck { max_rel: 0.0, worst: String::new(), checked: 0 };
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let analytic = grads.dense(id);
        for i in 0..analytic.len() {
            let mut m = model.clone();
            m.store.get_mut(id)[i] += eps;
            let up = combined(&m, inputs, targets, lambda, seed);
            m.store.get_mut(id)[i] -= 2.0 * eps;
            let down = combined(&m, inputs, targets, lambda, seed);
            let num = (up - down) / (2.0 * eps);
            let rel = (analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(1e-4);
            out.checked += 1;
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = format!("{}[{i}] analytic {} numeric {num}", model.store.tensor(id).name, analytic[i]);
            }
        }
    }
    out
}

pub fn param_snapshot(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
    store.tensors().iter().map(|t| (t.name.clone(), t.data.iter().map(|v| v.to_bits()).collect())).collect()
}
