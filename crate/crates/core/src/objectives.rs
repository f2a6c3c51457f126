//! Reconstruction, band-power and classification losses with gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 5.0;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cos_sim_loss: f64,
    pub knowledge_loss: f64,
    pub combined: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn new(cos_sim_loss: f64, knowledge_loss: f64, lambda: f64) -> Self {
        LossReport { cos_sim_loss, knowledge_loss, combined: cos_sim_loss + lambda * knowledge_loss, lambda }
    }
}

/// Mean cosine similarity over the channels of one sample, and its gradient
/// with respect to `recon`.
pub fn channel_cosine(input: ArrayView2<f64>, recon: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if input.dim() != recon.dim() {
        return Err(Error::shape(format!("input {:?} vs reconstruction {:?}", input.dim(), recon.dim())));
    }
    let c = input.nrows() as f64;
    let mut grad = Array2::<f64>::zeros(recon.dim());
    let mut total = 0.0;
    for (i, (x, r)) in input.rows().into_iter().zip(recon.rows()).enumerate() {
        let nx = x.dot(&x).sqrt();
        if nx == 0.0 {
            return Err(Error::DegenerateInput(format!("input channel {i} has zero norm")));
        }
        let nr = r.dot(&r).sqrt().max(NORM_FLOOR);
        let dot = x.dot(&r);
        let cos = dot / (nx * nr);
        total += cos;
        Zip::from(grad.row_mut(i)).and(&x).and(&r).for_each(|g, &xv, &rv| {
            *g = (xv / (nx * nr) - cos * rv / (nr * nr)) / c;
        });
    }
    Ok((total / c, grad))
}

/// `1 − mean` cosine similarity over batch and channels of `[B × C × T]` inputs.
pub fn cosine_reconstruction_loss(input: ArrayView3<f64>, recon: ArrayView3<f64>) -> Result<f64> {
    if input.dim() != recon.dim() || input.shape()[0] == 0 {
        return Err(Error::shape(format!("input {:?} vs reconstruction {:?}", input.dim(), recon.dim())));
    }
    let mut sum = 0.0;
    for (x, r) in input.outer_iter().zip(recon.outer_iter()) {
        sum += cosine_mean(x, r)?;
    }
    Ok(1.0 - sum / input.shape()[0] as f64)
}

fn cosine_mean(input: ArrayView2<f64>, recon: ArrayView2<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (i, (x, r)) in input.rows().into_iter().zip(recon.rows()).enumerate() {
        let nx = x.dot(&x).sqrt();
        if nx == 0.0 {
            return Err(Error::DegenerateInput(format!("input channel {i} has zero norm")));
        }
        let nr = r.dot(&r).sqrt().max(NORM_FLOOR);
        total += x.dot(&r) / (nx * nr);
    }
    Ok(total / input.nrows() as f64)
}

/// L1 distance of one sample's band powers and its subgradient with respect
/// to `estimated` (zero where they agree).
pub fn l1_with_grad<D: ndarray::Dimension>(
    truth: ndarray::ArrayView<f64, D>,
    estimated: ndarray::ArrayView<f64, D>,
) -> Result<(f64, ndarray::Array<f64, D>)> {
    if truth.shape() != estimated.shape() {
        return Err(Error::shape(format!("band powers {:?} vs {:?}", truth.shape(), estimated.shape())));
    }
    let mut loss = 0.0;
    let grad = Zip::from(&truth).and(&estimated).map_collect(|&t, &e| {
        loss += (e - t).abs();
        if e > t {
            1.0
        } else if e < t {
            -1.0
        } else {
            0.0
        }
    });
    Ok((loss, grad))
}

/// Sum of absolute differences over channels, bands and windows, averaged
/// over the batch. Inputs are `[B × channels × bands × windows]`.
pub fn knowledge_loss(truth: ArrayView4<f64>, estimated: ArrayView4<f64>) -> Result<f64> {
    if truth.dim() != estimated.dim() || truth.shape()[0] == 0 {
        return Err(Error::shape(format!("band powers {:?} vs {:?}", truth.dim(), estimated.dim())));
    }
    let total: f64 = Zip::from(&truth).and(&estimated).fold(0.0, |acc, &a, &b| acc + (a - b).abs());
    Ok(total / truth.shape()[0] as f64)
}

pub fn combined_loss(
    input: ArrayView3<f64>,
    recon: ArrayView3<f64>,
    truth: ArrayView4<f64>,
    estimated: ArrayView4<f64>,
    lambda: f64,
) -> Result<LossReport> {
    if truth.shape()[0] != input.shape()[0] {
        return Err(Error::shape("signal and band-power batch sizes differ"));
    }
    Ok(LossReport::new(
        cosine_reconstruction_loss(input, recon)?,
        knowledge_loss(truth, estimated)?,
        lambda,
    ))
}

/// Softmax cross-entropy of one sample and its gradient with respect to the logits.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    if label >= logits.len() {
        return Err(Error::Parameter(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let z = exp.sum();
    let mut grad = exp / z;
    let loss = -(grad[label].ln());
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Index of the largest logit per row.
pub fn argmax_rows(logits: ArrayView2<f64>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn cosine_reference_values() {
        let x = random3((2, 19, 64), 1);
        assert_eq!(cosine_reconstruction_loss(x.view(), x.view()).unwrap().abs() < 1e-15, true);
        let neg = -&x;
        assert!((cosine_reconstruction_loss(x.view(), neg.view()).unwrap() - 2.0).abs() < 1e-15);
        let mut a = Array3::<f64>::zeros((1, 2, 4));
        let mut b = Array3::<f64>::zeros((1, 2, 4));
        a[[0, 0, 0]] = 1.0;
        b[[0, 0, 1]] = 3.0;
        a[[0, 1, 2]] = -2.0;
        b[[0, 1, 3]] = 0.5;
        assert_eq!(cosine_reconstruction_loss(a.view(), b.view()).unwrap(), 1.0);
    }

    #[test]
    fn zero_input_channel_is_rejected() {
        let mut x = random3((1, 3, 8), 2);
        x.slice_mut(ndarray::s![0, 1, ..]).fill(0.0);
        let r = random3((1, 3, 8), 3);
        assert!(matches!(cosine_reconstruction_loss(x.view(), r.view()), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn knowledge_reference_values() {
        let p = random4((1, 19, 5, 15), 4);
        assert_eq!(knowledge_loss(p.view(), p.view()).unwrap(), 0.0);
        let q = &p + 1.0;
        assert!((knowledge_loss(p.view(), q.view()).unwrap() - 1425.0).abs() < 1e-9);
        let mut r = p.clone();
        r[[0, 3, 2, 7]] += 0.5;
        assert!((knowledge_loss(p.view(), r.view()).unwrap() - 0.5).abs() < 1e-12);
        let wrong = random4((1, 19, 5, 14), 5);
        assert!(knowledge_loss(p.view(), wrong.view()).is_err());
    }

    #[test]
    fn combination_arithmetic() {
        let r = LossReport::new(1.0, 2.0, 5.0);
        assert_eq!(r.combined, 11.0);
        let x = random3((1, 2, 16), 6);
        let p = random4((1, 2, 5, 3), 7);
        let rep = combined_loss(x.view(), x.view(), p.view(), p.view(), DEFAULT_LAMBDA).unwrap();
        assert!(rep.combined.abs() < 1e-15);
    }

    #[test]
    fn cosine_gradient_matches_differences() {
        let x = random3((1, 3, 10), 8);
        let r = random3((1, 3, 10), 9);
        let (_, g) = channel_cosine(x.index_axis(Axis(0), 0), r.index_axis(Axis(0), 0)).unwrap();
        let eps = 1e-6;
        for idx in 0..30 {
            let (c, t) = (idx / 10, idx % 10);
            let mut up = r.clone();
            up[[0, c, t]] += eps;
            let mut dn = r.clone();
            dn[[0, c, t]] -= eps;
            let num = -(cosine_reconstruction_loss(x.view(), up.view()).unwrap()
                - cosine_reconstruction_loss(x.view(), dn.view()).unwrap())
                / (2.0 * eps);
            assert!((num - g[[c, t]]).abs() < 1e-8, "{num} vs {}", g[[c, t]]);
        }
    }

    #[test]
    fn lambda_scales_knowledge_gradient() {
        let t = random4((1, 2, 5, 3), 10);
        let e = random4((1, 2, 5, 3), 11);
        let (_, g) = l1_with_grad(t.view(), e.view()).unwrap();
        let lambda = DEFAULT_LAMBDA;
        let eps = 1e-7;
        for idx in 0..30 {
            let i = [0, idx / 15, (idx / 3) % 5, idx % 3];
            let f = |v: &Array4<f64>| {
                combined_loss(
                    random3((1, 2, 4), 12).view(),
                    random3((1, 2, 4), 13).view(),
                    t.view(),
                    v.view(),
                    lambda,
                )
                .unwrap()
                .combined
            };
            let mut up = e.clone();
            up[i] += eps;
            let mut dn = e.clone();
            dn[i] -= eps;
            let num = (f(&up) - f(&dn)) / (2.0 * eps);
            let want = lambda * g[i];
            assert!((num - want).abs() / want.abs() < 1e-6, "{num} vs {want}");
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = Array1::from(vec![0.3, -1.2, 2.0, 0.1]);
        let (loss, g) = cross_entropy(logits.view(), 2).unwrap();
        let p2 = 2f64.exp() / logits.mapv(f64::exp).sum();
        assert!((loss + p2.ln()).abs() < 1e-12);
        assert!(g.sum().abs() < 1e-12);
        assert!(cross_entropy(logits.view(), 4).is_err());
        assert_eq!(argmax_rows(logits.insert_axis(Axis(0)).view()), vec![2]);
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(seed in 0u64..1000, scale in 1e-3f64..1e3) {
            let x = random3((2, 3, 16), seed);
            let r = random3((2, 3, 16), seed + 1);
            let a = cosine_reconstruction_loss(x.view(), r.view()).unwrap();
            let b = cosine_reconstruction_loss(x.view(), (&r * scale).view()).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!((0.0..=2.0).contains(&a));
        }

        #[test]
        fn knowledge_is_a_metric(seed in 0u64..1000) {
            let a = random4((2, 3, 5, 2), seed);
            let b = random4((2, 3, 5, 2), seed + 1);
            let c = random4((2, 3, 5, 2), seed + 2);
            let ab = knowledge_loss(a.view(), b.view()).unwrap();
            prop_assert_eq!(ab, knowledge_loss(b.view(), a.view()).unwrap());
            let ac = knowledge_loss(a.view(), c.view()).unwrap();
            let bc = knowledge_loss(b.view(), c.view()).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
