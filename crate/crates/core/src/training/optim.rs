use serde::{Deserialize, Serialize};

use crate::nn::{Grads, ParamId, ParamStore, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with constant learning rate. Moment buffers exist only for tensors
/// that have been updated.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Adam { config, step: 0, m: vec![Vec::new(); store.len()], v: vec![Vec::new(); store.len()] }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, trainable: &Trainable) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in trainable.ids().collect::<Vec<ParamId>>() {
            let n = store.get(id).len();
            let g = grads.dense(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            if m.is_empty() {
                m.resize(n, 0.0);
                v.resize(n, 0.0);
            }
            let p = store.get_mut(id);
            for i in 0..n {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        let m = &self.m[id.0];
        (!m.is_empty()).then(|| (m.as_slice(), self.v[id.0].as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let a = store.add("a", vec![3], vec![1.0, 2.0, 3.0]);
        let b = store.add("b", vec![1], vec![5.0]);
        let tr = Trainable::from_fn(&store, |n| n == "a");
        let mut g = Grads::zeros(&store);
        g.slot(a).copy_from_slice(&[0.5, -2.0, 0.0]);
        g.slot(b)[0] = 1.0;
        let mut opt = Adam::new(&store, AdamConfig::with_lr(0.1));
        opt.update(&mut store, &g, &tr);
        let p = store.get(a);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 2.1).abs() < 1e-6);
        assert_eq!(p[2], 3.0);
        assert_eq!(store.get(b), &[5.0]);
        assert!(opt.moments(b).is_none());
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", vec![2], vec![3.0, -4.0]);
        let tr = Trainable::all(&store);
        let mut opt = Adam::new(&store, AdamConfig::with_lr(0.05));
        for _ in 0..2000 {
            let mut g = Grads::zeros(&store);
            let p = store.get(x).to_vec();
            g.slot(x).copy_from_slice(&[2.0 * (p[0] - 1.0), 2.0 * (p[1] + 2.0)]);
            opt.update(&mut store, &g, &tr);
        }
        let p = store.get(x);
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 2.0).abs() < 1e-3);
    }
}
