use std::collections::BTreeMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

/// Adam with bias correction. Moment buffers are created lazily per
/// parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<ParamId, Mat>,
    v: BTreeMap<ParamId, Mat>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, &Mat)], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for &(id, g) in grads {
            let p = store.get_mut(id);
            // shapes change when a router gains a row; restart that buffer
            let fresh = |m: &Mat| m.shape() != g.shape();
            if self.m.get(&id).is_none_or(fresh) {
                self.m.insert(id, Mat::zeros(g.rows, g.cols));
                self.v.insert(id, Mat::zeros(g.rows, g.cols));
            }
            let m = self.m.get_mut(&id).expect("inserted");
            let v = self.v.get_mut(&id).expect("inserted");
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                p.data[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Mat)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|(_, g)| g.scale_assign(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::row_vector(vec![3.0, -2.0]));
        let mut opt = Adam::new();
        for _ in 0..2000 {
            let x = store.get(id).clone();
            let g = Mat::row_vector(x.data.iter().map(|v| 2.0 * (v - 1.0)).collect());
            opt.step(&mut store, &[(id, &g)], 0.01);
        }
        assert!(store.get(id).data.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::row_vector(vec![0.0, 0.0]));
        let g = Mat::row_vector(vec![5.0, -0.1]);
        Adam::new().step(&mut store, &[(id, &g)], 0.1);
        let x = &store.get(id).data;
        assert!((x[0] + 0.1).abs() < 1e-6 && (x[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![(ParamId(0), Mat::row_vector(vec![3.0, 4.0]))];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.data[0] - 0.6).abs() < 1e-12);
    }
}
