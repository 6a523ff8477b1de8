use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};

/// Per-parameter gradient accumulator.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<ArrayD<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: store.ids().map(|id| ArrayD::zeros(IxDyn(store.value(id).shape()))).collect() }
    }

    pub fn accumulate(&mut self, grads: &[(ParamId, ArrayD<f64>)]) {
        for (id, g) in grads {
            self.grads[id.0] += g;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.grads[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescale so the global norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / (norm + 1e-12));
        }
        norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// AdamW with decoupled weight decay applied only to parameters flagged for it.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| ArrayD::zeros(IxDyn(store.value(id).shape()))).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let decay = store.decays(id);
            let g = grads.get(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.value_mut(id);
            let (ps, gs) = (p.as_slice_mut().expect("contiguous"), g.as_slice().expect("contiguous"));
            let ms = m.as_slice_mut().expect("contiguous");
            let vs = v.as_slice_mut().expect("contiguous");
            for i in 0..ps.len() {
                if decay {
                    ps[i] -= lr * c.weight_decay * ps[i];
                }
                ms[i] = c.beta1 * ms[i] + (1.0 - c.beta1) * gs[i];
                vs[i] = c.beta2 * vs[i] + (1.0 - c.beta2) * gs[i] * gs[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_bounds_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", ArrayD::zeros(IxDyn(&[3])), false);
        let b = store.add("b", ArrayD::zeros(IxDyn(&[2])), false);
        let mut buf = GradBuffer::zeros_like(&store);
        buf.accumulate(&[
            (a, ArrayD::from_shape_vec(IxDyn(&[3]), vec![3.0, 4.0, 12.0]).unwrap()),
            (b, ArrayD::from_shape_vec(IxDyn(&[2]), vec![-7.0, 1.0]).unwrap()),
        ]);
        let pre = buf.clip_global_norm(5.0);
        assert!(pre > 5.0);
        assert!(buf.global_norm() <= 5.0 + 1e-6);
    }

    #[test]
    fn decay_only_touches_flagged_params() {
        let mut store = ParamStore::new();
        store.add("w", ArrayD::from_elem(IxDyn(&[2]), 1.0), true);
        store.add("b", ArrayD::from_elem(IxDyn(&[2]), 1.0), false);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let grads = GradBuffer::zeros_like(&store);
        opt.update(&mut store, &grads, 0.1);
        assert!((store.value(ParamId(0))[0] - (1.0 - 0.1 * 0.05)).abs() < 1e-12);
        assert_eq!(store.value(ParamId(1))[0], 1.0);
    }
}
