//! Adaptive-moment optimizer.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::Arr;

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    /// GAN training typically wants beta1 = 0.5.
    pub fn with_betas(lr: f32, beta1: f32, beta2: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update from named gradients. Parameters without a gradient
    /// this step are left untouched (their moments do not advance either).
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Arr>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(grad.raw_dim()));
            *m = &*m * self.beta1 + grad * (1.0 - self.beta1);
            *v = &*v * self.beta2 + &(grad * grad) * (1.0 - self.beta2);
            let p = store.get_mut(name);
            let mhat = &*m / bc1;
            let vhat = &*v / bc2;
            let upd = mhat / (vhat.mapv(f32::sqrt) + self.eps) * self.lr;
            *p -= &upd;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn converges_on_quadratic() {
        // minimize (x - 3)^2
        let mut store = ParamStore::new();
        store.insert("x", ArrayD::from_elem(IxDyn(&[1]), 0.0f32));
        let mut opt = Adam::new(0.1);
        for _ in 0..400 {
            let x = store.get("x")[[0]];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), ArrayD::from_elem(IxDyn(&[1]), 2.0 * (x - 3.0)));
            opt.step(&mut store, &grads);
        }
        assert!((store.get("x")[[0]] - 3.0).abs() < 1e-2);
    }
}
