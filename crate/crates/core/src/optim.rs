//! Adam optimizer with per-parameter-set learning rates, the cosine
//! annealing schedule, and deterministic parallel batch gradients.

use ndarray::ArrayD;
use rayon::prelude::*;
use std::collections::BTreeMap;

use crate::autograd::GradMap;
use crate::params::ParamStore;

/// Adam with lazily created moments: a parameter that receives no gradient
/// in a step is left untouched (its moments do not decay either), so batches
/// routed past a sub-module can never move that sub-module's weights.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
    t: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self { beta1, beta2, eps: 1e-8, m: BTreeMap::new(), v: BTreeMap::new(), t: BTreeMap::new() }
    }

    /// Apply one update. `lr_for` maps a parameter name to its learning rate.
    pub fn step<F: Fn(&str) -> f64>(&mut self, params: &mut ParamStore, grads: &GradMap, lr_for: F) {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter '{name}'"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let lr = lr_for(name);

            let ps = p.as_slice_mut().unwrap();
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            let gs = g.as_slice().unwrap();
            for i in 0..gs.len() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gs[i];
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gs[i] * gs[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine annealing from `base` to 0 over `period` epochs, evaluated per
/// epoch: lr(e) = base * 0.5 * (1 + cos(pi * e / period)).
pub fn cosine_lr(base: f64, epoch: usize, period: usize) -> f64 {
    if period == 0 {
        return base;
    }
    let e = epoch.min(period) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * e / period as f64).cos())
}

/// Mean loss and mean gradients over a batch. Per-sample work runs in
/// parallel; the reduction is sequential in sample order, so results are
/// bit-identical regardless of thread scheduling.
pub fn batch_grads<F>(n: usize, per_sample: F) -> (f64, GradMap)
where
    F: Fn(usize) -> (f64, GradMap) + Sync,
{
    assert!(n > 0);
    let results: Vec<(f64, GradMap)> = (0..n).into_par_iter().map(per_sample).collect();
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut total = GradMap::new();
    for (l, grads) in results {
        loss += l;
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    for g in total.values_mut() {
        g.mapv_inplace(|v| v * inv);
    }
    (loss * inv, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let mu = 1e-4;
        assert_eq!(cosine_lr(mu, 0, 30), mu);
        let mid = cosine_lr(mu, 15, 30);
        assert!((mid - mu / 2.0).abs() < 1e-20);
        assert!(cosine_lr(mu, 30, 30).abs() < 1e-20);
        // non-increasing within the period
        let mut last = f64::INFINITY;
        for e in 0..=30 {
            let lr = cosine_lr(mu, e, 30);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut params = ParamStore::new();
        params.insert("a.w", ArrayD::from_elem(IxDyn(&[3]), 1.25));
        let before = params.get("a.w").unwrap().clone();
        let mut grads = GradMap::new();
        grads.insert("a.w".into(), ArrayD::from_elem(IxDyn(&[3]), 0.7));
        let mut adam = Adam::new(0.9, 0.999);
        adam.step(&mut params, &grads, |_| 0.0);
        adam.step(&mut params, &grads, |_| 0.0);
        assert_eq!(params.get("a.w").unwrap(), &before);
    }

    #[test]
    fn absent_gradients_touch_nothing() {
        let mut params = ParamStore::new();
        params.insert("a.w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        params.insert("b.w", ArrayD::from_elem(IxDyn(&[2]), 2.0));
        let b_before = params.get("b.w").unwrap().clone();
        let mut grads = GradMap::new();
        grads.insert("a.w".into(), ArrayD::from_elem(IxDyn(&[2]), 0.1));
        let mut adam = Adam::new(0.9, 0.999);
        adam.step(&mut params, &grads, |_| 1e-3);
        assert_eq!(params.get("b.w").unwrap(), &b_before);
        assert_ne!(params.get("a.w").unwrap(), &ArrayD::from_elem(IxDyn(&[2]), 1.0));
    }

    #[test]
    fn batch_grads_reduction_is_deterministic() {
        let f = |i: usize| {
            let mut g = GradMap::new();
            g.insert(
                "p".into(),
                ArrayD::from_elem(IxDyn(&[4]), (i as f64 + 1.0) * 0.318309886),
            );
            ((i as f64).sin(), g)
        };
        let (l1, g1) = batch_grads(16, f);
        let (l2, g2) = batch_grads(16, f);
        assert_eq!(l1.to_bits(), l2.to_bits());
        let a = g1["p"].as_slice().unwrap();
        let b = g2["p"].as_slice().unwrap();
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
