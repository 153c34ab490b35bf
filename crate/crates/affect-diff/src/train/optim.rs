//! Decoupled-weight-decay adaptive-moment optimizer and gradient clipping.

use ndarray::ArrayD;

use crate::autodiff::{Gradients, ParamStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Dense gradient buffers aligned with a parameter store.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub grads: Vec<ArrayD<f64>>,
}

impl DenseGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        DenseGrads {
            grads: store
                .ids()
                .map(|id| ArrayD::zeros(store.value(id).raw_dim()))
                .collect(),
        }
    }

    /// Accumulate `scale * g` (missing gradients count as zero).
    pub fn accumulate(&mut self, store: &ParamStore, g: &Gradients, scale: f64) {
        for (slot, id) in self.grads.iter_mut().zip(store.ids()) {
            if let Some(gv) = g.get(id) {
                slot.zip_mut_with(gv, |s, &v| *s += scale * v);
            }
        }
    }

    /// Global L2 norm over all buffers.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale everything down so the global norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.grads.iter_mut() {
                g.mapv_inplace(|v| v * s);
            }
        }
        norm
    }
}

/// AdamW: adaptive moments with weight decay applied directly to the
/// parameters (not through the gradient).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub weight_decay: f64,
    pub step_count: usize,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            step_count: 0,
            m: store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect(),
            v: store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &DenseGrads, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (pi, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads.grads[pi];
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            m.zip_mut_with(g, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
            v.zip_mut_with(g, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            let p = store.value_mut(id);
            // decoupled decay
            if self.weight_decay != 0.0 {
                p.mapv_inplace(|x| x - lr * self.weight_decay * x);
            }
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mh = m / bc1;
                let vh = v / bc2;
                *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
            });
        }
    }

    /// Moment tensors for checkpointing, named per parameter.
    pub fn moments(&self) -> (&[ArrayD<f64>], &[ArrayD<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>, step_count: usize) {
        self.m = m;
        self.v = v;
        self.step_count = step_count;
    }
}

/// Cosine decay from `lr` to 0 over `horizon` epochs (flat 0 afterwards).
pub fn cosine_lr(base_lr: f64, epoch: usize, horizon: usize) -> f64 {
    let e = epoch.min(horizon) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * e / horizon as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, ParamGroup};
    use ndarray::IxDyn;

    #[test]
    fn adamw_reduces_a_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", ArrayD::from_elem(IxDyn(&[2]), 5.0), ParamGroup::Backbone);
        let mut opt = AdamW::new(&ps, 0.0);
        for _ in 0..400 {
            let mut g = Graph::new(&ps);
            let x = g.param(id);
            let sq = g.square(x);
            let loss = g.mean_all(sq);
            let grads = g.backward(loss);
            let mut dense = DenseGrads::zeros_like(&ps);
            dense.accumulate(&ps, &grads, 1.0);
            opt.step(&mut ps, &dense, 0.05);
        }
        assert!(ps.value(id).iter().all(|v| v.abs() < 0.1));
    }

    #[test]
    fn clip_caps_global_norm() {
        let mut ps = ParamStore::new();
        ps.add("a", ArrayD::zeros(IxDyn(&[3])), ParamGroup::Backbone);
        let mut d = DenseGrads::zeros_like(&ps);
        d.grads[0] = ArrayD::from_elem(IxDyn(&[3]), 10.0);
        let pre = d.clip_global_norm(1.0);
        assert!((pre - (300f64).sqrt()).abs() < 1e-12);
        let post = d.global_norm();
        assert!(post <= 1.0 + 1e-6);
        assert!((post - 1.0).abs() < 1e-9);
        // below the cap: untouched
        let mut d2 = DenseGrads::zeros_like(&ps);
        d2.grads[0] = ArrayD::from_elem(IxDyn(&[3]), 0.1);
        let pre2 = d2.clip_global_norm(1.0);
        assert!((d2.global_norm() - pre2).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_params_without_gradient() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", ArrayD::from_elem(IxDyn(&[1]), 1.0), ParamGroup::Backbone);
        let mut opt = AdamW::new(&ps, 0.1);
        let dense = DenseGrads::zeros_like(&ps);
        opt.step(&mut ps, &dense, 0.5);
        let v = ps.value(id)[[0]];
        assert!((v - (1.0 - 0.5 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_anchors() {
        let lr = 5e-4;
        assert_eq!(cosine_lr(lr, 0, 100), lr);
        assert!((cosine_lr(lr, 50, 100) - lr * 0.5).abs() < 1e-18);
        assert!(cosine_lr(lr, 100, 100).abs() < 1e-18);
        assert!(cosine_lr(lr, 150, 100).abs() < 1e-18, "flat zero past the horizon");
        // strictly decreasing on the way down
        for e in 1..=100 {
            assert!(cosine_lr(lr, e, 100) < cosine_lr(lr, e - 1, 100));
        }
    }
}
