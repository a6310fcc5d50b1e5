//! Adam and the cosine learning-rate schedule.

use crate::float::Float;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

/// `lr(t) = lr_min + (lr0 - lr_min) * (1 + cos(pi * t / total)) / 2`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = t.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam without weight decay. Moment buffers are allocated lazily, one per
/// learnable store entry.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        if self.first.len() != store.len() {
            self.first = store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.kind(id) != ParamKind::Learnable {
                continue;
            }
            let i = id.index();
            let grad = store.grad(id).clone();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let value = store.value_mut(id).data_mut();
            for (((p, &g), m), v) in value.iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - 0.000505).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f32>::new(0);
        let id = store.learnable("w", &[4], Init::Uniform(1.0)).unwrap();
        let before = store.value(id).clone();
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.step(&mut store, 1e-3);
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn matches_scalar_hand_computation_on_a_quadratic() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.learnable("x", &[1], Init::Ones).unwrap();
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let g = 2.0 * (store.value(id).data()[0] - 3.0);
            store.grad_mut(id).data_mut()[0] = g;
            adam.step(&mut store, 0.1);
            let gh = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * gh;
            v = 0.999 * v + 0.001 * gh * gh;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((store.value(id).data()[0] - x).abs() <= 1e-10);
        }
    }
}
