//! Adam and global gradient-norm clipping.

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::param::ParamStore;

#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Vec<S>>>,
    v: Vec<Option<Vec<S>>>,
}

impl<S: Float> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First moment of parameter `i`, once it has been updated.
    pub fn first_moment(&self, i: usize) -> Option<&[S]> {
        self.m.get(i).and_then(|m| m.as_deref())
    }

    /// One update of every trainable parameter. Each must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let step_size = S::of(self.lr / bc1);
        let eps = S::of(self.eps);
        let inv_sqrt_bc2 = S::of(1.0 / bc2.sqrt());
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let g = p.grad.as_deref().expect("checked above");
            let n = g.len();
            let m = self.m[id.0].get_or_insert_with(|| vec![S::zero(); n]);
            let v = self.v[id.0].get_or_insert_with(|| vec![S::zero(); n]);
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                *w -= step_size * *m / (v.sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

/// Scales all trainable gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<S: Float>(store: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let total: f64 = store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let scale = S::of(max_norm / total);
        for (_, p) in store.iter_mut() {
            if let Some(g) = &mut p.grad {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[1], w), true).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut s = store_with(1.5);
        let mut adam = Adam::new(0.1);
        s.get_mut(crate::ParamId(0)).grad = Some(vec![1.0]);
        adam.step(&mut s).unwrap();
        let w = s.get(crate::ParamId(0)).value.data()[0];
        let m1 = adam.first_moment(0).unwrap()[0];
        s.get_mut(crate::ParamId(0)).grad = Some(vec![0.0]);
        adam.step(&mut s).unwrap();
        let m2 = adam.first_moment(0).unwrap()[0];
        assert!((m2 - 0.9 * m1).abs() < 1e-15);
        let mut s0 = store_with(1.5);
        let mut fresh = Adam::new(0.1);
        s0.get_mut(crate::ParamId(0)).grad = Some(vec![0.0]);
        fresh.step(&mut s0).unwrap();
        assert_eq!(s0.get(crate::ParamId(0)).value.data()[0], 1.5);
        assert!(w < 1.5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [-3.0, 0.02, 700.0] {
            let mut s = store_with(0.0);
            s.get_mut(crate::ParamId(0)).grad = Some(vec![g]);
            Adam::new(0.01).step(&mut s).unwrap();
            let w = s.get(crate::ParamId(0)).value.data()[0];
            let expected = -0.01 * g.signum();
            assert!((w - expected).abs() < 1e-6 * 0.01, "g={g} w={w}");
        }
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut s = store_with(20.0);
        let mut adam = Adam::new(0.1);
        let mut last = 20.0f64;
        for _ in 0..100 {
            let w = s.get(crate::ParamId(0)).value.data()[0];
            s.get_mut(crate::ParamId(0)).grad = Some(vec![2.0 * w]);
            adam.step(&mut s).unwrap();
            let now = s.get(crate::ParamId(0)).value.data()[0].abs();
            assert!(now < last, "{now} !< {last}");
            last = now;
        }
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = store_with(1.0);
        assert!(matches!(Adam::new(0.1).step(&mut s), Err(TensorError::MissingGrad(n)) if n == "w"));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::zeros(&[1]), true).unwrap();
        let b = s.add("b", Tensor::zeros(&[1]), true).unwrap();
        s.get_mut(a).grad = Some(vec![3.0]);
        s.get_mut(b).grad = Some(vec![4.0]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((s.get(a).grad.as_ref().unwrap()[0] - 0.6).abs() < 1e-12);
        assert_eq!(clip_grad_norm(&mut s, 10.0), 1.0);
    }
}
