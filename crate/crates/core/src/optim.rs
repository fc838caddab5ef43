//! AdamW with a polynomial learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{ParamId, ParamRole, ParamStore};
use crate::{Error, Result};

/// `lr0 · (1 − step/total)^power`, clamped to zero past the end.
pub fn poly_lr(step: usize, total_steps: usize, lr0: f64, power: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    lr0 * libm::pow(1.0 - step as f64 / total_steps as f64, power)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from its accumulated gradient:
    /// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`. Gradients are cleared afterwards.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let missing: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.role == ParamRole::Trainable && p.grad.is_none())
            .map(|(_, p)| p.name.clone())
            .collect();
        if let Some(name) = missing.first() {
            return Err(Error::Contract(alloc::format!(
                "trainable parameter {name} has no gradient ({} missing)",
                missing.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.role == ParamRole::Trainable)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let p = store.get_mut(id);
            let grad = p.grad.take().expect("checked above");
            let n = grad.len();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let data = p.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (libm::sqrt(vhat) + self.eps) + self.weight_decay * data[i]);
            }
            p.value.round_to_f32();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn store_with(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(&[4], value), ParamRole::Trainable).unwrap();
        s.get_mut(id).grad = Some(vec![grad; 4]);
        (s, id)
    }

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0, 100, 1e-4, 0.9), 1e-4);
        assert_eq!(poly_lr(100, 100, 1e-4, 0.9), 0.0);
        let mid = poly_lr(50, 100, 1e-4, 0.9);
        assert!((mid - 1e-4 * libm::pow(0.5, 0.9)).abs() < 1e-18);
        assert!((mid - 5.359e-5).abs() < 1e-8);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store_with(1.0, 0.3);
        AdamW::new(0.9, 0.999, 0.0).step(&mut s, 1e-3).unwrap();
        for &v in s.value(id).data() {
            assert!((v - (1.0 - 1e-3)).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let (mut s, id) = store_with(0.7, 0.0);
        let before = s.value(id).clone();
        AdamW::new(0.9, 0.999, 0.0).step(&mut s, 1e-3).unwrap();
        assert!(s.value(id).bit_eq(&before));
    }

    #[test]
    fn decay_only_shrinks_multiplicatively() {
        let (mut s, id) = store_with(2.0, 0.0);
        AdamW::new(0.9, 0.999, 0.01).step(&mut s, 0.1).unwrap();
        let want = (2.0 * (1.0 - 0.1 * 0.01)) as f32 as f64;
        assert!(s.value(id).data().iter().all(|&v| v == want));
    }

    #[test]
    fn frozen_untouched_and_missing_grad_rejected() {
        let mut s = ParamStore::new();
        let f = s.add("f", Tensor::ones(&[2]), ParamRole::Frozen).unwrap();
        let t = s.add("t", Tensor::ones(&[2]), ParamRole::Trainable).unwrap();
        let mut opt = AdamW::new(0.9, 0.999, 0.01);
        assert!(matches!(opt.step(&mut s, 0.1), Err(Error::Contract(_))));
        s.get_mut(t).grad = Some(vec![1.0, 1.0]);
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(f).data(), &[1.0, 1.0]);
        assert!(s.get(t).grad.is_none());
    }
}
