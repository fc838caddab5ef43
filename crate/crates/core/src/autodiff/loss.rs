use alloc::vec;
use alloc::vec::Vec;

use super::elementwise::sigmoid;
use super::{Tape, Var};
use crate::{Error, Result, Tensor};

impl Tape {
    /// Mean binary cross-entropy of `logits` against `target` in the stable
    /// `max(x,0) − x·t + log(1 + e^{−|x|})` form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::shape("bce_loss", self.shape(logits), target.shape()));
        }
        let n = target.numel().max(1) as f64;
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + libm::log1p(libm::exp(-libm::fabs(x))))
            .sum();
        let t = target.clone();
        Ok(self.push(Tensor::scalar(total / n), &[logits], move |inp: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]| {
            let dx: Vec<f64> = inp[0]
                .data()
                .iter()
                .zip(t.data())
                .map(|(&x, &t)| g[0] * (sigmoid(x) - t) / n)
                .collect();
            vec![Some(dx)]
        }))
    }

    /// Soft dice loss `1 − (2Σp·t + ε)/(Σp + Σt + ε)` with `p = sigmoid(logits)`.
    pub fn dice_with_logits(&mut self, logits: Var, target: &Tensor, eps: f64) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::shape("dice_loss", self.shape(logits), target.shape()));
        }
        let p: Vec<f64> = self.value(logits).data().iter().map(|&x| sigmoid(x)).collect();
        let inter: f64 = p.iter().zip(target.data()).map(|(a, b)| a * b).sum();
        let denom = p.iter().sum::<f64>() + target.sum() + eps;
        let num = 2.0 * inter + eps;
        let loss = 1.0 - num / denom;
        let t = target.clone();
        Ok(self.push(Tensor::scalar(loss), &[logits], move |_: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]| {
            let dx: Vec<f64> = p
                .iter()
                .zip(t.data())
                .map(|(&pi, &ti)| {
                    let dp = -(2.0 * ti * denom - num) / (denom * denom);
                    g[0] * dp * pi * (1.0 - pi)
                })
                .collect();
            vec![Some(dx)]
        }))
    }
}
