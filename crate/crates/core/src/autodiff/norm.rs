use alloc::vec;
use alloc::vec::Vec;

use super::{Tape, Var};
use crate::{Error, Result, Tensor};

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when only one element per channel).
    pub var: Vec<f64>,
}

fn check_affine(tape: &Tape, op: &'static str, x: &[usize], gamma: Var, beta: Var, d: usize) -> Result<()> {
    if tape.shape(gamma) != [d] || tape.shape(beta) != [d] {
        return Err(Error::shape(op, x, tape.shape(gamma)));
    }
    Ok(())
}

impl Tape {
    /// Normalizes every position over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        check_affine(self, "layer_norm", &shape, gamma, beta, d)?;
        let rows = self.value(x).numel() / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        for row in self.value(x).data().chunks(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            xhat.extend(row.iter().map(|v| (v - mu) * r));
            rstd.push(r);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &xh)| xh * g[i % d] + b[i % d])
            .collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, &[x, gamma, beta], move |inp: &[&Tensor], _: &Tensor, dy: &[f64], needs: &[bool]| {
            let g = inp[1].data();
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; rows * d];
                for r in 0..rows {
                    let (xs, dys) = (&xhat[r * d..(r + 1) * d], &dy[r * d..(r + 1) * d]);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dxh = dys[j] * g[j];
                        m1 += dxh;
                        m2 += dxh * xs[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dys[j] * g[j] - m1 - xs[j] * m2);
                    }
                }
                dx
            });
            let dg = needs[1].then(|| {
                let mut dg = vec![0.0; d];
                for (i, (&a, &x)) in dy.iter().zip(&xhat).enumerate() {
                    dg[i % d] += a * x;
                }
                dg
            });
            let db = needs[2].then(|| {
                let mut db = vec![0.0; d];
                for (i, &a) in dy.iter().enumerate() {
                    db[i % d] += a;
                }
                db
            });
            vec![dx, dg, db]
        }))
    }

    /// Training-mode batch norm over batch and spatial axes of `x[B,C,H,W]`.
    /// Returns the batch statistics so the caller can update running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("batch_norm", alloc::format!("expected [B,C,H,W], got {shape:?}")));
        }
        let (bn, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        check_affine(self, "batch_norm", &shape, gamma, beta, c)?;
        let m = bn * plane;
        if m == 0 {
            return Err(Error::dim("batch_norm", "B·H·W must be at least 1"));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for n in 0..bn {
            for ch in 0..c {
                let s = (n * c + ch) * plane;
                mean[ch] += xv[s..s + plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for n in 0..bn {
            for ch in 0..c {
                let s = (n * c + ch) * plane;
                var[ch] += xv[s..s + plane].iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m as f64).collect();
        let unbiased: Vec<f64> = if m > 1 {
            var.iter().map(|v| v / (m - 1) as f64).collect()
        } else {
            biased.clone()
        };
        let rstd: Vec<f64> = biased.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for n in 0..bn {
            for ch in 0..c {
                let s = (n * c + ch) * plane;
                for i in s..s + plane {
                    xhat[i] = (xv[i] - mean[ch]) * rstd[ch];
                    out[i] = xhat[i] * g[ch] + b[ch];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let stats = BatchStats { mean, var: unbiased };
        let y = self.push(value, &[x, gamma, beta], move |inp: &[&Tensor], _: &Tensor, dy: &[f64], needs: &[bool]| {
            let g = inp[1].data();
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for n in 0..bn {
                for ch in 0..c {
                    let s = (n * c + ch) * plane;
                    for i in s..s + plane {
                        sum_dy[ch] += dy[i];
                        sum_dy_xhat[ch] += dy[i] * xhat[i];
                    }
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; dy.len()];
                for n in 0..bn {
                    for ch in 0..c {
                        let s = (n * c + ch) * plane;
                        let m1 = sum_dy[ch] / m as f64;
                        let m2 = sum_dy_xhat[ch] / m as f64;
                        for i in s..s + plane {
                            dx[i] = g[ch] * rstd[ch] * (dy[i] - m1 - xhat[i] * m2);
                        }
                    }
                }
                dx
            });
            vec![dx, needs[1].then(|| sum_dy_xhat.clone()), needs[2].then(|| sum_dy.clone())]
        });
        Ok((y, stats))
    }

    /// Eval-mode batch norm with fixed per-channel statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("batch_norm", alloc::format!("expected [B,C,H,W], got {shape:?}")));
        }
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        check_affine(self, "batch_norm", &shape, gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm", "running statistics do not match channel count"));
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mean = mean.to_vec();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                (v - mean[ch]) * rstd[ch] * g[ch] + b[ch]
            })
            .collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, &[x, gamma, beta], move |inp: &[&Tensor], _: &Tensor, dy: &[f64], needs: &[bool]| {
            let (xv, g) = (inp[0].data(), inp[1].data());
            let dx = needs[0].then(|| {
                dy.iter()
                    .enumerate()
                    .map(|(i, &d)| {
                        let ch = (i / plane) % c;
                        d * g[ch] * rstd[ch]
                    })
                    .collect()
            });
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            for (i, &d) in dy.iter().enumerate() {
                let ch = (i / plane) % c;
                dg[ch] += d * (xv[i] - mean[ch]) * rstd[ch];
                db[ch] += d;
            }
            vec![dx, needs[1].then_some(dg), needs[2].then_some(db)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 4], 3.0));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut rng = crate::seeded_rng(2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[3, 5], 1.0, &mut rng));
        let g = tape.constant(Tensor::zeros(&[5]));
        let b = tape.constant(Tensor::full(&[5], 0.7));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut rng = crate::seeded_rng(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[4, 16], 3.0, &mut rng));
        let g = tape.constant(Tensor::ones(&[16]));
        let b = tape.constant(Tensor::zeros(&[16]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(16) {
            let mu: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_train_constant_channels_give_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| ((i / 4) % 3) as f64));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let (y, stats) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.mean, vec![0.0, 1.0, 2.0]);
        assert_eq!(stats.var, vec![0.0; 3]);
    }

    #[test]
    fn batch_norm_eval_identity_stats() {
        let mut rng = crate::seeded_rng(4);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.batch_norm_eval(x, g, b, &[0.0; 3], &[1.0; 3], 1e-5).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs());
        }
    }
}
