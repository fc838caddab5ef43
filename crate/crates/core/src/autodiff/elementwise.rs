use alloc::vec;
use alloc::vec::Vec;

use super::{InputGrads, Tape, Var};
use crate::{Error, Result, Tensor};

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * libm::exp(-0.5 * x * x);
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn unary(
    tape: &mut Tape,
    x: Var,
    f: impl Fn(f64) -> f64,
    // derivative from (input, output)
    df: fn(f64, f64) -> f64,
) -> Var {
    let value = tape.value(x).map(f);
    tape.push(
        value,
        &[x],
        move |inputs: &[&Tensor], out: &Tensor, g: &[f64], _: &[bool]| -> InputGrads {
            let dx = inputs[0]
                .data()
                .iter()
                .zip(out.data())
                .zip(g)
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            vec![Some(dx)]
        },
    )
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, &[a, b], |_: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, &[a, b], |_: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|v| -v).collect()),
            ]
        }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, &[a, b], |inp: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]| {
            let da = needs[0].then(|| g.iter().zip(inp[1].data()).map(|(g, y)| g * y).collect());
            let db = needs[1].then(|| g.iter().zip(inp[0].data()).map(|(g, x)| g * x).collect());
            vec![da, db]
        }))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, &[x], move |_: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]| {
            vec![Some(g.iter().map(|v| v * scale).collect())]
        })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    /// Multiplies by a constant tensor of the same shape (dropout masks and the like).
    pub fn mul_const(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        if mask.shape() != self.shape(x) {
            return Err(Error::shape("mul_const", self.shape(x), mask.shape()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(a, m)| a * m)
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, &[x], move |_: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]| {
            vec![Some(g.iter().zip(mask.data()).map(|(g, m)| g * m).collect())]
        }))
    }

    /// Adds `p` broadcast over the leading axes of `x`; `p`'s shape must be a
    /// suffix of `x`'s (biases, positional embeddings).
    pub fn add_suffix(&mut self, x: Var, p: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ps = self.shape(p);
        if ps.len() > xs.len() || xs[xs.len() - ps.len()..] != *ps {
            return Err(Error::shape("add_suffix", xs, ps));
        }
        let inner = self.value(p).numel();
        let pv = self.value(p).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + pv[i % inner])
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, &[x, p], move |_: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]| {
            let dp = needs[1].then(|| {
                let mut dp = vec![0.0; inner];
                for chunk in g.chunks(inner) {
                    dp.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                dp
            });
            vec![needs[0].then(|| g.to_vec()), dp]
        }))
    }

    /// `a⊙m + b⊙(1 − m)`. Each output is kept inside the hull of its `a` and
    /// `b` entries so rounding never leaves the segment; `m` = 1 or 0 returns
    /// `a` or `b` exactly.
    pub fn blend(&mut self, a: Var, b: Var, m: Var) -> Result<Var> {
        same_shape(self, "blend", a, b)?;
        same_shape(self, "blend", a, m)?;
        let (av, bv, mv) = (self.value(a).data(), self.value(b).data(), self.value(m).data());
        let data = av
            .iter()
            .zip(bv)
            .zip(mv)
            .map(|((&x, &y), &t)| {
                if x == y {
                    x
                } else {
                    (x * t + y * (1.0 - t)).clamp(x.min(y), x.max(y))
                }
            })
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, &[a, b, m], |inp: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]| {
            let (a, b, m) = (inp[0].data(), inp[1].data(), inp[2].data());
            let da = needs[0].then(|| g.iter().zip(m).map(|(g, t)| g * t).collect());
            let db = needs[1].then(|| g.iter().zip(m).map(|(g, t)| g * (1.0 - t)).collect());
            let dm = needs[2].then(|| g.iter().zip(a).zip(b).map(|((g, x), y)| g * (x - y)).collect());
            vec![da, db, dm]
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        unary(self, x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        unary(self, x, gelu, |x, _| gelu_grad(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        unary(self, x, sigmoid, |_, y| y * (1.0 - y))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, &[x], move |_: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ x ⊙ w` for a constant weight tensor `w`.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor) -> Result<Var> {
        let y = self.mul_const(x, w)?;
        Ok(self.sum(y))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - m);
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(&shape, out).expect("same shape");
        self.push(value, &[x], move |_: &[&Tensor], y: &Tensor, g: &[f64], _: &[bool]| {
            let mut dx = vec![0.0; g.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.data().chunks(d)).zip(g.chunks(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, &yi), &gi) in dxr.iter_mut().zip(yr).zip(gr) {
                    *o = yi * (gi - dot);
                }
            }
            vec![Some(dx)]
        })
    }
}
