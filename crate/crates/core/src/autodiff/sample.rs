//! Bilinear sampling on the pixel grid.
//!
//! Normalized coordinates follow the align-corners-false convention: `p ∈
//! [0,1]` maps to the continuous pixel coordinate `p·extent − 0.5`, so pixel
//! centers sit at `(i + 0.5)/extent`. Taps outside the image read zero.

use alloc::vec;
use alloc::vec::Vec;

use super::{Tape, Var};
use crate::{Error, Result, Tensor};

/// The four interpolation taps of one sampling location.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTaps {
    /// Flat `y·W + x` index of each tap, `None` when outside the image.
    pub index: [Option<usize>; 4],
    pub weight: [f64; 4],
    /// Derivative of each weight w.r.t. the normalized x coordinate.
    pub dweight_x: [f64; 4],
    /// Derivative of each weight w.r.t. the normalized y coordinate.
    pub dweight_y: [f64; 4],
}

impl BilinearTaps {
    #[inline]
    pub fn sample(&self, plane: impl Fn(usize) -> f64) -> f64 {
        let mut acc = 0.0;
        for t in 0..4 {
            if let Some(i) = self.index[t] {
                acc += self.weight[t] * plane(i);
            }
        }
        acc
    }

    /// `(∂/∂x, ∂/∂y)` of the sampled value.
    #[inline]
    pub fn sample_grad(&self, plane: impl Fn(usize) -> f64) -> (f64, f64) {
        let (mut gx, mut gy) = (0.0, 0.0);
        for t in 0..4 {
            if let Some(i) = self.index[t] {
                let v = plane(i);
                gx += self.dweight_x[t] * v;
                gy += self.dweight_y[t] * v;
            }
        }
        (gx, gy)
    }
}

/// Taps for normalized point `(px, py)` on an `h×w` grid.
pub fn bilinear_point(h: usize, w: usize, px: f64, py: f64) -> BilinearTaps {
    let cx = px * w as f64 - 0.5;
    let cy = py * h as f64 - 0.5;
    let x0 = libm::floor(cx);
    let y0 = libm::floor(cy);
    let fx = cx - x0;
    let fy = cy - y0;
    let (wf, hf) = (w as f64, h as f64);
    let mut index = [None; 4];
    let corners = [(y0, x0), (y0, x0 + 1.0), (y0 + 1.0, x0), (y0 + 1.0, x0 + 1.0)];
    for (slot, &(y, x)) in index.iter_mut().zip(&corners) {
        if y >= 0.0 && x >= 0.0 && y < hf && x < wf {
            *slot = Some(y as usize * w + x as usize);
        }
    }
    BilinearTaps {
        index,
        weight: [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
        dweight_x: [-(1.0 - fy) * wf, (1.0 - fy) * wf, -fy * wf, fy * wf],
        dweight_y: [-(1.0 - fx) * hf, -fx * hf, (1.0 - fx) * hf, fx * hf],
    }
}

impl Tape {
    /// Samples `x[B,C,H,W]` at normalized `points[B,P,2]` (x, y order) → `[B,P,C]`.
    pub fn bilinear_sample(&mut self, x: Var, points: Var) -> Result<Var> {
        let (xs, ps) = (self.shape(x).to_vec(), self.shape(points).to_vec());
        if xs.len() != 4 || ps.len() != 3 || ps[2] != 2 || xs[0] != ps[0] {
            return Err(Error::shape("bilinear_sample", &xs, &ps));
        }
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let p = ps[1];
        let plane = h * w;
        let (xv, pv) = (self.value(x).data(), self.value(points).data());
        let taps: Vec<BilinearTaps> = pv.chunks(2).map(|q| bilinear_point(h, w, q[0], q[1])).collect();
        let mut out = vec![0.0; bn * p * c];
        for b in 0..bn {
            for i in 0..p {
                let t = &taps[b * p + i];
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    out[(b * p + i) * c + ch] = t.sample(|k| xv[base + k]);
                }
            }
        }
        let value = Tensor::new(&[bn, p, c], out)?;
        Ok(self.push(value, &[x, points], move |inp: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]| {
            let xv = inp[0].data();
            let mut dx = needs[0].then(|| vec![0.0; xv.len()]);
            let mut dp = needs[1].then(|| vec![0.0; bn * p * 2]);
            for b in 0..bn {
                for i in 0..p {
                    let t = &taps[b * p + i];
                    for ch in 0..c {
                        let go = g[(b * p + i) * c + ch];
                        let base = (b * c + ch) * plane;
                        if let Some(dx) = dx.as_mut() {
                            for k in 0..4 {
                                if let Some(idx) = t.index[k] {
                                    dx[base + idx] += go * t.weight[k];
                                }
                            }
                        }
                        if let Some(dp) = dp.as_mut() {
                            let (gx, gy) = t.sample_grad(|k| xv[base + k]);
                            dp[(b * p + i) * 2] += go * gx;
                            dp[(b * p + i) * 2 + 1] += go * gy;
                        }
                    }
                }
            }
            vec![dx, dp]
        }))
    }

    /// Core of multi-head deformable attention.
    ///
    /// * `value`: `[B, H·W, heads·dh]` channel-last value map on an `h×w` grid
    /// * `loc`: `[B, N, heads, K, 2]` normalized sampling locations
    /// * `attn`: `[B, N, heads, K]` mixing weights
    ///
    /// Returns `[B, N, heads·dh]` with
    /// `out[b,q,h·dh+c] = Σ_k attn[b,q,h,k] · sample(value[b,·,h·dh+c], loc[b,q,h,k])`.
    pub fn deform_sample(&mut self, value: Var, grid: (usize, usize), loc: Var, attn: Var) -> Result<Var> {
        let (vs, ls, as_) = (
            self.shape(value).to_vec(),
            self.shape(loc).to_vec(),
            self.shape(attn).to_vec(),
        );
        let (h, w) = grid;
        if vs.len() != 3 || vs[1] != h * w || ls.len() != 5 || ls[4] != 2 || as_[..] != ls[..4] || vs[0] != ls[0] {
            return Err(Error::shape("deform_sample", &vs, &ls));
        }
        let (bn, n, heads, k) = (ls[0], ls[1], ls[2], ls[3]);
        let d = vs[2];
        if d % heads != 0 {
            return Err(Error::dim("deform_sample", "channels not divisible by heads"));
        }
        let dh = d / heads;
        let hw = h * w;
        let (vv, lv, av) = (self.value(value).data(), self.value(loc).data(), self.value(attn).data());
        let taps: Vec<BilinearTaps> = lv.chunks(2).map(|q| bilinear_point(h, w, q[0], q[1])).collect();
        let mut out = vec![0.0; bn * n * d];
        for b in 0..bn {
            let vb = &vv[b * hw * d..(b + 1) * hw * d];
            for q in 0..n {
                for hd in 0..heads {
                    let dst = &mut out[(b * n + q) * d + hd * dh..(b * n + q) * d + (hd + 1) * dh];
                    for kk in 0..k {
                        let s = ((b * n + q) * heads + hd) * k + kk;
                        let a = av[s];
                        let t = &taps[s];
                        for tap in 0..4 {
                            if let Some(pix) = t.index[tap] {
                                let coef = a * t.weight[tap];
                                let src = &vb[pix * d + hd * dh..pix * d + (hd + 1) * dh];
                                dst.iter_mut().zip(src).for_each(|(o, v)| *o += coef * v);
                            }
                        }
                    }
                }
            }
        }
        let out_value = Tensor::new(&[bn, n, d], out)?;
        Ok(self.push(out_value, &[value, loc, attn], move |inp: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]| {
            let (vv, av) = (inp[0].data(), inp[2].data());
            let mut dv = needs[0].then(|| vec![0.0; vv.len()]);
            let mut dl = needs[1].then(|| vec![0.0; bn * n * heads * k * 2]);
            let mut da = needs[2].then(|| vec![0.0; bn * n * heads * k]);
            for b in 0..bn {
                for q in 0..n {
                    for hd in 0..heads {
                        let go = &g[(b * n + q) * d + hd * dh..(b * n + q) * d + (hd + 1) * dh];
                        for kk in 0..k {
                            let s = ((b * n + q) * heads + hd) * k + kk;
                            let a = av[s];
                            let t = &taps[s];
                            let mut dot_sample = 0.0;
                            let (mut gx, mut gy) = (0.0, 0.0);
                            for tap in 0..4 {
                                let Some(pix) = t.index[tap] else { continue };
                                let base = (b * hw + pix) * d + hd * dh;
                                let src = &vv[base..base + dh];
                                let dot: f64 = go.iter().zip(src).map(|(x, y)| x * y).sum();
                                dot_sample += t.weight[tap] * dot;
                                gx += t.dweight_x[tap] * dot;
                                gy += t.dweight_y[tap] * dot;
                                if let Some(dv) = dv.as_mut() {
                                    let coef = a * t.weight[tap];
                                    dv[base..base + dh].iter_mut().zip(go).for_each(|(o, gv)| *o += coef * gv);
                                }
                            }
                            if let Some(da) = da.as_mut() {
                                da[s] = dot_sample;
                            }
                            if let Some(dl) = dl.as_mut() {
                                dl[s * 2] = a * gx;
                                dl[s * 2 + 1] = a * gy;
                            }
                        }
                    }
                }
            }
            vec![dv, dl, da]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(rng: &mut crate::Rng) -> Tensor {
        Tensor::randn(&[1, 2, 3, 4], 1.0, rng)
    }

    #[test]
    fn pixel_centers_reproduce_gather() {
        let mut rng = crate::seeded_rng(5);
        let mut tape = Tape::new();
        let img = image(&mut rng);
        let pts: Vec<f64> = (0..3)
            .flat_map(|i| (0..4).flat_map(move |j| [(j as f64 + 0.5) / 4.0, (i as f64 + 0.5) / 3.0]))
            .collect();
        let x = tape.constant(img.clone());
        let p = tape.constant(Tensor::new(&[1, 12, 2], pts).unwrap());
        let y = tape.bilinear_sample(x, p).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                for c in 0..2 {
                    assert_eq!(tape.value(y).get(&[0, i * 4 + j, c]), img.get(&[0, c, i, j]));
                }
            }
        }
    }

    #[test]
    fn horizontal_midpoint_is_mean() {
        let mut rng = crate::seeded_rng(6);
        let img = image(&mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        // between pixel centers (1,1) and (1,2)
        let p = tape.constant(Tensor::new(&[1, 1, 2], vec![2.0 / 4.0, 1.5 / 3.0]).unwrap());
        let y = tape.bilinear_sample(x, p).unwrap();
        for c in 0..2 {
            let expect = 0.5 * (img.get(&[0, c, 1, 1]) + img.get(&[0, c, 1, 2]));
            assert!((tape.value(y).get(&[0, 0, c]) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn far_outside_reads_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let p = tape.constant(Tensor::new(&[1, 2, 2], vec![-1.0, 0.5, 0.5, 3.0]).unwrap());
        let y = tape.bilinear_sample(x, p).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }
}
