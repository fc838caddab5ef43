use alloc::vec;
use alloc::vec::Vec;

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::{InputGrads, Tape, Var};
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    /// Zero rows/columns added before the image.
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    #[allow(clippy::too_many_arguments)]
    fn new(op: &'static str, c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: (usize, usize)) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config(alloc::format!("{op}: stride must be positive")));
        }
        let (hp, wp) = (h + pad.0 + pad.1, w + pad.0 + pad.1);
        if kh > hp || kw > wp {
            return Err(Error::Config(alloc::format!(
                "{op}: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
            )));
        }
        if !(hp - kh).is_multiple_of(stride) || !(wp - kw).is_multiple_of(stride) {
            return Err(Error::Config(alloc::format!(
                "{op}: padded input {hp}x{wp} with kernel {kh}x{kw} is not divisible by stride {stride}"
            )));
        }
        Ok(Geometry {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: pad.0,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
        })
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate of kernel tap `(u, v)` at output `(oy, ox)`, if inside the image.
    #[inline]
    fn tap(&self, oy: usize, ox: usize, u: usize, v: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + u).checked_sub(self.pad)?;
        let x = (ox * self.stride + v).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    /// `[C·kh·kw, Ho·Wo]` patch matrix of one image.
    fn im2col(&self, img: &[f64]) -> Vec<f64> {
        let l = self.out_len();
        let mut cols = vec![0.0; self.c * self.kh * self.kw * l];
        for c in 0..self.c {
            for u in 0..self.kh {
                for v in 0..self.kw {
                    let row = ((c * self.kh + u) * self.kw + v) * l;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, x)) = self.tap(oy, ox, u, v) {
                                cols[row + oy * self.wo + ox] = img[(c * self.h + y) * self.w + x];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let l = self.out_len();
        for c in 0..self.c {
            for u in 0..self.kh {
                for v in 0..self.kw {
                    let row = ((c * self.kh + u) * self.kw + v) * l;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, x)) = self.tap(oy, ox, u, v) {
                                img[(c * self.h + y) * self.w + x] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(tape: &Tape, op: &'static str, b: Option<Var>, n: usize) -> Result<()> {
    if let Some(b) = b {
        if tape.shape(b) != [n] {
            return Err(Error::shape(op, &[n], tape.shape(b)));
        }
    }
    Ok(())
}

fn bias_grad(g: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; channels];
    for b in 0..batch {
        for (c, acc) in db.iter_mut().enumerate() {
            let start = (b * channels + c) * plane;
            *acc += g[start..start + plane].iter().sum::<f64>();
        }
    }
    db
}

fn with_bias(x: Var, w: Var, b: Option<Var>) -> Vec<Var> {
    match b {
        Some(b) => vec![x, w, b],
        None => vec![x, w],
    }
}

impl Tape {
    /// 2-D cross-correlation with zero padding:
    /// `x[B,C,H,W] ⋆ w[O,C,kh,kw] + b[O] → [B,O,H',W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_padded(x, w, b, stride, (pad, pad))
    }

    /// [`conv2d`](Self::conv2d) with `pad.0` zeros before and `pad.1` after
    /// each spatial axis. `(1, 0)` lets a 3×3 stride-2 layer halve an even extent.
    pub fn conv2d_padded(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: (usize, usize)) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let (batch, o) = (xs[0], ws[0]);
        let geo = Geometry::new("conv2d", xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad)?;
        check_bias(self, "conv2d bias", b, o)?;
        let l = geo.out_len();
        let ckk = geo.c * geo.kh * geo.kw;
        let in_plane = geo.c * geo.h * geo.w;
        let mut out = vec![0.0; batch * o * l];
        {
            let (xv, wv) = (self.value(x).data(), self.value(w).data());
            for n in 0..batch {
                let cols = geo.im2col(&xv[n * in_plane..(n + 1) * in_plane]);
                let dst = &mut out[n * o * l..(n + 1) * o * l];
                if let Some(b) = b {
                    for (oc, &bv) in self.value(b).data().iter().enumerate() {
                        dst[oc * l..(oc + 1) * l].iter_mut().for_each(|v| *v = bv);
                    }
                }
                gemm_nn(wv, &cols, dst, o, ckk, l);
            }
        }
        let value = Tensor::new(&[batch, o, geo.ho, geo.wo], out)?;
        Ok(self.push(value, &with_bias(x, w, b), move |inp: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]| {
            let (xv, wv) = (inp[0].data(), inp[1].data());
            let mut dx = needs[0].then(|| vec![0.0; batch * in_plane]);
            let mut dw = needs[1].then(|| vec![0.0; o * ckk]);
            let mut dcols = vec![0.0; ckk * l];
            for n in 0..batch {
                let gn = &g[n * o * l..(n + 1) * o * l];
                if let Some(dw) = dw.as_mut() {
                    let cols = geo.im2col(&xv[n * in_plane..(n + 1) * in_plane]);
                    gemm_nt(gn, &cols, dw, o, l, ckk);
                }
                if let Some(dx) = dx.as_mut() {
                    dcols.iter_mut().for_each(|v| *v = 0.0);
                    gemm_tn(wv, gn, &mut dcols, o, ckk, l);
                    geo.col2im(&dcols, &mut dx[n * in_plane..(n + 1) * in_plane]);
                }
            }
            let mut grads: InputGrads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| bias_grad(g, batch, o, l)));
            }
            grads
        }))
    }

    /// One `kh×kw` filter per channel, no cross-channel mixing:
    /// `x[B,C,H,W], w[C,kh,kw], b[C] → [B,C,H',W']`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 3 || xs[1] != ws[0] {
            return Err(Error::shape("depthwise_conv2d", &xs, &ws));
        }
        let batch = xs[0];
        let geo = Geometry::new("depthwise_conv2d", xs[1], xs[2], xs[3], ws[1], ws[2], stride, (pad, pad))?;
        check_bias(self, "depthwise_conv2d bias", b, geo.c)?;
        let (c, h, wd, kh, kw) = (geo.c, geo.h, geo.w, geo.kh, geo.kw);
        let l = geo.out_len();
        let mut out = vec![0.0; batch * c * l];
        {
            let (xv, wv) = (self.value(x).data(), self.value(w).data());
            let bv = b.map(|b| self.value(b).data());
            for n in 0..batch {
                for ch in 0..c {
                    let img = &xv[(n * c + ch) * h * wd..(n * c + ch + 1) * h * wd];
                    let ker = &wv[ch * kh * kw..(ch + 1) * kh * kw];
                    let dst = &mut out[(n * c + ch) * l..(n * c + ch + 1) * l];
                    let bias = bv.map_or(0.0, |b| b[ch]);
                    for oy in 0..geo.ho {
                        for ox in 0..geo.wo {
                            let mut acc = bias;
                            for u in 0..kh {
                                for v in 0..kw {
                                    if let Some((y, xx)) = geo.tap(oy, ox, u, v) {
                                        acc += ker[u * kw + v] * img[y * wd + xx];
                                    }
                                }
                            }
                            dst[oy * geo.wo + ox] = acc;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[batch, c, geo.ho, geo.wo], out)?;
        Ok(self.push(value, &with_bias(x, w, b), move |inp: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]| {
            let (xv, wv) = (inp[0].data(), inp[1].data());
            let mut dx = needs[0].then(|| vec![0.0; xv.len()]);
            let mut dw = needs[1].then(|| vec![0.0; wv.len()]);
            for n in 0..batch {
                for ch in 0..c {
                    let plane = (n * c + ch) * h * wd;
                    let gp = &g[(n * c + ch) * l..(n * c + ch + 1) * l];
                    for oy in 0..geo.ho {
                        for ox in 0..geo.wo {
                            let go = gp[oy * geo.wo + ox];
                            for u in 0..kh {
                                for v in 0..kw {
                                    if let Some((y, xx)) = geo.tap(oy, ox, u, v) {
                                        if let Some(dx) = dx.as_mut() {
                                            dx[plane + y * wd + xx] += go * wv[(ch * kh + u) * kw + v];
                                        }
                                        if let Some(dw) = dw.as_mut() {
                                            dw[(ch * kh + u) * kw + v] += go * xv[plane + y * wd + xx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut grads: InputGrads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| bias_grad(g, batch, c, l)));
            }
            grads
        }))
    }

    /// Transposed convolution without padding:
    /// `x[B,Ci,H,W], w[Ci,Co,k,k], b[Co] → [B,Co,(H−1)·s+k,(W−1)·s+k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[2] != ws[3] {
            return Err(Error::shape("conv_transpose2d", &xs, &ws));
        }
        if stride == 0 {
            return Err(Error::Config("conv_transpose2d: stride must be positive".into()));
        }
        let (batch, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[1], ws[2]);
        check_bias(self, "conv_transpose2d bias", b, co)?;
        let (ho, wo) = ((h - 1) * stride + k, (wd - 1) * stride + k);
        let mut out = vec![0.0; batch * co * ho * wo];
        {
            let (xv, wv) = (self.value(x).data(), self.value(w).data());
            if let Some(b) = b {
                let bv = self.value(b).data();
                for n in 0..batch {
                    for o in 0..co {
                        let s = (n * co + o) * ho * wo;
                        out[s..s + ho * wo].iter_mut().for_each(|v| *v = bv[o]);
                    }
                }
            }
            for n in 0..batch {
                for c in 0..ci {
                    for i in 0..h {
                        for j in 0..wd {
                            let xval = xv[((n * ci + c) * h + i) * wd + j];
                            for o in 0..co {
                                let kbase = (c * co + o) * k * k;
                                let obase = (n * co + o) * ho * wo;
                                for u in 0..k {
                                    for v in 0..k {
                                        out[obase + (i * stride + u) * wo + j * stride + v] += xval * wv[kbase + u * k + v];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[batch, co, ho, wo], out)?;
        Ok(self.push(value, &with_bias(x, w, b), move |inp: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]| {
            let (xv, wv) = (inp[0].data(), inp[1].data());
            let mut dx = needs[0].then(|| vec![0.0; xv.len()]);
            let mut dw = needs[1].then(|| vec![0.0; wv.len()]);
            for n in 0..batch {
                for c in 0..ci {
                    for i in 0..h {
                        for j in 0..wd {
                            let xi = ((n * ci + c) * h + i) * wd + j;
                            let mut acc = 0.0;
                            for o in 0..co {
                                let kbase = (c * co + o) * k * k;
                                let obase = (n * co + o) * ho * wo;
                                for u in 0..k {
                                    for v in 0..k {
                                        let go = g[obase + (i * stride + u) * wo + j * stride + v];
                                        acc += go * wv[kbase + u * k + v];
                                        if let Some(dw) = dw.as_mut() {
                                            dw[kbase + u * k + v] += go * xv[xi];
                                        }
                                    }
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                dx[xi] = acc;
                            }
                        }
                    }
                }
            }
            let mut grads: InputGrads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| bias_grad(g, batch, co, ho * wo)));
            }
            grads
        }))
    }

    /// Spatial mean: `[B,C,H,W] → [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("global_avg_pool", alloc::format!("expected 4-D input, got {s:?}")));
        }
        let plane = s[2] * s[3];
        let inv = 1.0 / plane as f64;
        let data: Vec<f64> = self.value(x).data().chunks(plane).map(|p| p.iter().sum::<f64>() * inv).collect();
        let value = Tensor::new(&s[..2], data)?;
        Ok(self.push(value, &[x], move |_: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]| {
            let mut dx = Vec::with_capacity(g.len() * plane);
            for &gv in g {
                dx.extend(core::iter::repeat_n(gv * inv, plane));
            }
            vec![Some(dx)]
        }))
    }

    /// Per-channel rescale: `x[B,C,H,W] ⊙ s[B,C]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        if xs.len() != 4 || ss.len() != 2 || xs[..2] != ss[..] {
            return Err(Error::shape("scale_channels", &xs, &ss));
        }
        let plane = xs[2] * xs[3];
        let sv = self.value(s).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(plane)
            .zip(sv)
            .flat_map(|(p, &f)| p.iter().map(move |v| v * f))
            .collect();
        let value = Tensor::new(&xs, data)?;
        Ok(self.push(value, &[x, s], move |inp: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]| {
            let dx = needs[0].then(|| {
                g.chunks(plane)
                    .zip(inp[1].data())
                    .flat_map(|(p, &f)| p.iter().map(move |v| v * f))
                    .collect()
            });
            let ds = needs[1].then(|| {
                g.chunks(plane)
                    .zip(inp[0].data().chunks(plane))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                    .collect()
            });
            vec![dx, ds]
        }))
    }
}
