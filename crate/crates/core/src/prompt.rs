//! Box prompts: validation, training-time jitter and the frozen prompt encoder.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng as _, RngCore};

use crate::config::ModelConfig;
use crate::nn::{Builder, Init, ParamId, Session};
use crate::{Error, Result, Tensor, Var};

/// Axis-aligned box in pixels; `x1`/`y1` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoxPrompt {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BoxPrompt {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        BoxPrompt { x0, y0, x1, y1 }
    }

    /// `0 ≤ x0 < x1 ≤ width` and `0 ≤ y0 < y1 ≤ height`.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let (w, h) = (width as i64, height as i64);
        if 0 <= self.x0 && self.x0 < self.x1 && self.x1 <= w && 0 <= self.y0 && self.y0 < self.y1 && self.y1 <= h {
            Ok(())
        } else {
            Err(Error::Contract(alloc::format!("invalid box {self:?} for a {width}x{height} image")))
        }
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    /// The same box in a square frame of side `to`, given one of side `from`.
    /// Edges are rounded outward so the box never shrinks.
    pub fn rescale(&self, from: usize, to: usize) -> BoxPrompt {
        if from == to {
            return *self;
        }
        let r = to as f64 / from as f64;
        let lo = |v: i64| libm::floor(v as f64 * r) as i64;
        let hi = |v: i64| (libm::ceil(v as f64 * r) as i64).min(to as i64);
        let mut b = BoxPrompt::new(lo(self.x0), lo(self.y0), hi(self.x1), hi(self.y1));
        b.x1 = b.x1.max(b.x0 + 1);
        b.y1 = b.y1.max(b.y0 + 1);
        b
    }
}

/// Jitter amplitude in pixels for an `input_size` image, given `max_shift`
/// at a 256 px reference resolution.
pub fn shift_for_resolution(max_shift: f64, input_size: usize) -> i64 {
    libm::round(max_shift * input_size as f64 / 256.0) as i64
}

/// Make `lo < hi` within `[0, extent]` after independent shifts.
fn settle(mut lo: i64, mut hi: i64, extent: i64) -> (i64, i64) {
    lo = lo.clamp(0, extent);
    hi = hi.clamp(0, extent);
    if lo > hi {
        core::mem::swap(&mut lo, &mut hi);
    }
    if lo == hi {
        if hi < extent {
            hi += 1;
        } else {
            lo -= 1;
        }
    }
    (lo, hi)
}

/// Shifts each coordinate by an independent uniform integer in
/// `[−shift, shift]`, then clamps, reorders and widens degenerate sides to 1 px.
pub fn perturb_box(b: &BoxPrompt, shift: i64, width: usize, height: usize, rng: &mut dyn RngCore) -> BoxPrompt {
    if shift <= 0 {
        return *b;
    }
    let mut d = || rng.random_range(-shift..=shift);
    let (x0, y0, x1, y1) = (b.x0 + d(), b.y0 + d(), b.x1 + d(), b.y1 + d());
    let (x0, x1) = settle(x0, x1, width as i64);
    let (y0, y1) = settle(y0, y1, height as i64);
    BoxPrompt { x0, y0, x1, y1 }
}

/// Random-Fourier positional encoding with a frozen Gaussian matrix, plus
/// frozen corner-type embeddings.
#[derive(Debug, Clone)]
pub struct PromptEncoder {
    /// `[2, D/2]`
    pub gaussian: ParamId,
    /// `[2, D]`: top-left, bottom-right.
    pub corner_embed: ParamId,
    pub dim: usize,
}

impl PromptEncoder {
    pub fn new(b: &mut Builder, config: &ModelConfig) -> Result<Self> {
        let d = config.embed_dim;
        let mut s = b.scope("prompt");
        Ok(PromptEncoder {
            gaussian: s.param("pe_gaussian", &[2, d / 2], Init::Normal(1.0))?,
            corner_embed: s.param("corner_embed", &[2, d], Init::Normal(1.0))?,
            dim: d,
        })
    }

    /// `[sin(2π·c·G), cos(2π·c·G)]` for normalized `(x, y)` in `[0, 1]`.
    fn fourier(&self, gaussian: &Tensor, x: f64, y: f64, out: &mut [f64]) {
        let half = self.dim / 2;
        let g = gaussian.data();
        let (cx, cy) = (2.0 * x - 1.0, 2.0 * y - 1.0);
        for j in 0..half {
            let a = 2.0 * PI * (cx * g[j] + cy * g[half + j]);
            out[j] = libm::sin(a);
            out[half + j] = libm::cos(a);
        }
    }

    /// Two corner tokens per box, `[B, 2, D]`, boxes given in a square
    /// frame of side `size`.
    pub fn encode_tensor(&self, s: &Session, boxes: &[BoxPrompt], size: usize) -> Result<Tensor> {
        let d = self.dim;
        let gaussian = s.params().value(self.gaussian);
        let corner = s.params().value(self.corner_embed).data();
        let mut out = Tensor::zeros(&[boxes.len(), 2, d]);
        let norm = |v: i64| (v as f64 + 0.5) / size as f64;
        for (i, b) in boxes.iter().enumerate() {
            b.validate(size, size)?;
            // the exclusive far edge is encoded at the last covered pixel
            let corners = [(b.x0, b.y0), (b.x1 - 1, b.y1 - 1)];
            for (k, &(x, y)) in corners.iter().enumerate() {
                let dst = &mut out.data_mut()[(i * 2 + k) * d..(i * 2 + k + 1) * d];
                self.fourier(gaussian, norm(x), norm(y), dst);
                dst.iter_mut().zip(&corner[k * d..(k + 1) * d]).for_each(|(a, c)| *a += c);
            }
        }
        Ok(out)
    }

    /// [`encode_tensor`](Self::encode_tensor) as a constant on the session tape.
    pub fn encode(&self, s: &mut Session, boxes: &[BoxPrompt], size: usize) -> Result<Var> {
        let t = self.encode_tensor(s, boxes, size)?;
        Ok(s.tape.constant(t))
    }

    /// Positional encoding of every cell center of a `grid×grid` map, `[grid², D]`.
    pub fn dense_pe(&self, s: &Session, grid: usize) -> Tensor {
        let gaussian = s.params().value(self.gaussian);
        let mut out = Tensor::zeros(&[grid * grid, self.dim]);
        let d = self.dim;
        let cells: Vec<(usize, usize)> = (0..grid * grid).map(|i| (i / grid, i % grid)).collect();
        for (i, &(r, c)) in cells.iter().enumerate() {
            let x = (c as f64 + 0.5) / grid as f64;
            let y = (r as f64 + 0.5) / grid as f64;
            self.fourier(gaussian, x, y, &mut out.data_mut()[i * d..(i + 1) * d]);
        }
        out
    }
}
