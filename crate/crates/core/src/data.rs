//! Samples, resampling, volume slicing and the synthetic shape generator.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, Normal};

use crate::autodiff::bilinear_point;
use crate::metrics::Mask;
use crate::prompt::BoxPrompt;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub mask: Mask,
    pub bbox: BoxPrompt,
}

impl SegmentationSample {
    pub fn size(&self) -> (usize, usize) {
        (self.mask.height, self.mask.width)
    }

    /// Shapes agree, intensities lie in `[0, 1]`, the box is valid and, for a
    /// nonempty mask, encloses foreground.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size();
        if self.image.shape() != [3, h, w] {
            return Err(Error::shape("sample", self.image.shape(), &[3, h, w]));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(alloc::format!("sample {}: intensities outside [0, 1]", self.id)));
        }
        self.bbox.validate(w, h)?;
        if !self.mask.is_empty() {
            let b = self.bbox;
            let inside = (b.y0..b.y1).any(|y| (b.x0..b.x1).any(|x| self.mask.get(y as usize, x as usize)));
            if !inside {
                return Err(Error::Contract(alloc::format!("sample {}: box encloses no foreground", self.id)));
            }
        }
        Ok(())
    }
}

/// Tight box around the foreground, `None` for an empty mask.
pub fn tight_box(mask: &Mask) -> Option<BoxPrompt> {
    let mut b: Option<BoxPrompt> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                let (x, y) = (x as i64, y as i64);
                b = Some(match b {
                    None => BoxPrompt::new(x, y, x + 1, y + 1),
                    Some(b) => BoxPrompt::new(b.x0.min(x), b.y0.min(y), b.x1.max(x + 1), b.y1.max(y + 1)),
                });
            }
        }
    }
    b
}

/// Bilinear resampling of `image[C,H,W]` to `[C, out.0, out.1]`. Output
/// pixel centers map through the same normalized coordinates as
/// [`Tape::bilinear_sample`](crate::Tape::bilinear_sample); positions past
/// the outermost source centers are clamped onto them, so borders replicate
/// instead of fading to zero.
pub fn resize_bilinear(image: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim("resize_bilinear", alloc::format!("expected [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ho, wo) = out;
    if (ho, wo) == (h, w) {
        return Ok(image.clone());
    }
    if h == 0 || w == 0 || ho == 0 || wo == 0 {
        return Err(Error::dim("resize_bilinear", "zero extent"));
    }
    // normalized coordinate of output center i, clamped to the first/last source center
    let coord = |i: usize, n_out: usize, n_in: usize| {
        let p = (i as f64 + 0.5) / n_out as f64;
        let lo = 0.5 / n_in as f64;
        let hi = (n_in as f64 - 0.5) / n_in as f64;
        p.clamp(lo, hi)
    };
    let mut dst = Tensor::zeros(&[c, ho, wo]);
    let plane = h * w;
    let src = image.data();
    for oy in 0..ho {
        let py = coord(oy, ho, h);
        for ox in 0..wo {
            let px = coord(ox, wo, w);
            let taps = bilinear_point(h, w, px, py);
            for ch in 0..c {
                let p = &src[ch * plane..(ch + 1) * plane];
                dst.data_mut()[(ch * ho + oy) * wo + ox] = taps.sample(|i| p[i]);
            }
        }
    }
    Ok(dst)
}

/// Resamples a mask by bilinear interpolation of its indicator, keeping pixels ≥ 0.5.
pub fn resize_mask(mask: &Mask, out: (usize, usize)) -> Result<Mask> {
    if (mask.height, mask.width) == out {
        return Ok(mask.clone());
    }
    let t = resize_bilinear(&mask.to_tensor(), out)?;
    Mask::new(out.0, out.1, t.data().iter().map(|&v| v >= 0.5).collect())
}

/// Splits `volume[Dz,H,W]` with label `mask[Dz,H,W]` into axial slices.
///
/// Intensities are min-max scaled over the whole volume (a constant volume
/// maps to zeros), replicated to three channels and resized to `size×size`.
/// Slices with fewer than `min_fg` foreground pixels, or whose foreground
/// vanishes at the target size, are dropped.
pub fn volume_slice_axial(volume: &Tensor, mask: &Tensor, min_fg: usize, size: usize, id_prefix: &str) -> Result<Vec<SegmentationSample>> {
    let s = volume.shape();
    if s.len() != 3 || s.contains(&0) {
        return Err(Error::Contract(alloc::format!("volume must be a nonempty [Dz,H,W] tensor, got {s:?}")));
    }
    if mask.shape() != s {
        return Err(Error::shape("volume_slice_axial", s, mask.shape()));
    }
    let (dz, h, w) = (s[0], s[1], s[2]);
    let lo = volume.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = volume.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let plane = h * w;
    let mut out = Vec::new();
    for z in 0..dz {
        let m = &mask.data()[z * plane..(z + 1) * plane];
        let fg = m.iter().filter(|&&v| v > 0.5).count();
        if fg < min_fg {
            continue;
        }
        let v = &volume.data()[z * plane..(z + 1) * plane];
        let gray: Vec<f64> = v
            .iter()
            .map(|&x| if range > 0.0 { ((x - lo) / range).clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        let rgb = Tensor::from_fn(&[3, h, w], |i| gray[i % plane]);
        let image = resize_bilinear(&rgb, (size, size))?.map(|x| x.clamp(0.0, 1.0));
        let label = Mask::new(h, w, m.iter().map(|&v| v > 0.5).collect())?;
        let label = resize_mask(&label, (size, size))?;
        let Some(bbox) = tight_box(&label) else {
            if fg == 0 {
                // empty slices kept on request get the whole frame as prompt
                out.push(SegmentationSample {
                    id: alloc::format!("{id_prefix}{z:04}"),
                    image,
                    mask: label,
                    bbox: BoxPrompt::new(0, 0, size as i64, size as i64),
                });
            }
            continue;
        };
        out.push(SegmentationSample {
            id: alloc::format!("{id_prefix}{z:04}"),
            image,
            mask: label,
            bbox,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeKind {
    Ellipse,
    Rectangle,
    /// Inner radius as a fraction of the outer one.
    Ring(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Shape {
    fn random(size: usize, rng: &mut dyn RngCore) -> Shape {
        let s = size as f64;
        let kind = match rng.random_range(0..3) {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Rectangle,
            _ => ShapeKind::Ring(rng.random_range(0.45..0.6)),
        };
        let rx = rng.random_range(0.12..0.3) * s;
        let ry = rng.random_range(0.12..0.3) * s;
        let margin = rx.max(ry);
        Shape {
            kind,
            cx: rng.random_range(margin * 0.6..s - margin * 0.6),
            cy: rng.random_range(margin * 0.6..s - margin * 0.6),
            rx,
            ry,
            angle: rng.random_range(0.0..PI),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (sn, cs) = (libm::sin(self.angle), libm::cos(self.angle));
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (cs * dx + sn * dy) / self.rx;
        let v = (-sn * dx + cs * dy) / self.ry;
        match self.kind {
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Ring(inner) => {
                let r = u * u + v * v;
                r <= 1.0 && r >= inner * inner
            }
        }
    }

    /// Fraction of each pixel covered, from `ss×ss` supersampling.
    fn coverage(&self, size: usize, ss: usize) -> Vec<f64> {
        let mut cov = vec![0.0; size * size];
        let step = 1.0 / ss as f64;
        for y in 0..size {
            for x in 0..size {
                let mut hits = 0;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let px = x as f64 + (sx as f64 + 0.5) * step;
                        let py = y as f64 + (sy as f64 + 0.5) * step;
                        hits += self.contains(px, py) as usize;
                    }
                }
                cov[y * size + x] = hits as f64 / (ss * ss) as f64;
            }
        }
        cov
    }
}

fn boxes_overlap(a: &BoxPrompt, b: &BoxPrompt) -> bool {
    a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1
}

/// One synthetic sample: a random ellipse, rectangle or ring on a noisy
/// shaded background, sometimes with a distractor shape that does not
/// overlap the target's box. The label is the set of pixels at least half
/// covered by the target.
pub fn synth_sample(id: &str, size: usize, rng: &mut dyn RngCore) -> SegmentationSample {
    const SUPERSAMPLE: usize = 4;
    let (cov, mask, bbox) = loop {
        let cov = Shape::random(size, rng).coverage(size, SUPERSAMPLE);
        let mask = Mask::new(size, size, cov.iter().map(|&c| c >= 0.5).collect()).expect("square");
        if mask.count() >= 4 {
            let bbox = tight_box(&mask).expect("nonempty");
            break (cov, mask, bbox);
        }
    };
    let distractor = if rng.random_bool(0.5) {
        (0..10).find_map(|_| {
            let d = Shape::random(size, rng);
            let dc = d.coverage(size, SUPERSAMPLE);
            let dm = Mask::new(size, size, dc.iter().map(|&c| c > 0.0).collect()).expect("square");
            let db = tight_box(&dm)?;
            (!boxes_overlap(&db, &bbox)).then_some(dc)
        })
    } else {
        None
    };

    let noise = Normal::new(0.0, 0.04).expect("valid std");
    let base = rng.random_range(0.15..0.4);
    let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let contrast = sign * rng.random_range(0.3..0.5);
    let tint: [f64; 3] = [rng.random_range(0.85..1.15), rng.random_range(0.85..1.15), rng.random_range(0.85..1.15)];
    let d_contrast = -contrast * rng.random_range(0.6..1.0);
    let s = size as f64;
    let mut image = Tensor::zeros(&[3, size, size]);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let bg = base + gx * (x as f64 / s - 0.5) + gy * (y as f64 / s - 0.5);
            let mut v = bg + contrast * cov[i];
            if let Some(dc) = &distractor {
                v += d_contrast * dc[i];
            }
            for (ch, t) in tint.iter().enumerate() {
                let n = noise.sample(rng);
                image.data_mut()[ch * size * size + i] = ((v * t) + n).clamp(0.0, 1.0);
            }
        }
    }
    SegmentationSample {
        id: id.into(),
        image,
        mask,
        bbox,
    }
}

/// `n` samples named `s00000`, `s00001`, … from seed `seed`.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Vec<SegmentationSample> {
    let mut rng = crate::seeded_rng(seed);
    (0..n).map(|i| synth_sample(&alloc::format!("s{i:05}"), size, &mut rng)).collect()
}
