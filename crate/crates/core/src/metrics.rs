//! Segmentation metrics on binary masks: Dice similarity and normalized
//! surface distance.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("mask", alloc::format!("{} values for a {height}x{width} mask", data.len())));
        }
        Ok(Mask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Mask { height, width, data }
    }

    /// Foreground where `logit ≥ 0`, i.e. `sigmoid(logit) ≥ 0.5`, for a `[H,W]`
    /// or `[1,H,W]` logit map.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let s = logits.shape();
        let (h, w) = match s {
            [h, w] | [1, h, w] => (*h, *w),
            _ => return Err(Error::dim("mask", alloc::format!("cannot read {s:?} as a single mask"))),
        };
        Ok(Mask {
            height: h,
            width: w,
            data: logits.data().iter().map(|&v| v >= 0.0).collect(),
        })
    }

    /// `[1, H, W]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[1, self.height, self.width], |i| self.data[i] as u8 as f64)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    fn same_shape(&self, other: &Mask, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(op, &[self.height, self.width], &[other.height, other.width]));
        }
        Ok(())
    }
}

/// `2|P∩G| / (|P| + |G|)`; two empty masks score 1.
pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.same_shape(gt, "dsc")?;
    let inter = pred.data.iter().zip(&gt.data).filter(|(a, b)| **a && **b).count();
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground pixels with at least one 4-neighbour in the background or
/// outside the image, as `(row, col)` in row-major order.
pub fn surface(mask: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

#[inline]
fn within(a: (usize, usize), b: (usize, usize), tolerance: f64) -> bool {
    let dy = a.0 as f64 - b.0 as f64;
    let dx = a.1 as f64 - b.1 as f64;
    libm::sqrt(dy * dy + dx * dx) <= tolerance
}

/// Points of `from` within `tolerance` of some point of the surface grid `to`.
fn covered(from: &[(usize, usize)], to: &Mask, tolerance: f64) -> usize {
    let r = if tolerance.is_finite() {
        libm::floor(tolerance.max(0.0)) as usize
    } else {
        to.height.max(to.width)
    };
    from.iter()
        .filter(|&&(y, x)| {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(to.height - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(to.width - 1));
            (y0..=y1).any(|yy| (x0..=x1).any(|xx| to.get(yy, xx) && within((y, x), (yy, xx), tolerance)))
        })
        .count()
}

/// Normalized surface distance at `tolerance` pixels: the fraction of both
/// boundaries lying within `tolerance` of the other. Both empty → 1, exactly
/// one empty → 0.
pub fn nsd(pred: &Mask, gt: &Mask, tolerance: f64) -> Result<f64> {
    pred.same_shape(gt, "nsd")?;
    let (sp, sg) = (surface(pred), surface(gt));
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let grid = |pts: &[(usize, usize)]| {
        let mut m = Mask::empty(pred.height, pred.width);
        for &(y, x) in pts {
            m.data[y * pred.width + x] = true;
        }
        m
    };
    let (gp, gg) = (grid(&sp), grid(&sg));
    let hits = covered(&sp, &gg, tolerance) + covered(&sg, &gp, tolerance);
    Ok(hits as f64 / (sp.len() + sg.len()) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub dsc: f64,
    pub nsd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_sample: Vec<SampleMetrics>,
    pub mean_dsc: f64,
    pub mean_nsd: f64,
}

impl MetricsReport {
    /// Means are NaN for an empty sample list.
    pub fn new(per_sample: Vec<SampleMetrics>) -> Self {
        let n = per_sample.len() as f64;
        let mean_dsc = per_sample.iter().map(|s| s.dsc).sum::<f64>() / n;
        let mean_nsd = per_sample.iter().map(|s| s.nsd).sum::<f64>() / n;
        MetricsReport {
            per_sample,
            mean_dsc,
            mean_nsd,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(h: usize, w: usize, y0: usize, x0: usize, s: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| (y0..y0 + s).contains(&y) && (x0..x0 + s).contains(&x))
    }

    #[test]
    fn dsc_pinned_cases() {
        let a = block(6, 6, 1, 1, 2);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &block(6, 6, 4, 4, 2)).unwrap(), 0.0);
        assert_eq!(dsc(&a, &block(6, 6, 1, 2, 2)).unwrap(), 0.5);
        assert_eq!(dsc(&Mask::empty(3, 3), &Mask::empty(3, 3)).unwrap(), 1.0);
        assert!(dsc(&a, &Mask::empty(3, 3)).is_err());
    }

    #[test]
    fn surface_of_square_is_perimeter() {
        let m = block(5, 5, 1, 1, 3);
        let s = surface(&m);
        assert_eq!(s.len(), 8);
        assert!(!s.contains(&(2, 2)));
        assert_eq!(surface(&block(5, 5, 2, 3, 1)), vec![(2, 3)]);
    }

    #[test]
    fn nsd_two_pixel_flip() {
        let gt = Mask::from_fn(4, 4, |y, x| (y, x) == (0, 0));
        let pred = Mask::from_fn(4, 4, |y, x| (y, x) == (0, 2));
        assert_eq!(nsd(&pred, &gt, 1.0).unwrap(), 0.0);
        assert_eq!(nsd(&pred, &gt, 2.0).unwrap(), 1.0);
        assert_eq!(nsd(&gt, &gt, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn nsd_empty_conventions() {
        let e = Mask::empty(4, 4);
        let a = block(4, 4, 0, 0, 2);
        assert_eq!(nsd(&e, &e, 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &e, 1.0).unwrap(), 0.0);
        assert_eq!(nsd(&e, &a, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn report_means() {
        let r = MetricsReport::new(vec![
            SampleMetrics { id: "a".into(), dsc: 1.0, nsd: 0.5 },
            SampleMetrics { id: "b".into(), dsc: 0.0, nsd: 0.25 },
        ]);
        assert_eq!((r.mean_dsc, r.mean_nsd), (0.5, 0.375));
    }

    #[test]
    fn logits_threshold_at_zero() {
        let m = Mask::from_logits(&Tensor::new(&[1, 1, 3], vec![-0.1, 0.0, 2.0]).unwrap()).unwrap();
        assert_eq!(m.data, vec![false, true, true]);
    }
}
