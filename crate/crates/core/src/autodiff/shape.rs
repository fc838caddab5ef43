use alloc::vec;
use alloc::vec::Vec;

use super::{InputGrads, Tape, Var};
use crate::tensor::strides;
use crate::{Error, Result, Tensor};

/// Gathers `src` (shape `shape`) into the axis order `perm`.
fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let moved: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        // odometer increment over the output index
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += moved[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= moved[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, &[x], |_: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", alloc::format!("{perm:?} is not a permutation of {nd} axes")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value(x).data(), &shape, perm);
        let value = Tensor::new(&out_shape, data)?;
        let mut inverse = vec![0; nd];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.push(value, &[x], move |_: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]| {
            vec![Some(permute_data(g, &out_shape, &inverse))]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", "axis out of range"));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i]) {
                return Err(Error::shape("concat", &first, s));
            }
            lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in xs.iter().zip(&lens) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, xs, move |_: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]| {
            let mut grads: InputGrads = lens
                .iter()
                .zip(needs)
                .map(|(&len, &n)| n.then(|| Vec::with_capacity(outer * len * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gr, &len) in grads.iter_mut().zip(&lens) {
                    if let Some(gr) = gr {
                        gr.extend_from_slice(&g[off..off + len * inner]);
                    }
                    off += len * inner;
                }
            }
            grads
        }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(
                "slice",
                alloc::format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, out)?;
        let numel: usize = shape.iter().product();
        Ok(self.push(value, &[x], move |_: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]| {
            let mut dx = vec![0.0; numel];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    /// Repeats `x` along a new leading axis of extent `batch`.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Var {
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(x));
        let src = self.value(x).data();
        let n = src.len();
        let mut out = Vec::with_capacity(n * batch);
        for _ in 0..batch {
            out.extend_from_slice(src);
        }
        let value = Tensor::new(&shape, out).expect("consistent shape");
        self.push(value, &[x], move |_: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]| {
            let mut dx = vec![0.0; n];
            for chunk in g.chunks(n) {
                dx.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
            }
            vec![Some(dx)]
        })
    }
}
