use alloc::vec;
use alloc::vec::Vec;

use super::{Tape, Var};
use crate::{Error, Result, Tensor};

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + p] += dot;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

impl Tape {
    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, &[a, b], move |inp: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]| {
            let da = needs[0].then(|| {
                let mut da = vec![0.0; m * k];
                gemm_nt(g, inp[1].data(), &mut da, m, n, k);
                da
            });
            let db = needs[1].then(|| {
                let mut db = vec![0.0; k * n];
                gemm_tn(inp[0].data(), g, &mut db, m, k, n);
                db
            });
            vec![da, db]
        }))
    }

    /// Batched product `[g×m×k] · [g×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for g in 0..bs {
            gemm_nn(
                &av[g * m * k..(g + 1) * m * k],
                &bv[g * k * n..(g + 1) * k * n],
                &mut out[g * m * n..(g + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(&[bs, m, n], out)?;
        Ok(self.push(value, &[a, b], move |inp: &[&Tensor], _: &Tensor, gr: &[f64], needs: &[bool]| {
            let (av, bv) = (inp[0].data(), inp[1].data());
            let da = needs[0].then(|| {
                let mut da = vec![0.0; bs * m * k];
                for g in 0..bs {
                    gemm_nt(
                        &gr[g * m * n..(g + 1) * m * n],
                        &bv[g * k * n..(g + 1) * k * n],
                        &mut da[g * m * k..(g + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                da
            });
            let db = needs[1].then(|| {
                let mut db = vec![0.0; bs * k * n];
                for g in 0..bs {
                    gemm_tn(
                        &av[g * m * k..(g + 1) * m * k],
                        &gr[g * m * n..(g + 1) * m * n],
                        &mut db[g * k * n..(g + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                db
            });
            vec![da, db]
        }))
    }

    /// Affine map over the last axis: `x[…, in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        let din = *xs.last().ok_or_else(|| Error::dim("linear", "scalar input"))?;
        if ws.len() != 2 || ws[0] != din {
            return Err(Error::shape("linear", &xs, ws));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear bias", ws, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = match b {
            Some(b) => {
                let bv = self.value(b).data();
                let mut o = Vec::with_capacity(rows * dout);
                for _ in 0..rows {
                    o.extend_from_slice(bv);
                }
                o
            }
            None => vec![0.0; rows * dout],
        };
        gemm_nn(self.value(x).data(), self.value(w).data(), &mut out, rows, din, dout);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(&shape, out)?;
        let inputs: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        Ok(self.push(value, &inputs, move |inp: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]| {
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; rows * din];
                gemm_nt(g, inp[1].data(), &mut dx, rows, dout, din);
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0; din * dout];
                gemm_tn(inp[0].data(), g, &mut dw, rows, din, dout);
                dw
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    db
                }));
            }
            grads
        }))
    }
}
