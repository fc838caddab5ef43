//! Cross-branch fusion: bilateral deformable cross-attention after every ViT
//! stage and the sigmoid-gated blend of the two streams at the end.

use crate::config::ModelConfig;
use crate::nn::{Activation, Builder, Init, LayerNorm, Linear, Mlp, Session};
use crate::{Error, Result, Tensor, Var};

/// Normalized centers `((j + 0.5)/w, (i + 0.5)/h)` of an `h×w` grid, row-major, `[h·w, 2]`.
pub fn reference_points(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h * w, 2], |i| {
        let (cell, axis) = (i / 2, i % 2);
        if axis == 0 {
            ((cell % w) as f64 + 0.5) / w as f64
        } else {
            ((cell / w) as f64 + 0.5) / h as f64
        }
    })
}

/// Initial offsets `[heads·K·2]` in grid cells.
pub fn offset_grid(heads: usize, points: usize) -> Tensor {
    Tensor::from_fn(&[heads * points * 2], |i| {
        let (h, k, axis) = (i / (points * 2), (i / 2) % points, i % 2);
        let theta = 2.0 * core::f64::consts::PI * h as f64 / heads as f64;
        let (c, sn) = (libm::cos(theta), libm::sin(theta));
        let m = libm::fabs(c).max(libm::fabs(sn));
        (k + 1) as f64 * if axis == 0 { c } else { sn } / m
    })
}

/// Multi-head deformable attention: each query samples `points` locations per
/// head around its reference point and mixes them with softmax weights.
#[derive(Debug, Clone)]
pub struct DeformableAttention {
    pub value_proj: Linear,
    pub sampling_offsets: Linear,
    pub attention_weights: Linear,
    pub output_proj: Linear,
    pub heads: usize,
    pub points: usize,
    /// Offsets are predicted in units of `offset_scale` grid cells.
    pub offset_scale: f64,
}

impl DeformableAttention {
    /// Offset weights and attention logits start at zero. Offset biases put
    /// point `k` of head `h` at `k + 1` cells along direction `2πh/heads`
    /// (largest component scaled to 1), so the points of a head see distinct
    /// values from the first step; coincident points would get identical
    /// updates forever. The output projection is zero-initialized.
    pub fn new(b: &mut Builder, name: &str, config: &ModelConfig) -> Result<Self> {
        let (d, heads, k) = (config.embed_dim, config.deform_heads, config.num_points);
        let mut s = b.scope(name);
        let value_proj = Linear::new(&mut s, "value_proj", d, d)?;
        let sampling_offsets = Linear::with_init(&mut s, "sampling_offsets", d, heads * k * 2, Init::Zeros, true)?;
        let bias = sampling_offsets.bias.expect("offsets carry a bias");
        s.store.set_value(bias, offset_grid(heads, k))?;
        Ok(DeformableAttention {
            value_proj,
            sampling_offsets,
            attention_weights: Linear::with_init(&mut s, "attention_weights", d, heads * k, Init::Zeros, true)?,
            output_proj: Linear::with_init(&mut s, "output_proj", d, d, Init::Zeros, true)?,
            heads,
            points: k,
            offset_scale: config.offset_scale,
        })
    }

    /// `query[B,N,D]` with reference points `reference[N,2]` attends over
    /// `value[B,h·w,D]` laid out on `grid = (h, w)`.
    pub fn forward(&self, s: &mut Session, query: Var, reference: &Tensor, value: Var, grid: (usize, usize)) -> Result<Var> {
        let qs = s.tape.shape(query).to_vec();
        if qs.len() != 3 || reference.shape() != [qs[1], 2] {
            return Err(Error::shape("deformable_attention", &qs, reference.shape()));
        }
        let (b, n) = (qs[0], qs[1]);
        let (heads, k) = (self.heads, self.points);
        let (h, w) = grid;

        let off = self.sampling_offsets.forward(s, query)?;
        let off = s.tape.reshape(off, &[b, n, heads, k, 2])?;
        let (sx, sy) = (self.offset_scale / w as f64, self.offset_scale / h as f64);
        let scale = Tensor::from_fn(&[b, n, heads, k, 2], |i| if i % 2 == 0 { sx } else { sy });
        let off = s.tape.mul_const(off, scale)?;
        let r = reference.data();
        let per_query = heads * k * 2;
        let base = Tensor::from_fn(&[b, n, heads, k, 2], |i| {
            let q = (i / per_query) % n;
            r[q * 2 + i % 2]
        });
        let base = s.tape.constant(base);
        let loc = s.tape.add(base, off)?;

        let logits = self.attention_weights.forward(s, query)?;
        let logits = s.tape.reshape(logits, &[b, n, heads, k])?;
        let attn = s.tape.softmax(logits);

        let v = self.value_proj.forward(s, value)?;
        let out = s.tape.deform_sample(v, grid, loc, attn)?;
        self.output_proj.forward(s, out)
    }
}

/// One direction of the bilateral block:
/// `F' = F + DropPath(DeformAttn(F, other))`, `F₁ = F' + DropPath(FFN(LN(F')))`.
#[derive(Debug, Clone)]
pub struct CrossDirection {
    pub attn: DeformableAttention,
    pub norm: LayerNorm,
    pub ffn: Mlp,
}

impl CrossDirection {
    fn new(b: &mut Builder, name: &str, config: &ModelConfig) -> Result<Self> {
        let d = config.embed_dim;
        let mut s = b.scope(name);
        Ok(CrossDirection {
            attn: DeformableAttention::new(&mut s, "attn", config)?,
            norm: LayerNorm::new(&mut s, "norm", d)?,
            ffn: Mlp::new(&mut s, "ffn", d, 4 * d, d, Activation::Gelu, config.drop_rate, true)?,
        })
    }

    fn forward(&self, s: &mut Session, x: Var, other: Var, reference: &Tensor, grid: (usize, usize), drop_path: f64) -> Result<Var> {
        let a = self.attn.forward(s, x, reference, other, grid)?;
        let a = s.drop_path(a, drop_path)?;
        let x = s.tape.add(x, a)?;
        let f = self.norm.forward(s, x)?;
        let f = self.ffn.forward(s, f)?;
        let f = s.drop_path(f, drop_path)?;
        s.tape.add(x, f)
    }
}

/// Deep ← shallow and shallow ← deep cross-attention; both directions read
/// the streams as they were before the block.
#[derive(Debug, Clone)]
pub struct BilateralBlock {
    pub deep: CrossDirection,
    /// Absent when the shallow stream is not consumed downstream.
    pub shallow: Option<CrossDirection>,
    pub grid: usize,
    pub drop_path: f64,
}

impl BilateralBlock {
    pub fn new(b: &mut Builder, name: &str, config: &ModelConfig, update_shallow: bool) -> Result<Self> {
        let mut s = b.scope(name);
        let deep = CrossDirection::new(&mut s, "deep", config)?;
        let shallow = if update_shallow {
            Some(CrossDirection::new(&mut s, "shallow", config)?)
        } else {
            None
        };
        Ok(BilateralBlock {
            deep,
            shallow,
            grid: config.grid(),
            drop_path: config.drop_path_rate,
        })
    }

    /// `(F_d, F_s)` → updated pair; the shallow stream passes through
    /// unchanged when its direction is absent.
    pub fn forward(&self, s: &mut Session, deep: Var, shallow: Var) -> Result<(Var, Var)> {
        let g = self.grid;
        if s.tape.shape(deep) != s.tape.shape(shallow) {
            return Err(Error::shape("bilateral", s.tape.shape(deep), s.tape.shape(shallow)));
        }
        if s.tape.shape(deep).get(1) != Some(&(g * g)) {
            return Err(Error::dim("bilateral", alloc::format!("expected {} tokens", g * g)));
        }
        let reference = reference_points(g, g);
        let d1 = self.deep.forward(s, deep, shallow, &reference, (g, g), self.drop_path)?;
        let s1 = match &self.shallow {
            Some(dir) => dir.forward(s, shallow, deep, &reference, (g, g), self.drop_path)?,
            None => shallow,
        };
        Ok((d1, s1))
    }
}

/// `M = σ(Λ(F_d) + Λ(F_s))`, output `F_d⊙M + F_s⊙(1 − M)`, where each Λ is
/// a per-token squeeze/restore MLP.
#[derive(Debug, Clone)]
pub struct FusionGate {
    pub deep: Mlp,
    pub shallow: Mlp,
}

impl FusionGate {
    pub fn new(b: &mut Builder, config: &ModelConfig) -> Result<Self> {
        let d = config.embed_dim;
        let hidden = d / config.gate_reduction;
        let mut s = b.scope("fusion");
        Ok(FusionGate {
            deep: Mlp::new(&mut s, "deep", d, hidden, d, Activation::Gelu, 0.0, false)?,
            shallow: Mlp::new(&mut s, "shallow", d, hidden, d, Activation::Gelu, 0.0, false)?,
        })
    }

    pub fn gate(&self, s: &mut Session, deep: Var, shallow: Var) -> Result<Var> {
        let ld = self.deep.forward(s, deep)?;
        let ls = self.shallow.forward(s, shallow)?;
        let l = s.tape.add(ld, ls)?;
        Ok(s.tape.sigmoid(l))
    }

    pub fn forward(&self, s: &mut Session, deep: Var, shallow: Var) -> Result<Var> {
        let m = self.gate(s, deep, shallow)?;
        s.tape.blend(deep, shallow, m)
    }
}
