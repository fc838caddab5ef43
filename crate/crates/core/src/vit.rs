//! ViT branch: frozen patch embedding and attention blocks, each followed by a
//! trainable channel-attention adapter.

use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::nn::{Activation, Builder, Conv2d, Init, LayerNorm, Linear, Mlp, ParamId, ParamRole, Session};
use crate::{Error, Result, Tensor, Var};

/// Multi-head scaled dot-product attention with separate q/k/v projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Attention {
            q: Linear::new(&mut s, "q", dim, dim)?,
            k: Linear::new(&mut s, "k", dim, dim)?,
            v: Linear::new(&mut s, "v", dim, dim)?,
            proj: Linear::new(&mut s, "proj", dim, dim)?,
            heads,
        })
    }

    /// `query[B,Nq,D]` attends over `key[B,Nk,D]` / `value[B,Nk,D]`.
    pub fn forward(&self, s: &mut Session, query: Var, key: Var, value: Var) -> Result<Var> {
        let q = self.q.forward(s, query)?;
        let k = self.k.forward(s, key)?;
        let v = self.v.forward(s, value)?;
        let o = attend(s, q, k, v, self.heads)?;
        self.proj.forward(s, o)
    }
}

/// Softmax attention over already-projected `q[B,Nq,D]`, `k[B,Nk,D]`, `v[B,Nk,D]`.
pub fn attend(s: &mut Session, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let qs = s.tape.shape(q).to_vec();
    let ks = s.tape.shape(k).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || s.tape.shape(v) != ks.as_slice() {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let (b, nq, d) = (qs[0], qs[1], qs[2]);
    let nk = ks[1];
    if d % heads != 0 {
        return Err(Error::dim("attention", "dim not divisible by heads"));
    }
    let dh = d / heads;
    let split = |s: &mut Session, x: Var, n: usize, perm: &[usize], shape: [usize; 3]| -> Result<Var> {
        let x = s.tape.reshape(x, &[b, n, heads, dh])?;
        let x = s.tape.permute(x, perm)?;
        s.tape.reshape(x, &shape)
    };
    let qh = split(s, q, nq, &[0, 2, 1, 3], [b * heads, nq, dh])?;
    let kt = split(s, k, nk, &[0, 2, 3, 1], [b * heads, dh, nk])?;
    let vh = split(s, v, nk, &[0, 2, 1, 3], [b * heads, nk, dh])?;
    let scores = s.tape.bmm(qh, kt)?;
    let scores = s.tape.scale(scores, 1.0 / libm::sqrt(dh as f64));
    let weights = s.tape.softmax(scores);
    let o = s.tape.bmm(weights, vh)?;
    let o = s.tape.reshape(o, &[b, heads, nq, dh])?;
    let o = s.tape.permute(o, &[0, 2, 1, 3])?;
    s.tape.reshape(o, &[b, nq, d])
}

/// `[B,N,D]` tokens on a `g×g` grid → `[B,D,g,g]` map.
pub fn tokens_to_map(s: &mut Session, x: Var, grid: (usize, usize)) -> Result<Var> {
    let sh = s.tape.shape(x).to_vec();
    let t = s.tape.permute(x, &[0, 2, 1])?;
    s.tape.reshape(t, &[sh[0], sh[2], grid.0, grid.1])
}

/// `[B,D,H,W]` map → `[B,H·W,D]` tokens.
pub fn map_to_tokens(s: &mut Session, x: Var) -> Result<Var> {
    let sh = s.tape.shape(x).to_vec();
    let t = s.tape.reshape(x, &[sh[0], sh[1], sh[2] * sh[3]])?;
    s.tape.permute(t, &[0, 2, 1])
}

/// Fixed 2-D sine-cosine table `[g·g, D]`: the first half of the channels
/// encodes the column, the second half the row.
pub fn sincos_pos_embed(grid: usize, dim: usize) -> Tensor {
    let quarter = dim / 4;
    Tensor::from_fn(&[grid * grid, dim], |i| {
        let (tok, c) = (i / dim, i % dim);
        let (row, col) = ((tok / grid) as f64, (tok % grid) as f64);
        let (pos, c) = if c < dim / 2 { (col, c) } else { (row, c - dim / 2) };
        if quarter == 0 {
            return 0.0;
        }
        let k = (c % quarter) as f64;
        let omega = 1.0 / libm::pow(100.0, k / quarter as f64);
        if c < quarter {
            libm::sin(pos * omega)
        } else {
            libm::cos(pos * omega)
        }
    })
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub pos_embed: ParamId,
    pub image_size: usize,
    pub patch_size: usize,
}

impl PatchEmbed {
    pub fn new(b: &mut Builder, config: &ModelConfig) -> Result<Self> {
        let (p, d) = (config.patch_size, config.embed_dim);
        let proj = Conv2d::new(b, "patch_embed", 3, d, p, p, 0, Some(Init::FanIn { fan_in: 3 * p * p, gain: 1.0 }))?;
        let pos = sincos_pos_embed(config.grid(), d);
        let pos_embed = b.store.add(&b.full_name("pos_embed"), pos, ParamRole::Frozen)?;
        Ok(PatchEmbed {
            proj,
            pos_embed,
            image_size: config.image_size_vit,
            patch_size: p,
        })
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// `image[B,3,H,W]` → tokens `[B, (H/p)·(W/p), D]`.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<Var> {
        let sh = s.tape.shape(image);
        if sh.len() != 4 || sh[1] != 3 || sh[2] != self.image_size || sh[3] != self.image_size {
            return Err(Error::shape("patch_embed", sh, &[0, 3, self.image_size, self.image_size]));
        }
        let x = self.proj.forward(s, image)?;
        let x = map_to_tokens(s, x)?;
        let pos = s.param(self.pos_embed);
        s.tape.add_suffix(x, pos)
    }
}

/// Pre-norm transformer block: `x + attn(LN(x))`, then `x + mlp(LN(x))`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl AttentionBlock {
    pub fn new(b: &mut Builder, name: &str, config: &ModelConfig) -> Result<Self> {
        let d = config.embed_dim;
        let mut s = b.scope(name);
        Ok(AttentionBlock {
            norm1: LayerNorm::new(&mut s, "norm1", d)?,
            attn: Attention::new(&mut s, "attn", d, config.num_heads)?,
            norm2: LayerNorm::new(&mut s, "norm2", d)?,
            mlp: Mlp::new(&mut s, "mlp", d, d * config.mlp_ratio, d, Activation::Gelu, 0.0, false)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.norm1.forward(s, x)?;
        let h = self.attn.forward(s, h, h, h)?;
        let x = s.tape.add(x, h)?;
        let h = self.norm2.forward(s, x)?;
        let h = self.mlp.forward(s, h)?;
        s.tape.add(x, h)
    }
}

/// Local adapter: `x + Conv1×1(SE(DWConv3×3(LN(x))))` with drop-path on the
/// residual branch. LN normalizes channels at each spatial site.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub norm: LayerNorm,
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub se_reduce: Linear,
    pub se_expand: Linear,
    pub proj: Conv2d,
    pub grid: usize,
    pub drop_path: f64,
}

impl ChannelAttention {
    pub fn new(b: &mut Builder, name: &str, config: &ModelConfig) -> Result<Self> {
        let d = config.embed_dim;
        let mut s = b.scope(name);
        let norm = LayerNorm::new(&mut s, "norm", d)?;
        let dw_weight = s.param("dwconv.weight", &[d, 3, 3], Init::FanIn { fan_in: 9, gain: 1.0 })?;
        let dw_bias = s.param("dwconv.bias", &[d], Init::Zeros)?;
        let se_reduce = Linear::new(&mut s, "se.reduce", d, d / config.se_reduction)?;
        let se_expand = Linear::new(&mut s, "se.expand", d / config.se_reduction, d)?;
        let proj = Conv2d::new(&mut s, "proj", d, d, 1, 1, 0, Some(Init::Zeros))?;
        Ok(ChannelAttention {
            norm,
            dw_weight,
            dw_bias,
            se_reduce,
            se_expand,
            proj,
            grid: config.grid(),
            drop_path: config.drop_path_rate,
        })
    }

    /// The residual branch alone, `[B,N,D] → [B,N,D]`.
    pub fn branch(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.norm.forward(s, x)?;
        let h = tokens_to_map(s, h, (self.grid, self.grid))?;
        let w = s.param(self.dw_weight);
        let bias = s.param(self.dw_bias);
        let h = s.tape.depthwise_conv2d(h, w, Some(bias), 1, 1)?;
        // squeeze and excitation
        let pooled = s.tape.global_avg_pool(h)?;
        let e = self.se_reduce.forward(s, pooled)?;
        let e = s.tape.relu(e);
        let e = self.se_expand.forward(s, e)?;
        let e = s.tape.sigmoid(e);
        let h = s.tape.scale_channels(h, e)?;
        let h = self.proj.forward(s, h)?;
        map_to_tokens(s, h)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let sh = s.tape.shape(x);
        if sh.len() != 3 || sh[1] != self.grid * self.grid {
            return Err(Error::dim("channel_attention", alloc::format!("tokens {sh:?} do not fit a {0}x{0} grid", self.grid)));
        }
        let h = self.branch(s, x)?;
        let h = s.drop_path(h, self.drop_path)?;
        s.tape.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct VitBranch {
    pub patch_embed: PatchEmbed,
    pub blocks: Vec<AttentionBlock>,
    /// One adapter per attention block when channel attention is enabled.
    pub adapters: Vec<ChannelAttention>,
    pub blocks_per_stage: usize,
}

impl VitBranch {
    /// The pretrained stack; adapters are attached separately.
    pub fn new(frozen: &mut Builder, config: &ModelConfig) -> Result<Self> {
        let mut fz = frozen.scope("vit");
        let patch_embed = PatchEmbed::new(&mut fz, config)?;
        let blocks = (0..config.depth)
            .map(|i| AttentionBlock::new(&mut fz, &alloc::format!("blocks.{i}"), config))
            .collect::<Result<Vec<_>>>()?;
        Ok(VitBranch {
            patch_embed,
            blocks,
            adapters: Vec::new(),
            blocks_per_stage: config.blocks_per_stage(),
        })
    }

    /// Registers one trainable adapter per attention block.
    pub fn attach_adapters(&mut self, trainable: &mut Builder, config: &ModelConfig) -> Result<()> {
        let mut tr = trainable.scope("vit");
        self.adapters = (0..config.depth)
            .map(|i| ChannelAttention::new(&mut tr, &alloc::format!("adapters.{i}"), config))
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.blocks.len() / self.blocks_per_stage
    }

    /// Runs the (attention block → adapter) pairs of one stage.
    pub fn stage_forward(&self, s: &mut Session, mut x: Var, stage: usize) -> Result<Var> {
        let start = stage * self.blocks_per_stage;
        for i in start..start + self.blocks_per_stage {
            x = self.blocks[i].forward(s, x)?;
            if let Some(adapter) = self.adapters.get(i) {
                x = adapter.forward(s, x)?;
            }
        }
        Ok(x)
    }

    /// Patch embedding plus every stage with nothing interleaved.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<Var> {
        let mut x = self.patch_embed.forward(s, image)?;
        for stage in 0..self.num_stages() {
            x = self.stage_forward(s, x, stage)?;
        }
        Ok(x)
    }

    /// Frozen stack only, skipping the adapters.
    pub fn forward_frozen(&self, s: &mut Session, image: Var) -> Result<Var> {
        let mut x = self.patch_embed.forward(s, image)?;
        for block in &self.blocks {
            x = block.forward(s, x)?;
        }
        Ok(x)
    }
}
