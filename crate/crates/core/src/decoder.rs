//! Minimal two-way-attention mask decoder.

use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::nn::{Activation, Builder, Init, LayerNorm, Mlp, ParamId, Session};
use crate::vit::{tokens_to_map, Attention};
use crate::{Error, Result, Tensor, Var};

/// Token self-attention, token→image and image→token cross-attention and a
/// token MLP, each a residual update followed by layer norm. Positional
/// encodings are added to queries and keys only.
#[derive(Debug, Clone)]
pub struct TwoWayLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub token_to_image: Attention,
    pub norm2: LayerNorm,
    pub image_to_token: Attention,
    pub norm3: LayerNorm,
    pub mlp: Mlp,
    pub norm4: LayerNorm,
}

impl TwoWayLayer {
    fn new(b: &mut Builder, name: &str, config: &ModelConfig) -> Result<Self> {
        let (d, h) = (config.embed_dim, config.num_heads);
        let mut s = b.scope(name);
        Ok(TwoWayLayer {
            self_attn: Attention::new(&mut s, "self_attn", d, h)?,
            norm1: LayerNorm::new(&mut s, "norm1", d)?,
            token_to_image: Attention::new(&mut s, "token_to_image", d, h)?,
            norm2: LayerNorm::new(&mut s, "norm2", d)?,
            image_to_token: Attention::new(&mut s, "image_to_token", d, h)?,
            norm3: LayerNorm::new(&mut s, "norm3", d)?,
            mlp: Mlp::new(&mut s, "mlp", d, 2 * d, d, Activation::Relu, config.drop_rate, false)?,
            norm4: LayerNorm::new(&mut s, "norm4", d)?,
        })
    }

    /// Returns the updated `(tokens, image)`.
    fn forward(&self, s: &mut Session, tokens: Var, token_pe: Var, image: Var, image_pe: Var) -> Result<(Var, Var)> {
        let q = s.tape.add(tokens, token_pe)?;
        let a = self.self_attn.forward(s, q, q, tokens)?;
        let t = s.tape.add(tokens, a)?;
        let tokens = self.norm1.forward(s, t)?;

        let q = s.tape.add(tokens, token_pe)?;
        let k = s.tape.add_suffix(image, image_pe)?;
        let a = self.token_to_image.forward(s, q, k, image)?;
        let t = s.tape.add(tokens, a)?;
        let tokens = self.norm2.forward(s, t)?;

        let q = s.tape.add_suffix(image, image_pe)?;
        let k = s.tape.add(tokens, token_pe)?;
        let a = self.image_to_token.forward(s, q, k, tokens)?;
        let i = s.tape.add(image, a)?;
        let image = self.norm3.forward(s, i)?;

        let m = self.mlp.forward(s, tokens)?;
        let t = s.tape.add(tokens, m)?;
        let tokens = self.norm4.forward(s, t)?;
        Ok((tokens, image))
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub mask_token: ParamId,
    pub layers: Vec<TwoWayLayer>,
    /// `[D, D/4, 2, 2]`
    pub up1_weight: ParamId,
    pub up1_bias: ParamId,
    pub up_norm: LayerNorm,
    /// `[D/4, D/8, 2, 2]`
    pub up2_weight: ParamId,
    pub up2_bias: ParamId,
    /// Mask token → per-pixel weights of width `D/8`; last layer zero-initialized.
    pub hyper: Mlp,
    pub grid: usize,
    pub dim: usize,
}

impl MaskDecoder {
    pub fn new(b: &mut Builder, config: &ModelConfig) -> Result<Self> {
        let d = config.embed_dim;
        let mut s = b.scope("decoder");
        let mask_token = s.param("mask_token", &[1, 1, d], Init::Normal(1.0))?;
        let layers = (0..2)
            .map(|i| TwoWayLayer::new(&mut s, &alloc::format!("layers.{i}"), config))
            .collect::<Result<Vec<_>>>()?;
        let up1_weight = s.param("upscale.0.weight", &[d, d / 4, 2, 2], Init::FanIn { fan_in: d, gain: 1.0 })?;
        let up1_bias = s.param("upscale.0.bias", &[d / 4], Init::Zeros)?;
        let up_norm = LayerNorm::new(&mut s, "upscale.norm", d / 4)?;
        let up2_weight = s.param("upscale.1.weight", &[d / 4, d / 8, 2, 2], Init::FanIn { fan_in: d / 4, gain: 1.0 })?;
        let up2_bias = s.param("upscale.1.bias", &[d / 8], Init::Zeros)?;
        let hyper = Mlp::new(&mut s, "hyper", d, d, d / 8, Activation::Relu, 0.0, true)?;
        Ok(MaskDecoder {
            mask_token,
            layers,
            up1_weight,
            up1_bias,
            up_norm,
            up2_weight,
            up2_bias,
            hyper,
            grid: config.grid(),
            dim: d,
        })
    }

    /// Channel layer norm of a `[B,C,H,W]` map.
    fn norm2d(&self, s: &mut Session, x: Var) -> Result<Var> {
        let t = s.tape.permute(x, &[0, 2, 3, 1])?;
        let t = self.up_norm.forward(s, t)?;
        s.tape.permute(t, &[0, 3, 1, 2])
    }

    /// `image[B,N,D]` with positional encoding `image_pe[N,D]` and prompt
    /// tokens `[B,2,D]` → logits `[B,1,4g,4g]`.
    pub fn forward(&self, s: &mut Session, image: Var, image_pe: &Tensor, prompt: Var) -> Result<Var> {
        let (g, d) = (self.grid, self.dim);
        let is = s.tape.shape(image).to_vec();
        let ps = s.tape.shape(prompt).to_vec();
        if is.len() != 3 || is[1] != g * g || is[2] != d {
            return Err(Error::dim("mask_decoder", alloc::format!("image embedding {is:?}, expected [B,{},{d}]", g * g)));
        }
        if ps != [is[0], 2, d] || image_pe.shape() != [g * g, d] {
            return Err(Error::dim("mask_decoder", alloc::format!("prompt tokens {ps:?} do not match image embedding {is:?}")));
        }
        let b = is[0];
        let mask_token = s.param(self.mask_token);
        let mask_token = s.tape.reshape(mask_token, &[1, d])?;
        let mask_token = s.tape.broadcast_batch(mask_token, b);
        let mask_token = s.tape.reshape(mask_token, &[b, 1, d])?;
        let tokens0 = s.tape.concat(&[mask_token, prompt], 1)?;
        let image_pe = s.tape.constant(image_pe.clone());

        let (mut tokens, mut img) = (tokens0, image);
        for layer in &self.layers {
            (tokens, img) = layer.forward(s, tokens, tokens0, img, image_pe)?;
        }

        let map = tokens_to_map(s, img, (g, g))?;
        let w1 = s.param(self.up1_weight);
        let b1 = s.param(self.up1_bias);
        let up = s.tape.conv_transpose2d(map, w1, Some(b1), 2)?;
        let up = self.norm2d(s, up)?;
        let up = s.tape.gelu(up);
        let w2 = s.param(self.up2_weight);
        let b2 = s.param(self.up2_bias);
        let up = s.tape.conv_transpose2d(up, w2, Some(b2), 2)?;
        let up = s.tape.gelu(up);

        let out_tok = s.tape.slice(tokens, 1, 0, 1)?;
        let hyper = self.hyper.forward(s, out_tok)?;
        let (c, side) = (d / 8, 4 * g);
        let up = s.tape.reshape(up, &[b, c, side * side])?;
        let logits = s.tape.bmm(hyper, up)?;
        s.tape.reshape(logits, &[b, 1, side, side])
    }
}
