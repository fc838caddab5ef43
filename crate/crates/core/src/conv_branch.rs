//! Light-weight convolution branch producing the shallow stream.

use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::nn::{BatchNorm2d, Builder, Conv2d, Init, Session};
use crate::vit::map_to_tokens;
use crate::{Error, Result, Var};

/// Two stride-2 3×3 conv layers (to `D/2`, then `D` channels) and two 1×1
/// layers, each followed by batch norm and ReLU, then a final 1×1 projection.
/// A `S×S` input becomes a `D×(S/4)×(S/4)` map.
#[derive(Debug, Clone)]
pub struct ConvBranch {
    pub convs: Vec<Conv2d>,
    pub norms: Vec<BatchNorm2d>,
    pub out: Conv2d,
    pub image_size: usize,
}

impl ConvBranch {
    pub fn new(b: &mut Builder, config: &ModelConfig) -> Result<Self> {
        let d = config.out_channels;
        let mut s = b.scope("conv");
        // 3×3 stride-2 layers pad one zero before each axis and none after
        let layers = [(3, d / 2, 3, 2, (1, 0)), (d / 2, d, 3, 2, (1, 0)), (d, d, 1, 1, (0, 0)), (d, d, 1, 1, (0, 0))];
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for (i, &(cin, cout, k, stride, pad)) in layers.iter().enumerate() {
            let conv = Conv2d::without_bias(&mut s, &alloc::format!("layers.{i}.conv"), cin, cout, k, stride, 0, None)?;
            convs.push(conv.with_padding(pad.0, pad.1));
            norms.push(BatchNorm2d::new(&mut s, &alloc::format!("layers.{i}.bn"), cout)?);
        }
        let out = Conv2d::new(&mut s, "out", d, d, 1, 1, 0, Some(Init::FanIn { fan_in: d, gain: 1.0 }))?;
        Ok(ConvBranch {
            convs,
            norms,
            out,
            image_size: config.image_size_conv,
        })
    }

    /// `image[B,3,S,S]` → `[B,D,S/4,S/4]`.
    pub fn forward_map(&self, s: &mut Session, image: Var) -> Result<Var> {
        let sh = s.tape.shape(image);
        if sh.len() != 4 || sh[1] != 3 || sh[2] != self.image_size || sh[3] != self.image_size {
            return Err(Error::shape("conv_branch", sh, &[0, 3, self.image_size, self.image_size]));
        }
        let mut x = image;
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            x = conv.forward(s, x)?;
            x = bn.forward(s, x)?;
            x = s.tape.relu(x);
        }
        self.out.forward(s, x)
    }

    /// Same as [`forward_map`](Self::forward_map), flattened to `[B, N, D]` tokens.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<Var> {
        let m = self.forward_map(s, image)?;
        map_to_tokens(s, m)
    }
}
