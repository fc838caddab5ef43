//! The assembled dual-branch model.

use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::conv_branch::ConvBranch;
use crate::data::{resize_bilinear, SegmentationSample};
use crate::decoder::MaskDecoder;
use crate::fusion::{BilateralBlock, FusionGate};
use crate::nn::{Builder, ParamRole, ParamStore, Session};
use crate::prompt::{BoxPrompt, PromptEncoder};
use crate::vit::VitBranch;
use crate::{Error, Result, Tensor, Var};

/// Parameter-name prefixes of the frozen set.
pub const FROZEN_PREFIXES: [&str; 4] = ["vit.patch_embed.", "vit.pos_embed", "vit.blocks.", "prompt."];

#[derive(Debug, Clone)]
pub struct DbSamModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vit: VitBranch,
    pub conv: Option<ConvBranch>,
    /// One block per ViT stage when bilateral fusion is enabled.
    pub bilateral: Vec<BilateralBlock>,
    pub gate: Option<FusionGate>,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
}

/// Encoder streams of one forward pass, all `[B, N, D]`.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub deep: Var,
    pub shallow: Option<Var>,
    /// What the decoder sees: the gated blend, or the deep stream without a gate.
    pub embedding: Var,
}

/// A batch prepared at both branch resolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `[B, 3, S_vit, S_vit]`
    pub vit: Tensor,
    /// `[B, 3, S_conv, S_conv]`
    pub conv: Tensor,
    pub boxes: Vec<BoxPrompt>,
    /// Side of the square frame the boxes are expressed in.
    pub box_frame: usize,
}

fn stack(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::dim("stack", "empty batch"))?;
    let mut shape = alloc::vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for t in images {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", first.shape(), t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

impl ModelInput {
    /// Stacks pre-resized `[3,S,S]` images.
    pub fn new(vit: &[Tensor], conv: &[Tensor], boxes: Vec<BoxPrompt>, box_frame: usize) -> Result<Self> {
        if vit.len() != boxes.len() || conv.len() != boxes.len() {
            return Err(Error::dim("model_input", "images and boxes differ in count"));
        }
        Ok(ModelInput {
            vit: stack(vit)?,
            conv: stack(conv)?,
            boxes,
            box_frame,
        })
    }

    /// Resizes each sample to both branch resolutions and uses its own box.
    /// Samples must share one square size.
    pub fn from_samples(samples: &[&SegmentationSample], config: &ModelConfig) -> Result<Self> {
        let frame = samples.first().map(|s| s.size()).ok_or_else(|| Error::dim("model_input", "empty batch"))?;
        if frame.0 != frame.1 || samples.iter().any(|s| s.size() != frame) {
            return Err(Error::dim("model_input", "samples must share one square size"));
        }
        let (sv, sc) = (config.image_size_vit, config.image_size_conv);
        let vit = samples.iter().map(|s| resize_bilinear(&s.image, (sv, sv))).collect::<Result<Vec<_>>>()?;
        let conv = samples.iter().map(|s| resize_bilinear(&s.image, (sc, sc))).collect::<Result<Vec<_>>>()?;
        Self::new(&vit, &conv, samples.iter().map(|s| s.bbox).collect(), frame.0)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

impl DbSamModel {
    /// Builds every submodule the ablation switches ask for. Frozen weights
    /// are drawn from `vit_seed`, trainable ones from `seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();

        let mut frozen_rng = crate::seeded_rng(config.vit_seed);
        let mut fb = Builder::new(&mut store, &mut frozen_rng, ParamRole::Frozen);
        let mut vit = VitBranch::new(&mut fb, &config)?;
        let prompt = PromptEncoder::new(&mut fb, &config)?;

        let mut rng = crate::seeded_rng(config.seed);
        let mut tb = Builder::new(&mut store, &mut rng, ParamRole::Trainable);
        if config.use_channel_attention {
            vit.attach_adapters(&mut tb, &config)?;
        }
        let conv = if config.use_bilateral || config.use_fusion {
            Some(ConvBranch::new(&mut tb, &config)?)
        } else {
            None
        };
        let bilateral = if config.use_bilateral {
            let stages = config.num_stages;
            (0..stages)
                .map(|i| {
                    // without a gate the last shallow update would feed nothing
                    let update_shallow = config.use_fusion || i + 1 < stages;
                    BilateralBlock::new(&mut tb, &alloc::format!("bilateral.{i}"), &config, update_shallow)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let gate = if config.use_fusion {
            Some(FusionGate::new(&mut tb, &config)?)
        } else {
            None
        };
        let decoder = MaskDecoder::new(&mut tb, &config)?;
        Ok(DbSamModel {
            config,
            store,
            vit,
            conv,
            bilateral,
            gate,
            prompt,
            decoder,
        })
    }

    /// Whether `name` belongs to the frozen set.
    pub fn is_frozen_name(name: &str) -> bool {
        FROZEN_PREFIXES.iter().any(|p| name.starts_with(p))
    }

    /// Runs both branches with stage-wise bilateral exchange and the final gate.
    pub fn encode(&self, s: &mut Session, vit_image: Var, conv_image: Var) -> Result<Encoded> {
        let mut deep = self.vit.patch_embed.forward(s, vit_image)?;
        let mut shallow = match &self.conv {
            Some(conv) => Some(conv.forward(s, conv_image)?),
            None => None,
        };
        for stage in 0..self.vit.num_stages() {
            deep = self.vit.stage_forward(s, deep, stage)?;
            if let (Some(block), Some(sh)) = (self.bilateral.get(stage), shallow) {
                let (d, f) = block.forward(s, deep, sh)?;
                deep = d;
                shallow = Some(f);
            }
        }
        let embedding = match (&self.gate, shallow) {
            (Some(gate), Some(sh)) => gate.forward(s, deep, sh)?,
            _ => deep,
        };
        Ok(Encoded { deep, shallow, embedding })
    }

    /// The frozen ViT alone: patch embedding and attention blocks.
    pub fn encode_frozen(&self, s: &mut Session, vit_image: Var) -> Result<Var> {
        self.vit.forward_frozen(s, vit_image)
    }

    /// Logits `[B, 1, 4g, 4g]` prompted by `input.boxes`.
    pub fn forward(&self, s: &mut Session, input: &ModelInput) -> Result<Var> {
        let vit = s.tape.constant(input.vit.clone());
        let conv = s.tape.constant(input.conv.clone());
        let enc = self.encode(s, vit, conv)?;
        self.decode(s, enc.embedding, &input.boxes, input.box_frame)
    }

    pub fn decode(&self, s: &mut Session, embedding: Var, boxes: &[BoxPrompt], box_frame: usize) -> Result<Var> {
        let prompt = self.prompt.encode(s, boxes, box_frame)?;
        let pe = self.prompt.dense_pe(s, self.config.grid());
        self.decoder.forward(s, embedding, &pe, prompt)
    }

    /// Eval-mode logits, one `[1, 4g, 4g]` map per sample.
    pub fn predict(&self, input: &ModelInput) -> Result<Vec<Tensor>> {
        let mut s = Session::eval(&self.store);
        let y = self.forward(&mut s, input)?;
        let side = self.config.mask_size();
        let v = s.tape.value(y);
        Ok(v.data()
            .chunks(side * side)
            .map(|c| Tensor::new(&[1, side, side], c.to_vec()).expect("chunk size"))
            .collect())
    }
}
