//! Architectural and training hyperparameters.

use alloc::string::String;

use crate::{Error, Result};

/// Every hyperparameter of the model and its training run.
///
/// Defaults are the desk-scale stand-ins: a 128 px ViT input with 16 px
/// patches (8×8 token grid) and a 32 px convolution-branch input keep the
/// 4:1 resolution ratio between the two branches; optimizer settings follow
/// the reference training recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    // ViT branch
    pub image_size_vit: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub num_stages: usize,
    pub mlp_ratio: usize,
    pub se_reduction: usize,
    pub drop_path_rate: f64,
    /// Seed of the pseudo-pretrained frozen weights (ViT and prompt encoder).
    pub vit_seed: u64,
    /// Optional checkpoint holding the frozen weights.
    pub pretrained: Option<String>,

    // Convolution branch
    pub image_size_conv: usize,
    pub out_channels: usize,

    // Deformable attention
    pub deform_heads: usize,
    pub num_points: usize,
    pub offset_scale: f64,

    // Fusion gate
    pub gate_reduction: usize,

    // Ablation switches
    pub use_channel_attention: bool,
    pub use_bilateral: bool,
    pub use_fusion: bool,

    // Training
    pub drop_rate: f64,
    pub lr0: f64,
    pub epochs: usize,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Box jitter in pixels at a 256 px reference resolution.
    pub max_shift: f64,

    // Evaluation
    pub tolerance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size_vit: 128,
            patch_size: 16,
            embed_dim: 64,
            num_heads: 4,
            depth: 4,
            num_stages: 2,
            mlp_ratio: 4,
            se_reduction: 4,
            drop_path_rate: 0.4,
            vit_seed: 2024,
            pretrained: None,
            image_size_conv: 32,
            out_channels: 64,
            deform_heads: 4,
            num_points: 4,
            offset_scale: 1.0,
            gate_reduction: 4,
            use_channel_attention: true,
            use_bilateral: true,
            use_fusion: true,
            drop_rate: 0.4,
            lr0: 1e-4,
            epochs: 12,
            poly_power: 0.9,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            seed: 0,
            max_shift: 20.0,
            tolerance: 1.0,
        }
    }
}

/// Rows of the component ablation, from the decoder-only baseline to the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    DecoderOnly,
    ChannelAttention,
    Bilateral,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::DecoderOnly,
        Ablation::ChannelAttention,
        Ablation::Bilateral,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::DecoderOnly => "decoder-only",
            Ablation::ChannelAttention => "+channel-attention",
            Ablation::Bilateral => "+bilateral",
            Ablation::Full => "+fusion",
        }
    }

    /// `config` with the ablation switches set for this row.
    pub fn apply(self, config: &ModelConfig) -> ModelConfig {
        let (ca, bi, fu) = match self {
            Ablation::DecoderOnly => (false, false, false),
            Ablation::ChannelAttention => (true, false, false),
            Ablation::Bilateral => (true, true, false),
            Ablation::Full => (true, true, true),
        };
        ModelConfig {
            use_channel_attention: ca,
            use_bilateral: bi,
            use_fusion: fu,
            ..config.clone()
        }
    }
}

fn divisible(what: &str, n: usize, by: usize) -> Result<()> {
    if by == 0 || !n.is_multiple_of(by) {
        return Err(Error::Config(alloc::format!("{what}: {n} is not divisible by {by}")));
    }
    Ok(())
}

fn rate(what: &str, r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(alloc::format!("{what} = {r} is outside [0, 1]")));
    }
    Ok(())
}

impl ModelConfig {
    /// Token grid extent (per side) shared by both branches.
    pub fn grid(&self) -> usize {
        self.image_size_vit / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Side of the decoder's logit map.
    pub fn mask_size(&self) -> usize {
        4 * self.grid()
    }

    pub fn blocks_per_stage(&self) -> usize {
        self.depth / self.num_stages
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.depth == 0 {
            return Err(Error::Config("patch_size, embed_dim and depth must be positive".into()));
        }
        divisible("image_size_vit / patch_size", self.image_size_vit, self.patch_size)?;
        divisible("embed_dim / num_heads", self.embed_dim, self.num_heads)?;
        divisible("embed_dim / deform_heads", self.embed_dim, self.deform_heads)?;
        divisible("embed_dim / se_reduction", self.embed_dim, self.se_reduction)?;
        divisible("embed_dim / gate_reduction", self.embed_dim, self.gate_reduction)?;
        divisible("embed_dim / 8 (decoder upsampling widths)", self.embed_dim, 8)?;
        divisible("depth / num_stages", self.depth, self.num_stages)?;
        divisible("image_size_conv / 4", self.image_size_conv, 4)?;
        if self.image_size_conv / 4 != self.grid() {
            return Err(Error::Config(alloc::format!(
                "convolution branch grid {} (image_size_conv / 4) does not match ViT token grid {}",
                self.image_size_conv / 4,
                self.grid()
            )));
        }
        if self.out_channels != self.embed_dim {
            return Err(Error::Config(alloc::format!(
                "out_channels {} must equal embed_dim {}",
                self.out_channels, self.embed_dim
            )));
        }
        if self.num_points == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("num_points and mlp_ratio must be positive".into()));
        }
        rate("drop_rate", self.drop_rate)?;
        rate("drop_path_rate", self.drop_path_rate)?;
        rate("beta1", self.beta1)?;
        rate("beta2", self.beta2)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr0 >= 0.0 && self.weight_decay >= 0.0 && self.poly_power >= 0.0) {
            return Err(Error::Config("lr0, weight_decay and poly_power must be non-negative".into()));
        }
        if !(self.tolerance >= 0.0 && self.max_shift >= 0.0) {
            return Err(Error::Config("tolerance and max_shift must be non-negative".into()));
        }
        Ok(())
    }

    /// A tiny configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size_vit: 16,
            patch_size: 8,
            embed_dim: 8,
            num_heads: 2,
            depth: 2,
            num_stages: 2,
            mlp_ratio: 2,
            se_reduction: 2,
            image_size_conv: 8,
            out_channels: 8,
            deform_heads: 2,
            num_points: 2,
            gate_reduction: 2,
            batch_size: 2,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.grid(), 8);
        assert_eq!(c.mask_size(), 32);
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let c = ModelConfig {
            image_size_conv: 64,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rates_outside_unit_interval_rejected() {
        let c = ModelConfig {
            drop_rate: 1.5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn ablation_rows_toggle_switches() {
        let base = ModelConfig::default();
        let d = Ablation::DecoderOnly.apply(&base);
        assert!(!d.use_channel_attention && !d.use_bilateral && !d.use_fusion);
        let f = Ablation::Full.apply(&base);
        assert!(f.use_channel_attention && f.use_bilateral && f.use_fusion);
    }
}
