//! Block-by-block gradient checks of every differentiable piece of the model.

use alloc::vec::Vec;

use super::{check_gradients_with, check_module, FdOptions, GradCheck};
use crate::config::ModelConfig;
use crate::conv_branch::ConvBranch;
use crate::decoder::MaskDecoder;
use crate::fusion::{reference_points, BilateralBlock, DeformableAttention, FusionGate};
use crate::loss::{bce_loss, dice_loss};
use crate::nn::{Builder, ParamId, ParamRole, ParamStore, Session};
use crate::vit::{Attention, AttentionBlock, ChannelAttention, PatchEmbed};
use crate::{Result, Tape, Tensor, Var};

/// Maximum relative error a block may show.
pub const SUITE_TOLERANCE: f64 = 1e-4;

const STEP: f64 = 1e-4;

fn opts() -> FdOptions {
    FdOptions::precise(STEP)
}

pub const BLOCKS: [&str; 20] = [
    "conv2d",
    "depthwise_conv2d",
    "conv_transpose2d",
    "linear",
    "layer_norm",
    "batch_norm",
    "softmax",
    "gelu",
    "bilinear_sample",
    "attention",
    "patch_embed",
    "vit_block",
    "channel_attention",
    "conv_branch",
    "deformable_attention",
    "bilateral_block",
    "fusion_gate",
    "mask_decoder",
    "dice_loss",
    "bce_loss",
];

#[derive(Debug, Clone, PartialEq)]
pub struct BlockResult {
    pub name: &'static str,
    pub check: GradCheck,
    pub passed: bool,
}

/// Runs every block in [`BLOCKS`] at 64-bit on small random inputs. With
/// `fault = Some(name)` the analytic gradient of that block is doubled, which
/// must make exactly that block fail.
pub fn grad_check_suite(fault: Option<&str>) -> Result<Vec<BlockResult>> {
    BLOCKS
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let scale = if fault == Some(name) { 2.0 } else { 1.0 };
            let check = run_block(name, 1000 + i as u64, scale)?;
            Ok(BlockResult {
                name,
                passed: check.max_rel_err < SUITE_TOLERANCE,
                check,
            })
        })
        .collect()
}

/// `Σ y ⊙ w` with fixed random `w` of std `1/√numel`, keeping the scalar O(1).
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::randn(&shape, 1.0 / libm::sqrt(n as f64), &mut crate::seeded_rng(seed));
    tape.weighted_sum(y, w)
}

fn randn(shape: &[usize], rng: &mut crate::Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// A module built at a tiny configuration with randomized non-buffer parameters.
struct Fixture<M> {
    store: ParamStore,
    module: M,
    ids: Vec<ParamId>,
    values: Vec<Tensor>,
}

fn fixture<M>(seed: u64, build: impl FnOnce(&mut Builder) -> Result<M>) -> Result<Fixture<M>> {
    let mut store = ParamStore::new();
    let mut rng = crate::seeded_rng(seed);
    let module = build(&mut Builder::new(&mut store, &mut rng, ParamRole::Trainable))?;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (id, p) in store.iter() {
        if p.role != ParamRole::Buffer {
            ids.push(id);
            // zero-initialized projections would hide whole paths
            values.push(Tensor::randn(p.value.shape(), 0.5, &mut rng));
        }
    }
    Ok(Fixture {
        store,
        module,
        ids,
        values,
    })
}

impl<M> Fixture<M> {
    fn check(&self, inputs: &[Tensor], seed: u64, scale: f64, f: impl Fn(&M, &mut Session, &[Var]) -> Result<Var>) -> Result<GradCheck> {
        check_module(&self.store, &self.ids, &self.values, inputs, Some(seed), opts(), scale, |s, x| {
            let y = f(&self.module, s, x)?;
            project(&mut s.tape, y, seed)
        })
    }
}

fn kernel(inputs: &[Tensor], seed: u64, scale: f64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<GradCheck> {
    check_gradients_with(
        |t, x| {
            let y = f(t, x)?;
            project(t, y, seed)
        },
        inputs,
        opts(),
        scale,
    )
}

fn binary_target(shape: &[usize], rng: &mut crate::Rng) -> Tensor {
    let u = Tensor::rand_uniform(shape, 0.0, 1.0, rng);
    Tensor::from_fn(shape, |i| if u.data()[i] < 0.5 { 1.0 } else { 0.0 })
}

fn run_block(name: &str, seed: u64, scale: f64) -> Result<GradCheck> {
    let c = ModelConfig::tiny();
    let d = c.embed_dim;
    let n = c.grid() * c.grid();
    let rng = &mut crate::seeded_rng(seed);
    match name {
        "conv2d" => kernel(
            &[randn(&[2, 3, 5, 5], rng), randn(&[4, 3, 3, 3], rng), randn(&[4], rng)],
            seed,
            scale,
            |t, x| t.conv2d(x[0], x[1], Some(x[2]), 2, 1),
        ),
        "depthwise_conv2d" => kernel(
            &[randn(&[1, 4, 6, 6], rng), randn(&[4, 3, 3], rng), randn(&[4], rng)],
            seed,
            scale,
            |t, x| t.depthwise_conv2d(x[0], x[1], Some(x[2]), 1, 1),
        ),
        "conv_transpose2d" => kernel(
            &[randn(&[2, 4, 3, 3], rng), randn(&[4, 2, 2, 2], rng), randn(&[2], rng)],
            seed,
            scale,
            |t, x| t.conv_transpose2d(x[0], x[1], Some(x[2]), 2),
        ),
        "linear" => kernel(
            &[randn(&[2, 3, 5], rng), randn(&[5, 4], rng), randn(&[4], rng)],
            seed,
            scale,
            |t, x| t.linear(x[0], x[1], Some(x[2])),
        ),
        "layer_norm" => kernel(
            &[randn(&[2, 3, 8], rng), randn(&[8], rng), randn(&[8], rng)],
            seed,
            scale,
            |t, x| t.layer_norm(x[0], x[1], x[2], crate::nn::LN_EPS),
        ),
        "batch_norm" => kernel(
            &[randn(&[2, 3, 4, 4], rng), randn(&[3], rng), randn(&[3], rng)],
            seed,
            scale,
            |t, x| Ok(t.batch_norm_train(x[0], x[1], x[2], crate::nn::BN_EPS)?.0),
        ),
        "softmax" => kernel(&[randn(&[2, 3, 6], rng)], seed, scale, |t, x| Ok(t.softmax(x[0]))),
        "gelu" => kernel(&[randn(&[3, 7], rng)], seed, scale, |t, x| Ok(t.gelu(x[0]))),
        "bilinear_sample" => kernel(
            &[randn(&[1, 2, 5, 5], rng), Tensor::rand_uniform(&[1, 6, 2], 0.05, 0.95, rng)],
            seed,
            scale,
            |t, x| t.bilinear_sample(x[0], x[1]),
        ),
        "attention" => {
            let f = fixture(seed, |b| Attention::new(b, "attn", d, c.num_heads))?;
            let inputs = [randn(&[2, 3, d], rng), randn(&[2, 4, d], rng), randn(&[2, 4, d], rng)];
            f.check(&inputs, seed, scale, |m, s, x| m.forward(s, x[0], x[1], x[2]))
        }
        "patch_embed" => {
            let f = fixture(seed, |b| PatchEmbed::new(b, &c))?;
            let img = randn(&[1, 3, c.image_size_vit, c.image_size_vit], rng);
            f.check(&[img], seed, scale, |m, s, x| m.forward(s, x[0]))
        }
        "vit_block" => {
            let f = fixture(seed, |b| AttentionBlock::new(b, "block", &c))?;
            f.check(&[randn(&[2, n, d], rng)], seed, scale, |m, s, x| m.forward(s, x[0]))
        }
        "channel_attention" => {
            let f = fixture(seed, |b| ChannelAttention::new(b, "adapter", &c))?;
            f.check(&[randn(&[2, n, d], rng)], seed, scale, |m, s, x| m.forward(s, x[0]))
        }
        "conv_branch" => {
            let f = fixture(seed, |b| ConvBranch::new(b, &c))?;
            let img = randn(&[2, 3, c.image_size_conv, c.image_size_conv], rng);
            f.check(&[img], seed, scale, |m, s, x| m.forward(s, x[0]))
        }
        "deformable_attention" => {
            let f = fixture(seed, |b| DeformableAttention::new(b, "deform", &c))?;
            let g = c.grid();
            let reference = reference_points(g, g);
            f.check(&[randn(&[2, n, d], rng), randn(&[2, n, d], rng)], seed, scale, |m, s, x| {
                m.forward(s, x[0], &reference, x[1], (g, g))
            })
        }
        "bilateral_block" => {
            let f = fixture(seed, |b| BilateralBlock::new(b, "bilateral", &c, true))?;
            f.check(&[randn(&[2, n, d], rng), randn(&[2, n, d], rng)], seed, scale, |m, s, x| {
                let (a, b) = m.forward(s, x[0], x[1])?;
                s.tape.concat(&[a, b], 2)
            })
        }
        "fusion_gate" => {
            let f = fixture(seed, |b| FusionGate::new(b, &c))?;
            f.check(&[randn(&[2, n, d], rng), randn(&[2, n, d], rng)], seed, scale, |m, s, x| {
                m.forward(s, x[0], x[1])
            })
        }
        "mask_decoder" => {
            let f = fixture(seed, |b| MaskDecoder::new(b, &c))?;
            let pe = randn(&[n, d], rng);
            f.check(&[randn(&[1, n, d], rng), randn(&[1, 2, d], rng)], seed, scale, |m, s, x| {
                m.forward(s, x[0], &pe, x[1])
            })
        }
        "dice_loss" | "bce_loss" => {
            let target = binary_target(&[2, 1, 4, 4], rng);
            let dice = name == "dice_loss";
            check_gradients_with(
                |t, x| if dice { dice_loss(t, x[0], &target) } else { bce_loss(t, x[0], &target) },
                &[Tensor::randn(&[2, 1, 4, 4], 2.0, rng)],
                opts(),
                scale,
            )
        }
        other => Err(crate::Error::Contract(alloc::format!("unknown block {other}"))),
    }
}
