//! Training objective: binary cross-entropy plus soft dice, both on logits.

use crate::{Result, Tape, Tensor, Var};

pub const DICE_EPS: f64 = 1e-5;

pub fn dice_loss(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    tape.dice_with_logits(logits, target, DICE_EPS)
}

pub fn bce_loss(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    tape.bce_with_logits(logits, target)
}

/// Unweighted sum `bce + dice`.
pub fn combined_loss(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    let b = bce_loss(tape, logits, target)?;
    let d = dice_loss(tape, logits, target)?;
    tape.add(b, d)
}
