//! Training objective: L = 0.5*BCE(logits, y) + Dice(sigmoid(logits), y).

use crate::error::{Error, Result};
use crate::tensor::{
    activation, add, bce_with_logits, dice_loss_kernel, scale, Activation, Scalar, Tape, Tensor,
};

pub const DICE_SMOOTH: f64 = 1.0;

fn expect_mask_shapes<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let (_, c, _, _) = a.dims4(op)?;
    if c != 1 {
        return Err(Error::Shape {
            op,
            detail: format!("expected single-channel masks, got {:?}", a.shape()),
        });
    }
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            detail: format!("prediction {:?} vs target {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn expect_binary<T: Scalar>(op: &'static str, target: &Tensor<T>) -> Result<()> {
    if target.data().iter().any(|&v| v != T::ZERO && v != T::ONE) {
        return Err(Error::Validation(format!("{op}: target mask contains values outside {{0,1}}")));
    }
    Ok(())
}

/// Mean binary cross-entropy on logits (stable form; no probability clamping).
pub fn bce_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<Tensor<T>> {
    expect_mask_shapes("bce_loss", logits, target)?;
    expect_binary("bce_loss", target)?;
    bce_with_logits(tape, logits, target)
}

/// Smoothed Dice loss on probabilities, sums taken over the whole batch.
pub fn dice_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: &Tensor<T>,
    target: &Tensor<T>,
    smooth: f64,
) -> Result<Tensor<T>> {
    expect_mask_shapes("dice_loss", probs, target)?;
    expect_binary("dice_loss", target)?;
    if !(smooth > 0.0) {
        return Err(Error::Validation(format!("dice_loss: smooth must be > 0, got {smooth}")));
    }
    if probs.data().iter().any(|&v| v < T::ZERO || v > T::ONE) {
        return Err(Error::Validation(
            "dice_loss: probabilities outside [0,1]; pass sigmoid outputs, not logits".into(),
        ));
    }
    dice_loss_kernel(tape, probs, target, smooth)
}

/// 0.5*BCE + Dice, with the Dice term fed by sigmoid(logits).
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<Tensor<T>> {
    combined_loss_with(tape, logits, target, 0.5, DICE_SMOOTH)
}

/// Combined loss with configurable BCE weight and Dice smooth constant.
pub fn combined_loss_with<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &Tensor<T>,
    target: &Tensor<T>,
    bce_weight: f64,
    dice_smooth: f64,
) -> Result<Tensor<T>> {
    if !(bce_weight >= 0.0) {
        return Err(Error::Validation(format!(
            "combined_loss: bce_weight must be >= 0, got {bce_weight}"
        )));
    }
    if !(dice_smooth > 0.0) {
        return Err(Error::Validation(format!(
            "combined_loss: dice_smooth must be > 0, got {dice_smooth}"
        )));
    }
    let bce = bce_loss(tape, logits, target)?;
    let probs = activation(tape, logits, Activation::Sigmoid);
    let dice = dice_loss_kernel(tape, &probs, target, dice_smooth)?;
    let weighted_bce = scale(tape, &bce, T::from_f64(bce_weight));
    add(tape, &weighted_bce, &dice)
}
