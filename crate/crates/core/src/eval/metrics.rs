use crate::error::{Error, Result};
use crate::volume::BinaryMask;

/// Dice overlap `2|P ∩ G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::grid(&gt.dims(), &pred.dims()));
    }
    Ok(dice_bits(
        pred.grid.data().iter().map(|&v| v == 1),
        gt.grid.data().iter().map(|&v| v == 1),
    ))
}

/// Dice over paired boolean streams of equal length.
pub fn dice_bits(pred: impl Iterator<Item = bool>, gt: impl Iterator<Item = bool>) -> f64 {
    let (mut inter, mut np, mut ng) = (0u64, 0u64, 0u64);
    for (p, g) in pred.zip(gt) {
        inter += (p && g) as u64;
        np += p as u64;
        ng += g as u64;
    }
    if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    }
}
