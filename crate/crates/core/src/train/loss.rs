//! Smoothed soft-dice loss.
//!
//! `L = 1 - (2 * sum(p * g) + eps) / (sum(p) + sum(g) + eps)`

use crate::error::{Error, Result};
use crate::model::ops::{dot, sum, FeatureMap, Scalar};

pub const DEFAULT_SMOOTH_EPS: f64 = 1e-5;

fn check(pred: &[impl Copy], target: &[impl Copy]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::grid(&[target.len()], &[pred.len()]));
    }
    Ok(())
}

/// Loss of one probability channel against a {0,1} target.
pub fn soft_dice_loss<T: Scalar>(pred: &[T], target: &[T], eps: T) -> Result<T> {
    check(pred, target)?;
    let two = T::one() + T::one();
    let num = two * dot(pred, target) + eps;
    let den = sum(pred) + sum(target) + eps;
    Ok(T::one() - num / den)
}

/// Loss of one channel; writes `dL/dp` into `grad`.
pub fn soft_dice_loss_grad<T: Scalar>(
    pred: &[T],
    target: &[T],
    eps: T,
    grad: &mut [T],
) -> Result<T> {
    check(pred, target)?;
    assert_eq!(grad.len(), pred.len());
    let two = T::one() + T::one();
    let num = two * dot(pred, target) + eps;
    let den = sum(pred) + sum(target) + eps;
    let inv = T::one() / (den * den);
    for (d, &g) in grad.iter_mut().zip(target) {
        *d = -(two * g * den - num) * inv;
    }
    Ok(T::one() - num / den)
}

/// Mean of the per-channel losses; `grad` receives the gradient of the mean.
pub fn multi_channel_loss_grad<T: Scalar>(
    pred: &FeatureMap<T>,
    target: &FeatureMap<T>,
    eps: T,
    grad: &mut FeatureMap<T>,
) -> Result<T> {
    if pred.channels != target.channels || pred.dims != target.dims {
        return Err(Error::grid(
            &[
                target.channels,
                target.dims[0],
                target.dims[1],
                target.dims[2],
            ],
            &[pred.channels, pred.dims[0], pred.dims[1], pred.dims[2]],
        ));
    }
    let c = T::from(pred.channels).unwrap();
    let mut total = T::zero();
    for ch in 0..pred.channels {
        let g = grad.channel_mut(ch);
        total = total + soft_dice_loss_grad(pred.channel(ch), target.channel(ch), eps, g)?;
        for v in g.iter_mut() {
            *v = *v / c;
        }
    }
    Ok(total / c)
}

pub fn multi_channel_loss<T: Scalar>(
    pred: &FeatureMap<T>,
    target: &FeatureMap<T>,
    eps: T,
) -> Result<T> {
    let mut grad = FeatureMap::zeros(pred.channels, pred.dims);
    multi_channel_loss_grad(pred, target, eps, &mut grad)
}
