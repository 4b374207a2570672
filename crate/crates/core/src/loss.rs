//! ROI masking of network outputs and the two training losses.
//!
//! Channel `c` of a four-class output predicts label `LABEL_OF_CHANNEL[c]`;
//! channel 0 is background.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::Region;
use crate::tensor::{Scalar, Tensor};
use crate::volume::{LabelVolume, Mask};

pub const LABEL_OF_CHANNEL: [u8; 4] = [0, 1, 2, 4];
pub const DICE_EPSILON: f64 = 1e-5;
pub const LOG_CLAMP: f64 = 1e-12;

pub fn channel_of_label(label: u8) -> Result<usize> {
    LABEL_OF_CHANNEL
        .iter()
        .position(|&l| l == label)
        .ok_or_else(|| Error::invalid(format!("label value {label} is not one of 0, 1, 2, 4")))
}

/// Output channels whose sum is the region probability.
pub fn region_channels(region: Region) -> Vec<usize> {
    region
        .labels()
        .iter()
        .map(|&l| channel_of_label(l).expect("region labels are valid"))
        .collect()
}

fn check_spatial<T: Scalar>(g: &Graph<T>, probs: Var, dims: [usize; 3], op: &'static str) -> Result<[usize; 5]> {
    let s = g.value(probs).dims5(op)?;
    if s[0] != 1 {
        return Err(Error::shape(op, format!("batch must be 1, got {}", s[0])));
    }
    if [s[2], s[3], s[4]] != dims {
        return Err(Error::shape(
            op,
            format!("probabilities cover {:?}, mask {dims:?}", [s[2], s[3], s[4]]),
        ));
    }
    Ok(s)
}

/// Inside `mask` the probabilities pass through; outside every channel is
/// multiplied by 0 and the background channel then set to 1. Upstream
/// gradients at outside voxels are exactly zero.
pub fn apply_roi_mask<T: Scalar>(g: &mut Graph<T>, probs: Var, mask: &Mask) -> Result<Var> {
    let [_, c, d, h, w] = check_spatial(g, probs, mask.dims(), "apply_roi_mask")?;
    let vol = d * h * w;
    let mut keep = Tensor::zeros(&[1, c, d, h, w]);
    let mut fill = Tensor::zeros(&[1, c, d, h, w]);
    for (i, &inside) in mask.bits().iter().enumerate() {
        if inside {
            for ch in 0..c {
                keep.data_mut()[ch * vol + i] = T::one();
            }
        } else {
            fill.data_mut()[i] = T::one();
        }
    }
    let keep = g.constant(keep);
    let fill = g.constant(fill);
    let kept = g.mul(probs, keep)?;
    g.add(kept, fill)
}

/// Network input restricted to the ROI: outside voxels are set to 0, whatever
/// they held, so nothing outside the mask reaches any activation.
pub fn mask_input<T: Scalar>(input: &Tensor<T>, roi: &Mask) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = input.dims5("mask_input")?;
    if [d, h, w] != roi.dims() {
        return Err(Error::shape("mask_input", format!("input covers {:?}, mask {:?}", [d, h, w], roi.dims())));
    }
    let vol = d * h * w;
    let mut out = input.clone();
    for plane in out.data_mut().chunks_mut(vol).take(n * c) {
        for (v, &inside) in plane.iter_mut().zip(roi.bits()) {
            if !inside {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}

/// The un-smoothed ratio `R = Σ p·l / (Σ p + Σ l)` over ROI voxels; `None`
/// when the denominator is 0.
pub fn dice_ratio(p: &[f64], l: &[bool], roi: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for ((&pi, &li), &ri) in p.iter().zip(l).zip(roi) {
        if ri {
            let li = if li { 1.0 } else { 0.0 };
            num += pi * li;
            den += pi + li;
        }
    }
    (den != 0.0).then(|| num / den)
}

/// `1 - (2 Σ p·l + ε) / (Σ p + Σ l + ε)` on a single-channel probability map
/// `[1, 1, D, H, W]`. With ε = 0 this is `1 - 2R`.
pub fn dice_loss_binary<T: Scalar>(g: &mut Graph<T>, tumor: Var, labels: &Mask, roi: &Mask, epsilon: f64) -> Result<Var> {
    let [_, c, ..] = check_spatial(g, tumor, labels.dims(), "dice_loss_binary")?;
    if c != 1 {
        return Err(Error::shape("dice_loss_binary", format!("expected one tumor channel, got {c}")));
    }
    if roi.dims() != labels.dims() {
        return Err(Error::shape("dice_loss_binary", "labels and roi dims differ"));
    }
    g.soft_dice(tumor, &[0], labels.bits(), roi.bits(), T::of(epsilon))
}

pub fn soft_dice_region<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    labels: &LabelVolume,
    region: Region,
    roi: &Mask,
    epsilon: f64,
) -> Result<Var> {
    let [_, c, ..] = check_spatial(g, probs, labels.dims(), "soft_dice_region")?;
    if c != LABEL_OF_CHANNEL.len() {
        return Err(Error::shape("soft_dice_region", format!("expected 4 class channels, got {c}")));
    }
    let target = labels.indicator(region.labels());
    g.soft_dice(probs, &region_channels(region), target.bits(), roi.bits(), T::of(epsilon))
}

/// Mean (or sum) over ROI voxels of `-ln max(p_true, 1e-12)`.
pub fn cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    labels: &LabelVolume,
    roi: &Mask,
    reduction: Reduction,
) -> Result<Var> {
    let [_, c, ..] = check_spatial(g, probs, labels.dims(), "cross_entropy")?;
    let classes = labels
        .data()
        .iter()
        .map(|&l| channel_of_label(l))
        .collect::<Result<Vec<_>>>()?;
    if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
        return Err(Error::shape("cross_entropy", format!("label channel {bad} outside {c} outputs")));
    }
    let mean = g.cross_entropy(probs, &classes, roi.bits(), T::of(LOG_CLAMP))?;
    Ok(match reduction {
        Reduction::Mean => mean,
        Reduction::Sum => g.scale(mean, T::of(roi.count() as f64)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// weight of the three region dice losses
    pub dice_weight: f64,
    pub epsilon: f64,
    pub cross_entropy: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_weight: 0.5,
            epsilon: DICE_EPSILON,
            cross_entropy: Reduction::Mean,
        }
    }
}

pub struct CombinedLoss {
    pub total: Var,
    pub cross_entropy: Var,
    /// in [`Region::ALL`] order
    pub dice: [Var; 3],
}

/// `XE + w · (D_WT + D_ET + D_TC)`.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    labels: &LabelVolume,
    roi: &Mask,
    cfg: &LossConfig,
) -> Result<CombinedLoss> {
    let xe = cross_entropy(g, probs, labels, roi, cfg.cross_entropy)?;
    let mut dice = [xe; 3];
    for (slot, r) in dice.iter_mut().zip(Region::ALL) {
        *slot = soft_dice_region(g, probs, labels, r, roi, cfg.epsilon)?;
    }
    let s = g.add(dice[0], dice[1])?;
    let s = g.add(s, dice[2])?;
    let s = g.scale(s, T::of(cfg.dice_weight));
    let total = g.add(xe, s)?;
    Ok(CombinedLoss {
        total,
        cross_entropy: xe,
        dice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_mapping() {
        assert_eq!(channel_of_label(4).unwrap(), 3);
        assert!(channel_of_label(3).is_err());
        assert_eq!(region_channels(Region::Whole), vec![1, 2, 3]);
        assert_eq!(region_channels(Region::Core), vec![1, 3]);
        assert_eq!(region_channels(Region::Enhancing), vec![3]);
    }

    #[test]
    fn ratio_examples() {
        let all = [true; 4];
        assert_eq!(dice_ratio(&[1.0, 0.0, 1.0, 0.0], &[true, false, true, false], &all), Some(0.5));
        assert_eq!(dice_ratio(&[1.0, 0.0, 0.0, 0.0], &[false, true, false, false], &all), Some(0.0));
        let r = dice_ratio(&[0.5; 4], &[true, false, false, false], &all).unwrap();
        assert!((r - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(dice_ratio(&[0.0; 4], &[false; 4], &all), None);
    }

    #[test]
    fn mask_input_zeroes_outside_only() {
        let t = Tensor::from_vec(&[1, 2, 1, 1, 2], vec![1.0f64, f64::NAN, 3.0, 4.0]).unwrap();
        let m = Mask::new([1, 1, 2], vec![true, false]).unwrap();
        assert_eq!(mask_input(&t, &m).unwrap().data(), &[1.0, 0.0, 3.0, 0.0]);
    }
}
