//! Overlap metrics.

use crate::datamodel::LabelMask;
use crate::error::{Error, Result};

/// Dice coefficient of the class-`class` regions of two masks.
///
/// Both regions empty counts as perfect agreement (1); exactly one empty is 0.
pub fn dice(pred: &LabelMask, truth: &LabelMask, class: usize) -> Result<f64> {
    if !pred.same_shape(truth) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let c = class as u8;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.classes().iter().zip(truth.classes()) {
        let in_p = p == c;
        let in_t = t == c;
        a += in_p as usize;
        b += in_t as usize;
        inter += (in_p && in_t) as usize;
    }
    Ok(dice_from_counts(inter, a, b))
}

/// Dice restricted to pixels where `valid` holds.
pub fn masked_dice(pred: &LabelMask, truth: &LabelMask, valid: &[bool], class: usize) -> Result<f64> {
    if !pred.same_shape(truth) || valid.len() != pred.classes().len() {
        return Err(Error::ShapeMismatch("masked dice inputs differ in size".into()));
    }
    let c = class as u8;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for ((&p, &t), &v) in pred.classes().iter().zip(truth.classes()).zip(valid) {
        if !v {
            continue;
        }
        let in_p = p == c;
        let in_t = t == c;
        a += in_p as usize;
        b += in_t as usize;
        inter += (in_p && in_t) as usize;
    }
    Ok(dice_from_counts(inter, a, b))
}

pub fn dice_from_counts(intersection: usize, a: usize, b: usize) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / (a + b) as f64
    }
}

/// Dice of the nested region `{label ≥ class}`. With nested structures
/// (cup inside disc) this scores the whole disc, cup included.
pub fn region_dice(pred: &LabelMask, truth: &LabelMask, class: usize) -> Result<f64> {
    if !pred.same_shape(truth) {
        return Err(Error::ShapeMismatch("region dice inputs differ in size".into()));
    }
    let c = class as u8;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.classes().iter().zip(truth.classes()) {
        let in_p = p >= c;
        let in_t = t >= c;
        a += in_p as usize;
        b += in_t as usize;
        inter += (in_p && in_t) as usize;
    }
    Ok(dice_from_counts(inter, a, b))
}

/// Dice for every foreground class `1..C`.
pub fn foreground_dice(pred: &LabelMask, truth: &LabelMask) -> Result<Vec<f64>> {
    (1..truth.num_classes()).map(|c| dice(pred, truth, c)).collect()
}
