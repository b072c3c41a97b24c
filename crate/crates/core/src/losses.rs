//! Segmentation and adversarial objectives with analytic gradients.
//!
//! Segmentation losses take the softmax output `p` and return the gradient
//! with respect to the pre-softmax logits that produced it. Pixel sums are
//! plain sums; batch reduction is a mean and happens in the trainer.

use crate::datamodel::{LabelMask, LossConfig, ProbMap};
use crate::error::{Error, Result};
use crate::geometry::BoundaryWeightMap;

/// Floor applied to every logarithm argument.
pub const LOG_FLOOR: f64 = 1e-12;

/// A scalar loss with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Per-pixel Shannon entropy of a probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Patch logits of a discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub logits: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "score map {height}x{width} needs {} values, got {}",
                height * width,
                logits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            logits,
        })
    }
}

fn ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

fn check_shapes(p: &ProbMap, y: &LabelMask) -> Result<()> {
    if p.height() != y.height() || p.width() != y.width() || p.num_classes() != y.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{}x{} vs label {}x{}x{}",
            p.height(),
            p.width(),
            p.num_classes(),
            y.height(),
            y.width(),
            y.num_classes()
        )));
    }
    Ok(())
}

/// Backpropagates a gradient on softmax outputs to the logits.
pub fn softmax_backward(p: &ProbMap, grad_p: &[f64]) -> Vec<f64> {
    let plane = p.height() * p.width();
    let c = p.num_classes();
    let probs = p.probs();
    let mut out = vec![0.0; probs.len()];
    for i in 0..plane {
        let mut dot = 0.0;
        for k in 0..c {
            dot += probs[k * plane + i] * grad_p[k * plane + i];
        }
        for k in 0..c {
            let idx = k * plane + i;
            out[idx] = probs[idx] * (grad_p[idx] - dot);
        }
    }
    out
}

/// Hybrid cross-entropy + soft Dice against a soft planar target `t`,
/// restricted to pixels where `valid` holds.
///
/// `L = 1 - λ1 Σ t log p - λ2 · mean_{c ≥ 1} 2Σ t p / (Σ t² + Σ p²)`.
fn hybrid_loss(p: &ProbMap, t: &[f64], valid: Option<&[bool]>, w: &LossConfig) -> LossGrad {
    let plane = p.height() * p.width();
    let c = p.num_classes();
    let probs = p.probs();
    let on = |i: usize| valid.is_none_or(|v| v[i]);
    let mut grad_p = vec![0.0; probs.len()];

    let mut ce = 0.0;
    for k in 0..c {
        for i in 0..plane {
            let idx = k * plane + i;
            if t[idx] != 0.0 && on(i) {
                ce += t[idx] * ln(probs[idx]);
                if probs[idx] > LOG_FLOOR {
                    grad_p[idx] -= w.lambda1 * t[idx] / probs[idx];
                }
            }
        }
    }

    let fg = (c - 1) as f64;
    let mut dice_sum = 0.0;
    for k in 1..c {
        let (mut num, mut den) = (0.0, 0.0);
        for i in (0..plane).filter(|&i| on(i)) {
            let idx = k * plane + i;
            num += t[idx] * probs[idx];
            den += t[idx] * t[idx] + probs[idx] * probs[idx];
        }
        if den == 0.0 {
            dice_sum += 1.0;
            continue;
        }
        dice_sum += 2.0 * num / den;
        let scale = w.lambda2 / fg;
        for i in (0..plane).filter(|&i| on(i)) {
            let idx = k * plane + i;
            let d_dice = 2.0 * (t[idx] * den - num * 2.0 * probs[idx]) / (den * den);
            grad_p[idx] -= scale * d_dice;
        }
    }
    let dice = dice_sum / fg;

    LossGrad {
        value: 1.0 - w.lambda1 * ce - w.lambda2 * dice,
        grad: softmax_backward(p, &grad_p),
    }
}

fn one_hot_target(y: &LabelMask) -> Vec<f64> {
    let plane = y.height() * y.width();
    let mut t = vec![0.0; plane * y.num_classes()];
    for (i, &c) in y.classes().iter().enumerate() {
        t[c as usize * plane + i] = 1.0;
    }
    t
}

/// Clean-label hybrid loss.
pub fn clean_loss(p: &ProbMap, y: &LabelMask, w: &LossConfig) -> Result<LossGrad> {
    check_shapes(p, y)?;
    Ok(hybrid_loss(p, &one_hot_target(y), None, w))
}

/// Clean-label hybrid loss over the pixels marked valid (pseudo labels).
pub fn masked_clean_loss(
    p: &ProbMap,
    y: &LabelMask,
    valid: &[bool],
    w: &LossConfig,
) -> Result<LossGrad> {
    check_shapes(p, y)?;
    if valid.len() != y.height() * y.width() {
        return Err(Error::ShapeMismatch("validity mask size".into()));
    }
    Ok(hybrid_loss(p, &one_hot_target(y), Some(valid), w))
}

/// Noise-tolerant loss: the one-hot target is modulated by the boundary
/// weight map, discounting pixels near region boundaries.
pub fn noise_loss(
    p: &ProbMap,
    y: &LabelMask,
    b: &BoundaryWeightMap,
    w: &LossConfig,
) -> Result<LossGrad> {
    check_shapes(p, y)?;
    if b.height() != y.height() || b.width() != y.width() || b.num_classes() != y.num_classes() {
        return Err(Error::ShapeMismatch("boundary map does not match label".into()));
    }
    let mut t = one_hot_target(y);
    for (ti, bi) in t.iter_mut().zip(b.weights()) {
        *ti *= bi;
    }
    Ok(hybrid_loss(p, &t, None, w))
}

/// `(1 - ω) L_clean + ω L_noise`.
pub fn seg_loss(
    p: &ProbMap,
    y: &LabelMask,
    omega: bool,
    b: &BoundaryWeightMap,
    w: &LossConfig,
) -> Result<LossGrad> {
    if omega {
        noise_loss(p, y, b, w)
    } else {
        clean_loss(p, y, w)
    }
}

/// Per-pixel entropy with natural log and `0 log 0 = 0`.
pub fn entropy_map(p: &ProbMap) -> EntropyMap {
    let plane = p.height() * p.width();
    let probs = p.probs();
    let values = (0..plane)
        .map(|i| {
            -(0..p.num_classes())
                .map(|k| {
                    let v = probs[k * plane + i];
                    if v > 0.0 {
                        v * ln(v)
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        })
        .map(|h: f64| h.max(0.0))
        .collect();
    EntropyMap {
        height: p.height(),
        width: p.width(),
        values,
    }
}

/// Backpropagates a gradient on the entropy map to the logits.
pub fn entropy_backward(p: &ProbMap, entropy: &EntropyMap, grad_entropy: &[f64]) -> Vec<f64> {
    let plane = p.height() * p.width();
    let probs = p.probs();
    let mut out = vec![0.0; probs.len()];
    for k in 0..p.num_classes() {
        for i in 0..plane {
            let idx = k * plane + i;
            // dF/dz_k = -p_k (log p_k + F)
            out[idx] = -grad_entropy[i] * probs[idx] * (ln(probs[idx]) + entropy.values[i]);
        }
    }
    out
}

/// Rows (or columns) `[start, end)` of pooled cell `j` out of `cells`.
fn cell_span(j: usize, cells: usize, extent: usize) -> (usize, usize) {
    let start = j * extent / cells;
    let end = ((j + 1) * extent).div_ceil(cells);
    (start, end)
}

/// Adaptive average pooling of a per-pixel map to `out_h × out_w` cells.
pub fn adaptive_avg_pool(
    values: &[f64],
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if out_h == 0 || out_w == 0 || out_h > height || out_w > width {
        return Err(Error::ShapeMismatch(format!(
            "cannot pool a {height}x{width} map to {out_h}x{out_w}"
        )));
    }
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let (r0, r1) = cell_span(oy, out_h, height);
        for ox in 0..out_w {
            let (c0, c1) = cell_span(ox, out_w, width);
            let mut s = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    s += values[r * width + c];
                }
            }
            out[oy * out_w + ox] = s / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    Ok(out)
}

fn adaptive_avg_pool_backward(
    grad_out: &[f64],
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut grad = vec![0.0; height * width];
    for oy in 0..out_h {
        let (r0, r1) = cell_span(oy, out_h, height);
        for ox in 0..out_w {
            let (c0, c1) = cell_span(ox, out_w, width);
            let g = grad_out[oy * out_w + ox] / ((r1 - r0) * (c1 - c0)) as f64;
            for r in r0..r1 {
                for c in c0..c1 {
                    grad[r * width + c] += g;
                }
            }
        }
    }
    grad
}

/// Losses and gradients of the entropy-weighted adversarial objective.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialOutput {
    /// Generator loss: target predictions pushed toward the source label.
    pub gen_loss: f64,
    /// Discriminator loss: source = real, target = fake.
    pub disc_loss: f64,
    /// Patch weights applied to the target side.
    pub target_weights: Vec<f64>,
    pub grad_disc_src: Vec<f64>,
    pub grad_disc_tgt: Vec<f64>,
    /// Gradient of the generator loss w.r.t. the target score map.
    pub grad_gen_tgt: Vec<f64>,
    /// Gradient of the generator loss w.r.t. the target entropy map pixels.
    pub grad_gen_entropy: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Entropy-weighted adversarial losses over patch score maps.
///
/// The target-side weight of patch `j` is `λ_entr · F̄_j + ε`, where `F̄` is
/// the entropy map average-pooled to the score-map grid. With `valid`, only
/// the listed pixels contribute: `F̄` pools `F ⊙ valid` and `ε` is scaled by
/// the pooled valid fraction.
pub fn adversarial_losses(
    d_src: &ScoreMap,
    d_tgt: &ScoreMap,
    entropy: &EntropyMap,
    valid: Option<&[bool]>,
    w: &LossConfig,
) -> Result<AdversarialOutput> {
    if d_src.height != d_tgt.height || d_src.width != d_tgt.width {
        return Err(Error::ShapeMismatch(format!(
            "source scores {}x{} vs target scores {}x{}",
            d_src.height, d_src.width, d_tgt.height, d_tgt.width
        )));
    }
    let (h, wd) = (entropy.height, entropy.width);
    let (sh, sw) = (d_tgt.height, d_tgt.width);
    let mask: Vec<f64> = match valid {
        Some(v) if v.len() != h * wd => {
            return Err(Error::ShapeMismatch("validity mask size".into()))
        }
        Some(v) => v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        None => vec![1.0; h * wd],
    };
    let masked_entropy: Vec<f64> = entropy.values.iter().zip(&mask).map(|(f, m)| f * m).collect();
    let pooled_entropy = adaptive_avg_pool(&masked_entropy, h, wd, sh, sw)?;
    let pooled_mask = adaptive_avg_pool(&mask, h, wd, sh, sw)?;
    let weights: Vec<f64> = pooled_entropy
        .iter()
        .zip(&pooled_mask)
        .map(|(f, m)| w.lambda_entr * f + w.entropy_epsilon * m)
        .collect();

    let n = (sh * sw) as f64;
    let mut disc_loss = 0.0;
    let mut grad_disc_src = vec![0.0; d_src.logits.len()];
    for (g, &s) in grad_disc_src.iter_mut().zip(&d_src.logits) {
        // -log σ(s)
        disc_loss += softplus(-s) / n;
        *g = (sigmoid(s) - 1.0) / n;
    }

    let mut gen_loss = 0.0;
    let mut grad_disc_tgt = vec![0.0; d_tgt.logits.len()];
    let mut grad_gen_tgt = vec![0.0; d_tgt.logits.len()];
    let mut grad_weights = vec![0.0; weights.len()];
    for j in 0..d_tgt.logits.len() {
        let s = d_tgt.logits[j];
        let wt = weights[j];
        let log_fake = -softplus(s); // log(1 - σ(s))
        let log_real = -softplus(-s); // log σ(s)
        if w.additive_entropy {
            disc_loss += -(wt + log_fake) / n;
            grad_disc_tgt[j] = sigmoid(s) / n;
            gen_loss += -(wt + log_real) / n;
            grad_gen_tgt[j] = (sigmoid(s) - 1.0) / n;
            grad_weights[j] = -1.0 / n;
        } else {
            disc_loss += -wt * log_fake / n;
            grad_disc_tgt[j] = wt * sigmoid(s) / n;
            gen_loss += -wt * log_real / n;
            grad_gen_tgt[j] = wt * (sigmoid(s) - 1.0) / n;
            grad_weights[j] = -log_real / n;
        }
    }
    let grad_pooled: Vec<f64> = grad_weights.iter().map(|g| g * w.lambda_entr).collect();
    let mut grad_gen_entropy = adaptive_avg_pool_backward(&grad_pooled, h, wd, sh, sw);
    for (g, m) in grad_gen_entropy.iter_mut().zip(&mask) {
        *g *= m;
    }

    Ok(AdversarialOutput {
        gen_loss,
        disc_loss,
        target_weights: weights,
        grad_disc_src,
        grad_disc_tgt,
        grad_gen_tgt,
        grad_gen_entropy,
    })
}

/// Generator-side value of the min-max objective: `L_seg + λ_adv · L_adv`.
pub fn overall_objective(seg_loss_value: f64, gen_adv_loss_value: f64, w: &LossConfig) -> f64 {
    seg_loss_value + w.lambda_adv * gen_adv_loss_value
}
