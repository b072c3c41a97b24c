//! Helpers shared by the integration tests: random instances, finite
//! differences and brute-force oracles.

#![allow(dead_code)]

pub mod grad;

use crossdenoise::datamodel::{LabelMask, ProbMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_logits(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
}

pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> LabelMask {
    let classes = (0..h * w).map(|_| r.random_range(0..c as u8)).collect();
    LabelMask::new(h, w, c, classes).unwrap()
}

/// Centered disc (class 1) with a concentric cup (class 2).
pub fn disc_mask(size: usize, disc_r: f64, cup_r: f64) -> LabelMask {
    let c = (size as f64 - 1.0) / 2.0;
    let classes = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            let d = (y * y + x * x).sqrt();
            if d <= cup_r {
                2
            } else if d <= disc_r {
                1
            } else {
                0
            }
        })
        .collect();
    LabelMask::new(size, size, 3, classes).unwrap()
}

pub fn softmax(h: usize, w: usize, c: usize, logits: &[f64]) -> ProbMap {
    ProbMap::softmax(h, w, c, logits).unwrap()
}

/// Central differences of `f` at `x` along every coordinate in `idx`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], idx: &[usize], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    idx.iter()
        .map(|&i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Enumerates every `k`-subset of `0..n` and returns the one with the
/// smallest total loss, ties going to the lexicographically smaller sorted
/// id list.
pub fn best_subset(ids: &[String], losses: &[f64], k: usize) -> Vec<String> {
    let n = ids.len();
    let mut best: Option<(f64, Vec<String>)> = None;
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize != k {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|i| bits & (1 << i) != 0).collect();
        let total: f64 = members.iter().map(|&i| losses[i]).sum();
        let mut names: Vec<String> = members.iter().map(|&i| ids[i].clone()).collect();
        names.sort();
        let better = match &best {
            None => true,
            Some((t, b)) => total < *t || (total == *t && names < *b),
        };
        if better {
            best = Some((total, names));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

/// Threshold by sorting the whole pool descending and indexing
/// `floor(q · len)`, clamped to the last element.
pub fn sorted_threshold(pool: &[f64], q: f64) -> f64 {
    let mut v = pool.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idx = ((q * v.len() as f64 + 1e-9).floor() as usize).min(v.len() - 1);
    v[idx]
}

/// α by counting pixels class by class.
pub fn alpha_by_counting(clean: &LabelMask, noisy: &LabelMask) -> f64 {
    let mut alpha = 0.0;
    for c in 1..clean.num_classes() as u8 {
        let mut a = 0usize;
        let mut b = 0usize;
        let mut both = 0usize;
        for (x, y) in clean.classes().iter().zip(noisy.classes()) {
            a += (*x == c) as usize;
            b += (*y == c) as usize;
            both += (*x == c && *y == c) as usize;
        }
        let dice = if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 };
        alpha += 1.0 - dice;
    }
    alpha
}
