//! Brute-force oracles for selection, thresholds, noise measurement and the
//! synthetic domain shift.

mod common;

use common::{alpha_by_counting, best_subset, disc_mask, random_logits, rng, softmax, sorted_threshold};
use crossdenoise::datamodel::{LossConfig, ProbMap};
use crossdenoise::datamodel::NoiseType;
use crossdenoise::labelnoise::{corrupt_mask, noise_level};
use crossdenoise::losses::{
    adversarial_losses, entropy_backward, entropy_map, seg_loss, ScoreMap,
};
use crossdenoise::geometry::{boundary_weight_map, distance_to_boundary};
use crossdenoise::pseudolabel::class_thresholds;
use crossdenoise::selection::{select_small_loss, split_omega};
use crossdenoise::synthdata::{generate_corpus, Split, SynthConfig};
use rand::Rng;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i:02}")).collect()
}

#[test]
fn small_loss_selection_matches_exhaustive_subsets() {
    let mut r = rng(11);
    for trial in 0..500 {
        let n = r.random_range(1..=8);
        let names = ids(n);
        // Coarse losses so ties are common.
        let losses: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64 * 0.5).collect();
        let gamma = r.random_range(0.05..=1.0);
        let got = select_small_loss(&names, &losses, gamma).unwrap();
        let k = ((gamma * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
        let mut got_ids = got.ids.clone();
        got_ids.sort();
        assert_eq!(got_ids, best_subset(&names, &losses, k), "trial {trial}");
    }
}

#[test]
fn noisy_fraction_is_bounded_by_the_quantile() {
    let mut r = rng(12);
    let tau = 0.7;
    for _ in 0..1000 {
        let n = r.random_range(1..=16);
        let losses: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let sel = split_omega(select_small_loss(&ids(n), &losses, 1.0).unwrap(), tau);
        let noisy = sel.omega.iter().filter(|w| **w).count() as f64 / n as f64;
        assert!(noisy <= 1.0 - tau + 1.0 / n as f64 + 1e-12, "n {n}: {noisy}");
    }
}

#[test]
fn separated_losses_recover_the_clean_samples() {
    let mut r = rng(13);
    for _ in 0..50 {
        let n = 20;
        let beta = 0.5;
        let names = ids(n);
        let mut flags = vec![false; n];
        for i in rand::seq::index::sample(&mut r, n, 10) {
            flags[i] = true;
        }
        let losses: Vec<f64> = flags
            .iter()
            .map(|&noisy| r.random_range(0.0..1.0) + if noisy { 2.0 } else { 0.0 })
            .collect();
        let sel = select_small_loss(&names, &losses, 1.0 - beta).unwrap();
        let mut got = sel.indices.clone();
        got.sort();
        let clean: Vec<usize> = (0..n).filter(|&i| !flags[i]).collect();
        assert_eq!(got, clean);
    }
}

fn random_probs(r: &mut rand_chacha::ChaCha8Rng, side: usize, scale: f64) -> ProbMap {
    let z: Vec<f64> = (0..3 * side * side).map(|_| r.random_range(-scale..scale)).collect();
    softmax(side, side, 3, &z)
}

#[test]
fn thresholds_match_full_sort_oracle() {
    let mut r = rng(14);
    for _ in 0..40 {
        let side = r.random_range(2..=20);
        let count = r.random_range(1..=25);
        let batch: Vec<ProbMap> = (0..count).map(|_| random_probs(&mut r, side, 3.0)).collect();
        let q: Vec<f64> = (0..3).map(|_| r.random_range(0.01..0.99)).collect();
        let got = class_thresholds(&batch, &q).unwrap();
        for c in 0..3 {
            let pool: Vec<f64> = batch.iter().flat_map(|p| p.channel(c).to_vec()).collect();
            assert!(pool.len() <= 10_000);
            assert_eq!(got[c], sorted_threshold(&pool, q[c]));
        }
    }
}

#[test]
fn validity_fraction_tracks_the_quantile() {
    let mut r = rng(15);
    for _ in 0..40 {
        let batch: Vec<ProbMap> = (0..6).map(|_| random_probs(&mut r, 12, 4.0)).collect();
        let q = r.random_range(0.05..0.6);
        let t = class_thresholds(&batch, &[q; 3]).unwrap();
        for c in 0..3 {
            let pool: Vec<f64> = batch.iter().flat_map(|p| p.channel(c).to_vec()).collect();
            let above = pool.iter().filter(|&&v| v > t[c]).count() as f64 / pool.len() as f64;
            assert!((above - q).abs() <= 1.0 / pool.len() as f64 + 1e-12, "{above} vs {q}");
        }
    }
}

#[test]
fn rare_class_gets_its_own_threshold() {
    // Class 2 is confident on a handful of pixels only; its threshold must
    // come from its own pool rather than from the dominant classes.
    let side = 16;
    let plane = side * side;
    let mut z = vec![0.0; 3 * plane];
    for i in 0..plane {
        z[i] = 3.0;
        if i % 37 == 0 {
            z[2 * plane + i] = 6.0;
        }
    }
    let p = softmax(side, side, 3, &z);
    let t = class_thresholds(std::slice::from_ref(&p), &[0.2, 0.2, 0.2]).unwrap();
    for c in 0..3 {
        assert_eq!(t[c], sorted_threshold(p.channel(c), 0.2));
    }
    assert!(t[2] < t[0]);
}

#[test]
fn alpha_of_a_dilated_disc_matches_pixel_counts() {
    for (size, disc, cup) in [(48, 12.0, 6.0), (96, 24.0, 11.0), (32, 9.5, 4.5)] {
        let clean = disc_mask(size, disc, cup);
        let noisy = corrupt_mask(&clean, NoiseType::Dilate, 2.0, 4.0, 0).unwrap().mask;
        assert_ne!(noisy, clean);
        assert_eq!(noise_level(&clean, &noisy).unwrap(), alpha_by_counting(&clean, &noisy));
    }
}

#[test]
fn target_intensity_is_shifted_by_the_configured_offset() {
    let cfg = SynthConfig {
        num_source: 100,
        num_target_train: 100,
        ..SynthConfig::default()
    };
    let mean = |split| {
        let c = generate_corpus(&cfg, split).unwrap();
        c.samples().iter().map(|s| s.image.mean_intensity()).sum::<f64>() / c.len() as f64
    };
    let shift = mean(Split::TargetTrain) - mean(Split::Source);
    assert!(
        (shift - cfg.target_intensity_offset).abs() <= 0.02,
        "shift {shift} vs offset {}",
        cfg.target_intensity_offset
    );
}

/// Objective of a one-parameter generator whose logits are `θ · u`.
fn toy_objective(theta: f64, u: &[f64], y: &crossdenoise::datamodel::LabelMask, w: &LossConfig) -> (f64, f64) {
    let side = y.height();
    let z: Vec<f64> = u.iter().map(|v| theta * v).collect();
    let p = softmax(side, side, 3, &z);
    let b = boundary_weight_map(y);
    let seg = seg_loss(&p, y, true, &b, w).unwrap();
    let ent = entropy_map(&p);
    let scores = ScoreMap::new(2, 2, vec![-0.5, 0.3, 1.0, -1.2]).unwrap();
    let adv = adversarial_losses(&scores, &scores, &ent, None, w).unwrap();
    let mut g = seg.grad;
    let ge = entropy_backward(&p, &ent, &adv.grad_gen_entropy);
    g.iter_mut().zip(ge).for_each(|(a, b)| *a += w.lambda_adv * b);
    let d_theta = g.iter().zip(u).map(|(a, b)| a * b).sum();
    (seg.value + w.lambda_adv * adv.gen_loss, d_theta)
}

#[test]
fn toy_generator_descent_matches_grid_search() {
    let mut r = rng(16);
    let side = 8;
    let y = disc_mask(side, 3.0, 1.5);
    // Logit direction that agrees with the labels on most pixels only.
    let mut u = crossdenoise::datamodel::one_hot(&y).unwrap().probs().to_vec();
    let plane = side * side;
    for i in 0..plane {
        if r.random_bool(0.25) {
            let wrong = r.random_range(0..3);
            for c in 0..3 {
                u[c * plane + i] = if c == wrong { 1.0 } else { 0.0 };
            }
        }
    }
    u.iter_mut().zip(random_logits(&mut r, 3 * plane)).for_each(|(a, n)| *a += 0.1 * n);
    let w = LossConfig {
        lambda_adv: 0.5,
        ..LossConfig::default()
    };

    let step = 1e-3;
    let grid_best = (0..=10_000)
        .map(|k| k as f64 * step)
        .map(|t| (t, toy_objective(t, &u, &y, &w).0))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0;
    assert!(grid_best > 0.0 && grid_best < 10.0, "minimum on the grid edge: {grid_best}");

    // Bisection on the analytic derivative.
    let (mut lo, mut hi) = (grid_best - 0.5, grid_best + 0.5);
    assert!(toy_objective(lo, &u, &y, &w).1 < 0.0 && toy_objective(hi, &u, &y, &w).1 > 0.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if toy_objective(mid, &u, &y, &w).1 < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    assert!((lo - grid_best).abs() <= step, "{lo} vs {grid_best}");
}

#[test]
fn boundary_pixels_pull_less_under_the_noise_loss() {
    let mut r = rng(17);
    let clean = disc_mask(32, 10.0, 5.0);
    // CE term only.
    let w = LossConfig {
        lambda2: 0.0,
        ..LossConfig::default()
    };
    let plane = 32 * 32;
    for seed in 0..4 {
        let y = corrupt_mask(&clean, NoiseType::Dilate, 3.0, 4.0, seed).unwrap().mask;
        let b = boundary_weight_map(&y);
        let p = softmax(32, 32, 3, &random_logits(&mut r, 3 * plane));
        let g0 = seg_loss(&p, &y, false, &b, &w).unwrap().grad;
        let g1 = seg_loss(&p, &y, true, &b, &w).unwrap().grad;
        let mut checked = 0;
        for c in 1..3 {
            let d = distance_to_boundary(&y, c).unwrap();
            for i in (0..plane).filter(|&i| y.classes()[i] as usize == c && d[i] <= 1.0) {
                let norm = |g: &[f64]| (0..3).map(|k| g[k * plane + i].powi(2)).sum::<f64>().sqrt();
                assert!(norm(&g1) < norm(&g0), "pixel {i}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }
}
