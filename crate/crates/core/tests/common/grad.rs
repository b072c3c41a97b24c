//! Finite-difference checks of every loss path and of the full segmenter
//! objective.

use crossdenoise::datamodel::{Domain, Image, LabelMask, LossConfig, ModelConfig};
use crossdenoise::geometry::{boundary_weight_map, BoundaryWeightMap};
use crossdenoise::losses::{
    adversarial_losses, clean_loss, entropy_backward, entropy_map, masked_clean_loss, noise_loss,
    seg_loss, softmax_backward, ScoreMap,
};
use crossdenoise::models::{ArchitectureId, Discriminator, Segmenter};
use rand::Rng;

use super::{central_diff, random_logits, random_mask, rel_error, rng, softmax};

const SIDE: usize = 8;
const CLASSES: usize = 3;
const SCORE_SIDE: usize = 4;

/// Worst relative error over `trials` random 8×8, C = 3 instances, covering
/// the clean, masked clean, boundary-weighted, ω-switched, discriminator,
/// generator and entropy-weight gradients.
pub fn loss_suite(trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let n = SIDE * SIDE * CLASSES;
    let all: Vec<usize> = (0..n).collect();
    let h = 1e-6;
    for t in 0..trials {
        let mut r = rng(1000 + t);
        let z = random_logits(&mut r, n);
        let y = random_mask(&mut r, SIDE, SIDE, CLASSES);
        let b = if t % 2 == 0 {
            boundary_weight_map(&y)
        } else {
            let weights = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
            BoundaryWeightMap::from_weights(SIDE, SIDE, CLASSES, weights).unwrap()
        };
        let valid: Vec<bool> = (0..SIDE * SIDE).map(|_| r.random_bool(0.7)).collect();
        let omega = r.random_bool(0.5);
        let w = LossConfig {
            additive_entropy: t % 5 == 4,
            ..LossConfig::default()
        };
        let p = softmax(SIDE, SIDE, CLASSES, &z);

        let seg_paths: [(&str, Box<dyn Fn(&[f64]) -> (f64, Vec<f64>)>); 4] = [
            ("clean", Box::new(|z| lg(clean_loss(&softmax(SIDE, SIDE, CLASSES, z), &y, &w)))),
            (
                "masked",
                Box::new(|z| lg(masked_clean_loss(&softmax(SIDE, SIDE, CLASSES, z), &y, &valid, &w))),
            ),
            ("noise", Box::new(|z| lg(noise_loss(&softmax(SIDE, SIDE, CLASSES, z), &y, &b, &w)))),
            ("seg", Box::new(|z| lg(seg_loss(&softmax(SIDE, SIDE, CLASSES, z), &y, omega, &b, &w)))),
        ];
        for (_, f) in &seg_paths {
            let analytic = f(&z).1;
            let fd = central_diff(&mut |x| f(x).0, &z, &all, h);
            worst = worst.max(rel_error(&analytic, &fd));
        }

        let k = SCORE_SIDE * SCORE_SIDE;
        let s_src = random_logits(&mut r, k);
        let s_tgt = random_logits(&mut r, k);
        let score = |v: &[f64]| ScoreMap::new(SCORE_SIDE, SCORE_SIDE, v.to_vec()).unwrap();
        let ent = entropy_map(&p);
        let mask = (t % 3 == 0).then_some(valid.as_slice());
        let out = adversarial_losses(&score(&s_src), &score(&s_tgt), &ent, mask, &w).unwrap();
        let idx: Vec<usize> = (0..k).collect();

        let fd = central_diff(
            &mut |x| adversarial_losses(&score(x), &score(&s_tgt), &ent, mask, &w).unwrap().disc_loss,
            &s_src,
            &idx,
            h,
        );
        worst = worst.max(rel_error(&out.grad_disc_src, &fd));
        let fd = central_diff(
            &mut |x| adversarial_losses(&score(&s_src), &score(x), &ent, mask, &w).unwrap().disc_loss,
            &s_tgt,
            &idx,
            h,
        );
        worst = worst.max(rel_error(&out.grad_disc_tgt, &fd));
        let fd = central_diff(
            &mut |x| adversarial_losses(&score(&s_src), &score(x), &ent, mask, &w).unwrap().gen_loss,
            &s_tgt,
            &idx,
            h,
        );
        worst = worst.max(rel_error(&out.grad_gen_tgt, &fd));

        // Generator loss through the entropy weight, back to the logits.
        let analytic = entropy_backward(&p, &ent, &out.grad_gen_entropy);
        let fd = central_diff(
            &mut |x| {
                let px = softmax(SIDE, SIDE, CLASSES, x);
                adversarial_losses(&score(&s_src), &score(&s_tgt), &entropy_map(&px), mask, &w)
                    .unwrap()
                    .gen_loss
            },
            &z,
            &all,
            h,
        );
        worst = worst.max(rel_error(&analytic, &fd));
    }
    worst
}

fn lg(r: crossdenoise::Result<crossdenoise::losses::LossGrad>) -> (f64, Vec<f64>) {
    let l = r.unwrap();
    (l.value, l.grad)
}

fn random_image(r: &mut rand_chacha::ChaCha8Rng, side: usize, domain: Domain) -> Image {
    let px = (0..3 * side * side).map(|_| r.random_range(0.0..1.0)).collect();
    Image::new(side, side, 3, px, domain).unwrap()
}

/// Segmenter objective on 16×16 inputs: clean loss on one source image,
/// boundary-weighted loss on another, and the generator term on a target
/// image under a fixed discriminator.
struct Objective {
    src: [Image; 2],
    masks: [LabelMask; 2],
    boundary: BoundaryWeightMap,
    tgt: Image,
    disc: Discriminator,
    w: LossConfig,
}

impl Objective {
    fn value_and_grad(&self, seg: &Segmenter, want_grad: bool) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; seg.parameter_count()];
        let mut value = 0.0;
        for (i, omega) in [false, true].into_iter().enumerate() {
            let f = seg.forward(&self.src[i]).unwrap();
            let l = seg_loss(&f.probs, &self.masks[i], omega, &self.boundary, &self.w).unwrap();
            value += 0.5 * l.value;
            if want_grad {
                let g: Vec<f64> = l.grad.iter().map(|v| 0.5 * v).collect();
                seg.backward(&f, &g, &mut grad);
            }
        }
        let f = seg.forward(&self.tgt).unwrap();
        let ent = entropy_map(&f.probs);
        let d = self.disc.forward(&f.probs).unwrap();
        let adv = adversarial_losses(&d.scores, &d.scores, &ent, None, &self.w).unwrap();
        value += self.w.lambda_adv * adv.gen_loss;
        if want_grad {
            let gp = self.disc.backward(&d, &adv.grad_gen_tgt, None, true).unwrap();
            let mut g = softmax_backward(&f.probs, &gp);
            let ge = entropy_backward(&f.probs, &ent, &adv.grad_gen_entropy);
            g.iter_mut().zip(ge).for_each(|(a, b)| *a = self.w.lambda_adv * (*a + b));
            seg.backward(&f, &g, &mut grad);
        }
        (value, grad)
    }
}

/// Worst relative error on `samples` randomly chosen parameters of each
/// peer architecture.
pub fn end_to_end(samples: usize, seed: u64) -> f64 {
    let side = 16;
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for arch in [ArchitectureId::PeerA, ArchitectureId::PeerB] {
        let cfg = ModelConfig::default();
        let mut seg = Segmenter::new(arch, &cfg, seed);
        let masks = [
            super::disc_mask(side, 5.0, 2.5),
            random_mask(&mut r, side, side, CLASSES),
        ];
        let obj = Objective {
            src: [random_image(&mut r, side, Domain::Source), random_image(&mut r, side, Domain::Source)],
            boundary: boundary_weight_map(&masks[1]),
            masks,
            tgt: random_image(&mut r, side, Domain::Target),
            disc: Discriminator::new(&cfg, seed + 1),
            // A larger adversarial weight keeps the generator path visible
            // next to the segmentation terms.
            w: LossConfig {
                lambda_adv: 0.5,
                ..LossConfig::default()
            },
        };
        let (_, analytic) = obj.value_and_grad(&seg, true);
        let n = seg.parameter_count();
        let idx: Vec<usize> = (0..samples).map(|_| r.random_range(0..n)).collect();
        let theta = seg.params().to_vec();
        let fd = central_diff(
            &mut |x| {
                seg.params_mut().copy_from_slice(x);
                obj.value_and_grad(&seg, false).0
            },
            &theta,
            &idx,
            1e-5,
        );
        let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        worst = worst.max(rel_error(&picked, &fd));
    }
    worst
}
