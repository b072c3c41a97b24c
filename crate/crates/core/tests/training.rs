//! End-to-end training behaviour on small synthetic corpora.

mod common;

use std::fs;
use std::time::Instant;

use crossdenoise::datamodel::{Corpus, RunConfig, Strategy};
use crossdenoise::labelnoise::{corrupt_corpus, CorruptedCorpus, NoiseLevel, NoiseSpec};
use crossdenoise::metrics::{dice, masked_dice};
use crossdenoise::pseudolabel::cicl_round;
use crossdenoise::synthdata::{generate_corpus, Split, SynthConfig};
use crossdenoise::training::{train_full, TrainData, TrainRunState};

struct Data {
    clean: Corpus,
    noisy: CorruptedCorpus,
    target: Corpus,
    test: Corpus,
}

fn data(side: usize, source: usize, target: usize, beta: f64, seed: u64) -> Data {
    let synth = SynthConfig {
        height: side,
        width: side,
        num_source: source,
        num_target_train: target,
        num_target_test: target,
        seed,
        ..SynthConfig::default()
    };
    let clean = generate_corpus(&synth, Split::Source).unwrap();
    let noisy = corrupt_corpus(
        &clean,
        &NoiseSpec {
            level: NoiseLevel::High,
            ratio: beta,
            seed,
            ..NoiseSpec::default()
        },
    )
    .unwrap();
    Data {
        clean,
        noisy,
        target: generate_corpus(&synth, Split::TargetTrain).unwrap(),
        test: generate_corpus(&synth, Split::TargetTest).unwrap(),
    }
}

fn run(cfg: &RunConfig, d: &Data, dir: Option<&std::path::Path>) -> TrainRunState {
    let td = TrainData {
        source: &d.noisy,
        clean_source: Some(&d.clean),
        target_train: &d.target,
        target_test: Some(&d.test),
    };
    train_full(cfg, td, dir).unwrap()
}

#[test]
fn smoke_run_finishes_within_a_minute() {
    let d = data(96, 8, 8, 0.5, 0);
    let cfg = RunConfig {
        epochs: 1,
        outer_iterations: 1,
        inner_iterations: 1,
        ..RunConfig::default()
    };
    let start = Instant::now();
    let state = run(&cfg, &d, None);
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(state.history.len(), 1);
    assert!(secs < 60.0, "smoke run took {secs:.1} s");
}

#[test]
fn every_ablation_row_is_runnable() {
    let d = data(32, 4, 4, 0.5, 1);
    let labels: Vec<String> = Strategy::ABLATION.iter().map(Strategy::label).collect();
    assert_eq!(labels, ["none", "CD", "CD+CICL", "CD+CICL+NTL"]);
    for s in Strategy::ABLATION {
        let cfg = RunConfig {
            epochs: 2,
            outer_iterations: 1,
            batch_size: 4,
            cicl_start_epoch: Some(1),
            strategy: s,
            ..RunConfig::default()
        };
        let state = run(&cfg, &d, None);
        assert_eq!(state.peers.len(), if s.cross_denoising { 2 } else { 1 });
        let last = state.history.last().unwrap();
        assert_eq!(last.dice.len(), 2);
        assert!(last.dice.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(last.pseudo_valid_fraction.is_some(), s.cicl, "{}", s.label());
    }
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let d = data(32, 4, 4, 0.5, 2);
    let cfg = RunConfig {
        epochs: 2,
        outer_iterations: 2,
        batch_size: 4,
        cicl_start_epoch: Some(1),
        seed: 2,
        ..RunConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let states: Vec<TrainRunState> = dirs.iter().map(|t| run(&cfg, &d, Some(t.path()))).collect();
    for (a, b) in states[0].history.iter().zip(&states[1].history) {
        for (x, y) in a.dice.iter().zip(&b.dice) {
            assert_eq!(format!("{x:.6}"), format!("{y:.6}"));
        }
    }
    let csv = |t: &tempfile::TempDir| fs::read(t.path().join("metrics.csv")).unwrap();
    assert_eq!(csv(&dirs[0]), csv(&dirs[1]));
}

#[test]
fn selection_prefers_clean_samples() {
    let d = data(48, 16, 4, 0.5, 3);
    let cfg = RunConfig {
        epochs: 6,
        outer_iterations: 10,
        batch_size: 8,
        noise_ratio: 0.5,
        strategy: Strategy::cd(),
        seed: 3,
        ..RunConfig::default()
    };
    let state = run(&cfg, &d, None);
    let purity = state.history.last().unwrap().selection_purity.unwrap();
    assert!(purity > 0.5, "purity {purity}");
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn confident_pseudo_labels_beat_raw_argmax() {
    let d = data(48, 16, 8, 0.5, 4);
    let cfg = RunConfig {
        epochs: 4,
        outer_iterations: 4,
        batch_size: 8,
        strategy: Strategy::cd(),
        seed: 4,
        ..RunConfig::default()
    };
    let state = run(&cfg, &d, None);
    let preds: Vec<Vec<(String, _)>> = state
        .peers
        .iter()
        .map(|p| {
            d.test
                .samples()
                .iter()
                .map(|s| (s.id.clone(), p.segmenter.forward_softmax(&s.image).unwrap()))
                .collect()
        })
        .collect();
    let (for_b, for_a) = cicl_round(&preds[0], &preds[1], &state.config.class_quantiles()).unwrap();
    let (mut pseudo, mut raw) = (Vec::new(), Vec::new());
    for set in for_a.iter().chain(&for_b) {
        let truth = d.test.get(&set.id).unwrap().mask.as_ref().unwrap();
        for c in 1..3 {
            pseudo.push(masked_dice(&set.labels, truth, &set.valid, c).unwrap());
            raw.push(dice(&set.labels, truth, c).unwrap());
        }
    }
    let (p, r) = (mean(&pseudo), mean(&raw));
    assert!(p > r, "pseudo-label dice {p} vs argmax dice {r}");
}

#[test]
#[ignore = "trains three full-size runs; takes several minutes"]
fn two_pseudo_label_rounds_do_not_hurt_target_dice() {
    let mut improved = 0;
    for seed in 0..3 {
        let d = data(96, 40, 20, 0.5, seed);
        let cfg = RunConfig {
            outer_iterations: 20,
            strategy: Strategy::cd(),
            seed,
            ..RunConfig::default()
        };
        let mut state = run(&cfg, &d, None);
        let before = mean(&state.history.last().unwrap().dice);
        state.run_cicl(&d.noisy.corpus, &d.target, 2).unwrap();
        let after = mean(&crossdenoise::training::evaluate(state.peer_a(), &d.test).unwrap());
        eprintln!("seed {seed}: {before:.4} -> {after:.4}");
        assert!(after >= before - 0.005, "seed {seed}: {before} -> {after}");
        improved += (after > before) as usize;
    }
    assert!(improved >= 2, "improved in {improved} of 3 seeds");
}

#[test]
fn pseudo_rounds_without_valid_pixels_leave_the_segmenters_on_their_momentum_path() {
    let d = data(32, 4, 4, 0.5, 5);
    let cfg = RunConfig {
        epochs: 1,
        outer_iterations: 2,
        batch_size: 4,
        strategy: Strategy::cd_cicl(),
        pseudo_quantiles: vec![1e-9],
        seed: 5,
        ..RunConfig::default()
    };
    let mut state = run(&cfg, &d, None);
    // Reference: the same number of zero-gradient optimizer steps.
    let mut coasting = state.clone();
    for peer in &mut coasting.peers {
        for _ in 0..cfg.cicl_steps {
            let zeros = vec![0.0; peer.segmenter.parameter_count()];
            peer.seg_opt.apply(peer.segmenter.params_mut(), &zeros).unwrap();
        }
    }
    let (valid, sets) = state.run_cicl(&d.noisy.corpus, &d.target, 1).unwrap();
    assert_eq!(valid, Some(0.0));
    assert!(sets.iter().flatten().all(|s| s.valid_count() == 0));
    for (a, b) in state.peers.iter().zip(&coasting.peers) {
        let drift = a
            .segmenter
            .params()
            .iter()
            .zip(b.segmenter.params())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-6, "{}: drift {drift}", a.peer_id);
    }
}
