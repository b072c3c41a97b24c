//! The peer training loop: small-loss exchange between two heterogeneous
//! peers, boundary-weighted learning on suspected-noisy samples,
//! entropy-weighted adversarial adaptation and pseudo-label exchange on the
//! target domain.

mod rundir;

use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Corpus, Image, LabelMask, RunConfig, Sample};
use crate::error::{Error, Result};
use crate::geometry::{boundary_weight_map, BoundaryWeightMap};
use crate::labelnoise::CorruptedCorpus;
use crate::losses::{
    adversarial_losses, clean_loss, entropy_backward, entropy_map, masked_clean_loss, seg_loss,
    softmax_backward,
};
use crate::metrics::region_dice;
use crate::models::{
    clip_grad_norm, config_hash, ArchitectureId, Checkpoint, Discriminator, OptimizerState, SegForward, Segmenter,
};
use crate::pseudolabel::{cicl_round, PseudoLabelSet};
use crate::rng;
use crate::selection::{select_small_loss, split_omega, RememberSchedule, SelectionTrace};

pub use rundir::{
    read_metrics_csv, write_metrics_csv, RunDir, RunReport, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE,
    REPORT_FILE, TRACE_FILE,
};

/// One peer: segmenter, discriminator and their optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerState {
    pub peer_id: ArchitectureId,
    pub segmenter: Segmenter,
    pub discriminator: Discriminator,
    pub seg_opt: OptimizerState,
    pub disc_opt: OptimizerState,
}

impl PeerState {
    pub fn new(peer_id: ArchitectureId, cfg: &RunConfig) -> Self {
        let segmenter = Segmenter::new(peer_id, &cfg.model, cfg.seed);
        let discriminator = Discriminator::new(&cfg.model, rng::sub_seed(cfg.seed, peer_id.as_str()));
        let seg_opt =
            OptimizerState::momentum_sgd(segmenter.parameter_count(), cfg.learning_rate_seg, cfg.momentum);
        let disc_opt = OptimizerState::adam(discriminator.parameter_count(), cfg.learning_rate_disc);
        Self {
            peer_id,
            segmenter,
            discriminator,
            seg_opt,
            disc_opt,
        }
    }
}

/// Metrics of one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub gamma: f64,
    /// Mean overall objective per peer over the epoch's updates.
    pub train_loss: Vec<f64>,
    pub disc_loss: Vec<f64>,
    pub gen_loss: Vec<f64>,
    /// Clean fraction of the samples selected this epoch, when selection ran.
    pub selection_purity: Option<f64>,
    /// Fraction of target pixels that passed their thresholds in this
    /// epoch's pseudo-label rounds.
    pub pseudo_valid_fraction: Option<f64>,
    /// Peer-A Dice per foreground class on the evaluation corpus.
    pub dice: Vec<f64>,
}

/// Everything a run needs to continue: epoch, schedule, peers and history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunState {
    pub config: RunConfig,
    pub epoch: usize,
    pub schedule: RememberSchedule,
    /// Peer A, then peer B when cross denoising is enabled.
    pub peers: Vec<PeerState>,
    pub history: Vec<EpochMetrics>,
}

/// Corpora consumed by a run.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    /// Source corpus with possibly corrupted masks.
    pub source: &'a CorruptedCorpus,
    /// Clean source labels for the warm start.
    pub clean_source: Option<&'a Corpus>,
    /// Unlabeled target training images.
    pub target_train: &'a Corpus,
    /// Labeled target images used only for evaluation.
    pub target_test: Option<&'a Corpus>,
}

/// A segmentation target for one image of a step.
enum SegTerm<'a> {
    Source {
        idx: usize,
        mask: &'a LabelMask,
        omega: bool,
        boundary: &'a BoundaryWeightMap,
    },
    Pseudo {
        idx: usize,
        set: &'a PseudoLabelSet,
    },
}

struct StepBatch<'a> {
    sources: Vec<&'a Image>,
    targets: Vec<&'a Image>,
    target_valid: Vec<Option<&'a [bool]>>,
    terms: Vec<SegTerm<'a>>,
}

#[derive(Debug, Clone, Copy, Default)]
struct StepLosses {
    objective: f64,
    disc: f64,
    gen: f64,
}

fn with_context(e: Error, context: &str) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("{context}: {m}")),
        other => other,
    }
}

/// One inner iteration for one peer: a discriminator step on the current
/// predictions, then a segmenter step on the overall objective.
fn peer_step(peer: &mut PeerState, batch: &StepBatch, cfg: &RunConfig) -> Result<StepLosses> {
    let w = &cfg.loss;
    let seg = &peer.segmenter;
    let src: Vec<SegForward> = batch.sources.iter().map(|i| seg.forward(i)).collect::<Result<_>>()?;
    let tgt: Vec<SegForward> = batch.targets.iter().map(|i| seg.forward(i)).collect::<Result<_>>()?;
    let entropies: Vec<_> = tgt.iter().map(|f| entropy_map(&f.probs)).collect();
    let n_t = tgt.len() as f64;

    // Discriminator: source predictions are real, target predictions fake.
    let disc = &peer.discriminator;
    let mut grad_disc = vec![0.0; disc.parameter_count()];
    let mut disc_loss = 0.0;
    for j in 0..tgt.len() {
        let ds = disc.forward(&src[j % src.len()].probs)?;
        let dt = disc.forward(&tgt[j].probs)?;
        let adv = adversarial_losses(&ds.scores, &dt.scores, &entropies[j], batch.target_valid[j], w)?;
        disc_loss += adv.disc_loss / n_t;
        let scale = |g: Vec<f64>| g.into_iter().map(|v| v / n_t).collect::<Vec<_>>();
        disc.backward(&ds, &scale(adv.grad_disc_src), Some(&mut grad_disc), false);
        disc.backward(&dt, &scale(adv.grad_disc_tgt), Some(&mut grad_disc), false);
    }
    peer.disc_opt.apply(peer.discriminator.params_mut(), &grad_disc)?;

    // Segmenter: supervised terms plus the generator term under the updated
    // discriminator.
    let disc = &peer.discriminator;
    let mut src_grads: Vec<Option<Vec<f64>>> = vec![None; src.len()];
    let mut tgt_grads: Vec<Option<Vec<f64>>> = vec![None; tgt.len()];
    let add = |slot: &mut Option<Vec<f64>>, g: Vec<f64>, scale: f64| match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b),
        None => *slot = Some(g.into_iter().map(|v| v * scale).collect()),
    };
    let n_terms = batch.terms.len().max(1) as f64;
    let mut seg_value = 0.0;
    for term in &batch.terms {
        match term {
            SegTerm::Source {
                idx,
                mask,
                omega,
                boundary,
            } => {
                let lg = seg_loss(&src[*idx].probs, mask, *omega, boundary, w)?;
                seg_value += lg.value / n_terms;
                add(&mut src_grads[*idx], lg.grad, 1.0 / n_terms);
            }
            SegTerm::Pseudo { idx, set } => {
                let lg = masked_clean_loss(&tgt[*idx].probs, &set.labels, &set.valid, w)?;
                seg_value += lg.value / n_terms;
                add(&mut tgt_grads[*idx], lg.grad, 1.0 / n_terms);
            }
        }
    }
    let mut gen_loss = 0.0;
    for j in 0..tgt.len() {
        let dt = disc.forward(&tgt[j].probs)?;
        // The source scores do not enter the generator terms.
        let adv = adversarial_losses(&dt.scores, &dt.scores, &entropies[j], batch.target_valid[j], w)?;
        gen_loss += adv.gen_loss / n_t;
        let grad_p = disc
            .backward(&dt, &adv.grad_gen_tgt, None, true)
            .expect("input gradient requested");
        let mut g = softmax_backward(&tgt[j].probs, &grad_p);
        let ge = entropy_backward(&tgt[j].probs, &entropies[j], &adv.grad_gen_entropy);
        g.iter_mut().zip(ge).for_each(|(a, b)| *a += b);
        add(&mut tgt_grads[j], g, w.lambda_adv / n_t);
    }
    let mut grad_seg = vec![0.0; seg.parameter_count()];
    for (f, g) in src.iter().zip(&src_grads).chain(tgt.iter().zip(&tgt_grads)) {
        if let Some(g) = g {
            seg.backward(f, g, &mut grad_seg);
        }
    }
    if let Some(max) = cfg.grad_clip_norm {
        clip_grad_norm(&mut grad_seg, max);
    }
    peer.seg_opt.apply(peer.segmenter.params_mut(), &grad_seg)?;
    Ok(StepLosses {
        objective: seg_value + w.lambda_adv * gen_loss,
        disc: disc_loss,
        gen: gen_loss,
    })
}

/// Per-sample clean losses of one peer on a batch of labeled samples.
fn batch_losses(seg: &Segmenter, batch: &[&Sample], cfg: &RunConfig) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|s| {
            let p = seg.forward_softmax(&s.image)?;
            Ok(clean_loss(&p, label(s)?, &cfg.loss)?.value)
        })
        .collect()
}

fn label(s: &Sample) -> Result<&LabelMask> {
    s.mask
        .as_ref()
        .ok_or_else(|| Error::Ingestion {
            id: s.id.clone(),
            reason: "source sample has no mask".into(),
        })
}

/// Mean per-image Dice of a segmenter for every foreground class, scored on
/// nested regions (see [`region_dice`]).
pub fn evaluate(seg: &Segmenter, corpus: &Corpus) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus".into()));
    }
    let classes = corpus.num_classes();
    let mut sums = vec![0.0; classes - 1];
    for s in corpus.samples() {
        let truth = label(s)?;
        let pred = seg.forward_softmax(&s.image)?.argmax();
        for (c, sum) in sums.iter_mut().enumerate() {
            *sum += region_dice(&pred, truth, c + 1)?;
        }
    }
    Ok(sums.into_iter().map(|v| v / corpus.len() as f64).collect())
}

#[derive(Default)]
struct Accum {
    objective: Vec<f64>,
    disc: Vec<f64>,
    gen: Vec<f64>,
    counts: Vec<usize>,
}

impl Accum {
    fn new(peers: usize) -> Self {
        Self {
            objective: vec![0.0; peers],
            disc: vec![0.0; peers],
            gen: vec![0.0; peers],
            counts: vec![0; peers],
        }
    }

    fn push(&mut self, peer: usize, l: StepLosses) {
        self.objective[peer] += l.objective;
        self.disc[peer] += l.disc;
        self.gen[peer] += l.gen;
        self.counts[peer] += 1;
    }

    fn means(v: &[f64], counts: &[usize]) -> Vec<f64> {
        v.iter()
            .zip(counts)
            .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect()
    }
}

impl TrainRunState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = RememberSchedule::new(cfg.noise_ratio, cfg.epochs, cfg.gamma0)?;
        let mut peers = vec![PeerState::new(ArchitectureId::PeerA, cfg)];
        if cfg.strategy.cross_denoising {
            peers.push(PeerState::new(ArchitectureId::PeerB, cfg));
        }
        Ok(Self {
            config: cfg.clone(),
            epoch: 0,
            schedule,
            peers,
            history: Vec::new(),
        })
    }

    /// Peer A, the network used for inference.
    pub fn peer_a(&self) -> &Segmenter {
        &self.peers[0].segmenter
    }

    pub fn architecture_id(&self) -> String {
        self.peers
            .iter()
            .map(|p| p.peer_id.as_str())
            .collect::<Vec<_>>()
            .join("+")
    }

    /// Rotating source and target orders for one epoch.
    fn epoch_orders(&self, tag: &str, n_src: usize, n_tgt: usize) -> (Vec<usize>, Vec<usize>) {
        let mut r = rng::stream(self.config.seed, &format!("{tag}{}", self.epoch + 1));
        let mut src: Vec<usize> = (0..n_src).collect();
        src.shuffle(&mut r);
        let mut tgt: Vec<usize> = (0..n_tgt).collect();
        tgt.shuffle(&mut r);
        (src, tgt)
    }

    /// Clean-label epochs before noisy training: every peer trains on all
    /// clean source samples with the clean loss plus the adversarial term.
    pub fn warm_start(&mut self, clean: &Corpus, target: &Corpus) -> Result<()> {
        let cfg = self.config.clone();
        let boundaries = boundaries(clean)?;
        for epoch in 0..cfg.warm_start_epochs {
            let mut r = rng::stream(cfg.seed, &format!("warm{epoch}"));
            let mut src: Vec<usize> = (0..clean.len()).collect();
            src.shuffle(&mut r);
            let mut tgt: Vec<usize> = (0..target.len()).collect();
            tgt.shuffle(&mut r);
            for k in 0..cfg.outer_iterations {
                let picks = cyclic(&src, k, cfg.batch_size);
                let tpicks = cyclic(&tgt, k, cfg.batch_size);
                let samples: Vec<&Sample> = picks.iter().map(|&i| &clean.samples()[i]).collect();
                let all: Vec<usize> = (0..samples.len()).collect();
                let batch = source_batch(&samples, &boundaries, &picks, &all, &[], target, &tpicks)?;
                for peer in &mut self.peers {
                    peer_step(peer, &batch, &cfg)
                        .map_err(|e| with_context(e, &format!("warm start {epoch}, {}", peer.peer_id)))?;
                }
            }
            info!("warm start epoch {}/{} done", epoch + 1, cfg.warm_start_epochs);
        }
        Ok(())
    }

    /// One epoch of small-loss exchange and peer updates. Selection events
    /// are appended to `trace`.
    pub fn train_epoch(
        &mut self,
        source: &CorruptedCorpus,
        target: &Corpus,
        trace: &mut dyn Write,
    ) -> Result<EpochMetrics> {
        let cfg = self.config.clone();
        let src_corpus = &source.corpus;
        if src_corpus.is_empty() || target.is_empty() {
            return Err(Error::Empty("training needs source and target samples".into()));
        }
        let boundaries = boundaries(src_corpus)?;
        let t = self.epoch + 1;
        let gamma = self.schedule.rate(t);
        let (src_order, tgt_order) = self.epoch_orders("epoch", src_corpus.len(), target.len());
        let mut acc = Accum::new(self.peers.len());
        let (mut selected_total, mut selected_clean) = (0usize, 0usize);

        for k in 0..cfg.outer_iterations {
            let picks = cyclic(&src_order, k, cfg.batch_size);
            let tpicks = cyclic(&tgt_order, k, cfg.batch_size);
            let samples: Vec<&Sample> = picks.iter().map(|&i| &src_corpus.samples()[i]).collect();
            let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();

            // Each peer ranks the batch by its own clean loss; peer i trains
            // on the selection of peer (i + 1) mod n.
            let mut selections = Vec::with_capacity(self.peers.len());
            for peer in &self.peers {
                let losses = batch_losses(&peer.segmenter, &samples, &cfg)
                    .map_err(|e| with_context(e, &format!("epoch {t}, {}", peer.peer_id)))?;
                let rate = if cfg.strategy.cross_denoising { gamma } else { 1.0 };
                let mut sel = select_small_loss(&ids, &losses, rate)?;
                if cfg.strategy.noise_tolerant {
                    sel = split_omega(sel, cfg.omega_quantile);
                }
                selections.push((sel, losses));
            }
            let n = self.peers.len();
            for i in 0..n {
                let from = (i + 1) % n;
                let (sel, losses) = &selections[from];
                if cfg.strategy.cross_denoising {
                    selected_total += sel.len();
                    selected_clean += sel.indices.iter().filter(|&&j| !samples[j].is_corrupted()).count();
                }
                SelectionTrace {
                    epoch: t,
                    subset: k,
                    gamma: if cfg.strategy.cross_denoising { gamma } else { 1.0 },
                    selected_by: self.peers[from].peer_id.to_string(),
                    consumed_by: self.peers[i].peer_id.to_string(),
                    ids: sel.ids.clone(),
                    omega: sel.omega.clone(),
                    losses: sel.losses.clone(),
                    batch_ids: ids.clone(),
                    batch_losses: losses.clone(),
                }
                .append_to(trace)?;
            }
            for _ in 0..cfg.inner_iterations {
                for i in 0..n {
                    let (sel, _) = &selections[(i + 1) % n];
                    let batch =
                        source_batch(&samples, &boundaries, &picks, &sel.indices, &sel.omega, target, &tpicks)?;
                    let losses = peer_step(&mut self.peers[i], &batch, &cfg)
                        .map_err(|e| with_context(e, &format!("epoch {t}, {}", self.peers[i].peer_id)))?;
                    acc.push(i, losses);
                }
            }
        }
        self.epoch = t;
        Ok(EpochMetrics {
            epoch: t,
            gamma: if cfg.strategy.cross_denoising { gamma } else { 1.0 },
            train_loss: Accum::means(&acc.objective, &acc.counts),
            disc_loss: Accum::means(&acc.disc, &acc.counts),
            gen_loss: Accum::means(&acc.gen, &acc.counts),
            selection_purity: (selected_total > 0).then(|| selected_clean as f64 / selected_total as f64),
            pseudo_valid_fraction: None,
            dice: Vec::new(),
        })
    }

    /// Current predictions of every peer on the target training images.
    fn predict_all(&self, target: &Corpus) -> Result<Vec<Vec<(String, crate::datamodel::ProbMap)>>> {
        self.peers
            .iter()
            .map(|peer| {
                target
                    .samples()
                    .iter()
                    .map(|s| Ok((s.id.clone(), peer.segmenter.forward_softmax(&s.image)?)))
                    .collect()
            })
            .collect()
    }

    /// `rounds` rounds of pseudo-label exchange and fine-tuning. Returns the
    /// mean fraction of valid pseudo-label pixels and the last round's labels
    /// (received by peer A, then by peer B).
    pub fn run_cicl(
        &mut self,
        source: &Corpus,
        target: &Corpus,
        rounds: usize,
    ) -> Result<(Option<f64>, Vec<Vec<PseudoLabelSet>>)> {
        let cfg = self.config.clone();
        let q = cfg.class_quantiles();
        let (mut valid_sum, mut valid_n) = (0.0, 0usize);
        let mut last = Vec::new();
        for round in 0..rounds {
            let preds = self.predict_all(target)?;
            // Peer i receives labels made by peer (i + 1) mod n; a lone peer
            // labels for itself.
            let received: Vec<Vec<PseudoLabelSet>> = if preds.len() == 2 {
                let (for_b, for_a) = cicl_round(&preds[0], &preds[1], &q)?;
                vec![for_a, for_b]
            } else {
                let (own, _) = cicl_round(&preds[0], &preds[0], &q)?;
                vec![own]
            };
            for sets in &received {
                for s in sets {
                    valid_sum += s.valid_count() as f64 / s.valid.len() as f64;
                    valid_n += 1;
                }
            }
            let mut r = rng::stream(cfg.seed, &format!("cicl{}-{round}", self.epoch));
            let mut src: Vec<usize> = (0..source.len()).collect();
            src.shuffle(&mut r);
            let mut tgt: Vec<usize> = (0..target.len()).collect();
            tgt.shuffle(&mut r);
            for step in 0..cfg.cicl_steps {
                let spicks = cyclic(&src, step, cfg.batch_size);
                let tpicks = cyclic(&tgt, step, cfg.batch_size);
                for (i, sets) in received.iter().enumerate() {
                    let batch = StepBatch {
                        sources: spicks.iter().map(|&j| &source.samples()[j].image).collect(),
                        targets: tpicks.iter().map(|&j| &target.samples()[j].image).collect(),
                        target_valid: tpicks.iter().map(|&j| Some(sets[j].valid.as_slice())).collect(),
                        terms: if cfg.pseudo_supervise_segmenter {
                            tpicks
                                .iter()
                                .enumerate()
                                .map(|(idx, &j)| SegTerm::Pseudo { idx, set: &sets[j] })
                                .collect()
                        } else {
                            Vec::new()
                        },
                    };
                    peer_step(&mut self.peers[i], &batch, &cfg).map_err(|e| {
                        with_context(e, &format!("pseudo-label round {round}, {}", self.peers[i].peer_id))
                    })?;
                }
            }
            last = received;
        }
        Ok(((valid_n > 0).then(|| valid_sum / valid_n as f64), last))
    }

    /// Serializes both peers, their optimizers and the history.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.architecture_id(), config_hash(&self.config)?, self.epoch);
        for p in &self.peers {
            let id = p.peer_id.as_str();
            ck.insert_params(&format!("{id}.segmenter"), p.segmenter.param_specs(), p.segmenter.params());
            ck.insert_params(
                &format!("{id}.discriminator"),
                p.discriminator.param_specs(),
                p.discriminator.params(),
            );
            ck.insert_vector(&format!("{id}.seg_opt.first"), &p.seg_opt.first);
            ck.insert_vector(&format!("{id}.disc_opt.first"), &p.disc_opt.first);
            ck.insert_vector(&format!("{id}.disc_opt.second"), &p.disc_opt.second);
            ck.scalars.insert(format!("{id}.seg_opt.steps"), p.seg_opt.steps as f64);
            ck.scalars.insert(format!("{id}.disc_opt.steps"), p.disc_opt.steps as f64);
        }
        ck.metadata.insert("history".into(), serde_json::to_string(&self.history)?);
        Ok(ck)
    }

    /// Rebuilds a run state from a checkpoint made under the same config.
    pub fn from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let mut state = Self::new(cfg)?;
        if ck.architecture_id != state.architecture_id() || ck.config_hash != config_hash(cfg)? {
            return Err(Error::Checkpoint("checkpoint belongs to a different run".into()));
        }
        for p in &mut state.peers {
            let id = p.peer_id.as_str();
            let specs = p.segmenter.param_specs().to_vec();
            ck.load_params(&format!("{id}.segmenter"), &specs, p.segmenter.params_mut())?;
            let specs = p.discriminator.param_specs().to_vec();
            ck.load_params(&format!("{id}.discriminator"), &specs, p.discriminator.params_mut())?;
            let n = p.seg_opt.first.len();
            p.seg_opt.first = ck.vector(&format!("{id}.seg_opt.first"), n)?.to_vec();
            let n = p.disc_opt.first.len();
            p.disc_opt.first = ck.vector(&format!("{id}.disc_opt.first"), n)?.to_vec();
            p.disc_opt.second = ck.vector(&format!("{id}.disc_opt.second"), n)?.to_vec();
            p.seg_opt.steps = ck.scalar(&format!("{id}.seg_opt.steps"))? as u64;
            p.disc_opt.steps = ck.scalar(&format!("{id}.disc_opt.steps"))? as u64;
        }
        state.epoch = ck.epoch;
        state.history = match ck.metadata.get("history") {
            Some(h) => serde_json::from_str(h)?,
            None => Vec::new(),
        };
        Ok(state)
    }
}

fn boundaries(corpus: &Corpus) -> Result<Vec<BoundaryWeightMap>> {
    corpus
        .samples()
        .iter()
        .map(|s| Ok(boundary_weight_map(label(s)?)))
        .collect()
}

/// `len` entries of `order` starting at `k * len`, wrapping around.
fn cyclic(order: &[usize], k: usize, len: usize) -> Vec<usize> {
    (0..len).map(|j| order[(k * len + j) % order.len()]).collect()
}

fn source_batch<'a>(
    samples: &[&'a Sample],
    boundaries: &'a [BoundaryWeightMap],
    picks: &[usize],
    selected: &[usize],
    omega: &[bool],
    target: &'a Corpus,
    tpicks: &[usize],
) -> Result<StepBatch<'a>> {
    let terms = selected
        .iter()
        .enumerate()
        .map(|(n, &idx)| {
            Ok(SegTerm::Source {
                idx,
                mask: label(samples[idx])?,
                omega: omega.get(n).copied().unwrap_or(false),
                boundary: &boundaries[picks[idx]],
            })
        })
        .collect::<Result<_>>()?;
    Ok(StepBatch {
        sources: samples.iter().map(|s| &s.image).collect(),
        targets: tpicks.iter().map(|&j| &target.samples()[j].image).collect(),
        target_valid: vec![None; tpicks.len()],
        terms,
    })
}

/// Runs warm start, `T` epochs and the scheduled pseudo-label rounds.
///
/// With a run directory, a config snapshot, metrics CSV, selection trace,
/// per-epoch checkpoint and final report are written there, and an existing
/// checkpoint for the same config is resumed.
pub fn train_full(cfg: &RunConfig, data: TrainData, run_dir: Option<&Path>) -> Result<TrainRunState> {
    cfg.validate()?;
    let dir = run_dir.map(|d| RunDir::create(d, cfg)).transpose()?;
    let mut state = match dir.as_ref().map(|d| d.load_checkpoint(cfg)).transpose()?.flatten() {
        Some(s) => {
            info!("resuming after epoch {}", s.epoch);
            s
        }
        None => {
            let mut s = TrainRunState::new(cfg)?;
            if cfg.warm_start_epochs > 0 {
                let clean = data.clean_source.ok_or_else(|| {
                    Error::Config("warm start requested without clean source labels".into())
                })?;
                s.warm_start(clean, data.target_train)?;
            }
            s
        }
    };
    let mut sink = std::io::sink();
    let mut trace_file = dir.as_ref().map(|d| d.trace_writer()).transpose()?;
    while state.epoch < cfg.epochs {
        let trace: &mut dyn Write = match trace_file.as_mut() {
            Some(f) => f,
            None => &mut sink,
        };
        let mut metrics = state.train_epoch(data.source, data.target_train, trace)?;
        if cfg.strategy.cicl && state.epoch >= cfg.cicl_start() {
            let (valid, sets) = state.run_cicl(&data.source.corpus, data.target_train, cfg.cicl_iterations)?;
            metrics.pseudo_valid_fraction = valid;
            if let Some(d) = &dir {
                d.export_pseudo_labels(&state, &sets)?;
            }
        }
        if let Some(test) = data.target_test {
            metrics.dice = evaluate(state.peer_a(), test)?;
        }
        info!(
            "epoch {}/{}: gamma {:.3}, loss {:?}, dice {:?}",
            metrics.epoch, cfg.epochs, metrics.gamma, metrics.train_loss, metrics.dice
        );
        state.history.push(metrics);
        if let Some(d) = &dir {
            if let Some(f) = trace_file.as_mut() {
                f.flush().map_err(|e| Error::io(d.path(), e))?;
            }
            d.write_metrics(&state.history, cfg.model.num_classes)?;
            d.save_checkpoint(&state)?;
        }
    }
    if let Some(d) = &dir {
        d.write_report(&state, data.target_test)?;
    }
    Ok(state)
}
