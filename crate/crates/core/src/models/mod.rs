//! Peer segmenters, patch discriminators and their optimizers.

pub mod checkpoint;
pub mod graph;
pub mod optim;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, ModelConfig, ProbMap};
use crate::error::{Error, Result};
use crate::losses::ScoreMap;
use graph::{Activations, Graph, GraphBuilder, ParamSpec, Tensor};

pub use checkpoint::{config_hash, Checkpoint, TensorRecord};
pub use optim::{clip_grad_norm, OptimizerKind, OptimizerState};

/// Segmenter architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureId {
    /// Encoder-decoder with four downsampling stages and a multi-scale head.
    PeerA,
    /// Shallower network of depthwise-separable blocks.
    PeerB,
}

impl ArchitectureId {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchitectureId::PeerA => "peer_a",
            ArchitectureId::PeerB => "peer_b",
        }
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitectureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "peer_a" => Ok(ArchitectureId::PeerA),
            "peer_b" => Ok(ArchitectureId::PeerB),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Number of convolution stages in a discriminator.
pub const DISCRIMINATOR_STAGES: usize = 5;
const LEAKY_SLOPE: f64 = 0.2;

fn peer_a_graph(cfg: &ModelConfig) -> Graph {
    let mut b = GraphBuilder::new(cfg.in_channels);
    let x = 0;
    let stem = b.conv("stem", x, 8, 3, 2, 1, 1);
    let stem = b.relu(stem);
    let e1 = b.conv("enc1", stem, 8, 3, 1, 1, 1);
    let e1 = b.relu(e1);
    let d1 = b.conv("down1", e1, 16, 3, 2, 1, 1);
    let d1 = b.relu(d1);
    let d2 = b.conv("down2", d1, 16, 3, 2, 1, 1);
    let d2 = b.relu(d2);
    let d3 = b.conv("down3", d2, 16, 3, 2, 1, 1);
    let d3 = b.relu(d3);

    let b1 = b.conv("head.point", d3, 16, 1, 1, 0, 1);
    let b1 = b.relu(b1);
    let b2 = b.conv("head.dilated", d3, 16, 3, 1, 2, 2);
    let b2 = b.relu(b2);
    let gp = b.global_pool(d3);
    let b3 = b.conv("head.pool", gp, 16, 1, 1, 0, 1);
    let b3 = b.relu(b3);
    let cat = b.concat(&[b1, b2, b3]);
    let head = b.conv("head.project", cat, 16, 1, 1, 0, 1);
    let head = b.relu(head);

    let up = b.resize_nearest(head, d2);
    let s2 = b.add(up, d2);
    let c2 = b.conv("dec2", s2, 16, 3, 1, 1, 1);
    let c2 = b.relu(c2);
    let up = b.resize_nearest(c2, d1);
    let s1 = b.add(up, d1);
    let c1 = b.conv("dec1", s1, 16, 3, 1, 1, 1);
    let c1 = b.relu(c1);
    let up = b.resize_nearest(c1, e1);
    let p0 = b.conv("dec0", up, 8, 1, 1, 0, 1);
    let s0 = b.add(p0, e1);
    let s0 = b.relu(s0);
    let logits = b.conv("classifier", s0, cfg.num_classes, 1, 1, 0, 1);
    b.resize_bilinear(logits, x);
    b.finish()
}

fn peer_b_graph(cfg: &ModelConfig) -> Graph {
    let mut b = GraphBuilder::new(cfg.in_channels);
    let x = 0;
    let stem = b.conv("stem", x, 16, 3, 2, 1, 1);
    let stem = b.relu(stem);
    let dw1 = b.depthwise("block1.dw", stem, 3, 1, 1, 1);
    let dw1 = b.relu(dw1);
    let pw1 = b.conv("block1.pw", dw1, 24, 1, 1, 0, 1);
    let pw1 = b.relu(pw1);
    let dw2 = b.depthwise("block2.dw", pw1, 3, 2, 1, 1);
    let dw2 = b.relu(dw2);
    let pw2 = b.conv("block2.pw", dw2, 32, 1, 1, 0, 1);
    let pw2 = b.relu(pw2);
    let dw3 = b.depthwise("block3.dw", pw2, 3, 1, 2, 2);
    let dw3 = b.relu(dw3);
    let pw3 = b.conv("block3.pw", dw3, 32, 1, 1, 0, 1);
    let res = b.add(pw3, pw2);
    let res = b.relu(res);
    let up = b.resize_nearest(res, pw1);
    let proj = b.conv("skip.project", up, 24, 1, 1, 0, 1);
    let merged = b.add(proj, pw1);
    let merged = b.relu(merged);
    let logits = b.conv("classifier", merged, cfg.num_classes, 1, 1, 0, 1);
    b.resize_bilinear(logits, x);
    b.finish()
}

fn discriminator_graph(cfg: &ModelConfig) -> Graph {
    let mut b = GraphBuilder::new(cfg.num_classes);
    let mut node = 0;
    let mut channels = cfg.disc_base_channels;
    for stage in 1..DISCRIMINATOR_STAGES {
        node = b.conv(&format!("stage{stage}"), node, channels, 4, 2, 1, 1);
        node = b.leaky_relu(node, LEAKY_SLOPE);
        channels *= 2;
    }
    // A 3x3 final kernel keeps small inputs (down to 16 pixels) valid.
    b.conv(&format!("stage{DISCRIMINATOR_STAGES}"), node, 1, 3, 2, 1, 1);
    b.finish()
}

/// He-normal weights, zero biases.
fn init_params(graph: &Graph, seed: u64, zero_last: bool) -> Vec<f64> {
    let mut rng = crate::rng::stream(seed, "init");
    let mut params = vec![0.0; graph.num_params()];
    let last_conv = graph.last_conv().map(|c| (c.weight, c.bias));
    for spec in graph.specs() {
        if !spec.name.ends_with(".weight") {
            continue;
        }
        if zero_last && last_conv.map(|(w, _)| w) == Some(spec.offset) {
            continue;
        }
        let fan_in: usize = spec.shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for v in &mut params[spec.range()] {
            *v = normal.sample(&mut rng);
        }
    }
    params
}

fn param_norms(params: &[f64]) -> String {
    let l2 = params.iter().map(|v| v * v).sum::<f64>().sqrt();
    let max = params.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let non_finite = params.iter().filter(|v| !v.is_finite()).count();
    format!("parameter L2 norm {l2:.6e}, max |p| {max:.6e}, {non_finite} non-finite parameters")
}

/// Cached forward pass of a segmenter on one image.
#[derive(Debug, Clone)]
pub struct SegForward {
    acts: Activations,
    pub probs: ProbMap,
}

impl SegForward {
    pub fn logits(&self) -> &[f64] {
        &self.acts.output().data
    }
}

/// A peer segmentation network: image in, per-pixel class logits out.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmenter {
    arch: ArchitectureId,
    graph: Graph,
    params: Vec<f64>,
    num_classes: usize,
    standardize: bool,
}

/// Per-channel `(x - mean) / std`; constant channels map to zero.
fn standardize(img: &Image) -> Vec<f64> {
    let plane = img.height() * img.width();
    let mut out = img.pixels().to_vec();
    for ch in out.chunks_mut(plane) {
        let mean = ch.iter().sum::<f64>() / plane as f64;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
        ch.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    }
    out
}

impl Segmenter {
    pub fn new(arch: ArchitectureId, cfg: &ModelConfig, seed: u64) -> Self {
        let graph = match arch {
            ArchitectureId::PeerA => peer_a_graph(cfg),
            ArchitectureId::PeerB => peer_b_graph(cfg),
        };
        let seed = crate::rng::sub_seed(seed, arch.as_str());
        let params = init_params(&graph, seed, cfg.zero_init_head);
        Self {
            arch,
            graph,
            params,
            num_classes: cfg.num_classes,
            standardize: cfg.standardize_input,
        }
    }

    pub fn architecture(&self) -> ArchitectureId {
        self.arch
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Receptive field of an output pixel along the local convolution path,
    /// in input pixels.
    pub fn receptive_field(&self) -> usize {
        self.graph.receptive_field()
    }

    pub fn conv_layers(&self) -> usize {
        self.graph.conv_count()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        self.graph.specs()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if img.channels() != self.graph.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "{} expects {} input channels, image has {}",
                self.arch,
                self.graph.in_channels(),
                img.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, img: &Image) -> Result<SegForward> {
        self.check_image(img)?;
        let pixels = if self.standardize {
            standardize(img)
        } else {
            img.pixels().to_vec()
        };
        let input = Tensor::from_vec(img.channels(), img.height(), img.width(), pixels);
        let acts = self.graph.forward(&self.params, input);
        let out = acts.output();
        if let Some(i) = out.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "{} produced non-finite logit {} at index {i}; {}",
                self.arch,
                out.data[i],
                param_norms(&self.params)
            )));
        }
        let probs = ProbMap::softmax(out.h, out.w, out.c, &out.data)?;
        Ok(SegForward { acts, probs })
    }

    pub fn forward_softmax(&self, img: &Image) -> Result<ProbMap> {
        Ok(self.forward(img)?.probs)
    }

    /// Accumulates the parameter gradient for a gradient on the logits.
    pub fn backward(&self, fwd: &SegForward, grad_logits: &[f64], grad_params: &mut [f64]) {
        let out = fwd.acts.output();
        let g = Tensor::from_vec(out.c, out.h, out.w, grad_logits.to_vec());
        self.graph
            .backward(&self.params, &fwd.acts, g, Some(grad_params), false);
    }
}

/// Cached forward pass of a discriminator.
#[derive(Debug, Clone)]
pub struct DiscForward {
    acts: Activations,
    pub scores: ScoreMap,
}

/// Fully convolutional patch discriminator over probability maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    graph: Graph,
    params: Vec<f64>,
}

impl Discriminator {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let graph = discriminator_graph(cfg);
        let params = init_params(&graph, crate::rng::sub_seed(seed, "discriminator"), false);
        Self { graph, params }
    }

    pub fn stages(&self) -> usize {
        self.graph.conv_count()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        self.graph.specs()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, p: &ProbMap) -> Result<DiscForward> {
        if p.num_classes() != self.graph.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects {} classes, got {}",
                self.graph.in_channels(),
                p.num_classes()
            )));
        }
        let input = Tensor::from_vec(p.num_classes(), p.height(), p.width(), p.probs().to_vec());
        let acts = self.graph.forward(&self.params, input);
        let out = acts.output();
        if out.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "discriminator produced non-finite scores; {}",
                param_norms(&self.params)
            )));
        }
        let scores = ScoreMap::new(out.h, out.w, out.data.clone())?;
        Ok(DiscForward { acts, scores })
    }

    /// Backpropagates a gradient on the scores. Parameter gradients are
    /// accumulated when `grad_params` is given; the gradient with respect to
    /// the input probabilities is returned when requested.
    pub fn backward(
        &self,
        fwd: &DiscForward,
        grad_scores: &[f64],
        grad_params: Option<&mut [f64]>,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let out = fwd.acts.output();
        let g = Tensor::from_vec(out.c, out.h, out.w, grad_scores.to_vec());
        self.graph
            .backward(&self.params, &fwd.acts, g, grad_params, want_input_grad)
            .map(|t| t.data)
    }
}
