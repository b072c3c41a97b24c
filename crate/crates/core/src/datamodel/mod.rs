//! Value types shared by every stage of the pipeline.
//!
//! Grids are stored planar and row-major: an image or probability map with
//! `k` channels over an `h × w` grid keeps channel `c` at
//! `data[c * h * w .. (c + 1) * h * w]`.

mod config;

pub use config::{LossConfig, ModelConfig, RunConfig, Strategy};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on per-pixel probability sums.
pub const PROB_SUM_TOL: f64 = 1e-5;

/// Minimum spatial extent of an image.
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => f.write_str("source"),
            Domain::Target => f.write_str("target"),
        }
    }
}

/// A planar image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
    domain: Domain,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f64>,
        domain: Domain,
    ) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "image is {height}x{width}, both sides must be at least {MIN_SIDE}"
            )));
        }
        if channels == 0 {
            return Err(Error::InvalidImage("image has no channels".into()));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "expected {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(i) = pixels
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::InvalidImage(format!(
                "value {} at flat index {i} is outside [0, 1]",
                pixels[i]
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
            domain,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Planar pixel data.
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.pixels[(channel * self.height + row) * self.width + col]
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

/// Integer class map.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    height: usize,
    width: usize,
    num_classes: usize,
    classes: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, num_classes: usize, classes: Vec<u8>) -> Result<Self> {
        if !(2..=256).contains(&num_classes) {
            return Err(Error::InvalidMask(format!(
                "num_classes must be in [2, 256], got {num_classes}"
            )));
        }
        if classes.len() != height * width {
            return Err(Error::InvalidMask(format!(
                "expected {} labels, got {}",
                height * width,
                classes.len()
            )));
        }
        if let Some(i) = classes.iter().position(|&c| c as usize >= num_classes) {
            return Err(Error::InvalidMask(format!(
                "class {} at ({}, {}) is not below num_classes = {num_classes}",
                classes[i],
                i / width,
                i % width
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            classes,
        })
    }

    /// A mask filled with a single class.
    pub fn filled(height: usize, width: usize, num_classes: usize, class: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    pub fn same_shape(&self, other: &LabelMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Pixel count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.classes {
            counts[c as usize] += 1;
        }
        counts
    }

    /// Boolean membership grid for one class.
    pub fn region(&self, class: usize) -> Vec<bool> {
        self.classes.iter().map(|&c| c as usize == class).collect()
    }
}

/// Per-pixel class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    num_classes: usize,
    probs: Vec<f64>,
}

impl ProbMap {
    /// Wraps raw planar probabilities without checking normalization; see
    /// [`validate_prob_map`].
    pub fn from_raw(
        height: usize,
        width: usize,
        num_classes: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        if probs.len() != height * width * num_classes {
            return Err(Error::ShapeMismatch(format!(
                "probability map {height}x{width}x{num_classes} needs {} values, got {}",
                height * width * num_classes,
                probs.len()
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            probs,
        })
    }

    /// Uniform `1 / C` map.
    pub fn uniform(height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            height,
            width,
            num_classes,
            probs: vec![1.0 / num_classes as f64; height * width * num_classes],
        }
    }

    /// Softmax over the class axis of planar logits.
    pub fn softmax(height: usize, width: usize, num_classes: usize, logits: &[f64]) -> Result<Self> {
        let plane = height * width;
        if logits.len() != plane * num_classes {
            return Err(Error::ShapeMismatch(format!(
                "logits have {} values, expected {}",
                logits.len(),
                plane * num_classes
            )));
        }
        let mut probs = vec![0.0; logits.len()];
        for i in 0..plane {
            let max = (0..num_classes)
                .map(|c| logits[c * plane + i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..num_classes {
                let e = (logits[c * plane + i] - max).exp();
                probs[c * plane + i] = e;
                sum += e;
            }
            for c in 0..num_classes {
                probs[c * plane + i] /= sum;
            }
        }
        Ok(Self {
            height,
            width,
            num_classes,
            probs,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, class: usize, row: usize, col: usize) -> f64 {
        self.probs[(class * self.height + row) * self.width + col]
    }

    /// The probability plane of one class.
    pub fn channel(&self, class: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.probs[class * plane..(class + 1) * plane]
    }

    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMask {
        let plane = self.height * self.width;
        let classes = (0..plane)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.num_classes {
                    if self.probs[c * plane + i] > self.probs[best * plane + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseType {
    Dilate,
    Erode,
    Elastic,
    None,
}

impl NoiseType {
    pub const CORRUPTING: [NoiseType; 3] = [NoiseType::Dilate, NoiseType::Erode, NoiseType::Elastic];
}

impl std::fmt::Display for NoiseType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            NoiseType::Dilate => "dilate",
            NoiseType::Erode => "erode",
            NoiseType::Elastic => "elastic",
            NoiseType::None => "none",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for NoiseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dilate" => Ok(NoiseType::Dilate),
            "erode" => Ok(NoiseType::Erode),
            "elastic" => Ok(NoiseType::Elastic),
            "none" => Ok(NoiseType::None),
            other => Err(Error::Config(format!("unknown noise type '{other}'"))),
        }
    }
}

/// Corruption record attached to a source sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseMeta {
    pub corrupted: bool,
    pub noise_type: NoiseType,
    pub magnitude: f64,
    pub alpha: f64,
}

impl NoiseMeta {
    pub const CLEAN: NoiseMeta = NoiseMeta {
        corrupted: false,
        noise_type: NoiseType::None,
        magnitude: 0.0,
        alpha: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Option<LabelMask>,
    pub noise_meta: Option<NoiseMeta>,
}

impl Sample {
    /// Whether the sample was marked as corrupted.
    pub fn is_corrupted(&self) -> bool {
        self.noise_meta.is_some_and(|m| m.corrupted)
    }
}

/// An ordered collection of samples from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    samples: Vec<Sample>,
    domain: Domain,
    num_classes: usize,
}

impl Corpus {
    pub fn new(samples: Vec<Sample>, domain: Domain, num_classes: usize) -> Result<Self> {
        for s in &samples {
            if s.image.domain() != domain {
                return Err(Error::Config(format!(
                    "sample '{}' is tagged {} in a {domain} corpus",
                    s.id,
                    s.image.domain()
                )));
            }
            if let Some(mask) = &s.mask {
                if mask.num_classes() != num_classes {
                    return Err(Error::InvalidMask(format!(
                        "sample '{}' has {} classes, corpus has {num_classes}",
                        s.id,
                        mask.num_classes()
                    )));
                }
                if mask.height() != s.image.height() || mask.width() != s.image.width() {
                    return Err(Error::ShapeMismatch(format!(
                        "sample '{}' mask is {}x{}, image is {}x{}",
                        s.id,
                        mask.height(),
                        mask.width(),
                        s.image.height(),
                        s.image.width()
                    )));
                }
            }
        }
        Ok(Self {
            samples,
            domain,
            num_classes,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Copy of this corpus without masks, as used for adaptation.
    pub fn without_masks(&self) -> Corpus {
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                mask: None,
                ..s.clone()
            })
            .collect();
        Corpus {
            samples,
            domain: self.domain,
            num_classes: self.num_classes,
        }
    }

    pub(crate) fn into_samples(self) -> Vec<Sample> {
        self.samples
    }
}

/// One-hot encoding of a mask as a probability map.
pub fn one_hot(mask: &LabelMask) -> Result<ProbMap> {
    let plane = mask.height * mask.width;
    let mut probs = vec![0.0; plane * mask.num_classes];
    for (i, &c) in mask.classes.iter().enumerate() {
        let c = c as usize;
        if c >= mask.num_classes {
            return Err(Error::InvalidMask(format!(
                "class {c} at ({}, {}) is not below {}",
                i / mask.width,
                i % mask.width,
                mask.num_classes
            )));
        }
        probs[c * plane + i] = 1.0;
    }
    Ok(ProbMap {
        height: mask.height,
        width: mask.width,
        num_classes: mask.num_classes,
        probs,
    })
}

/// Checks non-negativity and per-pixel normalization; returns the map unchanged.
pub fn validate_prob_map(p: ProbMap) -> Result<ProbMap> {
    let plane = p.height * p.width;
    for i in 0..plane {
        let mut sum = 0.0;
        for c in 0..p.num_classes {
            let v = p.probs[c * plane + i];
            if !(v >= 0.0) {
                return Err(Error::Normalization {
                    row: i / p.width,
                    col: i % p.width,
                    reason: format!("class {c} has probability {v}"),
                });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Normalization {
                row: i / p.width,
                col: i % p.width,
                reason: format!("probabilities sum to {sum}"),
            });
        }
    }
    Ok(p)
}
