//! Label corruption: dilation, erosion and elastic deformation of masks,
//! calibrated to a requested noise level.
//!
//! Classes are treated as nested structures: structure `c` covers every pixel
//! labeled `>= c`, so the cup (class 2) always sits inside the disc
//! structure (classes 1 and 2). Morphology acts on each structure and the
//! mask is repainted in increasing class order, which keeps the nesting.
//!
//! Dilation and erosion magnitudes are real-valued. The integer part is the
//! radius of a chessboard (8-connected) structuring element; the fractional
//! part `f` applies one more ring step only over the angular sector
//! `[0, 2πf)` around the structure's centroid. The corrupted structure is
//! therefore monotone in the magnitude, which calibration relies on.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Corpus, LabelMask, NoiseMeta, NoiseType, Sample};
use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::rng;

/// Calibrated α must land within this distance of its target.
pub const ALPHA_TOLERANCE: f64 = 0.05;

/// Smallest magnitude tried when an erosion keeps annihilating a region.
pub const MAGNITUDE_FLOOR: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    Low,
    High,
}

impl NoiseLevel {
    /// Target α band. Low is half-open `[0.1, 0.4)`, high is `[0.4, 0.7]`.
    pub fn band(self) -> (f64, f64) {
        match self {
            NoiseLevel::Low => (0.1, 0.4),
            NoiseLevel::High => (0.4, 0.7),
        }
    }

    pub fn contains(self, alpha: f64) -> bool {
        let (lo, hi) = self.band();
        match self {
            NoiseLevel::Low => alpha >= lo && alpha < hi,
            NoiseLevel::High => alpha >= lo && alpha <= hi,
        }
    }

    /// Range targets are drawn from, kept a tolerance away from the band ends.
    fn target_range(self) -> (f64, f64) {
        let (lo, hi) = self.band();
        (lo + ALPHA_TOLERANCE, hi - ALPHA_TOLERANCE)
    }
}

impl std::str::FromStr for NoiseLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(NoiseLevel::Low),
            "high" => Ok(NoiseLevel::High),
            other => Err(Error::Config(format!("unknown noise level '{other}'"))),
        }
    }
}

impl std::fmt::Display for NoiseLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseLevel::Low => "low",
            NoiseLevel::High => "high",
        })
    }
}

/// How a corpus gets corrupted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub level: NoiseLevel,
    /// Fraction of samples to corrupt (β).
    pub ratio: f64,
    /// Noise types drawn uniformly per corrupted sample.
    pub noise_types: Vec<NoiseType>,
    pub max_dilation: f64,
    pub max_erosion: f64,
    pub max_elastic_amplitude: f64,
    /// Standard deviation (pixels) of the Gaussian smoothing of elastic fields.
    pub elastic_smoothness: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            level: NoiseLevel::High,
            ratio: 0.5,
            noise_types: NoiseType::CORRUPTING.to_vec(),
            max_dilation: 16.0,
            max_erosion: 16.0,
            max_elastic_amplitude: 48.0,
            elastic_smoothness: 4.0,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("noise ratio must be in [0, 1), got {}", self.ratio)));
        }
        if self.noise_types.is_empty() || self.noise_types.contains(&NoiseType::None) {
            return Err(Error::Config("noise_types must list dilate/erode/elastic only".into()));
        }
        for (name, v) in [
            ("max_dilation", self.max_dilation),
            ("max_erosion", self.max_erosion),
            ("max_elastic_amplitude", self.max_elastic_amplitude),
            ("elastic_smoothness", self.elastic_smoothness),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    fn max_magnitude(&self, noise_type: NoiseType) -> f64 {
        match noise_type {
            NoiseType::Dilate => self.max_dilation,
            NoiseType::Erode => self.max_erosion,
            NoiseType::Elastic => self.max_elastic_amplitude,
            NoiseType::None => 0.0,
        }
    }
}

/// A corrupted mask with the magnitude actually applied (erosion may back off).
#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub mask: LabelMask,
    pub magnitude: f64,
}

/// A source corpus in which some masks were replaced by corrupted variants.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedCorpus {
    pub corpus: Corpus,
}

/// One row of the corruption manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub id: String,
    pub corrupted: bool,
    pub noise_type: NoiseType,
    pub magnitude: f64,
    pub alpha: f64,
}

impl CorruptedCorpus {
    pub fn corrupted_ids(&self) -> Vec<&str> {
        self.corpus
            .samples()
            .iter()
            .filter(|s| s.is_corrupted())
            .map(|s| s.id.as_str())
            .collect()
    }

    pub fn records(&self) -> Vec<NoiseRecord> {
        self.corpus
            .samples()
            .iter()
            .map(|s| {
                let meta = s.noise_meta.unwrap_or(NoiseMeta::CLEAN);
                NoiseRecord {
                    id: s.id.clone(),
                    corrupted: meta.corrupted,
                    noise_type: meta.noise_type,
                    magnitude: meta.magnitude,
                    alpha: meta.alpha,
                }
            })
            .collect()
    }

    /// Writes the manifest as CSV with columns `id,corrupted,noise_type,magnitude,alpha`.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in self.records() {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Attaches noise metadata read from a manifest to a corpus.
    pub fn from_manifest(corpus: Corpus, path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut metas = std::collections::HashMap::new();
        for rec in reader.deserialize::<NoiseRecord>() {
            let rec = rec?;
            metas.insert(
                rec.id.clone(),
                NoiseMeta {
                    corrupted: rec.corrupted,
                    noise_type: rec.noise_type,
                    magnitude: rec.magnitude,
                    alpha: rec.alpha,
                },
            );
        }
        let (domain, num_classes) = (corpus.domain(), corpus.num_classes());
        let samples = corpus
            .into_samples()
            .into_iter()
            .map(|s| Sample {
                noise_meta: Some(metas.get(&s.id).copied().unwrap_or(NoiseMeta::CLEAN)),
                ..s
            })
            .collect();
        Ok(Self {
            corpus: Corpus::new(samples, domain, num_classes)?,
        })
    }
}

/// Structure `c`: every pixel labeled at least `c`.
fn structure(mask: &LabelMask, class: usize) -> Vec<bool> {
    mask.classes().iter().map(|&v| v as usize >= class).collect()
}

/// Repaints a mask from nested structures; `structures[c - 1]` is structure `c`.
fn paint(mask: &LabelMask, structures: &[Vec<bool>]) -> LabelMask {
    let mut classes = vec![0u8; mask.classes().len()];
    for (k, s) in structures.iter().enumerate() {
        for (out, &inside) in classes.iter_mut().zip(s) {
            if inside {
                *out = (k + 1) as u8;
            }
        }
    }
    LabelMask::new(mask.height(), mask.width(), mask.num_classes(), classes)
        .expect("repainted labels stay below num_classes")
}

/// Chessboard dilation (`grow = true`) or erosion by integer radius `r`.
/// Pixels beyond the border are ignored.
fn chessboard(h: usize, w: usize, region: &[bool], r: usize, grow: bool) -> Vec<bool> {
    if r == 0 {
        return region.to_vec();
    }
    let pick = |acc: bool, v: bool| if grow { acc || v } else { acc && v };
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = (lo..=hi).fold(!grow, |acc, xx| pick(acc, region[y * w + xx]));
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).fold(!grow, |acc, yy| pick(acc, rows[yy * w + x]));
        }
    }
    out
}

/// Fraction of a full turn of the pixel around `(cy, cx)`, in `[0, 1)`.
fn turn(y: usize, x: usize, cy: f64, cx: f64) -> f64 {
    let a = (y as f64 - cy).atan2(x as f64 - cx);
    let t = a / std::f64::consts::TAU;
    if t < 0.0 {
        t + 1.0
    } else {
        t
    }
}

fn centroid(h: usize, w: usize, region: &[bool]) -> (f64, f64) {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for i in (0..h * w).filter(|&i| region[i]) {
        sy += (i / w) as f64;
        sx += (i % w) as f64;
        n += 1.0;
    }
    if n == 0.0 {
        ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
    } else {
        (sy / n, sx / n)
    }
}

/// Morphology with a real-valued magnitude (see module docs).
fn morph(h: usize, w: usize, region: &[bool], magnitude: f64, grow: bool) -> Vec<bool> {
    let r = magnitude.floor() as usize;
    let frac = magnitude - r as f64;
    let base = chessboard(h, w, region, r, grow);
    if frac <= 0.0 {
        return base;
    }
    let next = chessboard(h, w, region, r + 1, grow);
    let (cy, cx) = centroid(h, w, region);
    (0..h * w)
        .map(|i| {
            if base[i] != next[i] && turn(i / w, i % w, cy, cx) < frac {
                next[i]
            } else {
                base[i]
            }
        })
        .collect()
}

/// Smooth displacement field with unit sup-norm, as `(dy, dx)` planes.
pub fn displacement_field(h: usize, w: usize, smoothness: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = rng::stream(seed, "elastic-field");
    let unif = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let mut dy: Vec<f64> = (0..h * w).map(|_| unif.sample(&mut rng)).collect();
    let mut dx: Vec<f64> = (0..h * w).map(|_| unif.sample(&mut rng)).collect();
    gaussian_blur(&mut dy, h, w, smoothness);
    gaussian_blur(&mut dx, h, w, smoothness);
    let peak = dy
        .iter()
        .chain(&dx)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    dy.iter_mut().chain(dx.iter_mut()).for_each(|v| *v /= peak);
    (dy, dx)
}

/// Separable Gaussian blur with clamped borders.
pub(crate) fn gaussian_blur(data: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let xx = (x as i64 + j as i64 - radius).clamp(0, w as i64 - 1) as usize;
                s += k * data[y * w + xx];
            }
            tmp[y * w + x] = s / norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let yy = (y as i64 + j as i64 - radius).clamp(0, h as i64 - 1) as usize;
                s += k * tmp[yy * w + x];
            }
            data[y * w + x] = s / norm;
        }
    }
}

/// Nearest-neighbor warp of a mask by `amplitude` times a unit field.
fn warp(mask: &LabelMask, field: &(Vec<f64>, Vec<f64>), amplitude: f64) -> LabelMask {
    let (h, w) = (mask.height(), mask.width());
    let classes = (0..h * w)
        .map(|i| {
            let y = (i / w) as f64 + amplitude * field.0[i];
            let x = (i % w) as f64 + amplitude * field.1[i];
            let yy = y.round().clamp(0.0, h as f64 - 1.0) as usize;
            let xx = x.round().clamp(0.0, w as f64 - 1.0) as usize;
            mask.get(yy, xx)
        })
        .collect();
    LabelMask::new(h, w, mask.num_classes(), classes).expect("warped labels come from the mask")
}

fn apply(
    mask: &LabelMask,
    noise_type: NoiseType,
    magnitude: f64,
    smoothness: f64,
    seed: u64,
) -> Result<LabelMask> {
    let (h, w) = (mask.height(), mask.width());
    match noise_type {
        NoiseType::None => Ok(mask.clone()),
        NoiseType::Dilate | NoiseType::Erode => {
            let grow = noise_type == NoiseType::Dilate;
            let mut structures = Vec::with_capacity(mask.num_classes() - 1);
            for c in 1..mask.num_classes() {
                let s = structure(mask, c);
                let present = s.iter().any(|&b| b);
                let m = morph(h, w, &s, magnitude, grow);
                if present && !m.iter().any(|&b| b) {
                    return Err(Error::Corruption(format!(
                        "erosion by {magnitude:.3} annihilates class {c}"
                    )));
                }
                structures.push(m);
            }
            // Keep every structure inside the one enclosing it.
            for k in (1..structures.len()).rev() {
                let (outer, inner) = structures.split_at_mut(k);
                for (o, &i) in outer[k - 1].iter_mut().zip(&inner[0]) {
                    *o |= i;
                }
            }
            Ok(paint(mask, &structures))
        }
        NoiseType::Elastic => {
            let field = displacement_field(h, w, smoothness, seed);
            Ok(warp(mask, &field, magnitude))
        }
    }
}

/// Corrupts a mask. Magnitudes `<= 0` are the identity. An erosion that would
/// wipe out a class backs off by halving the magnitude until it reaches
/// [`MAGNITUDE_FLOOR`].
pub fn corrupt_mask(
    mask: &LabelMask,
    noise_type: NoiseType,
    magnitude: f64,
    smoothness: f64,
    seed: u64,
) -> Result<Corruption> {
    if !magnitude.is_finite() {
        return Err(Error::Corruption(format!("magnitude {magnitude} is not finite")));
    }
    if magnitude <= 0.0 || noise_type == NoiseType::None {
        return Ok(Corruption {
            mask: mask.clone(),
            magnitude: 0.0,
        });
    }
    let mut m = magnitude;
    loop {
        match apply(mask, noise_type, m, smoothness, seed) {
            Ok(out) => {
                return Ok(Corruption {
                    mask: out,
                    magnitude: m,
                })
            }
            Err(Error::Corruption(reason)) if noise_type == NoiseType::Erode => {
                m /= 2.0;
                if m < MAGNITUDE_FLOOR {
                    return Err(Error::Corruption(format!(
                        "{reason}; magnitude floor {MAGNITUDE_FLOOR} reached"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// α = Σ over foreground classes of `1 - Dice(clean, noisy)`.
pub fn noise_level(clean: &LabelMask, noisy: &LabelMask) -> Result<f64> {
    if !clean.same_shape(noisy) || clean.num_classes() != noisy.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "clean {}x{}x{} vs noisy {}x{}x{}",
            clean.height(),
            clean.width(),
            clean.num_classes(),
            noisy.height(),
            noisy.width(),
            noisy.num_classes()
        )));
    }
    let mut alpha = 0.0;
    for c in 1..clean.num_classes() {
        alpha += 1.0 - dice(clean, noisy, c)?;
    }
    Ok(alpha)
}

/// α after corrupting by `magnitude`, or `None` when the corruption is
/// impossible at that magnitude (erosion annihilating a region).
fn alpha_at(
    mask: &LabelMask,
    noise_type: NoiseType,
    magnitude: f64,
    smoothness: f64,
    seed: u64,
) -> Result<Option<f64>> {
    if magnitude <= 0.0 {
        return Ok(Some(0.0));
    }
    match apply(mask, noise_type, magnitude, smoothness, seed) {
        Ok(noisy) => Ok(Some(noise_level(mask, &noisy)?)),
        Err(Error::Corruption(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Finds a magnitude in `(0, max_magnitude]` whose corruption lands within
/// [`ALPHA_TOLERANCE`] of `target_alpha`, by bisection with a grid-sweep
/// fallback for non-monotone elastic fields.
pub fn calibrate_magnitude(
    mask: &LabelMask,
    noise_type: NoiseType,
    target_alpha: f64,
    max_magnitude: f64,
    smoothness: f64,
    seed: u64,
) -> Result<f64> {
    if target_alpha == 0.0 {
        return Ok(0.0);
    }
    if !(target_alpha > 0.0 && target_alpha < 1.5) || noise_type == NoiseType::None {
        return Err(Error::Calibration {
            target: target_alpha,
            min_alpha: 0.0,
            max_alpha: 0.0,
        });
    }
    let mut seen_min = f64::INFINITY;
    let mut seen_max = 0.0f64;
    let mut best: Option<(f64, f64)> = None;
    let mut consider = |m: f64, a: f64, best: &mut Option<(f64, f64)>| {
        seen_min = seen_min.min(a);
        seen_max = seen_max.max(a);
        let err = (a - target_alpha).abs();
        if best.is_none_or(|(_, e)| err < e) {
            *best = Some((m, err));
        }
    };

    let (mut lo, mut hi) = (0.0, max_magnitude);
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        match alpha_at(mask, noise_type, mid, smoothness, seed)? {
            Some(a) => {
                consider(mid, a, &mut best);
                if (a - target_alpha).abs() <= 0.2 * ALPHA_TOLERANCE {
                    break;
                }
                if a < target_alpha {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            None => hi = mid,
        }
        if hi - lo < 1e-6 {
            break;
        }
    }
    if best.is_some_and(|(_, e)| e <= ALPHA_TOLERANCE) {
        return Ok(best.expect("checked").0);
    }
    for k in 1..=96 {
        let m = max_magnitude * k as f64 / 96.0;
        if let Some(a) = alpha_at(mask, noise_type, m, smoothness, seed)? {
            consider(m, a, &mut best);
        }
    }
    match best {
        Some((m, e)) if e <= ALPHA_TOLERANCE => Ok(m),
        _ => Err(Error::Calibration {
            target: target_alpha,
            min_alpha: if seen_min.is_finite() { seen_min } else { 0.0 },
            max_alpha: seen_max,
        }),
    }
}

/// α as a function of magnitude over an evenly spaced sweep.
pub fn alpha_curve(
    mask: &LabelMask,
    noise_type: NoiseType,
    max_magnitude: f64,
    steps: usize,
    smoothness: f64,
    seed: u64,
) -> Result<Vec<(f64, Option<f64>)>> {
    (0..=steps)
        .map(|k| {
            let m = max_magnitude * k as f64 / steps.max(1) as f64;
            Ok((m, alpha_at(mask, noise_type, m, smoothness, seed)?))
        })
        .collect()
}

/// Replaces the masks of exactly `round(β N)` randomly chosen samples with
/// corrupted variants whose α falls in the requested band.
pub fn corrupt_corpus(corpus: &Corpus, spec: &NoiseSpec) -> Result<CorruptedCorpus> {
    spec.validate()?;
    let n = corpus.len();
    let count = (spec.ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(spec.seed, "corrupt-selection"));
    let mut chosen = vec![false; n];
    for &i in &order[..count] {
        chosen[i] = true;
    }

    let mut samples = Vec::with_capacity(n);
    for (i, sample) in corpus.samples().iter().enumerate() {
        let mask = sample.mask.as_ref().ok_or_else(|| Error::Corruption(format!(
            "sample '{}' has no mask to corrupt",
            sample.id
        )))?;
        if !chosen[i] {
            samples.push(Sample {
                noise_meta: Some(NoiseMeta::CLEAN),
                ..sample.clone()
            });
            continue;
        }
        let mut rng = rng::stream(spec.seed, &sample.id);
        let noise_type = spec.noise_types[rng.random_range(0..spec.noise_types.len())];
        let (lo, hi) = spec.level.target_range();
        let target = rng.random_range(lo..=hi);
        let field_seed: u64 = rng.random();
        let magnitude = calibrate_magnitude(
            mask,
            noise_type,
            target,
            spec.max_magnitude(noise_type),
            spec.elastic_smoothness,
            field_seed,
        )?;
        let corrupted = corrupt_mask(mask, noise_type, magnitude, spec.elastic_smoothness, field_seed)?;
        let alpha = noise_level(mask, &corrupted.mask)?;
        samples.push(Sample {
            mask: Some(corrupted.mask),
            noise_meta: Some(NoiseMeta {
                corrupted: true,
                noise_type,
                magnitude: corrupted.magnitude,
                alpha,
            }),
            ..sample.clone()
        });
    }
    Ok(CorruptedCorpus {
        corpus: Corpus::new(samples, corpus.domain(), corpus.num_classes())?,
    })
}
