//! Synthetic two-domain disc-and-cup data, plus reading and writing corpora
//! in the on-disk directory layout:
//!
//! ```text
//! <dir>/manifest.json      {"ids": [...], "domain": "source", "num_classes": 3}
//! <dir>/images/<id>.png    8-bit RGB
//! <dir>/masks/<id>.png     8-bit gray, pixel value = class index
//! ```

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Corpus, Domain, Image, LabelMask, Sample};
use crate::error::{Error, Result};
use crate::rng;

/// Which part of the synthetic benchmark to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Labeled source-domain training data.
    Source,
    /// Unlabeled target-domain data used for adaptation.
    TargetTrain,
    /// Labeled target-domain data held out for evaluation.
    TargetTest,
}

impl Split {
    pub fn domain(self) -> Domain {
        match self {
            Split::Source => Domain::Source,
            Split::TargetTrain | Split::TargetTest => Domain::Target,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Split::Source => "src",
            Split::TargetTrain => "tgt_train",
            Split::TargetTest => "tgt_test",
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::TargetTrain => "target_train",
            Split::TargetTest => "target_test",
        }
    }
}

/// Shape and appearance of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_source: usize,
    pub num_target_train: usize,
    pub num_target_test: usize,
    /// Disc semi-axis range as a fraction of the shorter image side.
    pub disc_radius: (f64, f64),
    /// Cup semi-axis range as a fraction of the disc semi-axis.
    pub cup_ratio: (f64, f64),
    /// Target-domain brightness shift added after the other transforms.
    pub target_intensity_offset: f64,
    /// Target-domain contrast scale around the image mean.
    pub target_contrast: f64,
    /// Target-domain hue rotation in degrees (about the gray axis).
    pub target_hue_rotation: f64,
    /// Background texture cycles across the image, per domain.
    pub source_texture_frequency: f64,
    pub target_texture_frequency: f64,
    pub texture_amplitude: f64,
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 96,
            num_source: 40,
            num_target_train: 20,
            num_target_test: 20,
            disc_radius: (0.18, 0.28),
            cup_ratio: (0.4, 0.6),
            target_intensity_offset: 0.1,
            target_contrast: 0.8,
            target_hue_rotation: 40.0,
            source_texture_frequency: 3.0,
            target_texture_frequency: 7.0,
            texture_amplitude: 0.08,
            pixel_noise: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < crate::datamodel::MIN_SIDE || self.width < crate::datamodel::MIN_SIDE {
            return Err(Error::Config(format!(
                "image size {}x{} below the minimum of 8",
                self.height, self.width
            )));
        }
        if self.num_source == 0 || self.num_target_train == 0 || self.num_target_test == 0 {
            return Err(Error::Config("sample counts must be >= 1".into()));
        }
        let (dlo, dhi) = self.disc_radius;
        if !(dlo > 0.0 && dlo <= dhi && dhi <= 0.35) {
            return Err(Error::Config(format!(
                "disc_radius range ({dlo}, {dhi}) must satisfy 0 < lo <= hi <= 0.35"
            )));
        }
        let (clo, chi) = self.cup_ratio;
        if !(clo > 0.0 && clo <= chi && chi <= 0.6) {
            return Err(Error::Config(format!(
                "cup_ratio range ({clo}, {chi}) must satisfy 0 < lo <= hi <= 0.6"
            )));
        }
        if !(self.target_contrast > 0.0) || self.texture_amplitude < 0.0 || self.pixel_noise < 0.0 {
            return Err(Error::Config("contrast must be > 0, amplitudes >= 0".into()));
        }
        Ok(())
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Source => self.num_source,
            Split::TargetTrain => self.num_target_train,
            Split::TargetTest => self.num_target_test,
        }
    }
}

const BACKGROUND: [f64; 3] = [0.42, 0.20, 0.12];
const DISC: [f64; 3] = [0.78, 0.52, 0.30];
const CUP: [f64; 3] = [0.92, 0.78, 0.52];

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radial coordinate: `<= 1` inside.
    fn level(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    /// Soft coverage in `[0, 1]` with an edge about `px` pixels wide.
    fn coverage(&self, y: f64, x: f64, px: f64) -> f64 {
        let r = self.rx.min(self.ry);
        let signed = (1.0 - self.level(y, x)) * r / px;
        (signed + 0.5).clamp(0.0, 1.0)
    }
}

fn hue_rotation(degrees: f64) -> [[f64; 3]; 3] {
    // Rodrigues rotation about the unit gray axis.
    let t = degrees.to_radians();
    let (c, s) = (t.cos(), t.sin());
    let k = 1.0 / 3f64.sqrt();
    let oc = 1.0 - c;
    let a = c + oc / 3.0;
    let b = oc / 3.0 - s * k;
    let d = oc / 3.0 + s * k;
    [[a, b, d], [d, a, b], [b, d, a]]
}

fn render(cfg: &SynthConfig, split: Split, index: usize) -> Result<Sample> {
    let id = format!("{}_{index:04}", split.prefix());
    let mut rng = rng::stream(cfg.seed, &id);
    let (h, w) = (cfg.height, cfg.width);
    let side = h.min(w) as f64;

    let disc_r = rng.random_range(cfg.disc_radius.0..=cfg.disc_radius.1) * side;
    let aspect = rng.random_range(0.85..=1.15);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let jitter = 0.12 * side;
    let disc = Ellipse {
        cy: h as f64 / 2.0 + rng.random_range(-jitter..=jitter),
        cx: w as f64 / 2.0 + rng.random_range(-jitter..=jitter),
        ry: disc_r * aspect,
        rx: disc_r,
        cos: angle.cos(),
        sin: angle.sin(),
    };
    let ratio = rng.random_range(cfg.cup_ratio.0..=cfg.cup_ratio.1);
    let slack = (1.0 - ratio) * disc_r * 0.3;
    let cup_aspect = rng.random_range(0.9..=1.1);
    let cup = Ellipse {
        cy: disc.cy + rng.random_range(-slack..=slack),
        cx: disc.cx + rng.random_range(-slack..=slack),
        ry: disc.ry * ratio * cup_aspect,
        rx: disc.rx * ratio,
        cos: disc.cos,
        sin: disc.sin,
    };

    let target = split.domain() == Domain::Target;
    let freq = if target {
        cfg.target_texture_frequency
    } else {
        cfg.source_texture_frequency
    };
    let tex_angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let phase2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, cfg.pixel_noise.max(1e-12)).expect("valid std");

    let plane = h * w;
    let mut px = vec![0.0; 3 * plane];
    let mut labels = vec![0u8; plane];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let along = (fx * tex_angle.cos() + fy * tex_angle.sin()) / side;
            let across = (-fx * tex_angle.sin() + fy * tex_angle.cos()) / side;
            let tex = 0.6 * (std::f64::consts::TAU * freq * along + phase).sin()
                + 0.4 * (std::f64::consts::TAU * freq * 1.7 * across + phase2).sin();
            let in_disc = disc.level(fy, fx) <= 1.0;
            let in_cup = in_disc && cup.level(fy, fx) <= 1.0;
            labels[y * w + x] = if in_cup {
                2
            } else if in_disc {
                1
            } else {
                0
            };
            let a_disc = disc.coverage(fy, fx, 1.5);
            let a_cup = cup.coverage(fy, fx, 2.5).min(a_disc);
            for ch in 0..3 {
                let bg = BACKGROUND[ch] + cfg.texture_amplitude * tex;
                let mut v = bg * (1.0 - a_disc) + DISC[ch] * a_disc;
                v = v * (1.0 - a_cup) + CUP[ch] * a_cup;
                if cfg.pixel_noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                px[ch * plane + y * w + x] = v;
            }
        }
    }

    if target {
        let rot = hue_rotation(cfg.target_hue_rotation);
        for i in 0..plane {
            let v = [px[i], px[plane + i], px[2 * plane + i]];
            for (ch, row) in rot.iter().enumerate() {
                px[ch * plane + i] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
            }
        }
        let mean = px.iter().sum::<f64>() / px.len() as f64;
        for v in px.iter_mut() {
            *v = (*v - mean) * cfg.target_contrast + mean + cfg.target_intensity_offset;
        }
    }
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let image = Image::new(h, w, 3, px, split.domain())?;
    let mask = LabelMask::new(h, w, 3, labels)?;
    Ok(Sample {
        id,
        image,
        mask: (split != Split::TargetTrain).then_some(mask),
        noise_meta: None,
    })
}

/// Generates one split of the synthetic benchmark. Each sample draws from its
/// own sub-seed, so output depends only on `(cfg, split, index)`.
pub fn generate_corpus(cfg: &SynthConfig, split: Split) -> Result<Corpus> {
    cfg.validate()?;
    let samples = (0..cfg.count(split))
        .map(|i| render(cfg, split, i))
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(samples, split.domain(), 3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub ids: Vec<String>,
    pub domain: Domain,
    pub num_classes: usize,
}

fn read_png(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a corpus from the directory layout. Every listed source sample
/// must have a mask; target masks are loaded when present.
pub fn ingest_corpus(dir: &Path, domain: Domain) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CorpusManifest = serde_json::from_str(&text)?;
    if manifest.domain != domain {
        return Err(Error::Config(format!(
            "{} holds a {} corpus, expected {domain}",
            dir.display(),
            manifest.domain
        )));
    }
    let mut samples = Vec::with_capacity(manifest.ids.len());
    for id in &manifest.ids {
        let img_path = dir.join("images").join(format!("{id}.png"));
        if !img_path.exists() {
            return Err(Error::Ingestion {
                id: id.clone(),
                reason: format!("missing image {}", img_path.display()),
            });
        }
        let rgb = read_png(&img_path)?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let plane = h * w;
        let mut px = vec![0.0; 3 * plane];
        for (i, p) in rgb.pixels().enumerate() {
            for ch in 0..3 {
                px[ch * plane + i] = p.0[ch] as f64 / 255.0;
            }
        }
        let image = Image::new(h, w, 3, px, domain).map_err(|e| Error::Ingestion {
            id: id.clone(),
            reason: e.to_string(),
        })?;

        let mask_path = dir.join("masks").join(format!("{id}.png"));
        let mask = if mask_path.exists() {
            let gray = read_png(&mask_path)?.to_luma8();
            if gray.width() as usize != w || gray.height() as usize != h {
                return Err(Error::Ingestion {
                    id: id.clone(),
                    reason: "mask size differs from image size".into(),
                });
            }
            Some(LabelMask::new(h, w, manifest.num_classes, gray.into_raw())?)
        } else if domain == Domain::Source {
            return Err(Error::Ingestion {
                id: id.clone(),
                reason: format!("missing mask {}", mask_path.display()),
            });
        } else {
            None
        };
        samples.push(Sample {
            id: id.clone(),
            image,
            mask,
            noise_meta: None,
        });
    }
    Corpus::new(samples, domain, manifest.num_classes)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a mask as an 8-bit gray PNG of class indices.
pub fn write_mask_png(mask: &LabelMask, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.classes().to_vec(),
    )
    .expect("buffer matches dimensions");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a corpus in the directory layout (images quantized to 8 bits).
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks"))?;
    for s in corpus.samples() {
        let (h, w) = (s.image.height(), s.image.width());
        let plane = h * w;
        let mut buf = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for ch in 0..3.min(s.image.channels()) {
                buf.push((s.image.pixels()[ch * plane + i] * 255.0).round() as u8);
            }
            for _ in s.image.channels()..3 {
                buf.push(buf[buf.len() - 1]);
            }
        }
        let path = dir.join("images").join(format!("{}.png", s.id));
        image::RgbImage::from_raw(w as u32, h as u32, buf)
            .expect("buffer matches dimensions")
            .save(&path)
            .map_err(|source| Error::Image { path, source })?;
        if let Some(mask) = &s.mask {
            write_mask_png(mask, &dir.join("masks").join(format!("{}.png", s.id)))?;
        }
    }
    let manifest = CorpusManifest {
        ids: corpus.samples().iter().map(|s| s.id.clone()).collect(),
        domain: corpus.domain(),
        num_classes: corpus.num_classes(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}
