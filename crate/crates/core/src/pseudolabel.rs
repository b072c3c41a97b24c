//! Class-wise confident pseudo labels exchanged between the peers.

use std::fs;
use std::path::Path;

use crate::datamodel::{LabelMask, ProbMap};
use crate::error::{Error, Result};
use crate::models::ArchitectureId;
use crate::synthdata::write_mask_png;

const FLOOR_SLACK: f64 = 1e-9;

/// Index into a descending-sorted pool of `len` values for quantile `q`.
pub fn threshold_index(q: f64, len: usize) -> usize {
    ((q * len as f64 + FLOOR_SLACK).floor() as usize).min(len.saturating_sub(1))
}

/// Per-class confidence thresholds. Class `c` pools its probability plane
/// over the whole batch, sorts it descending and takes the value at
/// `floor(q[c] · len)`.
pub fn class_thresholds(batch: &[ProbMap], q: &[f64]) -> Result<Vec<f64>> {
    let Some(first) = batch.first() else {
        return Err(Error::Empty("no predictions to pool".into()));
    };
    let classes = first.num_classes();
    if q.len() != classes {
        return Err(Error::ShapeMismatch(format!(
            "{} quantiles for {classes} classes",
            q.len()
        )));
    }
    if batch.iter().any(|p| p.num_classes() != classes) {
        return Err(Error::ShapeMismatch("predictions disagree on class count".into()));
    }
    let mut out = Vec::with_capacity(classes);
    for (c, &qc) in q.iter().enumerate() {
        if !(qc > 0.0 && qc < 1.0) {
            return Err(Error::Config(format!("quantile {qc} for class {c} not in (0, 1)")));
        }
        let mut pool: Vec<f64> = batch.iter().flat_map(|p| p.channel(c).iter().copied()).collect();
        if pool.is_empty() {
            return Err(Error::Empty(format!("class {c} has an empty pool")));
        }
        let k = threshold_index(qc, pool.len());
        let (_, kth, _) = pool.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
        out.push(*kth);
    }
    Ok(out)
}

/// Pseudo labels for one target image.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub id: String,
    pub labels: LabelMask,
    /// Pixel passed its class threshold; invalid pixels are excluded from
    /// every loss.
    pub valid: Vec<bool>,
    pub thresholds: Vec<f64>,
    pub source_peer: ArchitectureId,
}

impl PseudoLabelSet {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Writes `<id>.png` (class indices) and `<id>_valid.png` (0 or 255).
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_mask_png(&self.labels, &dir.join(format!("{}.png", self.id)))?;
        let bitmap: Vec<u8> = self.valid.iter().map(|&v| if v { 255 } else { 0 }).collect();
        let path = dir.join(format!("{}_valid.png", self.id));
        image::GrayImage::from_raw(self.labels.width() as u32, self.labels.height() as u32, bitmap)
            .expect("buffer matches dimensions")
            .save(&path)
            .map_err(|source| Error::Image { path, source })
    }
}

/// Argmax labels, valid where the winning probability strictly exceeds its
/// class threshold.
pub fn extract_pseudo_labels(
    id: &str,
    p: &ProbMap,
    thresholds: &[f64],
    source_peer: ArchitectureId,
) -> Result<PseudoLabelSet> {
    if thresholds.len() != p.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "{} thresholds for {} classes",
            thresholds.len(),
            p.num_classes()
        )));
    }
    let labels = p.argmax();
    let plane = p.height() * p.width();
    let valid = (0..plane)
        .map(|i| {
            let c = labels.classes()[i] as usize;
            p.probs()[c * plane + i] > thresholds[c]
        })
        .collect();
    Ok(PseudoLabelSet {
        id: id.to_string(),
        labels,
        valid,
        thresholds: thresholds.to_vec(),
        source_peer,
    })
}

fn peer_labels(
    preds: &[(String, ProbMap)],
    q: &[f64],
    peer: ArchitectureId,
) -> Result<Vec<PseudoLabelSet>> {
    let probs: Vec<ProbMap> = preds.iter().map(|(_, p)| p.clone()).collect();
    let thresholds = class_thresholds(&probs, q)?;
    preds
        .iter()
        .map(|(id, p)| extract_pseudo_labels(id, p, &thresholds, peer))
        .collect()
}

/// One exchange: returns `(labels for peer B made by peer A, labels for
/// peer A made by peer B)`.
pub fn cicl_round(
    peer_a_preds: &[(String, ProbMap)],
    peer_b_preds: &[(String, ProbMap)],
    q: &[f64],
) -> Result<(Vec<PseudoLabelSet>, Vec<PseudoLabelSet>)> {
    let same = peer_a_preds.len() == peer_b_preds.len()
        && peer_a_preds.iter().zip(peer_b_preds).all(|(a, b)| a.0 == b.0);
    if !same {
        return Err(Error::ShapeMismatch(
            "peer predictions cover different target samples".into(),
        ));
    }
    let for_b = peer_labels(peer_a_preds, q, ArchitectureId::PeerA)?;
    let for_a = peer_labels(peer_b_preds, q, ArchitectureId::PeerB)?;
    Ok((for_b, for_a))
}
