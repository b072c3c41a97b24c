//! Distance transforms and the Gaussian boundary-distance weight map.
//!
//! Distances follow the interior-count convention: a pixel inside a class
//! region gets the Euclidean distance to the nearest pixel outside it, where
//! every position beyond the grid border counts as outside. Interior pixels
//! therefore have distance at least 1; outside pixels have distance 0.

use crate::datamodel::LabelMask;
use crate::error::{Error, Result};

/// Number of standard deviations spanned by the deepest point of a region.
pub const SIGMA_SPAN: f64 = 2.58;

/// Per-class Gaussian weights that peak at the deepest point of each region.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryWeightMap {
    height: usize,
    width: usize,
    num_classes: usize,
    weights: Vec<f64>,
    sigma: Vec<Option<f64>>,
    dmax: Vec<f64>,
}

impl BoundaryWeightMap {
    /// A map of all ones; reduces the noise-tolerant loss to the clean loss.
    pub fn ones(height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            height,
            width,
            num_classes,
            weights: vec![1.0; height * width * num_classes],
            sigma: vec![None; num_classes],
            dmax: vec![0.0; num_classes],
        }
    }

    /// Builds a map from raw planar weights (all must lie in `(0, 1]`).
    pub fn from_weights(
        height: usize,
        width: usize,
        num_classes: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != height * width * num_classes {
            return Err(Error::ShapeMismatch(format!(
                "weight map needs {} values, got {}",
                height * width * num_classes,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0 && *w <= 1.0)) {
            return Err(Error::Numerical("boundary weights must lie in (0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            weights,
            sigma: vec![None; num_classes],
            dmax: vec![0.0; num_classes],
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

    /// Planar weights, class-major.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn channel(&self, class: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.weights[class * plane..(class + 1) * plane]
    }

    /// Standard deviation used for `class`, absent for background and
    /// degenerate regions.
    pub fn sigma(&self, class: usize) -> Option<f64> {
        self.sigma[class]
    }

    pub fn dmax(&self, class: usize) -> f64 {
        self.dmax[class]
    }
}

/// Gaussian weight of a pixel at depth `d` in a region of maximal depth `dmax`.
///
/// Equals 1 at `d = dmax` and `exp(-SIGMA_SPAN² / 2)` at `d = 0`.
pub fn gaussian_weight(d: f64, dmax: f64) -> f64 {
    if dmax <= 0.0 {
        return 1.0;
    }
    let sigma = dmax / SIGMA_SPAN;
    let gap = dmax - d;
    (-(gap * gap) / (2.0 * sigma * sigma)).exp()
}

/// Euclidean distance from each pixel of `region` to the nearest pixel
/// outside it; the grid border counts as outside.
pub fn region_distance(height: usize, width: usize, region: &[bool]) -> Vec<f64> {
    assert_eq!(region.len(), height * width);
    let ph = height + 2;
    let pw = width + 2;
    let mut f = vec![0.0f64; ph * pw];
    for r in 0..height {
        for c in 0..width {
            if region[r * width + c] {
                f[(r + 1) * pw + c + 1] = f64::INFINITY;
            }
        }
    }
    // Columns, then rows, of the separable squared transform.
    let mut line = vec![0.0; ph.max(pw)];
    let mut out = vec![0.0; ph.max(pw)];
    for c in 0..pw {
        for r in 0..ph {
            line[r] = f[r * pw + c];
        }
        squared_distance_1d(&line[..ph], &mut out[..ph]);
        for r in 0..ph {
            f[r * pw + c] = out[r];
        }
    }
    for r in 0..ph {
        line[..pw].copy_from_slice(&f[r * pw..(r + 1) * pw]);
        squared_distance_1d(&line[..pw], &mut out[..pw]);
        f[r * pw..(r + 1) * pw].copy_from_slice(&out[..pw]);
    }
    let mut dist = vec![0.0; height * width];
    for r in 0..height {
        for c in 0..width {
            dist[r * width + c] = f[(r + 1) * pw + c + 1].sqrt();
        }
    }
    dist
}

/// Lower envelope of parabolas rooted at the finite entries of `f`.
fn squared_distance_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            d.iter_mut().for_each(|x| *x = f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                // The parabola at p is hidden; k > 0 here since z[0] = -inf.
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *out = diff * diff + f[p];
    }
}

/// Distance to the boundary of the region of `class`.
pub fn distance_to_boundary(mask: &LabelMask, class: usize) -> Result<Vec<f64>> {
    if class >= mask.num_classes() {
        return Err(Error::InvalidMask(format!(
            "class {class} out of range for {} classes",
            mask.num_classes()
        )));
    }
    let region = mask.region(class);
    if !region.iter().any(|&b| b) {
        return Err(Error::EmptyRegion(class));
    }
    Ok(region_distance(mask.height(), mask.width(), &region))
}

/// Boundary weight map: background and absent classes are all ones; every
/// foreground region gets `exp(-(dmax - D)² / (2σ²))` with `σ = dmax / 2.58`
/// on its pixels and 1 elsewhere.
pub fn boundary_weight_map(mask: &LabelMask) -> BoundaryWeightMap {
    let (h, w, c) = (mask.height(), mask.width(), mask.num_classes());
    let plane = h * w;
    let mut map = BoundaryWeightMap::ones(h, w, c);
    for class in 1..c {
        let region = mask.region(class);
        if !region.iter().any(|&b| b) {
            continue;
        }
        let dist = region_distance(h, w, &region);
        let dmax = dist.iter().cloned().fold(0.0, f64::max);
        map.dmax[class] = dmax;
        if dmax <= 0.0 {
            continue;
        }
        map.sigma[class] = Some(dmax / SIGMA_SPAN);
        let out = &mut map.weights[class * plane..(class + 1) * plane];
        for i in 0..plane {
            if region[i] {
                out[i] = gaussian_weight(dist[i], dmax);
            }
        }
    }
    map
}
