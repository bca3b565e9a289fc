//! Stain unmixing into hematoxylin, eosin and a residual direction, and
//! screening of unlabeled images for windows dense in the residual.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PatchLabel, PatchRef, RgbImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StainConfig {
    pub i0: f64,
    /// Pixels with OD norm at or below this are background.
    pub beta: f64,
    /// Angle percentile picking the extreme stain directions.
    pub alpha_pct: f64,
    pub density_threshold: f64,
    pub window: usize,
    pub max_per_image: usize,
    pub min_separation: f64,
}

impl Default for StainConfig {
    fn default() -> Self {
        Self {
            i0: 255.0,
            beta: 0.15,
            alpha_pct: 1.0,
            density_threshold: 0.25,
            window: 78,
            max_per_image: 5,
            min_separation: 78.0,
        }
    }
}

/// Per-pixel optical densities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl OdImage {
    pub fn at(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }
}

pub fn to_optical_density(img: &RgbImage, i0: f64) -> OdImage {
    let lut: Vec<f32> = (0..256)
        .map(|v| (-((v as f64 + 1.0) / (i0 + 1.0)).log10()).max(0.0) as f32)
        .collect();
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| [lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize]])
        .collect();
    OdImage {
        width: img.width,
        height: img.height,
        data,
    }
}

pub fn from_optical_density(od: &OdImage, i0: f64) -> RgbImage {
    let mut img = RgbImage::new(od.width, od.height);
    for (dst, v) in img.data.chunks_exact_mut(3).zip(&od.data) {
        for c in 0..3 {
            let i = (i0 + 1.0) * 10f64.powf(-(v[c] as f64)) - 1.0;
            dst[c] = i.round().clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// Unit OD directions: columns hematoxylin, eosin, residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainBasis {
    pub hematoxylin: [f64; 3],
    pub eosin: [f64; 3],
    pub residual: [f64; 3],
}

impl StainBasis {
    /// Builds a basis from two stain directions; ordering and residual
    /// follow the same conventions as [`estimate_basis`].
    pub fn from_stains(a: [f64; 3], b: [f64; 3]) -> Self {
        let (a, b) = (Vector3::from(a).normalize(), Vector3::from(b).normalize());
        let (h, e) = if a[2] >= b[2] { (a, b) } else { (b, a) };
        let r = sign_fix(h.cross(&e).normalize());
        Self {
            hematoxylin: h.into(),
            eosin: e.into(),
            residual: r.into(),
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[
            Vector3::from(self.hematoxylin),
            Vector3::from(self.eosin),
            Vector3::from(self.residual),
        ])
    }

    pub fn residual_of(&self, od: [f32; 3]) -> f64 {
        let r = self.residual;
        (r[0] * od[0] as f64 + r[1] * od[1] as f64 + r[2] * od[2] as f64).abs()
    }
}

/// Flips `v` so its largest-magnitude entry is positive.
fn sign_fix(v: Vector3<f64>) -> Vector3<f64> {
    let imax = v.iamax();
    if v[imax] < 0.0 {
        -v
    } else {
        v
    }
}

fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let idx = ((pct / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Smallest number of foreground pixels for a basis estimate.
pub const MIN_TISSUE_PIXELS: usize = 100;

/// Estimates H and E as the extreme angle percentiles of the foreground OD
/// cloud inside its principal plane; the residual is the plane normal.
pub fn estimate_basis(od: &OdImage, beta: f64, alpha_pct: f64) -> Result<StainBasis> {
    let fg: Vec<Vector3<f64>> = od
        .data
        .iter()
        .map(|v| Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64))
        .filter(|v| v.norm() > beta)
        .collect();
    if fg.len() < MIN_TISSUE_PIXELS {
        return Err(Error::InsufficientTissue {
            found: fg.len(),
            required: MIN_TISSUE_PIXELS,
        });
    }
    let mut moment = Matrix3::<f64>::zeros();
    for v in &fg {
        moment += v * v.transpose();
    }
    moment /= fg.len() as f64;
    let eig = SymmetricEigen::new(moment);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let v1 = sign_fix(eig.eigenvectors.column(order[0]).into_owned());
    let v2 = sign_fix(eig.eigenvectors.column(order[1]).into_owned());
    let mut angles: Vec<f64> = fg.iter().map(|v| v.dot(&v2).atan2(v.dot(&v1))).collect();
    angles.sort_by(f64::total_cmp);
    let lo = percentile(&angles, alpha_pct);
    let hi = percentile(&angles, 100.0 - alpha_pct);
    let dir = |t: f64| (v1 * t.cos() + v2 * t.sin()).normalize();
    let (a, b) = (dir(lo), dir(hi));
    Ok(StainBasis::from_stains(a.into(), b.into()))
}

/// Window-averaged residual magnitude. Entry `(mx, my)` averages the
/// `window x window` block whose top-left pixel is `(mx, my)`; its center is
/// `(mx + window/2 - 1, my + window/2 - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    pub window: usize,
    pub data: Vec<f32>,
}

impl DensityMap {
    pub fn at(&self, mx: usize, my: usize) -> f32 {
        self.data[my * self.width + mx]
    }

    pub fn center_offset(&self) -> usize {
        (self.window / 2).saturating_sub(1)
    }
}

pub fn residual_magnitude(od: &OdImage, basis: &StainBasis) -> Vec<f64> {
    od.data.iter().map(|&v| basis.residual_of(v)).collect()
}

pub fn residual_density_map(od: &OdImage, basis: &StainBasis, window: usize) -> DensityMap {
    let res = residual_magnitude(od, basis);
    box_average(&res, od.width, od.height, window)
}

fn box_average(values: &[f64], width: usize, height: usize, window: usize) -> DensityMap {
    if window == 0 || width < window || height < window {
        return DensityMap {
            width: 0,
            height: 0,
            window,
            data: Vec::new(),
        };
    }
    let iw = width + 1;
    let mut integral = vec![0.0f64; iw * (height + 1)];
    for y in 0..height {
        let mut row = 0.0;
        for x in 0..width {
            row += values[y * width + x];
            integral[(y + 1) * iw + x + 1] = integral[y * iw + x + 1] + row;
        }
    }
    let (mw, mh) = (width - window + 1, height - window + 1);
    let area = (window * window) as f64;
    let mut data = Vec::with_capacity(mw * mh);
    for my in 0..mh {
        for mx in 0..mw {
            let s = integral[(my + window) * iw + mx + window] - integral[my * iw + mx + window]
                - integral[(my + window) * iw + mx]
                + integral[my * iw + mx];
            data.push((s / area).max(0.0) as f32);
        }
    }
    DensityMap {
        width: mw,
        height: mh,
        window,
        data,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenedCandidate {
    pub patch: PatchRef,
    pub density: f64,
}

/// Moves a window center to the residual-weighted centroid of the pixels
/// above `floor` inside it. Box averages are flat while a small blob stays
/// inside the window, so the raw argmax can sit anywhere on that plateau.
fn refine_center(res: &[f64], width: usize, height: usize, window: usize, start: (usize, usize), floor: f64) -> (usize, usize) {
    let half = (window / 2).saturating_sub(1);
    let (mut cx, mut cy) = start;
    for _ in 0..8 {
        let x0 = cx.saturating_sub(half);
        let y0 = cy.saturating_sub(half);
        let x1 = (x0 + window).min(width);
        let y1 = (y0 + window).min(height);
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in y0..y1 {
            for x in x0..x1 {
                let w = res[y * width + x] - floor;
                if w > 0.0 {
                    sw += w;
                    sx += w * x as f64;
                    sy += w * y as f64;
                }
            }
        }
        if sw == 0.0 {
            break;
        }
        let next = ((sx / sw).round() as usize, (sy / sw).round() as usize);
        if next == (cx, cy) {
            break;
        }
        (cx, cy) = next;
    }
    (cx, cy)
}

/// Candidate window centers of one image, sorted by descending density.
pub fn screen_image(image_id: &str, od: &OdImage, basis: &StainBasis, config: &StainConfig) -> Vec<ScreenedCandidate> {
    let res = residual_magnitude(od, basis);
    let map = box_average(&res, od.width, od.height, config.window);
    if map.data.is_empty() || !config.density_threshold.is_finite() {
        return Vec::new();
    }
    let off = map.center_offset();
    let mut order: Vec<usize> = (0..map.data.len())
        .filter(|&i| map.data[i] as f64 >= config.density_threshold)
        .collect();
    order.sort_by(|&a, &b| map.data[b].total_cmp(&map.data[a]).then(a.cmp(&b)));
    let min_sq = config.min_separation * config.min_separation;
    let far = |kept: &[(usize, usize, f64)], x: usize, y: usize| {
        kept.iter().all(|&(kx, ky, _)| {
            let (dx, dy) = (kx as f64 - x as f64, ky as f64 - y as f64);
            dx * dx + dy * dy >= min_sq
        })
    };
    let mut seeds: Vec<(usize, usize, f64)> = Vec::new();
    for i in order {
        let (x, y) = (i % map.width + off, i / map.width + off);
        if far(&seeds, x, y) {
            seeds.push((x, y, map.data[i] as f64));
        }
    }
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for (x, y, _) in seeds {
        let (rx, ry) = refine_center(&res, od.width, od.height, config.window, (x, y), config.density_threshold);
        let mx = rx.saturating_sub(off).min(map.width - 1);
        let my = ry.saturating_sub(off).min(map.height - 1);
        let density = map.at(mx, my) as f64;
        if density >= config.density_threshold && far(&kept, rx, ry) {
            kept.push((rx, ry, density));
        }
    }
    kept.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));
    kept.truncate(config.max_per_image);
    kept.into_iter()
        .map(|(x, y, density)| ScreenedCandidate {
            patch: PatchRef::new(image_id, x as i64, y as i64, PatchLabel::Negative),
            density,
        })
        .collect()
}

/// Screens every image of `data` with its own basis estimate. Images
/// without enough tissue are skipped with a warning. The result is sorted
/// by descending density.
pub fn screen_candidates(data: &Dataset, config: &StainConfig) -> Result<Vec<ScreenedCandidate>> {
    if config.density_threshold.is_nan() || config.density_threshold <= 0.0 {
        return Err(Error::Config("density_threshold must be positive".into()));
    }
    let mut all = Vec::new();
    for r in &data.records {
        let img = data
            .image(&r.id)
            .ok_or_else(|| Error::Usage(format!("image `{}` not loaded", r.id)))?;
        let od = to_optical_density(img, config.i0);
        let basis = match estimate_basis(&od, config.beta, config.alpha_pct) {
            Ok(b) => b,
            Err(e @ Error::InsufficientTissue { .. }) => {
                log::warn!("skipping `{}`: {e}", r.id);
                continue;
            }
            Err(e) => return Err(e),
        };
        all.extend(screen_image(&r.id, &od, &basis, config));
    }
    all.sort_by(|a, b| {
        b.density.total_cmp(&a.density).then_with(|| {
            (&a.patch.image_id, a.patch.cy, a.patch.cx).cmp(&(&b.patch.image_id, b.patch.cy, b.patch.cx))
        })
    });
    Ok(all)
}
