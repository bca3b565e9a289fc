//! Synthetic H&E-like images with planted mitotic figures, look-alike
//! impostors, ordinary nuclei and off-plane ink smudges.
//!
//! Rendering happens in optical-density space, `OD = h*H + e*E + ink*INK`,
//! and is converted to 8-bit RGB with `I = 256 * 10^-OD - 1`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{save_manifest, Annotation, AnnotationLabel, ImageRecord, RgbImage};
use crate::error::{Error, Result};

/// Inclusive integer range `[lo, hi]`, written as a two-element JSON array.
pub type CountRange = [usize; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub domains: usize,
    pub positives: CountRange,
    pub impostors: CountRange,
    pub normals: CountRange,
    /// Ink smudges in labeled images.
    pub ink_per_image: usize,
    pub unlabeled_images: usize,
    pub unlabeled_width: u32,
    pub unlabeled_height: u32,
    pub unlabeled_ink_per_image: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            images: 30,
            width: 288,
            height: 288,
            domains: 3,
            positives: [2, 4],
            impostors: [2, 3],
            normals: [10, 16],
            ink_per_image: 0,
            unlabeled_images: 6,
            unlabeled_width: 1024,
            unlabeled_height: 1024,
            unlabeled_ink_per_image: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.images == 0 {
            return Err(Error::Config("synthetic spec asks for zero images".into()));
        }
        if self.domains == 0 {
            return Err(Error::Config("synthetic spec needs at least one domain".into()));
        }
        for (name, r) in [("positives", self.positives), ("impostors", self.impostors), ("normals", self.normals)] {
            if r[0] > r[1] {
                return Err(Error::Config(format!("{name} range [{}, {}] is reversed", r[0], r[1])));
            }
        }
        let min = super::MIN_IMAGE_SIDE.max(2 * BORDER as u32 + 1);
        if self.width < min || self.height < min {
            return Err(Error::Config(format!("images must be at least {min} px on each side")));
        }
        if self.unlabeled_images > 0 && (self.unlabeled_width < min || self.unlabeled_height < min) {
            return Err(Error::Config(format!("unlabeled images must be at least {min} px on each side")));
        }
        Ok(())
    }
}

/// Minimum distance of every planted object center from the image border.
pub const BORDER: f64 = 40.0;
const MIN_OBJECT_SEPARATION: f64 = 28.0;
const MIN_INK_SEPARATION: f64 = 96.0;

/// Stain vectors and background of one domain, as unit OD directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStain {
    pub name: String,
    pub hematoxylin: [f64; 3],
    pub eosin: [f64; 3],
    pub ink: [f64; 3],
    /// Stroma concentrations.
    pub background_h: f64,
    pub background_e: f64,
    /// Concentrations in cell-dense regions.
    pub cellular_h: f64,
    pub cellular_e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthImageSummary {
    pub id: String,
    pub domain: String,
    pub positives: usize,
    pub impostors: usize,
    pub normals: usize,
    /// Ink smudge centers `[x, y]`.
    pub ink: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub seed: u64,
    pub spec: SynthSpec,
    pub domains: Vec<DomainStain>,
    pub images: Vec<SynthImageSummary>,
    pub unlabeled: Vec<SynthImageSummary>,
    pub total_positives: usize,
    pub total_impostors: usize,
    pub total_ink: usize,
}

/// In-memory generator output. Record `file` fields are relative paths
/// under `images/`.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub labeled: Vec<(ImageRecord, RgbImage)>,
    pub unlabeled: Vec<(ImageRecord, RgbImage)>,
    pub summary: SynthSummary,
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn domain_stain(index: usize, seed: u64) -> DomainStain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d0);
    rng.set_stream(1000 + index as u64);
    let mut jitter = |v: [f64; 3], amount: f64| {
        normalize([
            (v[0] + rng.gen_range(-amount..amount)).max(0.02),
            (v[1] + rng.gen_range(-amount..amount)).max(0.02),
            (v[2] + rng.gen_range(-amount..amount)).max(0.02),
        ])
    };
    let hematoxylin = jitter([0.65, 0.70, 0.29], 0.07);
    let eosin = jitter([0.07, 0.99, 0.11], 0.07);
    let ink = jitter([0.03, 0.06, 1.0], 0.02);
    DomainStain {
        name: format!("d{index}"),
        hematoxylin,
        eosin,
        ink,
        background_h: rng.gen_range(0.06..0.12),
        background_e: rng.gen_range(0.45..0.6),
        cellular_h: rng.gen_range(0.45..0.6),
        cellular_e: rng.gen_range(0.15..0.25),
    }
}

/// Bilinearly interpolated lattice of uniform values; a cheap smooth field.
struct ValueNoise {
    cell: f64,
    cols: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, width: usize, height: usize, cell: f64) -> Self {
        let cols = (width as f64 / cell).ceil() as usize + 2;
        let rows = (height as f64 / cell).ceil() as usize + 2;
        let values = (0..cols * rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self { cell, cols, values }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (gx - ix as f64, gy - iy as f64);
        let v = |c: usize, r: usize| self.values[r * self.cols + c];
        let top = v(ix, iy) * (1.0 - fx) + v(ix + 1, iy) * fx;
        let bottom = v(ix, iy + 1) * (1.0 - fx) + v(ix + 1, iy + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Soft inside-ness for a normalized radial distance `q` (1 at the outline).
fn soft_mask(q: f64) -> f64 {
    let t = ((1.15 - q) / 0.3).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Canvas {
    width: usize,
    height: usize,
    h: Vec<f64>,
    e: Vec<f64>,
    ink: Vec<f64>,
}

impl Canvas {
    /// Adds `amount(x, y)` to `plane` over a square of half-size `reach`.
    fn paint(&mut self, cx: f64, cy: f64, reach: f64, plane: Plane, amount: impl Fn(f64, f64) -> f64) {
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(self.width - 1);
        let y1 = ((cy + reach).ceil() as usize).min(self.height - 1);
        let buf = match plane {
            Plane::H => &mut self.h,
            Plane::Ink => &mut self.ink,
        };
        for y in y0..=y1 {
            for x in x0..=x1 {
                let v = amount(x as f64 - cx, y as f64 - cy);
                if v != 0.0 {
                    buf[y * self.width + x] += v;
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Plane {
    H,
    Ink,
}

fn place(rng: &mut ChaCha8Rng, w: usize, h: usize, taken: &[(f64, f64)], sep: f64, border: f64) -> Option<(f64, f64)> {
    for _ in 0..2000 {
        let x = rng.gen_range(border..(w as f64 - border));
        let y = rng.gen_range(border..(h as f64 - border));
        if taken.iter().all(|&(tx, ty)| (tx - x).hypot(ty - y) >= sep) {
            return Some((x, y));
        }
    }
    None
}

fn draw_count(rng: &mut ChaCha8Rng, r: CountRange) -> usize {
    rng.gen_range(r[0]..=r[1])
}

fn normal_nucleus(canvas: &mut Canvas, rng: &mut ChaCha8Rng, cx: f64, cy: f64) {
    let a = rng.gen_range(5.0..7.0);
    let b = rng.gen_range(3.8..5.5);
    let theta: f64 = rng.gen_range(0.0..PI);
    let depth = rng.gen_range(0.45..0.65);
    let (c, s) = (theta.cos(), theta.sin());
    canvas.paint(cx, cy, a * 1.3, Plane::H, |dx, dy| {
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        depth * soft_mask(((u / a).powi(2) + (v / b).powi(2)).sqrt())
    });
}

/// Elliptical figure with clumped chromatin: a moderate base plus dark
/// granules scattered inside the outline.
fn mitotic_figure(canvas: &mut Canvas, rng: &mut ChaCha8Rng, cx: f64, cy: f64) {
    let a = rng.gen_range(8.5..11.0);
    let b = rng.gen_range(5.0..7.0);
    let theta: f64 = rng.gen_range(0.0..PI);
    let (c, s) = (theta.cos(), theta.sin());
    canvas.paint(cx, cy, a * 1.3, Plane::H, |dx, dy| {
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        0.95 * soft_mask(((u / a).powi(2) + (v / b).powi(2)).sqrt())
    });
    let granules = rng.gen_range(12..18);
    for _ in 0..granules {
        let r = rng.gen::<f64>().sqrt() * 0.85;
        let phi = rng.gen_range(0.0..2.0 * PI);
        let (u, v) = (r * a * phi.cos(), r * b * phi.sin());
        let (gx, gy) = (cx + c * u - s * v, cy + s * u + c * v);
        let gr = rng.gen_range(1.2..2.1);
        let depth = rng.gen_range(0.7..1.0);
        canvas.paint(gx, gy, gr * 1.5, Plane::H, |dx, dy| depth * soft_mask(dx.hypot(dy) / gr));
    }
}

/// Dark, smooth, lobulated blob: same optical density as a mitotic figure
/// but without texture and with an irregular outline.
fn impostor(canvas: &mut Canvas, rng: &mut ChaCha8Rng, cx: f64, cy: f64) {
    let r0 = rng.gen_range(8.0..10.0);
    let (p1, p2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let (k1, k2) = (rng.gen_range(0.18..0.3), rng.gen_range(0.08..0.16));
    let depth = rng.gen_range(1.3..1.5);
    canvas.paint(cx, cy, r0 * 1.7, Plane::H, |dx, dy| {
        let t = dy.atan2(dx);
        let r = r0 * (1.0 + k1 * (3.0 * t + p1).sin() + k2 * (5.0 * t + p2).sin());
        depth * soft_mask(dx.hypot(dy) / r)
    });
}

fn ink_smudge(canvas: &mut Canvas, rng: &mut ChaCha8Rng, cx: f64, cy: f64) {
    let radius = rng.gen_range(32.0..35.0);
    let strength = rng.gen_range(0.8..0.95);
    let wobble = ValueNoise::new(rng, 80, 80, 10.0);
    canvas.paint(cx, cy, radius * 1.2, Plane::Ink, |dx, dy| {
        let m = soft_mask(dx.hypot(dy) / radius);
        if m == 0.0 {
            0.0
        } else {
            strength * m * (1.0 + 0.12 * wobble.at(dx + 40.0, dy + 40.0))
        }
    });
}

struct Rendered {
    image: RgbImage,
    annotations: Vec<Annotation>,
    summary: SynthImageSummary,
}

#[allow(clippy::too_many_arguments)]
fn render(
    rng: &mut ChaCha8Rng,
    id: String,
    stain: &DomainStain,
    width: usize,
    height: usize,
    counts: [usize; 3],
    inks: usize,
) -> Rendered {
    let n = width * height;
    let mut canvas = Canvas {
        width,
        height,
        h: vec![0.0; n],
        e: vec![0.0; n],
        ink: vec![0.0; n],
    };
    let coarse = ValueNoise::new(rng, width, height, 48.0);
    let fine = ValueNoise::new(rng, width, height, 12.0);
    let noise = Normal::new(0.0, 0.02).unwrap();
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64, y as f64);
            let i = y * width + x;
            let c = coarse.at(fx, fy);
            let f = fine.at(fx, fy);
            let t = ((c + 0.25) / 0.5).clamp(0.0, 1.0);
            let t = t * t * (3.0 - 2.0 * t);
            let h = stain.background_h + t * (stain.cellular_h - stain.background_h);
            let e = stain.background_e + t * (stain.cellular_e - stain.background_e);
            canvas.h[i] = h * (1.0 + 0.2 * f);
            canvas.e[i] = e * (1.0 + 0.1 * f);
        }
    }

    let [n_pos, n_imp, n_norm] = counts;
    let mut taken: Vec<(f64, f64)> = Vec::new();
    let mut annotations = Vec::new();
    let mut planted = [0usize; 3];
    for (kind, count) in [(0, n_pos), (1, n_imp), (2, n_norm)] {
        for _ in 0..count {
            let Some((x, y)) = place(rng, width, height, &taken, MIN_OBJECT_SEPARATION, BORDER) else {
                break;
            };
            taken.push((x, y));
            planted[kind] += 1;
            match kind {
                0 => {
                    mitotic_figure(&mut canvas, rng, x, y);
                    annotations.push(Annotation {
                        x,
                        y,
                        label: AnnotationLabel::MitoticFigure,
                    });
                }
                1 => {
                    impostor(&mut canvas, rng, x, y);
                    annotations.push(Annotation {
                        x,
                        y,
                        label: AnnotationLabel::NonMitoticFigure,
                    });
                }
                _ => normal_nucleus(&mut canvas, rng, x, y),
            }
        }
    }

    let mut ink_centers: Vec<(f64, f64)> = Vec::new();
    for _ in 0..inks {
        let Some((x, y)) = place(rng, width, height, &ink_centers, MIN_INK_SEPARATION, BORDER + 8.0) else {
            break;
        };
        ink_centers.push((x, y));
        ink_smudge(&mut canvas, rng, x, y);
    }

    let mut image = RgbImage::new(width, height);
    for i in 0..n {
        let h = (canvas.h[i] + noise.sample(rng)).max(0.0);
        let e = (canvas.e[i] + noise.sample(rng)).max(0.0);
        let k = canvas.ink[i];
        for c in 0..3 {
            let od = h * stain.hematoxylin[c] + e * stain.eosin[c] + k * stain.ink[c];
            let v = 256.0 * 10f64.powf(-od) - 1.0;
            image.data[i * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }

    Rendered {
        image,
        annotations,
        summary: SynthImageSummary {
            id,
            domain: stain.name.clone(),
            positives: planted[0],
            impostors: planted[1],
            normals: planted[2],
            ink: ink_centers.iter().map(|&(x, y)| [x, y]).collect(),
        },
    }
}

/// Renders a dataset in memory. Deterministic in `(spec, seed)`.
pub fn synthesize(spec: &SynthSpec, seed: u64) -> Result<SynthOutput> {
    spec.validate()?;
    let domains: Vec<DomainStain> = (0..spec.domains).map(|d| domain_stain(d, seed)).collect();
    let mut labeled = Vec::with_capacity(spec.images);
    let mut summaries = Vec::with_capacity(spec.images);
    for i in 0..spec.images {
        let stain = &domains[i % spec.domains];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let counts = [
            draw_count(&mut rng, spec.positives),
            draw_count(&mut rng, spec.impostors),
            draw_count(&mut rng, spec.normals),
        ];
        let id = format!("img{i:03}");
        let r = render(
            &mut rng,
            id.clone(),
            stain,
            spec.width as usize,
            spec.height as usize,
            counts,
            spec.ink_per_image,
        );
        let record = ImageRecord {
            file: PathBuf::from("images").join(format!("{id}.png")),
            id,
            domain: stain.name.clone(),
            width: spec.width,
            height: spec.height,
            annotations: r.annotations,
        };
        summaries.push(r.summary);
        labeled.push((record, r.image));
    }

    let mut unlabeled = Vec::with_capacity(spec.unlabeled_images);
    let mut unlabeled_summaries = Vec::new();
    for i in 0..spec.unlabeled_images {
        let stain = &domains[i % spec.domains];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 << 32 | i as u64);
        let counts = [
            draw_count(&mut rng, spec.positives),
            draw_count(&mut rng, spec.impostors),
            draw_count(&mut rng, spec.normals) * 3,
        ];
        let id = format!("unl{i:03}");
        let r = render(
            &mut rng,
            id.clone(),
            stain,
            spec.unlabeled_width as usize,
            spec.unlabeled_height as usize,
            counts,
            spec.unlabeled_ink_per_image,
        );
        let record = ImageRecord {
            file: PathBuf::from("images").join(format!("{id}.png")),
            id,
            domain: stain.name.clone(),
            width: spec.unlabeled_width,
            height: spec.unlabeled_height,
            annotations: Vec::new(),
        };
        unlabeled_summaries.push(r.summary);
        unlabeled.push((record, r.image));
    }

    let summary = SynthSummary {
        seed,
        spec: spec.clone(),
        total_positives: summaries.iter().map(|s| s.positives).sum(),
        total_impostors: summaries.iter().map(|s| s.impostors).sum(),
        total_ink: summaries.iter().chain(&unlabeled_summaries).map(|s| s.ink.len()).sum(),
        domains,
        images: summaries,
        unlabeled: unlabeled_summaries,
    };
    Ok(SynthOutput {
        labeled,
        unlabeled,
        summary,
    })
}

/// Paths written by [`generate_synthetic_dataset`].
#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub manifest: PathBuf,
    pub unlabeled: PathBuf,
    pub summary: PathBuf,
}

/// Writes `manifest.json`, `unlabeled.json`, `synth_summary.json` and
/// `images/*.png` under `out_dir`.
pub fn generate_synthetic_dataset(spec: &SynthSpec, seed: u64, out_dir: impl AsRef<Path>) -> Result<(SynthSummary, SynthPaths)> {
    let out = out_dir.as_ref();
    let generated = synthesize(spec, seed)?;
    let images_dir = out.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for (record, image) in generated.labeled.iter().chain(&generated.unlabeled) {
        image.save_png(out.join(&record.file))?;
    }
    let paths = SynthPaths {
        manifest: out.join("manifest.json"),
        unlabeled: out.join("unlabeled.json"),
        summary: out.join("synth_summary.json"),
    };
    let labeled: Vec<ImageRecord> = generated.labeled.into_iter().map(|(r, _)| r).collect();
    let unlabeled: Vec<ImageRecord> = generated.unlabeled.into_iter().map(|(r, _)| r).collect();
    save_manifest(&paths.manifest, &labeled)?;
    save_manifest(&paths.unlabeled, &unlabeled)?;
    let text = serde_json::to_string_pretty(&generated.summary).expect("summary serializes");
    std::fs::write(&paths.summary, text).map_err(|e| Error::io(&paths.summary, e))?;
    Ok((generated.summary, paths))
}
