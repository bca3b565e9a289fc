//! Patch augmentation: an ordered list of stochastic transforms, each fired
//! independently with its own probability.
//!
//! Geometric transforms (transpose, elastic, shift, zoom) are composed into a
//! single backward coordinate map and sampled once with bilinear
//! interpolation and reflect borders. Color transforms then run on the
//! unrounded floats, and the result is quantized once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{reflect_index, PATCH_SIZE};
use crate::error::{Error, Result};

/// Shift headroom a margined input must provide.
pub const MIN_MARGIN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Transpose,
    Elastic,
    Shift,
    Zoom,
    HueRotate,
    ColorShift,
    Contrast,
    Gamma,
}

impl TransformKind {
    /// Canonical application order.
    pub const ORDER: [TransformKind; 8] = [
        TransformKind::Transpose,
        TransformKind::Elastic,
        TransformKind::Shift,
        TransformKind::Zoom,
        TransformKind::HueRotate,
        TransformKind::ColorShift,
        TransformKind::Contrast,
        TransformKind::Gamma,
    ];

    fn index(self) -> usize {
        Self::ORDER.iter().position(|&k| k == self).unwrap()
    }
}

/// One row of a policy. `range` bounds every scalar parameter of the
/// transform (per-axis or per-channel values are drawn independently);
/// for the elastic deformation it bounds the control-point displacements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    pub kind: TransformKind,
    #[serde(default)]
    pub range: [f64; 2],
    pub probability: f64,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, range: [f64; 2], probability: f64) -> Self {
        Self { kind, range, probability }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugPolicy {
    pub name: String,
    pub transforms: Vec<TransformSpec>,
    /// Control grid side of the elastic deformation.
    #[serde(default = "default_grid")]
    pub elastic_grid: usize,
}

fn default_grid() -> usize {
    4
}

impl AugPolicy {
    pub fn policy_a() -> Self {
        use TransformKind::*;
        Self {
            name: "A".into(),
            transforms: vec![
                TransformSpec::new(Transpose, [0.0, 0.0], 0.5),
                TransformSpec::new(Elastic, [-8.0, 8.0], 1.0),
                TransformSpec::new(Shift, [-12.0, 12.0], 1.0),
                TransformSpec::new(Zoom, [-0.1, 0.2], 0.5),
                TransformSpec::new(HueRotate, [0.0, 360.0], 0.8),
                TransformSpec::new(ColorShift, [-51.0, 51.0], 0.8),
                TransformSpec::new(Contrast, [0.8, 1.2], 0.8),
                TransformSpec::new(Gamma, [1.0, 1.0], 0.0),
            ],
            elastic_grid: 4,
        }
    }

    pub fn policy_b() -> Self {
        use TransformKind::*;
        Self {
            name: "B".into(),
            transforms: vec![
                TransformSpec::new(Transpose, [0.0, 0.0], 0.5),
                TransformSpec::new(Elastic, [-8.0, 8.0], 0.5),
                TransformSpec::new(Shift, [-12.0, 12.0], 1.0),
                TransformSpec::new(Zoom, [-0.1, 0.2], 0.5),
                TransformSpec::new(HueRotate, [-60.0, 60.0], 0.5),
                TransformSpec::new(ColorShift, [-51.0, 51.0], 0.5),
                TransformSpec::new(Contrast, [0.8, 1.2], 0.5),
                TransformSpec::new(Gamma, [0.8, 1.2], 0.5),
            ],
            elastic_grid: 4,
        }
    }

    /// No transforms; output is the center crop.
    pub fn none() -> Self {
        Self {
            name: "none".into(),
            transforms: Vec::new(),
            elastic_grid: 4,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "A" | "a" => Ok(Self::policy_a()),
            "B" | "b" => Ok(Self::policy_b()),
            "none" => Ok(Self::none()),
            other => Err(Error::Config(format!("unknown augmentation policy `{other}` (expected A, B or none)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut last = None;
        for t in &self.transforms {
            if !(0.0..=1.0).contains(&t.probability) {
                return Err(Error::Config(format!("{:?}: probability {} outside [0, 1]", t.kind, t.probability)));
            }
            if t.range[0] > t.range[1] || !t.range.iter().all(|v| v.is_finite()) {
                return Err(Error::Config(format!("{:?}: invalid range {:?}", t.kind, t.range)));
            }
            let i = t.kind.index();
            if last.is_some_and(|l| l >= i) {
                return Err(Error::Config(format!("{:?} is out of order or repeated", t.kind)));
            }
            last = Some(i);
        }
        if self.elastic_grid < 2 {
            return Err(Error::Config("elastic_grid must be at least 2".into()));
        }
        Ok(())
    }
}

/// Concrete parameters of one augmentation draw; `None` means not fired.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugPlan {
    pub transpose: bool,
    /// Row-major `grid x grid` control displacements `(dx, dy)`.
    pub elastic: Option<ElasticField>,
    pub shift: Option<(i64, i64)>,
    pub zoom: Option<f64>,
    pub hue: Option<f64>,
    pub color: Option<[f64; 3]>,
    pub contrast: Option<[f64; 3]>,
    pub gamma: Option<[f64; 3]>,
}

impl AugPlan {
    /// Whether each transform fired, in canonical order.
    pub fn fired(&self) -> [bool; 8] {
        [
            self.transpose,
            self.elastic.is_some(),
            self.shift.is_some(),
            self.zoom.is_some(),
            self.hue.is_some(),
            self.color.is_some(),
            self.contrast.is_some(),
            self.gamma.is_some(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElasticField {
    pub grid: usize,
    pub displacements: Vec<[f64; 2]>,
}

impl ElasticField {
    pub fn constant(grid: usize, d: [f64; 2]) -> Self {
        Self {
            grid,
            displacements: vec![d; grid * grid],
        }
    }

    /// Bilinear upsampling of the control grid spread evenly over a
    /// `side x side` frame.
    fn at(&self, x: f64, y: f64, side: usize) -> [f64; 2] {
        let cells = (self.grid - 1) as f64;
        let scale = cells / (side.max(2) - 1) as f64;
        let gx = (x * scale).clamp(0.0, cells);
        let gy = (y * scale).clamp(0.0, cells);
        let ix = (gx.floor() as usize).min(self.grid - 2);
        let iy = (gy.floor() as usize).min(self.grid - 2);
        let (fx, fy) = (gx - ix as f64, gy - iy as f64);
        let d = |c: usize, r: usize| self.displacements[r * self.grid + c];
        let mut out = [0.0; 2];
        for (a, o) in out.iter_mut().enumerate() {
            let top = d(ix, iy)[a] * (1.0 - fx) + d(ix + 1, iy)[a] * fx;
            let bottom = d(ix, iy + 1)[a] * (1.0 - fx) + d(ix + 1, iy + 1)[a] * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }
}

/// Draws a plan. Every transform consumes its firing draw; parameters are
/// drawn only when it fires.
pub fn sample_plan(policy: &AugPolicy, rng: &mut impl Rng) -> AugPlan {
    let mut plan = AugPlan::default();
    for t in &policy.transforms {
        if !(rng.gen::<f64>() < t.probability) {
            continue;
        }
        let [lo, hi] = t.range;
        let u = |rng: &mut dyn rand::RngCore| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        match t.kind {
            TransformKind::Transpose => plan.transpose = true,
            TransformKind::Elastic => {
                let n = policy.elastic_grid * policy.elastic_grid;
                let displacements = (0..n).map(|_| [u(rng), u(rng)]).collect();
                plan.elastic = Some(ElasticField {
                    grid: policy.elastic_grid,
                    displacements,
                });
            }
            TransformKind::Shift => {
                let (a, b) = (lo.ceil() as i64, hi.floor() as i64);
                plan.shift = Some((rng.gen_range(a..=b), rng.gen_range(a..=b)));
            }
            TransformKind::Zoom => plan.zoom = Some(u(rng)),
            TransformKind::HueRotate => plan.hue = Some(u(rng)),
            TransformKind::ColorShift => plan.color = Some([u(rng), u(rng), u(rng)]),
            TransformKind::Contrast => plan.contrast = Some([u(rng), u(rng), u(rng)]),
            TransformKind::Gamma => plan.gamma = Some([u(rng), u(rng), u(rng)]),
        }
    }
    plan
}

fn side_of(len: usize) -> Result<usize> {
    let px = len / 3;
    let side = (px as f64).sqrt().round() as usize;
    if side * side * 3 != len {
        return Err(Error::Shape(format!("{len} bytes is not a square RGB patch")));
    }
    Ok(side)
}

/// Bilinear sample with reflect borders, in float.
fn sample(src: &[u8], side: usize, x: f64, y: f64) -> [f64; 3] {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let px = |xx: i64, yy: i64| {
        let i = (reflect_index(yy, side) * side + reflect_index(xx, side)) * 3;
        [src[i] as f64, src[i + 1] as f64, src[i + 2] as f64]
    };
    if fx == 0.0 && fy == 0.0 {
        return px(x0, y0);
    }
    let (a, b, c, d) = (px(x0, y0), px(x0 + 1, y0), px(x0, y0 + 1), px(x0 + 1, y0 + 1));
    let mut out = [0.0; 3];
    for k in 0..3 {
        let top = a[k] * (1.0 - fx) + b[k] * fx;
        let bottom = c[k] * (1.0 - fx) + d[k] * fx;
        out[k] = top * (1.0 - fy) + bottom * fy;
    }
    out
}

/// Resamples the geometric part of `plan`, returning `out x out` float
/// pixels cropped around the center of the `side x side` source.
fn warp(src: &[u8], side: usize, out: usize, plan: &AugPlan) -> Vec<[f64; 3]> {
    let margin = (side - out) / 2;
    let center = ((out / 2).saturating_sub(1) + margin) as f64;
    let mut pixels = Vec::with_capacity(out * out);
    for oy in 0..out {
        for ox in 0..out {
            let (mut x, mut y) = ((ox + margin) as f64, (oy + margin) as f64);
            if let Some(a) = plan.zoom {
                x = center + (x - center) / (1.0 + a);
                y = center + (y - center) / (1.0 + a);
            }
            if let Some((dx, dy)) = plan.shift {
                x += dx as f64;
                y += dy as f64;
            }
            if let Some(field) = &plan.elastic {
                let d = field.at(x, y, side);
                x += d[0];
                y += d[1];
            }
            if plan.transpose {
                std::mem::swap(&mut x, &mut y);
            }
            pixels.push(sample(src, side, x, y));
        }
    }
    pixels
}

/// RGB in `[0, 1]` to (hue, lightness, saturation), hue in `[0, 1)`.
pub fn rgb_to_hls(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let maxc = r.max(g).max(b);
    let minc = r.min(g).min(b);
    let l = (minc + maxc) / 2.0;
    if minc == maxc {
        return (0.0, l, 0.0);
    }
    let span = maxc - minc;
    let s = if l <= 0.5 { span / (maxc + minc) } else { span / (2.0 - maxc - minc) };
    let rc = (maxc - r) / span;
    let gc = (maxc - g) / span;
    let bc = (maxc - b) / span;
    let h = if r == maxc {
        bc - gc
    } else if g == maxc {
        2.0 + rc - bc
    } else {
        4.0 + gc - rc
    };
    ((h / 6.0).rem_euclid(1.0), l, s)
}

pub fn hls_to_rgb(h: f64, l: f64, s: f64) -> (f64, f64, f64) {
    if s == 0.0 {
        return (l, l, l);
    }
    let m2 = if l <= 0.5 { l * (1.0 + s) } else { l + s - l * s };
    let m1 = 2.0 * l - m2;
    let v = |hue: f64| {
        let hue = hue.rem_euclid(1.0);
        if hue < 1.0 / 6.0 {
            m1 + (m2 - m1) * hue * 6.0
        } else if hue < 0.5 {
            m2
        } else if hue < 2.0 / 3.0 {
            m1 + (m2 - m1) * (2.0 / 3.0 - hue) * 6.0
        } else {
            m1
        }
    };
    (v(h + 1.0 / 3.0), v(h), v(h - 1.0 / 3.0))
}

fn hue_px(p: &mut [f64; 3], degrees: f64) {
    let (h, l, s) = rgb_to_hls(p[0] / 255.0, p[1] / 255.0, p[2] / 255.0);
    let (r, g, b) = hls_to_rgb((h + degrees / 360.0).rem_euclid(1.0), l, s);
    *p = [r * 255.0, g * 255.0, b * 255.0];
}

fn color_px(p: &mut [f64; 3], plan: &AugPlan) {
    if let Some(deg) = plan.hue {
        hue_px(p, deg);
    }
    if let Some(c) = plan.color {
        for k in 0..3 {
            p[k] = (p[k] + c[k]).clamp(0.0, 255.0);
        }
    }
    if let Some(mu) = plan.contrast {
        for k in 0..3 {
            p[k] = (128.0 + mu[k] * (p[k] - 128.0)).clamp(0.0, 255.0);
        }
    }
    if let Some(g) = plan.gamma {
        for k in 0..3 {
            p[k] = 255.0 * (p[k].clamp(0.0, 255.0) / 255.0).powf(g[k]);
        }
    }
}

fn quantize(pixels: &[[f64; 3]]) -> Vec<u8> {
    pixels
        .iter()
        .flat_map(|p| p.map(|v| v.round().clamp(0.0, 255.0) as u8))
        .collect()
}

/// Applies a drawn plan to a margined square patch, returning an
/// `out_size x out_size` patch.
pub fn apply_plan(input: &[u8], plan: &AugPlan, out_size: usize) -> Result<Vec<u8>> {
    let side = side_of(input.len())?;
    if side < out_size + 2 * MIN_MARGIN || (side - out_size) % 2 != 0 {
        return Err(Error::Usage(format!(
            "a {side}x{side} input cannot feed a {out_size}x{out_size} patch with a margin of at least {MIN_MARGIN} px"
        )));
    }
    let mut pixels = warp(input, side, out_size, plan);
    for p in &mut pixels {
        color_px(p, plan);
    }
    Ok(quantize(&pixels))
}

/// Samples a plan from `policy` and applies it; output is `78 x 78 x 3`.
pub fn apply_policy(input: &[u8], policy: &AugPolicy, rng: &mut impl Rng) -> Result<Vec<u8>> {
    let plan = sample_plan(policy, rng);
    apply_plan(input, &plan, PATCH_SIZE)
}

fn color_only(patch: &[u8], plan: &AugPlan) -> Vec<u8> {
    let pixels: Vec<[f64; 3]> = patch
        .chunks_exact(3)
        .map(|p| {
            let mut v = [p[0] as f64, p[1] as f64, p[2] as f64];
            color_px(&mut v, plan);
            v
        })
        .collect();
    quantize(&pixels)
}

fn geometric_only(patch: &[u8], plan: &AugPlan) -> Result<Vec<u8>> {
    let side = side_of(patch.len())?;
    Ok(quantize(&warp(patch, side, side, plan)))
}

pub fn hue_rotate(patch: &[u8], degrees: f64) -> Vec<u8> {
    color_only(
        patch,
        &AugPlan {
            hue: Some(degrees),
            ..AugPlan::default()
        },
    )
}

pub fn color_shift(patch: &[u8], shift: [f64; 3]) -> Vec<u8> {
    color_only(
        patch,
        &AugPlan {
            color: Some(shift),
            ..AugPlan::default()
        },
    )
}

pub fn contrast(patch: &[u8], mu: [f64; 3]) -> Vec<u8> {
    color_only(
        patch,
        &AugPlan {
            contrast: Some(mu),
            ..AugPlan::default()
        },
    )
}

pub fn gamma(patch: &[u8], gamma: [f64; 3]) -> Vec<u8> {
    color_only(
        patch,
        &AugPlan {
            gamma: Some(gamma),
            ..AugPlan::default()
        },
    )
}

/// Swaps the spatial axes of a square patch.
pub fn transpose(patch: &[u8]) -> Result<Vec<u8>> {
    geometric_only(
        patch,
        &AugPlan {
            transpose: true,
            ..AugPlan::default()
        },
    )
}

/// Integer translation with reflect borders: `out(x, y) = in(x + dx, y + dy)`.
pub fn shift(patch: &[u8], dx: i64, dy: i64) -> Result<Vec<u8>> {
    geometric_only(
        patch,
        &AugPlan {
            shift: Some((dx, dy)),
            ..AugPlan::default()
        },
    )
}

/// Magnification by `1 + alpha` about the patch center.
pub fn zoom(patch: &[u8], alpha: f64) -> Result<Vec<u8>> {
    geometric_only(
        patch,
        &AugPlan {
            zoom: Some(alpha),
            ..AugPlan::default()
        },
    )
}

pub fn elastic_deform(patch: &[u8], field: &ElasticField) -> Result<Vec<u8>> {
    geometric_only(
        patch,
        &AugPlan {
            elastic: Some(field.clone()),
            ..AugPlan::default()
        },
    )
}
