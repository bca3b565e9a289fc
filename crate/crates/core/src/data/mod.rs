//! Dataset model: manifests, splits, patch references and extraction, and a
//! synthetic H&E-like generator for desk-scale runs.

mod patches;
mod split;
pub mod synth;

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use patches::{
    enumerate_negative_centers, extract_patch, negative_pool, positive_refs, reflect_index, PATCH_SIZE,
};
pub use split::{stratified_split, DomainStats, SplitManifest};

/// Smallest image side usable for training (one receptive field).
pub const MIN_IMAGE_SIDE: u32 = 78;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnnotationLabel {
    #[serde(rename = "mitotic-figure")]
    MitoticFigure,
    #[serde(rename = "non-mitotic-figure")]
    NonMitoticFigure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub x: f64,
    pub y: f64,
    pub label: AnnotationLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    /// Path to the PNG, relative to the manifest directory unless absolute.
    pub file: PathBuf,
    pub domain: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

impl ImageRecord {
    pub fn mitoses(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations
            .iter()
            .filter(|a| a.label == AnnotationLabel::MitoticFigure)
    }

    pub fn mitosis_count(&self) -> usize {
        self.mitoses().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchLabel {
    Positive,
    Negative,
}

/// A patch center inside a named image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRef {
    pub image_id: String,
    pub cx: i64,
    pub cy: i64,
    pub label: PatchLabel,
}

impl PatchRef {
    pub fn new(image_id: impl Into<String>, cx: i64, cy: i64, label: PatchLabel) -> Self {
        Self {
            image_id: image_id.into(),
            cx,
            cy,
            label,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    images: Vec<ImageRecord>,
}

/// Parses and validates a manifest. File paths are resolved against the
/// manifest's directory and must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let records = parse_manifest(&text, &path.display().to_string())?;
    let mut resolved = Vec::with_capacity(records.len());
    for mut r in records {
        if r.file.is_relative() {
            r.file = base.join(&r.file);
        }
        if !r.file.is_file() {
            return Err(Error::io(
                &r.file,
                std::io::Error::new(std::io::ErrorKind::NotFound, format!("image of record `{}` not found", r.id)),
            ));
        }
        resolved.push(r);
    }
    Ok(resolved)
}

/// Parses manifest JSON and checks record invariants without touching the
/// filesystem.
pub fn parse_manifest(text: &str, context: &str) -> Result<Vec<ImageRecord>> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::parse(context, e))?;
    let images = value
        .get("images")
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::parse(context, "missing `images` array"))?;
    let mut records = Vec::with_capacity(images.len());
    let mut seen = HashSet::new();
    for (i, img) in images.iter().enumerate() {
        let label = img
            .get("id")
            .and_then(|v| v.as_str())
            .map(|s| format!("record `{s}`"))
            .unwrap_or_else(|| format!("record #{i}"));
        let record: ImageRecord =
            serde_json::from_value(img.clone()).map_err(|e| Error::parse(format!("{context}: {label}"), e))?;
        validate_record(&record).map_err(|m| Error::parse(format!("{context}: {label}"), m))?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::parse(format!("{context}: {label}"), "duplicate id"));
        }
        records.push(record);
    }
    Ok(records)
}

fn validate_record(r: &ImageRecord) -> std::result::Result<(), String> {
    if r.id.is_empty() {
        return Err("empty id".into());
    }
    if r.width == 0 || r.height == 0 {
        return Err("zero image size".into());
    }
    for a in &r.annotations {
        let inside = a.x >= 0.0 && a.y >= 0.0 && a.x < r.width as f64 && a.y < r.height as f64;
        if !inside || !a.x.is_finite() || !a.y.is_finite() {
            return Err(format!("annotation ({}, {}) outside {}x{} image", a.x, a.y, r.width, r.height));
        }
    }
    Ok(())
}

/// Writes a manifest; relative paths are kept as given.
pub fn save_manifest(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = ManifestFile {
        images: records.to_vec(),
    };
    let text = serde_json::to_string_pretty(&file).expect("manifest serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// 8-bit RGB image held in memory, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        Ok(Self {
            width: rgb.width() as usize,
            height: rgb.height() as usize,
            data: rgb.into_raw(),
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Rotation by `k` counter-clockwise quarter turns.
    pub fn rotate(&self, k: usize) -> Self {
        let k = k % 4;
        let (w, h) = (self.width, self.height);
        let (ow, oh) = if k % 2 == 0 { (w, h) } else { (h, w) };
        let mut out = Self::new(ow, oh);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = crate::nnet::tensor::rot_source(y, x, h, w, k);
                out.put(x, y, self.pixel(sx, sy));
            }
        }
        out
    }
}

/// Records plus their decoded pixels, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    images: HashMap<String, RgbImage>,
}

impl Dataset {
    pub fn load(records: Vec<ImageRecord>) -> Result<Self> {
        let mut images = HashMap::with_capacity(records.len());
        for r in &records {
            let img = RgbImage::load_png(&r.file)?;
            if img.width != r.width as usize || img.height != r.height as usize {
                return Err(Error::parse(
                    format!("record `{}`", r.id),
                    format!(
                        "manifest says {}x{} but {} is {}x{}",
                        r.width,
                        r.height,
                        r.file.display(),
                        img.width,
                        img.height
                    ),
                ));
            }
            images.insert(r.id.clone(), img);
        }
        Ok(Self { records, images })
    }

    pub fn from_parts(records: Vec<ImageRecord>, images: Vec<RgbImage>) -> Self {
        let images = records.iter().map(|r| r.id.clone()).zip(images).collect();
        Self { records, images }
    }

    pub fn image(&self, id: &str) -> Option<&RgbImage> {
        self.images.get(id)
    }

    pub fn record(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Subset restricted to `ids`, in manifest order.
    pub fn subset(&self, ids: &[String]) -> Self {
        let keep: HashSet<&String> = ids.iter().collect();
        let records: Vec<ImageRecord> = self.records.iter().filter(|r| keep.contains(&r.id)).cloned().collect();
        let images = records
            .iter()
            .filter_map(|r| self.images.get(&r.id).map(|i| (r.id.clone(), i.clone())))
            .collect();
        Self { records, images }
    }

    /// Every mitosis of every record as a positive ref.
    pub fn positive_refs(&self) -> Vec<PatchRef> {
        self.records.iter().flat_map(positive_refs).collect()
    }

    /// Concatenated [`negative_pool`] of every record.
    pub fn negative_pool(&self, min_dist: f64, stride: usize) -> Vec<PatchRef> {
        self.records
            .iter()
            .flat_map(|r| negative_pool(r, min_dist, stride))
            .collect()
    }

    /// Union of two datasets; ids must not collide.
    pub fn merged(&self, other: &Dataset) -> Result<Self> {
        let mut out = self.clone();
        for r in &other.records {
            if out.images.contains_key(&r.id) {
                return Err(Error::Usage(format!("image id `{}` present in both datasets", r.id)));
            }
            out.records.push(r.clone());
            if let Some(img) = other.images.get(&r.id) {
                out.images.insert(r.id.clone(), img.clone());
            }
        }
        Ok(out)
    }

    /// Pixels for a patch reference, `size + 2 * margin` square.
    pub fn patch(&self, r: &PatchRef, size: usize, margin: usize) -> Result<Vec<u8>> {
        let img = self
            .image(&r.image_id)
            .ok_or_else(|| Error::Usage(format!("patch refers to unknown image `{}`", r.image_id)))?;
        Ok(extract_patch(img, r, size, margin))
    }
}
