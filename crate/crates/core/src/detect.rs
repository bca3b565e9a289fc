//! Dense whole-image inference, local-maxima detection, threshold
//! calibration and two-model agreement ensembling.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageRecord, RgbImage};
use crate::error::{Error, Result};
use crate::eval::{f1, match_all};
use crate::nnet::{positive_probability, rgb_to_input, Mode, Model, ModelWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    /// Tile side in input pixels.
    pub tile: usize,
    pub threads: usize,
    /// Detection threshold used when no calibration is supplied.
    pub threshold: f32,
    /// Greedy suppression radius applied after local-maxima extraction, in
    /// input pixels. Zero keeps every local maximum.
    pub min_separation: f64,
    pub ensemble_radius: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            tile: 512,
            threads: 1,
            threshold: 0.5,
            min_separation: 0.0,
            ensemble_radius: crate::eval::DEFAULT_MATCH_RADIUS,
        }
    }
}

/// Mitosis probability per valid window position.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    /// Input coordinate of the window center of map cell (0, 0).
    pub offset: usize,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct MapSidecar {
    image_id: String,
    h: usize,
    w: usize,
    stride: usize,
    offset: usize,
}

impl PredictionMap {
    pub fn at(&self, my: usize, mx: usize) -> f32 {
        self.data[my * self.width + mx]
    }

    /// Input-pixel coordinates (x, y) of map cell (my, mx).
    pub fn to_pixel(&self, my: usize, mx: usize) -> (f64, f64) {
        ((mx * self.stride + self.offset) as f64, (my * self.stride + self.offset) as f64)
    }

    /// Raw little-endian f32 values plus `<path>.json` with the geometry.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let side = sidecar(path);
        let meta = MapSidecar {
            image_id: self.image_id.clone(),
            h: self.height,
            w: self.width,
            stride: self.stride,
            offset: self.offset,
        };
        std::fs::write(&side, serde_json::to_string_pretty(&meta).expect("sidecar serializes"))
            .map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let m: MapSidecar = serde_json::from_str(&text).map_err(|e| Error::parse(side.display().to_string(), e))?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != m.h * m.w * 4 {
            return Err(Error::Format {
                offset: bytes.len().min(m.h * m.w * 4) as u64,
                message: format!("{} holds {} bytes for a {}x{} map", path.display(), bytes.len(), m.h, m.w),
            });
        }
        Ok(Self {
            image_id: m.image_id,
            height: m.h,
            width: m.w,
            stride: m.stride,
            offset: m.offset,
            data: bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        })
    }
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn crop(img: &RgbImage, x0: usize, y0: usize, w: usize, h: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(w * h * 3);
    for y in y0..y0 + h {
        let row = (y * img.width + x0) * 3;
        out.extend_from_slice(&img.data[row..row + w * 3]);
    }
    out
}

fn map_extent(n: usize, rf: usize, stride: usize) -> usize {
    (n - rf) / stride + 1
}

/// Forward pass over one input window; returns the probability map.
fn forward_window(model: &mut Model, img: &RgbImage, x0: usize, y0: usize, w: usize, h: usize) -> Result<(usize, usize, Vec<f32>)> {
    let buf = crop(img, x0, y0, w, h);
    let x = rgb_to_input(&[&buf], h, w)?;
    let y = model.forward(&x, Mode::Infer)?;
    let plane = y.height * y.width;
    let probs = (0..plane)
        .map(|i| positive_probability([y.data[i], y.data[plane + i]]))
        .collect();
    Ok((y.height, y.width, probs))
}

/// Whole-image probability map in a single pass.
pub fn dense_forward_untiled(model: &mut Model, image_id: &str, img: &RgbImage) -> Result<PredictionMap> {
    check_size(model, img)?;
    let (h, w, data) = forward_window(model, img, 0, 0, img.width, img.height)?;
    Ok(PredictionMap {
        image_id: image_id.to_string(),
        height: h,
        width: w,
        stride: model.output_stride(),
        offset: model.config().center_offset(),
        data,
    })
}

fn check_size(model: &Model, img: &RgbImage) -> Result<()> {
    let rf = model.receptive_field();
    if img.width < rf || img.height < rf {
        return Err(Error::Shape(format!(
            "image {}x{} smaller than the {rf}x{rf} receptive field",
            img.width, img.height
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Tile {
    my0: usize,
    mx0: usize,
    mh: usize,
    mw: usize,
}

/// Tiled dense inference. Consecutive tiles overlap by `rf - stride`
/// input pixels so that their map cells abut exactly. With `threads > 1`
/// tiles are distributed over workers, each owning a model copy; the
/// stitched map does not depend on the thread count.
pub fn dense_forward(model: &mut Model, image_id: &str, img: &RgbImage, tile: usize, threads: usize) -> Result<PredictionMap> {
    check_size(model, img)?;
    let rf = model.receptive_field();
    let stride = model.output_stride();
    if tile < rf {
        return Err(Error::Usage(format!("tile {tile} smaller than the receptive field {rf}")));
    }
    let (mh, mw) = (map_extent(img.height, rf, stride), map_extent(img.width, rf, stride));
    let per_tile = map_extent(tile, rf, stride);
    let mut tiles = Vec::new();
    for my0 in (0..mh).step_by(per_tile) {
        for mx0 in (0..mw).step_by(per_tile) {
            tiles.push(Tile {
                my0,
                mx0,
                mh: per_tile.min(mh - my0),
                mw: per_tile.min(mw - mx0),
            });
        }
    }
    let run = |model: &mut Model, t: &Tile| -> Result<Vec<f32>> {
        let (h, w) = ((t.mh - 1) * stride + rf, (t.mw - 1) * stride + rf);
        let (th, tw, probs) = forward_window(model, img, t.mx0 * stride, t.my0 * stride, w, h)?;
        debug_assert_eq!((th, tw), (t.mh, t.mw));
        Ok(probs)
    };
    let results: Vec<Vec<f32>> = if threads <= 1 || tiles.len() == 1 {
        tiles.iter().map(|t| run(model, t)).collect::<Result<_>>()?
    } else {
        let weights = model.weights();
        let workers = threads.min(tiles.len());
        let mut slots: Vec<Option<Result<Vec<f32>>>> = (0..tiles.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|wi| {
                    let weights = &weights;
                    let tiles = &tiles;
                    let run = &run;
                    s.spawn(move || -> Vec<(usize, Result<Vec<f32>>)> {
                        let mut m = match Model::from_weights(weights) {
                            Ok(m) => m,
                            Err(e) => return vec![(wi, Err(e))],
                        };
                        (wi..tiles.len()).step_by(workers).map(|i| (i, run(&mut m, &tiles[i]))).collect()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("tile worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every tile processed")).collect::<Result<_>>()?
    };
    let mut data = vec![0.0f32; mh * mw];
    for (t, probs) in tiles.iter().zip(results) {
        for r in 0..t.mh {
            let dst = (t.my0 + r) * mw + t.mx0;
            data[dst..dst + t.mw].copy_from_slice(&probs[r * t.mw..(r + 1) * t.mw]);
        }
    }
    Ok(PredictionMap {
        image_id: image_id.to_string(),
        height: mh,
        width: mw,
        stride,
        offset: model.config().center_offset(),
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: String,
    /// Descending score; ties in ascending (y, x).
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(image_id: impl Into<String>, mut detections: Vec<Detection>) -> Self {
        sort_detections(&mut detections);
        Self {
            image_id: image_id.into(),
            detections,
        }
    }

    pub fn above(&self, threshold: f32) -> Self {
        Self {
            image_id: self.image_id.clone(),
            detections: self.detections.iter().copied().filter(|d| d.score >= threshold).collect(),
        }
    }
}

fn sort_detections(d: &mut [Detection]) {
    d.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
}

/// Local maxima of `map` with value at least `threshold`.
///
/// A cell qualifies when it is strictly greater than its 8 neighbors. A
/// connected plateau of equal values qualifies when every cell bordering
/// it is strictly lower; it yields its first cell in row-major order. A
/// plateau with no border at all (a constant map) yields nothing, except
/// for a single-cell map.
pub fn local_maxima(map: &PredictionMap, threshold: f32) -> DetectionSet {
    let (h, w) = (map.height, map.width);
    let mut visited = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    let mut plateau = Vec::new();
    for start in 0..h * w {
        if visited[start] {
            continue;
        }
        let v = map.data[start];
        // Flood the equal-valued component, checking its border.
        let mut dominates = true;
        let mut has_border = false;
        plateau.clear();
        queue.push_back(start);
        visited[start] = true;
        while let Some(i) = queue.pop_front() {
            plateau.push(i);
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if (dy, dx) == (0, 0) || ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    let u = map.data[j];
                    if u == v {
                        if !visited[j] {
                            visited[j] = true;
                            queue.push_back(j);
                        }
                    } else {
                        has_border = true;
                        if u > v {
                            dominates = false;
                        }
                    }
                }
            }
        }
        let qualifies = dominates && (has_border || h * w == 1);
        if qualifies && v >= threshold {
            let first = *plateau.iter().min().expect("non-empty plateau");
            let (x, y) = map.to_pixel(first / w, first % w);
            out.push(Detection { x, y, score: v });
        }
    }
    DetectionSet::new(map.image_id.clone(), out)
}

/// Keeps detections in score order, dropping any within `min_separation`
/// of one already kept.
pub fn suppress_nearby(set: &DetectionSet, min_separation: f64) -> DetectionSet {
    if min_separation <= 0.0 {
        return set.clone();
    }
    let r2 = min_separation * min_separation;
    let mut kept: Vec<Detection> = Vec::new();
    for d in &set.detections {
        if kept.iter().all(|k| (k.x - d.x).powi(2) + (k.y - d.y).powi(2) > r2) {
            kept.push(*d);
        }
    }
    DetectionSet {
        image_id: set.image_id.clone(),
        detections: kept,
    }
}

/// Local maxima followed by [`suppress_nearby`].
pub fn detect(map: &PredictionMap, threshold: f32, min_separation: f64) -> DetectionSet {
    suppress_nearby(&local_maxima(map, threshold), min_separation)
}

pub fn write_detections_csv(path: impl AsRef<Path>, sets: &[DetectionSet]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let wrap = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["image_id", "x", "y", "score"]).map_err(wrap)?;
    for s in sets {
        for d in &s.detections {
            w.write_record([
                s.image_id.clone(),
                format!("{}", d.x),
                format!("{}", d.y),
                format!("{:.3}", d.score),
            ])
            .map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `image_id,x,y,score` rows, grouped by image in first-seen order.
pub fn read_detections_csv(path: impl AsRef<Path>) -> Result<Vec<DetectionSet>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut order = Vec::new();
    let mut by_id: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path.display().to_string(), e))?;
        let bad = || Error::Parse {
            context: format!("{} row {}", path.display(), line + 2),
            message: "expected image_id,x,y,score".into(),
        };
        if rec.len() != 4 {
            return Err(bad());
        }
        let num = |i: usize| rec[i].trim().parse::<f64>().map_err(|_| bad());
        let id = rec[0].to_string();
        if !by_id.contains_key(&id) {
            order.push(id.clone());
        }
        by_id.entry(id).or_default().push(Detection {
            x: num(1)?,
            y: num(2)?,
            score: num(3)? as f32,
        });
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let d = by_id.remove(&id).expect("grouped");
            DetectionSet::new(id, d)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f32,
    pub f1: f64,
    pub candidates: usize,
}

/// Picks the detection threshold maximizing pooled F1. Candidates are the
/// unique detection scores plus 0.5; ties go to the largest threshold.
/// `sets` should hold all local maxima (threshold zero).
pub fn calibrate_threshold(sets: &[DetectionSet], records: &[ImageRecord], radius: f64) -> Result<Calibration> {
    let results = match_all(sets, records, radius)?;
    let ids: std::collections::BTreeSet<&str> = sets.iter().map(|s| s.image_id.as_str()).collect();
    let n_gt: usize = records
        .iter()
        .filter(|r| ids.contains(r.id.as_str()))
        .map(ImageRecord::mitosis_count)
        .sum();
    if n_gt == 0 {
        return Err(Error::Usage("calibration needs at least one validation mitosis".into()));
    }
    // Greedy matching is prefix-stable in score order, so each threshold's
    // counts follow from the threshold-zero matching.
    let mut scored: Vec<(f32, bool)> = Vec::new();
    for (s, (_, m)) in sets.iter().zip(&results) {
        scored.extend(s.detections.iter().zip(&m.matched).map(|(d, &t)| (d.score, t)));
    }
    if scored.is_empty() {
        log::warn!("no detections on the validation set; falling back to threshold 0.5");
        return Ok(Calibration {
            threshold: 0.5,
            f1: 0.0,
            candidates: 1,
        });
    }
    let mut candidates: Vec<f32> = scored.iter().map(|s| s.0).collect();
    candidates.push(0.5);
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp, mut i) = (0usize, 0usize, 0usize);
    let mut best = (f64::NEG_INFINITY, 0.5f32);
    for &t in &candidates {
        while i < scored.len() && scored[i].0 >= t {
            if scored[i].1 {
                tp += 1
            } else {
                fp += 1
            }
            i += 1;
        }
        let f = f1(tp, fp, n_gt - tp);
        if f > best.0 {
            best = (f, t);
        }
    }
    Ok(Calibration {
        threshold: best.1,
        f1: best.0,
        candidates: candidates.len(),
    })
}

/// Dense maps and threshold-zero detections for every image in `data`.
pub fn detect_all(model: &mut Model, data: &Dataset, cfg: &DetectConfig) -> Result<Vec<DetectionSet>> {
    data.records
        .iter()
        .map(|r| {
            let img = data
                .image(&r.id)
                .ok_or_else(|| Error::Usage(format!("no pixels for image `{}`", r.id)))?;
            let map = dense_forward(model, &r.id, img, cfg.tile, cfg.threads)?;
            Ok(detect(&map, 0.0, cfg.min_separation))
        })
        .collect()
}

/// Convenience wrapper: detect on the validation data, then calibrate.
pub fn calibrate_model(weights: &ModelWeights, val: &Dataset, cfg: &DetectConfig, match_radius: f64) -> Result<Calibration> {
    let mut model = Model::from_weights(weights)?;
    let sets = detect_all(&mut model, val, cfg)?;
    calibrate_threshold(&sets, &val.records, match_radius)
}

/// Agreement of two detection sets of the same image. Pairs within
/// `radius` are taken greedily by descending score sum (ties: shorter
/// distance, then position); each detection is used once. A kept pair
/// becomes one detection at the midpoint with the mean score.
pub fn ensemble_agreement(a: &DetectionSet, b: &DetectionSet, radius: f64) -> Result<DetectionSet> {
    if a.image_id != b.image_id {
        return Err(Error::Usage(format!(
            "cannot ensemble detections of `{}` with `{}`",
            a.image_id, b.image_id
        )));
    }
    let r2 = radius * radius;
    let mut pairs = Vec::new();
    for (i, p) in a.detections.iter().enumerate() {
        for (j, q) in b.detections.iter().enumerate() {
            let d2 = (p.x - q.x).powi(2) + (p.y - q.y).powi(2);
            if d2 <= r2 {
                pairs.push((pair_key(p, q, d2), i, j));
            }
        }
    }
    pairs.sort_by(|x, y| cmp_key(&x.0, &y.0));
    let mut used_a = vec![false; a.detections.len()];
    let mut used_b = vec![false; b.detections.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        out.push(merge_pair(&a.detections[i], &b.detections[j]));
    }
    Ok(DetectionSet::new(a.image_id.clone(), out))
}

/// Ordering key of a candidate pair; symmetric in its two members.
pub(crate) type PairKey = (f64, f64, [f64; 4]);

pub(crate) fn pair_key(p: &Detection, q: &Detection, d2: f64) -> PairKey {
    let sum = p.score as f64 + q.score as f64;
    let (lo, hi) = if (p.y, p.x) <= (q.y, q.x) { (p, q) } else { (q, p) };
    (-sum, d2, [lo.y, lo.x, hi.y, hi.x])
}

pub(crate) fn cmp_key(a: &PairKey, b: &PairKey) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then_with(|| {
        a.2.iter()
            .zip(&b.2)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

fn merge_pair(p: &Detection, q: &Detection) -> Detection {
    Detection {
        x: (p.x + q.x) / 2.0,
        y: (p.y + q.y) / 2.0,
        score: ((p.score as f64 + q.score as f64) / 2.0) as f32,
    }
}
