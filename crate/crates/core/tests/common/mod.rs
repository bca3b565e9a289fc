//! Brute-force reference implementations shared by the integration tests.
//! Each one is written directly from the operation's definition and avoids
//! the library's own shortcuts.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::ops::Range;

use mitodet::data::{Annotation, AnnotationLabel, ImageRecord, PatchRef};
use mitodet::detect::{Detection, PredictionMap};
use mitodet::mining::ScoredNegative;
use rand::Rng;

/// Full sort by (score desc, image_id, cy, cx), then the first k.
pub fn select_hard_oracle(scored: &[ScoredNegative], k: usize) -> Vec<PatchRef> {
    let mut all: Vec<&ScoredNegative> = scored.iter().collect();
    all.sort_by(|a, b| {
        let ka = (&a.patch.image_id, a.patch.cy, a.patch.cx);
        let kb = (&b.patch.image_id, b.patch.cy, b.patch.cx);
        match b.score.partial_cmp(&a.score).unwrap() {
            Ordering::Equal => ka.cmp(&kb),
            o => o,
        }
    });
    all.into_iter().take(k).map(|s| s.patch.clone()).collect()
}

/// Local maxima by fixpoint component labelling.
///
/// Every cell starts with its own label; labels of equal-valued
/// 8-neighbors are repeatedly replaced by their minimum until nothing
/// changes. The minimum index in a component is then its label and its
/// row-major first cell.
pub fn local_maxima_oracle(map: &PredictionMap, threshold: f32) -> Vec<Detection> {
    let (h, w) = (map.height, map.width);
    let v = |y: usize, x: usize| map.data[y * w + x];
    let neighbors = |y: usize, x: usize| {
        let mut out = Vec::new();
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                if (ny, nx) != (y, x) {
                    out.push((ny, nx));
                }
            }
        }
        out
    };
    let mut label: Vec<usize> = (0..h * w).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                for (ny, nx) in neighbors(y, x) {
                    if v(ny, nx) == v(y, x) && label[ny * w + nx] < label[y * w + x] {
                        label[y * w + x] = label[ny * w + nx];
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut out = Vec::new();
    for root in 0..h * w {
        if label[root] != root {
            continue;
        }
        let value = map.data[root];
        let mut border = Vec::new();
        for i in 0..h * w {
            if label[i] != root {
                continue;
            }
            for (ny, nx) in neighbors(i / w, i % w) {
                if label[ny * w + nx] != root {
                    border.push(v(ny, nx));
                }
            }
        }
        let strict = border.iter().all(|&b| b < value);
        let isolated_ok = !border.is_empty() || h * w == 1;
        if strict && isolated_ok && value >= threshold {
            out.push(Detection {
                x: ((root % w) * map.stride + map.offset) as f64,
                y: ((root / w) * map.stride + map.offset) as f64,
                score: value,
            });
        }
    }
    out
}

/// Descending score, then ascending (y, x).
pub fn canonical(mut d: Vec<Detection>) -> Vec<Detection> {
    d.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.y.partial_cmp(&b.y).unwrap())
            .then(a.x.partial_cmp(&b.x).unwrap())
    });
    d
}

fn d2(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    (ax - bx) * (ax - bx) + (ay - by) * (ay - by)
}

/// Greedy matching as a sweep over every (detection, ground truth) pair
/// within the radius, ordered by detection order, distance, then ground
/// truth index. Returns the matched pairs.
pub fn match_oracle(dets: &[Detection], gts: &[[f64; 2]], radius: f64) -> Vec<(usize, usize)> {
    let mut cand = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let dist = d2(d.x, d.y, g[0], g[1]);
            if dist <= radius * radius {
                cand.push((i, dist, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.partial_cmp(&b.1).unwrap()).then(a.2.cmp(&b.2)));
    let mut det_used = vec![false; dets.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for (i, _, j) in cand {
        if det_used[i] || gt_used[j] {
            continue;
        }
        det_used[i] = true;
        gt_used[j] = true;
        pairs.push((i, j));
    }
    pairs
}

/// Exhaustive check of the greedy contract on tiny instances: walking the
/// detections in order, each match must be the closest free ground truth
/// (ties to the lowest index) and an unmatched detection must have no free
/// ground truth in range.
pub fn greedy_contract_holds(dets: &[Detection], gts: &[[f64; 2]], radius: f64, pairs: &[(usize, usize)]) -> bool {
    let mut free = vec![true; gts.len()];
    for (i, d) in dets.iter().enumerate() {
        let in_range: Vec<usize> = (0..gts.len())
            .filter(|&j| free[j] && d2(d.x, d.y, gts[j][0], gts[j][1]) <= radius * radius)
            .collect();
        let claimed = pairs.iter().find(|p| p.0 == i).map(|p| p.1);
        match claimed {
            None => {
                if !in_range.is_empty() {
                    return false;
                }
            }
            Some(j) => {
                if !free[j] || !in_range.contains(&j) {
                    return false;
                }
                let dj = d2(d.x, d.y, gts[j][0], gts[j][1]);
                for &k in &in_range {
                    let dk = d2(d.x, d.y, gts[k][0], gts[k][1]);
                    if dk < dj || (dk == dj && k < j) {
                        return false;
                    }
                }
                free[j] = false;
            }
        }
    }
    true
}

/// One image worth of ground truth and scored detections.
#[derive(Debug, Clone)]
pub struct ApImage {
    pub gts: Vec<[f64; 2]>,
    pub dets: Vec<Detection>,
}

/// Precision/recall at every unique score, re-matching each image from
/// scratch with only the detections at or above the threshold. Returns
/// (threshold, precision, recall) triples in descending threshold order
/// and the all-points AP.
pub fn ap_sweep_oracle(images: &[ApImage], radius: f64) -> (Vec<(f64, f64, f64)>, f64) {
    let n_gt: usize = images.iter().map(|i| i.gts.len()).sum();
    let mut thresholds: Vec<f32> = images.iter().flat_map(|i| i.dets.iter().map(|d| d.score)).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut points = Vec::new();
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for t in thresholds {
        let (mut tp, mut n) = (0usize, 0usize);
        for img in images {
            let kept = canonical(img.dets.iter().copied().filter(|d| d.score >= t).collect());
            n += kept.len();
            tp += match_oracle(&kept, &img.gts, radius).len();
        }
        let p = tp as f64 / n as f64;
        let r = tp as f64 / n_gt as f64;
        ap += (r - prev_r) * p;
        prev_r = r;
        points.push((t as f64, p, r));
    }
    (points, ap)
}

/// F1 from first principles.
pub fn f1_oracle(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Repeatedly scans all remaining pairs for the best one: highest score
/// sum, then shortest distance, then lexicographically smallest
/// (first point, second point) with points ordered by (y, x).
pub fn ensemble_oracle(a: &[Detection], b: &[Detection], radius: f64) -> Vec<Detection> {
    let mut ua = vec![false; a.len()];
    let mut ub = vec![false; b.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..a.len() {
            for j in 0..b.len() {
                if ua[i] || ub[j] {
                    continue;
                }
                let (p, q) = (a[i], b[j]);
                if d2(p.x, p.y, q.x, q.y) > radius * radius {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bi, bj)) => pair_better(p, q, a[bi], b[bj]),
                };
                if better {
                    best = Some((i, j));
                }
            }
        }
        match best {
            None => break,
            Some((i, j)) => {
                ua[i] = true;
                ub[j] = true;
                let (p, q) = (a[i], b[j]);
                out.push(Detection {
                    x: (p.x + q.x) / 2.0,
                    y: (p.y + q.y) / 2.0,
                    score: ((p.score as f64 + q.score as f64) / 2.0) as f32,
                });
            }
        }
    }
    out
}

fn pair_better(p: Detection, q: Detection, bp: Detection, bq: Detection) -> bool {
    let s = p.score as f64 + q.score as f64;
    let bs = bp.score as f64 + bq.score as f64;
    if s != bs {
        return s > bs;
    }
    let d = d2(p.x, p.y, q.x, q.y);
    let bd = d2(bp.x, bp.y, bq.x, bq.y);
    if d != bd {
        return d < bd;
    }
    let sorted = |u: Detection, v: Detection| {
        let (lo, hi) = if (u.y, u.x) <= (v.y, v.x) { (u, v) } else { (v, u) };
        [lo.y, lo.x, hi.y, hi.x]
    };
    sorted(p, q) < sorted(bp, bq)
}

/// A random number (drawn from `n`) of detections on a coarse integer grid with scores from a small
/// set, so positional and score ties are frequent.
pub fn random_detections(rng: &mut impl Rng, n: Range<usize>, extent: i32, levels: u32) -> Vec<Detection> {
    let n = rng.gen_range(n);
    (0..n)
        .map(|_| Detection {
            x: rng.gen_range(0..extent) as f64 * 4.0,
            y: rng.gen_range(0..extent) as f64 * 4.0,
            score: rng.gen_range(1..=levels) as f32 / levels as f32,
        })
        .collect()
}

pub fn random_points(rng: &mut impl Rng, n: Range<usize>, extent: i32) -> Vec<[f64; 2]> {
    let n = rng.gen_range(n);
    (0..n)
        .map(|_| [rng.gen_range(0..extent) as f64 * 4.0, rng.gen_range(0..extent) as f64 * 4.0])
        .collect()
}

/// A record holding the given mitoses; the file path is never opened.
pub fn record_with(id: &str, domain: &str, points: &[[f64; 2]]) -> ImageRecord {
    ImageRecord {
        id: id.into(),
        file: format!("{id}.png").into(),
        domain: domain.into(),
        width: 512,
        height: 512,
        annotations: points
            .iter()
            .map(|p| Annotation {
                x: p[0],
                y: p[1],
                label: AnnotationLabel::MitoticFigure,
            })
            .collect(),
    }
}

/// Random prediction map with values from `levels` discrete steps.
pub fn random_map(rng: &mut impl Rng, h: usize, w: usize, levels: u32) -> PredictionMap {
    PredictionMap {
        image_id: "m".into(),
        height: h,
        width: w,
        stride: 4,
        offset: 38,
        data: (0..h * w).map(|_| rng.gen_range(0..levels) as f32 / levels as f32).collect(),
    }
}
