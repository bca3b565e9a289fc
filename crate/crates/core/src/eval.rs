//! Greedy detection matching, F1, all-points average precision and
//! per-domain reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Annotation, AnnotationLabel, ImageRecord};
use crate::detect::{Detection, DetectionSet};
use crate::error::{Error, Result};

/// Default matching radius in input pixels.
pub const DEFAULT_MATCH_RADIUS: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// (detection index, ground-truth index) pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Per detection, whether it was matched.
    pub matched: Vec<bool>,
}

/// Greedy matching: detections are visited in the given order, which for a
/// [`DetectionSet`] is descending score. Each takes the nearest unmatched
/// ground truth within `radius` (ties: lowest index).
pub fn match_points(dets: &[Detection], gts: &[[f64; 2]], radius: f64) -> MatchResult {
    let r2 = radius * radius;
    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult {
        matched: vec![false; dets.len()],
        ..Default::default()
    };
    for (i, d) in dets.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let dist = (d.x - g[0]).powi(2) + (d.y - g[1]).powi(2);
            if dist <= r2 && best.map_or(true, |(bd, _)| dist < bd) {
                best = Some((dist, j));
            }
        }
        if let Some((_, j)) = best {
            taken[j] = true;
            out.matched[i] = true;
            out.pairs.push((i, j));
        }
    }
    out.tp = out.pairs.len();
    out.fp = dets.len() - out.tp;
    out.fn_ = gts.len() - out.tp;
    out
}

fn mitosis_points(gts: &[Annotation]) -> Vec<[f64; 2]> {
    gts.iter()
        .filter(|a| a.label == AnnotationLabel::MitoticFigure)
        .map(|a| [a.x, a.y])
        .collect()
}

/// Matches against the mitotic-figure annotations in `gts`; other labels
/// are ignored.
pub fn match_detections(dets: &DetectionSet, gts: &[Annotation], radius: f64) -> Result<MatchResult> {
    if !(radius > 0.0) {
        return Err(Error::Usage(format!("match radius {radius} must be positive")));
    }
    Ok(match_points(&dets.detections, &mitosis_points(gts), radius))
}

pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per unique score, in descending threshold order.
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

impl PrCurve {
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_csv(path.as_ref(), &self.points)
    }
}

/// A detection score together with whether it was matched when matching
/// at threshold zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredMatch {
    pub score: f64,
    pub tp: bool,
}

pub fn scored_matches(dets: &DetectionSet, m: &MatchResult) -> Vec<ScoredMatch> {
    dets.detections
        .iter()
        .zip(&m.matched)
        .map(|(d, &tp)| ScoredMatch { score: d.score as f64, tp })
        .collect()
}

/// All-points AP over pooled matches: thresholds at every unique score,
/// `AP = sum (r_i - r_{i-1}) p_i` in descending threshold order.
///
/// Greedy score-ordered matching is prefix-stable, so the matching at any
/// threshold equals the threshold-zero matching restricted to detections
/// at or above it.
pub fn average_precision(matches: &[ScoredMatch], n_gt: usize) -> Result<PrCurve> {
    if n_gt == 0 {
        return Err(Error::Usage("average precision needs at least one ground truth".into()));
    }
    let mut sorted = matches.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = Vec::new();
    let (mut tp, mut n) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            tp += sorted[i].tp as usize;
            n += 1;
            i += 1;
        }
        let precision = tp as f64 / n as f64;
        let recall = tp as f64 / n_gt as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PrPoint {
            threshold: t,
            precision,
            recall,
        });
    }
    Ok(PrCurve { points, ap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub rows: Vec<DomainRow>,
    /// Pooled over all images.
    pub overall: DomainRow,
}

impl DomainReport {
    pub fn save(&self, json: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        let json = json.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(json, text).map_err(|e| Error::io(json, e))?;
        let mut rows = self.rows.clone();
        rows.push(self.overall.clone());
        write_csv(csv_path.as_ref(), &rows)
    }
}

/// Per-domain F1 from per-image match results. Every domain in `records`
/// gets a row, including ones without results.
pub fn per_domain_report(results: &[(String, MatchResult)], records: &[ImageRecord]) -> Result<DomainReport> {
    let domain_of: BTreeMap<&str, &str> = records.iter().map(|r| (r.id.as_str(), r.domain.as_str())).collect();
    let mut counts: BTreeMap<&str, [usize; 3]> = records.iter().map(|r| (r.domain.as_str(), [0; 3])).collect();
    for (id, m) in results {
        let d = domain_of
            .get(id.as_str())
            .ok_or_else(|| Error::Usage(format!("image `{id}` has no manifest record")))?;
        let c = counts.get_mut(d).expect("domain registered");
        c[0] += m.tp;
        c[1] += m.fp;
        c[2] += m.fn_;
    }
    let row = |domain: &str, c: [usize; 3]| DomainRow {
        domain: domain.to_string(),
        tp: c[0],
        fp: c[1],
        fn_: c[2],
        f1: f1(c[0], c[1], c[2]),
    };
    let rows: Vec<DomainRow> = counts.iter().map(|(d, c)| row(d, *c)).collect();
    let total = counts.values().fold([0; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]);
    Ok(DomainReport {
        rows,
        overall: row("overall", total),
    })
}

/// Matches every detection set against its image's annotations.
pub fn match_all(sets: &[DetectionSet], records: &[ImageRecord], radius: f64) -> Result<Vec<(String, MatchResult)>> {
    let by_id: BTreeMap<&str, &ImageRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    sets.iter()
        .map(|s| {
            let r = by_id
                .get(s.image_id.as_str())
                .ok_or_else(|| Error::Usage(format!("detections for unknown image `{}`", s.image_id)))?;
            Ok((s.image_id.clone(), match_detections(s, &r.annotations, radius)?))
        })
        .collect()
}

/// Pooled AP of detection sets against the records' mitoses.
pub fn dataset_ap(sets: &[DetectionSet], records: &[ImageRecord], radius: f64) -> Result<PrCurve> {
    let results = match_all(sets, records, radius)?;
    let mut all = Vec::new();
    for (set, (_, m)) in sets.iter().zip(&results) {
        all.extend(scored_matches(set, m));
    }
    let ids: std::collections::BTreeSet<&str> = sets.iter().map(|s| s.image_id.as_str()).collect();
    let n_gt = records
        .iter()
        .filter(|r| ids.contains(r.id.as_str()))
        .map(ImageRecord::mitosis_count)
        .sum();
    average_precision(&all, n_gt)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
