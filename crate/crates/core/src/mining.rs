//! Hard-negative scoring and selection, the subset-size regime search, and
//! merging of stain-screened candidates into a negative pool.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PatchRef, PATCH_SIZE};
use crate::detect::{detect_all, DetectConfig};
use crate::error::{Error, Result};
use crate::eval::dataset_ap;
use crate::nnet::{positive_probability, Model, ModelConfig, ModelWeights};
use crate::train::{train_model, TrainConfig, TrainSet, ValidationSet};

/// Distance below which a screened candidate duplicates an existing ref.
pub const DEDUP_RADIUS: f64 = 12.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredNegative {
    pub patch: PatchRef,
    /// Softmax mitosis probability.
    pub score: f32,
}

/// Scores every ref with the model in inference mode, without
/// augmentation. Output order follows input order.
pub fn score_negatives(model: &mut Model, negatives: &[PatchRef], data: &Dataset) -> Result<Vec<ScoredNegative>> {
    if model.receptive_field() != PATCH_SIZE {
        return Err(Error::Config(format!(
            "scoring needs a {PATCH_SIZE} px receptive field, model has {}",
            model.receptive_field()
        )));
    }
    let mut out = Vec::with_capacity(negatives.len());
    for chunk in negatives.chunks(32) {
        let patches = chunk
            .iter()
            .map(|r| data.patch(r, PATCH_SIZE, 0))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<&[u8]> = patches.iter().map(Vec::as_slice).collect();
        for (r, logits) in chunk.iter().zip(model.forward_patches(&views)?) {
            out.push(ScoredNegative {
                patch: r.clone(),
                score: positive_probability(logits),
            });
        }
    }
    Ok(out)
}

/// Descending score, then ascending (image_id, cy, cx).
pub fn hardness_order(a: &ScoredNegative, b: &ScoredNegative) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.patch.image_id.cmp(&b.patch.image_id))
        .then(a.patch.cy.cmp(&b.patch.cy))
        .then(a.patch.cx.cmp(&b.patch.cx))
}

/// The `k` highest-scoring refs.
pub fn select_hard(scored: &[ScoredNegative], k: usize) -> Result<Vec<PatchRef>> {
    if k > scored.len() {
        return Err(Error::Usage(format!("cannot select {k} of {} negatives", scored.len())));
    }
    let mut idx: Vec<usize> = (0..scored.len()).collect();
    let cmp = |&a: &usize, &b: &usize| hardness_order(&scored[a], &scored[b]);
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_by(cmp);
    Ok(idx.into_iter().map(|i| scored[i].patch.clone()).collect())
}

/// Seeded uniform subset of size `k`.
pub fn select_random(pool: &[PatchRef], k: usize, seed: u64) -> Result<Vec<PatchRef>> {
    if k > pool.len() {
        return Err(Error::Usage(format!("cannot select {k} of {} negatives", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pool.choose_multiple(&mut rng, k).cloned().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Random,
    Hnm,
    /// The full negative pool.
    All,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Random => "random",
            Method::Hnm => "hnm",
            Method::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeCell {
    pub size: usize,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub aps: Vec<f64>,
    pub ap_mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub ap_std: f64,
}

impl RegimeCell {
    pub fn new(size: usize, method: Method, seeds: Vec<u64>, aps: Vec<f64>) -> Self {
        let n = aps.len() as f64;
        let mean = aps.iter().sum::<f64>() / n;
        let std = if aps.len() > 1 {
            (aps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            size,
            method,
            seeds,
            aps,
            ap_mean: mean,
            ap_std: std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSize {
    pub size: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    /// Sorted by size, then method.
    pub cells: Vec<RegimeCell>,
    pub baseline: RegimeCell,
    pub skipped: Vec<SkippedSize>,
}

#[derive(Serialize)]
struct RegimeCsvRow {
    size: usize,
    method: String,
    seed: u64,
    ap: f64,
}

impl RegimeReport {
    pub fn cell(&self, size: usize, method: Method) -> Option<&RegimeCell> {
        self.cells.iter().find(|c| c.size == size && c.method == method)
    }

    /// The hard-negative cell with the highest mean AP (ties: smaller size).
    pub fn best_hnm(&self) -> Option<&RegimeCell> {
        self.cells
            .iter()
            .filter(|c| c.method == Method::Hnm)
            .fold(None, |best: Option<&RegimeCell>, c| match best {
                Some(b) if b.ap_mean >= c.ap_mean => Some(b),
                _ => Some(c),
            })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.cells.iter().map(|c| c.size).collect();
        s.dedup();
        s
    }

    pub fn save(&self, json: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        let json = json.as_ref();
        std::fs::write(json, serde_json::to_string_pretty(self).expect("report serializes"))
            .map_err(|e| Error::io(json, e))?;
        let path = csv_path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        for c in self.cells.iter().chain(std::iter::once(&self.baseline)) {
            for (&seed, &ap) in c.seeds.iter().zip(&c.aps) {
                w.serialize(RegimeCsvRow {
                    size: c.size,
                    method: c.method.to_string(),
                    seed,
                    ap,
                })
                .map_err(|e| Error::io(path, e.into()))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(json: impl AsRef<Path>) -> Result<Self> {
        let json = json.as_ref();
        let text = std::fs::read_to_string(json).map_err(|e| Error::io(json, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(json.display().to_string(), e))
    }
}

/// Subset sizes to try.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sizes {
    List(Vec<usize>),
    /// Geometric grid `base * 2^i` below the pool size, then two rounds of
    /// geometric bisection around the best hard-negative size.
    Auto { base: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeConfig {
    pub sizes: Sizes,
    pub seeds: usize,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub match_radius: f64,
}

/// Positives, the full negative pool and the pixels behind them.
pub struct RegimeData<'a> {
    pub train: &'a Dataset,
    pub positives: &'a [PatchRef],
    pub negatives: &'a [PatchRef],
    pub val: &'a Dataset,
    pub val_refs: &'a [PatchRef],
}

/// Scores the negative pool with the base model and runs the search.
pub fn regime_search(base: &ModelWeights, data: &RegimeData, model_config: &ModelConfig, cfg: &RegimeConfig) -> Result<RegimeReport> {
    let mut model = Model::from_weights(base)?;
    let scored = score_negatives(&mut model, data.negatives, data.train)?;
    regime_search_scored(&scored, data, model_config, cfg)
}

/// Regime search over pre-scored negatives (`scored` must cover
/// `data.negatives`).
pub fn regime_search_scored(
    scored: &[ScoredNegative],
    data: &RegimeData,
    model_config: &ModelConfig,
    cfg: &RegimeConfig,
) -> Result<RegimeReport> {
    if cfg.seeds == 0 {
        return Err(Error::Usage("regime search needs at least one seed".into()));
    }
    let n = data.negatives.len();
    let mut search = Search {
        scored,
        data,
        model_config,
        cfg,
        cells: Vec::new(),
        skipped: Vec::new(),
    };
    match &cfg.sizes {
        Sizes::List(list) => {
            let mut sizes = list.clone();
            sizes.sort_unstable();
            sizes.dedup();
            if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > n) {
                return Err(Error::Usage(format!("subset size {s} outside 1..={n}")));
            }
            for s in sizes {
                search.evaluate_size(s)?;
            }
        }
        Sizes::Auto { base } => {
            if *base == 0 || *base > n {
                return Err(Error::Usage(format!("auto base {base} outside 1..={n}")));
            }
            let mut s = *base;
            while s <= n {
                search.evaluate_size(s)?;
                s *= 2;
            }
            for _ in 0..2 {
                let sizes = search.sizes();
                let Some(best) = search.best_hnm_size() else { break };
                let pos = sizes.iter().position(|&s| s == best).expect("evaluated");
                let mut fresh = Vec::new();
                if pos > 0 {
                    fresh.push(((sizes[pos - 1] as f64 * best as f64).sqrt().round()) as usize);
                }
                if pos + 1 < sizes.len() {
                    fresh.push(((best as f64 * sizes[pos + 1] as f64).sqrt().round()) as usize);
                }
                for f in fresh {
                    if !sizes.contains(&f) {
                        search.evaluate_size(f)?;
                    }
                }
            }
        }
    }
    let baseline_runs = search.train_runs(|_| Ok(data.negatives.to_vec()))?;
    let baseline = match baseline_runs {
        Ok((seeds, aps)) => RegimeCell::new(n, Method::All, seeds, aps),
        Err(reason) => return Err(Error::Usage(format!("all-negatives baseline failed: {reason}"))),
    };
    let mut cells = search.cells;
    cells.sort_by_key(|c| (c.size, c.method));
    Ok(RegimeReport {
        cells,
        baseline,
        skipped: search.skipped,
    })
}

struct Search<'a> {
    scored: &'a [ScoredNegative],
    data: &'a RegimeData<'a>,
    model_config: &'a ModelConfig,
    cfg: &'a RegimeConfig,
    cells: Vec<RegimeCell>,
    skipped: Vec<SkippedSize>,
}

type Runs = std::result::Result<(Vec<u64>, Vec<f64>), String>;

impl Search<'_> {
    fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.cells.iter().map(|c| c.size).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    fn best_hnm_size(&self) -> Option<usize> {
        self.cells
            .iter()
            .filter(|c| c.method == Method::Hnm)
            .fold(None, |best: Option<&RegimeCell>, c| match best {
                Some(b) if b.ap_mean > c.ap_mean || (b.ap_mean == c.ap_mean && b.size < c.size) => Some(b),
                _ => Some(c),
            })
            .map(|c| c.size)
    }

    fn evaluate_size(&mut self, size: usize) -> Result<()> {
        log::info!("regime search: size {size}");
        let hard = select_hard(self.scored, size)?;
        let hnm = self.train_runs(|_| Ok(hard.clone()))?;
        let pool = self.data.negatives;
        let random = self.train_runs(|seed| select_random(pool, size, seed ^ (size as u64).rotate_left(32)))?;
        match (hnm, random) {
            (Ok((s1, a1)), Ok((s2, a2))) => {
                self.cells.push(RegimeCell::new(size, Method::Hnm, s1, a1));
                self.cells.push(RegimeCell::new(size, Method::Random, s2, a2));
            }
            (Err(reason), _) | (_, Err(reason)) => {
                log::warn!("regime search: skipping size {size}: {reason}");
                self.skipped.push(SkippedSize { size, reason });
            }
        }
        Ok(())
    }

    /// One training run per seed on `subset(seed)`; returns validation APs,
    /// or the divergence message of the first failing run.
    fn train_runs(&self, subset: impl Fn(u64) -> Result<Vec<PatchRef>>) -> Result<Runs> {
        let mut seeds = Vec::new();
        let mut aps = Vec::new();
        for s in 0..self.cfg.seeds as u64 {
            let seed = self.cfg.train.seed.wrapping_add(s);
            let mut negatives = subset(seed)?;
            negatives.sort_by(|a, b| (&a.image_id, a.cy, a.cx).cmp(&(&b.image_id, b.cy, b.cx)));
            let tc = TrainConfig {
                seed,
                ..self.cfg.train.clone()
            };
            let outcome = train_model(
                &TrainSet {
                    data: self.data.train,
                    positives: self.data.positives,
                    negatives: &negatives,
                },
                &ValidationSet {
                    data: self.data.val,
                    refs: self.data.val_refs,
                },
                self.model_config,
                &tc,
            );
            let best = match outcome {
                Ok(o) => o.best,
                Err(Error::Divergence { iteration, .. }) => {
                    return Ok(Err(format!("seed {seed} diverged at iteration {iteration}")));
                }
                Err(e) => return Err(e),
            };
            let mut model = Model::from_weights(&best.weights)?;
            let sets = detect_all(&mut model, self.data.val, &self.cfg.detect)?;
            let ap = dataset_ap(&sets, &self.data.val.records, self.cfg.match_radius)?.ap;
            log::info!("  {} negatives, seed {seed}: AP {ap:.4}", negatives.len());
            seeds.push(seed);
            aps.push(ap);
        }
        Ok(Ok((seeds, aps)))
    }
}

/// Appends screened candidates scoring at least `accept_threshold`,
/// skipping any within [`DEDUP_RADIUS`] of a ref already in the list of
/// the same image. Original negatives are kept unchanged and in order.
pub fn merge_screened(negatives: &[PatchRef], screened: &[ScoredNegative], accept_threshold: f32) -> Vec<PatchRef> {
    let mut out = negatives.to_vec();
    let mut by_image: HashMap<String, Vec<(i64, i64)>> = HashMap::new();
    for r in negatives {
        by_image.entry(r.image_id.clone()).or_default().push((r.cx, r.cy));
    }
    let r2 = DEDUP_RADIUS * DEDUP_RADIUS;
    for s in screened.iter().filter(|s| s.score >= accept_threshold) {
        let existing = by_image.entry(s.patch.image_id.clone()).or_default();
        let dup = existing.iter().any(|&(x, y)| {
            let (dx, dy) = ((x - s.patch.cx) as f64, (y - s.patch.cy) as f64);
            dx * dx + dy * dy <= r2
        });
        if !dup {
            existing.push((s.patch.cx, s.patch.cy));
            let mut p = s.patch.clone();
            p.label = crate::data::PatchLabel::Negative;
            out.push(p);
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct RefRow {
    image_id: String,
    cx: i64,
    cy: i64,
    #[serde(default)]
    score: Option<f32>,
}

/// `image_id,cx,cy,score` rows.
pub fn write_scored_csv(path: impl AsRef<Path>, scored: &[ScoredNegative]) -> Result<()> {
    write_rows(
        path.as_ref(),
        scored.iter().map(|s| RefRow {
            image_id: s.patch.image_id.clone(),
            cx: s.patch.cx,
            cy: s.patch.cy,
            score: Some(s.score),
        }),
    )
}

/// `image_id,cx,cy,score` rows with an empty score column.
pub fn write_refs_csv(path: impl AsRef<Path>, refs: &[PatchRef]) -> Result<()> {
    write_rows(
        path.as_ref(),
        refs.iter().map(|r| RefRow {
            image_id: r.image_id.clone(),
            cx: r.cx,
            cy: r.cy,
            score: None,
        }),
    )
}

fn write_rows(path: &Path, rows: impl Iterator<Item = RefRow>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads negative refs written by [`write_refs_csv`] or
/// [`write_scored_csv`]; any score column is ignored.
pub fn read_refs_csv(path: impl AsRef<Path>) -> Result<Vec<PatchRef>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize::<RefRow>()
        .map(|row| {
            let row = row.map_err(|e| Error::parse(path.display().to_string(), e))?;
            Ok(PatchRef::new(row.image_id, row.cx, row.cy, crate::data::PatchLabel::Negative))
        })
        .collect()
}
