use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainStats {
    pub train_images: usize,
    pub val_images: usize,
    pub train_mitoses: usize,
    pub val_mitoses: usize,
}

impl DomainStats {
    pub fn train_mitosis_fraction(&self) -> Option<f64> {
        let total = self.train_mitoses + self.val_mitoses;
        (total > 0).then(|| self.train_mitoses as f64 / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub stats: BTreeMap<String, DomainStats>,
}

impl SplitManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("split serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }
}

/// Per-domain train image counts: largest-remainder apportionment of
/// `round(ratio * N)`, then clamped so any domain with two or more images
/// keeps at least one image on each side.
fn image_quotas(sizes: &[usize], ratio: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = (ratio * total as f64).round() as usize;
    let exact: Vec<f64> = sizes.iter().map(|&n| ratio * n as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = target.saturating_sub(quotas.iter().sum());
    for &d in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        if quotas[d] < sizes[d] && quotas[d] as f64 <= exact[d] {
            quotas[d] += 1;
            left -= 1;
        }
    }
    for (q, &n) in quotas.iter_mut().zip(sizes) {
        if n >= 2 {
            *q = (*q).clamp(1, n - 1);
        }
    }
    quotas
}

/// Domain- and label-stratified train/validation split.
///
/// Within each domain, images are visited by descending mitosis count
/// (seeded tie-break) and each goes to the side furthest below its share of
/// the domain's mitoses, subject to the side's image quota.
pub fn stratified_split(records: &[ImageRecord], ratio: f64, seed: u64) -> Result<SplitManifest> {
    if records.is_empty() {
        return Err(Error::Usage("cannot split an empty record list".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Usage(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut by_domain: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in records {
        by_domain.entry(r.domain.as_str()).or_default().push(r);
    }
    let sizes: Vec<usize> = by_domain.values().map(Vec::len).collect();
    let quotas = image_quotas(&sizes, ratio);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    let mut stats = BTreeMap::new();
    for ((domain, mut images), quota) in by_domain.into_iter().zip(quotas) {
        let keys: Vec<u64> = images.iter().map(|_| rng.gen()).collect();
        let mut idx: Vec<usize> = (0..images.len()).collect();
        idx.sort_by_key(|&i| (std::cmp::Reverse(images[i].mitosis_count()), keys[i]));
        images = idx.into_iter().map(|i| images[i]).collect();

        let n = images.len();
        let total: usize = images.iter().map(|r| r.mitosis_count()).sum();
        let want_train = ratio * total as f64;
        let want_val = total as f64 - want_train;
        let mut s = DomainStats::default();
        for r in images {
            let m = r.mitosis_count();
            let to_train = if s.train_images == quota {
                false
            } else if s.val_images == n - quota {
                true
            } else if total == 0 {
                true
            } else {
                let deficit_train = (want_train - s.train_mitoses as f64) / want_train.max(1e-9);
                let deficit_val = (want_val - s.val_mitoses as f64) / want_val.max(1e-9);
                deficit_train >= deficit_val
            };
            if to_train {
                s.train_images += 1;
                s.train_mitoses += m;
                train_ids.push(r.id.clone());
            } else {
                s.val_images += 1;
                s.val_mitoses += m;
                val_ids.push(r.id.clone());
            }
        }
        stats.insert(domain.to_string(), s);
    }
    Ok(SplitManifest {
        train_ids,
        val_ids,
        stats,
    })
}
