//! Balanced patch training with SGD, momentum, weight decay and a cyclic
//! cosine learning rate; the checkpoint with the lowest validation loss is
//! retained.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy, AugPolicy};
use crate::data::{Dataset, PatchRef, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::nnet::{rgb_to_input, GFeatureMap, Mode, Model, ModelConfig, ModelWeights, Param};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub cycle: usize,
    pub max_iters: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub policy: PolicySpec,
    /// Extraction margin around each patch for shift/zoom headroom.
    pub margin: usize,
    /// Minimum distance of a negative center from every mitosis.
    pub min_dist: f64,
    /// Spacing of the negative center grid.
    pub negative_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-scale schedule: 150k iterations of batch 128, 10k-iteration cycles.
    pub fn paper() -> Self {
        Self {
            batch: 128,
            cycle: 10_000,
            max_iters: 150_000,
            eval_every: 1_000,
            ..Self::desk()
        }
    }

    pub fn desk() -> Self {
        Self {
            lr_max: 0.03,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch: 16,
            cycle: 200,
            max_iters: 2000,
            eval_every: 100,
            seed: 0,
            policy: PolicySpec::Preset("A".into()),
            margin: 12,
            min_dist: 25.0,
            negative_stride: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.batch % 2 != 0 {
            return Err(Error::Config(format!("batch {} must be even and positive", self.batch)));
        }
        if self.cycle == 0 || (self.max_iters > 0 && self.cycle > self.max_iters) {
            return Err(Error::Config(format!(
                "cycle {} must be positive and at most max_iters {}",
                self.cycle, self.max_iters
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if !(self.lr_max.is_finite() && self.lr_min.is_finite() && self.lr_min <= self.lr_max) {
            return Err(Error::Config("learning rate bounds must satisfy lr_min <= lr_max".into()));
        }
        if self.margin < crate::augment::MIN_MARGIN {
            return Err(Error::Config(format!("margin must be at least {}", crate::augment::MIN_MARGIN)));
        }
        self.policy.resolve()?.validate()
    }
}

/// An augmentation policy given by preset name ("A", "B", "none") or
/// spelled out in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicySpec {
    Preset(String),
    Custom(AugPolicy),
}

impl PolicySpec {
    pub fn resolve(&self) -> Result<AugPolicy> {
        match self {
            PolicySpec::Preset(name) => AugPolicy::preset(name),
            PolicySpec::Custom(p) => Ok(p.clone()),
        }
    }
}

/// Cosine annealing with warm restarts every `cycle` iterations.
pub fn lr_at(iter: usize, config: &TrainConfig) -> f64 {
    let t = (iter % config.cycle) as f64 / config.cycle as f64;
    config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `batch / 2` positives followed by `batch / 2` negatives, each drawn
/// uniformly with replacement.
pub fn balanced_sampler(pos: &[PatchRef], neg: &[PatchRef], batch: usize, rng: &mut impl Rng) -> Result<Vec<PatchRef>> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Usage(format!(
            "balanced sampling needs both classes ({} positives, {} negatives)",
            pos.len(),
            neg.len()
        )));
    }
    if batch % 2 != 0 {
        return Err(Error::Usage(format!("batch {batch} is odd")));
    }
    let half = batch / 2;
    let mut out = Vec::with_capacity(batch);
    out.extend((0..half).map(|_| pos[rng.gen_range(0..pos.len())].clone()));
    out.extend((0..half).map(|_| neg[rng.gen_range(0..neg.len())].clone()));
    Ok(out)
}

/// Mean two-class cross-entropy and its gradient with respect to the
/// logits. `labels[i]` is true for the positive class (logit index 1).
pub fn cross_entropy(logits: &[[f32; 2]], labels: &[bool]) -> (f64, Vec<[f32; 2]>) {
    assert_eq!(logits.len(), labels.len());
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, &y) in logits.iter().zip(labels) {
        let (a, b) = (l[0] as f64, l[1] as f64);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        let target = if y { b } else { a };
        loss += lse - target;
        let p1 = (b - lse).exp();
        let p0 = (a - lse).exp();
        let (t0, t1) = if y { (0.0, 1.0) } else { (1.0, 0.0) };
        grads.push([((p0 - t0) / n) as f32, ((p1 - t1) / n) as f32]);
    }
    (loss / n, grads)
}

/// One momentum step on a flat tensor:
/// `v = momentum * v - lr * (g + wd * w); w += v`.
pub fn sgd_update(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f64, momentum: f64, weight_decay: f64) {
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        let step = momentum * *vi as f64 - lr * (gi as f64 + weight_decay * *wi as f64);
        *vi = step as f32;
        *wi = (*wi as f64 + step) as f32;
    }
}

/// Momentum buffers for every trainable parameter of a model.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one step to every trainable parameter. Batch-norm scale and
    /// shift are updated without weight decay. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(&mut self, model: &mut Model, lr: f64, config: &TrainConfig) -> Result<()> {
        let mut bad = None;
        model.visit_params(&mut |p| {
            if bad.is_none() && p.kind.trainable() && !p.grad.iter().all(|g| g.is_finite()) {
                bad = Some(p.name.clone());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFiniteGradient(name));
        }
        let mut i = 0;
        let velocity = &mut self.velocity;
        model.visit_params_mut(&mut |p: &mut Param| {
            if !p.kind.trainable() {
                return;
            }
            if velocity.len() <= i {
                velocity.push(vec![0.0; p.value.len()]);
            }
            let wd = if p.kind.decays() { config.weight_decay } else { 0.0 };
            sgd_update(&mut p.value, &p.grad, &mut velocity[i], lr, config.momentum, wd);
            i += 1;
        });
        Ok(())
    }
}

/// Best-so-far training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub iteration: usize,
    pub val_loss: f64,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct CheckpointSidecar {
    iteration: usize,
    val_loss: f64,
    config_fingerprint: String,
    rng: ChaCha8Rng,
}

impl Checkpoint {
    /// Writes the weights to `path` and a JSON sidecar next to it
    /// (`<path>.json`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.weights.save(path)?;
        let sidecar = CheckpointSidecar {
            iteration: self.iteration,
            val_loss: self.val_loss,
            config_fingerprint: self.weights.fingerprint.clone(),
            rng: self.rng.clone(),
        };
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let weights = ModelWeights::load(path)?;
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let s: CheckpointSidecar = serde_json::from_str(&text).map_err(|e| Error::parse(side.display().to_string(), e))?;
        if s.config_fingerprint != weights.fingerprint {
            return Err(Error::Config(format!("{} does not belong to {}", side.display(), path.display())));
        }
        Ok(Self {
            weights,
            iteration: s.iteration,
            val_loss: s.val_loss,
            rng: s.rng,
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    /// Mean training loss over the iterations since the previous row.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
}

pub fn write_log_csv(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// All validation positives plus an equally sized, seeded sample of the
/// validation negative pool.
pub fn validation_set(val: &Dataset, config: &TrainConfig) -> Vec<PatchRef> {
    let mut refs = val.positive_refs();
    let mut negatives = val.negative_pool(config.min_dist, config.negative_stride);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a1d_a7e5);
    negatives.shuffle(&mut rng);
    negatives.truncate(refs.len());
    refs.extend(negatives);
    refs
}

/// Cross-entropy of `refs` in eval mode without augmentation.
pub fn validation_loss(model: &mut Model, data: &Dataset, refs: &[PatchRef]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Usage("validation set is empty".into()));
    }
    let mut total = 0.0;
    for chunk in refs.chunks(64) {
        let patches = chunk
            .iter()
            .map(|r| data.patch(r, PATCH_SIZE, 0))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<&[u8]> = patches.iter().map(Vec::as_slice).collect();
        let x = rgb_to_input(&views, PATCH_SIZE, PATCH_SIZE)?;
        let y = model.forward(&x, Mode::Infer)?;
        let logits: Vec<[f32; 2]> = (0..chunk.len()).map(|b| [y.data[2 * b], y.data[2 * b + 1]]).collect();
        let labels: Vec<bool> = chunk.iter().map(|r| r.label == crate::data::PatchLabel::Positive).collect();
        total += cross_entropy(&logits, &labels).0 * chunk.len() as f64;
    }
    Ok(total / refs.len() as f64)
}

/// Training inputs: pixels plus the patch refs to sample from.
pub struct TrainSet<'a> {
    pub data: &'a Dataset,
    pub positives: &'a [PatchRef],
    pub negatives: &'a [PatchRef],
}

pub struct ValidationSet<'a> {
    pub data: &'a Dataset,
    pub refs: &'a [PatchRef],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Runs `config.max_iters` SGD iterations from a fresh model seeded with
/// `config.seed`. Validation loss is computed before the first update,
/// every `eval_every` iterations and after the last one.
pub fn train_model(train: &TrainSet, val: &ValidationSet, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if model_config.receptive_field != PATCH_SIZE {
        return Err(Error::Config(format!(
            "patch training needs a {PATCH_SIZE} px receptive field, config has {}",
            model_config.receptive_field
        )));
    }
    let policy = config.policy.resolve()?;
    let mut model = Model::new(model_config.clone(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new();
    let mut log = Vec::new();

    let first = validation_loss(&mut model, val.data, val.refs)?;
    let mut best = Checkpoint {
        weights: model.weights(),
        iteration: 0,
        val_loss: first,
        rng: rng.clone(),
    };
    log.push(LogRow {
        iter: 0,
        lr: lr_at(0, config),
        train_loss: None,
        val_loss: first,
    });

    let divergence = |iteration: usize, best: &Checkpoint| Error::Divergence {
        iteration,
        last_good_iteration: best.iteration,
        last_good: Box::new(best.clone()),
    };

    let (mut window_loss, mut window_n) = (0.0, 0usize);
    for iter in 0..config.max_iters {
        let lr = lr_at(iter, config);
        let refs = balanced_sampler(train.positives, train.negatives, config.batch, &mut rng)?;
        let mut patches = Vec::with_capacity(refs.len());
        for r in &refs {
            let raw = train.data.patch(r, PATCH_SIZE, config.margin)?;
            patches.push(apply_policy(&raw, &policy, &mut rng)?);
        }
        let views: Vec<&[u8]> = patches.iter().map(Vec::as_slice).collect();
        let x = rgb_to_input(&views, PATCH_SIZE, PATCH_SIZE)?;
        let y = model.forward(&x, Mode::Train)?;
        let logits: Vec<[f32; 2]> = (0..refs.len()).map(|b| [y.data[2 * b], y.data[2 * b + 1]]).collect();
        let labels: Vec<bool> = refs.iter().map(|r| r.label == crate::data::PatchLabel::Positive).collect();
        let (loss, grads) = cross_entropy(&logits, &labels);
        if !loss.is_finite() {
            return Err(divergence(iter, &best));
        }
        let dlogits = GFeatureMap::from_vec(refs.len(), 1, 2, 1, 1, grads.into_iter().flatten().collect())?;
        model.zero_grad();
        model.backward_params(&dlogits)?;
        match sgd.step(&mut model, lr, config) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient(name)) => {
                log::error!("non-finite gradient in `{name}` at iteration {iter}");
                return Err(divergence(iter, &best));
            }
            Err(e) => return Err(e),
        }
        window_loss += loss;
        window_n += 1;

        let done = iter + 1;
        if done % config.eval_every == 0 || done == config.max_iters {
            let val_loss = validation_loss(&mut model, val.data, val.refs)?;
            if !val_loss.is_finite() {
                return Err(divergence(done, &best));
            }
            log.push(LogRow {
                iter: done,
                lr: lr_at(done, config),
                train_loss: Some(window_loss / window_n as f64),
                val_loss,
            });
            log::info!("iter {done}: train {:.4} val {:.4}", window_loss / window_n as f64, val_loss);
            (window_loss, window_n) = (0.0, 0);
            if val_loss < best.val_loss {
                best = Checkpoint {
                    weights: model.weights(),
                    iteration: done,
                    val_loss,
                    rng: rng.clone(),
                };
            }
        }
    }
    Ok(TrainOutcome { best, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PatchLabel;

    #[test]
    fn schedule_closed_forms() {
        let c = TrainConfig {
            cycle: 10_000,
            max_iters: 150_000,
            ..TrainConfig::desk()
        };
        assert_eq!(lr_at(0, &c), 0.03);
        assert!((lr_at(5_000, &c) - 0.015).abs() < 1e-15);
        assert_eq!(lr_at(10_000, &c), 0.03);
    }

    #[test]
    fn sampler_splits_classes() {
        let pos = vec![PatchRef::new("a", 1, 1, PatchLabel::Positive)];
        let neg: Vec<_> = (0..5).map(|i| PatchRef::new("a", i, 9, PatchLabel::Negative)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = balanced_sampler(&pos, &neg, 128, &mut rng).unwrap();
        assert_eq!(b.iter().filter(|r| r.label == PatchLabel::Positive).count(), 64);
        assert!(b[..64].iter().all(|r| *r == pos[0]));
        assert!(balanced_sampler(&[], &neg, 4, &mut rng).is_err());
    }

    #[test]
    fn zero_gradient_step_only_decays() {
        let mut w = vec![1.0f32, -2.0];
        let mut v = vec![0.0f32; 2];
        sgd_update(&mut w, &[0.0, 0.0], &mut v, 0.1, 0.9, 1e-2);
        assert_eq!(w, vec![(1.0f64 - 0.1 * 1e-2) as f32, (-2.0f64 + 0.1 * 2e-2) as f32]);
    }

    #[test]
    fn invalid_batch_rejected() {
        let c = TrainConfig {
            batch: 15,
            ..TrainConfig::desk()
        };
        assert!(c.validate().is_err());
    }
}
