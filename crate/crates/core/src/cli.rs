//! Command-line front end. Every subcommand reads files, writes files into
//! `--out` and echoes the fully resolved configuration there as
//! `resolved_config.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::synth::{generate_synthetic_dataset, SynthSpec};
use crate::data::{load_manifest, save_manifest, stratified_split, Annotation, AnnotationLabel, Dataset, ImageRecord, SplitManifest};
use crate::detect::{
    calibrate_threshold, dense_forward, detect, detect_all, ensemble_agreement, read_detections_csv,
    write_detections_csv, Calibration, DetectConfig, DetectionSet,
};
use crate::error::{Error, Result};
use crate::eval::{average_precision, match_all, per_domain_report, scored_matches, DEFAULT_MATCH_RADIUS};
use crate::mining::{
    merge_screened, read_refs_csv, regime_search_scored, score_negatives, select_hard, write_refs_csv, write_scored_csv,
    RegimeConfig, RegimeData, ScoredNegative, Sizes,
};
use crate::nnet::{Model, ModelConfig};
use crate::stain::{screen_candidates, StainConfig};
use crate::train::{train_model, validation_set, write_log_csv, PolicySpec, TrainConfig, TrainSet, ValidationSet};

#[derive(Debug, Parser)]
#[command(name = "mitodet", version, about = "Rotation-invariant mitosis detection pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for tiled inference.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single-threaded numerics for byte-identical outputs.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled dataset plus unlabeled screening images.
    Synth,
    /// Domain-stratified train/validation split of a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train a patch classifier on the train side of a split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Negative refs CSV (image_id,cx,cy[,score]); default: full grid pool.
        #[arg(long)]
        negatives: Option<PathBuf>,
        /// Extra manifest whose images back refs in --negatives.
        #[arg(long)]
        extra_manifest: Option<PathBuf>,
    },
    /// Score the training negative pool with a base model.
    MineHard {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Also write the top-k hardest negatives.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Validation AP of hard-negative versus random subsets per size.
    RegimeSearch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Comma-separated subset sizes.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Geometric grid plus bisection instead of fixed sizes.
        #[arg(long)]
        auto: bool,
    },
    /// Find stain-outlier candidates in (unlabeled) images.
    StainScreen {
        #[arg(long)]
        manifest: PathBuf,
        /// Score candidates with this model and accept by threshold.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Existing negatives to merge accepted candidates into.
        #[arg(long)]
        negatives: Option<PathBuf>,
        #[arg(long)]
        accept: Option<f32>,
    },
    /// Dense inference and local-maxima detection.
    Infer {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Subset::Val)]
        subset: Subset,
        #[arg(long)]
        threshold: Option<f32>,
        /// calibration.json written by `calibrate`.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Also write raw probability maps.
        #[arg(long)]
        dump_maps: bool,
    },
    /// Choose the detection threshold maximizing validation F1.
    Calibrate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Agreement of two detection CSVs.
    Ensemble { a: PathBuf, b: PathBuf },
    /// Match detections against annotations; per-domain F1 and AP.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Subset::Val)]
        subset: Subset,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Split { .. } => "split",
            Command::Train { .. } => "train",
            Command::MineHard { .. } => "mine-hard",
            Command::RegimeSearch { .. } => "regime-search",
            Command::StainScreen { .. } => "stain-screen",
            Command::Infer { .. } => "infer",
            Command::Calibrate { .. } => "calibrate",
            Command::Ensemble { .. } => "ensemble",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

/// Which side of a split to use. Without `--split`, all images are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub split_ratio: f64,
    pub synth: SynthSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            split_ratio: 0.8,
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// "desk" or "paper-like"; ignored when `layout` is given.
    pub preset: String,
    pub layout: Option<ModelConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            layout: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let c = match &self.layout {
            Some(c) => c.clone(),
            None => ModelConfig::preset(&self.preset)?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    /// Overrides `train.policy` when present.
    pub policy: Option<PolicySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningSection {
    pub sizes: Vec<usize>,
    /// Grid base for `--auto`; default is a sixteenth of the pool.
    pub auto_base: Option<usize>,
    pub seeds: usize,
    /// Training budget of each regime-search run.
    pub regime_iters: usize,
    pub regime_batch: usize,
    /// Minimum model score for a stain-screened candidate to be kept.
    pub accept_threshold: f32,
}

impl Default for MiningSection {
    fn default() -> Self {
        Self {
            sizes: vec![250, 500, 1000, 2000],
            auto_base: None,
            seeds: 3,
            regime_iters: 300,
            regime_batch: 16,
            accept_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub match_radius: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            match_radius: DEFAULT_MATCH_RADIUS,
        }
    }
}

/// Every field is optional in JSON; missing ones take the defaults below.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Overrides `train.seed`; `--seed` overrides both.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub augment: AugmentSection,
    pub mining: MiningSection,
    pub stain: StainConfig,
    pub detect: DetectConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            context: context.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Applies command-line overrides and cross-section settings.
    pub fn resolve(mut self, common: &Common) -> Result<Self> {
        if let Some(s) = common.seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        if let Some(p) = &self.augment.policy {
            self.train.policy = p.clone();
        }
        if let Some(t) = common.threads {
            self.detect.threads = t.max(1);
        }
        if common.deterministic {
            self.detect.threads = 1;
        }
        self.data.synth.validate()?;
        self.train.validate()?;
        self.model.resolve()?;
        if !(self.eval.match_radius > 0.0) {
            return Err(Error::Config("eval.match_radius must be positive".into()));
        }
        if self.mining.seeds == 0 {
            return Err(Error::Config("mining.seeds must be positive".into()));
        }
        Ok(self)
    }
}

#[derive(Serialize)]
struct Resolved<'a> {
    command: &'a str,
    seed: u64,
    deterministic: bool,
    config: &'a RunConfig,
}

/// Process exit code for an error: 1 for invalid input or configuration,
/// 2 for failures while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Parse { .. } => 1,
        _ => 2,
    }
}

/// Parses arguments, runs the subcommand and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn require_file(flag: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{flag}: no such file `{}`", path.display())))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let base = match &cli.common.config {
        Some(p) => {
            require_file("--config", p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    let cfg = base.resolve(&cli.common)?;
    let out = cli
        .common
        .out
        .clone()
        .ok_or_else(|| Error::Usage("--out is required".into()))?;
    check_inputs(&cli.command)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let resolved = Resolved {
        command: cli.command.name(),
        seed: cfg.seed,
        deterministic: cli.common.deterministic,
        config: &cfg,
    };
    write_json(&out.join("resolved_config.json"), &resolved)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &out),
        Command::Split { manifest } => cmd_split(&cfg, &out, manifest),
        Command::Train {
            manifest,
            split,
            negatives,
            extra_manifest,
        } => cmd_train(&cfg, &out, manifest, split, negatives.as_deref(), extra_manifest.as_deref()),
        Command::MineHard { manifest, split, weights, k } => cmd_mine_hard(&cfg, &out, manifest, split, weights, *k),
        Command::RegimeSearch {
            manifest,
            split,
            weights,
            sizes,
            seeds,
            auto,
        } => cmd_regime(&cfg, &out, manifest, split, weights, sizes.clone(), *seeds, *auto),
        Command::StainScreen {
            manifest,
            weights,
            negatives,
            accept,
        } => cmd_stain(&cfg, &out, manifest, weights.as_deref(), negatives.as_deref(), *accept),
        Command::Infer {
            manifest,
            weights,
            split,
            subset,
            threshold,
            calibration,
            dump_maps,
        } => cmd_infer(
            &cfg,
            &out,
            manifest,
            weights,
            split.as_deref(),
            *subset,
            *threshold,
            calibration.as_deref(),
            *dump_maps,
        ),
        Command::Calibrate { manifest, split, weights } => cmd_calibrate(&cfg, &out, manifest, split, weights),
        Command::Ensemble { a, b } => cmd_ensemble(&cfg, &out, a, b),
        Command::Evaluate {
            manifest,
            detections,
            split,
            subset,
        } => cmd_evaluate(&cfg, &out, manifest, detections, split.as_deref(), *subset),
    }
}

fn check_inputs(cmd: &Command) -> Result<()> {
    let mut files: Vec<(&str, &Path)> = Vec::new();
    match cmd {
        Command::Synth => {}
        Command::Split { manifest } => files.push(("--manifest", manifest)),
        Command::Train {
            manifest,
            split,
            negatives,
            extra_manifest,
        } => {
            files.push(("--manifest", manifest));
            files.push(("--split", split));
            if let Some(p) = negatives {
                files.push(("--negatives", p));
            }
            if let Some(p) = extra_manifest {
                files.push(("--extra-manifest", p));
            }
        }
        Command::MineHard {
            manifest, split, weights, ..
        }
        | Command::RegimeSearch {
            manifest, split, weights, ..
        }
        | Command::Calibrate { manifest, split, weights } => {
            files.push(("--manifest", manifest));
            files.push(("--split", split));
            files.push(("--weights", weights));
        }
        Command::StainScreen {
            manifest,
            weights,
            negatives,
            ..
        } => {
            files.push(("--manifest", manifest));
            if let Some(p) = weights {
                files.push(("--weights", p));
            }
            if let Some(p) = negatives {
                files.push(("--negatives", p));
            }
        }
        Command::Infer {
            manifest,
            weights,
            split,
            calibration,
            ..
        } => {
            files.push(("--manifest", manifest));
            files.push(("--weights", weights));
            if let Some(p) = split {
                files.push(("--split", p));
            }
            if let Some(p) = calibration {
                files.push(("--calibration", p));
            }
        }
        Command::Ensemble { a, b } => {
            files.push(("A", a));
            files.push(("B", b));
        }
        Command::Evaluate {
            manifest,
            detections,
            split,
            ..
        } => {
            files.push(("--manifest", manifest));
            files.push(("--detections", detections));
            if let Some(p) = split {
                files.push(("--split", p));
            }
        }
    }
    files.into_iter().try_for_each(|(flag, p)| require_file(flag, p))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Records of `manifest` restricted to one side of an optional split.
fn select_records(manifest: &Path, split: Option<&Path>, subset: Subset) -> Result<Vec<ImageRecord>> {
    let records = load_manifest(manifest)?;
    let Some(split) = split else { return Ok(records) };
    let s = SplitManifest::load(split)?;
    let ids: Vec<&String> = match subset {
        Subset::Train => s.train_ids.iter().collect(),
        Subset::Val => s.val_ids.iter().collect(),
        Subset::All => s.train_ids.iter().chain(&s.val_ids).collect(),
    };
    let by_id: BTreeMap<&str, &ImageRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    ids.into_iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::Usage(format!("--split names image `{id}` missing from --manifest")))
        })
        .collect()
}

fn load_side(manifest: &Path, split: &Path, subset: Subset) -> Result<Dataset> {
    Dataset::load(select_records(manifest, Some(split), subset)?)
}

fn load_model(weights: &Path) -> Result<Model> {
    Model::from_weights(&crate::nnet::ModelWeights::load(weights)?)
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (summary, paths) = generate_synthetic_dataset(&cfg.data.synth, cfg.seed, out)?;
    log::info!(
        "wrote {} images ({} mitoses, {} impostors) to {}",
        summary.images.len(),
        summary.total_positives,
        summary.total_impostors,
        paths.manifest.display()
    );
    Ok(())
}

fn cmd_split(cfg: &RunConfig, out: &Path, manifest: &Path) -> Result<()> {
    let records = load_manifest(manifest)?;
    let split = stratified_split(&records, cfg.data.split_ratio, cfg.seed)?;
    split.save(out.join("split.json"))
}

fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Path,
    split: &Path,
    negatives: Option<&Path>,
    extra: Option<&Path>,
) -> Result<()> {
    let model_cfg = cfg.model.resolve()?;
    let mut train = load_side(manifest, split, Subset::Train)?;
    let val = load_side(manifest, split, Subset::Val)?;
    let positives = train.positive_refs();
    let negs = match negatives {
        Some(p) => read_refs_csv(p)?,
        None => train.negative_pool(cfg.train.min_dist, cfg.train.negative_stride),
    };
    if let Some(p) = extra {
        train = train.merged(&Dataset::load(load_manifest(p)?)?)?;
    }
    if let Some(r) = negs.iter().find(|r| train.image(&r.image_id).is_none()) {
        return Err(Error::Usage(format!(
            "--negatives refers to image `{}` that is neither in the train split nor in --extra-manifest",
            r.image_id
        )));
    }
    let val_refs = validation_set(&val, &cfg.train);
    let outcome = train_model(
        &TrainSet {
            data: &train,
            positives: &positives,
            negatives: &negs,
        },
        &ValidationSet {
            data: &val,
            refs: &val_refs,
        },
        &model_cfg,
        &cfg.train,
    );
    match outcome {
        Ok(o) => {
            write_log_csv(out.join("train_log.csv"), &o.log)?;
            o.best.save(out.join("model.gnet"))?;
            log::info!("best checkpoint at iteration {} (val loss {:.4})", o.best.iteration, o.best.val_loss);
            Ok(())
        }
        Err(Error::Divergence {
            iteration,
            last_good_iteration,
            last_good,
        }) => {
            last_good.save(out.join("last_good.gnet"))?;
            Err(Error::Divergence {
                iteration,
                last_good_iteration,
                last_good,
            })
        }
        Err(e) => Err(e),
    }
}

fn cmd_mine_hard(cfg: &RunConfig, out: &Path, manifest: &Path, split: &Path, weights: &Path, k: Option<usize>) -> Result<()> {
    let train = load_side(manifest, split, Subset::Train)?;
    let mut model = load_model(weights)?;
    let pool = train.negative_pool(cfg.train.min_dist, cfg.train.negative_stride);
    let scored = score_negatives(&mut model, &pool, &train)?;
    write_scored_csv(out.join("scored_negatives.csv"), &scored)?;
    if let Some(k) = k {
        write_refs_csv(out.join("hard_negatives.csv"), &select_hard(&scored, k)?)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_regime(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Path,
    split: &Path,
    weights: &Path,
    sizes: Option<Vec<usize>>,
    seeds: Option<usize>,
    auto: bool,
) -> Result<()> {
    let model_cfg = cfg.model.resolve()?;
    let train = load_side(manifest, split, Subset::Train)?;
    let val = load_side(manifest, split, Subset::Val)?;
    let positives = train.positive_refs();
    let negatives = train.negative_pool(cfg.train.min_dist, cfg.train.negative_stride);
    let val_refs = validation_set(&val, &cfg.train);
    let mut model = load_model(weights)?;
    let scored = score_negatives(&mut model, &negatives, &train)?;
    let sizes = if auto {
        Sizes::Auto {
            base: cfg.mining.auto_base.unwrap_or((negatives.len() / 16).max(1)),
        }
    } else {
        Sizes::List(sizes.unwrap_or_else(|| cfg.mining.sizes.clone()))
    };
    let iters = cfg.mining.regime_iters;
    let rc = RegimeConfig {
        sizes,
        seeds: seeds.unwrap_or(cfg.mining.seeds),
        train: TrainConfig {
            max_iters: iters,
            cycle: cfg.train.cycle.min(iters).max(1),
            batch: cfg.mining.regime_batch,
            eval_every: (iters / 4).max(1),
            ..cfg.train.clone()
        },
        detect: cfg.detect.clone(),
        match_radius: cfg.eval.match_radius,
    };
    rc.train.validate()?;
    let data = RegimeData {
        train: &train,
        positives: &positives,
        negatives: &negatives,
        val: &val,
        val_refs: &val_refs,
    };
    let report = regime_search_scored(&scored, &data, &model_cfg, &rc)?;
    report.save(out.join("regime_report.json"), out.join("regime_report.csv"))
}

#[derive(Serialize)]
struct CandidateRow {
    image_id: String,
    x: i64,
    y: i64,
    density: f64,
    model_score: Option<f32>,
}

fn cmd_stain(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Path,
    weights: Option<&Path>,
    negatives: Option<&Path>,
    accept: Option<f32>,
) -> Result<()> {
    let records = load_manifest(manifest)?;
    let data = Dataset::load(records.clone())?;
    let candidates = screen_candidates(&data, &cfg.stain)?;
    let refs: Vec<_> = candidates.iter().map(|c| c.patch.clone()).collect();
    let scored: Option<Vec<ScoredNegative>> = match weights {
        Some(w) => Some(score_negatives(&mut load_model(w)?, &refs, &data)?),
        None => None,
    };

    let mut per_image: BTreeMap<&str, Vec<Annotation>> = BTreeMap::new();
    for c in &candidates {
        per_image.entry(c.patch.image_id.as_str()).or_default().push(Annotation {
            x: c.patch.cx as f64,
            y: c.patch.cy as f64,
            label: AnnotationLabel::NonMitoticFigure,
        });
    }
    let cand_records: Vec<ImageRecord> = records
        .iter()
        .map(|r| ImageRecord {
            annotations: per_image.remove(r.id.as_str()).unwrap_or_default(),
            ..r.clone()
        })
        .collect();
    save_manifest(out.join("candidates.json"), &cand_records)?;

    let path = out.join("candidates.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    for (i, c) in candidates.iter().enumerate() {
        w.serialize(CandidateRow {
            image_id: c.patch.image_id.clone(),
            x: c.patch.cx,
            y: c.patch.cy,
            density: c.density,
            model_score: scored.as_ref().map(|s| s[i].score),
        })
        .map_err(|e| Error::io(&path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    if let Some(scored) = scored {
        let existing = match negatives {
            Some(p) => read_refs_csv(p)?,
            None => Vec::new(),
        };
        let threshold = accept.unwrap_or(cfg.mining.accept_threshold);
        let merged = merge_screened(&existing, &scored, threshold);
        log::info!(
            "accepted {} of {} screened candidates at threshold {threshold}",
            merged.len() - existing.len(),
            scored.len()
        );
        write_refs_csv(out.join("enriched_negatives.csv"), &merged)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Path,
    weights: &Path,
    split: Option<&Path>,
    subset: Subset,
    threshold: Option<f32>,
    calibration: Option<&Path>,
    dump_maps: bool,
) -> Result<()> {
    let threshold = match (threshold, calibration) {
        (Some(t), _) => t,
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let c: Calibration = serde_json::from_str(&text).map_err(|e| Error::parse(p.display().to_string(), e))?;
            c.threshold
        }
        (None, None) => cfg.detect.threshold,
    };
    let data = Dataset::load(select_records(manifest, split, subset)?)?;
    let mut model = load_model(weights)?;
    if dump_maps {
        std::fs::create_dir_all(out.join("maps")).map_err(|e| Error::io(out.join("maps"), e))?;
    }
    let mut sets = Vec::new();
    for r in &data.records {
        let img = data.image(&r.id).expect("dataset holds its images");
        let map = dense_forward(&mut model, &r.id, img, cfg.detect.tile, cfg.detect.threads)?;
        if dump_maps {
            map.save(out.join("maps").join(format!("{}.f32", r.id)))?;
        }
        sets.push(detect(&map, threshold, cfg.detect.min_separation));
    }
    write_detections_csv(out.join("detections.csv"), &sets)
}

fn cmd_calibrate(cfg: &RunConfig, out: &Path, manifest: &Path, split: &Path, weights: &Path) -> Result<()> {
    let val = load_side(manifest, split, Subset::Val)?;
    let mut model = load_model(weights)?;
    let sets = detect_all(&mut model, &val, &cfg.detect)?;
    let cal = calibrate_threshold(&sets, &val.records, cfg.eval.match_radius)?;
    write_detections_csv(out.join("val_candidates.csv"), &sets)?;
    write_json(&out.join("calibration.json"), &cal)
}

fn cmd_ensemble(cfg: &RunConfig, out: &Path, a: &Path, b: &Path) -> Result<()> {
    let sa = read_detections_csv(a)?;
    let sb: BTreeMap<String, DetectionSet> = read_detections_csv(b)?
        .into_iter()
        .map(|s| (s.image_id.clone(), s))
        .collect();
    let merged = sa
        .iter()
        .filter_map(|s| sb.get(&s.image_id).map(|t| ensemble_agreement(s, t, cfg.detect.ensemble_radius)))
        .collect::<Result<Vec<_>>>()?;
    write_detections_csv(out.join("detections.csv"), &merged)
}

fn cmd_evaluate(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Path,
    detections: &Path,
    split: Option<&Path>,
    subset: Subset,
) -> Result<()> {
    let records = select_records(manifest, split, subset)?;
    let mut by_id: BTreeMap<String, DetectionSet> = read_detections_csv(detections)?
        .into_iter()
        .map(|s| (s.image_id.clone(), s))
        .collect();
    let sets: Vec<DetectionSet> = records
        .iter()
        .map(|r| {
            by_id.remove(&r.id).unwrap_or_else(|| DetectionSet {
                image_id: r.id.clone(),
                detections: Vec::new(),
            })
        })
        .collect();
    if let Some(extra) = by_id.keys().next() {
        log::warn!("ignoring detections for `{extra}` and any other images outside the evaluated records");
    }
    let results = match_all(&sets, &records, cfg.eval.match_radius)?;
    let report = per_domain_report(&results, &records)?;
    report.save(out.join("report.json"), out.join("report.csv"))?;
    let n_gt: usize = records.iter().map(ImageRecord::mitosis_count).sum();
    if n_gt > 0 {
        let mut all = Vec::new();
        for (s, (_, m)) in sets.iter().zip(&results) {
            all.extend(scored_matches(s, m));
        }
        let curve = average_precision(&all, n_gt)?;
        curve.save_csv(out.join("pr_curve.csv"))?;
        log::info!("F1 {:.4}, AP {:.4}", report.overall.f1, curve.ap);
    } else {
        log::warn!("no mitoses among the evaluated images; skipping the PR curve");
    }
    Ok(())
}
