//! Trains the desk model on the synthetic dataset and calibrates its
//! detection threshold on the validation images.
//!
//! Usage: `train_desk [iterations] [out_dir]` (defaults 2000, `desk-run`).
//! Writes `model.gnet` and `train_log.csv`.

use mitodet::data::synth::{synthesize, SynthSpec};
use mitodet::data::{stratified_split, Dataset};
use mitodet::detect::{calibrate_model, DetectConfig};
use mitodet::nnet::ModelConfig;
use mitodet::train::{train_model, validation_set, write_log_csv, TrainConfig, TrainSet, ValidationSet};

fn main() -> mitodet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let iters: usize = args.next().map_or(2000, |a| a.parse().expect("iterations"));
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "desk-run".into()));
    std::fs::create_dir_all(&out).expect("output directory");

    let synth = synthesize(&SynthSpec::default(), 7)?;
    let (records, images): (Vec<_>, Vec<_>) = synth.labeled.into_iter().unzip();
    let split = stratified_split(&records, 0.8, 7)?;
    let all = Dataset::from_parts(records, images);
    let (train, val) = (all.subset(&split.train_ids), all.subset(&split.val_ids));

    let cfg = TrainConfig {
        max_iters: iters,
        cycle: TrainConfig::desk().cycle.min(iters.max(1)),
        ..TrainConfig::desk()
    };
    let positives = train.positive_refs();
    let negatives = train.negative_pool(cfg.min_dist, cfg.negative_stride);
    let val_refs = validation_set(&val, &cfg);
    println!("{} positives, {} negatives, {} validation patches", positives.len(), negatives.len(), val_refs.len());

    let start = std::time::Instant::now();
    let outcome = train_model(
        &TrainSet { data: &train, positives: &positives, negatives: &negatives },
        &ValidationSet { data: &val, refs: &val_refs },
        &ModelConfig::desk(),
        &cfg,
    )?;
    println!(
        "trained in {:.0}s; best validation loss {:.4} at iteration {}",
        start.elapsed().as_secs_f64(),
        outcome.best.val_loss,
        outcome.best.iteration
    );
    outcome.best.save(out.join("model.gnet"))?;
    write_log_csv(out.join("train_log.csv"), &outcome.log)?;

    let detect = DetectConfig { min_separation: 30.0, ..DetectConfig::default() };
    let cal = calibrate_model(&outcome.best.weights, &val, &detect, 30.0)?;
    println!("calibrated threshold {:.4}: validation F1 {:.3}", cal.threshold, cal.f1);
    Ok(())
}
