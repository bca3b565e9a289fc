//! Trains one model per augmentation policy, detects on the validation
//! images and compares each model with their agreement ensemble.
//!
//! Usage: `ensemble [iterations]` (default 600 per model).

use mitodet::data::synth::{synthesize, SynthSpec};
use mitodet::data::{stratified_split, Dataset};
use mitodet::detect::{calibrate_threshold, detect_all, ensemble_agreement, DetectConfig, DetectionSet};
use mitodet::eval::{f1, match_all};
use mitodet::nnet::{Model, ModelConfig};
use mitodet::train::{train_model, validation_set, PolicySpec, TrainConfig, TrainSet, ValidationSet};

fn main() -> mitodet::Result<()> {
    let iters: usize = std::env::args().nth(1).map_or(600, |a| a.parse().expect("iterations"));
    let synth = synthesize(&SynthSpec::default(), 7)?;
    let (records, images): (Vec<_>, Vec<_>) = synth.labeled.into_iter().unzip();
    let split = stratified_split(&records, 0.8, 7)?;
    let all = Dataset::from_parts(records, images);
    let (train, val) = (all.subset(&split.train_ids), all.subset(&split.val_ids));
    let detect = DetectConfig { min_separation: 30.0, ..DetectConfig::default() };

    let mut members = Vec::new();
    for policy in ["A", "B"] {
        let cfg = TrainConfig {
            max_iters: iters,
            cycle: iters.clamp(1, 200),
            policy: PolicySpec::Preset(policy.into()),
            ..TrainConfig::desk()
        };
        let positives = train.positive_refs();
        let negatives = train.negative_pool(cfg.min_dist, cfg.negative_stride);
        let val_refs = validation_set(&val, &cfg);
        let outcome = train_model(
            &TrainSet { data: &train, positives: &positives, negatives: &negatives },
            &ValidationSet { data: &val, refs: &val_refs },
            &ModelConfig::desk(),
            &cfg,
        )?;
        let sets = detect_all(&mut Model::from_weights(&outcome.best.weights)?, &val, &detect)?;
        let cal = calibrate_threshold(&sets, &val.records, 30.0)?;
        println!("policy {policy}: threshold {:.4}, validation F1 {:.3}", cal.threshold, cal.f1);
        let kept: Vec<DetectionSet> = sets.iter().map(|s| s.above(cal.threshold)).collect();
        members.push(kept);
    }

    let agreed: Vec<DetectionSet> = members[0]
        .iter()
        .zip(&members[1])
        .map(|(a, b)| ensemble_agreement(a, b, detect.ensemble_radius))
        .collect::<mitodet::Result<_>>()?;
    let counts = match_all(&agreed, &val.records, 30.0)?
        .iter()
        .fold((0, 0, 0), |acc, (_, m)| (acc.0 + m.tp, acc.1 + m.fp, acc.2 + m.fn_));
    println!(
        "ensemble: tp {} fp {} fn {}, F1 {:.3}",
        counts.0,
        counts.1,
        counts.2,
        f1(counts.0, counts.1, counts.2)
    );
    Ok(())
}
