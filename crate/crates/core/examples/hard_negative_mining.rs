//! Scores the training negatives with a base model, shows the hardest
//! ones and compares hard-negative subsets with random subsets of the same
//! size by validation AP.
//!
//! Usage: `hard_negative_mining <weights.gnet> [regime_iters] [sizes]`,
//! e.g. with the model written by the `train_desk` example. Without
//! weights a short base model is trained first.

use mitodet::data::synth::{synthesize, SynthSpec};
use mitodet::data::{stratified_split, Dataset};
use mitodet::detect::DetectConfig;
use mitodet::mining::{regime_search_scored, score_negatives, select_hard, RegimeConfig, RegimeData, Sizes};
use mitodet::nnet::{Model, ModelConfig, ModelWeights};
use mitodet::train::{train_model, validation_set, TrainConfig, TrainSet, ValidationSet};

fn main() -> mitodet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let regime_iters: usize = args.get(1).map_or(200, |a| a.parse().expect("iterations"));
    let sizes: Vec<usize> = args
        .get(2)
        .map_or(vec![250, 1000], |s| s.split(',').map(|v| v.parse().expect("size")).collect());

    let synth = synthesize(&SynthSpec::default(), 7)?;
    let (records, images): (Vec<_>, Vec<_>) = synth.labeled.into_iter().unzip();
    let split = stratified_split(&records, 0.8, 7)?;
    let all = Dataset::from_parts(records, images);
    let (train, val) = (all.subset(&split.train_ids), all.subset(&split.val_ids));
    let cfg = TrainConfig::desk();
    let positives = train.positive_refs();
    let negatives = train.negative_pool(cfg.min_dist, cfg.negative_stride);
    let val_refs = validation_set(&val, &cfg);

    let weights = match args.first() {
        Some(path) => ModelWeights::load(path)?,
        None => {
            println!("no weights given; training a 400-iteration base model");
            let short = TrainConfig { max_iters: 400, ..cfg.clone() };
            train_model(
                &TrainSet { data: &train, positives: &positives, negatives: &negatives },
                &ValidationSet { data: &val, refs: &val_refs },
                &ModelConfig::desk(),
                &short,
            )?
            .best
            .weights
        }
    };

    let mut model = Model::from_weights(&weights)?;
    let scored = score_negatives(&mut model, &negatives, &train)?;
    println!("hardest of {} negatives:", scored.len());
    for r in select_hard(&scored, 5)? {
        let s = scored.iter().find(|s| s.patch == r).map_or(f32::NAN, |s| s.score);
        println!("  {} ({}, {}) score {s:.4}", r.image_id, r.cx, r.cy);
    }

    let regime = RegimeConfig {
        sizes: Sizes::List(sizes),
        seeds: 3,
        train: TrainConfig { max_iters: regime_iters, cycle: regime_iters, eval_every: (regime_iters / 4).max(1), ..cfg },
        detect: DetectConfig { min_separation: 30.0, ..DetectConfig::default() },
        match_radius: 30.0,
    };
    let report = regime_search_scored(
        &scored,
        &RegimeData { train: &train, positives: &positives, negatives: &negatives, val: &val, val_refs: &val_refs },
        model.config(),
        &regime,
    )?;
    for c in report.cells.iter().chain([&report.baseline]) {
        println!("{:>6} {:<6} AP {:.3} +/- {:.3}", c.size, c.method, c.ap_mean, c.ap_std);
    }
    Ok(())
}
