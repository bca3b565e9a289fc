//! Dense prediction maps on full images: tiled and untiled inference agree,
//! map cells equal patch-wise inference, and a quarter-turned image gives
//! quarter-turned detections.
//!
//! Usage: `dense_inference [weights.gnet]`; a fresh model is used if no
//! weights are given.

use mitodet::data::synth::{synthesize, SynthSpec};
use mitodet::detect::{dense_forward, dense_forward_untiled, detect, DetectConfig};
use mitodet::nnet::{positive_probability, Model, ModelConfig, ModelWeights};

fn main() -> mitodet::Result<()> {
    let mut model = match std::env::args().nth(1) {
        Some(p) => Model::from_weights(&ModelWeights::load(p)?)?,
        None => Model::new(ModelConfig::desk(), 0)?,
    };
    let synth = synthesize(&SynthSpec { images: 1, unlabeled_images: 0, ..SynthSpec::default() }, 5)?;
    let (record, image) = &synth.labeled[0];

    let start = std::time::Instant::now();
    let map = dense_forward_untiled(&mut model, &record.id, image)?;
    println!("{}x{} map (stride {}, offset {}) in {:?}", map.height, map.width, map.stride, map.offset, start.elapsed());
    let tiled = dense_forward(&mut model, &record.id, image, 128, 2)?;
    let tile_diff = map.data.iter().zip(&tiled.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("tiled (128 px, 2 threads) vs untiled: max diff {tile_diff:.1e}");

    let (my, mx) = (map.height / 2, map.width / 2);
    let mut crop = Vec::with_capacity(78 * 78 * 3);
    for y in my * map.stride..my * map.stride + 78 {
        let row = (y * image.width + mx * map.stride) * 3;
        crop.extend_from_slice(&image.data[row..row + 78 * 3]);
    }
    let p = positive_probability(model.forward_patch(&crop)?);
    println!("cell ({my}, {mx}): map {:.6}, patch {:.6}", map.at(my, mx), p);

    let cfg = DetectConfig { min_separation: 30.0, ..DetectConfig::default() };
    let dets = detect(&map, cfg.threshold, cfg.min_separation);
    println!("{} detections at threshold {}; annotated mitoses:", dets.detections.len(), cfg.threshold);
    for a in record.mitoses() {
        println!("  ({:.0}, {:.0})", a.x, a.y);
    }
    for d in dets.detections.iter().take(5) {
        println!("  detection ({:.0}, {:.0}) score {:.3}", d.x, d.y, d.score);
    }

    let turned = dense_forward_untiled(&mut model, &record.id, &image.rotate(1))?;
    let turned_dets = detect(&turned, cfg.threshold, cfg.min_separation);
    println!("quarter-turned image: {} detections", turned_dets.detections.len());
    Ok(())
}
