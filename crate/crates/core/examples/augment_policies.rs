//! Draws augmentations of one synthetic mitosis patch under both shipped
//! policies, reports firing rates and writes a contact sheet PNG.

use mitodet::augment::{apply_policy, sample_plan, AugPolicy, TransformKind, MIN_MARGIN};
use mitodet::data::synth::{synthesize, SynthSpec};
use mitodet::data::{Dataset, RgbImage, PATCH_SIZE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mitodet::Result<()> {
    let out_path = std::env::args().nth(1).unwrap_or_else(|| "augmentations.png".into());
    let synth = synthesize(&SynthSpec { images: 1, unlabeled_images: 0, ..SynthSpec::default() }, 1)?;
    let (records, images): (Vec<_>, Vec<_>) = synth.labeled.into_iter().unzip();
    let data = Dataset::from_parts(records, images);
    let mitosis = data.positive_refs().remove(0);
    let input = data.patch(&mitosis, PATCH_SIZE, MIN_MARGIN)?;

    let cols = 8;
    let mut sheet = RgbImage::new(cols * PATCH_SIZE, 2 * PATCH_SIZE);
    for (row, policy) in [AugPolicy::policy_a(), AugPolicy::policy_b()].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(row as u64);
        let mut fired = [0usize; 8];
        for _ in 0..10_000 {
            for (f, on) in fired.iter_mut().zip(sample_plan(policy, &mut rng).fired()) {
                *f += on as usize;
            }
        }
        let rates: Vec<String> = TransformKind::ORDER
            .iter()
            .zip(fired)
            .map(|(k, f)| format!("{k:?} {:.1}%", f as f64 / 100.0))
            .collect();
        println!("policy {}: {}", policy.name, rates.join(", "));
        for c in 0..cols {
            let patch = apply_policy(&input, policy, &mut rng)?;
            for y in 0..PATCH_SIZE {
                for x in 0..PATCH_SIZE {
                    let i = (y * PATCH_SIZE + x) * 3;
                    sheet.put(c * PATCH_SIZE + x, row * PATCH_SIZE + y, [patch[i], patch[i + 1], patch[i + 2]]);
                }
            }
        }
    }
    sheet.save_png(&out_path)?;
    println!("contact sheet (row 1: policy A, row 2: policy B) written to {out_path}");
    Ok(())
}
