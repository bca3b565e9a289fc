//! Writes a synthetic three-domain dataset (manifest, unlabeled manifest,
//! PNGs and a summary) to the directory given as the first argument.

use mitodet::data::synth::{generate_synthetic_dataset, SynthSpec};
use mitodet::data::{load_manifest, stratified_split};

fn main() -> mitodet::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth-out".into());
    let (summary, paths) = generate_synthetic_dataset(&SynthSpec::default(), 7, &out)?;
    println!(
        "{} labeled images, {} mitotic figures, {} impostors, {} ink smudges",
        summary.images.len(),
        summary.total_positives,
        summary.total_impostors,
        summary.total_ink
    );
    let records = load_manifest(&paths.manifest)?;
    let split = stratified_split(&records, 0.8, 7)?;
    for (domain, s) in &split.stats {
        println!(
            "{domain}: train {} images / {} mitoses, val {} images / {} mitoses",
            s.train_images, s.train_mitoses, s.val_images, s.val_mitoses
        );
    }
    println!("manifest at {}", paths.manifest.display());
    Ok(())
}
