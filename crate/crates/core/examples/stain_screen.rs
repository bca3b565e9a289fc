//! Screens synthetic unlabeled images for ink-like residual density and
//! compares the hits with the planted smudges.

use mitodet::data::synth::{synthesize, SynthSpec};
use mitodet::data::Dataset;
use mitodet::stain::{StainBasis, estimate_basis, screen_candidates, to_optical_density, StainConfig};

fn main() -> mitodet::Result<()> {
    let spec = SynthSpec {
        images: 1,
        unlabeled_images: 6,
        unlabeled_ink_per_image: std::env::args().nth(1).map_or(1, |a| a.parse().expect("ink count")),
        ..SynthSpec::default()
    };
    let out = synthesize(&spec, 7)?;
    let (records, images): (Vec<_>, Vec<_>) = out.unlabeled.into_iter().unzip();
    let config = StainConfig::default();
    for (r, img) in records.iter().zip(&images) {
        let basis = estimate_basis(&to_optical_density(img, config.i0), config.beta, config.alpha_pct)?;
        let truth = out.summary.domains.iter().find(|d| d.name == r.domain).unwrap();
        let angle = |a: [f64; 3], b: [f64; 3]| (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0).acos().to_degrees();
        let normal = StainBasis::from_stains(truth.hematoxylin, truth.eosin).residual;
        println!(
            "{}: H off by {:.1} deg, E off by {:.1} deg, residual off by {:.1} deg",
            r.id,
            angle(basis.hematoxylin, truth.hematoxylin),
            angle(basis.eosin, truth.eosin),
            angle(basis.residual, normal)
        );
    }
    let data = Dataset::from_parts(records, images);
    let found = screen_candidates(&data, &config)?;
    for s in &out.summary.unlabeled {
        for ink in &s.ink {
            let best = found
                .iter()
                .filter(|c| c.patch.image_id == s.id)
                .map(|c| ((c.patch.cx as f64 - ink[0]).hypot(c.patch.cy as f64 - ink[1]), c.density))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            println!("{} ink at ({:.0}, {:.0}) -> nearest hit {:?}", s.id, ink[0], ink[1], best);
        }
    }
    println!("{} candidates above {}", found.len(), config.density_threshold);
    for c in &found {
        println!("  {} ({}, {}) density {:.3}", c.patch.image_id, c.patch.cx, c.patch.cy, c.density);
    }
    Ok(())
}
