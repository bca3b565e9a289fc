//! Rotating a patch by quarter turns leaves the patch logits unchanged,
//! while intermediate P4 feature maps rotate and cycle their orientation
//! axis.

use mitodet::data::RgbImage;
use mitodet::nnet::{rgb_to_input, Layer, Mode, Model, ModelConfig, P4Conv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mitodet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let patch = RgbImage {
        width: 78,
        height: 78,
        data: (0..78 * 78 * 3).map(|_| rng.gen()).collect(),
    };

    let mut lift = P4Conv::lifting("demo", 3, 4, 5, 1);
    lift.init(&mut rng);
    let x = rgb_to_input(&[&patch.data], 78, 78)?;
    let y = lift.forward(&x, Mode::Infer)?;
    for k in 1..4 {
        let y_rot = lift.forward(&rgb_to_input(&[&patch.rotate(k).data], 78, 78)?, Mode::Infer)?;
        println!("lifting conv, {:>3} deg: max |L(rot x) - rot L(x)| = {:.2e}", 90 * k, y_rot.max_abs_diff(&y.rotate(k)));
    }

    let mut model = Model::new(ModelConfig::desk(), 0)?;
    let base = model.forward_patch(&patch.data)?;
    println!("desk model logits {base:?}");
    for k in 1..4 {
        let l = model.forward_patch(&patch.rotate(k).data)?;
        println!("rotated {:>3} deg: {l:?} (max diff {:.2e})", 90 * k, (l[0] - base[0]).abs().max((l[1] - base[1]).abs()));
    }
    Ok(())
}
