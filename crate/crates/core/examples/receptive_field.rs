//! Receptive field, output stride and size of the shipped model presets,
//! plus the calculator on a hand-written chain.

use mitodet::nnet::{receptive_field, LayerSpec, Model, ModelConfig};

fn main() -> mitodet::Result<()> {
    let chain = [LayerSpec::new(4, 2), LayerSpec::new(3, 1), LayerSpec::new(2, 2), LayerSpec::new(3, 1)];
    let (rf, stride) = receptive_field(&chain);
    println!("4x4/2 -> 3x3 -> 2x2/2 -> 3x3: rf {rf}, stride {stride}");
    for name in ["desk", "paper-like"] {
        let cfg = ModelConfig::preset(name)?;
        let (rf, stride) = cfg.computed_receptive_field();
        let model = Model::new(cfg.clone(), 0)?;
        println!(
            "{name:>10}: {} parameterized layers, rf {rf}, output stride {stride}, center offset {}, {} parameters, fingerprint {}",
            cfg.depth(),
            cfg.center_offset(),
            model.parameter_count(),
            &cfg.fingerprint()[..12]
        );
    }
    Ok(())
}
