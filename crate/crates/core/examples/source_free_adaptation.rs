//! Source training followed by source-free adaptation on the shifted target.
//! The adaptation call sees only the model and unlabeled target images.

use mvcons::analysis::accuracy;
use mvcons::augment::AugmentSpec;
use mvcons::data::{render_synthetic, SynthSpec};
use mvcons::train::{adapt_target_with, train_source, TrainConfig};
use mvcons::{ModelConfig, ModelParams};

fn main() -> mvcons::Result<()> {
    let spec: SynthSpec = serde_json::from_str(include_str!("../benchmark/synth_spec.json")).expect("valid spec");
    let (source, target) = render_synthetic(&spec)?;
    let config = ModelConfig {
        num_classes: source.num_classes(),
        ..Default::default()
    };
    let mut model = ModelParams::<f32>::init(config, 0)?;
    let cfg = TrainConfig::default();
    let augment = AugmentSpec::default();
    train_source(&mut model, &source, &cfg, &augment)?;
    drop(source);
    println!("before adaptation: target accuracy {:.3}", accuracy(&model, &target)?);

    let unlabeled = target.without_labels();
    adapt_target_with(&mut model, &unlabeled, &cfg, &augment, |m, e| {
        println!(
            "epoch {:>2}  L_class {:.4}  L_cons {:.4}  pair dist {:.4}  acc {:.3}",
            e.epoch,
            e.l_class,
            e.l_cons,
            e.mean_pair_dist.unwrap_or(f64::NAN),
            accuracy(m, &target)?
        );
        Ok(())
    })?;
    println!("after adaptation: target accuracy {:.3}", accuracy(&model, &target)?);
    Ok(())
}
