//! Trains the default model on the synthetic source domain for a few epochs.

use mvcons::analysis::accuracy;
use mvcons::augment::AugmentSpec;
use mvcons::data::{render_synthetic, SynthSpec};
use mvcons::train::{log_to_csv, train_source, TrainConfig};
use mvcons::{ModelConfig, ModelParams};

fn main() -> mvcons::Result<()> {
    let (source, target) = render_synthetic(&SynthSpec::default())?;
    let config = ModelConfig {
        num_classes: source.num_classes(),
        ..Default::default()
    };
    let mut model = ModelParams::<f32>::init(config, 0)?;
    let cfg = TrainConfig {
        epochs: 5,
        ..Default::default()
    };
    let log = train_source(&mut model, &source, &cfg, &AugmentSpec::default())?;
    print!("{}", log_to_csv(&log));
    println!("source accuracy {:.3}", accuracy(&model, &source)?);
    println!("target accuracy {:.3} (no shift in the default spec)", accuracy(&model, &target)?);
    Ok(())
}
