//! Forward pass of the default desk-scale model on random images.

use mvcons::{ModelConfig, ModelParams, Tensor};

fn main() -> mvcons::Result<()> {
    let config = ModelConfig {
        num_classes: 4,
        ..Default::default()
    };
    let model = ModelParams::<f32>::init(config.clone(), 0)?;
    println!("{} parameters", model.param_count());
    for (name, t) in model.named().iter().take(6) {
        println!("  {name:<24} {:?}", t.shape());
    }

    let n = 2;
    let s = config.image_size;
    let pixels: Vec<f32> = (0..n * 3 * s * s).map(|i| (i % 97) as f32 / 96.0).collect();
    let out = model.predict(Tensor::new(vec![n, 3, s, s], pixels)?)?;
    println!("features {:?}", out.features.shape());
    println!("latent   {:?}", out.latent.shape());
    println!("probs    {:?} {:?}", out.probs.shape(), &out.probs.data()[..4]);
    Ok(())
}
