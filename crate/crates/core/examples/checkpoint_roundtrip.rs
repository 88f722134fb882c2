//! Saves a model, loads it back and shows the bytes survive unchanged.

use mvcons::{checkpoint, ModelConfig, ModelParams};

fn main() -> mvcons::Result<()> {
    let config = ModelConfig {
        num_classes: 4,
        ..Default::default()
    };
    let model = ModelParams::<f32>::init(config, 3)?;
    let path = std::env::temp_dir().join("mvcons_example.ckpt");
    checkpoint::save(&model, &path)?;
    let loaded = checkpoint::load(&path)?;
    let bytes = checkpoint::to_bytes(&model);
    println!("{} bytes, magic {:?}", bytes.len(), std::str::from_utf8(&bytes[..4]).unwrap_or("?"));
    println!("config preserved: {}", loaded.config == model.config);
    println!("re-encoding identical: {}", checkpoint::to_bytes(&loaded) == bytes);
    Ok(())
}
