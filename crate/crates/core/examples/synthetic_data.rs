//! Generates the two-domain synthetic benchmark and reloads it from disk.

use mvcons::analysis::{raw_pixel_vectors, silhouette, EmbeddingSet};
use mvcons::data::{generate_synthetic, load_image_folder, SynthSpec};

fn main() -> mvcons::Result<()> {
    let spec: SynthSpec = serde_json::from_str(include_str!("../benchmark/synth_spec.json")).expect("valid spec");
    let out = std::env::temp_dir().join("mvcons_synth");
    let (source, target) = generate_synthetic(&spec, &out)?;
    println!("classes: {:?}", source.classes);
    for split in [&source, &target] {
        let reloaded = load_image_folder(&out.join(&split.domain), spec.image_size)?;
        let emb = EmbeddingSet::for_split(&reloaded, raw_pixel_vectors(&reloaded))?;
        println!(
            "{:<7} {} images, raw-pixel silhouette {:.4}",
            split.domain,
            reloaded.len(),
            silhouette(&emb)?
        );
    }
    println!("dataset under {}", out.display());
    Ok(())
}
