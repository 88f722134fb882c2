//! t-SNE of three Gaussian blobs, rendered as an SVG scatter plot.

use mvcons::analysis::plot::scatter_svg;
use mvcons::analysis::{tsne, EmbeddingSet, TsneParams};
use rand::Rng;

fn main() -> mvcons::Result<()> {
    let mut rng = mvcons::rng::stream(0, &[1]);
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for k in 0..3 {
        for _ in 0..30 {
            vectors.push((0..10).map(|d| (if d == k { 6.0 } else { 0.0 }) + rng.random_range(-1.0..1.0)).collect());
            labels.push(k);
        }
    }
    let result = tsne(&vectors, &TsneParams::default())?;
    println!(
        "perplexity {:.1}: KL {:.4} -> {:.4}",
        result.perplexity, result.kl_initial, result.kl_final
    );
    let points = result.y.iter().map(|p| p.to_vec()).collect();
    let emb = EmbeddingSet::from_labeled(points, labels)?;
    let path = std::env::temp_dir().join("mvcons_tsne.svg");
    std::fs::write(&path, scatter_svg(&emb, "three blobs")?).map_err(|e| mvcons::Error::io(&path, e))?;
    println!("plot written to {}", path.display());
    Ok(())
}
