//! Silhouette, Davies-Bouldin and Calinski-Harabasz on hand-made clusters,
//! including the infinite sentinel.

use mvcons::analysis::{metrics_report, EmbeddingSet};

fn main() -> mvcons::Result<()> {
    let tight = EmbeddingSet::from_labeled(
        vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![10.0, 11.0]],
        vec![0, 0, 1, 1],
    )?;
    let overlapping = EmbeddingSet::from_labeled(
        vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.5], vec![1.5, -0.5]],
        vec![0, 0, 1, 1],
    )?;
    let collapsed = EmbeddingSet::from_labeled(
        vec![vec![0.0], vec![0.0], vec![3.0], vec![3.0]],
        vec![0, 0, 1, 1],
    )?;
    for (name, emb) in [("tight", &tight), ("overlapping", &overlapping), ("collapsed", &collapsed)] {
        let report = metrics_report(emb)?;
        println!("{name:<12} {}", serde_json::to_string(&report).expect("serializable"));
    }
    Ok(())
}
