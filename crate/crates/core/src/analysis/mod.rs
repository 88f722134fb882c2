//! Clustering metrics, t-SNE, and the embedding file formats.

pub mod io;
pub mod metrics;
pub mod plot;
pub mod tsne;

use crate::data::DatasetSplit;
use crate::error::{Error, Result};

pub use crate::train::accuracy;
pub use metrics::{calinski_harabasz, davies_bouldin, metrics_report, silhouette, MetricsReport};
pub use tsne::{tsne, TsneParams, TsneResult};

/// Labeled vectors, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<Option<usize>>,
    pub domains: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(
        ids: Vec<String>,
        vectors: Vec<Vec<f64>>,
        labels: Vec<Option<usize>>,
        domains: Vec<String>,
    ) -> Result<Self> {
        let n = vectors.len();
        if ids.len() != n || labels.len() != n || domains.len() != n {
            return Err(Error::Dimension(format!(
                "{n} vectors but {} ids, {} labels, {} domains",
                ids.len(),
                labels.len(),
                domains.len()
            )));
        }
        if let Some(first) = vectors.first() {
            let dim = first.len();
            if dim == 0 {
                return Err(Error::Dimension("zero-dimensional vectors".into()));
            }
            for (i, v) in vectors.iter().enumerate() {
                if v.len() != dim {
                    return Err(Error::Dimension(format!("row {i} has {} values, expected {dim}", v.len())));
                }
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::Runtime(format!("row {i} (`{}`) has non-finite values", ids[i])));
                }
            }
        }
        Ok(EmbeddingSet {
            ids,
            vectors,
            labels,
            domains,
        })
    }

    /// Wraps bare vectors with integer labels (ids and domain left generic).
    pub fn from_labeled(vectors: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let n = vectors.len();
        Self::new(
            (0..n).map(|i| i.to_string()).collect(),
            vectors,
            labels.into_iter().map(Some).collect(),
            vec![String::new(); n],
        )
    }

    /// Embeds a split with `vectors` computed elsewhere, in split order.
    pub fn for_split(split: &DatasetSplit, vectors: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(
            split.samples.iter().map(|s| s.id.clone()).collect(),
            vectors,
            split.samples.iter().map(|s| s.label).collect(),
            split.samples.iter().map(|s| s.domain.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Labels of every row, or an error naming the first unlabeled row.
    pub fn require_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::MetricUndefined(format!("row {i} (`{}`) has no label", self.ids[i]))))
            .collect()
    }
}

/// Flattened pixel values (CHW order) for every sample.
pub fn raw_pixel_vectors(split: &DatasetSplit) -> Vec<Vec<f64>> {
    split
        .samples
        .iter()
        .map(|s| s.image.to_chw().into_iter().map(f64::from).collect())
        .collect()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
