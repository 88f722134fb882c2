//! Silhouette, Davies-Bouldin and Calinski-Harabasz scores with Euclidean
//! distance. Clusters are the distinct labels.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{sq_dist, EmbeddingSet};
use crate::error::{Error, Result};

fn clusters(emb: &EmbeddingSet) -> Result<Vec<Vec<usize>>> {
    let labels = emb.require_labels()?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.into_iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::MetricUndefined(format!(
            "need at least 2 clusters, found {}",
            groups.len()
        )));
    }
    Ok(groups.into_values().collect())
}

fn centroid(emb: &EmbeddingSet, members: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; emb.dim()];
    for &i in members {
        for (a, x) in c.iter_mut().zip(&emb.vectors[i]) {
            *a += x;
        }
    }
    c.iter_mut().for_each(|a| *a /= members.len() as f64);
    c
}

pub fn silhouette(emb: &EmbeddingSet) -> Result<f64> {
    let groups = clusters(emb)?;
    let mut cluster_of = vec![0; emb.len()];
    for (k, g) in groups.iter().enumerate() {
        for &i in g {
            cluster_of[i] = k;
        }
    }
    let scores: Vec<f64> = (0..emb.len())
        .into_par_iter()
        .map(|i| {
            let own = cluster_of[i];
            if groups[own].len() == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; groups.len()];
            for j in 0..emb.len() {
                if j != i {
                    sums[cluster_of[j]] += sq_dist(&emb.vectors[i], &emb.vectors[j]).sqrt();
                }
            }
            let a = sums[own] / (groups[own].len() - 1) as f64;
            let b = (0..groups.len())
                .filter(|&k| k != own)
                .map(|k| sums[k] / groups[k].len() as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / emb.len() as f64)
}

/// Returns `f64::INFINITY` when two centroids coincide.
pub fn davies_bouldin(emb: &EmbeddingSet) -> Result<f64> {
    let groups = clusters(emb)?;
    let cents: Vec<Vec<f64>> = groups.iter().map(|g| centroid(emb, g)).collect();
    let scatter: Vec<f64> = groups
        .iter()
        .zip(&cents)
        .map(|(g, c)| g.iter().map(|&i| sq_dist(&emb.vectors[i], c).sqrt()).sum::<f64>() / g.len() as f64)
        .collect();
    let k = groups.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in (0..k).filter(|&j| j != i) {
            let m = sq_dist(&cents[i], &cents[j]).sqrt();
            if m == 0.0 {
                log::warn!("davies_bouldin: clusters {i} and {j} have coincident centroids");
                return Ok(f64::INFINITY);
            }
            worst = worst.max((scatter[i] + scatter[j]) / m);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Returns `f64::INFINITY` when every cluster has zero within-cluster scatter.
pub fn calinski_harabasz(emb: &EmbeddingSet) -> Result<f64> {
    let groups = clusters(emb)?;
    let (n, k) = (emb.len(), groups.len());
    if n <= k {
        return Err(Error::MetricUndefined(format!(
            "calinski_harabasz needs more samples ({n}) than clusters ({k})"
        )));
    }
    let all: Vec<usize> = (0..n).collect();
    let mean = centroid(emb, &all);
    let mut between = 0.0;
    let mut within = 0.0;
    for g in &groups {
        let c = centroid(emb, g);
        between += g.len() as f64 * sq_dist(&c, &mean);
        within += g.iter().map(|&i| sq_dist(&emb.vectors[i], &c)).sum::<f64>();
    }
    if within == 0.0 {
        log::warn!("calinski_harabasz: zero within-cluster scatter");
        return Ok(f64::INFINITY);
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Scores for one embedding set. Infinite sentinels serialize as `"inf"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric")]
    pub silhouette: f64,
    #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric")]
    pub dbi: f64,
    #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric")]
    pub chi: f64,
    pub n_samples: usize,
    pub n_clusters: usize,
}

fn ser_metric<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if *v == f64::INFINITY {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_metric<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Metric {
        Num(f64),
        Text(String),
    }
    match Metric::deserialize(d)? {
        Metric::Num(v) => Ok(v),
        Metric::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Metric::Text(t) => Err(serde::de::Error::custom(format!("bad metric value `{t}`"))),
    }
}

pub fn metrics_report(emb: &EmbeddingSet) -> Result<MetricsReport> {
    let n_clusters = clusters(emb)?.len();
    Ok(MetricsReport {
        silhouette: silhouette(emb)?,
        dbi: davies_bouldin(emb)?,
        chi: calinski_harabasz(emb)?,
        n_samples: emb.len(),
        n_clusters,
    })
}
