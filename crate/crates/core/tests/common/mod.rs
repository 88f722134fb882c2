//! Straight-line reference implementations used as oracles by the test
//! targets. Nothing here calls into the library's math.

#![allow(dead_code)]

use rand::Rng;

pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    mvcons::rng::stream(seed, &[0x7e57])
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `-(1/N) sum_i sum_c y_ic ln softmax(logits_i)_c`.
pub fn naive_cross_entropy(logits: &[f64], targets: &[f64], n: usize, c: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..c {
            z += (row[k] - m).exp();
        }
        for k in 0..c {
            let logp = row[k] - m - z.ln();
            total += targets[i * c + k] * logp;
        }
    }
    -total / n as f64
}

/// `(1/N) sum_i sum_k (a_ik - b_ik)^2`.
pub fn naive_consistency(a: &[f64], b: &[f64], n: usize, l: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..l {
            let d = a[i * l + k] - b[i * l + k];
            total += d * d;
        }
    }
    total / n as f64
}

fn members(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        out[l].push(i);
    }
    out.retain(|m| !m.is_empty());
    out
}

fn mean_of(x: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; x[0].len()];
    for &i in idx {
        for d in 0..c.len() {
            c[d] += x[i][d];
        }
    }
    c.iter().map(|v| v / idx.len() as f64).collect()
}

pub fn naive_silhouette(x: &[Vec<f64>], labels: &[usize]) -> f64 {
    let groups = members(labels);
    let mut total = 0.0;
    for i in 0..x.len() {
        let own: Vec<usize> = (0..x.len()).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| dist(&x[i], &x[j])).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        for g in &groups {
            if labels[g[0]] == labels[i] {
                continue;
            }
            let mean = g.iter().map(|&j| dist(&x[i], &x[j])).sum::<f64>() / g.len() as f64;
            b = b.min(mean);
        }
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / x.len() as f64
}

pub fn naive_davies_bouldin(x: &[Vec<f64>], labels: &[usize]) -> f64 {
    let groups = members(labels);
    let cents: Vec<Vec<f64>> = groups.iter().map(|g| mean_of(x, g)).collect();
    let s: Vec<f64> = groups
        .iter()
        .zip(&cents)
        .map(|(g, c)| g.iter().map(|&i| dist(&x[i], c)).sum::<f64>() / g.len() as f64)
        .collect();
    let k = groups.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i != j {
                worst = worst.max((s[i] + s[j]) / dist(&cents[i], &cents[j]));
            }
        }
        total += worst;
    }
    total / k as f64
}

pub fn naive_calinski_harabasz(x: &[Vec<f64>], labels: &[usize]) -> f64 {
    let groups = members(labels);
    let all: Vec<usize> = (0..x.len()).collect();
    let mean = mean_of(x, &all);
    let (mut b, mut w) = (0.0, 0.0);
    for g in &groups {
        let c = mean_of(x, g);
        b += g.len() as f64 * dist(&c, &mean).powi(2);
        for &i in g {
            w += dist(&x[i], &c).powi(2);
        }
    }
    let (n, k) = (x.len() as f64, groups.len() as f64);
    (b / (k - 1.0)) / (w / (n - k))
}

/// Random labeled point set: `k` clusters around random centres, every
/// cluster non-empty.
pub fn random_clusters(seed: u64, n: usize, k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng(seed);
    let centres: Vec<Vec<f64>> = (0..k).map(|_| uniform(&mut r, dim, -5.0, 5.0)).collect();
    let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { r.random_range(0..k) }).collect();
    let x = labels
        .iter()
        .map(|&l| centres[l].iter().map(|c| c + r.random_range(-1.5..1.5)).collect())
        .collect();
    (x, labels)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}
