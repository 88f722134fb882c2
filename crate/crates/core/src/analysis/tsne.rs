//! Exact O(N^2) t-SNE minimizing KL(P || Q).

use rand::Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sq_dist;
use crate::error::{Error, Result};
use crate::rng::stream;

const TAG_TSNE: u64 = 0x75e;
pub const ENTROPY_TOL: f64 = 1e-5;
pub const MAX_BISECTION: usize = 50;
pub const P_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneParams {
    /// `None` picks 30, clamped to `(N - 1) / 3`.
    pub perplexity: Option<f64>,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: None,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            seed: 0,
        }
    }
}

impl TsneParams {
    pub fn resolved_perplexity(&self, n: usize) -> Result<f64> {
        if n < 4 {
            return Err(Error::Config(format!("t-SNE needs at least 4 points, got {n}")));
        }
        let max = (n - 1) as f64 / 3.0;
        match self.perplexity {
            None => Ok(30f64.min(max)),
            Some(p) if (1.0..=max).contains(&p) => Ok(p),
            Some(p) => Err(Error::Config(format!(
                "perplexity {p} outside [1, {max}] for {n} points"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneResult {
    pub y: Vec<[f64; 2]>,
    pub kl_initial: f64,
    pub kl_final: f64,
    pub perplexity: f64,
}

/// Affinities of row `i` for precision `beta`; returns entropy in bits.
fn conditional_row(d: &[f64], i: usize, beta: f64, row: &mut [f64]) -> f64 {
    let dmin = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (j, r) in row.iter_mut().enumerate() {
        *r = if j == i { 0.0 } else { (-beta * (d[j] - dmin)).exp() };
        z += *r;
    }
    let mut weighted = 0.0;
    for (j, r) in row.iter_mut().enumerate() {
        *r /= z;
        if j != i {
            weighted += *r * (d[j] - dmin);
        }
    }
    (z.ln() + beta * weighted) / std::f64::consts::LN_2
}

/// Conditional affinities `p_{j|i}` matching `perplexity`, row-major, and the
/// achieved entropy (bits) of each row.
pub fn conditional_probabilities(vectors: &[Vec<f64>], perplexity: f64) -> (Vec<f64>, Vec<f64>) {
    let n = vectors.len();
    let target = perplexity.log2();
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d: Vec<f64> = vectors.iter().map(|v| sq_dist(&vectors[i], v)).collect();
            let mut row = vec![0.0; n];
            // bisection on ln(beta); entropy decreases as beta grows
            let (mut lo, mut hi) = (-60.0f64, 60.0f64);
            let mut h = 0.0;
            for _ in 0..MAX_BISECTION {
                let mid = 0.5 * (lo + hi);
                h = conditional_row(&d, i, mid.exp(), &mut row);
                if (h - target).abs() < ENTROPY_TOL {
                    break;
                }
                if h > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (row, h)
        })
        .collect();
    let mut p = Vec::with_capacity(n * n);
    let mut entropies = Vec::with_capacity(n);
    for (row, h) in rows {
        p.extend(row);
        entropies.push(h);
    }
    (p, entropies)
}

/// Symmetric joint affinities: zero diagonal, off-diagonal floored at
/// `P_FLOOR`, summing to 1.
pub fn joint_probabilities(vectors: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = vectors.len();
    let (cond, _) = conditional_probabilities(vectors, perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(P_FLOOR);
            }
        }
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// Unnormalized Student-t kernel `(1 + |y_i - y_j|^2)^-1` with zero diagonal.
fn student_kernel(y: &[[f64; 2]]) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (0..n).map(move |j| {
                if i == j {
                    0.0
                } else {
                    let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
                    1.0 / (1.0 + dx * dx + dy * dy)
                }
            })
        })
        .collect()
}

/// Low-dimensional affinities `Q`, row-major.
pub fn q_matrix(y: &[[f64; 2]]) -> Vec<f64> {
    let mut q = student_kernel(y);
    let z: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= z);
    q
}

/// `KL(P || Q) = sum_{i != j} p_ij ln(p_ij / q_ij)`.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let q = q_matrix(y);
    p.iter()
        .zip(&q)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, qv)| pv * (pv / qv).ln())
        .sum()
}

/// `dKL/dy_i = 4 sum_j (p_ij - q_ij)(y_i - y_j)(1 + |y_i - y_j|^2)^-1`.
pub fn kl_gradient(p: &[f64], y: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = y.len();
    let w = student_kernel(y);
    let z: f64 = w.iter().sum();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = [0.0; 2];
            for j in 0..n {
                let wij = w[i * n + j];
                let coef = 4.0 * (p[i * n + j] - wij / z) * wij;
                g[0] += coef * (y[i][0] - y[j][0]);
                g[1] += coef * (y[i][1] - y[j][1]);
            }
            g
        })
        .collect()
}

pub fn tsne(vectors: &[Vec<f64>], params: &TsneParams) -> Result<TsneResult> {
    let n = vectors.len();
    let perplexity = params.resolved_perplexity(n)?;
    let p = joint_probabilities(vectors, perplexity);

    let mut rng = stream(params.seed, &[TAG_TSNE]);
    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [rng.sample(normal), rng.sample(normal)]).collect();
    let kl_initial = kl_divergence(&p, &y);

    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let exaggerated: Vec<f64> = p.iter().map(|v| v * params.exaggeration).collect();
    for it in 0..params.iterations {
        let early = it < params.exaggeration_iters;
        let momentum = if early { params.momentum_initial } else { params.momentum_final };
        let grad = kl_gradient(if early { &exaggerated } else { &p }, &y);
        for i in 0..n {
            for d in 0..2 {
                gains[i][d] = if (grad[i][d] > 0.0) != (update[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(0.01)
                };
                update[i][d] = momentum * update[i][d] - params.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += update[i][d];
            }
        }
        for d in 0..2 {
            let mean = y.iter().map(|r| r[d]).sum::<f64>() / n as f64;
            y.iter_mut().for_each(|r| r[d] -= mean);
        }
    }
    let kl_final = kl_divergence(&p, &y);
    if !kl_final.is_finite() {
        return Err(Error::Runtime("t-SNE diverged".into()));
    }
    Ok(TsneResult {
        y,
        kl_initial,
        kl_final,
        perplexity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Vec<Vec<f64>> {
        vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]
    }

    #[test]
    fn perplexity_range() {
        let p = TsneParams::default();
        assert_eq!(p.resolved_perplexity(4).unwrap(), 1.0);
        assert_eq!(p.resolved_perplexity(1000).unwrap(), 30.0);
        assert!(p.resolved_perplexity(3).is_err());
        let bad = TsneParams {
            perplexity: Some(5.0),
            ..Default::default()
        };
        assert!(bad.resolved_perplexity(10).unwrap_err().is_config());
    }

    #[test]
    fn kl_zero_when_q_equals_p() {
        let y = [[0.0, 0.0], [1.0, 0.5], [-0.3, 2.0], [0.7, -1.0]];
        let q = q_matrix(&y);
        assert!(kl_divergence(&q, &y).abs() < 1e-15);
    }

    #[test]
    fn square_corners_make_progress() {
        let r = tsne(&square(), &TsneParams::default()).unwrap();
        // the 4-cycle P is best matched by an unbounded square: KL -> ln(1.25)
        assert!((r.kl_final - 1.25f64.ln()).abs() < 1e-4);
        assert!(r.kl_final < r.kl_initial, "{} !< {}", r.kl_final, r.kl_initial);
    }

    #[test]
    fn deterministic() {
        let params = TsneParams { iterations: 50, seed: 3, ..Default::default() };
        assert_eq!(tsne(&square(), &params).unwrap(), tsne(&square(), &params).unwrap());
    }
}
