//! Classification, latent-consistency and combined objectives.

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{c, Real, Tensor};

fn check_batch(shape_a: &[usize], shape_b: &[usize], what: &str) -> Result<usize> {
    if shape_a.len() != 2 || shape_a != shape_b {
        return dim_err(format!("{what}: shapes {shape_a:?} and {shape_b:?} must be equal [N, F]"));
    }
    if shape_a[0] == 0 {
        return Err(Error::EmptyDataset(format!("{what} on an empty batch")));
    }
    Ok(shape_a[0])
}

/// Cross-entropy `-(1/N) sum_i sum_c y_ic log p_ic`, evaluated from logits
/// through log-softmax. `targets` may be one-hot or soft rows summing to 1.
pub fn classification_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: Var) -> Result<Var> {
    let n = check_batch(g.shape(logits), g.shape(targets), "classification_loss")?;
    let logp = g.log_softmax(logits);
    let weighted = g.mul(targets, logp)?;
    let total = g.sum_all(weighted);
    Ok(g.scale(total, c(-1.0 / n as f64)))
}

/// The same cross-entropy computed directly from probabilities, with
/// `0 * log 0` taken as 0. No graph involved.
pub fn classification_loss_from_probs<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    let n = check_batch(probs.shape(), targets.shape(), "classification_loss")?;
    let mut total = T::zero();
    for (&p, &y) in probs.data().iter().zip(targets.data()) {
        if y != T::zero() {
            total = total + y * p.ln();
        }
    }
    Ok(-total / c(n as f64))
}

/// `(1/N) sum_i ||z_a[i] - z_b[i]||^2`: summed over latent dimensions,
/// averaged over samples.
pub fn consistency_loss<T: Real>(g: &mut Graph<T>, z_a: Var, z_b: Var) -> Result<Var> {
    let n = check_batch(g.shape(z_a), g.shape(z_b), "consistency_loss")?;
    let diff = g.sub(z_a, z_b)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum_all(sq);
    Ok(g.scale(total, c(1.0 / n as f64)))
}

/// `L = L_class + lambda * L_cons`.
pub fn combined_loss<T: Real>(g: &mut Graph<T>, l_class: Var, l_cons: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let weighted = g.scale(l_cons, c(lambda));
    g.add(l_class, weighted)
}

/// Mean Euclidean distance between paired rows.
pub fn mean_pair_distance<T: Real>(z_a: &Tensor<T>, z_b: &Tensor<T>) -> Result<f64> {
    let n = check_batch(z_a.shape(), z_b.shape(), "mean_pair_distance")?;
    let l = z_a.shape()[1];
    let total: f64 = z_a
        .data()
        .chunks(l)
        .zip(z_b.data().chunks(l))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| (x - y).as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), d).unwrap()
    }

    #[test]
    fn one_hot_prediction_has_zero_loss() {
        let p = t(&[2, 3], &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(classification_loss_from_probs(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn uniform_prediction_gives_ln_c() {
        let p = t(&[1, 4], &[0.25; 4]);
        let y = t(&[1, 4], &[0.0, 0.0, 1.0, 0.0]);
        let l = classification_loss_from_probs(&p, &y).unwrap();
        assert!((l - 1.386294).abs() < 1e-6);

        let mut g = Graph::new();
        let logits = g.constant(t(&[1, 4], &[0.7; 4]));
        let yv = g.constant(y);
        let lv = classification_loss(&mut g, logits, yv).unwrap();
        assert!((g.value(lv).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn consistency_hand_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = g.constant(t(&[1, 2], &[0.0, 1.0]));
        let l = consistency_loss(&mut g, a, b).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 2.0);
        let l0 = consistency_loss(&mut g, a, a).unwrap();
        assert_eq!(g.value(l0).item().unwrap(), 0.0);
        let wide = g.constant(t(&[1, 3], &[0.0; 3]));
        assert!(matches!(consistency_loss(&mut g, a, wide), Err(Error::Dimension(_))));
    }

    #[test]
    fn combined_hand_value_and_identities() {
        let mut g = Graph::<f64>::new();
        let lc = g.constant(Tensor::scalar(1.0));
        let ls = g.constant(Tensor::scalar(2.0));
        let l = combined_loss(&mut g, lc, ls, 0.5).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 2.0);
        let l = combined_loss(&mut g, lc, ls, 0.0).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 1.0);
        assert!(combined_loss(&mut g, lc, ls, -0.1).is_err());
    }

    #[test]
    fn pair_distance() {
        let a = t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 1.0, 1.0]);
        assert_eq!(mean_pair_distance(&a, &b).unwrap(), 2.5);
    }
}
