//! Central finite-difference checks of every differentiable primitive.
//!
//! Each check builds a fresh 64-bit graph, reduces the op's output to a scalar
//! through a fixed random weighting, and compares the back-propagated
//! gradient of every input element against `(f(x+h) - f(x-h)) / 2h`.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Conv2dSpec, Graph, Var};
use crate::nn::{self, ModelConfig, ModelParams};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::train::{classification_loss, combined_loss, consistency_loss};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Relative error with a small absolute floor so near-zero gradients don't
/// blow up the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub elements: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn evaluate(f: &Builder, inputs: &[Tensor<f64>], weights: &Option<Tensor<f64>>) -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    let loss = match weights {
        Some(w) => {
            let w = g.constant(w.clone());
            let p = g.mul(out, w)?;
            g.sum_all(p)
        }
        None => out,
    };
    Ok((g, vars, loss))
}

/// Checks `f` with respect to every element of every input.
///
/// Non-scalar outputs are contracted with random weights drawn from `seed`.
pub fn check(name: &str, inputs: Vec<Tensor<f64>>, seed: u64, f: &Builder) -> Result<CheckReport> {
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let weights = if probe.iter().product::<usize>() == 1 {
        None
    } else {
        let mut rng = stream(seed, &[0x5eed]);
        let n = probe.iter().product();
        Some(Tensor::new(probe, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?)
    };

    let (mut g, vars, loss) = evaluate(f, &inputs, &weights)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let scalar = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, loss) = evaluate(f, inputs, &weights)?;
        g.value(loss).item()
    };
    let mut worst: f64 = 0.0;
    let mut elements = 0;
    let mut work = inputs.clone();
    for (k, grads) in analytic.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + STEP;
            let plus = scalar(&work)?;
            work[k].data_mut()[i] = x0 - STEP;
            let minus = scalar(&work)?;
            work[k].data_mut()[i] = x0;
            worst = worst.max(rel_err(grads[i], (plus - minus) / (2.0 * STEP)));
            elements += 1;
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        elements,
    })
}

/// Uniform values in `[-2, 2]`; with `away_from_zero` every magnitude is at
/// least 0.1 so kinked activations are not probed at their kink.
pub fn random_tensor(shape: &[usize], seed: u64, away_from_zero: bool) -> Tensor<f64> {
    let mut rng = stream(seed, &[shape.iter().product::<usize>() as u64]);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if !away_from_zero || v.abs() >= 0.1 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("nonzero shape")
}

/// Configuration small enough for element-wise checks of the whole model,
/// yet with two stages so the downsampling layer is exercised.
pub fn tiny_model_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        stem_channels: 4,
        stage_blocks: vec![1, 1],
        stage_dims: vec![4, 6],
        latent_dim: 5,
        hidden_dim: 6,
        num_classes,
    }
}

fn unflatten(model: &ModelParams<f64>, vars: &[Var]) -> nn::Weights<Var> {
    let mut it = vars.iter();
    model
        .weights
        .try_map(|_, _| Ok(*it.next().expect("one var per parameter")))
        .expect("infallible")
}

/// Runs the whole suite. Order is stable.
pub fn run_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let r = |shape: &[usize], k: u64| random_tensor(shape, seed.wrapping_mul(31).wrapping_add(k), false);
    let rk = |shape: &[usize], k: u64| random_tensor(shape, seed.wrapping_mul(31).wrapping_add(k), true);
    let mut out = Vec::new();

    out.push(check("add", vec![r(&[3, 4], 1), r(&[3, 4], 2)], seed, &|g, v| g.add(v[0], v[1]))?);
    out.push(check("sub", vec![r(&[3, 4], 3), r(&[3, 4], 4)], seed, &|g, v| g.sub(v[0], v[1]))?);
    out.push(check("mul", vec![r(&[3, 4], 5), r(&[3, 4], 6)], seed, &|g, v| g.mul(v[0], v[1]))?);
    out.push(check("scale", vec![r(&[5], 7)], seed, &|g, v| Ok(g.scale(v[0], -1.7)))?);
    out.push(check(
        "conv2d",
        vec![r(&[2, 3, 6, 6], 8), r(&[4, 3, 3, 3], 9), r(&[4], 10)],
        seed,
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec { stride: 2, padding: 1, groups: 1 }),
    )?);
    out.push(check(
        "conv2d_depthwise",
        vec![r(&[2, 4, 7, 7], 11), r(&[4, 1, 7, 7], 12), r(&[4], 13)],
        seed,
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec { stride: 1, padding: 3, groups: 4 }),
    )?);
    out.push(check(
        "linear",
        vec![r(&[4, 10], 14), r(&[6, 10], 15), r(&[6], 16)],
        seed,
        &|g, v| g.linear(v[0], v[1], Some(v[2])),
    )?);
    out.push(check(
        "layer_norm",
        vec![r(&[3, 8], 17), r(&[8], 18), r(&[8], 19)],
        seed,
        &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6),
    )?);
    out.push(check("gelu", vec![r(&[3, 5], 20)], seed, &|g, v| Ok(g.gelu(v[0])))?);
    out.push(check("relu", vec![rk(&[3, 5], 21)], seed, &|g, v| Ok(g.relu(v[0])))?);
    out.push(check("softmax", vec![r(&[3, 5], 22)], seed, &|g, v| Ok(g.softmax(v[0])))?);
    out.push(check("log_softmax", vec![r(&[3, 5], 23)], seed, &|g, v| Ok(g.log_softmax(v[0])))?);
    out.push(check("sum_all", vec![r(&[2, 3], 24)], seed, &|g, v| Ok(g.sum_all(v[0])))?);
    out.push(check("mean_all", vec![r(&[2, 3], 25)], seed, &|g, v| Ok(g.mean_all(v[0])))?);
    out.push(check("global_avg_pool", vec![r(&[2, 3, 4, 4], 26)], seed, &|g, v| g.global_avg_pool(v[0]))?);
    out.push(check("reshape_permute", vec![r(&[2, 3, 4], 27)], seed, &|g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        g.reshape(p, vec![4, 6])
    })?);
    out.push(check("concat_slice", vec![r(&[2, 3], 28), r(&[3, 3], 29)], seed, &|g, v| {
        let c = g.concat(&[v[0], v[1]])?;
        g.slice_rows(c, 1, 4)
    })?);
    out.push(check("consistency_loss", vec![r(&[4, 5], 30), r(&[4, 5], 31)], seed, &|g, v| {
        consistency_loss(g, v[0], v[1])
    })?);
    out.push(check("classification_loss", vec![r(&[4, 3], 32)], seed, &|g, v| {
        let y = g.constant(Tensor::from_f64(
            vec![4, 3],
            &[1.0, 0.0, 0.0, 0.2, 0.5, 0.3, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        )?);
        classification_loss(g, v[0], y)
    })?);

    let cfg = tiny_model_config(3);
    let model = ModelParams::<f64>::init(cfg.clone(), seed)?;
    let params: Vec<Tensor<f64>> = model.weights.iter().cloned().collect();

    let block_cfg = cfg.clone();
    let mut block_inputs = vec![r(&[2, 3, 16, 16], 33)];
    block_inputs.extend(params.iter().cloned());
    out.push(check("encoder_forward", block_inputs, seed, &|g, v| {
        let w = unflatten(&model, &v[1..]);
        let f = nn::encoder_forward(g, &w, &block_cfg, v[0])?;
        Ok(g.sum_all(f))
    })?);

    let d = cfg.feature_dim();
    out.push(check(
        "latent_project",
        vec![r(&[3, d], 34), model.weights.fc_latent.weight.clone(), model.weights.fc_latent.bias.clone()],
        seed,
        &|g, v| g.linear(v[0], v[1], Some(v[2])),
    )?);

    // Full adaptation objective: two views of two images, soft targets,
    // consistency on the latent, combined with lambda = 0.5.
    let views = r(&[4, 3, 16, 16], 35);
    let targets = Tensor::from_f64(
        vec![4, 3],
        &[0.7, 0.2, 0.1, 0.1, 0.1, 0.8, 0.7, 0.2, 0.1, 0.1, 0.1, 0.8],
    )?;
    out.push(check("model_combined_loss", params, seed, &|g, v| {
        let w = unflatten(&model, v);
        let x = g.constant(views.clone());
        let fw = nn::forward(g, &w, &cfg, x)?;
        let za = g.slice_rows(fw.latent, 0, 2)?;
        let zb = g.slice_rows(fw.latent, 2, 4)?;
        let l_cons = consistency_loss(g, za, zb)?;
        let y = g.constant(targets.clone());
        let l_class = classification_loss(g, fw.logits, y)?;
        combined_loss(g, l_class, l_cons, 0.5)
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(rel_err(1e-9, 0.0) < 1e-5);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach hides the dependence from backward, so the analytic gradient is 0
        let rep = check("broken", vec![random_tensor(&[3], 1, false)], 0, &|g, v| {
            let d = g.detach(v[0]);
            g.mul(v[0], d)
        })
        .unwrap();
        assert!(!rep.passed());
    }

    #[test]
    fn linear_passes() {
        let rep = check(
            "linear",
            vec![random_tensor(&[2, 3], 1, false), random_tensor(&[4, 3], 2, false)],
            0,
            &|g, v| g.linear(v[0], v[1], None),
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert_eq!(rep.elements, 18);
    }
}
