//! The classifier: a scaled-down ConvNeXt encoder, a linear latent
//! projection, and a two-layer ReLU head ending in a softmax.
//!
//! Parameters live in [`Weights`], which is generic over the leaf type so the
//! same layout holds owned tensors ([`ModelParams`]) and graph handles
//! (`Weights<Var>`) during a forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Conv2dSpec, Graph, Var};
use crate::tensor::{Real, Tensor};

pub const IN_CHANNELS: usize = 3;
pub const STEM_PATCH: usize = 4;
pub const DOWNSAMPLE: usize = 2;
pub const DW_KERNEL: usize = 7;
pub const EXPANSION: usize = 4;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub stem_channels: usize,
    pub stage_blocks: Vec<usize>,
    pub stage_dims: Vec<usize>,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Zero means "take it from the training data".
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            stem_channels: 32,
            stage_blocks: vec![2, 2],
            stage_dims: vec![32, 64],
            latent_dim: 32,
            hidden_dim: 64,
            num_classes: 0,
        }
    }
}

impl ModelConfig {
    /// Width `d` of the pooled encoder output.
    pub fn feature_dim(&self) -> usize {
        *self.stage_dims.last().unwrap_or(&self.stem_channels)
    }

    /// Side length of the feature map entering stage `i`.
    pub fn stage_resolution(&self, i: usize) -> usize {
        self.image_size / STEM_PATCH / DOWNSAMPLE.pow(i as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.stage_dims.is_empty() || self.stage_dims.len() != self.stage_blocks.len() {
            return err(format!(
                "stage_blocks ({}) and stage_dims ({}) must be non-empty and equally long",
                self.stage_blocks.len(),
                self.stage_dims.len()
            ));
        }
        if self.stage_dims.contains(&0) || self.stage_blocks.contains(&0) {
            return err("stage_dims and stage_blocks entries must be >= 1".into());
        }
        if self.stem_channels == 0 || self.latent_dim == 0 || self.hidden_dim == 0 {
            return err("stem_channels, latent_dim and hidden_dim must be >= 1".into());
        }
        if self.num_classes == 0 {
            return err("num_classes must be >= 1".into());
        }
        if self.stem_channels != self.stage_dims[0] {
            return err(format!(
                "stem_channels ({}) must equal stage_dims[0] ({})",
                self.stem_channels, self.stage_dims[0]
            ));
        }
        let reduction = STEM_PATCH * DOWNSAMPLE.pow(self.stage_dims.len() as u32 - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(reduction) {
            return err(format!(
                "image_size {} must be a positive multiple of {reduction}",
                self.image_size
            ));
        }
        Ok(())
    }
}

/// A weight/bias pair. Layer norms store gamma as `weight` and beta as `bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub dwconv: Affine<P>,
    pub norm: Affine<P>,
    pub pwconv1: Affine<P>,
    pub pwconv2: Affine<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<P> {
    pub downsample: Option<Affine<P>>,
    pub blocks: Vec<Block<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<P> {
    pub stem: Affine<P>,
    pub stages: Vec<Stage<P>>,
    pub norm: Affine<P>,
    pub fc_latent: Affine<P>,
    pub head_fc1: Affine<P>,
    pub head_fc2: Affine<P>,
}

impl<P> Affine<P> {
    fn try_map<Q>(&self, name: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<Affine<Q>> {
        Ok(Affine {
            weight: f(&format!("{name}.weight"), &self.weight)?,
            bias: f(&format!("{name}.bias"), &self.bias)?,
        })
    }
}

impl<P> Weights<P> {
    /// Maps every parameter in canonical order, passing its dotted name.
    pub fn try_map<Q>(&self, mut f: impl FnMut(&str, &P) -> Result<Q>) -> Result<Weights<Q>> {
        let f = &mut f;
        let stem = self.stem.try_map("stem", f)?;
        let mut stages = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            let downsample = match &s.downsample {
                Some(d) => Some(d.try_map(&format!("stages.{i}.downsample"), f)?),
                None => None,
            };
            let mut blocks = Vec::with_capacity(s.blocks.len());
            for (j, b) in s.blocks.iter().enumerate() {
                let p = format!("stages.{i}.blocks.{j}");
                blocks.push(Block {
                    dwconv: b.dwconv.try_map(&format!("{p}.dwconv"), f)?,
                    norm: b.norm.try_map(&format!("{p}.norm"), f)?,
                    pwconv1: b.pwconv1.try_map(&format!("{p}.pwconv1"), f)?,
                    pwconv2: b.pwconv2.try_map(&format!("{p}.pwconv2"), f)?,
                });
            }
            stages.push(Stage { downsample, blocks });
        }
        Ok(Weights {
            stem,
            stages,
            norm: self.norm.try_map("norm", f)?,
            fc_latent: self.fc_latent.try_map("fc_latent", f)?,
            head_fc1: self.head_fc1.try_map("head.fc1", f)?,
            head_fc2: self.head_fc2.try_map("head.fc2", f)?,
        })
    }

    /// Parameters in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = &P> {
        fn push<'a, P>(out: &mut Vec<&'a P>, a: &'a Affine<P>) {
            out.push(&a.weight);
            out.push(&a.bias);
        }
        let mut out = Vec::new();
        push(&mut out, &self.stem);
        for s in &self.stages {
            if let Some(d) = &s.downsample {
                push(&mut out, d);
            }
            for b in &s.blocks {
                push(&mut out, &b.dwconv);
                push(&mut out, &b.norm);
                push(&mut out, &b.pwconv1);
                push(&mut out, &b.pwconv2);
            }
        }
        push(&mut out, &self.norm);
        push(&mut out, &self.fc_latent);
        push(&mut out, &self.head_fc1);
        push(&mut out, &self.head_fc2);
        out.into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut P> {
        let mut out: Vec<&mut P> = Vec::new();
        fn push<'a, P>(out: &mut Vec<&'a mut P>, a: &'a mut Affine<P>) {
            out.push(&mut a.weight);
            out.push(&mut a.bias);
        }
        push(&mut out, &mut self.stem);
        for s in &mut self.stages {
            if let Some(d) = &mut s.downsample {
                push(&mut out, d);
            }
            for b in &mut s.blocks {
                push(&mut out, &mut b.dwconv);
                push(&mut out, &mut b.norm);
                push(&mut out, &mut b.pwconv1);
                push(&mut out, &mut b.pwconv2);
            }
        }
        push(&mut out, &mut self.norm);
        push(&mut out, &mut self.fc_latent);
        push(&mut out, &mut self.head_fc1);
        push(&mut out, &mut self.head_fc2);
        out.into_iter()
    }

    /// Dotted parameter names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.try_map(|n, _| {
            names.push(n.to_string());
            Ok(())
        })
        .expect("infallible");
        names
    }
}

/// Owned model parameters together with the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub weights: Weights<Tensor<T>>,
}

/// Shapes of every parameter for `cfg`, in canonical layout.
pub fn param_shapes(cfg: &ModelConfig) -> Weights<Vec<usize>> {
    let aff = |w: Vec<usize>, b: Vec<usize>| Affine { weight: w, bias: b };
    let norm = |c: usize| aff(vec![c], vec![c]);
    let stages = cfg
        .stage_dims
        .iter()
        .zip(&cfg.stage_blocks)
        .enumerate()
        .map(|(i, (&dim, &nblocks))| Stage {
            downsample: (i > 0).then(|| {
                aff(vec![dim, cfg.stage_dims[i - 1], DOWNSAMPLE, DOWNSAMPLE], vec![dim])
            }),
            blocks: (0..nblocks)
                .map(|_| Block {
                    dwconv: aff(vec![dim, 1, DW_KERNEL, DW_KERNEL], vec![dim]),
                    norm: norm(dim),
                    pwconv1: aff(vec![EXPANSION * dim, dim], vec![EXPANSION * dim]),
                    pwconv2: aff(vec![dim, EXPANSION * dim], vec![dim]),
                })
                .collect(),
        })
        .collect();
    let d = cfg.feature_dim();
    Weights {
        stem: aff(
            vec![cfg.stem_channels, IN_CHANNELS, STEM_PATCH, STEM_PATCH],
            vec![cfg.stem_channels],
        ),
        stages,
        norm: norm(d),
        fc_latent: aff(vec![cfg.latent_dim, d], vec![cfg.latent_dim]),
        head_fc1: aff(vec![cfg.hidden_dim, cfg.latent_dim], vec![cfg.hidden_dim]),
        head_fc2: aff(vec![cfg.num_classes, cfg.hidden_dim], vec![cfg.num_classes]),
    }
}

fn is_norm(name: &str) -> bool {
    name.ends_with("norm.weight") || name.ends_with("norm.bias")
}

impl<T: Real> ModelParams<T> {
    /// Fan-in scaled uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = param_shapes(&config).try_map(|name, shape| {
            let n: usize = shape.iter().product();
            let data = if is_norm(name) {
                vec![if name.ends_with(".weight") { T::one() } else { T::zero() }; n]
            } else if name.ends_with(".bias") {
                vec![T::zero(); n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n)
                    .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                    .collect()
            };
            Ok(Tensor::new(shape.clone(), data)?.with_grad())
        })?;
        Ok(ModelParams { config, weights })
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.weights.names().into_iter().zip(self.weights.iter()).collect()
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Weights<Var> {
        self.weights.try_map(|_, t| Ok(g.param(t))).expect("infallible")
    }

    /// Registers every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Weights<Var> {
        self.weights
            .try_map(|_, t| Ok(g.constant(t.clone())))
            .expect("infallible")
    }

    /// Adds the gradients computed in `g` into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, vars: &Weights<Var>) -> Result<()> {
        for (t, v) in self.weights.iter_mut().zip(vars.iter()) {
            g.accumulate_into(*v, t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.weights.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            weights: self
                .weights
                .try_map(|_, t| Ok(t.cast::<U>()))
                .expect("infallible"),
        }
    }

    /// Runs the full model without recording gradients.
    pub fn predict(&self, images: Tensor<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let w = self.bind_frozen(&mut g);
        let x = g.constant(images);
        let out = forward(&mut g, &w, &self.config, x)?;
        Ok(Prediction {
            features: g.value(out.features).clone(),
            latent: g.value(out.latent).clone(),
            logits: g.value(out.logits).clone(),
            probs: g.value(out.probs).clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub features: Tensor<T>,
    pub latent: Tensor<T>,
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

/// Graph handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub latent: Var,
    pub logits: Var,
    pub probs: Var,
}

/// Applies a layer norm over the channel axis of an NCHW map.
fn channel_norm<T: Real>(g: &mut Graph<T>, x: Var, norm: &Affine<Var>) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let nhwc = g.permute(x, &[0, 2, 3, 1])?;
    let rows = g.reshape(nhwc, vec![s[0] * s[2] * s[3], s[1]])?;
    let y = g.layer_norm(rows, norm.weight, norm.bias, LN_EPS)?;
    let y = g.reshape(y, vec![s[0], s[2], s[3], s[1]])?;
    g.permute(y, &[0, 3, 1, 2])
}

/// depthwise 7x7 -> LN -> expand x4 -> GELU -> project -> residual add.
pub fn block_forward<T: Real>(g: &mut Graph<T>, b: &Block<Var>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let y = g.conv2d(
        x,
        b.dwconv.weight,
        Some(b.dwconv.bias),
        Conv2dSpec {
            stride: 1,
            padding: DW_KERNEL / 2,
            groups: c,
        },
    )?;
    let y = g.permute(y, &[0, 2, 3, 1])?;
    let y = g.reshape(y, vec![n * h * w, c])?;
    let y = g.layer_norm(y, b.norm.weight, b.norm.bias, LN_EPS)?;
    let y = g.linear(y, b.pwconv1.weight, Some(b.pwconv1.bias))?;
    let y = g.gelu(y);
    let y = g.linear(y, b.pwconv2.weight, Some(b.pwconv2.bias))?;
    let y = g.reshape(y, vec![n, h, w, c])?;
    let y = g.permute(y, &[0, 3, 1, 2])?;
    g.add(x, y)
}

/// `[N, 3, S, S] -> [N, d]`.
pub fn encoder_forward<T: Real>(
    g: &mut Graph<T>,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    images: Var,
) -> Result<Var> {
    let s = g.shape(images);
    if s.len() != 4 || s[1] != IN_CHANNELS || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return dim_err(format!(
            "encoder expects [N, {IN_CHANNELS}, {0}, {0}] images, got {s:?}",
            cfg.image_size
        ));
    }
    let mut x = g.conv2d(
        images,
        w.stem.weight,
        Some(w.stem.bias),
        Conv2dSpec {
            stride: STEM_PATCH,
            ..Default::default()
        },
    )?;
    for stage in &w.stages {
        if let Some(ds) = &stage.downsample {
            x = g.conv2d(
                x,
                ds.weight,
                Some(ds.bias),
                Conv2dSpec {
                    stride: DOWNSAMPLE,
                    ..Default::default()
                },
            )?;
        }
        for b in &stage.blocks {
            x = block_forward(g, b, x)?;
        }
    }
    let x = channel_norm(g, x, &w.norm)?;
    g.global_avg_pool(x)
}

/// `z = W_l g + b_l`.
pub fn latent_project<T: Real>(g: &mut Graph<T>, w: &Weights<Var>, features: Var) -> Result<Var> {
    g.linear(features, w.fc_latent.weight, Some(w.fc_latent.bias))
}

/// Returns `(logits, probabilities)` from latent vectors.
pub fn classify<T: Real>(g: &mut Graph<T>, w: &Weights<Var>, z: Var) -> Result<(Var, Var)> {
    let h = g.linear(z, w.head_fc1.weight, Some(w.head_fc1.bias))?;
    let h = g.relu(h);
    let logits = g.linear(h, w.head_fc2.weight, Some(w.head_fc2.bias))?;
    let probs = g.softmax(logits);
    Ok((logits, probs))
}

pub fn forward<T: Real>(
    g: &mut Graph<T>,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    images: Var,
) -> Result<ForwardVars> {
    let features = encoder_forward(g, w, cfg, images)?;
    let latent = latent_project(g, w, features)?;
    let (logits, probs) = classify(g, w, latent)?;
    Ok(ForwardVars {
        features,
        latent,
        logits,
        probs,
    })
}
