//! Source training and source-free target adaptation.

pub mod loss;
pub mod optim;

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentSpec};
use crate::data::{iterate_batches, DatasetSplit};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::ImageSample;
use crate::nn::{forward, ModelParams};
use crate::tensor::{Real, Tensor};

pub use loss::{
    classification_loss, classification_loss_from_probs, combined_loss, consistency_loss,
    mean_pair_distance,
};
pub use optim::{adam_step, step_lr, OptimizerState};

/// What supervises the classification term while adapting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptClassMode {
    /// Soft targets from the model as it was when adaptation started,
    /// evaluated on the clean image.
    SelfDistill,
    /// True target labels. For diagnostics only; breaks the source-free,
    /// label-free setting.
    LabeledProbe,
    /// No classification term.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Weight of the consistency term.
    pub lambda: f64,
    pub epochs: usize,
    pub lr_step_epochs: usize,
    pub lr_step_factor: f64,
    pub seed: u64,
    pub adapt_class_mode: AdaptClassMode,
    /// Train the source model on the two augmented views of each image
    /// instead of the clean image.
    pub source_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 4,
            lambda: 0.5,
            epochs: 20,
            lr_step_epochs: 15,
            lr_step_factor: 0.1,
            seed: 0,
            adapt_class_mode: AdaptClassMode::SelfDistill,
            source_augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if !(self.lr_step_factor > 0.0 && self.lr_step_factor.is_finite()) {
            return bad("lr_step_factor must be > 0");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(self.learning_rate, epoch, self.lr_step_epochs, self.lr_step_factor)
    }
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub l_class: f64,
    pub l_cons: f64,
    pub combined: f64,
    pub mean_pair_dist: Option<f64>,
    pub accuracy: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,lr,l_class,l_cons,combined,mean_pair_dist,accuracy";

pub fn log_to_csv(rows: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.lr,
            r.l_class,
            r.l_cons,
            r.combined,
            opt(r.mean_pair_dist),
            opt(r.accuracy)
        );
    }
    out
}

pub fn write_log_csv(path: &Path, rows: &[EpochLog]) -> Result<()> {
    std::fs::write(path, log_to_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Stacks images into an `[N, 3, S, S]` tensor.
pub fn batch_tensor<T: Real>(samples: &[&ImageSample]) -> Result<Tensor<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
    let (w, h) = (first.image.width, first.image.height);
    let mut data = Vec::with_capacity(samples.len() * 3 * w * h);
    for s in samples {
        if (s.image.width, s.image.height) != (w, h) {
            return Err(Error::Dimension(format!(
                "batch mixes {w}x{h} and {}x{} images",
                s.image.width, s.image.height
            )));
        }
        data.extend(s.image.to_chw().into_iter().map(|v| T::from_f64(v as f64)));
    }
    Tensor::new(vec![samples.len(), 3, h, w], data)
}

fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Config(format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l] = T::one();
    }
    Tensor::new(vec![labels.len(), classes], data)
}

fn argmax_rows<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    let c = t.shape()[1];
    t.data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn check_classes<T: Real>(model: &ModelParams<T>, split: &DatasetSplit) -> Result<()> {
    if !split.classes.is_empty() && split.num_classes() != model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model predicts {}",
            split.num_classes(),
            model.config.num_classes
        )));
    }
    Ok(())
}

/// Supervised training on a labeled source split, minimizing cross-entropy.
/// With `cfg.source_augment`, every batch holds both views of each image.
pub fn train_source<T: Real>(
    model: &mut ModelParams<T>,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    augment: &AugmentSpec,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    augment.validate()?;
    if !split.is_labeled() {
        return Err(Error::Config("source training needs a fully labeled split".into()));
    }
    check_classes(model, split)?;
    let classes = model.config.num_classes;
    let mut state = OptimizerState::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in iterate_batches(split.len(), cfg.batch_size, cfg.seed, epoch as u64)? {
            let clean: Vec<&ImageSample> = batch.iter().map(|&i| &split.samples[i]).collect();
            let views: Vec<ImageSample> = if cfg.source_augment {
                let pairs: Vec<(ImageSample, ImageSample)> = clean
                    .par_iter()
                    .map(|s| make_views(s, augment, cfg.seed, epoch as u64))
                    .collect();
                let (a, b): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
                a.into_iter().chain(b).collect()
            } else {
                Vec::new()
            };
            let samples: Vec<&ImageSample> = if cfg.source_augment { views.iter().collect() } else { clean };
            let labels: Vec<usize> = samples.iter().map(|s| s.label.expect("checked")).collect();

            let mut g = Graph::new();
            let w = model.bind(&mut g);
            let x = g.constant(batch_tensor(&samples)?);
            let y = g.constant(one_hot(&labels, classes)?);
            let out = forward(&mut g, &w, &model.config, x)?;
            let loss = classification_loss(&mut g, out.logits, y)?;
            g.backward(loss)?;
            model.accumulate_grads(&g, &w)?;

            loss_sum += g.value(loss).item()?.as_f64() * labels.len() as f64;
            seen += labels.len();
            correct += argmax_rows(g.value(out.logits))
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            step(model, &mut state, lr, cfg.weight_decay)?;
        }
        let mean = loss_sum / seen as f64;
        let acc = correct as f64 / seen as f64;
        log::info!("source epoch {epoch}: loss {mean:.5} acc {acc:.4}");
        log.push(EpochLog {
            epoch,
            lr,
            l_class: mean,
            l_cons: 0.0,
            combined: mean,
            mean_pair_dist: None,
            accuracy: Some(acc),
        });
    }
    Ok(log)
}

fn step<T: Real>(model: &mut ModelParams<T>, state: &mut OptimizerState<T>, lr: f64, wd: f64) -> Result<()> {
    let names = model.weights.names();
    adam_step(
        names.iter().map(String::as_str).zip(model.weights.iter_mut()),
        state,
        lr,
        wd,
    )?;
    if !model.all_finite() {
        return Err(Error::Runtime("non-finite parameter after optimizer step".into()));
    }
    Ok(())
}

/// Views and classification targets for one adaptation batch.
#[derive(Clone, Debug)]
pub struct AdaptBatch<T> {
    /// `[2N, 3, S, S]`: all `a` views followed by all `b` views.
    pub views: Tensor<T>,
    /// `[2N, C]` targets for both views, absent in `Off` mode.
    pub targets: Option<Tensor<T>>,
    pub n: usize,
}

/// Loss terms of one adaptation batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub l_class: f64,
    pub l_cons: f64,
    pub combined: f64,
    pub mean_pair_dist: f64,
    pub correct: Option<usize>,
}

/// Builds views for `samples` and, in self-distillation mode, soft targets
/// from `teacher`'s prediction on the clean images.
pub fn prepare_adapt_batch<T: Real>(
    teacher: &ModelParams<T>,
    samples: &[&ImageSample],
    cfg: &TrainConfig,
    augment: &AugmentSpec,
    epoch: u64,
) -> Result<AdaptBatch<T>> {
    let views: Vec<(ImageSample, ImageSample)> = samples
        .par_iter()
        .map(|s| make_views(s, augment, cfg.seed, epoch))
        .collect();
    let mut all: Vec<&ImageSample> = views.iter().map(|v| &v.0).collect();
    all.extend(views.iter().map(|v| &v.1));
    let n = samples.len();
    let targets = match cfg.adapt_class_mode {
        AdaptClassMode::Off => None,
        AdaptClassMode::SelfDistill => {
            let probs = teacher.predict(batch_tensor(samples)?)?.probs;
            let mut data = probs.data().to_vec();
            data.extend_from_slice(probs.data());
            Some(Tensor::new(vec![2 * n, teacher.config.num_classes], data)?)
        }
        AdaptClassMode::LabeledProbe => {
            let labels = samples
                .iter()
                .map(|s| s.label.ok_or_else(|| Error::Config("labeled_probe needs target labels".into())))
                .collect::<Result<Vec<_>>>()?;
            let mut twice = labels.clone();
            twice.extend(&labels);
            Some(one_hot(&twice, teacher.config.num_classes)?)
        }
    };
    Ok(AdaptBatch {
        views: batch_tensor(&all)?,
        targets,
        n,
    })
}

/// Forward pass of the adaptation objective; returns the graph so the caller
/// can back-propagate.
fn adapt_objective<T: Real>(
    model: &ModelParams<T>,
    batch: &AdaptBatch<T>,
    lambda: f64,
    trainable: bool,
) -> Result<(Graph<T>, crate::nn::Weights<crate::graph::Var>, crate::graph::Var, BatchStats)> {
    let mut g = Graph::new();
    let w = if trainable {
        model.bind(&mut g)
    } else {
        model.bind_frozen(&mut g)
    };
    let x = g.constant(batch.views.clone());
    let out = forward(&mut g, &w, &model.config, x)?;
    let n = batch.n;
    let z_a = g.slice_rows(out.latent, 0, n)?;
    let z_b = g.slice_rows(out.latent, n, 2 * n)?;
    let l_cons = consistency_loss(&mut g, z_a, z_b)?;
    let (l_class, correct) = match &batch.targets {
        Some(t) => {
            let y = g.constant(t.clone());
            let l = classification_loss(&mut g, out.logits, y)?;
            let pred = argmax_rows(g.value(out.logits));
            let truth = argmax_rows(t);
            (l, Some(pred.iter().zip(&truth).filter(|(p, t)| p == t).count()))
        }
        None => (g.constant(Tensor::scalar(T::zero())), None),
    };
    let total = combined_loss(&mut g, l_class, l_cons, lambda)?;
    let stats = BatchStats {
        l_class: g.value(l_class).item()?.as_f64(),
        l_cons: g.value(l_cons).item()?.as_f64(),
        combined: g.value(total).item()?.as_f64(),
        mean_pair_dist: mean_pair_distance(g.value(z_a), g.value(z_b))?,
        correct,
    };
    Ok((g, w, total, stats))
}

/// Loss terms of `batch` under the current parameters, without a step.
pub fn evaluate_adapt_batch<T: Real>(model: &ModelParams<T>, batch: &AdaptBatch<T>, lambda: f64) -> Result<BatchStats> {
    Ok(adapt_objective(model, batch, lambda, false)?.3)
}

/// One optimizer step on the combined objective. Returns the pre-step terms.
pub fn adapt_step<T: Real>(
    model: &mut ModelParams<T>,
    state: &mut OptimizerState<T>,
    batch: &AdaptBatch<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<BatchStats> {
    let (mut g, w, total, stats) = adapt_objective(model, batch, cfg.lambda, true)?;
    g.backward(total)?;
    model.accumulate_grads(&g, &w)?;
    step(model, state, lr, cfg.weight_decay)?;
    Ok(stats)
}

/// Source-free adaptation: consistency between the two augmented views of
/// each target image plus the classification term chosen by
/// `cfg.adapt_class_mode`. Reads nothing but `model`, `split` and the configs.
pub fn adapt_target<T: Real>(
    model: &mut ModelParams<T>,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    augment: &AugmentSpec,
) -> Result<Vec<EpochLog>> {
    adapt_target_with(model, split, cfg, augment, |_, _| Ok(()))
}

/// [`adapt_target`] with a hook called after every epoch.
pub fn adapt_target_with<T: Real>(
    model: &mut ModelParams<T>,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    augment: &AugmentSpec,
    mut on_epoch: impl FnMut(&ModelParams<T>, &EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    augment.validate()?;
    if split.is_empty() {
        return Err(Error::EmptyDataset(format!("target split `{}` is empty", split.domain)));
    }
    check_classes(model, split)?;
    let teacher = model.clone();
    let mut state = OptimizerState::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut lc, mut ls, mut tot, mut dist) = (0.0, 0.0, 0.0, 0.0);
        let mut correct = None;
        for batch in iterate_batches(split.len(), cfg.batch_size, cfg.seed, epoch as u64)? {
            let samples: Vec<&ImageSample> = batch.iter().map(|&i| &split.samples[i]).collect();
            let prepared = prepare_adapt_batch(&teacher, &samples, cfg, augment, epoch as u64)?;
            let s = adapt_step(model, &mut state, &prepared, cfg, lr)?;
            let k = samples.len() as f64;
            lc += s.l_class * k;
            ls += s.l_cons * k;
            tot += s.combined * k;
            dist += s.mean_pair_dist * k;
            if cfg.adapt_class_mode == AdaptClassMode::LabeledProbe {
                *correct.get_or_insert(0) += s.correct.unwrap_or(0);
            }
        }
        let n = split.len() as f64;
        log::info!(
            "adapt epoch {epoch}: l_class {:.5} l_cons {:.5} pair_dist {:.5}",
            lc / n,
            ls / n,
            dist / n
        );
        log.push(EpochLog {
            epoch,
            lr,
            l_class: lc / n,
            l_cons: ls / n,
            combined: tot / n,
            mean_pair_dist: Some(dist / n),
            accuracy: correct.map(|c| c as f64 / (2.0 * n)),
        });
        on_epoch(model, log.last().expect("just pushed"))?;
    }
    Ok(log)
}

/// Top-1 accuracy on a labeled split, evaluated on clean images.
pub fn accuracy<T: Real>(model: &ModelParams<T>, split: &DatasetSplit) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptyDataset(format!("split `{}` is empty", split.domain)));
    }
    if !split.is_labeled() {
        return Err(Error::Config("accuracy needs a labeled split".into()));
    }
    let mut correct = 0;
    for chunk in split.samples.chunks(64) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let probs = model.predict(batch_tensor(&refs)?)?.probs;
        correct += argmax_rows(&probs)
            .iter()
            .zip(chunk)
            .filter(|(p, s)| Some(**p) == s.label)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Latent vectors `z` for every sample, in split order.
pub fn embed<T: Real>(model: &ModelParams<T>, split: &DatasetSplit) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(split.len());
    for chunk in split.samples.chunks(64) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let z = model.predict(batch_tensor(&refs)?)?.latent;
        let l = z.shape()[1];
        out.extend(z.data().chunks(l).map(|r| r.iter().map(|v| v.as_f64()).collect()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::RgbImage;
    use crate::nn::ModelConfig;

    fn tiny_config(classes: usize) -> ModelConfig {
        ModelConfig {
            image_size: 8,
            stem_channels: 4,
            stage_blocks: vec![1],
            stage_dims: vec![4],
            latent_dim: 4,
            hidden_dim: 8,
            num_classes: classes,
        }
    }

    fn toy_split(labeled: bool) -> DatasetSplit {
        let samples = (0..6)
            .map(|i| {
                let c = i % 2;
                let v = if c == 0 { 0.2 } else { 0.8 };
                ImageSample {
                    image: RgbImage::filled(8, 8, [v, v * 0.5, 1.0 - v]),
                    label: labeled.then_some(c),
                    domain: "toy".into(),
                    id: format!("{c}/{i}.png"),
                }
            })
            .collect();
        DatasetSplit {
            samples,
            classes: vec!["a".into(), "b".into()],
            domain: "toy".into(),
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = ModelParams::<f32>::init(tiny_config(2), 0).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train_source(&mut m, &toy_split(true), &cfg, &AugmentSpec::default()).unwrap().is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn unlabeled_source_is_config_error() {
        let mut m = ModelParams::<f32>::init(tiny_config(2), 0).unwrap();
        let err = train_source(&mut m, &toy_split(false), &TrainConfig::default(), &AugmentSpec::default()).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn null_objective_leaves_parameters_unchanged() {
        let mut m = ModelParams::<f32>::init(tiny_config(2), 0).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            lambda: 0.0,
            weight_decay: 0.0,
            epochs: 3,
            adapt_class_mode: AdaptClassMode::Off,
            ..Default::default()
        };
        let log = adapt_target(&mut m, &toy_split(false), &cfg, &AugmentSpec::default()).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(m.weights, before.weights);
        assert!(log.iter().all(|r| r.combined == 0.0));
    }

    #[test]
    fn labeled_probe_requires_labels() {
        let mut m = ModelParams::<f32>::init(tiny_config(2), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            adapt_class_mode: AdaptClassMode::LabeledProbe,
            ..Default::default()
        };
        assert!(adapt_target(&mut m, &toy_split(false), &cfg, &AugmentSpec::default()).is_err());
        assert!(adapt_target(&mut m, &toy_split(true), &cfg, &AugmentSpec::default()).is_ok());
    }

    #[test]
    fn accuracy_counts() {
        let m = ModelParams::<f32>::init(tiny_config(2), 0).unwrap();
        let split = toy_split(true);
        let acc = accuracy(&m, &split).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let empty = DatasetSplit {
            samples: vec![],
            classes: vec![],
            domain: "x".into(),
        };
        assert!(accuracy(&m, &empty).is_err());
    }

    #[test]
    fn log_csv_format() {
        let rows = vec![EpochLog {
            epoch: 0,
            lr: 1e-4,
            l_class: 0.5,
            l_cons: 0.0,
            combined: 0.5,
            mean_pair_dist: None,
            accuracy: Some(0.75),
        }];
        assert_eq!(log_to_csv(&rows), format!("{LOG_HEADER}\n0,0.0001,0.5,0,0.5,,0.75\n"));
    }
}
