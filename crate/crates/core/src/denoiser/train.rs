//! Backbone training, concept-embedding inversion and gradient verification.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ConceptKey, ConceptTable, EpsilonNet, Granularity, NoisePredictor};
use crate::error::{param, Error, Result};
use crate::nn::Adam;
use crate::rng::{gaussian_like, RngStream, StreamId};
use crate::schedule::{noise_to, NoiseSchedule};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Probability of replacing an example's concept with the null embedding.
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    /// Concept-inversion defaults: lr 5e-4, batch 4, 1000 steps.
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 4,
            steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            cond_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn backbone() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            steps: 5000,
            cond_dropout: 0.15,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return param("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return param("batch size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return param("condition dropout must lie in [0, 1]");
        }
        Ok(())
    }

    fn optimizer(&self, n: usize) -> Adam {
        Adam::new(n, self.lr, self.beta1, self.beta2, self.eps)
    }
}

/// One loss term: an image, its conditioning concept, and the stream that draws `(t, eps)`.
#[derive(Debug, Clone, Copy)]
pub struct LossItem<'a> {
    pub image: &'a ImageTensor,
    pub concept: ConceptKey,
    pub stream: RngStream,
}

/// `t ~ U{1..T}` then `eps ~ N(0, I)`, both from `stream`.
pub fn draw_timestep_and_noise(stream: &RngStream, schedule: &NoiseSchedule, like: &ImageTensor) -> (usize, ImageTensor) {
    let mut rng = stream.rng();
    let t = rng.random_range(1..=schedule.len());
    let eps = gaussian_like(&mut rng, like);
    (t, eps)
}

fn item_term<P: NoisePredictor>(net: &P, w: &[f64], item: &LossItem<'_>, schedule: &NoiseSchedule) -> Result<f64> {
    let (t, eps) = draw_timestep_and_noise(&item.stream, schedule, item.image);
    let x_t = noise_to(item.image, schedule.alpha_bar(t), &eps);
    let pred = net.predict(&x_t, t, w)?;
    Ok(pred.squared_distance(&eps))
}

/// Batch mean of `||eps - eps_theta(sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, t)||^2`.
pub fn loss_simple_items<P: NoisePredictor>(
    net: &P,
    table: &ConceptTable,
    items: &[LossItem<'_>],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if items.is_empty() {
        return param("loss needs a non-empty batch");
    }
    let mut total = 0.0;
    for item in items {
        total += item_term(net, table.get(item.concept)?, item, schedule)?;
    }
    Ok(total / items.len() as f64)
}

/// [`loss_simple_items`] with per-item streams derived from `rng` and the item position.
pub fn loss_simple<P: NoisePredictor>(
    net: &P,
    table: &ConceptTable,
    batch: &[(ImageTensor, ConceptKey)],
    schedule: &NoiseSchedule,
    rng: &RngStream,
) -> Result<f64> {
    let items: Vec<LossItem<'_>> = batch
        .iter()
        .enumerate()
        .map(|(i, (image, concept))| LossItem {
            image,
            concept: *concept,
            stream: rng.child("loss", i as u64, 0, 0),
        })
        .collect();
    loss_simple_items(net, table, &items, schedule)
}

/// Loss and gradient of one item; parameter gradients go to `param_grads` when given.
fn item_gradient(
    net: &EpsilonNet,
    w: &[f64],
    image: &ImageTensor,
    stream: &RngStream,
    schedule: &NoiseSchedule,
    scale: f64,
    param_grads: Option<&mut [f64]>,
) -> Result<(f64, Vec<f64>)> {
    let (t, eps) = draw_timestep_and_noise(stream, schedule, image);
    let x_t = noise_to(image, schedule.alpha_bar(t), &eps);
    let (pred, cache) = net.forward(&x_t, t, w)?;
    let diff = pred.zip_with(&eps, |p, e| p - e);
    let loss: f64 = diff.data.iter().map(|d| d * d).sum();
    let dout = diff.map(|d| 2.0 * scale * d);
    let dw = net.backward(&cache, &dout, param_grads);
    Ok((loss, dw))
}

/// Trains every network parameter on `dataset`; concept embeddings stay fixed.
pub fn train_denoiser(
    dataset: &[(ImageTensor, ConceptKey)],
    net: EpsilonNet,
    table: &ConceptTable,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<EpsilonNet> {
    train_denoiser_with(dataset, net, table, schedule, cfg, |_, _| {})
}

/// [`train_denoiser`] reporting `(step, batch loss)` after every step.
pub fn train_denoiser_with(
    dataset: &[(ImageTensor, ConceptKey)],
    mut net: EpsilonNet,
    table: &ConceptTable,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<EpsilonNet> {
    if dataset.is_empty() {
        return param("training dataset is empty");
    }
    cfg.validate()?;
    for (_, key) in dataset {
        table.get(*key)?;
    }
    let base = RngStream::new(cfg.seed, StreamId::new("backbone"));
    let mut opt = cfg.optimizer(net.num_params());
    let scale = 1.0 / cfg.batch_size as f64;
    let mut grads = vec![0.0; net.num_params()];
    for step in 0..cfg.steps {
        grads.fill(0.0);
        let mut rng = base.child("batch", 0, 0, step as u64).rng();
        let mut loss = 0.0;
        for b in 0..cfg.batch_size {
            let (image, key) = &dataset[rng.random_range(0..dataset.len())];
            let key = if rng.random::<f64>() < cfg.cond_dropout {
                ConceptKey::Null
            } else {
                *key
            };
            let stream = base.child("noise", b as u64, 0, step as u64);
            let (l, _) = item_gradient(&net, table.get(key)?, image, &stream, schedule, scale, Some(&mut grads))?;
            loss += l * scale;
        }
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDivergence { step });
        }
        opt.step(&mut net.params.values, &grads);
        if !net.params.is_finite() {
            return Err(Error::TrainingDivergence { step });
        }
        on_step(step, loss);
    }
    Ok(net)
}

/// The image, its 90/180/270-degree rotations, and its horizontal and vertical flips.
pub fn rotations_and_flips(image: &ImageTensor) -> Result<Vec<ImageTensor>> {
    if image.height != image.width {
        return param("rotation augmentation needs square images");
    }
    let r90 = image.rotate90();
    let r180 = r90.rotate90();
    let r270 = r180.rotate90();
    Ok(vec![image.clone(), r90, r180, r270, image.flip_horizontal(), image.flip_vertical()])
}

fn invert_one(
    net: &EpsilonNet,
    init: &[f64],
    images: &[ImageTensor],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    let mut w = init.to_vec();
    let mut opt = cfg.optimizer(w.len());
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let mut rng = stream.child("batch", 0, 0, step as u64).rng();
        let mut grad = vec![0.0; w.len()];
        for b in 0..cfg.batch_size {
            let image = &images[rng.random_range(0..images.len())];
            let noise = stream.child("noise", b as u64, 0, step as u64);
            let (loss, dw) = item_gradient(net, &w, image, &noise, schedule, scale, None)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDivergence { step });
            }
            for (g, d) in grad.iter_mut().zip(dw) {
                *g += d;
            }
        }
        opt.step(&mut w, &grad);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDivergence { step });
        }
    }
    Ok(w)
}

/// Learns new concept embeddings with the network frozen.
///
/// Each new embedding starts as a copy of the null embedding. Pooled granularity
/// learns `class:<c>` from all of a class's images; specific granularity learns
/// `image:<c>:<i>` from image `i` plus its rotations and flips. Every class must
/// have at least one image. With `cfg.steps == 0` the table is returned unchanged.
pub fn finetune_concepts(
    net: &EpsilonNet,
    table: &ConceptTable,
    class_images: &BTreeMap<u32, Vec<ImageTensor>>,
    granularity: Granularity,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<ConceptTable> {
    cfg.validate()?;
    if let Some((c, _)) = class_images.iter().find(|(_, imgs)| imgs.is_empty()) {
        return param(format!("class {c} has no images to learn from"));
    }
    if cfg.steps == 0 {
        return Ok(table.clone());
    }
    let init = table.null().to_vec();
    let mut out = table.clone();
    out.granularity = granularity;
    for (&class, images) in class_images {
        match granularity {
            Granularity::Pooled => {
                let stream = RngStream::new(cfg.seed, StreamId::at("invert", class as u64, u64::MAX, 0));
                let w = invert_one(net, &init, images, schedule, cfg, &stream)?;
                out.insert(ConceptKey::Class(class), w, true)?;
            }
            Granularity::Specific => {
                for (index, image) in images.iter().enumerate() {
                    let variants = rotations_and_flips(image)?;
                    let stream = RngStream::new(cfg.seed, StreamId::at("invert", class as u64, index as u64, 0));
                    let w = invert_one(net, &init, &variants, schedule, cfg, &stream)?;
                    out.insert(ConceptKey::Image { class, index: index as u32 }, w, true)?;
                }
            }
        }
    }
    Ok(out)
}

/// Which coordinates [`gradient_check`] perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckScope {
    /// A random subset of network parameters plus every coordinate of one embedding.
    Full { param_coords: usize },
    /// Only the embedding, backpropagating with the network frozen.
    EmbeddingOnly,
}

/// Central-difference step used by [`gradient_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Maximum relative error between the analytic gradient of [`loss_simple`] and central
/// finite differences. The embedding checked is the one used by the first batch item.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)` where `floor` is the
/// finite-difference roundoff level `1e3 * eps_mach * |L| / h`; coordinates whose
/// gradient sits below that level are compared in absolute terms against it.
pub fn gradient_check(
    net: &EpsilonNet,
    table: &ConceptTable,
    batch: &[(ImageTensor, ConceptKey)],
    schedule: &NoiseSchedule,
    rng: &RngStream,
    scope: GradCheckScope,
) -> Result<f64> {
    if batch.is_empty() {
        return param("gradient check needs a non-empty batch");
    }
    let h = GRAD_CHECK_STEP;
    let target = batch[0].1;
    let streams: Vec<RngStream> = (0..batch.len()).map(|i| rng.child("loss", i as u64, 0, 0)).collect();
    let loss_at = |n: &EpsilonNet, t: &ConceptTable| -> Result<f64> {
        let items: Vec<LossItem<'_>> = batch
            .iter()
            .zip(&streams)
            .map(|((image, concept), stream)| LossItem {
                image,
                concept: *concept,
                stream: *stream,
            })
            .collect();
        loss_simple_items(n, t, &items, schedule)
    };

    let want_params = matches!(scope, GradCheckScope::Full { .. });
    let mut pgrad = vec![0.0; net.num_params()];
    let mut wgrad = vec![0.0; table.dim];
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ((image, concept), stream) in batch.iter().zip(&streams) {
        let (l, dw) = item_gradient(
            net,
            table.get(*concept)?,
            image,
            stream,
            schedule,
            scale,
            want_params.then_some(pgrad.as_mut_slice()),
        )?;
        loss += l * scale;
        if *concept == target {
            for (g, d) in wgrad.iter_mut().zip(dw) {
                *g += d;
            }
        }
    }
    let floor = 1e3 * f64::EPSILON * loss.abs().max(1.0) / h;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);

    let mut worst: f64 = 0.0;
    if let GradCheckScope::Full { param_coords } = scope {
        let mut r = rng.child("gradcheck-coords", 0, 0, 0).rng();
        let k = param_coords.min(net.num_params());
        for idx in sample(&mut r, net.num_params(), k).into_iter() {
            let mut n = net.clone();
            n.params.values[idx] += h;
            let up = loss_at(&n, table)?;
            n.params.values[idx] = net.params.values[idx] - h;
            let down = loss_at(&n, table)?;
            worst = worst.max(rel(pgrad[idx], (up - down) / (2.0 * h)));
        }
    }
    let base = table.get(target)?.to_vec();
    for i in 0..table.dim {
        let mut t = table.clone();
        let mut v = base.clone();
        v[i] += h;
        t.insert(target, v.clone(), true)?;
        let up = loss_at(net, &t)?;
        v[i] = base[i] - h;
        t.insert(target, v, true)?;
        let down = loss_at(net, &t)?;
        worst = worst.max(rel(wgrad[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}
