//! Frozen convolutional feature extractor and the linear classification head
//! trained on top of it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::toy::{gen_toy_dataset, render_class, ShapeFamily, ToyDatasetSpec};
use crate::error::{param, Error, Result};
use crate::nn::{silu_fmap, silu_fmap_backward, Adam, Conv3x3, Fmap, Linear, ParamSet};
use crate::rng::{RngStream, StreamId};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub widths: [usize; 3],
    /// Families the extractor is pretrained to discriminate; disjoint from the evaluation classes.
    pub families: Vec<ShapeFamily>,
    /// Images per family used to fit the feature standardization. Training
    /// itself renders a fresh image for every batch slot.
    pub per_class: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64],
            families: ShapeFamily::PRETRAIN.to_vec(),
            per_class: 100,
            steps: 4000,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExtractorLayers {
    c1: Conv3x3,
    c2: Conv3x3,
    c3: Conv3x3,
    c4: Conv3x3,
}

/// Maps an image to standardized global-average-pooled activations of its last two stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub params: ParamSet,
    layers: ExtractorLayers,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

struct Trace {
    cols: [Vec<f64>; 4],
    pres: [Fmap; 4],
    hw: [(usize, usize); 4],
}

/// Per-image, per-channel standardization of the input, so features see shape
/// and contrast rather than absolute color.
fn standardize_input(image: &ImageTensor) -> Fmap {
    let plane = image.height * image.width;
    let mut data = image.data.clone();
    for ch in data.chunks_mut(plane) {
        let m = ch.iter().sum::<f64>() / plane as f64;
        let sd = (ch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / plane as f64).sqrt().max(0.05);
        ch.iter_mut().for_each(|v| *v = (*v - m) / sd);
    }
    Fmap::from_data(image.channels, image.height, image.width, data)
}

fn gap(x: &Fmap) -> Vec<f64> {
    let p = x.plane() as f64;
    (0..x.c).map(|c| x.data[c * x.plane()..(c + 1) * x.plane()].iter().sum::<f64>() / p).collect()
}

fn gap_backward(g: &[f64], like: &Fmap) -> Fmap {
    let p = like.plane();
    let mut out = Fmap::zeros(like.c, like.h, like.w);
    for (c, v) in g.iter().enumerate() {
        out.data[c * p..(c + 1) * p].fill(v / p as f64);
    }
    out
}

impl FeatureExtractor {
    fn init(channels: usize, widths: [usize; 3], init: &RngStream) -> Self {
        let mut rng = init.rng();
        let mut ps = ParamSet::default();
        let [a, b, c] = widths;
        let layers = ExtractorLayers {
            c1: Conv3x3::new(&mut ps, "c1", channels, a, 1, 1.0, &mut rng),
            c2: Conv3x3::new(&mut ps, "c2", a, b, 2, 1.0, &mut rng),
            c3: Conv3x3::new(&mut ps, "c3", b, c, 2, 1.0, &mut rng),
            c4: Conv3x3::new(&mut ps, "c4", c, c, 2, 1.0, &mut rng),
        };
        let dim = 2 * c;
        Self {
            params: ps,
            layers,
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn raw(&self, image: &ImageTensor) -> (Vec<f64>, Trace) {
        let p = &self.params.values;
        let l = &self.layers;
        let x = standardize_input(image);
        let hw0 = (x.h, x.w);
        let (pre1, col1) = l.c1.forward(p, &x);
        let h1 = silu_fmap(&pre1);
        let hw1 = (h1.h, h1.w);
        let (pre2, col2) = l.c2.forward(p, &h1);
        let h2 = silu_fmap(&pre2);
        let hw2 = (h2.h, h2.w);
        let (pre3, col3) = l.c3.forward(p, &h2);
        let h3 = silu_fmap(&pre3);
        let hw3 = (h3.h, h3.w);
        let (pre4, col4) = l.c4.forward(p, &h3);
        let h4 = silu_fmap(&pre4);
        let mut f = gap(&h3);
        f.extend(gap(&h4));
        let trace = Trace {
            cols: [col1, col2, col3, col4],
            pres: [pre1, pre2, pre3, pre4],
            hw: [hw0, hw1, hw2, hw3],
        };
        (f, trace)
    }

    fn backward(&self, trace: &Trace, df: &[f64], grads: &mut [f64]) {
        let p = &self.params.values;
        let l = &self.layers;
        let c3 = l.c3.cout;
        let [pre1, pre2, pre3, pre4] = &trace.pres;
        let d4 = silu_fmap_backward(pre4, &gap_backward(&df[c3..], pre4));
        let mut dh3 = l.c4.backward(p, &trace.cols[3], trace.hw[3], &d4, Some(grads), true).expect("dx");
        dh3.add_assign(&gap_backward(&df[..c3], pre3));
        let d3 = silu_fmap_backward(pre3, &dh3);
        let dh2 = l.c3.backward(p, &trace.cols[2], trace.hw[2], &d3, Some(grads), true).expect("dx");
        let d2 = silu_fmap_backward(pre2, &dh2);
        let dh1 = l.c2.backward(p, &trace.cols[1], trace.hw[1], &d2, Some(grads), true).expect("dx");
        let d1 = silu_fmap_backward(pre1, &dh1);
        l.c1.backward(p, &trace.cols[0], trace.hw[0], &d1, Some(grads), false);
    }

    /// Standardized feature vector.
    pub fn features(&self, image: &ImageTensor) -> Vec<f64> {
        let (f, _) = self.raw(image);
        f.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Hash of the parameters, for freeze checks.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in &self.params.values {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Trains the extractor as a classifier over `cfg.families` on freshly rendered
/// images, then freezes it and fits the feature standardization.
pub fn train_extractor(cfg: &ExtractorConfig, resolution: usize) -> Result<FeatureExtractor> {
    if cfg.families.len() < 2 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return param("extractor pretraining needs >= 2 families, batch >= 1 and lr > 0");
    }
    let spec = ToyDatasetSpec {
        families: cfg.families.clone(),
        per_class: cfg.per_class,
        resolution,
        seed: cfg.seed ^ 0x5eed_f00d,
        ..ToyDatasetSpec::default()
    };
    let data = gen_toy_dataset(&spec)?;
    let base = RngStream::new(cfg.seed, StreamId::new("extractor"));
    let mut ext = FeatureExtractor::init(3, cfg.widths, &base.child("init", 0, 0, 0));
    let classes = cfg.families.len();
    let mut head_params = ParamSet::default();
    let head = Linear::new(&mut head_params, "head", ext.dim(), classes, 1.0, &mut base.child("head", 0, 0, 0).rng());
    let n_body = ext.params.len();
    let mut theta: Vec<f64> = ext.params.values.iter().chain(&head_params.values).copied().collect();
    let mut opt = Adam::new(theta.len(), cfg.lr, 0.9, 0.999, 1e-8);
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let mut rng = base.child("batch", 0, 0, step as u64).rng();
        let mut grads = vec![0.0; theta.len()];
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let label = rng.random_range(0..classes);
            let (img, _) = render_class(&spec, label, &mut rng);
            let (f, trace) = ext.raw(&img);
            let logits = head.forward(&head_params.values, &f);
            let (l, dlogits) = softmax_xent(&logits, label);
            loss += l * scale;
            let dlogits: Vec<f64> = dlogits.iter().map(|d| d * scale).collect();
            let (gb, gh) = grads.split_at_mut(n_body);
            let df = head.backward(&head_params.values, &f, &dlogits, Some(gh));
            ext.backward(&trace, &df, gb);
        }
        if !loss.is_finite() {
            return Err(Error::TrainingDivergence { step });
        }
        opt.step(&mut theta, &grads);
        ext.params.values.copy_from_slice(&theta[..n_body]);
        head_params.values.copy_from_slice(&theta[n_body..]);
    }

    let feats: Vec<Vec<f64>> = data.iter().map(|r| ext.raw(&r.image).0).collect();
    let n = feats.len() as f64;
    let dim = ext.dim();
    for k in 0..dim {
        let m = feats.iter().map(|f| f[k]).sum::<f64>() / n;
        let var = feats.iter().map(|f| (f[k] - m).powi(2)).sum::<f64>() / n;
        ext.mean[k] = m;
        ext.scale[k] = var.sqrt().max(1e-6);
    }
    Ok(ext)
}

/// Cross-entropy of `softmax(logits)` against `label`, and its gradient.
pub fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_every: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            steps: 2000,
            eval_every: 200,
        }
    }
}

/// Linear head `W f + b` over frozen features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes x dim` weights followed by `classes` biases.
    pub params: Vec<f64>,
}

impl LinearProbe {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            params: vec![0.0; classes * dim + classes],
        }
    }

    pub fn logits(&self, f: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let row = &self.params[c * self.dim..(c + 1) * self.dim];
                self.params[self.classes * self.dim + c] + row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    /// Highest-scoring class; ties go to the lowest id.
    pub fn predict(&self, f: &[f64]) -> u32 {
        let z = self.logits(f);
        let mut best = 0;
        for (c, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = c;
            }
        }
        best as u32
    }

    pub fn accuracy(&self, data: &[(Vec<f64>, u32)]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        data.iter().filter(|(f, y)| self.predict(f) == *y).count() as f64 / data.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    /// Head at the best evaluation.
    pub probe: LinearProbe,
    pub best_accuracy: f64,
    pub steps_to_best: usize,
}

/// Minimizes cross-entropy on batches from `next_batch(step)` with Adam. Validation
/// accuracy is measured before training and every `eval_every` steps (and after
/// the last step); the earliest best evaluation is returned.
pub fn train_probe(
    mut probe: LinearProbe,
    mut next_batch: impl FnMut(usize) -> Result<Vec<(Vec<f64>, u32)>>,
    validation: &[(Vec<f64>, u32)],
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    if cfg.eval_every == 0 {
        return param("evaluation interval must be at least 1");
    }
    let mut opt = Adam::new(probe.params.len(), cfg.lr, 0.9, 0.999, 1e-8);
    let mut best = ProbeOutcome {
        best_accuracy: probe.accuracy(validation),
        probe: probe.clone(),
        steps_to_best: 0,
    };
    let (c, d) = (probe.classes, probe.dim);
    for step in 1..=cfg.steps {
        let batch = next_batch(step - 1)?;
        if batch.is_empty() {
            return param("probe batch is empty");
        }
        let mut grads = vec![0.0; probe.params.len()];
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (f, y) in &batch {
            let (l, dz) = softmax_xent(&probe.logits(f), *y as usize);
            loss += l * scale;
            for k in 0..c {
                let g = dz[k] * scale;
                for (gw, x) in grads[k * d..(k + 1) * d].iter_mut().zip(f) {
                    *gw += g * x;
                }
                grads[c * d + k] += g;
            }
        }
        if !loss.is_finite() {
            return Err(Error::TrainingDivergence { step });
        }
        opt.step(&mut probe.params, &grads);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let acc = probe.accuracy(validation);
            if acc > best.best_accuracy {
                best = ProbeOutcome {
                    best_accuracy: acc,
                    probe: probe.clone(),
                    steps_to_best: step,
                };
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian;

    #[test]
    fn xent_gradient_matches_finite_differences() {
        let z = [0.3, -1.2, 2.0];
        let (_, g) = softmax_xent(&z, 1);
        for k in 0..3 {
            let mut up = z;
            up[k] += 1e-6;
            let mut dn = z;
            dn[k] -= 1e-6;
            let fd = (softmax_xent(&up, 1).0 - softmax_xent(&dn, 1).0) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    fn separable(n: usize, seed: u64) -> Vec<(Vec<f64>, u32)> {
        let mut r = RngStream::root(seed).rng();
        (0..n)
            .map(|i| {
                let y = (i % 2) as u32;
                let shift = if y == 0 { -2.0 } else { 2.0 };
                (vec![shift + 0.3 * gaussian(&mut r), gaussian(&mut r)], y)
            })
            .collect()
    }

    #[test]
    fn zero_steps_keep_initial_head() {
        let val = separable(20, 1);
        let cfg = ProbeConfig {
            steps: 0,
            ..ProbeConfig::default()
        };
        let out = train_probe(LinearProbe::zeros(2, 2), |_| Ok(Vec::new()), &val, &cfg).unwrap();
        assert_eq!(out.probe, LinearProbe::zeros(2, 2));
        assert_eq!(out.best_accuracy, 0.5);
        assert_eq!(out.steps_to_best, 0);
    }

    #[test]
    fn separable_features_are_learned() {
        let train = separable(200, 2);
        let val = separable(100, 3);
        let cfg = ProbeConfig {
            lr: 1e-2,
            steps: 400,
            batch_size: 32,
            eval_every: 50,
        };
        let mut r = RngStream::root(4).rng();
        let out = train_probe(
            LinearProbe::zeros(2, 2),
            |_| Ok((0..32).map(|_| train[r.random_range(0..train.len())].clone()).collect()),
            &val,
            &cfg,
        )
        .unwrap();
        assert!(out.best_accuracy >= 0.99, "{}", out.best_accuracy);
    }

    #[test]
    fn extractor_gradients_match_finite_differences() {
        let ext = FeatureExtractor::init(3, [2, 3, 4], &RngStream::root(1));
        let mut r = RngStream::root(2).rng();
        let img = crate::rng::gaussian_image(&mut r, 8, 8, 3);
        let probe: Vec<f64> = (0..ext.dim()).map(|_| gaussian(&mut r)).collect();
        let obj = |e: &FeatureExtractor| -> f64 { e.raw(&img).0.iter().zip(&probe).map(|(a, b)| a * b).sum() };
        let (_, trace) = ext.raw(&img);
        let mut g = vec![0.0; ext.params.len()];
        ext.backward(&trace, &probe, &mut g);
        for i in (0..ext.params.len()).step_by(3) {
            let mut e = ext.clone();
            e.params.values[i] += 1e-6;
            let up = obj(&e);
            e.params.values[i] -= 2e-6;
            let fd = (up - obj(&e)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }
}
