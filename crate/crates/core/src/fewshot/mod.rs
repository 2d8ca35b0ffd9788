//! Few-shot evaluation harness: toy datasets, splits, frozen-feature probes and
//! the summary metrics used to compare augmentation methods.

mod experiment;
mod probe;
mod toy;

pub use experiment::{
    run_experiment, train_backbone, Backbone, BackboneConfig, CellResult, CurvePoint, ExperimentConfig,
    ExperimentReport, IndexAudit, Method, MethodSummary,
};
pub use probe::{
    softmax_xent, train_extractor, train_probe, ExtractorConfig, FeatureExtractor, LinearProbe, ProbeConfig,
    ProbeOutcome,
};
pub use toy::{gen_toy_dataset, ShapeFamily, ToyDatasetSpec, MASK_COVERAGE};

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::augment::DatasetRecord;
use crate::error::{param, Result};
use crate::rng::RngStream;
use crate::tensor::{ImageTensor, MaskTensor};

/// Class whose mask covers the most pixels; ties go to the lowest class id.
pub fn label_from_masks(masks: &[(u32, MaskTensor)]) -> Result<u32> {
    let mut best: Option<(usize, u32)> = None;
    for (class, m) in masks {
        let area = m.area();
        best = match best {
            Some((a, c)) if a > area || (a == area && c <= *class) => Some((a, c)),
            _ => Some((area, *class)),
        };
    }
    best.map(|(_, c)| c).ok_or_else(|| crate::Error::Param("no masks to label from".into()))
}

/// Held-out validation pool and the training candidates, as dataset indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train_pool: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Holds out `round(fraction * n_c)` images of each class (at least one) for validation.
pub fn holdout(records: &[DatasetRecord], fraction: f64, seed: u64) -> Result<Partition> {
    if !(0.0..1.0).contains(&fraction) {
        return param("validation fraction must lie in [0, 1)");
    }
    let mut train_pool = Vec::new();
    let mut validation = Vec::new();
    for (class, idx) in indices_by_class(records) {
        let n_val = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len());
        let mut rng = RngStream::root(seed).child("holdout", class as u64, 0, 0).rng();
        let chosen: Vec<usize> = sample(&mut rng, idx.len(), n_val).into_iter().collect();
        for (k, i) in idx.into_iter().enumerate() {
            if chosen.contains(&k) {
                validation.push(i);
            } else {
                train_pool.push(i);
            }
        }
    }
    train_pool.sort_unstable();
    validation.sort_unstable();
    Ok(Partition { train_pool, validation })
}

fn indices_by_class(records: &[DatasetRecord]) -> BTreeMap<u32, Vec<usize>> {
    let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        out.entry(r.label).or_default().push(i);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub q: usize,
    /// `q` indices per class, grouped by class in ascending class order.
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Draws `q` training images per class from the partition's training pool.
pub fn make_split(records: &[DatasetRecord], partition: &Partition, q: usize, seed: u64) -> Result<FewShotSplit> {
    if q == 0 {
        return param("q must be at least 1");
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in &partition.train_pool {
        by_class.entry(records[i].label).or_default().push(i);
    }
    let mut train = Vec::with_capacity(q * by_class.len());
    for (class, idx) in by_class {
        if idx.len() < q {
            return param(format!("class {class} has {} training candidates, fewer than q = {q}", idx.len()));
        }
        let mut rng = RngStream::root(seed).child("split", class as u64, q as u64, 0).rng();
        let mut picked: Vec<usize> = sample(&mut rng, idx.len(), q).into_iter().map(|k| idx[k]).collect();
        picked.sort_unstable();
        train.extend(picked);
    }
    Ok(FewShotSplit {
        q,
        train,
        validation: partition.validation.clone(),
    })
}

/// Trapezoidal area under `(q, accuracy)` over `log2 q`, divided by the `log2 q` range.
pub fn auc_over_q(curve: &[(f64, f64)]) -> Result<f64> {
    if curve.len() < 2 {
        return param("AUC needs at least two points");
    }
    if curve.iter().any(|(q, _)| !(*q > 0.0)) || curve.windows(2).any(|w| w[1].0 <= w[0].0) {
        return param("q values must be positive and strictly increasing");
    }
    let xs: Vec<f64> = curve.iter().map(|(q, _)| q.log2()).collect();
    let area: f64 = curve
        .windows(2)
        .zip(xs.windows(2))
        .map(|(p, x)| 0.5 * (p[0].1 + p[1].1) * (x[1] - x[0]))
        .sum();
    Ok(area / (xs[xs.len() - 1] - xs[0]))
}

/// `(y - y_min) / (y_max - y_min)` for each value.
pub fn normalize_scores(values: &[f64], y_min: f64, y_max: f64) -> Result<Vec<f64>> {
    if !(y_max > y_min) {
        return param(format!("degenerate normalization range [{y_min}, {y_max}]"));
    }
    Ok(values.iter().map(|y| (y - y_min) / (y_max - y_min)).collect())
}

/// Mean of per-dataset normalized scores.
pub fn overall_score(normalized: &[f64]) -> Result<f64> {
    if normalized.is_empty() {
        return param("no scores to average");
    }
    Ok(normalized.iter().sum::<f64>() / normalized.len() as f64)
}

/// `(mean, mean - sem, mean + sem)` with the sample standard deviation.
pub fn confidence_interval_68(samples: &[f64]) -> Result<(f64, f64, f64)> {
    if samples.len() < 2 {
        return param("a confidence interval needs at least two samples");
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sem = (var / n).sqrt();
    Ok((mean, mean - sem, mean + sem))
}

/// Mean Euclidean distance over all unordered pairs.
pub fn mean_pairwise_distance(images: &[ImageTensor]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..images.len() {
        for b in a + 1..images.len() {
            total += images[a].squared_distance(&images[b]).sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(n: usize, area: usize) -> MaskTensor {
        let mut m = MaskTensor::zeros(n, n);
        m.data[..area].fill(1.0);
        m
    }

    #[test]
    fn labels_follow_largest_area() {
        assert_eq!(label_from_masks(&[(3, block(16, 10))]).unwrap(), 3);
        assert_eq!(label_from_masks(&[(0, block(16, 50)), (1, block(16, 200))]).unwrap(), 1);
        assert_eq!(label_from_masks(&[(5, block(16, 100)), (2, block(16, 100))]).unwrap(), 2);
        assert!(label_from_masks(&[]).is_err());
    }

    fn toy(per_class: usize) -> Vec<DatasetRecord> {
        (0..2 * per_class)
            .map(|i| DatasetRecord::new(ImageTensor::filled(4, 4, 3, i as f64 / 100.0), (i / per_class) as u32))
            .collect()
    }

    #[test]
    fn splits_respect_the_holdout() {
        let data = toy(10);
        let part = holdout(&data, 0.2, 7).unwrap();
        assert_eq!(part.validation.len(), 4);
        assert_eq!(part.train_pool.len(), 16);
        let s = make_split(&data, &part, 1, 3).unwrap();
        assert_eq!(s.train.len(), 2);
        assert!(s.train.iter().all(|i| !part.validation.contains(i)));
        let all = make_split(&data, &part, 8, 3).unwrap();
        assert_eq!(all.train, part.train_pool);
        let err = make_split(&data, &part, 9, 3).unwrap_err();
        assert!(err.to_string().contains("class 0"));
        assert_eq!(holdout(&data, 0.2, 7).unwrap(), part);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_over_q(&[(1.0, 0.0), (2.0, 1.0)]).unwrap(), 0.5);
        let flat = auc_over_q(&[(1.0, 0.7), (2.0, 0.7), (4.0, 0.7), (8.0, 0.7)]).unwrap();
        assert!((flat - 0.7).abs() < 1e-15);
        assert!(auc_over_q(&[(1.0, 0.5)]).is_err());
        assert!(auc_over_q(&[(2.0, 0.5), (1.0, 0.5)]).is_err());
    }

    #[test]
    fn normalization_endpoints() {
        let v = normalize_scores(&[0.2, 0.6, 0.4], 0.2, 0.6).unwrap();
        for (a, b) in v.iter().zip([0.0, 1.0, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(normalize_scores(&[0.1], 0.3, 0.3).is_err());
    }

    #[test]
    fn ci_examples() {
        let (m, lo, hi) = confidence_interval_68(&[0.4, 0.4, 0.4]).unwrap();
        assert!((m - 0.4).abs() < 1e-12 && (hi - lo).abs() < 1e-12);
        let (m, lo, hi) = confidence_interval_68(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        assert!((hi - m - 0.5).abs() < 1e-15 && (m - lo - 0.5).abs() < 1e-15);
        assert!(confidence_interval_68(&[1.0]).is_err());
    }
}
