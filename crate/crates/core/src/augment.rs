//! Generative augmentation as a stackable, balanceable transform.
//!
//! A policy is a categorical distribution over transforms. Each synthetic image is
//! produced by drawing one transform and applying it to a real image, conditioned on
//! that image's learned concept. Training batches then mix real and synthetic images
//! slot by slot with probability `alpha`.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConceptKey, ConceptTable, NoisePredictor};
use crate::error::{param, Result};
use crate::rng::RngStream;
use crate::sampler::{sdedit, sdedit_masked, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, MaskTensor};

/// Which part of the image a masked edit regenerates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskRole {
    /// Regenerate the object; the background is preserved.
    Foreground,
    /// Regenerate the background; the object is preserved.
    Background,
}

impl std::str::FromStr for MaskRole {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "foreground" => Ok(MaskRole::Foreground),
            "background" => Ok(MaskRole::Background),
            _ => param(format!("unknown mask role `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    HorizontalFlip,
    VerticalFlip,
    Sdedit { t0: f64 },
    SdeditMasked { t0: f64, role: MaskRole },
}

impl Transform {
    pub fn t0(&self) -> Option<f64> {
        match *self {
            Transform::Sdedit { t0 } | Transform::SdeditMasked { t0, .. } => Some(t0),
            _ => None,
        }
    }

    pub fn is_generative(&self) -> bool {
        self.t0().is_some()
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Identity => write!(f, "identity"),
            Transform::HorizontalFlip => write!(f, "hflip"),
            Transform::VerticalFlip => write!(f, "vflip"),
            Transform::Sdedit { t0 } => write!(f, "sdedit(t0={t0})"),
            Transform::SdeditMasked { t0, role } => write!(f, "sdedit_masked(t0={t0}, {role:?})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    entries: Vec<(Transform, f64)>,
}

impl AugmentationPolicy {
    /// Probabilities must lie in `[0, 1]` and sum to 1 within `1e-9`.
    pub fn new(entries: Vec<(Transform, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return param("policy needs at least one transform");
        }
        if entries.iter().any(|(_, p)| !(0.0..=1.0).contains(p)) {
            return param("activation probabilities must lie in [0, 1]");
        }
        let total: f64 = entries.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return param(format!("activation probabilities sum to {total}, not 1"));
        }
        for (t, _) in &entries {
            if let Some(t0) = t.t0() {
                if !(0.0..=1.0).contains(&t0) {
                    return param(format!("t0 = {t0} outside [0, 1]"));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn identity() -> Self {
        Self {
            entries: vec![(Transform::Identity, 1.0)],
        }
    }

    pub fn entries(&self) -> &[(Transform, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replaces the strength of every generative entry by `t0`.
    pub fn with_fixed_t0(mut self, t0: f64) -> Result<Self> {
        for (t, _) in &mut self.entries {
            match t {
                Transform::Sdedit { t0: s } | Transform::SdeditMasked { t0: s, .. } => *s = t0,
                _ => {}
            }
        }
        Self::new(self.entries)
    }

    /// Same transforms with new activation probabilities, one per entry.
    pub fn with_probabilities(self, probabilities: &[f64]) -> Result<Self> {
        if probabilities.len() != self.entries.len() {
            return param(format!(
                "{} activation probabilities for {} transforms",
                probabilities.len(),
                self.entries.len()
            ));
        }
        Self::new(self.entries.into_iter().zip(probabilities).map(|((t, _), p)| (t, *p)).collect())
    }

    /// Moves probability mass `weight` onto horizontal and vertical flips, split evenly.
    pub fn with_flips(self, weight: f64) -> Result<Self> {
        let mut entries: Vec<_> = self.entries.into_iter().map(|(t, p)| (t, p * (1.0 - weight))).collect();
        entries.push((Transform::HorizontalFlip, weight / 2.0));
        entries.push((Transform::VerticalFlip, weight / 2.0));
        Self::new(entries)
    }
}

/// `k` splicing transforms at strengths `i / k`, each with probability `1 / k`.
pub fn build_dafusion_policy(k: usize, mask: Option<MaskRole>) -> Result<AugmentationPolicy> {
    if k == 0 {
        return param("stacked augmentation count k must be at least 1");
    }
    let entries = (1..=k)
        .map(|i| {
            let t0 = i as f64 / k as f64;
            let t = match mask {
                None => Transform::Sdedit { t0 },
                Some(role) => Transform::SdeditMasked { t0, role },
            };
            (t, 1.0 / k as f64)
        })
        .collect();
    AugmentationPolicy::new(entries)
}

/// Draws an entry index with the policy's activation probabilities.
pub fn choose_augmentation<R: Rng + ?Sized>(policy: &AugmentationPolicy, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, (_, p)) in policy.entries.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` a hair below 1; fall back to the last entry with mass.
    policy.entries.iter().rposition(|(_, p)| *p > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image: ImageTensor,
    pub label: u32,
    /// Per-class segmentation masks, if available.
    #[serde(default)]
    pub masks: Vec<(u32, MaskTensor)>,
}

impl DatasetRecord {
    pub fn new(image: ImageTensor, label: u32) -> Self {
        Self {
            image,
            label,
            masks: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (_, m) in &self.masks {
            if !m.matches(&self.image) {
                return param("mask does not match image dimensions");
            }
            m.validate()?;
        }
        Ok(())
    }

    /// Mask of the record's own class.
    pub fn object_mask(&self) -> Option<&MaskTensor> {
        self.masks.iter().find(|(c, _)| *c == self.label).map(|(_, m)| m)
    }
}

/// Images grouped by label, in dataset order. The position of an image in its
/// class list is its index for image-specific concepts.
pub fn group_by_class(records: &[DatasetRecord]) -> BTreeMap<u32, Vec<ImageTensor>> {
    let mut out: BTreeMap<u32, Vec<ImageTensor>> = BTreeMap::new();
    for r in records {
        out.entry(r.label).or_default().push(r.image.clone());
    }
    out
}

/// Index of each record within its class, matching [`group_by_class`].
pub fn class_positions(records: &[DatasetRecord]) -> Vec<u32> {
    let mut seen: BTreeMap<u32, u32> = BTreeMap::new();
    records
        .iter()
        .map(|r| {
            let n = seen.entry(r.label).or_default();
            *n += 1;
            *n - 1
        })
        .collect()
}

/// How generative transforms pick their conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptMode {
    /// The learned embedding of the source image's class (or of the image itself).
    Learned,
    /// Always the class-agnostic embedding.
    Null,
}

pub struct GenerationContext<'a, P> {
    pub net: &'a P,
    pub table: &'a ConceptTable,
    pub schedule: &'a NoiseSchedule,
    pub sampler: SamplerConfig,
    pub concept_mode: ConceptMode,
    /// Chebyshev radius applied to object masks before masked edits.
    pub mask_dilation: usize,
    pub workers: usize,
}

impl<P> GenerationContext<'_, P> {
    pub fn concept_for(&self, record: &DatasetRecord, position: u32) -> ConceptKey {
        match self.concept_mode {
            ConceptMode::Null => ConceptKey::Null,
            ConceptMode::Learned => self.table.concept_for(record.label, position),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "message", rename_all = "lowercase")]
pub enum RecordStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub i: usize,
    pub j: usize,
    pub label: u32,
    pub entry: usize,
    pub transform: Transform,
    pub t0: Option<f64>,
    pub seed: u64,
    pub concept: ConceptKey,
    pub status: RecordStatus,
    #[serde(skip)]
    pub image: Option<ImageTensor>,
}

impl StoreRecord {
    pub fn is_ok(&self) -> bool {
        self.status == RecordStatus::Ok && self.image.is_some()
    }
}

/// `N x M` synthetic images with provenance, indexed `i * M + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStore {
    pub n: usize,
    pub m: usize,
    pub records: Vec<StoreRecord>,
}

impl SyntheticStore {
    pub fn get(&self, i: usize, j: usize) -> Option<&StoreRecord> {
        self.records.get(i * self.m + j).filter(|r| r.i == i && r.j == j)
    }

    pub fn is_complete(&self) -> bool {
        self.records.len() == self.n * self.m && self.records.iter().all(StoreRecord::is_ok)
    }

    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| !r.is_ok()).count()
    }
}

/// Preserve-mask for a masked edit: 1 where the reference is kept.
pub fn preserve_mask(object: &MaskTensor, role: MaskRole, dilation: usize) -> Result<MaskTensor> {
    let grown = dilate_mask(object, dilation)?;
    Ok(match role {
        MaskRole::Foreground => invert_mask(&grown),
        MaskRole::Background => grown,
    })
}

fn apply<P: NoisePredictor>(
    transform: Transform,
    record: &DatasetRecord,
    concept: ConceptKey,
    ctx: &GenerationContext<'_, P>,
    stream: &RngStream,
) -> Result<ImageTensor> {
    let x = &record.image;
    match transform {
        Transform::Identity => Ok(x.clone()),
        Transform::HorizontalFlip => Ok(x.flip_horizontal()),
        Transform::VerticalFlip => Ok(x.flip_vertical()),
        Transform::Sdedit { t0 } => sdedit(x, t0, ctx.net, ctx.table, ctx.schedule, &ctx.sampler, concept, stream),
        Transform::SdeditMasked { t0, role } => {
            let object = match record.object_mask() {
                Some(m) => m,
                None => return param(format!("record of class {} has no object mask", record.label)),
            };
            let keep = preserve_mask(object, role, ctx.mask_dilation)?;
            sdedit_masked(x, &keep, t0, ctx.net, ctx.table, ctx.schedule, &ctx.sampler, concept, stream)
        }
    }
}

/// Generates augmentation `j` of record `i`. Failures are captured in the record.
pub fn generate_record<P: NoisePredictor>(
    dataset: &[DatasetRecord],
    positions: &[u32],
    policy: &AugmentationPolicy,
    ctx: &GenerationContext<'_, P>,
    rng: &RngStream,
    i: usize,
    j: usize,
) -> StoreRecord {
    let stream = rng.child("augment", i as u64, j as u64, 0);
    let entry = choose_augmentation(policy, &mut stream.child("choose", 0, 0, 0).rng());
    let transform = policy.entries[entry].0;
    let record = &dataset[i];
    let concept = if transform.is_generative() {
        ctx.concept_for(record, positions[i])
    } else {
        ConceptKey::Null
    };
    let result = apply(transform, record, concept, ctx, &stream.child("sample", 0, 0, 0));
    let (status, image) = match result {
        Ok(img) => (RecordStatus::Ok, Some(img)),
        Err(e) => (RecordStatus::Failed(e.to_string()), None),
    };
    StoreRecord {
        i,
        j,
        label: record.label,
        entry,
        transform,
        t0: transform.t0(),
        seed: rng.seed,
        concept,
        status,
        image,
    }
}

/// Generates `m` augmentations of every record. Records are independent, so the
/// result does not depend on `ctx.workers`.
pub fn build_store<P: NoisePredictor + Sync>(
    dataset: &[DatasetRecord],
    policy: &AugmentationPolicy,
    m: usize,
    ctx: &GenerationContext<'_, P>,
    rng: &RngStream,
) -> Result<SyntheticStore> {
    if m == 0 {
        return param("M must be at least 1");
    }
    for r in dataset {
        r.validate()?;
    }
    let positions = class_positions(dataset);
    let jobs: Vec<(usize, usize)> = (0..dataset.len()).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let workers = ctx.workers.clamp(1, jobs.len().max(1));
    let records = if workers == 1 {
        jobs.iter()
            .map(|&(i, j)| generate_record(dataset, &positions, policy, ctx, rng, i, j))
            .collect()
    } else {
        let chunk = jobs.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| {
                    let positions = &positions;
                    s.spawn(move || {
                        part.iter()
                            .map(|&(i, j)| generate_record(dataset, positions, policy, ctx, rng, i, j))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("store worker panicked"))
                .collect()
        })
    };
    Ok(SyntheticStore {
        n: dataset.len(),
        m,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixerConfig {
    pub alpha: f64,
    pub batch_size: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchItem<'a> {
    pub image: &'a ImageTensor,
    pub label: u32,
    pub origin: Origin,
    pub i: usize,
    /// Augmentation index for synthetic items.
    pub j: Option<usize>,
}

/// Fills `mix.batch_size` slots: `i ~ U{N}`, then a synthetic `X~_ij` with `j ~ U{M}`
/// with probability `alpha`, else the real `X_i`.
///
/// The real/synthetic decision is drawn before `j`, so runs with `alpha = 0`
/// consume the same random numbers with or without a store.
pub fn balanced_batch<'a, R: Rng + ?Sized>(
    real: &'a [DatasetRecord],
    store: Option<&'a SyntheticStore>,
    mix: &MixerConfig,
    rng: &mut R,
) -> Result<Vec<BatchItem<'a>>> {
    if real.is_empty() {
        return param("cannot draw batches from an empty dataset");
    }
    if !(0.0..=1.0).contains(&mix.alpha) {
        return param("alpha must lie in [0, 1]");
    }
    let store = match store {
        Some(s) => {
            if s.n != real.len() || s.m == 0 || !s.is_complete() {
                return param("synthetic store is incomplete or does not match the dataset");
            }
            Some(s)
        }
        None if mix.alpha > 0.0 => return param("alpha > 0 needs a synthetic store"),
        None => None,
    };
    let mut out = Vec::with_capacity(mix.batch_size);
    for _ in 0..mix.batch_size {
        let i = rng.random_range(0..real.len());
        let synthetic = rng.random::<f64>() < mix.alpha;
        match (synthetic, store) {
            (true, Some(s)) => {
                let j = rng.random_range(0..s.m);
                let rec = &s.records[i * s.m + j];
                out.push(BatchItem {
                    image: rec.image.as_ref().expect("complete store"),
                    label: real[i].label,
                    origin: Origin::Synthetic,
                    i,
                    j: Some(j),
                });
            }
            _ => out.push(BatchItem {
                image: &real[i].image,
                label: real[i].label,
                origin: Origin::Real,
                i,
                j: None,
            }),
        }
    }
    Ok(out)
}

/// Square-element dilation: a pixel is set if any set pixel lies within Chebyshev distance `r`.
pub fn dilate_mask(v: &MaskTensor, r: usize) -> Result<MaskTensor> {
    if !v.is_binary() {
        return param("dilation needs a binary mask");
    }
    let (h, w) = (v.height, v.width);
    let mut rows = MaskTensor::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            if (lo..=hi).any(|xx| v.get(y, xx) == 1.0) {
                rows.data[y * w + x] = 1.0;
            }
        }
    }
    let mut out = MaskTensor::zeros(h, w);
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            if (lo..=hi).any(|yy| rows.get(yy, x) == 1.0) {
                out.data[y * w + x] = 1.0;
            }
        }
    }
    Ok(out)
}

pub fn invert_mask(v: &MaskTensor) -> MaskTensor {
    MaskTensor {
        height: v.height,
        width: v.width,
        data: v.data.iter().map(|m| 1.0 - m).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipMode {
    Horizontal,
    Vertical,
}

/// Mirrors the image with the given probability.
pub fn flip_augment<R: Rng + ?Sized>(image: &ImageTensor, mode: FlipMode, probability: f64, rng: &mut R) -> ImageTensor {
    if rng.random::<f64>() < probability {
        match mode {
            FlipMode::Horizontal => image.flip_horizontal(),
            FlipMode::Vertical => image.flip_vertical(),
        }
    } else {
        image.clone()
    }
}
