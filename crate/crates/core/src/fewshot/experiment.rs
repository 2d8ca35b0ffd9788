//! Experiment orchestration: every (method, q, trial) cell builds a split, learns
//! concepts on the q-shot images, generates synthetic images and trains a probe.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::probe::{train_probe, FeatureExtractor, LinearProbe, ProbeConfig};
use super::toy::{gen_toy_dataset, ShapeFamily, ToyDatasetSpec};
use super::{auc_over_q, confidence_interval_68, holdout, make_split, normalize_scores, Partition};
use crate::augment::{
    balanced_batch, build_dafusion_policy, build_store, group_by_class, AugmentationPolicy, ConceptMode,
    DatasetRecord, FlipMode, GenerationContext, MaskRole, MixerConfig, Origin, RecordStatus, SyntheticStore,
    Transform,
};
use crate::denoiser::{
    finetune_concepts, train_denoiser_with, ConceptKey, ConceptTable, EpsilonNet, Granularity, NetConfig,
    ScheduleParams, TrainConfig,
};
use crate::error::{param, Error, Result};
use crate::rng::{RngStream, StreamId};
use crate::sampler::SamplerConfig;
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub net: NetConfig,
    pub schedule: ScheduleParams,
    pub train: TrainConfig,
    pub per_class: usize,
    /// Families the backbone learns under their own vocabulary embedding.
    pub vocab_families: Vec<ShapeFamily>,
    /// Families the backbone only ever sees with the null embedding.
    pub unconditional_families: Vec<ShapeFamily>,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            schedule: ScheduleParams::default(),
            train: TrainConfig::backbone(),
            per_class: 200,
            vocab_families: ShapeFamily::PRETRAIN.to_vec(),
            unconditional_families: ShapeFamily::TARGETS.to_vec(),
            seed: 0,
        }
    }
}

/// Trains the generative backbone on procedural images and returns it with its
/// concept table (null embedding plus one vocabulary entry per `vocab_families`).
pub fn train_backbone(cfg: &BackboneConfig, on_step: impl FnMut(usize, f64)) -> Result<(EpsilonNet, ConceptTable)> {
    if cfg.net.height != cfg.net.width || cfg.net.channels != 3 {
        return param("the toy backbone needs square RGB images");
    }
    let schedule = cfg.schedule.build()?;
    let mut families = cfg.vocab_families.clone();
    families.extend(&cfg.unconditional_families);
    let spec = ToyDatasetSpec {
        families,
        per_class: cfg.per_class,
        resolution: cfg.net.height,
        emit_masks: false,
        seed: cfg.seed ^ 0xbac4_b0e5,
        ..ToyDatasetSpec::default()
    };
    let n_vocab = cfg.vocab_families.len() as u32;
    let data: Vec<(ImageTensor, ConceptKey)> = gen_toy_dataset(&spec)?
        .into_iter()
        .map(|r| {
            let key = if r.label < n_vocab {
                ConceptKey::Vocab(r.label)
            } else {
                ConceptKey::Null
            };
            (r.image, key)
        })
        .collect();
    let root = RngStream::root(cfg.seed);
    let table = ConceptTable::with_vocab(cfg.net.cond_dim, n_vocab, &root.child("vocab", 0, 0, 0));
    let net = EpsilonNet::new(cfg.net.clone(), &root.child("init", 0, 0, 0))?;
    let train = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let net = train_denoiser_with(&data, net, &table, &schedule, &train, on_step)?;
    Ok((net, table))
}

/// A trained generator with its schedule.
#[derive(Debug, Clone, Copy)]
pub struct Backbone<'a> {
    pub net: &'a EpsilonNet,
    pub table: &'a ConceptTable,
    pub schedule: &'a NoiseSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    /// Real images with classic flips only.
    Baseline,
    /// Unconditional splicing at a fixed strength.
    RealGuidance,
    /// Learned-concept splicing with `k` stacked strengths, optionally all at `t0`.
    Dafusion {
        k: usize,
        #[serde(default)]
        t0: Option<f64>,
        #[serde(default)]
        mask: Option<MaskRole>,
    },
    /// The full generation pipeline with the identity policy and `alpha = 0`.
    IdentityControl,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Baseline => "baseline".into(),
            Method::RealGuidance => "real-guidance".into(),
            Method::IdentityControl => "identity-control".into(),
            Method::Dafusion { k, t0, mask } => {
                let mut s = format!("dafusion-k{k}");
                if let Some(t0) = t0 {
                    s.push_str(&format!("-t{t0}"));
                }
                match mask {
                    Some(MaskRole::Foreground) => s.push_str("-foreground"),
                    Some(MaskRole::Background) => s.push_str("-background"),
                    None => {}
                }
                s
            }
        }
    }

    pub fn needs_concepts(&self) -> bool {
        matches!(self, Method::Dafusion { .. })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    /// Parses the names produced by [`Method::name`]; a bare `dafusion` means `k = 4`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Param(format!("unknown method `{s}`"));
        match s {
            "baseline" => return Ok(Method::Baseline),
            "real-guidance" => return Ok(Method::RealGuidance),
            "identity-control" => return Ok(Method::IdentityControl),
            "dafusion" => return Ok(Method::Dafusion { k: 4, t0: None, mask: None }),
            _ => {}
        }
        let rest = s.strip_prefix("dafusion-k").ok_or_else(bad)?;
        let mut parts = rest.split('-');
        let k = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let (mut t0, mut mask) = (None, None);
        for p in parts {
            if let Some(v) = p.strip_prefix('t') {
                if t0.is_some() || mask.is_some() {
                    return Err(bad());
                }
                t0 = Some(v.parse().map_err(|_| bad())?);
            } else if mask.is_none() {
                mask = Some(p.parse()?);
            } else {
                return Err(bad());
            }
        }
        Ok(Method::Dafusion { k, t0, mask })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset_name: String,
    pub dataset: ToyDatasetSpec,
    pub validation_fraction: f64,
    pub q_grid: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Synthetic images per real image.
    pub m: usize,
    pub alpha: f64,
    /// Activation probabilities of the stacked strengths, applied to every
    /// method whose `k` matches their count. Uniform otherwise.
    pub activation_probabilities: Option<Vec<f64>>,
    pub sampler: SamplerConfig,
    pub inversion: TrainConfig,
    pub granularity: Granularity,
    pub probe: ProbeConfig,
    /// Flips applied independently at probe-training time in every arm.
    pub flips: Vec<FlipMode>,
    pub flip_probability: f64,
    pub real_guidance_t0: f64,
    pub mask_dilation: usize,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_name: "toy-shapes".into(),
            dataset: ToyDatasetSpec::default(),
            validation_fraction: 0.2,
            q_grid: vec![1, 2, 4, 8, 16],
            trials: 8,
            seed: 0,
            methods: vec![Method::Baseline, Method::RealGuidance, Method::Dafusion { k: 4, t0: None, mask: None }],
            m: 10,
            alpha: 0.5,
            activation_probabilities: None,
            sampler: SamplerConfig::default(),
            inversion: TrainConfig::default(),
            granularity: Granularity::Pooled,
            probe: ProbeConfig::default(),
            flips: vec![FlipMode::Horizontal],
            flip_probability: 0.5,
            real_guidance_t0: 0.5,
            mask_dilation: 1,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q_grid.is_empty() || self.q_grid[0] == 0 || self.q_grid.windows(2).any(|w| w[1] <= w[0]) {
            return param("q grid must be non-empty, positive and strictly increasing");
        }
        if self.trials == 0 || self.methods.is_empty() {
            return param("need at least one trial and one method");
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.flip_probability) {
            return param("alpha and flip probability must lie in [0, 1]");
        }
        let names: BTreeSet<String> = self.methods.iter().map(Method::name).collect();
        if names.len() != self.methods.len() {
            return param("methods must be distinct");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub q: usize,
    pub trial: usize,
    pub accuracy: Option<f64>,
    pub steps_to_best: Option<usize>,
    /// Synthetic images available to the probe.
    pub synthetic: usize,
    pub error: Option<String>,
}

impl CellResult {
    fn failed(method: &Method, q: usize, trial: usize, error: String) -> Self {
        Self {
            method: method.name(),
            q,
            trial,
            accuracy: None,
            steps_to_best: None,
            synthetic: 0,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub q: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub curve: Vec<CurvePoint>,
    /// Mean over trials of the per-trial AUC.
    pub auc: Option<f64>,
    pub auc_ci_low: Option<f64>,
    pub auc_ci_high: Option<f64>,
    pub normalized_score: Option<f64>,
    /// Mean accuracy minus the baseline's, per q.
    pub gain_vs_baseline: Vec<f64>,
    pub per_trial_auc: Vec<f64>,
}

/// Which dataset indices the generative stages touched, against the validation pool.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexAudit {
    pub validation: Vec<usize>,
    pub generative_inputs: Vec<usize>,
    pub overlap: usize,
}

impl IndexAudit {
    pub fn ok(&self) -> bool {
        self.overlap == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub methods: Vec<String>,
    pub q_grid: Vec<usize>,
    pub trials: usize,
    pub cells: Vec<CellResult>,
    pub summaries: Vec<MethodSummary>,
    pub audit: IndexAudit,
}

impl ExperimentReport {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.accuracy.is_none()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.failed_cells() == 0 && self.cells.len() == self.methods.len() * self.q_grid.len() * self.trials
    }

    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn accuracies(&self, method: &str, q: usize) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.method == method && c.q == q)
            .filter_map(|c| c.accuracy)
            .collect()
    }
}

/// All `2^F` combinations of the configured flips, indexed by bitmask.
fn flip_variants(image: &ImageTensor, flips: &[FlipMode]) -> Vec<ImageTensor> {
    (0..1usize << flips.len())
        .map(|mask| {
            let mut out = image.clone();
            for (b, f) in flips.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    out = match f {
                        FlipMode::Horizontal => out.flip_horizontal(),
                        FlipMode::Vertical => out.flip_vertical(),
                    };
                }
            }
            out
        })
        .collect()
}

fn variant_features(ext: &FeatureExtractor, image: &ImageTensor, flips: &[FlipMode]) -> Vec<Vec<f64>> {
    flip_variants(image, flips).iter().map(|v| ext.features(v)).collect()
}

fn method_policy(method: &Method, cfg: &ExperimentConfig) -> Result<Option<(AugmentationPolicy, ConceptMode, f64)>> {
    Ok(match *method {
        Method::Baseline => None,
        Method::IdentityControl => Some((AugmentationPolicy::identity(), ConceptMode::Null, 0.0)),
        Method::RealGuidance => Some((
            AugmentationPolicy::new(vec![(Transform::Sdedit { t0: cfg.real_guidance_t0 }, 1.0)])?,
            ConceptMode::Null,
            cfg.alpha,
        )),
        Method::Dafusion { k, t0, mask } => {
            let mut p = build_dafusion_policy(k, mask)?;
            if let Some(probs) = &cfg.activation_probabilities {
                if probs.len() == k {
                    p = p.with_probabilities(probs)?;
                }
            }
            if let Some(t0) = t0 {
                p = p.with_fixed_t0(t0)?;
            }
            Some((p, ConceptMode::Learned, cfg.alpha))
        }
    })
}

/// Everything one (q, trial) shares across methods.
struct CellInputs<'a> {
    cfg: &'a ExperimentConfig,
    train: Vec<DatasetRecord>,
    real_feats: Vec<Vec<Vec<f64>>>,
    validation: &'a [(Vec<f64>, u32)],
    backbone: Option<&'a Backbone<'a>>,
    learned: Option<&'a ConceptTable>,
    ext: &'a FeatureExtractor,
    stream: RngStream,
    classes: usize,
}

/// Returns `(best accuracy, steps to best, synthetic images)`.
fn run_method(method: &Method, c: &CellInputs<'_>) -> Result<(f64, usize, usize)> {
    let cfg = c.cfg;
    let mut store: Option<SyntheticStore> = None;
    let mut alpha = 0.0;
    if let Some((policy, mode, a)) = method_policy(method, cfg)? {
        let bb = c
            .backbone
            .ok_or_else(|| Error::Param(format!("{} needs a generative backbone", method.name())))?;
        let table = if method.needs_concepts() {
            c.learned.ok_or_else(|| Error::Param("no learned concepts".into()))?
        } else {
            bb.table
        };
        let ctx = GenerationContext {
            net: bb.net,
            table,
            schedule: bb.schedule,
            sampler: cfg.sampler.clone(),
            concept_mode: mode,
            mask_dilation: cfg.mask_dilation,
            workers: 1,
        };
        let s = build_store(&c.train, &policy, cfg.m, &ctx, &c.stream.child("store", 0, 0, 0))?;
        if !s.is_complete() {
            let first = s.records.iter().find_map(|r| match &r.status {
                RecordStatus::Failed(e) => Some(e.clone()),
                RecordStatus::Ok => None,
            });
            return param(format!("{} synthetic images failed: {}", s.failed(), first.unwrap_or_default()));
        }
        store = Some(s);
        alpha = a;
    }
    let syn_feats: Vec<Vec<Vec<f64>>> = match &store {
        Some(s) => s
            .records
            .iter()
            .map(|r| variant_features(c.ext, r.image.as_ref().expect("complete store"), &cfg.flips))
            .collect(),
        None => Vec::new(),
    };
    let mix = MixerConfig {
        alpha,
        batch_size: cfg.probe.batch_size,
    };
    let mut rng = c.stream.child("batches", 0, 0, 0).rng();
    let outcome = train_probe(
        LinearProbe::zeros(c.classes, c.ext.dim()),
        |_| {
            let items = balanced_batch(&c.train, store.as_ref(), &mix, &mut rng)?;
            Ok(items
                .into_iter()
                .map(|it| {
                    let mut v = 0usize;
                    for b in 0..cfg.flips.len() {
                        if rng.random::<f64>() < cfg.flip_probability {
                            v |= 1 << b;
                        }
                    }
                    let f = match (it.j, store.as_ref()) {
                        (Some(j), Some(s)) if it.origin == Origin::Synthetic => syn_feats[it.i * s.m + j][v].clone(),
                        _ => c.real_feats[it.i][v].clone(),
                    };
                    (f, it.label)
                })
                .collect())
        },
        c.validation,
        &cfg.probe,
    )?;
    let synthetic = store.map(|s| s.records.len()).unwrap_or(0);
    Ok((outcome.best_accuracy, outcome.steps_to_best, synthetic))
}

struct CellOutput {
    results: Vec<CellResult>,
    generative_inputs: Vec<usize>,
}

struct Shared<'a> {
    cfg: &'a ExperimentConfig,
    records: &'a [DatasetRecord],
    partition: &'a Partition,
    validation: &'a [(Vec<f64>, u32)],
    backbone: Option<&'a Backbone<'a>>,
    ext: &'a FeatureExtractor,
    classes: usize,
}

fn run_cell(sh: &Shared<'_>, q: usize, trial: usize) -> CellOutput {
    let cfg = sh.cfg;
    let stream = RngStream::new(cfg.seed, StreamId::at("cell", q as u64, trial as u64, 0));
    let split = match make_split(sh.records, sh.partition, q, stream.child("split", 0, 0, 0).derived_seed()) {
        Ok(s) => s,
        Err(e) => {
            return CellOutput {
                results: cfg.methods.iter().map(|m| CellResult::failed(m, q, trial, e.to_string())).collect(),
                generative_inputs: Vec::new(),
            }
        }
    };
    let train: Vec<DatasetRecord> = split.train.iter().map(|&i| sh.records[i].clone()).collect();
    let learned: Option<Result<ConceptTable>> = match sh.backbone {
        Some(bb) if cfg.methods.iter().any(Method::needs_concepts) => {
            let inv = TrainConfig {
                seed: stream.child("invert", 0, 0, 0).derived_seed(),
                ..cfg.inversion.clone()
            };
            Some(finetune_concepts(bb.net, bb.table, &group_by_class(&train), cfg.granularity, bb.schedule, &inv))
        }
        _ => None,
    };
    let inputs = CellInputs {
        cfg,
        real_feats: train.iter().map(|r| variant_features(sh.ext, &r.image, &cfg.flips)).collect(),
        train,
        validation: sh.validation,
        backbone: sh.backbone,
        learned: learned.as_ref().and_then(|r| r.as_ref().ok()),
        ext: sh.ext,
        stream,
        classes: sh.classes,
    };
    let results = cfg
        .methods
        .iter()
        .map(|m| {
            if let (true, Some(Err(e))) = (m.needs_concepts(), &learned) {
                return CellResult::failed(m, q, trial, format!("concept fine-tuning failed: {e}"));
            }
            match run_method(m, &inputs) {
                Ok((acc, steps, synthetic)) => CellResult {
                    method: m.name(),
                    q,
                    trial,
                    accuracy: Some(acc),
                    steps_to_best: Some(steps),
                    synthetic,
                    error: None,
                },
                Err(e) => CellResult::failed(m, q, trial, e.to_string()),
            }
        })
        .collect();
    let generative = cfg.methods.iter().any(|m| !matches!(m, Method::Baseline));
    CellOutput {
        results,
        generative_inputs: if generative { split.train } else { Vec::new() },
    }
}

fn mean_ci(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.len() >= 2 {
        confidence_interval_68(values)
    } else {
        Ok((values[0], values[0], values[0]))
    }
}

fn summarize(cfg: &ExperimentConfig, cells: &[CellResult]) -> Result<Vec<MethodSummary>> {
    let lookup: BTreeMap<(&str, usize, usize), f64> = cells
        .iter()
        .filter_map(|c| c.accuracy.map(|a| ((c.method.as_str(), c.q, c.trial), a)))
        .collect();
    let mut out = Vec::new();
    for method in &cfg.methods {
        let name = method.name();
        let acc = |q: usize, t: usize| lookup.get(&(name.as_str(), q, t)).copied();
        let mut curve = Vec::new();
        for &q in &cfg.q_grid {
            let accs: Vec<f64> = (0..cfg.trials).filter_map(|t| acc(q, t)).collect();
            if accs.is_empty() {
                continue;
            }
            let (mean, ci_low, ci_high) = mean_ci(&accs)?;
            curve.push(CurvePoint { q, mean, ci_low, ci_high });
        }
        let complete = cfg.q_grid.iter().all(|&q| (0..cfg.trials).all(|t| acc(q, t).is_some()));
        let mut per_trial_auc = Vec::new();
        let mut auc = (None, None, None);
        if complete {
            for t in 0..cfg.trials {
                let pts: Vec<(f64, f64)> = cfg.q_grid.iter().map(|&q| (q as f64, acc(q, t).unwrap_or(0.0))).collect();
                per_trial_auc.push(if pts.len() >= 2 { auc_over_q(&pts)? } else { pts[0].1 });
            }
            let (m, lo, hi) = mean_ci(&per_trial_auc)?;
            auc = (Some(m), Some(lo), Some(hi));
        }
        out.push(MethodSummary {
            method: name.clone(),
            curve,
            auc: auc.0,
            auc_ci_low: auc.1,
            auc_ci_high: auc.2,
            normalized_score: None,
            gain_vs_baseline: Vec::new(),
            per_trial_auc,
        });
    }

    let aucs: Vec<f64> = out.iter().filter_map(|s| s.auc).collect();
    let lo = aucs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = aucs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if aucs.len() >= 2 && hi > lo {
        for s in &mut out {
            if let Some(a) = s.auc {
                s.normalized_score = Some(normalize_scores(&[a], lo, hi)?[0]);
            }
        }
    }
    let baseline = Method::Baseline.name();
    if let Some(base) = out.iter().find(|s| s.method == baseline).map(|s| s.curve.clone()) {
        for s in &mut out {
            s.gain_vs_baseline = s
                .curve
                .iter()
                .filter_map(|p| base.iter().find(|b| b.q == p.q).map(|b| p.mean - b.mean))
                .collect();
        }
    }
    Ok(out)
}

/// Runs every (method, q, trial) cell and assembles the report. Cell failures
/// are recorded rather than propagated.
///
/// Within a (q, trial) all methods share the split, the learned concepts, the
/// splice noise and the probe's batch stream, so methods are compared on paired
/// random numbers.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    records: &[DatasetRecord],
    backbone: Option<&Backbone<'_>>,
    extractor: &FeatureExtractor,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let classes = records.iter().map(|r| r.label as usize + 1).max().unwrap_or(0);
    if classes < 2 {
        return param("the dataset needs at least two classes");
    }
    let partition = holdout(records, cfg.validation_fraction, cfg.dataset.seed)?;
    let validation: Vec<(Vec<f64>, u32)> = partition
        .validation
        .iter()
        .map(|&i| (extractor.features(&records[i].image), records[i].label))
        .collect();
    let shared = Shared {
        cfg,
        records,
        partition: &partition,
        validation: &validation,
        backbone,
        ext: extractor,
        classes,
    };

    let jobs: Vec<(usize, usize)> = cfg
        .q_grid
        .iter()
        .flat_map(|&q| (0..cfg.trials).map(move |t| (q, t)))
        .collect();
    let workers = cfg.workers.clamp(1, jobs.len());
    let outputs: Vec<CellOutput> = if workers == 1 {
        jobs.iter().map(|&(q, t)| run_cell(&shared, q, t)).collect()
    } else {
        let chunk = jobs.len().div_ceil(workers);
        let shared = &shared;
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|&(q, t)| run_cell(shared, q, t)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("experiment worker panicked"))
                .collect()
        })
    };

    let mut cells: Vec<CellResult> = Vec::new();
    let mut touched = BTreeSet::new();
    for o in outputs {
        cells.extend(o.results);
        touched.extend(o.generative_inputs);
    }
    let order: BTreeMap<String, usize> = cfg.methods.iter().enumerate().map(|(i, m)| (m.name(), i)).collect();
    cells.sort_by_key(|c| (order[&c.method], c.q, c.trial));
    let val: BTreeSet<usize> = partition.validation.iter().copied().collect();
    let audit = IndexAudit {
        validation: partition.validation.clone(),
        overlap: touched.intersection(&val).count(),
        generative_inputs: touched.into_iter().collect(),
    };
    let summaries = summarize(cfg, &cells)?;
    Ok(ExperimentReport {
        dataset: cfg.dataset_name.clone(),
        methods: cfg.methods.iter().map(Method::name).collect(),
        q_grid: cfg.q_grid.clone(),
        trials: cfg.trials,
        cells,
        summaries,
        audit,
    })
}
