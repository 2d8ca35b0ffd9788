//! The five subcommands. Each one resolves its configuration, does its work,
//! writes outputs atomically and finishes with a run manifest.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dafkit::augment::{group_by_class, ConceptMode, GenerationContext};
use dafkit::denoiser::{finetune_concepts, Checkpoint};
use dafkit::fewshot::{
    gen_toy_dataset, run_experiment, train_backbone, train_extractor, Backbone, ExperimentReport, FeatureExtractor,
    Method,
};
use dafkit::{ConceptTable, DatasetRecord, EpsilonNet, Granularity, MaskRole, RngStream, StreamId};

use crate::config::ConfigDoc;
use crate::error::{CliError, CliResult};
use crate::io::{content_hash, read_checkpoint, read_file, read_image_dir, write_checkpoint};
use crate::manifest::RunManifest;
use crate::report::write_report;
use crate::store::{build_store_dir, store_files, StoreProgress};

pub const BACKBONE_FILE: &str = "backbone.dafkit";
pub const CONCEPTS_FILE: &str = "concepts.dafkit";
pub const EXTRACTOR_FILE: &str = "extractor.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Parser)]
#[command(name = "dafkit", version, about = "Diffusion-based data augmentation for few-shot classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML or JSON configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for store generation and experiment cells.
    #[arg(long, env = "DAFKIT_WORKERS")]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskMode {
    None,
    Foreground,
    Background,
}

impl MaskMode {
    fn role(self) -> Option<MaskRole> {
        match self {
            MaskMode::None => None,
            MaskMode::Foreground => Some(MaskRole::Foreground),
            MaskMode::Background => Some(MaskRole::Background),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    Pooled,
    Specific,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Pooled => Granularity::Pooled,
            GranularityArg::Specific => Granularity::Specific,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the generative backbone and the frozen feature extractor.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Learn concept embeddings for the classes of a dataset, leaving the backbone untouched.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class-per-subdirectory PNG tree; the configured dataset when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        granularity: Option<GranularityArg>,
    },
    /// Generate M synthetic images per real image into a store directory.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Splice with the class-agnostic embedding at the real-guidance strength.
        #[arg(long)]
        real_guidance: bool,
        #[arg(long)]
        k: Option<usize>,
        /// Use this strength for every stacked entry.
        #[arg(long)]
        t0: Option<f64>,
        #[arg(long, value_enum, default_value = "none")]
        mask_mode: MaskMode,
        #[arg(long = "M")]
        m: Option<usize>,
        /// Accepted for symmetry with `fewshot`; stores do not depend on it.
        #[arg(long)]
        alpha: Option<f64>,
        /// Generate at most this many new records, then stop; rerun to resume.
        #[arg(long)]
        max_records: Option<usize>,
    },
    /// Run the few-shot experiment and write the report.
    Fewshot {
        #[command(flatten)]
        common: Common,
        /// Train any missing backbone or extractor instead of failing.
        #[arg(long)]
        auto: bool,
        /// Directory written by `train`.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        extractor: Option<PathBuf>,
        /// Comma-separated method names, replacing the configured list.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long = "M")]
        m: Option<usize>,
    },
    /// Regenerate CSV and SVG files from a saved report.json.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> CliResult<RunManifest> {
    match cli.command {
        Command::Train { common } => cmd_train(&common),
        Command::Invert {
            common,
            checkpoint,
            data,
            granularity,
        } => cmd_invert(&common, &checkpoint, data.as_deref(), granularity.map(Into::into)),
        Command::Augment {
            common,
            checkpoint,
            data,
            real_guidance,
            k,
            t0,
            mask_mode,
            m,
            alpha,
            max_records,
        } => {
            let opts = AugmentOptions {
                real_guidance,
                k,
                t0,
                mask: mask_mode.role(),
                m,
                alpha,
                max_records,
            };
            cmd_augment(&common, &checkpoint, data.as_deref(), &opts)
        }
        Command::Fewshot {
            common,
            auto,
            from,
            checkpoint,
            extractor,
            methods,
            k,
            alpha,
            m,
        } => {
            let opts = FewshotOptions {
                auto,
                from,
                checkpoint,
                extractor,
                methods,
                k,
                alpha,
                m,
            };
            cmd_fewshot(&common, &opts).map(|(manifest, _)| manifest)
        }
        Command::Report { input, out } => cmd_report(&input, &out),
    }
}

fn load_config(common: &Common) -> CliResult<ConfigDoc> {
    let mut doc = match &common.config {
        Some(p) => ConfigDoc::load(p)?,
        None => ConfigDoc::default(),
    };
    if let Some(s) = common.seed {
        doc.seed = s;
    }
    if let Some(w) = common.workers {
        doc.workers = w.max(1);
    }
    Ok(doc)
}

fn start(command: &str, common: &Common, doc: &ConfigDoc) -> CliResult<RunManifest> {
    doc.validate()?;
    let mut manifest = RunManifest::new(command, doc.hash());
    if let Some(p) = &common.config {
        manifest.input(p)?;
    }
    manifest.output(&common.out, RESOLVED_CONFIG, doc.to_toml().as_bytes())?;
    Ok(manifest)
}

/// The dataset named by `--data`, the configured directory, or the procedural generator.
fn load_dataset(doc: &ConfigDoc, data: Option<&Path>, manifest: &mut RunManifest) -> CliResult<Vec<DatasetRecord>> {
    match data.or(doc.dataset.dir.as_deref()) {
        Some(dir) => {
            let d = read_image_dir(dir)?;
            for f in &d.files {
                manifest.input(f)?;
            }
            Ok(d.records)
        }
        None => Ok(gen_toy_dataset(&doc.dataset.toy)?),
    }
}

/// Hash of the backbone parameters exactly as they sit in memory.
pub fn params_hash(net: &EpsilonNet) -> String {
    let bytes: Vec<u8> = net.params.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    content_hash(&bytes)
}

fn progress(stage: &'static str, total: usize) -> impl FnMut(usize, f64) {
    let every = (total / 10).max(1);
    let mut acc = 0.0;
    move |step, loss| {
        acc += loss;
        if (step + 1) % every == 0 {
            eprintln!("{stage}: step {}/{total}, mean loss {:.4}", step + 1, acc / every as f64);
            acc = 0.0;
        }
    }
}

fn train_and_save_backbone(doc: &ConfigDoc, out: &Path, manifest: &mut RunManifest) -> CliResult<Checkpoint> {
    let cfg = doc.backbone_config();
    let (net, table) = manifest.time("backbone", || train_backbone(&cfg, progress("backbone", cfg.train.steps)))?;
    let ckpt = Checkpoint {
        schedule: cfg.schedule.clone(),
        net,
        table,
        config: serde_json::to_value(doc).expect("config serializes"),
    };
    let path = out.join(BACKBONE_FILE);
    write_checkpoint(&path, &ckpt)?;
    manifest.existing_output(out, &path)?;
    // Continue from the stored (32-bit) parameters so later stages see what a reload sees.
    read_checkpoint(&path)
}

fn train_and_save_extractor(doc: &ConfigDoc, out: &Path, manifest: &mut RunManifest) -> CliResult<FeatureExtractor> {
    let cfg = doc.extractor_config();
    let ext = manifest.time("extractor", || train_extractor(&cfg, doc.table1.resolution))?;
    let json = serde_json::to_vec(&ext).expect("extractor serializes");
    manifest.output(out, EXTRACTOR_FILE, &json)?;
    Ok(ext)
}

fn read_extractor(path: &Path) -> CliResult<FeatureExtractor> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| CliError::io(path, e))
}

pub fn cmd_train(common: &Common) -> CliResult<RunManifest> {
    let doc = load_config(common)?;
    let mut manifest = start("train", common, &doc)?;
    train_and_save_backbone(&doc, &common.out, &mut manifest)?;
    train_and_save_extractor(&doc, &common.out, &mut manifest)?;
    manifest.write(&common.out)
}

pub fn cmd_invert(
    common: &Common,
    checkpoint: &Path,
    data: Option<&Path>,
    granularity: Option<Granularity>,
) -> CliResult<RunManifest> {
    let doc = load_config(common)?;
    let mut manifest = start("invert", common, &doc)?;
    manifest.input(checkpoint)?;
    let ckpt = read_checkpoint(checkpoint)?;
    let records = load_dataset(&doc, data, &mut manifest)?;
    let granularity = granularity.unwrap_or(doc.experiment.granularity);
    let schedule = ckpt.schedule.build()?;
    let before = params_hash(&ckpt.net);
    let groups = group_by_class(&records);
    let inv = doc.inversion();
    let table = manifest.time("invert", || {
        finetune_concepts(&ckpt.net, &ckpt.table, &groups, granularity, &schedule, &inv)
    })?;
    if params_hash(&ckpt.net) != before {
        return Err(CliError::Numerical("backbone parameters changed during inversion".into()));
    }
    let updated = Checkpoint {
        table,
        config: serde_json::to_value(&doc).expect("config serializes"),
        ..ckpt
    };
    let path = common.out.join(CONCEPTS_FILE);
    write_checkpoint(&path, &updated)?;
    manifest.existing_output(&common.out, &path)?;
    manifest.write(&common.out)
}

#[derive(Debug, Clone, Default)]
pub struct AugmentOptions {
    pub real_guidance: bool,
    pub k: Option<usize>,
    pub t0: Option<f64>,
    pub mask: Option<MaskRole>,
    pub m: Option<usize>,
    pub alpha: Option<f64>,
    pub max_records: Option<usize>,
}

/// Classes whose learned concept is missing for at least one record.
fn missing_concepts(table: &ConceptTable, records: &[DatasetRecord]) -> Vec<u32> {
    let positions = dafkit::augment::class_positions(records);
    let mut missing: Vec<u32> = records
        .iter()
        .zip(positions)
        .filter(|(r, p)| !table.contains(table.concept_for(r.label, *p)))
        .map(|(r, _)| r.label)
        .collect();
    missing.dedup();
    missing
}

pub fn cmd_augment(common: &Common, checkpoint: &Path, data: Option<&Path>, opts: &AugmentOptions) -> CliResult<RunManifest> {
    let mut doc = load_config(common)?;
    if let Some(k) = opts.k {
        doc.table1.stacked_augmentations = k;
        if doc.table1.activation_probabilities.as_ref().is_some_and(|p| p.len() != k) {
            doc.table1.activation_probabilities = None;
        }
    }
    if let Some(m) = opts.m {
        doc.table1.synthetic_images_per_real = m;
    }
    if let Some(a) = opts.alpha {
        doc.table1.synthetic_probability = a;
    }
    let mut manifest = start("augment", common, &doc)?;
    manifest.input(checkpoint)?;
    let ckpt = read_checkpoint(checkpoint)?;
    let records = load_dataset(&doc, data, &mut manifest)?;
    let (policy, mode) = if opts.real_guidance {
        (doc.real_guidance_policy()?, ConceptMode::Null)
    } else {
        let p = doc.policy(doc.table1.stacked_augmentations, opts.t0, opts.mask)?;
        (p, ConceptMode::Learned)
    };
    if mode == ConceptMode::Learned {
        let missing = missing_concepts(&ckpt.table, &records);
        if !missing.is_empty() {
            return Err(CliError::Input(format!(
                "concept table has no learned embedding for classes {missing:?}; run `dafkit invert` first"
            )));
        }
    }
    let schedule = ckpt.schedule.build()?;
    let ctx = GenerationContext {
        net: &ckpt.net,
        table: &ckpt.table,
        schedule: &schedule,
        sampler: doc.sampler(),
        concept_mode: mode,
        mask_dilation: doc.experiment.mask_dilation,
        workers: doc.workers,
    };
    let store = common.out.join("store");
    let rng = RngStream::new(doc.seed, StreamId::new("store"));
    let m = doc.table1.synthetic_images_per_real;
    let progress = manifest.time("augment", || build_store_dir(&store, &records, &policy, m, &ctx, &rng, opts.max_records))?;
    match progress {
        StoreProgress::Interrupted { done, total } => {
            manifest.write(&common.out)?;
            Err(CliError::Partial {
                failed: total - done,
                total,
                what: "synthetic images",
            })
        }
        StoreProgress::Complete(sm) => {
            for f in store_files(&store, &sm) {
                manifest.existing_output(&common.out, &f)?;
            }
            let manifest = manifest.write(&common.out)?;
            match sm.failed() {
                0 => Ok(manifest),
                failed => Err(CliError::Partial {
                    failed,
                    total: sm.records.len(),
                    what: "synthetic images",
                }),
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FewshotOptions {
    pub auto: bool,
    pub from: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub extractor: Option<PathBuf>,
    pub methods: Option<Vec<String>>,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub m: Option<usize>,
}

/// An explicit path, else `from/<name>` when that file exists.
fn prerequisite(explicit: &Option<PathBuf>, from: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
    explicit
        .clone()
        .or_else(|| from.as_ref().map(|d| d.join(name)).filter(|p| p.exists()))
}

pub fn cmd_fewshot(common: &Common, opts: &FewshotOptions) -> CliResult<(RunManifest, ExperimentReport)> {
    let mut doc = load_config(common)?;
    if let Some(methods) = &opts.methods {
        doc.experiment.methods = methods.clone();
    }
    if let Some(k) = opts.k {
        doc.table1.stacked_augmentations = k;
        if doc.table1.activation_probabilities.as_ref().is_some_and(|p| p.len() != k) {
            doc.table1.activation_probabilities = None;
        }
    }
    if let Some(a) = opts.alpha {
        doc.table1.synthetic_probability = a;
    }
    if let Some(m) = opts.m {
        doc.table1.synthetic_images_per_real = m;
    }
    let mut manifest = start("fewshot", common, &doc)?;
    let cfg = doc.experiment_config()?;
    let out = &common.out;
    let records = load_dataset(&doc, None, &mut manifest)?;

    let needs_backbone = cfg.methods.iter().any(|m| *m != Method::Baseline);
    let ckpt = match prerequisite(&opts.checkpoint, &opts.from, BACKBONE_FILE) {
        Some(p) if needs_backbone => {
            manifest.input(&p)?;
            Some(read_checkpoint(&p)?)
        }
        None if needs_backbone && opts.auto => Some(train_and_save_backbone(&doc, out, &mut manifest)?),
        None if needs_backbone => {
            return Err(CliError::Input(
                "no backbone checkpoint: pass --checkpoint, --from a train directory, or --auto".into(),
            ))
        }
        _ => None,
    };
    let extractor = match prerequisite(&opts.extractor, &opts.from, EXTRACTOR_FILE) {
        Some(p) => {
            manifest.input(&p)?;
            read_extractor(&p)?
        }
        None if opts.auto => train_and_save_extractor(&doc, out, &mut manifest)?,
        None => {
            return Err(CliError::Input(
                "no feature extractor: pass --extractor, --from a train directory, or --auto".into(),
            ))
        }
    };

    let schedule = match &ckpt {
        Some(c) => Some(c.schedule.build()?),
        None => None,
    };
    let backbone = match (&ckpt, &schedule) {
        (Some(c), Some(s)) => Some(Backbone {
            net: &c.net,
            table: &c.table,
            schedule: s,
        }),
        _ => None,
    };
    let report = manifest.time("experiment", || run_experiment(&cfg, &records, backbone.as_ref(), &extractor))?;
    write_report(&report, out, "report", &mut manifest)?;
    let manifest = manifest.write(out)?;
    match report.failed_cells() {
        0 => Ok((manifest, report)),
        failed => Err(CliError::Partial {
            failed,
            total: report.cells.len(),
            what: "experiment cells",
        }),
    }
}

pub fn cmd_report(input: &Path, out: &Path) -> CliResult<RunManifest> {
    let bytes = read_file(input)?;
    let report: ExperimentReport = serde_json::from_slice(&bytes).map_err(|e| CliError::io(input, e))?;
    let mut manifest = RunManifest::new("report", content_hash(&bytes));
    manifest.input(input)?;
    write_report(&report, out, "report", &mut manifest)?;
    manifest.write(out)
}
