//! The configuration document: one TOML (or JSON) file with a `[table1]` section
//! holding the core augmentation and training hyperparameters, plus desk-scale sections.

use std::path::{Path, PathBuf};

use dafkit::augment::{build_dafusion_policy, AugmentationPolicy, FlipMode, MaskRole, Transform};
use dafkit::denoiser::ScheduleParams;
use dafkit::fewshot::{BackboneConfig, ExperimentConfig, ExtractorConfig, Method, ProbeConfig, ShapeFamily, ToyDatasetSpec};
use dafkit::{Granularity, NetConfig, SamplerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::io::read_file;

/// Initial value of a new concept embedding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenInit {
    /// Copy of the class-agnostic embedding.
    #[default]
    Null,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Table1 {
    pub synthetic_probability: f64,
    pub stacked_augmentations: usize,
    /// One per stacked strength; `1 / k` each when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation_probabilities: Option<Vec<f64>>,
    pub synthetic_images_per_real: usize,
    pub textual_inversion_token_initialization: TokenInit,
    pub textual_inversion_batch_size: usize,
    pub textual_inversion_learning_rate: f64,
    pub textual_inversion_training_steps: usize,
    pub real_guidance_strength: f64,
    pub guidance_scale: f64,
    pub resolution: usize,
    pub denoising_steps: usize,
    pub classifier_learning_rate: f64,
    pub classifier_batch_size: usize,
    pub classifier_training_steps: usize,
    pub classifier_early_stopping_interval: usize,
}

impl Default for Table1 {
    fn default() -> Self {
        let probe = ProbeConfig::default();
        let inversion = TrainConfig::default();
        let sampler = SamplerConfig::default();
        Self {
            synthetic_probability: 0.5,
            stacked_augmentations: 4,
            activation_probabilities: None,
            synthetic_images_per_real: 10,
            textual_inversion_token_initialization: TokenInit::Null,
            textual_inversion_batch_size: inversion.batch_size,
            textual_inversion_learning_rate: inversion.lr,
            textual_inversion_training_steps: inversion.steps,
            real_guidance_strength: 0.5,
            guidance_scale: sampler.guidance_scale,
            resolution: 32,
            denoising_steps: sampler.steps,
            classifier_learning_rate: probe.lr,
            classifier_batch_size: probe.batch_size,
            classifier_training_steps: probe.steps,
            classifier_early_stopping_interval: probe.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub name: String,
    /// Class-per-subdirectory PNG tree; the procedural generator is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub validation_fraction: f64,
    /// Procedural generator settings. Its resolution must equal `table1.resolution`.
    pub toy: ToyDatasetSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            name: "toy-shapes".into(),
            dir: None,
            validation_fraction: 0.2,
            toy: ToyDatasetSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub widths: [usize; 3],
    pub cond_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub schedule: ScheduleParams,
    pub train: TrainConfig,
    pub per_class: usize,
    pub vocab_families: Vec<ShapeFamily>,
    pub unconditional_families: Vec<ShapeFamily>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let net = NetConfig::default();
        let bb = BackboneConfig::default();
        Self {
            widths: net.widths,
            cond_dim: net.cond_dim,
            time_dim: net.time_dim,
            hidden: net.hidden,
            schedule: bb.schedule,
            train: bb.train,
            per_class: bb.per_class,
            vocab_families: bb.vocab_families,
            unconditional_families: bb.unconditional_families,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSection {
    pub widths: [usize; 3],
    pub families: Vec<ShapeFamily>,
    pub per_class: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        let e = ExtractorConfig::default();
        Self {
            widths: e.widths,
            families: e.families,
            per_class: e.per_class,
            steps: e.steps,
            batch_size: e.batch_size,
            lr: e.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub q_grid: Vec<usize>,
    pub trials: usize,
    /// Method names such as `baseline`, `real-guidance`, `dafusion` (k from table1),
    /// `dafusion-k1-t0.5`, `dafusion-k4-foreground` or `identity-control`.
    pub methods: Vec<String>,
    pub granularity: Granularity,
    /// Flips applied at classifier-training time in every arm.
    pub flips: Vec<FlipMode>,
    pub flip_probability: f64,
    /// Chebyshev radius, in pixels, by which object masks grow before masked edits.
    pub mask_dilation: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            q_grid: e.q_grid,
            trials: e.trials,
            methods: vec!["baseline".into(), "real-guidance".into(), "dafusion".into()],
            granularity: e.granularity,
            flips: e.flips,
            flip_probability: e.flip_probability,
            mask_dilation: e.mask_dilation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigDoc {
    /// Master seed for training, inversion, generation and the experiment.
    pub seed: u64,
    pub workers: usize,
    pub table1: Table1,
    pub dataset: DatasetSection,
    pub backbone: BackboneSection,
    pub extractor: ExtractorSection,
    pub experiment: ExperimentSection,
}

impl Default for ConfigDoc {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            table1: Table1::default(),
            dataset: DatasetSection::default(),
            backbone: BackboneSection::default(),
            extractor: ExtractorSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl ConfigDoc {
    /// Reads TOML, or JSON when the extension is `.json`. Unknown keys are rejected.
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| CliError::io(path, e))?;
        let doc: ConfigDoc = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::io(path, e))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::io(path, e))?
        };
        doc.validate().map_err(|e| CliError::io(path, e))?;
        Ok(doc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes to JSON");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> CliResult<()> {
        let t = &self.table1;
        if self.dataset.dir.is_none() && self.dataset.toy.resolution != t.resolution {
            return Err(CliError::Input(format!(
                "dataset.toy.resolution ({}) disagrees with table1.resolution ({})",
                self.dataset.toy.resolution, t.resolution
            )));
        }
        if t.stacked_augmentations == 0 || t.synthetic_images_per_real == 0 {
            return Err(CliError::Input("table1: k and M must be at least 1".into()));
        }
        self.policy(t.stacked_augmentations, None, None)?;
        self.methods()?;
        self.experiment_config()?.validate()?;
        self.sampler().validate(&self.backbone.schedule.build()?)?;
        self.inversion().validate()?;
        Ok(())
    }

    pub fn net(&self) -> NetConfig {
        let b = &self.backbone;
        NetConfig {
            height: self.table1.resolution,
            width: self.table1.resolution,
            channels: 3,
            widths: b.widths,
            cond_dim: b.cond_dim,
            time_dim: b.time_dim,
            hidden: b.hidden,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let b = &self.backbone;
        BackboneConfig {
            net: self.net(),
            schedule: b.schedule.clone(),
            train: b.train.clone(),
            per_class: b.per_class,
            vocab_families: b.vocab_families.clone(),
            unconditional_families: b.unconditional_families.clone(),
            seed: self.seed,
        }
    }

    pub fn extractor_config(&self) -> ExtractorConfig {
        let e = &self.extractor;
        ExtractorConfig {
            widths: e.widths,
            families: e.families.clone(),
            per_class: e.per_class,
            steps: e.steps,
            batch_size: e.batch_size,
            lr: e.lr,
            seed: self.seed,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.table1.denoising_steps,
            guidance_scale: self.table1.guidance_scale,
            ..SamplerConfig::default()
        }
    }

    pub fn inversion(&self) -> TrainConfig {
        let t = &self.table1;
        TrainConfig {
            lr: t.textual_inversion_learning_rate,
            batch_size: t.textual_inversion_batch_size,
            steps: t.textual_inversion_training_steps,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        let t = &self.table1;
        ProbeConfig {
            lr: t.classifier_learning_rate,
            batch_size: t.classifier_batch_size,
            steps: t.classifier_training_steps,
            eval_every: t.classifier_early_stopping_interval,
        }
    }

    /// The stacked policy for `k` strengths; `t0` pins every strength, `mask` selects masked edits.
    pub fn policy(&self, k: usize, t0: Option<f64>, mask: Option<MaskRole>) -> CliResult<AugmentationPolicy> {
        let mut p = build_dafusion_policy(k, mask)?;
        if let Some(probs) = &self.table1.activation_probabilities {
            if probs.len() != self.table1.stacked_augmentations {
                return Err(CliError::Input(format!(
                    "table1.activation_probabilities has {} entries but stacked_augmentations is {}",
                    probs.len(),
                    self.table1.stacked_augmentations
                )));
            }
            if probs.len() == k {
                p = p.with_probabilities(probs)?;
            }
        }
        if let Some(t0) = t0 {
            p = p.with_fixed_t0(t0)?;
        }
        Ok(p)
    }

    pub fn real_guidance_policy(&self) -> CliResult<AugmentationPolicy> {
        Ok(AugmentationPolicy::new(vec![(
            Transform::Sdedit {
                t0: self.table1.real_guidance_strength,
            },
            1.0,
        )])?)
    }

    pub fn methods(&self) -> CliResult<Vec<Method>> {
        self.experiment
            .methods
            .iter()
            .map(|name| {
                if name == "dafusion" {
                    return Ok(Method::Dafusion {
                        k: self.table1.stacked_augmentations,
                        t0: None,
                        mask: None,
                    });
                }
                name.parse::<Method>().map_err(|e| CliError::Input(format!("experiment.methods: {e}")))
            })
            .collect()
    }

    pub fn experiment_config(&self) -> CliResult<ExperimentConfig> {
        let t = &self.table1;
        let e = &self.experiment;
        Ok(ExperimentConfig {
            dataset_name: self.dataset.name.clone(),
            dataset: self.dataset.toy.clone(),
            validation_fraction: self.dataset.validation_fraction,
            q_grid: e.q_grid.clone(),
            trials: e.trials,
            seed: self.seed,
            methods: self.methods()?,
            m: t.synthetic_images_per_real,
            alpha: t.synthetic_probability,
            activation_probabilities: t.activation_probabilities.clone(),
            sampler: self.sampler(),
            inversion: self.inversion(),
            granularity: e.granularity,
            probe: self.probe(),
            flips: e.flips.clone(),
            flip_probability: e.flip_probability,
            real_guidance_t0: t.real_guidance_strength,
            mask_dilation: e.mask_dilation,
            workers: self.workers.max(1),
        })
    }
}
