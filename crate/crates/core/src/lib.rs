//! Diffusion-based data augmentation for few-shot image classification.
//!
//! The crate is organized bottom-up:
//!
//! * [`schedule`] builds noise schedules and samples the closed-form forward process.
//! * [`denoiser`] holds the trainable noise predictor, concept embeddings and their training loops.
//! * [`sampler`] runs the reverse process: full generation, image splicing and masked inpainting.
//! * [`augment`] turns the sampler into a stackable, balanceable augmentation.
//! * [`fewshot`] is the evaluation harness: toy datasets, splits, linear probes and metrics.
//!
//! All randomness flows through [`rng::RngStream`] so every result is reproducible
//! from a seed and a stream id.

pub mod augment;
pub mod denoiser;
pub mod error;
pub mod fewshot;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;

pub use augment::{
    AugmentationPolicy, DatasetRecord, MaskRole, MixerConfig, Origin, SyntheticStore, Transform,
};
pub use denoiser::{
    ConceptKey, ConceptTable, EpsilonNet, Granularity, NetConfig, NoisePredictor, TrainConfig,
};
pub use error::{Error, Result};
pub use rng::{RngStream, StreamId};
pub use sampler::SamplerConfig;
pub use schedule::NoiseSchedule;
pub use tensor::{ImageTensor, MaskTensor};
