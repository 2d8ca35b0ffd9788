//! Reverse-process sampling: ancestral steps, classifier-free guidance, image
//! splicing and mask-pinned inpainting.
//!
//! A sampler with `steps < T` runs on an evenly strided subset of the training
//! timesteps. Step `i` of that chain uses the respaced schedule from
//! [`NoiseSchedule::subsequence`] for its coefficients and queries the network at
//! the original timestep it stands for.

use serde::{Deserialize, Serialize};

use crate::denoiser::{ConceptKey, ConceptTable, NoisePredictor};
use crate::error::{param, Error, Result};
use crate::rng::{gaussian_like, RngStream};
use crate::schedule::{noise_to, splice_index, strided_timesteps, NoiseSchedule};
use crate::tensor::{ImageTensor, MaskTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Number of reverse steps `S`.
    pub steps: usize,
    pub guidance_scale: f64,
    /// Add noise on the step that produces `x_0` as well.
    pub final_noise: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 7.5,
            final_noise: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.len() {
            return param(format!("sampler steps {} outside 1..={}", self.steps, schedule.len()));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return param("guidance scale must be finite and non-negative");
        }
        Ok(())
    }
}

/// The timesteps a sampler visits and the schedule governing its transitions.
#[derive(Debug, Clone)]
pub struct Chain {
    pub schedule: NoiseSchedule,
    /// `timesteps[i - 1]` is the network timestep for chain step `i`.
    pub timesteps: Vec<usize>,
}

impl Chain {
    pub fn new(schedule: &NoiseSchedule, steps: usize) -> Result<Self> {
        if steps == schedule.len() {
            return Ok(Self {
                schedule: schedule.clone(),
                timesteps: (1..=steps).collect(),
            });
        }
        let timesteps = strided_timesteps(schedule.len(), steps)?;
        Ok(Self {
            schedule: schedule.subsequence(&timesteps)?,
            timesteps,
        })
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }
}

/// `mu + sqrt(beta_t) * noise`, `mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)`.
pub fn reverse_step(
    x_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    schedule: &NoiseSchedule,
    noise: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    schedule.check_step(t)?;
    x_t.check_shape(eps_hat, "predicted noise")?;
    let beta = schedule.beta(t);
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
    let mean = x_t.zip_with(eps_hat, |x, e| inv_sqrt_alpha * (x - coef * e));
    match noise {
        None => Ok(mean),
        Some(z) => {
            x_t.check_shape(z, "step noise")?;
            let sigma = beta.sqrt();
            Ok(mean.zip_with(z, |m, n| m + sigma * n))
        }
    }
}

/// `eps_u + s * (eps_c - eps_u)` with `eps_u` conditioned on the null embedding.
///
/// Only one network evaluation is made when `s` is 0 or 1 or the concept is null.
pub fn guided_noise<P: NoisePredictor>(
    net: &P,
    table: &ConceptTable,
    x_t: &ImageTensor,
    t: usize,
    concept: ConceptKey,
    scale: f64,
) -> Result<ImageTensor> {
    let w_c = table.get(concept)?;
    let w_u = table.null();
    if scale == 1.0 || concept == ConceptKey::Null {
        return net.predict(x_t, t, w_c);
    }
    let eps_u = net.predict(x_t, t, w_u)?;
    if scale == 0.0 {
        return Ok(eps_u);
    }
    let eps_c = net.predict(x_t, t, w_c)?;
    Ok(eps_u.zip_with(&eps_c, |u, c| u + scale * (c - u)))
}

/// `(1 - v) * x_t + v * (sqrt(abar_t) * x_ref + sqrt(1 - abar_t) * eta)`, with `abar_0 = 1`.
pub fn inpaint_blend(
    x_t: &ImageTensor,
    x_ref: &ImageTensor,
    v: &MaskTensor,
    t: usize,
    eta: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_index(t)?;
    x_t.check_shape(x_ref, "reference image")?;
    x_t.check_shape(eta, "blend noise")?;
    if !v.matches(x_t) {
        return param("mask shape does not match the image");
    }
    v.validate()?;
    let known = noise_to(x_ref, schedule.alpha_bar(t), eta);
    let mut out = x_t.clone();
    let plane = x_t.height * x_t.width;
    for (i, o) in out.data.iter_mut().enumerate() {
        let m = v.data[i % plane];
        *o = (1.0 - m) * *o + m * known.data[i];
    }
    Ok(out)
}

struct Pin<'a> {
    x_ref: &'a ImageTensor,
    mask: &'a MaskTensor,
}

#[allow(clippy::too_many_arguments)]
fn run_chain<P: NoisePredictor>(
    net: &P,
    table: &ConceptTable,
    chain: &Chain,
    cfg: &SamplerConfig,
    concept: ConceptKey,
    mut x: ImageTensor,
    start: usize,
    rng: &RngStream,
    pin: Option<Pin<'_>>,
) -> Result<ImageTensor> {
    for i in (1..=start).rev() {
        let t = chain.timesteps[i - 1];
        let eps = guided_noise(net, table, &x, t, concept, cfg.guidance_scale)?;
        let noise = (i > 1 || cfg.final_noise).then(|| gaussian_like(&mut rng.child("step", 0, 0, i as u64).rng(), &x));
        x = reverse_step(&x, i, &eps, &chain.schedule, noise.as_ref())?;
        if let Some(pin) = &pin {
            let eta = gaussian_like(&mut rng.child("eta", 0, 0, i as u64).rng(), &x);
            x = inpaint_blend(&x, pin.x_ref, pin.mask, i - 1, &eta, &chain.schedule)?;
        }
        if !x.is_finite() {
            return Err(Error::SamplingDivergence { t });
        }
    }
    Ok(x)
}

fn check_concept(table: &ConceptTable, concept: ConceptKey) -> Result<()> {
    table.get(concept).map(|_| ())
}

/// Ancestral sampling from `x_S ~ N(0, I)` down to `x_0`.
pub fn generate<P: NoisePredictor>(
    net: &P,
    table: &ConceptTable,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    concept: ConceptKey,
    shape: (usize, usize, usize),
    rng: &RngStream,
) -> Result<ImageTensor> {
    cfg.validate(schedule)?;
    check_concept(table, concept)?;
    let chain = Chain::new(schedule, cfg.steps)?;
    let (h, w, c) = shape;
    let x = crate::rng::gaussian_image(&mut rng.child("init", 0, 0, 0).rng(), h, w, c);
    run_chain(net, table, &chain, cfg, concept, x, chain.len(), rng, None)
}

fn splice(x_ref: &ImageTensor, chain: &Chain, start: usize, rng: &RngStream) -> ImageTensor {
    let eps = gaussian_like(&mut rng.child("splice", 0, 0, 0).rng(), x_ref);
    noise_to(x_ref, chain.schedule.alpha_bar(start), &eps)
}

/// Noises `x_ref` to chain step `floor(S * t0)` and denoises it back.
#[allow(clippy::too_many_arguments)]
pub fn sdedit<P: NoisePredictor>(
    x_ref: &ImageTensor,
    t0: f64,
    net: &P,
    table: &ConceptTable,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    concept: ConceptKey,
    rng: &RngStream,
) -> Result<ImageTensor> {
    cfg.validate(schedule)?;
    let start = splice_index(cfg.steps, t0)?;
    check_concept(table, concept)?;
    if start == 0 {
        return Ok(x_ref.clone());
    }
    let chain = Chain::new(schedule, cfg.steps)?;
    let x = splice(x_ref, &chain, start, rng);
    run_chain(net, table, &chain, cfg, concept, x, start, rng, None)
}

/// [`sdedit`] with pixels where `preserve = 1` pinned to the reference after every step.
///
/// The final blend happens at `abar_0 = 1`, so fully preserved pixels equal `x_ref` exactly.
#[allow(clippy::too_many_arguments)]
pub fn sdedit_masked<P: NoisePredictor>(
    x_ref: &ImageTensor,
    preserve: &MaskTensor,
    t0: f64,
    net: &P,
    table: &ConceptTable,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    concept: ConceptKey,
    rng: &RngStream,
) -> Result<ImageTensor> {
    cfg.validate(schedule)?;
    let start = splice_index(cfg.steps, t0)?;
    check_concept(table, concept)?;
    if !preserve.matches(x_ref) {
        return param("mask shape does not match the image");
    }
    preserve.validate()?;
    if start == 0 {
        return Ok(x_ref.clone());
    }
    let chain = Chain::new(schedule, cfg.steps)?;
    let x = splice(x_ref, &chain, start, rng);
    let pin = Pin { x_ref, mask: preserve };
    run_chain(net, table, &chain, cfg, concept, x, start, rng, Some(pin))
}
