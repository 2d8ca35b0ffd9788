//! The noise-prediction network and its conditioning.
//!
//! The network is a small pixel-space encoder–decoder:
//!
//! ```text
//! x ─ conv ─ h1 ─ conv/2 ─ h2 ─ conv/2 ─ h3 ─(+ cond)─ conv ─ up ─┐
//!            │              └──────────────────────── concat ─ conv ─ up ─┐
//!            └───────────────────────────────────────────────────── concat ─ conv ─ conv ─ out
//! ```
//!
//! `cond = MLP([sinusoid(t); w])` is broadcast over the bottleneck, which is the only
//! place the timestep and the concept embedding `w` enter the network.

mod checkpoint;
mod concepts;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint, ScheduleParams, CHECKPOINT_MAGIC};
pub use concepts::{ConceptKey, ConceptTable, Granularity};
pub use train::{
    draw_timestep_and_noise, finetune_concepts, gradient_check, loss_simple, loss_simple_items,
    rotations_and_flips, train_denoiser, train_denoiser_with, GradCheckScope, LossItem, TrainConfig, GRAD_CHECK_STEP,
};

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::nn::{
    silu, silu_backward, silu_fmap, silu_fmap_backward, upsample2, upsample2_backward, Conv3x3, Fmap, Linear,
    ParamSet,
};
use crate::rng::RngStream;
use crate::tensor::ImageTensor;

/// Anything that predicts the noise in `x_t` given a timestep and a conditioning vector.
pub trait NoisePredictor {
    fn predict(&self, x_t: &ImageTensor, t: usize, w: &[f64]) -> Result<ImageTensor>;
    fn cond_dim(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Encoder widths at full, half and quarter resolution.
    pub widths: [usize; 3],
    /// Concept-embedding width `d`.
    pub cond_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            widths: [32, 64, 64],
            cond_dim: 16,
            time_dim: 32,
            hidden: 64,
        }
    }
}

impl NetConfig {
    fn validate(&self) -> Result<()> {
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return param("image height and width must be positive multiples of 4");
        }
        if self.channels == 0 || self.cond_dim == 0 || self.hidden == 0 || self.widths.contains(&0) {
            return param("network widths must be positive");
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return param("time embedding width must be positive and even");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layers {
    conv_in: Conv3x3,
    down1: Conv3x3,
    down2: Conv3x3,
    mid: Conv3x3,
    up2: Conv3x3,
    up1: Conv3x3,
    conv_out: Conv3x3,
    cond1: Linear,
    cond2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonNet {
    pub config: NetConfig,
    pub params: ParamSet,
    layers: Layers,
}

/// Activations kept from the forward pass for backpropagation.
pub struct ForwardCache {
    col_in: Vec<f64>,
    pre1: Fmap,
    col_d1: Vec<f64>,
    pre2: Fmap,
    col_d2: Vec<f64>,
    pre3: Fmap,
    cond_in: Vec<f64>,
    cond_pre: Vec<f64>,
    cond_hidden: Vec<f64>,
    col_mid: Vec<f64>,
    pre5: Fmap,
    col_u2: Vec<f64>,
    pre6: Fmap,
    col_u1: Vec<f64>,
    pre7: Fmap,
    col_out: Vec<f64>,
}

/// Sinusoidal features of the timestep index.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

impl EpsilonNet {
    pub fn new(config: NetConfig, init: &RngStream) -> Result<Self> {
        config.validate()?;
        let mut rng = init.rng();
        let mut ps = ParamSet::default();
        let [c1, c2, c3] = config.widths;
        let ch = config.channels;
        let layers = Layers {
            conv_in: Conv3x3::new(&mut ps, "conv_in", ch, c1, 1, 1.0, &mut rng),
            down1: Conv3x3::new(&mut ps, "down1", c1, c2, 2, 1.0, &mut rng),
            down2: Conv3x3::new(&mut ps, "down2", c2, c3, 2, 1.0, &mut rng),
            mid: Conv3x3::new(&mut ps, "mid", c3, c3, 1, 1.0, &mut rng),
            up2: Conv3x3::new(&mut ps, "up2", c3 + c2, c2, 1, 1.0, &mut rng),
            up1: Conv3x3::new(&mut ps, "up1", c2 + c1, c1, 1, 1.0, &mut rng),
            conv_out: Conv3x3::new(&mut ps, "conv_out", c1, ch, 1, 0.3, &mut rng),
            cond1: Linear::new(&mut ps, "cond1", config.time_dim + config.cond_dim, config.hidden, 1.0, &mut rng),
            cond2: Linear::new(&mut ps, "cond2", config.hidden, c3, 1.0, &mut rng),
        };
        Ok(Self {
            config,
            params: ps,
            layers,
        })
    }

    /// Rebuild a network from stored parameters, checking names and shapes.
    pub fn from_params(config: NetConfig, params: ParamSet) -> Result<Self> {
        let mut net = Self::new(config, &RngStream::root(0))?;
        if net.params.entries.len() != params.entries.len() {
            return param("parameter list does not match the network layout");
        }
        for (a, b) in net.params.entries.iter().zip(&params.entries) {
            if a.name != b.name || a.shape != b.shape {
                return param(format!("parameter `{}` does not match the network layout", b.name));
            }
        }
        let mut values = vec![0.0; net.params.len()];
        for (a, b) in net.params.entries.iter().zip(&params.entries) {
            values[a.range()].copy_from_slice(&params.values[b.range()]);
        }
        net.params.values = values;
        Ok(net)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &ImageTensor, w: &[f64]) -> Result<()> {
        let c = &self.config;
        if (x.height, x.width, x.channels) != (c.height, c.width, c.channels) {
            return param(format!(
                "input shape {:?} does not match network shape ({}, {}, {})",
                x.shape(),
                c.height,
                c.width,
                c.channels
            ));
        }
        if w.len() != c.cond_dim {
            return param(format!("embedding has length {}, expected {}", w.len(), c.cond_dim));
        }
        Ok(())
    }

    pub fn forward(&self, x_t: &ImageTensor, t: usize, w: &[f64]) -> Result<(ImageTensor, ForwardCache)> {
        self.check_input(x_t, w)?;
        let p = &self.params.values;
        let l = &self.layers;
        let x = Fmap::from_data(x_t.channels, x_t.height, x_t.width, x_t.data.clone());

        let (pre1, col_in) = l.conv_in.forward(p, &x);
        let h1 = silu_fmap(&pre1);
        let (pre2, col_d1) = l.down1.forward(p, &h1);
        let h2 = silu_fmap(&pre2);
        let (pre3, col_d2) = l.down2.forward(p, &h2);
        let mut h4 = silu_fmap(&pre3);

        let mut cond_in = timestep_embedding(t, self.config.time_dim);
        cond_in.extend_from_slice(w);
        let cond_pre = l.cond1.forward(p, &cond_in);
        let cond_hidden = silu(&cond_pre);
        let cond = l.cond2.forward(p, &cond_hidden);
        let plane = h4.plane();
        for (ch, v) in cond.iter().enumerate() {
            for a in &mut h4.data[ch * plane..(ch + 1) * plane] {
                *a += v;
            }
        }

        let (pre5, col_mid) = l.mid.forward(p, &h4);
        let h5 = silu_fmap(&pre5);
        let u2 = upsample2(&h5).concat(&h2);
        let (pre6, col_u2) = l.up2.forward(p, &u2);
        let h6 = silu_fmap(&pre6);
        let u1 = upsample2(&h6).concat(&h1);
        let (pre7, col_u1) = l.up1.forward(p, &u1);
        let h7 = silu_fmap(&pre7);
        let (out, col_out) = l.conv_out.forward(p, &h7);

        let out = ImageTensor {
            height: out.h,
            width: out.w,
            channels: out.c,
            data: out.data,
        };
        let cache = ForwardCache {
            col_in,
            pre1,
            col_d1,
            pre2,
            col_d2,
            pre3,
            cond_in,
            cond_pre,
            cond_hidden,
            col_mid,
            pre5,
            col_u2,
            pre6,
            col_u1,
            pre7,
            col_out,
        };
        Ok((out, cache))
    }

    /// Backpropagates `dout` (gradient w.r.t. the predicted noise).
    ///
    /// Parameter gradients are accumulated into `param_grads` when given; the
    /// gradient w.r.t. the conditioning vector `w` is always returned. Without
    /// `param_grads` the encoder is skipped, since `w` enters after it.
    pub fn backward(&self, cache: &ForwardCache, dout: &ImageTensor, mut param_grads: Option<&mut [f64]>) -> Vec<f64> {
        let p = &self.params.values;
        let l = &self.layers;
        let c2 = self.config.widths[1];
        let full = (self.config.height, self.config.width);
        let half = (full.0 / 2, full.1 / 2);
        let quarter = (full.0 / 4, full.1 / 4);
        let want_params = param_grads.is_some();

        let dout = Fmap::from_data(dout.channels, dout.height, dout.width, dout.data.clone());
        let dh7 = l
            .conv_out
            .backward(p, &cache.col_out, full, &dout, param_grads.as_deref_mut(), true)
            .expect("dx requested");
        let dpre7 = silu_fmap_backward(&cache.pre7, &dh7);
        let du1 = l
            .up1
            .backward(p, &cache.col_u1, full, &dpre7, param_grads.as_deref_mut(), true)
            .expect("dx requested");
        let (d_up6, d_skip1) = du1.split(c2);
        let dh6 = upsample2_backward(&d_up6);
        let dpre6 = silu_fmap_backward(&cache.pre6, &dh6);
        let du2 = l
            .up2
            .backward(p, &cache.col_u2, half, &dpre6, param_grads.as_deref_mut(), true)
            .expect("dx requested");
        let (d_up5, d_skip2) = du2.split(self.config.widths[2]);
        let dh5 = upsample2_backward(&d_up5);
        let dpre5 = silu_fmap_backward(&cache.pre5, &dh5);
        let dh4 = l
            .mid
            .backward(p, &cache.col_mid, quarter, &dpre5, param_grads.as_deref_mut(), true)
            .expect("dx requested");

        let plane = dh4.plane();
        let dcond: Vec<f64> = (0..dh4.c)
            .map(|ch| dh4.data[ch * plane..(ch + 1) * plane].iter().sum())
            .collect();
        let dhidden = l.cond2.backward(p, &cache.cond_hidden, &dcond, param_grads.as_deref_mut());
        let dcond_pre = silu_backward(&cache.cond_pre, &dhidden);
        let dcond_in = l.cond1.backward(p, &cache.cond_in, &dcond_pre, param_grads.as_deref_mut());
        let dw = dcond_in[self.config.time_dim..].to_vec();

        if want_params {
            let dpre3 = silu_fmap_backward(&cache.pre3, &dh4);
            let mut dh2 = l
                .down2
                .backward(p, &cache.col_d2, half, &dpre3, param_grads.as_deref_mut(), true)
                .expect("dx requested");
            dh2.add_assign(&d_skip2);
            let dpre2 = silu_fmap_backward(&cache.pre2, &dh2);
            let mut dh1 = l
                .down1
                .backward(p, &cache.col_d1, full, &dpre2, param_grads.as_deref_mut(), true)
                .expect("dx requested");
            dh1.add_assign(&d_skip1);
            let dpre1 = silu_fmap_backward(&cache.pre1, &dh1);
            l.conv_in
                .backward(p, &cache.col_in, full, &dpre1, param_grads.as_deref_mut(), false);
        }
        dw
    }
}

impl NoisePredictor for EpsilonNet {
    fn predict(&self, x_t: &ImageTensor, t: usize, w: &[f64]) -> Result<ImageTensor> {
        Ok(self.forward(x_t, t, w)?.0)
    }

    fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }
}
