//! Procedural shape datasets with ground-truth object masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::DatasetRecord;
use crate::error::{param, Result};
use crate::rng::{gaussian, RngStream};
use crate::tensor::{ImageTensor, MaskTensor};

/// Object geometry. The first four are the few-shot target families; the rest
/// are reserved for pretraining the frozen feature extractor and the backbone
/// vocabulary; the texture pair is the low-contrast texture-discrimination task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Ellipse,
    Bar,
    Chevron,
    Hexagon,
    FineTexture,
    CoarseTexture,
}

impl ShapeFamily {
    pub const TARGETS: [ShapeFamily; 4] = [
        ShapeFamily::Circle,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Cross,
    ];
    pub const PRETRAIN: [ShapeFamily; 6] = [
        ShapeFamily::Ring,
        ShapeFamily::Diamond,
        ShapeFamily::Ellipse,
        ShapeFamily::Bar,
        ShapeFamily::Chevron,
        ShapeFamily::Hexagon,
    ];
    pub const TEXTURES: [ShapeFamily; 2] = [ShapeFamily::FineTexture, ShapeFamily::CoarseTexture];

    /// Membership test in shape-local coordinates, where the object spans roughly `[-1, 1]^2`.
    fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeFamily::Circle | ShapeFamily::FineTexture | ShapeFamily::CoarseTexture => r2 <= 1.0,
            ShapeFamily::Square => u.abs().max(v.abs()) <= 0.8,
            ShapeFamily::Triangle => v <= 0.7 && u.abs() <= 0.6 * (v + 1.0),
            ShapeFamily::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            ShapeFamily::Ring => (0.36..=1.0).contains(&r2),
            ShapeFamily::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeFamily::Ellipse => u * u + v * v / 0.3 <= 1.0,
            ShapeFamily::Bar => u.abs() <= 1.0 && v.abs() <= 0.3,
            ShapeFamily::Chevron => {
                let d = v - 0.8 * u.abs();
                u.abs() <= 1.0 && (-0.7..=-0.1).contains(&d)
            }
            ShapeFamily::Hexagon => {
                let h = 3f64.sqrt() / 2.0;
                v.abs() <= h && h * u.abs() + 0.5 * v.abs() <= h
            }
        }
    }

    /// Spatial frequency of the fill pattern, in cycles per object radius.
    fn texture_frequency(self) -> Option<f64> {
        match self {
            ShapeFamily::FineTexture => Some(3.0),
            ShapeFamily::CoarseTexture => Some(1.2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDatasetSpec {
    /// Shape family of each class; class ids are positions in this list.
    pub families: Vec<ShapeFamily>,
    pub per_class: usize,
    pub resolution: usize,
    /// Background colors shared by all classes.
    pub palette: Vec<[f64; 3]>,
    /// Standard deviation of the per-channel object color around mid-gray.
    pub color_spread: f64,
    /// Per-pixel Gaussian noise level.
    pub texture_noise: f64,
    /// Object radius as a fraction of the resolution.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Amplitude of the fill pattern of texture families.
    pub texture_contrast: f64,
    pub emit_masks: bool,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            families: ShapeFamily::TARGETS.to_vec(),
            per_class: 50,
            resolution: 32,
            palette: vec![
                [-0.6, -0.5, -0.3],
                [0.4, 0.35, 0.2],
                [-0.2, 0.3, -0.3],
                [0.1, -0.2, 0.5],
            ],
            color_spread: 0.5,
            texture_noise: 0.05,
            min_radius: 0.22,
            max_radius: 0.4,
            texture_contrast: 0.5,
            emit_masks: true,
            seed: 0,
        }
    }
}

impl ToyDatasetSpec {
    /// Low-contrast two-class texture discrimination, one object per image.
    pub fn texture_pair() -> Self {
        Self {
            families: ShapeFamily::TEXTURES.to_vec(),
            palette: vec![[-0.1, 0.1, -0.2], [0.0, 0.15, -0.1]],
            color_spread: 0.05,
            texture_contrast: 0.25,
            ..Self::default()
        }
    }

    pub fn classes(&self) -> usize {
        self.families.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.len() < 2 {
            return param("a toy dataset needs at least 2 classes");
        }
        if self.resolution < 8 || self.resolution % 4 != 0 {
            return param("resolution must be a multiple of 4 and at least 8");
        }
        if self.palette.is_empty() {
            return param("background palette is empty");
        }
        if !(0.0 < self.min_radius && self.min_radius <= self.max_radius && self.max_radius <= 0.5) {
            return param("object radius range must satisfy 0 < min <= max <= 0.5");
        }
        Ok(())
    }
}

/// Smallest and largest fraction of pixels an object mask may cover.
pub const MASK_COVERAGE: (f64, f64) = (0.05, 0.6);

fn render<R: Rng>(family: ShapeFamily, spec: &ToyDatasetSpec, rng: &mut R) -> (ImageTensor, MaskTensor) {
    let n = spec.resolution;
    let nf = n as f64;
    loop {
        let radius = nf * rng.random_range(spec.min_radius..=spec.max_radius);
        let margin = 0.7 * radius;
        let cx = rng.random_range(margin..=nf - margin);
        let cy = rng.random_range(margin..=nf - margin);
        let theta = rng.random_range(-0.5..0.5) * std::f64::consts::PI * 0.5;
        let (s, c) = theta.sin_cos();
        let mut mask = MaskTensor::zeros(n, n);
        let mut local = vec![(0.0, 0.0); n * n];
        for y in 0..n {
            for x in 0..n {
                let dx = (x as f64 + 0.5 - cx) / radius;
                let dy = (y as f64 + 0.5 - cy) / radius;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                local[y * n + x] = (u, v);
                if family.contains(u, v) {
                    mask.data[y * n + x] = 1.0;
                }
            }
        }
        let cov = mask.coverage();
        if !(MASK_COVERAGE.0..=MASK_COVERAGE.1).contains(&cov) {
            continue;
        }
        let bg_base = spec.palette[rng.random_range(0..spec.palette.len())];
        let bg: Vec<f64> = bg_base.iter().map(|b| b + 0.1 * gaussian(rng)).collect();
        let fg: Vec<f64> = match family.texture_frequency() {
            Some(_) => bg.iter().map(|b| b + spec.color_spread * gaussian(rng)).collect(),
            None => loop {
                let cand: Vec<f64> = (0..3).map(|_| (spec.color_spread * gaussian(rng)).clamp(-0.9, 0.9)).collect();
                let contrast: f64 = cand.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
                if contrast >= 0.3 {
                    break cand;
                }
            },
        };
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let mut img = ImageTensor::zeros(n, n, 3);
        for ch in 0..3 {
            for p in 0..n * n {
                let inside = mask.data[p] == 1.0;
                let mut v = if inside { fg[ch] } else { bg[ch] };
                if inside {
                    if let Some(freq) = family.texture_frequency() {
                        let (u, _) = local[p];
                        v += spec.texture_contrast * (std::f64::consts::TAU * freq * u + phase).sin();
                    }
                }
                v += spec.texture_noise * gaussian(rng);
                img.data[ch * n * n + p] = v.clamp(-1.0, 1.0);
            }
        }
        return (img, mask);
    }
}

/// One freshly rendered image of `class` drawn from `rng`.
pub(crate) fn render_class<R: Rng>(spec: &ToyDatasetSpec, class: usize, rng: &mut R) -> (ImageTensor, MaskTensor) {
    render(spec.families[class], spec, rng)
}

/// Deterministic dataset of `per_class` records for each family, grouped by class.
pub fn gen_toy_dataset(spec: &ToyDatasetSpec) -> Result<Vec<DatasetRecord>> {
    spec.validate()?;
    let base = RngStream::root(spec.seed).child("toy", 0, 0, 0);
    let mut out = Vec::with_capacity(spec.classes() * spec.per_class);
    for (class, &family) in spec.families.iter().enumerate() {
        for k in 0..spec.per_class {
            let mut rng = base.child("image", class as u64, k as u64, 0).rng();
            let (image, mask) = render(family, spec, &mut rng);
            let masks = vec![(class as u32, mask)];
            let label = super::label_from_masks(&masks)?;
            out.push(DatasetRecord {
                image,
                label,
                masks: if spec.emit_masks { masks } else { Vec::new() },
            });
        }
    }
    Ok(out)
}
