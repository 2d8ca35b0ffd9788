//! Image and mask containers.
//!
//! Images are stored channel-planar (`data[(c * height + y) * width + x]`),
//! which is the layout the convolution kernels in [`crate::nn`] consume.

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return param(format!(
                "image data has {} values, expected {height}x{width}x{channels}",
                data.len()
            ));
        }
        if channels == 0 || height == 0 || width == 0 {
            return param("image dimensions must be positive");
        }
        if data.iter().any(|v| !v.is_finite()) {
            return param("image contains non-finite values");
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Same dimensions, filled with `value`.
    pub fn like(other: &ImageTensor, value: f64) -> Self {
        Self::filled(other.height, other.width, other.channels, value)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_shape(&self, other: &ImageTensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            param(format!(
                "{what}: shape {:?} does not match {:?}",
                other.shape(),
                self.shape()
            ))
        }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    /// Elementwise combination of two same-shaped images.
    pub fn zip_with(&self, other: &ImageTensor, f: impl Fn(f64, f64) -> f64) -> ImageTensor {
        debug_assert!(self.same_shape(other));
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn squared_distance(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> ImageTensor {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let i = self.index(c, y, x);
                    out.data[i] = self.get(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }

    /// Mirror top-bottom.
    pub fn flip_vertical(&self) -> ImageTensor {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let i = self.index(c, y, x);
                    out.data[i] = self.get(c, self.height - 1 - y, x);
                }
            }
        }
        out
    }

    /// Rotate 90 degrees clockwise; the result is `width x height`.
    pub fn rotate90(&self) -> ImageTensor {
        let mut out = ImageTensor::zeros(self.width, self.height, self.channels);
        for c in 0..self.channels {
            for y in 0..out.height {
                for x in 0..out.width {
                    let i = out.index(c, y, x);
                    out.data[i] = self.get(c, self.height - 1 - x, y);
                }
            }
        }
        out
    }

    /// Decode interleaved 8-bit pixels (`HxWxC`, row-major) into `[-1, 1]`.
    pub fn from_pixels(height: usize, width: usize, channels: usize, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return param(format!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                height * width * channels
            ));
        }
        let mut img = Self::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let p = pixels[(y * width + x) * channels + c];
                    let i = img.index(c, y, x);
                    img.data[i] = pixel_to_real(p);
                }
            }
        }
        Ok(img)
    }

    /// Encode to interleaved 8-bit pixels, clamping to `[-1, 1]` first.
    pub fn to_pixels(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.data.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out[(y * self.width + x) * self.channels + c] = real_to_pixel(self.get(c, y, x));
                }
            }
        }
        out
    }
}

/// `p -> 2 * (p / 255) - 1`.
pub fn pixel_to_real(p: u8) -> f64 {
    2.0 * (p as f64 / 255.0) - 1.0
}

/// Inverse of [`pixel_to_real`]; clamps and rounds half away from zero.
pub fn real_to_pixel(v: f64) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((v + 1.0) * 0.5 * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl MaskTensor {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return param(format!(
                "mask data has {} values, expected {height}x{width}",
                data.len()
            ));
        }
        let mask = Self {
            height,
            width,
            data,
        };
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return param("mask values must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Number of pixels with value `>= 0.5`.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn coverage(&self) -> f64 {
        self.area() as f64 / self.data.len() as f64
    }

    pub fn matches(&self, image: &ImageTensor) -> bool {
        self.height == image.height && self.width == image.width
    }
}
