//! Deterministic, value-addressed random streams.
//!
//! A stream is identified by a master seed and a `(purpose, image, augmentation,
//! timestep)` tuple. The pair is hashed into a ChaCha seed, so the same pair always
//! yields the same sequence and unrelated tuples yield independent sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub purpose: &'static str,
    pub image: u64,
    pub aug: u64,
    pub step: u64,
}

impl StreamId {
    pub const fn new(purpose: &'static str) -> Self {
        Self {
            purpose,
            image: 0,
            aug: 0,
            step: 0,
        }
    }

    pub const fn at(purpose: &'static str, image: u64, aug: u64, step: u64) -> Self {
        Self {
            purpose,
            image,
            aug,
            step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub id: StreamId,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        Self { seed, id }
    }

    /// Root stream for a master seed.
    pub fn root(seed: u64) -> Self {
        Self::new(seed, StreamId::new("root"))
    }

    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"dafkit-stream-v1");
        h.update(self.seed.to_le_bytes());
        h.update((self.id.purpose.len() as u64).to_le_bytes());
        h.update(self.id.purpose.as_bytes());
        h.update(self.id.image.to_le_bytes());
        h.update(self.id.aug.to_le_bytes());
        h.update(self.id.step.to_le_bytes());
        let out = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&out);
        seed
    }

    /// A 64-bit seed for APIs that take a plain integer.
    pub fn derived_seed(&self) -> u64 {
        let d = self.digest();
        u64::from_le_bytes([d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7]])
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.digest())
    }

    /// A stream nested under this one; the parent's identity becomes the child's seed.
    pub fn derive(&self, id: StreamId) -> RngStream {
        let d = self.digest();
        let mut s = [0u8; 8];
        s.copy_from_slice(&d[..8]);
        RngStream::new(u64::from_le_bytes(s), id)
    }

    pub fn child(&self, purpose: &'static str, image: u64, aug: u64, step: u64) -> RngStream {
        self.derive(StreamId::at(purpose, image, aug, step))
    }
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Unit-Gaussian image with the given shape.
pub fn gaussian_image<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, channels: usize) -> ImageTensor {
    let mut img = ImageTensor::zeros(height, width, channels);
    for v in &mut img.data {
        *v = gaussian(rng);
    }
    img
}

pub fn gaussian_like<R: Rng + ?Sized>(rng: &mut R, like: &ImageTensor) -> ImageTensor {
    gaussian_image(rng, like.height, like.width, like.channels)
}
