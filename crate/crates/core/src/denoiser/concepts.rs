use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::rng::{gaussian, RngStream};

/// Identifies one conditioning vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ConceptKey {
    /// Class-agnostic embedding used for unconditional prediction.
    Null,
    /// Built-in vocabulary entry the backbone was trained with.
    Vocab(u32),
    /// One learned embedding shared by every image of a class.
    Class(u32),
    /// One learned embedding for a single training image.
    Image { class: u32, index: u32 },
}

impl fmt::Display for ConceptKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConceptKey::Null => write!(f, "null"),
            ConceptKey::Vocab(v) => write!(f, "vocab:{v}"),
            ConceptKey::Class(c) => write!(f, "class:{c}"),
            ConceptKey::Image { class, index } => write!(f, "image:{class}:{index}"),
        }
    }
}

impl FromStr for ConceptKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Param(format!("malformed concept key `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| p.parse::<u32>().map_err(|_| bad());
        match parts.as_slice() {
            ["null"] => Ok(ConceptKey::Null),
            ["vocab", v] => Ok(ConceptKey::Vocab(num(v)?)),
            ["class", c] => Ok(ConceptKey::Class(num(c)?)),
            ["image", c, i] => Ok(ConceptKey::Image {
                class: num(c)?,
                index: num(i)?,
            }),
            _ => Err(bad()),
        }
    }
}

impl From<ConceptKey> for String {
    fn from(k: ConceptKey) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for ConceptKey {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// One embedding per class ("pooled") or one per training image ("specific").
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Pooled,
    Specific,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" | "per-class" => Ok(Granularity::Pooled),
            "specific" | "per-image" => Ok(Granularity::Specific),
            _ => param(format!("unknown granularity `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub vector: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTable {
    pub dim: usize,
    pub granularity: Granularity,
    pub entries: BTreeMap<ConceptKey, ConceptEntry>,
}

impl ConceptTable {
    /// A table holding only a random class-agnostic embedding.
    pub fn new(dim: usize, init: &RngStream) -> Self {
        Self::with_vocab(dim, 0, init)
    }

    /// Null embedding plus `vocab` fixed random vocabulary embeddings.
    pub fn with_vocab(dim: usize, vocab: u32, init: &RngStream) -> Self {
        let mut rng = init.rng();
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| gaussian(rng)).collect() };
        let mut entries = BTreeMap::new();
        entries.insert(
            ConceptKey::Null,
            ConceptEntry {
                vector: draw(&mut rng),
                trainable: false,
            },
        );
        for v in 0..vocab {
            entries.insert(
                ConceptKey::Vocab(v),
                ConceptEntry {
                    vector: draw(&mut rng),
                    trainable: false,
                },
            );
        }
        Self {
            dim,
            granularity: Granularity::Pooled,
            entries,
        }
    }

    pub fn get(&self, key: ConceptKey) -> Result<&[f64]> {
        self.entries
            .get(&key)
            .map(|e| e.vector.as_slice())
            .ok_or_else(|| Error::UnknownConcept(key.to_string()))
    }

    pub fn null(&self) -> &[f64] {
        self.get(ConceptKey::Null).expect("concept table always holds the null embedding")
    }

    pub fn contains(&self, key: ConceptKey) -> bool {
        self.entries.contains_key(&key)
    }

    pub fn insert(&mut self, key: ConceptKey, vector: Vec<f64>, trainable: bool) -> Result<()> {
        if vector.len() != self.dim {
            return param(format!("embedding for {key} has length {}, expected {}", vector.len(), self.dim));
        }
        self.entries.insert(key, ConceptEntry { vector, trainable });
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = ConceptKey> + '_ {
        self.entries.keys().copied()
    }

    /// Key of the learned concept for image `index` of `class` under this table's granularity.
    pub fn concept_for(&self, class: u32, index: u32) -> ConceptKey {
        match self.granularity {
            Granularity::Pooled => ConceptKey::Class(class),
            Granularity::Specific => ConceptKey::Image { class, index },
        }
    }

    /// Classes that have a pooled embedding or at least one image-specific one.
    pub fn learned_classes(&self) -> Vec<u32> {
        let classes: BTreeSet<u32> = self
            .keys()
            .filter_map(|k| match k {
                ConceptKey::Class(c) | ConceptKey::Image { class: c, .. } => Some(c),
                _ => None,
            })
            .collect();
        classes.into_iter().collect()
    }

    pub fn quantize_f32(&mut self) {
        for e in self.entries.values_mut() {
            for v in &mut e.vector {
                *v = *v as f32 as f64;
            }
        }
    }
}
