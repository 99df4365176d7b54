//! Embedding and listing types, plus the fusion arithmetic that turns one
//! listing (a text embedding and `n` image embeddings) into a single joint
//! vector:
//!
//! ```text
//! fused = 0.5 * (mean(images) + text)
//! ```
//!
//! Fused vectors are not re-normalized unless [`FusionConfig::renormalize`]
//! is set. Images are weighted equally, and the text branch and the image
//! branch are weighted equally.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default embedding width, matching the common pretrained joint encoder.
pub const DEFAULT_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Audio,
    Fused,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Audio => "audio",
            Modality::Fused => "fused",
        })
    }
}

/// A fixed-width vector tagged with its modality and owner.
///
/// Components are stored at 32-bit precision (the store's precision); every
/// arithmetic operation on them accumulates in 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    vector: Box<[f32]>,
    modality: Modality,
    source_id: String,
}

impl Embedding {
    /// Builds an embedding, rejecting empty or non-finite vectors.
    pub fn new(vector: Vec<f32>, modality: Modality, source_id: impl Into<String>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::DegenerateVector("embedding has zero components".into()));
        }
        if let Some(index) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            vector: vector.into_boxed_slice(),
            modality,
            source_id: source_id.into(),
        })
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn into_vector(self) -> Vec<f32> {
        self.vector.into_vec()
    }

    pub fn norm(&self) -> f64 {
        self.vector
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// One marketplace post: a text embedding plus zero or more image embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ListingRecord {
    pub post_id: String,
    pub text: Option<Embedding>,
    pub images: Vec<Embedding>,
    pub metadata: BTreeMap<String, String>,
}

impl ListingRecord {
    pub fn new(post_id: impl Into<String>, text: Option<Embedding>, images: Vec<Embedding>) -> Self {
        Self {
            post_id: post_id.into(),
            text,
            images,
            metadata: BTreeMap::new(),
        }
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    /// The shared dimension of every member embedding.
    pub fn dim(&self) -> Result<usize> {
        let mut members = self.text.iter().chain(self.images.iter());
        let first = members
            .next()
            .ok_or_else(|| Error::MissingModality(format!("listing `{}` has no embeddings", self.post_id)))?;
        let dim = first.dim();
        for e in members {
            if e.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: e.dim(),
                });
            }
        }
        Ok(dim)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Text and at least one image are required.
    #[default]
    Strict,
    /// A listing with a single present modality passes that branch through
    /// unscaled.
    Permissive,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(FusionMode::Strict),
            "permissive" => Ok(FusionMode::Permissive),
            other => Err(Error::InvalidInput(format!("unknown fusion mode `{other}`"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Strict => "strict",
            FusionMode::Permissive => "permissive",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// L2-normalize the fused vector. Off by default.
    pub renormalize: bool,
}

/// Pairwise (cascade) summation. Rounding error grows with `log n` instead of
/// `n`; the order of the input slice fixes the result bit-for-bit.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

fn check_same_dim<'a>(embeddings: impl IntoIterator<Item = &'a Embedding>) -> Result<usize> {
    let mut dim = None;
    for e in embeddings {
        match dim {
            None => dim = Some(e.dim()),
            Some(d) if d != e.dim() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: e.dim(),
                })
            }
            Some(_) => {}
        }
    }
    dim.ok_or_else(|| Error::MissingModality("no embeddings given".into()))
}

/// Component-wise mean of the image embeddings, accumulated in 64-bit with
/// pairwise summation in input order.
fn mean_image_f64(images: &[Embedding]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::MissingModality("no image embeddings".into()));
    }
    if let Some(bad) = images.iter().find(|e| e.modality() != Modality::Image) {
        return Err(Error::InvalidInput(format!(
            "expected image embeddings, found {} from `{}`",
            bad.modality(),
            bad.source_id()
        )));
    }
    let dim = check_same_dim(images)?;
    let n = images.len() as f64;
    let mut column = vec![0.0f64; images.len()];
    let mut mean = Vec::with_capacity(dim);
    for c in 0..dim {
        for (slot, e) in column.iter_mut().zip(images) {
            *slot = f64::from(e.vector()[c]);
        }
        mean.push(pairwise_sum(&column) / n);
    }
    Ok(mean)
}

fn to_f32(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

/// Arithmetic mean of a post's image embeddings.
pub fn mean_image_embedding(images: &[Embedding]) -> Result<Embedding> {
    let mean = mean_image_f64(images)?;
    Embedding::new(to_f32(&mean), Modality::Image, images[0].source_id())
}

/// Fuses a listing into its joint embedding.
pub fn fuse(listing: &ListingRecord, config: &FusionConfig) -> Result<Embedding> {
    listing.dim()?;
    if let Some(text) = &listing.text {
        if text.modality() != Modality::Text {
            return Err(Error::InvalidInput(format!(
                "listing `{}`: text slot holds a {} embedding",
                listing.post_id,
                text.modality()
            )));
        }
    }

    let fused: Vec<f64> = match (&listing.text, listing.images.is_empty()) {
        (Some(text), false) => {
            let mean = mean_image_f64(&listing.images)?;
            mean.iter()
                .zip(text.vector())
                .map(|(&m, &t)| 0.5 * (m + f64::from(t)))
                .collect()
        }
        (None, false) if config.mode == FusionMode::Permissive => mean_image_f64(&listing.images)?,
        (Some(text), true) if config.mode == FusionMode::Permissive => {
            text.vector().iter().map(|&t| f64::from(t)).collect()
        }
        (None, _) => {
            return Err(Error::MissingModality(format!(
                "listing `{}` has no text embedding",
                listing.post_id
            )))
        }
        (Some(_), true) => {
            return Err(Error::MissingModality(format!(
                "listing `{}` has no image embeddings",
                listing.post_id
            )))
        }
    };

    let fused = Embedding::new(to_f32(&fused), Modality::Fused, listing.post_id.clone())?;
    if config.renormalize {
        l2_normalize(&fused)
    } else {
        Ok(fused)
    }
}

/// Scales an embedding to unit Euclidean norm.
pub fn l2_normalize(e: &Embedding) -> Result<Embedding> {
    let norm = e.norm();
    if norm == 0.0 {
        return Err(Error::DegenerateVector(format!(
            "cannot normalize zero vector from `{}`",
            e.source_id()
        )));
    }
    let v = e
        .vector()
        .iter()
        .map(|&x| (f64::from(x) / norm) as f32)
        .collect();
    Embedding::new(v, e.modality(), e.source_id())
}
