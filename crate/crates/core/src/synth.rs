//! Seeded synthetic listings arranged in well-separated spherical blobs.
//!
//! Every listing in blob `g` has its text vector exactly at the blob center
//! and `1..=max_images` image vectors drawn uniformly from the ball of
//! `radius` around it, so its fused vector lies within `radius` of the
//! center. Centers are pairwise at least `separation` apart.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::Modality;
use crate::error::{Error, Result};
use crate::interchange::Record;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub blobs: usize,
    pub points_per_blob: usize,
    pub dim: usize,
    pub radius: f64,
    pub separation: f64,
    pub seed: u64,
    pub max_images: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("invalid synth spec: {m}")));
        if self.blobs == 0 {
            return bad("blob count must be positive");
        }
        if self.points_per_blob == 0 {
            return bad("points per blob must be positive");
        }
        if self.dim == 0 {
            return bad("dimension must be positive");
        }
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return bad("radius must be a non-negative number");
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad("separation must be positive");
        }
        if self.max_images == 0 {
            return bad("max_images must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthListings {
    pub records: Vec<Record>,
    /// `(post_id, blob)` for every listing, in file order.
    pub truth: Vec<(String, usize)>,
    pub centers: Array2<f64>,
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Uniform sample from the ball of `radius` around the origin.
fn ball_offset(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v = gaussian_vector(rng, dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
            return v.into_iter().map(|x| x * r / norm).collect();
        }
    }
}

/// Blob centers drawn from a Gaussian whose scale grows until every pair is
/// at least `separation` apart.
fn blob_centers(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Array2<f64> {
    let mut scale = spec.separation * (spec.blobs as f64).powf(1.0 / spec.dim as f64);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.blobs);
    let mut failures = 0;
    while centers.len() < spec.blobs {
        let c: Vec<f64> = gaussian_vector(rng, spec.dim).into_iter().map(|x| x * scale).collect();
        let clear = centers.iter().all(|o| {
            o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= spec.separation
        });
        if clear {
            centers.push(c);
        } else {
            failures += 1;
            if failures % 64 == 0 {
                scale *= 1.25;
            }
        }
    }
    Array2::from_shape_fn((spec.blobs, spec.dim), |(g, j)| centers[g][j])
}

/// Points scattered uniformly in balls around separated centers, with their
/// blob labels. Used for clustering checks that need no fusion step.
pub fn blob_points(spec: &SynthSpec) -> Result<(Array2<f64>, Vec<usize>, Array2<f64>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = blob_centers(&mut rng, spec);
    let n = spec.blobs * spec.points_per_blob;
    let mut points = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    for g in 0..spec.blobs {
        for p in 0..spec.points_per_blob {
            let offset = ball_offset(&mut rng, spec.dim, spec.radius);
            let i = g * spec.points_per_blob + p;
            for j in 0..spec.dim {
                points[[i, j]] = centers[[g, j]] + offset[j];
            }
            labels.push(g);
        }
    }
    Ok((points, labels, centers))
}

pub fn post_id(blob: usize, point: usize) -> String {
    format!("b{blob:03}-p{point:05}")
}

/// Synthetic listings in interchange form.
pub fn generate_listings(spec: &SynthSpec) -> Result<SynthListings> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = blob_centers(&mut rng, spec);
    let mut records = Vec::new();
    let mut truth = Vec::with_capacity(spec.blobs * spec.points_per_blob);

    for g in 0..spec.blobs {
        let center = centers.row(g);
        for p in 0..spec.points_per_blob {
            let id = post_id(g, p);
            let mut meta = BTreeMap::new();
            meta.insert("blob".to_string(), serde_json::Value::String(g.to_string()));
            meta.insert(
                "caption".to_string(),
                serde_json::Value::String(format!("synthetic listing {p} of blob {g}")),
            );
            records.push(Record {
                post_id: id.clone(),
                modality: Modality::Text,
                index: 0,
                vector: center.iter().map(|&v| v as f32).collect(),
                meta,
            });
            let images = rng.random_range(1..=spec.max_images);
            for i in 0..images {
                let offset = ball_offset(&mut rng, spec.dim, spec.radius);
                records.push(Record {
                    post_id: id.clone(),
                    modality: Modality::Image,
                    index: (i + 1) as u32,
                    vector: center.iter().zip(&offset).map(|(c, o)| (c + o) as f32).collect(),
                    meta: BTreeMap::new(),
                });
            }
            truth.push((id, g));
        }
    }
    Ok(SynthListings {
        records,
        truth,
        centers,
    })
}
