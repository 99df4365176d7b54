//! Lloyd's k-means with k-means++ seeding, and silhouette-driven selection of
//! `k` over a fixed number of seeded restarts per candidate.
//!
//! A run is fully determined by `(rows, k, seed, params)`: the RNG is
//! ChaCha8 seeded from the run seed, every reduction runs in row order, and
//! clusters are renumbered by the index of their first member.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::validation::{self, sq_euclidean, DistanceMatrix, SilhouetteMode, Space};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    #[default]
    KMeansPlusPlus,
    Random,
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k-means++" | "kmeans++" => Ok(Init::KMeansPlusPlus),
            "random" => Ok(Init::Random),
            other => Err(Error::InvalidInput(format!("unknown initialization `{other}`"))),
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Init::KMeansPlusPlus => "k-means++",
            Init::Random => "random",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Stop once no centroid moves more than `tol` times the data diameter.
    pub tol: f64,
    pub init: Init,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-4,
            init: Init::KMeansPlusPlus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Re-assignment left every label unchanged.
    LabelsStable,
    /// Centroid displacement fell under the tolerance.
    CentroidShift,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub k: usize,
    pub seed: u64,
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
    /// Inertia after the initial assignment and after every iteration.
    pub inertia_trace: Vec<f64>,
}

impl ClusteringResult {
    pub fn converged(&self) -> bool {
        self.stop_reason != StopReason::MaxIterations
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn check_finite(rows: &ArrayView2<f64>) -> Result<()> {
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("rows contain non-finite values".into()));
    }
    Ok(())
}

fn nearest(row: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.rows().into_iter().enumerate() {
        let d = sq_euclidean(row, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_with_distances(rows: &ArrayView2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    (0..rows.nrows())
        .into_par_iter()
        .map(|i| nearest(rows.row(i), centroids))
        .unzip()
}

/// Nearest centroid for every row; ties go to the lowest cluster id.
pub fn assign(rows: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Result<Vec<usize>> {
    if rows.ncols() != centroids.ncols() {
        return Err(Error::DimensionMismatch {
            expected: centroids.ncols(),
            found: rows.ncols(),
        });
    }
    if centroids.nrows() == 0 {
        return Err(Error::InvalidInput("no centroids".into()));
    }
    Ok(assign_with_distances(&rows, &centroids.to_owned()).0)
}

/// Twice the largest distance from the mean: within a factor of two of the
/// true diameter, and O(n) to compute.
fn diameter_estimate(rows: &ArrayView2<f64>) -> f64 {
    let mean = rows.mean_axis(Axis(0)).expect("non-empty rows");
    let max_sq = rows
        .rows()
        .into_iter()
        .map(|r| sq_euclidean(r, mean.view()))
        .fold(0.0, f64::max);
    2.0 * max_sq.sqrt()
}

fn init_random(rows: &ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let picked = rand::seq::index::sample(rng, rows.nrows(), k).into_vec();
    rows.select(Axis(0), &picked)
}

/// Greedy k-means++: each new center is the best of `2 + ln k` candidates
/// drawn proportionally to squared distance from the chosen centers.
fn init_plus_plus(rows: &ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = rows.nrows();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut chosen = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    chosen.push(first);
    let mut closest: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_euclidean(rows.row(i), rows.row(first)))
        .collect();

    while chosen.len() < k {
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for &d in &closest {
            acc += d;
            cumulative.push(acc);
        }
        let total = acc;

        if total <= 0.0 {
            // every point coincides with a center; fall back to unused indices
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            chosen.push(unused[rng.random_range(0..unused.len())]);
            continue;
        }

        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for _ in 0..trials {
            let target = rng.random::<f64>() * total;
            let candidate = cumulative.partition_point(|&c| c <= target).min(n - 1);
            let updated: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| closest[i].min(sq_euclidean(rows.row(i), rows.row(candidate))))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|(_, p, _)| potential < *p) {
                best = Some((candidate, potential, updated));
            }
        }
        let (candidate, _, updated) = best.expect("at least two trials");
        chosen.push(candidate);
        closest = updated;
    }
    rows.select(Axis(0), &chosen)
}

/// Gives every empty cluster the point farthest from its own centroid, taken
/// from a cluster that keeps at least one member.
fn repair_empty(
    rows: &ArrayView2<f64>,
    labels: &mut [usize],
    distances: &mut [f64],
    centroids: &mut Array2<f64>,
) {
    let k = centroids.nrows();
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut donor: Option<usize> = None;
        for i in 0..labels.len() {
            if sizes[labels[i]] > 1 && donor.is_none_or(|d| distances[i] > distances[d]) {
                donor = Some(i);
            }
        }
        let i = donor.expect("n >= k leaves a cluster with two members");
        sizes[labels[i]] -= 1;
        sizes[empty] = 1;
        labels[i] = empty;
        distances[i] = 0.0;
        centroids.row_mut(empty).assign(&rows.row(i));
    }
}

fn means(rows: &ArrayView2<f64>, labels: &[usize], k: usize) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((k, rows.ncols()));
    let mut sizes = vec![0usize; k];
    for (row, &l) in rows.rows().into_iter().zip(labels) {
        let mut s = sums.row_mut(l);
        s += &row;
        sizes[l] += 1;
    }
    for (mut s, &size) in sums.rows_mut().into_iter().zip(&sizes) {
        s /= size as f64;
    }
    sums
}

fn inertia(rows: &ArrayView2<f64>, labels: &[usize], centroids: &Array2<f64>) -> f64 {
    rows.rows()
        .into_iter()
        .zip(labels)
        .map(|(r, &l)| sq_euclidean(r, centroids.row(l)))
        .sum()
}

/// Renumbers clusters by ascending index of their first member.
fn canonicalize(labels: &mut [usize], centroids: &Array2<f64>) -> Array2<f64> {
    let k = centroids.nrows();
    let mut mapping = vec![usize::MAX; k];
    let mut next = 0;
    for l in labels.iter() {
        if mapping[*l] == usize::MAX {
            mapping[*l] = next;
            next += 1;
        }
    }
    for m in mapping.iter_mut().filter(|m| **m == usize::MAX) {
        *m = next;
        next += 1;
    }
    for l in labels.iter_mut() {
        *l = mapping[*l];
    }
    let mut out = Array2::zeros(centroids.raw_dim());
    for (old, &new) in mapping.iter().enumerate() {
        out.row_mut(new).assign(&centroids.row(old));
    }
    out
}

/// One seeded k-means run.
pub fn kmeans(rows: ArrayView2<f64>, k: usize, seed: u64, params: &KMeansParams) -> Result<ClusteringResult> {
    let n = rows.nrows();
    if k == 0 || k > n {
        return Err(Error::Cardinality { k, n });
    }
    check_finite(&rows)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = match params.init {
        Init::KMeansPlusPlus => init_plus_plus(&rows, k, &mut rng),
        Init::Random => init_random(&rows, k, &mut rng),
    };
    let threshold = params.tol * diameter_estimate(&rows);

    let (mut labels, mut distances) = assign_with_distances(&rows, &centroids);
    repair_empty(&rows, &mut labels, &mut distances, &mut centroids);
    let mut trace = vec![inertia(&rows, &labels, &centroids)];
    let mut stop_reason = StopReason::MaxIterations;
    let mut iterations = 0;

    while iterations < params.max_iter {
        iterations += 1;
        let updated = means(&rows, &labels, k);
        let shift = updated
            .rows()
            .into_iter()
            .zip(centroids.rows())
            .map(|(a, b)| sq_euclidean(a, b))
            .fold(0.0, f64::max)
            .sqrt();
        centroids = updated;

        let (mut new_labels, mut new_distances) = assign_with_distances(&rows, &centroids);
        repair_empty(&rows, &mut new_labels, &mut new_distances, &mut centroids);
        trace.push(inertia(&rows, &new_labels, &centroids));

        if new_labels == labels {
            stop_reason = StopReason::LabelsStable;
            break;
        }
        labels = new_labels;
        if shift <= threshold {
            // finish on an update step so centroids are the means of their members
            centroids = means(&rows, &labels, k);
            trace.push(inertia(&rows, &labels, &centroids));
            stop_reason = StopReason::CentroidShift;
            break;
        }
    }

    let centroids = canonicalize(&mut labels, &centroids);
    let final_inertia = inertia(&rows, &labels, &centroids);
    Ok(ClusteringResult {
        k,
        seed,
        labels,
        centroids,
        inertia: final_inertia,
        iterations,
        stop_reason,
        inertia_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    pub seeds: Vec<u64>,
    /// Mean silhouette of each run, aligned with `seeds`.
    pub silhouettes: Vec<f64>,
    pub mean_silhouette: f64,
    pub best_seed: u64,
    pub best_silhouette: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelectionReport {
    pub candidate_ks: Vec<usize>,
    pub runs_per_k: usize,
    pub base_seed: u64,
    pub silhouette_space: Space,
    /// Number of points silhouette was computed on, when subsampled.
    pub silhouette_sample: Option<usize>,
    pub per_k: Vec<KScore>,
    pub chosen_k: usize,
}

impl KSelectionReport {
    pub fn score(&self, k: usize) -> Option<&KScore> {
        self.per_k.iter().find(|s| s.k == k)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelectKOptions<'a> {
    pub runs_per_k: usize,
    pub params: KMeansParams,
    /// Rows silhouette is computed on; `None` uses the clustered rows.
    pub scoring_rows: Option<ArrayView2<'a, f64>>,
    pub silhouette: SilhouetteMode,
}

impl Default for SelectKOptions<'_> {
    fn default() -> Self {
        Self {
            runs_per_k: 10,
            params: KMeansParams::default(),
            scoring_rows: None,
            silhouette: SilhouetteMode::Exact,
        }
    }
}

/// Runs `runs_per_k` k-means restarts (seeds `base_seed`, `base_seed + 1`, ...)
/// for every `k` in `k_min..=k_max` and picks the `k` with the highest average
/// silhouette. Ties go to the smaller `k`.
pub fn select_k(
    rows: ArrayView2<f64>,
    k_min: usize,
    k_max: usize,
    base_seed: u64,
    options: &SelectKOptions<'_>,
) -> Result<KSelectionReport> {
    let n = rows.nrows();
    if k_min < 2 || k_min > k_max || k_max + 1 > n {
        return Err(Error::InvalidInput(format!(
            "k range {k_min}..={k_max} must satisfy 2 <= k_min <= k_max <= n-1 (n = {n})"
        )));
    }
    if options.runs_per_k == 0 {
        return Err(Error::InvalidInput("runs_per_k must be at least 1".into()));
    }
    let scoring = options.scoring_rows.unwrap_or(rows);
    if scoring.nrows() != n {
        return Err(Error::InvalidInput(format!(
            "scoring rows have {} rows, clustered rows have {n}",
            scoring.nrows()
        )));
    }
    check_finite(&rows)?;

    let sample = options.silhouette.sample(n);
    let distances = match &sample {
        Some(picked) => DistanceMatrix::new(scoring.select(Axis(0), picked).view()),
        None => DistanceMatrix::new(scoring),
    };

    let seeds: Vec<u64> = (0..options.runs_per_k as u64)
        .map(|i| base_seed.wrapping_add(i))
        .collect();
    let jobs: Vec<(usize, u64)> = (k_min..=k_max)
        .flat_map(|k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(k, seed)| {
            let run = kmeans(rows, k, seed, &options.params)?;
            match &sample {
                Some(picked) => {
                    let labels: Vec<usize> = picked.iter().map(|&i| run.labels[i]).collect();
                    validation::silhouette_precomputed(&distances, &labels)
                }
                None => validation::silhouette_precomputed(&distances, &run.labels),
            }
        })
        .collect::<Result<_>>()?;

    let per_k: Vec<KScore> = (k_min..=k_max)
        .zip(scores.chunks(options.runs_per_k))
        .map(|(k, runs)| {
            let mut best = 0;
            for (i, &s) in runs.iter().enumerate() {
                if s > runs[best] {
                    best = i;
                }
            }
            KScore {
                k,
                seeds: seeds.clone(),
                silhouettes: runs.to_vec(),
                mean_silhouette: runs.iter().sum::<f64>() / runs.len() as f64,
                best_seed: seeds[best],
                best_silhouette: runs[best],
            }
        })
        .collect();

    let mut chosen = &per_k[0];
    for score in &per_k[1..] {
        if score.mean_silhouette > chosen.mean_silhouette {
            chosen = score;
        }
    }

    Ok(KSelectionReport {
        candidate_ks: (k_min..=k_max).collect(),
        runs_per_k: options.runs_per_k,
        base_seed,
        silhouette_space: if options.scoring_rows.is_some() {
            Space::Original
        } else {
            Space::Reduced
        },
        silhouette_sample: sample.as_ref().map(Vec::len),
        chosen_k: chosen.k,
        per_k,
    })
}
