//! Internal cluster-validity indices (Silhouette, Calinski-Harabasz,
//! Davies-Bouldin), cross-space evaluation of a reduction, equal-weight
//! rank aggregation over a dimension sweep, and an InfoNCE diagnostic.
//!
//! All accumulation is 64-bit. Labels may be any `usize` values; the
//! distinct labels present define the clusters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, ClusteringResult, KMeansParams};
use crate::embedding::Embedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Original,
    #[default]
    Reduced,
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Space::Original),
            "reduced" => Ok(Space::Reduced),
            other => Err(Error::InvalidInput(format!("unknown space `{other}`"))),
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Original => "original",
            Space::Reduced => "reduced",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub dim: usize,
    pub k: usize,
    pub silhouette: f64,
    pub calinski_harabasz: f64,
    pub davies_bouldin: f64,
    pub space: Space,
}

/// Silhouette is O(n^2); above a size threshold it may be estimated on a
/// seeded uniform subsample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SilhouetteMode {
    #[default]
    Exact,
    Sampled { max_points: usize, seed: u64 },
}

impl SilhouetteMode {
    pub const DEFAULT_MAX_POINTS: usize = 5000;

    /// Rows to score, or `None` when every row is used.
    pub fn sample(&self, n: usize) -> Option<Vec<usize>> {
        match *self {
            SilhouetteMode::Sampled { max_points, seed } if n > max_points => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picked = rand::seq::index::sample(&mut rng, n, max_points).into_vec();
                picked.sort_unstable();
                Some(picked)
            }
            _ => None,
        }
    }
}

/// Maps arbitrary labels onto `0..k` in ascending label order.
fn compact_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        ids.entry(l).or_insert(0);
    }
    for (i, v) in ids.values_mut().enumerate() {
        *v = i;
    }
    let k = ids.len();
    (labels.iter().map(|l| ids[l]).collect(), k)
}

fn check_shape(rows: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if rows.nrows() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} rows but {} labels",
            rows.nrows(),
            labels.len()
        )));
    }
    Ok(())
}

pub(crate) fn sq_euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    sq_euclidean(a, b).sqrt()
}

/// Condensed pairwise Euclidean distances (upper triangle, row major).
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(rows: ArrayView2<f64>) -> Self {
        let n = rows.nrows();
        let data = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let rows = &rows;
                (i + 1..n).map(move |j| euclidean(rows.row(i), rows.row(j)))
            })
            .collect();
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        use std::cmp::Ordering;
        let (a, b) = match i.cmp(&j) {
            Ordering::Equal => return 0.0,
            Ordering::Less => (i, j),
            Ordering::Greater => (j, i),
        };
        self.data[a * self.n - a * (a + 1) / 2 + (b - a - 1)]
    }
}

fn silhouette_from_sums(labels: &[usize], sizes: &[usize], sums: &[f64]) -> f64 {
    let k = sizes.len();
    let n = labels.len();
    let total: f64 = (0..n)
        .map(|i| point_silhouette(labels[i], sizes, &sums[i * k..(i + 1) * k]))
        .sum();
    total / n as f64
}

/// `sums[c]` is the total distance from the point to the members of cluster `c`.
fn point_silhouette(own: usize, sizes: &[usize], sums: &[f64]) -> f64 {
    if sizes[own] == 1 {
        return 0.0;
    }
    let a = sums[own] / (sizes[own] - 1) as f64;
    let b = (0..sizes.len())
        .filter(|&c| c != own)
        .map(|c| sums[c] / sizes[c] as f64)
        .fold(f64::INFINITY, f64::min);
    let denom = a.max(b);
    if denom == 0.0 {
        0.0
    } else {
        (b - a) / denom
    }
}

fn cluster_sizes(labels: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (labels, k) = compact_labels(labels);
    if k < 2 {
        return Err(Error::UndefinedMetric(format!("silhouette needs at least 2 clusters, got {k}")));
    }
    let mut sizes = vec![0usize; k];
    for &l in &labels {
        sizes[l] += 1;
    }
    Ok((labels, sizes))
}

/// Mean silhouette coefficient. Points in singleton clusters score 0.
pub fn silhouette(rows: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check_shape(&rows, labels)?;
    let (labels, sizes) = cluster_sizes(labels)?;
    let k = sizes.len();
    let n = rows.nrows();
    let sums: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut sums = vec![0.0f64; k];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] += euclidean(rows.row(i), rows.row(j));
                }
            }
            sums
        })
        .collect();
    Ok(silhouette_from_sums(&labels, &sizes, &sums))
}

/// Silhouette from a condensed distance matrix. One sequential pass over the
/// triangle; callers parallelize across clusterings instead.
pub fn silhouette_precomputed(distances: &DistanceMatrix, labels: &[usize]) -> Result<f64> {
    if distances.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} points but {} labels",
            distances.len(),
            labels.len()
        )));
    }
    let (labels, sizes) = cluster_sizes(labels)?;
    let k = sizes.len();
    let n = labels.len();
    let mut sums = vec![0.0f64; n * k];
    let mut idx = 0;
    for i in 0..n {
        let li = labels[i];
        for j in i + 1..n {
            let d = distances.data[idx];
            idx += 1;
            sums[i * k + labels[j]] += d;
            sums[j * k + li] += d;
        }
    }
    Ok(silhouette_from_sums(&labels, &sizes, &sums))
}

pub fn silhouette_with_mode(rows: ArrayView2<f64>, labels: &[usize], mode: SilhouetteMode) -> Result<f64> {
    check_shape(&rows, labels)?;
    match mode.sample(rows.nrows()) {
        None => silhouette(rows, labels),
        Some(picked) => {
            let sub = rows.select(Axis(0), &picked);
            let sub_labels: Vec<usize> = picked.iter().map(|&i| labels[i]).collect();
            silhouette(sub.view(), &sub_labels)
        }
    }
}

fn cluster_means(rows: &ArrayView2<f64>, labels: &[usize], k: usize) -> (Array2<f64>, Vec<usize>) {
    let mut means = Array2::<f64>::zeros((k, rows.ncols()));
    let mut sizes = vec![0usize; k];
    for (row, &l) in rows.rows().into_iter().zip(labels) {
        let mut m = means.row_mut(l);
        m += &row;
        sizes[l] += 1;
    }
    for (mut m, &s) in means.rows_mut().into_iter().zip(&sizes) {
        m /= s as f64;
    }
    (means, sizes)
}

/// Between/within dispersion ratio scaled by `(n - k) / (k - 1)`.
pub fn calinski_harabasz(rows: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check_shape(&rows, labels)?;
    let n = rows.nrows();
    let (labels, k) = compact_labels(labels);
    if k < 2 || k >= n {
        return Err(Error::UndefinedMetric(format!(
            "Calinski-Harabasz needs 2 <= k <= n-1, got k={k}, n={n}"
        )));
    }
    let overall = rows.mean_axis(Axis(0)).expect("n > k >= 2");
    let (means, sizes) = cluster_means(&rows, &labels, k);
    let between: f64 = means
        .rows()
        .into_iter()
        .zip(&sizes)
        .map(|(m, &s)| s as f64 * sq_euclidean(m, overall.view()))
        .sum();
    let within: f64 = rows
        .rows()
        .into_iter()
        .zip(&labels)
        .map(|(r, &l)| sq_euclidean(r, means.row(l)))
        .sum();
    if within == 0.0 {
        return Err(Error::UndefinedMetric("within-cluster dispersion is zero".into()));
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Mean over clusters of the worst `(S_i + S_j) / M_ij` similarity ratio.
pub fn davies_bouldin(rows: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check_shape(&rows, labels)?;
    let (labels, k) = compact_labels(labels);
    if k < 2 {
        return Err(Error::UndefinedMetric(format!("Davies-Bouldin needs at least 2 clusters, got {k}")));
    }
    let (means, sizes) = cluster_means(&rows, &labels, k);
    let mut scatter = vec![0.0f64; k];
    for (r, &l) in rows.rows().into_iter().zip(&labels) {
        scatter[l] += euclidean(r, means.row(l));
    }
    for (s, &size) in scatter.iter_mut().zip(&sizes) {
        *s /= size as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..k {
            if i == j {
                continue;
            }
            let separation = euclidean(means.row(i), means.row(j));
            if separation == 0.0 {
                return Err(Error::UndefinedMetric(format!("clusters {i} and {j} have coincident centroids")));
            }
            worst = worst.max((scatter[i] + scatter[j]) / separation);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// The three indices computed on one labeled point set.
pub fn score_labels(
    rows: ArrayView2<f64>,
    labels: &[usize],
    mode: SilhouetteMode,
) -> Result<(f64, f64, f64)> {
    Ok((
        silhouette_with_mode(rows, labels, mode)?,
        calinski_harabasz(rows, labels)?,
        davies_bouldin(rows, labels)?,
    ))
}

#[derive(Debug, Clone)]
pub struct ReductionEvaluation {
    pub report: ValidationReport,
    pub clustering: ClusteringResult,
}

/// Clusters the reduced rows, then scores those labels against the original
/// rows. The reduced geometry only enters through the labels.
pub fn evaluate_reduction(
    original: ArrayView2<f64>,
    reduced: ArrayView2<f64>,
    k: usize,
    seed: u64,
    params: &KMeansParams,
    mode: SilhouetteMode,
) -> Result<ReductionEvaluation> {
    if original.nrows() != reduced.nrows() {
        return Err(Error::InvalidInput(format!(
            "original has {} rows, reduced has {}",
            original.nrows(),
            reduced.nrows()
        )));
    }
    let clustering = kmeans(reduced, k, seed, params)?;
    let (silhouette, calinski_harabasz, davies_bouldin) = score_labels(original, &clustering.labels, mode)?;
    Ok(ReductionEvaluation {
        report: ValidationReport {
            dim: reduced.ncols(),
            k,
            silhouette,
            calinski_harabasz,
            davies_bouldin,
            space: Space::Original,
        },
        clustering,
    })
}

/// Competition ranks ("1224"): 1 is best, equal values share the better rank.
fn ranks(values: &[f64], higher_is_better: bool) -> Vec<usize> {
    values
        .iter()
        .map(|&v| {
            1 + values
                .iter()
                .filter(|&&o| if higher_is_better { o > v } else { o < v })
                .count()
        })
        .collect()
}

/// Chooses the dimension with the smallest rank sum across the three indices
/// (Silhouette and C-H higher is better, D-B lower is better). Ties go to the
/// smaller dimension.
pub fn select_dimension(reports: &[ValidationReport]) -> Result<usize> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidInput("no reports to choose from".into()))?;
    let mut dims: Vec<usize> = reports.iter().map(|r| r.dim).collect();
    dims.sort_unstable();
    if dims.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput("duplicate dimensions in sweep".into()));
    }
    if reports.iter().any(|r| r.k != first.k) {
        return Err(Error::InvalidInput("reports were computed with different k".into()));
    }
    if reports
        .iter()
        .any(|r| !(r.silhouette.is_finite() && r.calinski_harabasz.is_finite() && r.davies_bouldin.is_finite()))
    {
        return Err(Error::InvalidInput("non-finite index value".into()));
    }

    let sil = ranks(&reports.iter().map(|r| r.silhouette).collect::<Vec<_>>(), true);
    let ch = ranks(&reports.iter().map(|r| r.calinski_harabasz).collect::<Vec<_>>(), true);
    let db = ranks(&reports.iter().map(|r| r.davies_bouldin).collect::<Vec<_>>(), false);

    let best = (0..reports.len())
        .min_by_key(|&i| (sil[i] + ch[i] + db[i], reports[i].dim))
        .expect("non-empty");
    Ok(reports[best].dim)
}

/// Per-report rank sums in the same order as `reports`; exposed for reports.
pub fn rank_sums(reports: &[ValidationReport]) -> Vec<usize> {
    let sil = ranks(&reports.iter().map(|r| r.silhouette).collect::<Vec<_>>(), true);
    let ch = ranks(&reports.iter().map(|r| r.calinski_harabasz).collect::<Vec<_>>(), true);
    let db = ranks(&reports.iter().map(|r| r.davies_bouldin).collect::<Vec<_>>(), false);
    (0..reports.len()).map(|i| sil[i] + ch[i] + db[i]).collect()
}

fn unit_f64(e: &Embedding) -> Result<Vec<f64>> {
    let norm = e.norm();
    if norm == 0.0 {
        return Err(Error::DegenerateVector(format!("zero vector from `{}`", e.source_id())));
    }
    Ok(e.vector().iter().map(|&v| f64::from(v) / norm).collect())
}

/// Mean InfoNCE loss over index-paired `(query, key)` embeddings. Every key is
/// a negative for every non-matching query. Inputs are L2-normalized first.
pub fn info_nce(queries: &[Embedding], keys: &[Embedding], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature}")));
    }
    if queries.is_empty() || queries.len() != keys.len() {
        return Err(Error::InvalidInput(format!(
            "need equal, non-zero numbers of queries and keys, got {} and {}",
            queries.len(),
            keys.len()
        )));
    }
    let q: Vec<Vec<f64>> = queries.iter().map(unit_f64).collect::<Result<_>>()?;
    let k: Vec<Vec<f64>> = keys.iter().map(unit_f64).collect::<Result<_>>()?;
    let dim = q[0].len();
    if q.iter().chain(k.iter()).any(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: q.iter().chain(k.iter()).map(Vec::len).find(|&l| l != dim).unwrap_or(dim),
        });
    }

    let mut total = 0.0;
    for (i, qi) in q.iter().enumerate() {
        let logits: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / temperature)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    Ok(total / q.len() as f64)
}
