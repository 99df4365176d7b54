//! Independent reference computations for the integration and acceptance
//! tests. None of these call into the library's numeric code paths.

#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
}

/// Double-double accumulator (error-free TwoSum), about 106 bits of mantissa.
#[derive(Default, Clone, Copy)]
pub struct DoubleDouble {
    hi: f64,
    lo: f64,
}

impl DoubleDouble {
    pub fn add(&mut self, x: f64) {
        let s = self.hi + x;
        let bp = s - self.hi;
        let err = (self.hi - (s - bp)) + (x - bp);
        let lo = self.lo + err;
        self.hi = s + lo;
        self.lo = lo - (self.hi - s);
    }

    pub fn value(&self) -> f64 {
        self.hi + self.lo
    }
}

/// `0.5 * (mean(images) + text)` summed in double-double precision.
pub fn fuse_oracle(text: &[f32], images: &[Vec<f32>]) -> Vec<f64> {
    (0..text.len())
        .map(|c| {
            let mut acc = DoubleDouble::default();
            for img in images {
                acc.add(f64::from(img[c]));
            }
            0.5 * (acc.value() / images.len() as f64 + f64::from(text[c]))
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

fn rows_of(x: ArrayView2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn clusters(labels: &[usize]) -> Vec<usize> {
    let mut c: Vec<usize> = labels.to_vec();
    c.sort_unstable();
    c.dedup();
    c
}

/// Silhouette by direct per-point evaluation.
pub fn silhouette_oracle(x: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let rows = rows_of(x);
    let ids = clusters(labels);
    let n = rows.len();
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| labels[j] == labels[i] && j != i).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| dist(&rows[i], &rows[j])).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        for &c in &ids {
            if c == labels[i] {
                continue;
            }
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            let m = members.iter().map(|&j| dist(&rows[i], &rows[j])).sum::<f64>() / members.len() as f64;
            b = b.min(m);
        }
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

/// Calinski-Harabasz through pairwise squared distances:
/// `W = sum_c (1 / 2 n_c) sum_{i,j in c} |xi - xj|^2`, `T` likewise over all
/// points, `B = T - W`.
pub fn calinski_harabasz_oracle(x: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let rows = rows_of(x);
    let n = rows.len();
    let ids = clusters(labels);
    let k = ids.len();
    let mut total = 0.0;
    let mut within = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d2 = dist(&rows[i], &rows[j]).powi(2);
            total += d2;
            if labels[i] == labels[j] {
                let size = labels.iter().filter(|&&l| l == labels[i]).count();
                within += d2 / (2.0 * size as f64);
            }
        }
    }
    total /= 2.0 * n as f64;
    let between = total - within;
    (between / (k - 1) as f64) / (within / (n - k) as f64)
}

pub fn davies_bouldin_oracle(x: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let rows = rows_of(x);
    let d = rows[0].len();
    let ids = clusters(labels);
    let mut centroids = Vec::new();
    let mut scatter = Vec::new();
    for &c in &ids {
        let members: Vec<&Vec<f64>> = rows.iter().zip(labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
        let mut centroid = vec![0.0; d];
        for m in &members {
            for t in 0..d {
                centroid[t] += m[t] / members.len() as f64;
            }
        }
        scatter.push(members.iter().map(|m| dist(m, &centroid)).sum::<f64>() / members.len() as f64);
        centroids.push(centroid);
    }
    let k = ids.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in 0..k {
            if i != j {
                worst = worst.max((scatter[i] + scatter[j]) / dist(&centroids[i], &centroids[j]));
            }
        }
        total += worst;
    }
    total / k as f64
}

/// Smallest inertia over every assignment of `points` to `k` labelled groups.
pub fn exhaustive_kmeans_optimum(points: &[f64], k: usize) -> (f64, Vec<usize>) {
    let n = points.len();
    let mut best = (f64::INFINITY, Vec::new());
    let mut labels = vec![0usize; n];
    loop {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l] += p;
            counts[l] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            let inertia: f64 = points
                .iter()
                .zip(&labels)
                .map(|(p, &l)| (p - sums[l] / counts[l] as f64).powi(2))
                .sum();
            if inertia < best.0 {
                best = (inertia, labels.clone());
            }
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order and the matching unit eigenvectors as rows.
pub fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[[b, b]].total_cmp(&m[[a, a]]));
    let values = order.iter().map(|&i| m[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[c, order[r]]]);
    (values, vectors)
}

/// Sample covariance `X_c^T X_c / (n - 1)` with explicit loops.
pub fn covariance(x: ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += x[[i, j]] / n as f64;
        }
    }
    let mut c = Array2::zeros((d, d));
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                c[[a, b]] += (x[[i, a]] - mean[a]) * (x[[i, b]] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    c
}

/// Haar-ish random orthogonal matrix by Gram-Schmidt.
pub fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let mut q = gaussian_matrix(rng, d, d);
    for i in 0..d {
        for j in 0..i {
            let dot: f64 = (0..d).map(|t| q[[i, t]] * q[[j, t]]).sum();
            for t in 0..d {
                q[[i, t]] -= dot * q[[j, t]];
            }
        }
        let norm: f64 = (0..d).map(|t| q[[i, t]] * q[[i, t]]).sum::<f64>().sqrt();
        for t in 0..d {
            q[[i, t]] /= norm;
        }
    }
    q
}

/// Random labels in `0..k` with every label used at least once.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
