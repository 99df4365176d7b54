//! PCA by singular value decomposition of the mean-centered data.
//!
//! Component rows are sign-normalized so that each row's largest-magnitude
//! entry is positive, which makes fits reproducible across runs and
//! platforms. The 2D projection is the first two principal coordinates.

use nalgebra::{DMatrix, SVD};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// `r x d`, one principal axis per row, by descending explained variance.
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
    /// Sum of per-feature variances of the fit data.
    pub total_variance: f64,
    pub fitted_on: usize,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }

    /// Maps reduced coordinates back into the input space.
    pub fn inverse_transform(&self, reduced: ArrayView2<f64>) -> Result<Array2<f64>> {
        if reduced.ncols() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                found: reduced.ncols(),
            });
        }
        Ok(reduced.dot(&self.components) + &self.mean)
    }
}

/// Fits a rank-`r` PCA on every row of `rows` (`n x d`).
pub fn pca_fit(rows: ArrayView2<f64>, r: usize) -> Result<PcaModel> {
    let (n, d) = rows.dim();
    if n < 2 {
        return Err(Error::DegenerateData(format!("PCA needs at least 2 rows, got {n}")));
    }
    let max = n.min(d);
    if r == 0 || r > max {
        return Err(Error::Rank { requested: r, max });
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("PCA input has non-finite values".into()));
    }

    let mean = rows.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &rows - &mean;
    let denom = (n - 1) as f64;
    let total_variance = centered.iter().map(|v| v * v).sum::<f64>() / denom;
    if total_variance == 0.0 {
        return Err(Error::DegenerateData("all rows are identical".into()));
    }

    let m = DMatrix::from_fn(n, d, |i, j| centered[[i, j]]);
    let svd = SVD::new(m, false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateData("SVD did not produce right singular vectors".into()))?;

    let mut components = Array2::from_shape_fn((r, d), |(i, j)| v_t[(i, j)]);
    for mut row in components.rows_mut() {
        let mut pivot = 0.0f64;
        for &v in row.iter() {
            if v.abs() > pivot.abs() {
                pivot = v;
            }
        }
        if pivot < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
    let explained_variance = svd.singular_values.iter().take(r).map(|s| s * s / denom).collect();

    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        total_variance,
        fitted_on: n,
    })
}

/// Like [`pca_fit`], but fits on a seeded uniform sample of `sample` rows when
/// the input is larger than that.
pub fn pca_fit_sampled(rows: ArrayView2<f64>, r: usize, sample: Option<usize>, seed: u64) -> Result<PcaModel> {
    match sample {
        Some(size) if size < rows.nrows() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, rows.nrows(), size).into_vec();
            picked.sort_unstable();
            pca_fit(rows.select(Axis(0), &picked).view(), r)
        }
        _ => pca_fit(rows, r),
    }
}

/// Projects `rows` (`m x d`) onto the model's components, giving `m x r`.
pub fn pca_transform(model: &PcaModel, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
    if rows.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            found: rows.ncols(),
        });
    }
    let centered = &rows - &model.mean;
    Ok(centered.dot(&model.components.t()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projected {
    pub post_id: String,
    pub x: f64,
    pub y: f64,
}

/// First two principal coordinates of every row, for external plotting.
pub fn project_2d<S: AsRef<str>>(rows: ArrayView2<f64>, ids: &[S]) -> Result<Vec<Projected>> {
    if rows.nrows() != ids.len() {
        return Err(Error::InvalidInput(format!(
            "{} rows but {} ids",
            rows.nrows(),
            ids.len()
        )));
    }
    if rows.nrows() < 3 {
        return Err(Error::DegenerateData(format!(
            "2D projection needs at least 3 rows, got {}",
            rows.nrows()
        )));
    }
    let model = pca_fit(rows, 2)?;
    let coords = pca_transform(&model, rows)?;
    Ok(ids
        .iter()
        .zip(coords.rows())
        .map(|(id, c)| Projected {
            post_id: id.as_ref().to_string(),
            x: c[0],
            y: c[1],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn collinear_points() {
        let data = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let model = pca_fit(data.view(), 2).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((model.components[[0, 0]] - h).abs() < 1e-12);
        assert!((model.components[[0, 1]] - h).abs() < 1e-12);
        assert!((model.explained_variance[0] - 2.0).abs() < 1e-12);
        assert!(model.explained_variance[1].abs() < 1e-12);
    }

    #[test]
    fn mean_maps_to_origin() {
        let data = array![[1.0, 0.0, 2.0], [0.0, 3.0, 1.0], [4.0, 1.0, 0.0], [2.0, 2.0, 2.0]];
        let model = pca_fit(data.view(), 2).unwrap();
        let mean = model.mean.clone().insert_axis(Axis(0));
        let z = pca_transform(&model, mean.view()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_and_degenerate_errors() {
        let data = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        assert!(matches!(pca_fit(data.view(), 3), Err(Error::Rank { requested: 3, max: 2 })));
        assert!(matches!(pca_fit(data.view(), 0), Err(Error::Rank { .. })));
        let constant = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        assert!(matches!(pca_fit(constant.view(), 1), Err(Error::DegenerateData(_))));
        let one = array![[1.0, 2.0]];
        assert!(matches!(pca_fit(one.view(), 1), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn transform_checks_width() {
        let data = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let model = pca_fit(data.view(), 1).unwrap();
        assert!(matches!(
            pca_transform(&model, array![[1.0, 2.0, 3.0]].view()),
            Err(Error::DimensionMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn sign_convention_makes_largest_entry_positive() {
        let data = array![[0.0, 0.0], [-1.0, -5.0], [1.0, 5.2], [0.3, 1.0], [2.0, -0.5]];
        let model = pca_fit(data.view(), 2).unwrap();
        for row in model.components.rows() {
            let max = row.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(max > 0.0);
        }
    }

    #[test]
    fn project_2d_collinear_has_zero_y() {
        let data = array![[0.0, 1.0], [1.0, 3.0], [2.0, 5.0], [-1.0, -1.0]];
        let ids = ["a", "b", "c", "d"];
        let out = project_2d(data.view(), &ids).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|p| p.y.abs() < 1e-6));
        assert!(matches!(project_2d(data.slice(ndarray::s![..2, ..]), &ids[..2]), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn sampled_fit_uses_requested_rows() {
        let data = Array2::from_shape_fn((40, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let model = pca_fit_sampled(data.view(), 2, Some(10), 5).unwrap();
        assert_eq!(model.fitted_on, 10);
        let again = pca_fit_sampled(data.view(), 2, Some(10), 5).unwrap();
        assert_eq!(model, again);
        assert_eq!(pca_fit_sampled(data.view(), 2, Some(100), 5).unwrap().fitted_on, 40);
    }
}
