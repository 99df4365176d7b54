mod common;

use std::collections::BTreeMap;
use std::io::Cursor;

use common::*;
use embedfuse::clustering::{select_k, SelectKOptions};
use embedfuse::embedding::{fuse, Embedding, FusionConfig, FusionMode, ListingRecord, Modality};
use embedfuse::interchange::{write_record, Record};
use embedfuse::store::VectorStore;
use embedfuse::validation::{
    calinski_harabasz, davies_bouldin, silhouette, silhouette_precomputed, silhouette_with_mode, DistanceMatrix,
    SilhouetteMode,
};
use embedfuse::{kmeans, pca_fit, pca_transform, Error, KMeansParams};
use ndarray::{array, Array2, Axis};
use proptest::prelude::*;

fn listing(text: Vec<f32>, images: Vec<Vec<f32>>) -> ListingRecord {
    ListingRecord::new(
        "p",
        Some(Embedding::new(text, Modality::Text, "p").unwrap()),
        images
            .into_iter()
            .map(|v| Embedding::new(v, Modality::Image, "p").unwrap())
            .collect(),
    )
}

fn finite_vec(d: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-100.0f32..100.0, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fusion_matches_oracle_and_ignores_image_order(
        d in 1usize..40,
        n in 1usize..8,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let text: Vec<f32> = gaussian_matrix(&mut r, 1, d).iter().map(|&v| v as f32).collect();
        let images: Vec<Vec<f32>> = (0..n)
            .map(|_| gaussian_matrix(&mut r, 1, d).iter().map(|&v| v as f32).collect())
            .collect();
        let fused = fuse(&listing(text.clone(), images.clone()), &FusionConfig::default()).unwrap();
        prop_assert_eq!(fused.modality(), Modality::Fused);
        for (a, b) in fused.vector().iter().zip(fuse_oracle(&text, &images)) {
            prop_assert!((f64::from(*a) - b).abs() <= 1e-6);
        }
        let mut reversed = images.clone();
        reversed.reverse();
        let again = fuse(&listing(text, reversed), &FusionConfig::default()).unwrap();
        for (a, b) in fused.vector().iter().zip(again.vector()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn fusion_is_homogeneous(text in finite_vec(8), img in finite_vec(8), scale in -4.0f32..4.0) {
        let base = fuse(&listing(text.clone(), vec![img.clone()]), &FusionConfig::default()).unwrap();
        let scaled = fuse(
            &listing(text.iter().map(|v| v * scale).collect(), vec![img.iter().map(|v| v * scale).collect()]),
            &FusionConfig::default(),
        ).unwrap();
        for (a, b) in base.vector().iter().zip(scaled.vector()) {
            prop_assert!((f64::from(*a) * f64::from(scale) - f64::from(*b)).abs() <= 1e-3);
        }
    }

    #[test]
    fn store_file_round_trip_is_bit_exact(
        rows in prop::collection::vec(prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 5), 1..20)
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.embd");
        let mut store = VectorStore::new(5).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let mut meta = BTreeMap::new();
            meta.insert("i".to_string(), i.to_string());
            store.insert(&format!("id{i}"), r, meta).unwrap();
        }
        store.save(&path).unwrap();
        let back = VectorStore::open(&path).unwrap();
        prop_assert_eq!(back.ids(), store.ids());
        for (i, row) in rows.iter().enumerate() {
            let a: Vec<u32> = back.row(i).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = row.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.meta(i), store.meta(i));
        }
    }

    #[test]
    fn dump_then_ingest_is_bit_exact(
        rows in prop::collection::vec(prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 3), 1..20)
    ) {
        let mut store = VectorStore::new(3).unwrap();
        for (i, r) in rows.iter().enumerate() {
            store.insert(&format!("id{i}"), r, BTreeMap::new()).unwrap();
        }
        let mut text = Vec::new();
        store.dump(None, &mut text).unwrap();
        let mut copy = VectorStore::new(3).unwrap();
        prop_assert_eq!(copy.ingest(Cursor::new(text)).unwrap(), rows.len());
        for (i, row) in rows.iter().enumerate() {
            let a: Vec<u32> = copy.row(i).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = row.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn metrics_invariant_under_rigid_motion_and_scale(seed in any::<u64>(), k in 2usize..5) {
        let mut r = rng(seed);
        let (n, d) = (40, 4);
        let x = gaussian_matrix(&mut r, n, d);
        let labels = random_labels(&mut r, n, k);
        let q = random_rotation(&mut r, d);
        let shift = gaussian_matrix(&mut r, 1, d).row(0).to_owned() * 50.0;
        let moved = x.dot(&q) * 3.5 + &shift;
        let pairs = [
            (silhouette(x.view(), &labels).unwrap(), silhouette(moved.view(), &labels).unwrap()),
            (calinski_harabasz(x.view(), &labels).unwrap(), calinski_harabasz(moved.view(), &labels).unwrap()),
            (davies_bouldin(x.view(), &labels).unwrap(), davies_bouldin(moved.view(), &labels).unwrap()),
        ];
        for (a, b) in pairs {
            prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn precomputed_silhouette_matches_direct(seed in any::<u64>(), k in 2usize..6) {
        let mut r = rng(seed);
        let x = gaussian_matrix(&mut r, 60, 3);
        let labels = random_labels(&mut r, 60, k);
        let direct = silhouette(x.view(), &labels).unwrap();
        let pre = silhouette_precomputed(&DistanceMatrix::new(x.view()), &labels).unwrap();
        prop_assert!((direct - pre).abs() <= 1e-12);
        prop_assert!((direct - silhouette_oracle(x.view(), &labels)).abs() <= 1e-12);
    }

    #[test]
    fn kmeans_invariants(seed in any::<u64>(), n in 5usize..80, k in 1usize..6) {
        prop_assume!(k <= n);
        let mut r = rng(seed);
        let x = gaussian_matrix(&mut r, n, 3);
        let res = kmeans(x.view(), k, seed, &KMeansParams::default()).unwrap();
        prop_assert_eq!(res.labels.len(), n);
        prop_assert!(res.cluster_sizes().iter().all(|&s| s > 0));
        // canonical numbering: first occurrences appear in order 0, 1, 2, ...
        let mut next = 0;
        for &l in &res.labels {
            prop_assert!(l <= next);
            if l == next {
                next += 1;
            }
        }
        let recomputed: f64 = x
            .rows()
            .into_iter()
            .zip(&res.labels)
            .map(|(row, &l)| (&row - &res.centroids.row(l)).mapv(|v| v * v).sum())
            .sum();
        prop_assert!((recomputed - res.inertia).abs() <= 1e-9 * recomputed.max(1.0));
        for w in res.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn pca_components_orthonormal_and_scores_centered(seed in any::<u64>(), n in 3usize..40, d in 1usize..10) {
        let mut r = rng(seed);
        let x = gaussian_matrix(&mut r, n, d);
        let rank = n.min(d);
        let m = pca_fit(x.view(), rank).unwrap();
        let gram = m.components.dot(&m.components.t());
        for i in 0..rank {
            for j in 0..rank {
                let expected = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram[[i, j]] - expected).abs() <= 1e-9);
            }
        }
        let z = pca_transform(&m, x.view()).unwrap();
        for mean in z.mean_axis(Axis(0)).unwrap() {
            prop_assert!(mean.abs() <= 1e-9);
        }
        for w in m.explained_variance.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }
}

#[test]
fn pca_matches_covariance_eigendecomposition() {
    let mut r = rng(9);
    let mut x = gaussian_matrix(&mut r, 120, 6);
    for (j, mut col) in x.columns_mut().into_iter().enumerate() {
        col *= (j + 1) as f64;
    }
    let m = pca_fit(x.view(), 6).unwrap();
    let (values, vectors) = jacobi_eigen(&covariance(x.view()));
    for c in 0..6 {
        assert!(rel_err(m.explained_variance[c], values[c]) < 1e-10);
        let sign = m.components.row(c).dot(&vectors.row(c)).signum();
        for t in 0..6 {
            assert!((m.components[[c, t]] - sign * vectors[[c, t]]).abs() < 1e-8);
        }
    }
}

#[test]
fn kmeans_reaches_exhaustive_optimum_on_small_lines() {
    let mut r = rng(10);
    for trial in 0..30 {
        let pts: Vec<f64> = gaussian_matrix(&mut r, 7, 1).iter().map(|v| v * 5.0).collect();
        let (optimum, _) = exhaustive_kmeans_optimum(&pts, 2);
        let x = Array2::from_shape_vec((7, 1), pts).unwrap();
        // best of ten restarts, as k selection does
        let best = (0..10)
            .map(|s| kmeans(x.view(), 2, s, &KMeansParams::default()).unwrap().inertia)
            .fold(f64::INFINITY, f64::min);
        assert!(best <= optimum + 1e-9, "trial {trial}: {best} vs {optimum}");
    }
}

#[test]
fn separation_sweep_orders_the_indices() {
    let mut r = rng(11);
    let base = gaussian_matrix(&mut r, 60, 2);
    let labels: Vec<usize> = (0..60).map(|i| usize::from(i >= 30)).collect();
    let mut last = (f64::NEG_INFINITY, 0.0, f64::INFINITY);
    for sep in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        let mut x = base.clone();
        for i in 30..60 {
            x[[i, 0]] += sep;
        }
        let s = silhouette(x.view(), &labels).unwrap();
        let ch = calinski_harabasz(x.view(), &labels).unwrap();
        let db = davies_bouldin(x.view(), &labels).unwrap();
        assert!(s > last.0 && ch > last.1 && db < last.2, "sep {sep}");
        last = (s, ch, db);
    }
}

#[test]
fn metric_edge_cases() {
    let x = array![[0.0], [1.0], [2.0]];
    assert!(matches!(silhouette(x.view(), &[0, 0, 0]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(calinski_harabasz(x.view(), &[0, 1, 2]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(davies_bouldin(x.view(), &[0, 0, 0]), Err(Error::UndefinedMetric(_))));
    // singleton scores 0; point 1 has a = b = 1; point 2 has a = 1, b = 2
    let s = silhouette(x.view(), &[0, 1, 1]).unwrap();
    assert!((s - 0.5 / 3.0).abs() < 1e-12);
    let dup = array![[0.0], [0.0], [5.0], [5.0]];
    assert_eq!(silhouette(dup.view(), &[0, 0, 1, 1]).unwrap(), 1.0);
}

#[test]
fn sampled_silhouette_is_seeded() {
    let mut r = rng(12);
    let x = gaussian_matrix(&mut r, 300, 2);
    let labels = random_labels(&mut r, 300, 3);
    let mode = SilhouetteMode::Sampled { max_points: 100, seed: 4 };
    let a = silhouette_with_mode(x.view(), &labels, mode).unwrap();
    assert_eq!(a, silhouette_with_mode(x.view(), &labels, mode).unwrap());
    let all = SilhouetteMode::Sampled { max_points: 300, seed: 4 };
    assert_eq!(silhouette_with_mode(x.view(), &labels, all).unwrap(), silhouette(x.view(), &labels).unwrap());
}

#[test]
fn select_k_validates_range_and_is_deterministic() {
    let mut r = rng(13);
    let x = gaussian_matrix(&mut r, 30, 2);
    let opts = SelectKOptions { runs_per_k: 3, ..SelectKOptions::default() };
    assert!(matches!(select_k(x.view(), 1, 4, 0, &opts), Err(Error::InvalidInput(_))));
    assert!(matches!(select_k(x.view(), 2, 30, 0, &opts), Err(Error::InvalidInput(_))));
    let a = select_k(x.view(), 2, 5, 7, &opts).unwrap();
    assert_eq!(a, select_k(x.view(), 2, 5, 7, &opts).unwrap());
    assert_eq!(a.per_k.len(), 4);
    assert_eq!(a.score(3).unwrap().seeds, vec![7, 8, 9]);
}

#[test]
fn ingest_is_atomic_and_reports_the_line() {
    let mut store = VectorStore::new(2).unwrap();
    let text = concat!(
        "{\"post_id\":\"a\",\"modality\":\"fused\",\"vector\":[1,2]}\n",
        "# comment\n",
        "{\"post_id\":\"b\",\"modality\":\"fused\",\"vector\":[1,2,3]}\n",
    );
    match store.ingest(Cursor::new(text)) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(store.count(), 0);
    let text = "{\"post_id\":\"a\",\"modality\":\"text\",\"vector\":[1,2]}\n";
    assert!(store.ingest(Cursor::new(text)).is_err());
    assert_eq!(store.count(), 0);
}

#[test]
fn knn_rejects_bad_queries() {
    let mut store = VectorStore::new(2).unwrap();
    assert!(matches!(store.knn_vector(&[0.0, 0.0], 1), Err(Error::EmptyStore)));
    store.insert("a", &[0.0, 0.0], BTreeMap::new()).unwrap();
    assert!(matches!(store.knn_vector(&[0.0, 0.0], 0), Err(Error::InvalidInput(_))));
    assert!(matches!(store.knn_vector(&[0.0], 1), Err(Error::DimensionMismatch { .. })));
    assert_eq!(store.knn_vector(&[3.0, 4.0], 5).unwrap().len(), 1);
    assert!(matches!(store.insert("a", &[1.0, 1.0], BTreeMap::new()), Err(Error::DuplicateId(_))));
}

#[test]
fn corrupt_store_is_an_internal_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.embd");
    let mut store = VectorStore::new(2).unwrap();
    store.insert("a", &[1.0, 2.0], BTreeMap::new()).unwrap();
    store.save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 2);
    std::fs::write(&path, bytes).unwrap();
    let err = VectorStore::open(&path).unwrap_err();
    assert!(matches!(err, Error::CorruptStore { .. }));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn permissive_mode_passes_single_modality_through() {
    let cfg = FusionConfig {
        mode: FusionMode::Permissive,
        ..FusionConfig::default()
    };
    let only_images = ListingRecord::new("p", None, vec![Embedding::new(vec![2.0, 4.0], Modality::Image, "p").unwrap()]);
    assert_eq!(fuse(&only_images, &cfg).unwrap().vector(), &[2.0, 4.0]);
    assert!(matches!(fuse(&only_images, &FusionConfig::default()), Err(Error::MissingModality(_))));
}

#[test]
fn interchange_lines_round_trip() {
    let rec = Record {
        post_id: "x".into(),
        modality: Modality::Audio,
        index: 0,
        vector: vec![0.1, -3.5e-7, f32::MAX],
        meta: BTreeMap::new(),
    };
    let mut buf = Vec::new();
    write_record(&mut buf, &rec).unwrap();
    let line = String::from_utf8(buf).unwrap();
    let back = embedfuse::interchange::parse_line(line.trim_end(), 1).unwrap();
    assert_eq!(back, rec);
}
