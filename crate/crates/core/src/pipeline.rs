//! The end-to-end driver behind the command-line tool: synthesize or ingest
//! listings, fuse them into a store, sweep PCA dimensions, choose `k`, and
//! write centroid reports and retrieval results.
//!
//! Every artifact lives beside the store file and is named after it
//! (`store.embd.sweep.json`, `store.embd.labels.csv`, ...). Outputs are
//! written through a temporary file and renamed. An output that already
//! exists is left alone when the new bytes are identical and is only
//! replaced with `force`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{kmeans, select_k, ClusteringResult, Init, KMeansParams, KSelectionReport, SelectKOptions};
use crate::embedding::{fuse, FusionConfig, Modality, DEFAULT_DIM};
use crate::error::{Error, Result};
use crate::interchange::{self, Record};
use crate::reduction::{pca_fit_sampled, pca_transform, project_2d, PcaModel};
use crate::store::{rank_neighbors, tmp_name, NeighborList, VectorStore};
use crate::synth::{generate_listings, SynthSpec};
use crate::validation::{evaluate_reduction, rank_sums, select_dimension, SilhouetteMode, Space, ValidationReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub store_path: PathBuf,
    pub dim: usize,
    pub fusion: FusionConfig,
    pub pca_dims: Vec<usize>,
    pub k_range: (usize, usize),
    pub runs_per_k: usize,
    pub base_seed: u64,
    pub silhouette_space: Space,
    /// Disable the 5000-point silhouette subsample.
    pub exact_silhouette: bool,
    pub report_neighbors: usize,
    /// k used while sweeping PCA dimensions.
    pub sweep_k: usize,
    /// Cluster at this dimension instead of the sweep's choice.
    pub cluster_dim: Option<usize>,
    /// Fit PCA on a seeded sample of this many rows.
    pub pca_sample: Option<usize>,
    pub init: Init,
    pub force: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            store_path: PathBuf::from("store.embd"),
            dim: DEFAULT_DIM,
            fusion: FusionConfig::default(),
            pca_dims: vec![8, 16, 32, 64, 128],
            k_range: (2, 20),
            runs_per_k: 10,
            base_seed: 0,
            silhouette_space: Space::Reduced,
            exact_silhouette: false,
            report_neighbors: 10,
            sweep_k: 20,
            cluster_dim: None,
            pca_sample: None,
            init: Init::KMeansPlusPlus,
            force: false,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidInput(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(Error::InvalidInput(format!("`{key}`: expected a boolean, got `{other}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_optional(key: &str, value: &str) -> Result<Option<usize>> {
    match value.trim() {
        "" | "none" | "auto" => Ok(None),
        v => parse_num(key, v).map(Some),
    }
}

impl PipelineConfig {
    /// Sets one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "store" | "store_path" => self.store_path = PathBuf::from(value),
            "dim" => self.dim = parse_num(key, value)?,
            "fusion_mode" => self.fusion.mode = value.parse()?,
            "renormalize" => self.fusion.renormalize = parse_bool(key, value)?,
            "pca_dims" => self.pca_dims = parse_list(key, value)?,
            "k_range" => {
                let parts: Vec<&str> = value.split([',', '-']).map(str::trim).collect();
                match parts.as_slice() {
                    [lo, hi] => self.k_range = (parse_num(key, lo)?, parse_num(key, hi)?),
                    _ => return Err(Error::InvalidInput(format!("`k_range`: expected `min,max`, got `{value}`"))),
                }
            }
            "k_min" => self.k_range.0 = parse_num(key, value)?,
            "k_max" => self.k_range.1 = parse_num(key, value)?,
            "runs_per_k" => self.runs_per_k = parse_num(key, value)?,
            "seed" | "base_seed" => self.base_seed = parse_num(key, value)?,
            "silhouette_space" => self.silhouette_space = value.parse()?,
            "exact_silhouette" => self.exact_silhouette = parse_bool(key, value)?,
            "report_neighbors" => self.report_neighbors = parse_num(key, value)?,
            "sweep_k" => self.sweep_k = parse_num(key, value)?,
            "cluster_dim" => self.cluster_dim = parse_optional(key, value)?,
            "pca_sample" => self.pca_sample = parse_optional(key, value)?,
            "init" => self.init = value.parse()?,
            "force" => self.force = parse_bool(key, value)?,
            other => return Err(Error::InvalidInput(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` text file on top of the current values.
    /// `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key, value).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            init: self.init,
            ..KMeansParams::default()
        }
    }

    pub fn silhouette_mode(&self) -> SilhouetteMode {
        if self.exact_silhouette {
            SilhouetteMode::Exact
        } else {
            SilhouetteMode::Sampled {
                max_points: SilhouetteMode::DEFAULT_MAX_POINTS,
                seed: self.base_seed,
            }
        }
    }

    pub fn artifacts(&self) -> Artifacts {
        Artifacts::new(&self.store_path)
    }
}

/// Paths of every file a pipeline writes beside its store.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub store: PathBuf,
    pub lock: PathBuf,
    pub sweep_json: PathBuf,
    pub sweep_csv: PathBuf,
    pub pca_json: PathBuf,
    pub kselect_json: PathBuf,
    pub clustering_json: PathBuf,
    pub labels_csv: PathBuf,
    pub report_json: PathBuf,
    pub shares_csv: PathBuf,
    pub projection_csv: PathBuf,
}

impl Artifacts {
    pub fn new(store: &Path) -> Self {
        let with = |suffix: &str| {
            let mut s = store.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        Self {
            store: store.to_path_buf(),
            lock: with(".lock"),
            sweep_json: with(".sweep.json"),
            sweep_csv: with(".sweep.csv"),
            pca_json: with(".pca.json"),
            kselect_json: with(".kselect.json"),
            clustering_json: with(".clustering.json"),
            labels_csv: with(".labels.csv"),
            report_json: with(".report.json"),
            shares_csv: with(".shares.csv"),
            projection_csv: with(".2d.csv"),
        }
    }
}

/// Exclusive write lock on a store, held for the duration of one command.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl StoreLock {
    pub fn acquire(artifacts: &Artifacts) -> Result<Self> {
        if let Some(parent) = artifacts.lock.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
        match fs::OpenOptions::new().write(true).create_new(true).open(&artifacts.lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self {
                    path: artifacts.lock.clone(),
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::State(format!(
                "store is locked by another command; remove {} if no command is running",
                artifacts.lock.display()
            ))),
            Err(e) => Err(Error::io(format!("creating {}", artifacts.lock.display()), e)),
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Written,
    Unchanged,
}

/// Writes `bytes` to `path` atomically. An existing file with different
/// contents is only replaced when `force` is set.
pub fn write_output(path: &Path, bytes: &[u8], force: bool) -> Result<WriteOutcome> {
    match fs::read(path) {
        Ok(existing) if existing == bytes => return Ok(WriteOutcome::Unchanged),
        Ok(_) if !force => {
            return Err(Error::State(format!(
                "{} exists with different contents; pass --force to overwrite",
                path.display()
            )))
        }
        _ => {}
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    let tmp = tmp_name(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))?;
    Ok(WriteOutcome::Written)
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, missing: &str) -> Result<T> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::State(missing.to_string())),
        Err(e) => return Err(Error::io(format!("reading {}", path.display()), e)),
    };
    serde_json::from_str(&text).map_err(|e| Error::State(format!("{} is unreadable: {e}", path.display())))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Content digest of a store: ids, metadata and row bits. Creation time is
/// not part of it.
pub fn store_digest(store: &VectorStore) -> String {
    let mut h = Sha256::new();
    h.update((store.dim() as u64).to_le_bytes());
    for i in 0..store.count() {
        h.update(store.ids()[i].as_bytes());
        h.update([0u8]);
        for (k, v) in store.meta(i) {
            h.update(k.as_bytes());
            h.update([1u8]);
            h.update(v.as_bytes());
            h.update([2u8]);
        }
        for v in store.row(i) {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn fusion_config_hash(config: &FusionConfig) -> String {
    let json = serde_json::to_vec(config).expect("fusion config serializes");
    hex(&Sha256::digest(&json))
}

fn open_store(cfg: &PipelineConfig) -> Result<VectorStore> {
    if !cfg.store_path.exists() {
        return Err(Error::State(format!(
            "no store at {}; run `fuse` first",
            cfg.store_path.display()
        )));
    }
    let store = VectorStore::open(&cfg.store_path)?;
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    Ok(store)
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthOutcome {
    pub listings: usize,
    pub records: usize,
    pub truth_path: PathBuf,
}

pub fn truth_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".truth.csv");
    PathBuf::from(s)
}

/// Writes a synthetic interchange file plus a `post_id,blob` ground-truth CSV.
pub fn cmd_synth(spec: &SynthSpec, out: &Path, force: bool) -> Result<SynthOutcome> {
    let listings = generate_listings(spec)?;
    let mut body = Vec::new();
    writeln!(body, "# synthetic listings dim={} blobs={} seed={}", spec.dim, spec.blobs, spec.seed)
        .map_err(|e| Error::io("formatting", e))?;
    for record in &listings.records {
        interchange::write_record(&mut body, record)?;
    }
    let mut truth = String::from("post_id,blob\n");
    for (id, g) in &listings.truth {
        let _ = writeln!(truth, "{id},{g}");
    }
    let truth_path = truth_path(out);
    write_output(out, &body, force)?;
    write_output(&truth_path, truth.as_bytes(), force)?;
    Ok(SynthOutcome {
        listings: listings.truth.len(),
        records: listings.records.len(),
        truth_path,
    })
}

// ---------------------------------------------------------------------------
// fuse

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FuseSummary {
    pub listings: usize,
    pub images: usize,
    pub added: usize,
    pub unchanged: usize,
    /// Records that are not part of a listing (audio, fused).
    pub ignored_records: usize,
    /// `(post_id, reason)` for listings that could not be fused.
    pub skipped: Vec<(String, String)>,
}

/// Fuses every listing in an interchange file and appends the fused rows to
/// the store. Listings already stored with identical vectors are counted as
/// unchanged; `force` rebuilds the store from scratch.
pub fn cmd_fuse(input: &Path, cfg: &PipelineConfig) -> Result<FuseSummary> {
    let artifacts = cfg.artifacts();
    let _lock = StoreLock::acquire(&artifacts)?;

    let file = fs::File::open(input).map_err(|e| Error::io(format!("opening {}", input.display()), e))?;
    let records = interchange::read_records(BufReader::new(file), Some(cfg.dim))?;
    let (listings, other) = interchange::group_listings(records)?;

    let hash = fusion_config_hash(&cfg.fusion);
    let mut store = if cfg.store_path.exists() && !cfg.force {
        let store = VectorStore::open(&cfg.store_path)?;
        if store.dim() != cfg.dim {
            return Err(Error::DimensionMismatch {
                expected: store.dim(),
                found: cfg.dim,
            });
        }
        if let Some(existing) = &store.manifest().fusion_config_hash {
            if *existing != hash {
                return Err(Error::State(
                    "store was built with different fusion settings; pass --force to rebuild".into(),
                ));
            }
        }
        store
    } else {
        VectorStore::new(cfg.dim)?
    };
    store.set_fusion_config_hash(hash);

    let mut summary = FuseSummary {
        listings: listings.len(),
        ignored_records: other.len(),
        ..Default::default()
    };
    for listing in &listings {
        summary.images += listing.image_count();
        let fused = match fuse(listing, &cfg.fusion) {
            Ok(f) => f,
            Err(Error::MissingModality(reason)) => {
                summary.skipped.push((listing.post_id.clone(), reason));
                continue;
            }
            Err(e) => return Err(e),
        };
        match store.get(&listing.post_id) {
            Some(existing) if existing == fused.vector() => summary.unchanged += 1,
            Some(_) => return Err(Error::DuplicateId(listing.post_id.clone())),
            None => {
                store.insert_embedding(&fused, listing.metadata.clone())?;
                summary.added += 1;
            }
        }
    }
    if summary.added > 0 || !cfg.store_path.exists() || cfg.force {
        store.save(&cfg.store_path)?;
    }
    Ok(summary)
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub store_digest: String,
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub reports: Vec<ValidationReport>,
    pub rank_sums: Vec<usize>,
    pub chosen_dim: usize,
}

impl SweepReport {
    /// The sweep as a CSV table with the columns Dim., Silhouette, C-H, D-B.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,silhouette,calinski_harabasz,davies_bouldin,rank_sum\n");
        for (r, sum) in self.reports.iter().zip(&self.rank_sums) {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.dim, r.silhouette, r.calinski_harabasz, r.davies_bouldin, sum
            );
        }
        out
    }
}

/// Evaluates every configured PCA dimension against the original fused rows
/// and picks one by rank aggregation.
pub fn run_sweep(original: ArrayView2<f64>, cfg: &PipelineConfig) -> Result<(Vec<ValidationReport>, usize)> {
    if cfg.pca_dims.is_empty() {
        return Err(Error::InvalidInput("pca_dims is empty".into()));
    }
    let mut reports = Vec::with_capacity(cfg.pca_dims.len());
    for &dim in &cfg.pca_dims {
        let model = pca_fit_sampled(original, dim, cfg.pca_sample, cfg.base_seed)?;
        let reduced = pca_transform(&model, original)?;
        let eval = evaluate_reduction(
            original,
            reduced.view(),
            cfg.sweep_k,
            cfg.base_seed,
            &cfg.kmeans_params(),
            cfg.silhouette_mode(),
        )?;
        reports.push(eval.report);
    }
    let chosen = select_dimension(&reports)?;
    Ok((reports, chosen))
}

pub fn cmd_sweep(cfg: &PipelineConfig) -> Result<SweepReport> {
    let artifacts = cfg.artifacts();
    let _lock = StoreLock::acquire(&artifacts)?;
    let store = open_store(cfg)?;
    let original = store.to_matrix();
    let (reports, chosen_dim) = run_sweep(original.view(), cfg)?;
    let report = SweepReport {
        store_digest: store_digest(&store),
        n: store.count(),
        k: cfg.sweep_k,
        seed: cfg.base_seed,
        rank_sums: rank_sums(&reports),
        reports,
        chosen_dim,
    };
    write_output(&artifacts.sweep_json, &to_json(&report)?, cfg.force)?;
    write_output(&artifacts.sweep_csv, report.to_csv().as_bytes(), cfg.force)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// cluster

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistedClustering {
    pub store_digest: String,
    pub dim: usize,
    pub result: ClusteringResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutcome {
    pub dim: usize,
    pub selection: KSelectionReport,
    pub result: ClusteringResult,
}

pub fn cmd_cluster(cfg: &PipelineConfig) -> Result<ClusterOutcome> {
    let artifacts = cfg.artifacts();
    let _lock = StoreLock::acquire(&artifacts)?;
    let store = open_store(cfg)?;
    let digest = store_digest(&store);

    let dim = match cfg.cluster_dim {
        Some(d) => d,
        None => {
            let sweep: SweepReport = read_json(
                &artifacts.sweep_json,
                "no sweep results; run `sweep` first or set cluster_dim",
            )?;
            if sweep.store_digest != digest {
                return Err(Error::State("sweep results are stale; rerun `sweep`".into()));
            }
            sweep.chosen_dim
        }
    };

    let original = store.to_matrix();
    let model = pca_fit_sampled(original.view(), dim, cfg.pca_sample, cfg.base_seed)?;
    let reduced = pca_transform(&model, original.view())?;
    let options = SelectKOptions {
        runs_per_k: cfg.runs_per_k,
        params: cfg.kmeans_params(),
        scoring_rows: match cfg.silhouette_space {
            Space::Original => Some(original.view()),
            Space::Reduced => None,
        },
        silhouette: cfg.silhouette_mode(),
    };
    let (k_min, k_max) = cfg.k_range;
    let selection = select_k(reduced.view(), k_min, k_max, cfg.base_seed, &options)?;
    let best_seed = selection
        .score(selection.chosen_k)
        .expect("chosen k was scored")
        .best_seed;
    let result = kmeans(reduced.view(), selection.chosen_k, best_seed, &options.params)?;

    let mut labels_csv = String::from("post_id,label\n");
    for (id, l) in store.ids().iter().zip(&result.labels) {
        let _ = writeln!(labels_csv, "{id},{l}");
    }
    let persisted = PersistedClustering {
        store_digest: digest,
        dim,
        result: result.clone(),
    };
    write_output(&artifacts.pca_json, &to_json(&model)?, cfg.force)?;
    write_output(&artifacts.kselect_json, &to_json(&selection)?, cfg.force)?;
    write_output(&artifacts.clustering_json, &to_json(&persisted)?, cfg.force)?;
    write_output(&artifacts.labels_csv, labels_csv.as_bytes(), cfg.force)?;
    Ok(ClusterOutcome { dim, selection, result })
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: usize,
    pub size: usize,
    pub share: f64,
    /// Row of `centroids` in the persisted clustering.
    pub centroid_index: usize,
    pub neighbors: NeighborList,
    /// Metadata of each neighbor, aligned with `neighbors.entries`.
    pub neighbor_meta: Vec<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidReport {
    pub store_digest: String,
    pub dim: usize,
    pub k: usize,
    pub total: usize,
    pub clusters: Vec<ClusterSummary>,
}

impl CentroidReport {
    pub fn shares_csv(&self) -> String {
        let mut out = String::from("cluster,size,share\n");
        for c in &self.clusters {
            let _ = writeln!(out, "{},{},{}", c.cluster_id, c.size, c.share);
        }
        out
    }
}

/// The stored rows mapped into the clustered space.
fn clustered_rows(store: &VectorStore, model: &PcaModel) -> Result<Array2<f64>> {
    pca_transform(model, store.to_matrix().view())
}

pub fn build_centroid_report(
    store: &VectorStore,
    reduced: ArrayView2<f64>,
    persisted: &PersistedClustering,
    neighbors: usize,
) -> Result<CentroidReport> {
    let result = &persisted.result;
    if result.labels.len() != store.count() || reduced.nrows() != store.count() {
        return Err(Error::State("clustering does not match the store; rerun `cluster`".into()));
    }
    let sizes = result.cluster_sizes();
    let total = store.count();
    let clusters = (0..result.k)
        .map(|c| {
            let centroid = result.centroids.row(c);
            let scored: Vec<(usize, f64)> = reduced
                .rows()
                .into_iter()
                .enumerate()
                .map(|(i, r)| (i, crate::validation::euclidean(r, centroid)))
                .collect();
            let list = rank_neighbors(scored, store.ids(), neighbors);
            let neighbor_meta = list
                .entries
                .iter()
                .map(|n| store.meta(store.position(&n.post_id).expect("id from store")).clone())
                .collect();
            ClusterSummary {
                cluster_id: c,
                size: sizes[c],
                share: sizes[c] as f64 / total as f64,
                centroid_index: c,
                neighbors: list,
                neighbor_meta,
            }
        })
        .collect();
    Ok(CentroidReport {
        store_digest: persisted.store_digest.clone(),
        dim: persisted.dim,
        k: result.k,
        total,
        clusters,
    })
}

pub fn projection_csv<S: AsRef<str>>(original: ArrayView2<f64>, ids: &[S], labels: Option<&[usize]>) -> Result<String> {
    let points = project_2d(original, ids)?;
    let mut out = String::from("post_id,x,y,label\n");
    for (i, p) in points.iter().enumerate() {
        let label = labels.map_or(-1, |l| l[i] as i64);
        let _ = writeln!(out, "{},{},{},{}", p.post_id, p.x, p.y, label);
    }
    Ok(out)
}

pub fn cmd_report(cfg: &PipelineConfig) -> Result<CentroidReport> {
    let artifacts = cfg.artifacts();
    let _lock = StoreLock::acquire(&artifacts)?;
    let store = open_store(cfg)?;
    let persisted: PersistedClustering =
        read_json(&artifacts.clustering_json, "no clustering found; run `cluster` first")?;
    if persisted.store_digest != store_digest(&store) {
        return Err(Error::State("clustering is stale; rerun `cluster`".into()));
    }
    let model: PcaModel = read_json(&artifacts.pca_json, "no PCA model found; run `cluster` first")?;
    let reduced = clustered_rows(&store, &model)?;
    let report = build_centroid_report(&store, reduced.view(), &persisted, cfg.report_neighbors)?;
    let projection = projection_csv(store.to_matrix().view(), store.ids(), Some(&persisted.result.labels))?;

    write_output(&artifacts.report_json, &to_json(&report)?, cfg.force)?;
    write_output(&artifacts.shares_csv, report.shares_csv().as_bytes(), cfg.force)?;
    write_output(&artifacts.projection_csv, projection.as_bytes(), cfg.force)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// query

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuerySource {
    /// Every record in an interchange file is a query.
    File(PathBuf),
    /// A row already in the store.
    StoredId(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub rank: usize,
    pub post_id: String,
    pub distance: f64,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: String,
    pub modality: Modality,
    pub space: Space,
    pub neighbors: Vec<QueryHit>,
}

/// Default number of neighbors returned by a query.
pub const DEFAULT_QUERY_K: usize = 10;

/// k-NN retrieval against the fused store. With `reduced`, both query and
/// rows go through the persisted PCA model first.
pub fn cmd_query(cfg: &PipelineConfig, source: &QuerySource, k: usize, reduced: bool) -> Result<Vec<QueryResult>> {
    let store = open_store(cfg)?;
    let queries: Vec<Record> = match source {
        QuerySource::File(path) => {
            let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
            interchange::read_records(BufReader::new(file), None)?
                .into_iter()
                .map(|(_, r)| r)
                .collect()
        }
        QuerySource::StoredId(id) => {
            let row = store.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
            vec![Record {
                post_id: id.clone(),
                modality: Modality::Fused,
                index: 0,
                vector: row.to_vec(),
                meta: BTreeMap::new(),
            }]
        }
    };

    let projected = if reduced {
        let model: PcaModel = read_json(
            &cfg.artifacts().pca_json,
            "reduced-space query needs a PCA model; run `cluster` first",
        )?;
        let rows = clustered_rows(&store, &model)?;
        Some((model, rows))
    } else {
        None
    };

    let mut out = Vec::with_capacity(queries.len());
    for q in &queries {
        if q.vector.len() != store.dim() {
            return Err(Error::DimensionMismatch {
                expected: store.dim(),
                found: q.vector.len(),
            });
        }
        let list = match &projected {
            None => store.knn_vector(&q.vector, k)?,
            Some((model, rows)) => {
                if k == 0 {
                    return Err(Error::InvalidInput("k must be at least 1".into()));
                }
                let qv = Array1::from_iter(q.vector.iter().map(|&v| f64::from(v))).insert_axis(Axis(0));
                let qz = pca_transform(model, qv.view())?;
                let scored = rows
                    .rows()
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| (i, crate::validation::euclidean(r, qz.row(0))))
                    .collect();
                rank_neighbors(scored, store.ids(), k)
            }
        };
        out.push(QueryResult {
            query: q.post_id.clone(),
            modality: q.modality,
            space: if reduced { Space::Reduced } else { Space::Original },
            neighbors: list
                .entries
                .into_iter()
                .map(|n| {
                    let meta = store.meta(store.position(&n.post_id).expect("id from store")).clone();
                    QueryHit {
                        rank: n.rank,
                        post_id: n.post_id,
                        distance: n.distance,
                        meta,
                    }
                })
                .collect(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// dump

pub fn cmd_dump<W: Write>(cfg: &PipelineConfig, ids: Option<&[String]>, writer: W) -> Result<usize> {
    let store = VectorStore::open(&cfg.store_path)?;
    store.dump(ids, writer)
}

impl FromStr for PipelineConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::FusionMode;

    #[test]
    fn defaults_follow_the_protocol() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.pca_dims, vec![8, 16, 32, 64, 128]);
        assert_eq!(cfg.k_range, (2, 20));
        assert_eq!(cfg.runs_per_k, 10);
        assert_eq!(cfg.report_neighbors, 10);
        assert_eq!(cfg.dim, 1024);
        assert_eq!(cfg.fusion.mode, FusionMode::Strict);
        assert!(!cfg.fusion.renormalize);
    }

    #[test]
    fn config_text_parses() {
        let cfg: PipelineConfig = "\
# experiment
store = out/s.embd
dim = 64
pca_dims = 4, 8,16
k_range = 3-9   # inclusive
silhouette_space = original
fusion_mode = permissive
cluster_dim = 8
exact_silhouette = yes
"
        .parse()
        .unwrap();
        assert_eq!(cfg.store_path, PathBuf::from("out/s.embd"));
        assert_eq!(cfg.dim, 64);
        assert_eq!(cfg.pca_dims, vec![4, 8, 16]);
        assert_eq!(cfg.k_range, (3, 9));
        assert_eq!(cfg.silhouette_space, Space::Original);
        assert_eq!(cfg.fusion.mode, FusionMode::Permissive);
        assert_eq!(cfg.cluster_dim, Some(8));
        assert!(cfg.exact_silhouette);
    }

    #[test]
    fn config_errors_name_the_line() {
        let err = "dim = 4\nbogus = 1\n".parse::<PipelineConfig>().unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = "dim 4\n".parse::<PipelineConfig>().unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!("dim = four".parse::<PipelineConfig>().is_err());
    }

    #[test]
    fn write_output_respects_force() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        assert_eq!(write_output(&p, b"one", false).unwrap(), WriteOutcome::Written);
        assert_eq!(write_output(&p, b"one", false).unwrap(), WriteOutcome::Unchanged);
        assert!(matches!(write_output(&p, b"two", false), Err(Error::State(_))));
        assert_eq!(write_output(&p, b"two", true).unwrap(), WriteOutcome::Written);
        assert_eq!(fs::read(&p).unwrap(), b"two");
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = Artifacts::new(&dir.path().join("s.embd"));
        let lock = StoreLock::acquire(&a).unwrap();
        assert!(matches!(StoreLock::acquire(&a), Err(Error::State(_))));
        drop(lock);
        assert!(StoreLock::acquire(&a).is_ok());
    }

    #[test]
    fn store_digest_ignores_creation_time() {
        let mut a = VectorStore::new(2).unwrap();
        a.insert("x", &[1.0, 2.0], BTreeMap::new()).unwrap();
        let mut b = a.clone();
        b.set_fusion_config_hash("something");
        assert_eq!(store_digest(&a), store_digest(&b));
        b.insert("y", &[0.0, 0.0], BTreeMap::new()).unwrap();
        assert_ne!(store_digest(&a), store_digest(&b));
    }
}
