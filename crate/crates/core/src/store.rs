//! Persistent, id-addressable storage of fused embeddings with exact
//! brute-force k-NN retrieval by Euclidean distance.
//!
//! On disk a store is two files:
//!
//! * `<path>`: a little-endian binary matrix. Header is the magic `EMBD`,
//!   format version (`u32`), `dim` (`u32`) and `count` (`u64`), followed by
//!   `count * dim` `f32` values in row order.
//! * `<path>.ids.jsonl`: a manifest line followed by one line per row holding
//!   the row's `post_id` and metadata.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, Modality};
use crate::error::{Error, Result};
use crate::interchange::{self, Record};

pub const MAGIC: &[u8; 4] = b"EMBD";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dim: usize,
    pub count: usize,
    pub created_unix: u64,
    /// Digest of the fusion settings the rows were produced with.
    #[serde(default)]
    pub fusion_config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IdLine {
    post_id: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub rank: usize,
    pub post_id: String,
    pub distance: f64,
}

/// Neighbors ordered by ascending distance; ranks run 1, 2, 3, ...
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NeighborList {
    pub entries: Vec<Neighbor>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|n| n.post_id.as_str()).collect()
    }
}

/// Picks the `k` smallest `(row, distance)` pairs, breaking distance ties by
/// ascending id.
pub(crate) fn rank_neighbors<S: AsRef<str>>(mut scored: Vec<(usize, f64)>, ids: &[S], k: usize) -> NeighborList {
    let cmp = |a: &(usize, f64), b: &(usize, f64)| {
        a.1.total_cmp(&b.1)
            .then_with(|| ids[a.0].as_ref().cmp(ids[b.0].as_ref()))
    };
    let k = k.min(scored.len());
    if k == 0 {
        return NeighborList::default();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    NeighborList {
        entries: scored
            .into_iter()
            .enumerate()
            .map(|(i, (row, distance))| Neighbor {
                rank: i + 1,
                post_id: ids[row].as_ref().to_string(),
                distance,
            })
            .collect(),
    }
}

pub(crate) fn euclidean_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone)]
pub struct VectorStore {
    dim: usize,
    rows: Vec<f32>,
    ids: Vec<String>,
    meta: Vec<BTreeMap<String, String>>,
    index: HashMap<String, usize>,
    manifest: Manifest,
}

impl VectorStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("store dimension must be positive".into()));
        }
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(Self {
            dim,
            rows: Vec::new(),
            ids: Vec::new(),
            meta: Vec::new(),
            index: HashMap::new(),
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                dim,
                count: 0,
                created_unix,
                fusion_config_hash: None,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn set_fusion_config_hash(&mut self, hash: impl Into<String>) {
        self.manifest.fusion_config_hash = Some(hash.into());
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn meta(&self, i: usize) -> &BTreeMap<String, String> {
        &self.meta[i]
    }

    pub fn position(&self, post_id: &str) -> Option<usize> {
        self.index.get(post_id).copied()
    }

    pub fn get(&self, post_id: &str) -> Option<&[f32]> {
        self.position(post_id).map(|i| self.row(i))
    }

    /// All rows widened to 64-bit, one row per stored embedding.
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.count(), self.dim), |(i, j)| f64::from(self.rows[i * self.dim + j]))
    }

    fn check_vector(&self, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if let Some(index) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(())
    }

    /// Appends one row.
    pub fn insert(&mut self, post_id: &str, vector: &[f32], meta: BTreeMap<String, String>) -> Result<()> {
        self.check_vector(vector)?;
        if self.index.contains_key(post_id) {
            return Err(Error::DuplicateId(post_id.to_string()));
        }
        self.index.insert(post_id.to_string(), self.ids.len());
        self.ids.push(post_id.to_string());
        self.rows.extend_from_slice(vector);
        self.meta.push(meta);
        self.manifest.count = self.ids.len();
        Ok(())
    }

    pub fn insert_embedding(&mut self, e: &Embedding, meta: BTreeMap<String, String>) -> Result<()> {
        if e.modality() != Modality::Fused {
            return Err(Error::InvalidInput(format!(
                "store holds fused embeddings, got {} for `{}`",
                e.modality(),
                e.source_id()
            )));
        }
        self.insert(e.source_id(), e.vector(), meta)
    }

    /// Ingests interchange lines of fused records. Either every line is added
    /// or, on the first error, none is.
    pub fn ingest<R: BufRead>(&mut self, reader: R) -> Result<usize> {
        let records = interchange::read_records(reader, Some(self.dim))?;
        let mut seen = HashSet::new();
        for (line, record) in &records {
            if record.modality != Modality::Fused {
                return Err(Error::Parse {
                    line: *line,
                    message: format!("store accepts fused records only, got {}", record.modality),
                });
            }
            if self.index.contains_key(&record.post_id) || !seen.insert(record.post_id.as_str()) {
                return Err(Error::DuplicateId(record.post_id.clone()));
            }
        }
        let added = records.len();
        for (_, record) in records {
            let meta = record.meta_strings();
            self.insert(&record.post_id, &record.vector, meta)?;
        }
        Ok(added)
    }

    /// Writes rows back out as fused interchange lines, in store order.
    /// `selector = None` dumps everything.
    pub fn dump<W: Write>(&self, selector: Option<&[String]>, mut writer: W) -> Result<usize> {
        let rows: Vec<usize> = match selector {
            None => (0..self.count()).collect(),
            Some(ids) => {
                let mut wanted = Vec::with_capacity(ids.len());
                for id in ids {
                    wanted.push(self.position(id).ok_or_else(|| Error::UnknownId(id.clone()))?);
                }
                wanted.sort_unstable();
                wanted.dedup();
                wanted
            }
        };
        for &i in &rows {
            let record = Record {
                post_id: self.ids[i].clone(),
                modality: Modality::Fused,
                index: 0,
                vector: self.row(i).to_vec(),
                meta: self.meta[i]
                    .iter()
                    .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                    .collect(),
            };
            interchange::write_record(&mut writer, &record)?;
        }
        Ok(rows.len())
    }

    /// Exact k nearest rows by Euclidean distance; ties go to the smaller id.
    pub fn knn_vector(&self, query: &[f32], k: usize) -> Result<NeighborList> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::EmptyStore);
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        let scored: Vec<(usize, f64)> = self
            .rows
            .par_chunks_exact(self.dim)
            .enumerate()
            .map(|(i, row)| (i, euclidean_f32(row, query)))
            .collect();
        Ok(rank_neighbors(scored, &self.ids, k))
    }

    pub fn knn(&self, query: &Embedding, k: usize) -> Result<NeighborList> {
        self.knn_vector(query.vector(), k)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".ids.jsonl");
        PathBuf::from(s)
    }

    /// Writes both files through temporary names and renames them into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let sidecar = Self::sidecar_path(path);
        let tmp_bin = tmp_name(path);
        let tmp_ids = tmp_name(&sidecar);

        {
            let file = fs::File::create(&tmp_bin).map_err(|e| Error::io(format!("creating {}", tmp_bin.display()), e))?;
            let mut w = BufWriter::new(file);
            let mut header = Vec::with_capacity(HEADER_LEN);
            header.extend_from_slice(MAGIC);
            header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
            header.extend_from_slice(&(self.dim as u32).to_le_bytes());
            header.extend_from_slice(&(self.count() as u64).to_le_bytes());
            let io = |e| Error::io(format!("writing {}", tmp_bin.display()), e);
            w.write_all(&header).map_err(io)?;
            for v in &self.rows {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
        {
            let file = fs::File::create(&tmp_ids).map_err(|e| Error::io(format!("creating {}", tmp_ids.display()), e))?;
            let mut w = BufWriter::new(file);
            serde_json::to_writer(&mut w, &self.manifest)?;
            let io = |e| Error::io(format!("writing {}", tmp_ids.display()), e);
            w.write_all(b"\n").map_err(io)?;
            for (id, meta) in self.ids.iter().zip(&self.meta) {
                serde_json::to_writer(
                    &mut w,
                    &IdLine {
                        post_id: id.clone(),
                        meta: meta.clone(),
                    },
                )?;
                w.write_all(b"\n").map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
        fs::rename(&tmp_bin, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))?;
        fs::rename(&tmp_ids, &sidecar).map_err(|e| Error::io(format!("renaming to {}", sidecar.display()), e))?;
        Ok(())
    }

    pub fn open(path: &Path) -> Result<Self> {
        let corrupt = |message: String| Error::CorruptStore {
            path: path.to_path_buf(),
            message,
        };
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(corrupt("missing EMBD header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[HEADER_LEN..];
        if dim == 0 || body.len() != count * dim * 4 {
            return Err(corrupt(format!("body holds {} bytes, header promises {count}x{dim} f32", body.len())));
        }
        let rows: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let sidecar = Self::sidecar_path(path);
        let file = fs::File::open(&sidecar).map_err(|e| Error::io(format!("reading {}", sidecar.display()), e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| corrupt("empty id sidecar".into()))?
            .map_err(|e| Error::io("reading sidecar", e))?;
        let manifest: Manifest = serde_json::from_str(&first).map_err(|e| corrupt(format!("bad manifest: {e}")))?;
        if manifest.dim != dim || manifest.count != count {
            return Err(corrupt("manifest disagrees with binary header".into()));
        }

        let mut store = Self {
            dim,
            rows: Vec::with_capacity(rows.len()),
            ids: Vec::with_capacity(count),
            meta: Vec::with_capacity(count),
            index: HashMap::with_capacity(count),
            manifest: Manifest { count: 0, ..manifest },
        };
        let mut i = 0;
        for line in lines {
            let line = line.map_err(|e| Error::io("reading sidecar", e))?;
            if line.trim().is_empty() {
                continue;
            }
            if i >= count {
                return Err(corrupt("sidecar lists more ids than rows".into()));
            }
            let id: IdLine = serde_json::from_str(&line).map_err(|e| corrupt(format!("bad id line: {e}")))?;
            store
                .insert(&id.post_id, &rows[i * dim..(i + 1) * dim], id.meta)
                .map_err(|e| corrupt(e.to_string()))?;
            i += 1;
        }
        if i != count {
            return Err(corrupt(format!("sidecar lists {i} ids for {count} rows")));
        }
        Ok(store)
    }
}

pub(crate) fn tmp_name(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".tmp");
    PathBuf::from(s)
}
