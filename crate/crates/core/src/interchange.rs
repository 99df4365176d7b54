//! Line-delimited embedding records exchanged with encoders and generators.
//!
//! Each line is one JSON object:
//!
//! ```text
//! {"post_id":"p1","modality":"image","index":2,"vector":[0.1,-0.25],"meta":{}}
//! ```
//!
//! `index` is 0 for text and the image ordinal otherwise. Lines starting with
//! `#` and blank lines are ignored, so producers may emit header comments.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, ListingRecord, Modality};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub post_id: String,
    pub modality: Modality,
    #[serde(default)]
    pub index: u32,
    pub vector: Vec<f32>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Record {
    pub fn embedding(&self) -> Result<Embedding> {
        Embedding::new(self.vector.clone(), self.modality, self.post_id.clone())
    }

    /// Metadata flattened to strings; non-string JSON values keep their JSON text.
    pub fn meta_strings(&self) -> BTreeMap<String, String> {
        self.meta
            .iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), s)
            })
            .collect()
    }
}

/// Parses one line; `line_no` is 1-based and only used for error reporting.
pub fn parse_line(line: &str, line_no: usize) -> Result<Record> {
    let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    if record.post_id.is_empty() {
        return Err(Error::Parse {
            line: line_no,
            message: "empty post_id".into(),
        });
    }
    if let Some(i) = record.vector.iter().position(|v| !v.is_finite()) {
        return Err(Error::Parse {
            line: line_no,
            message: format!("non-finite component at index {i}"),
        });
    }
    Ok(record)
}

/// Reads every record from `reader`, pairing each with its 1-based line number.
/// When `dim` is given, vectors of any other length are rejected.
pub fn read_records<R: BufRead>(reader: R, dim: Option<usize>) -> Result<Vec<(usize, Record)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading line {line_no}"), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record = parse_line(trimmed, line_no)?;
        if let Some(d) = dim {
            if record.vector.len() != d {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("vector has {} components, expected {d}", record.vector.len()),
                });
            }
        }
        out.push((line_no, record));
    }
    Ok(out)
}

pub fn write_record<W: Write>(mut writer: W, record: &Record) -> Result<()> {
    serde_json::to_writer(&mut writer, record)?;
    writer
        .write_all(b"\n")
        .map_err(|e| Error::io("writing record", e))
}

/// Text embedding, indexed images and metadata collected for one post.
type Pending = (Option<Embedding>, Vec<(u32, Embedding)>, BTreeMap<String, String>);

/// Groups text and image records into listings, in order of first appearance.
/// Images are ordered by their `index`. Audio and fused records are not part
/// of a listing and are returned separately.
pub fn group_listings(records: Vec<(usize, Record)>) -> Result<(Vec<ListingRecord>, Vec<Record>)> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Pending> = HashMap::new();
    let mut other = Vec::new();

    for (line_no, record) in records {
        if matches!(record.modality, Modality::Audio | Modality::Fused) {
            other.push(record);
            continue;
        }
        let entry = by_id.entry(record.post_id.clone()).or_insert_with(|| {
            order.push(record.post_id.clone());
            (None, Vec::new(), BTreeMap::new())
        });
        entry.2.extend(record.meta_strings());
        let embedding = record.embedding().map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        match record.modality {
            Modality::Text => {
                if entry.0.is_some() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("second text record for `{}`", record.post_id),
                    });
                }
                entry.0 = Some(embedding);
            }
            Modality::Image => {
                if entry.1.iter().any(|(idx, _)| *idx == record.index) {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("duplicate image index {} for `{}`", record.index, record.post_id),
                    });
                }
                entry.1.push((record.index, embedding));
            }
            Modality::Audio | Modality::Fused => unreachable!(),
        }
    }

    let listings = order
        .into_iter()
        .map(|id| {
            let (text, mut images, metadata) = by_id.remove(&id).expect("id recorded on insert");
            images.sort_by_key(|(idx, _)| *idx);
            let mut listing = ListingRecord::new(id, text, images.into_iter().map(|(_, e)| e).collect());
            listing.metadata = metadata;
            listing
        })
        .collect();
    Ok((listings, other))
}
