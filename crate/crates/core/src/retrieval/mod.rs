//! Closed-world reference database and exact neighbor search.
//!
//! Each record stores `v_db = [V(I) | e_img_txt | e_img_loc]`. Neighbor
//! queries rank by cosine similarity over the raw visual segment only.

pub mod features;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{EncoderError, FeatureRecord, ProjectionHeads};
use crate::geodesy::GpsCoordinate;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("database is empty")]
    EmptyDatabase,
    #[error("k = {k} outside 1..={count}")]
    KOutOfRange { k: usize, count: usize },
    #[error("query vector has zero norm or non-finite values")]
    DegenerateQuery,
    #[error("record {0:?} has no coordinates")]
    MissingGps(String),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    VersionMismatch(u32),
    #[error("file is truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const DB_MAGIC: &[u8; 4] = b"GSDB";
pub const DB_VERSION: u32 = 1;
const NO_TEXT: u32 = u32::MAX;

/// One reference image in the database.
#[derive(Debug, Clone, PartialEq)]
pub struct DbRecord {
    pub id: String,
    pub v_db: Vec<f32>,
    pub gps: GpsCoordinate,
    pub text: Option<String>,
}

/// Immutable set of reference records, kept in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct Database {
    visual_dim: usize,
    embed_dim: usize,
    records: Vec<DbRecord>,
    visual_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
    pub gps: GpsCoordinate,
}

/// `k` most and least visually similar records.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NeighborResult {
    /// Descending similarity, ties by ascending id.
    pub nearest: Vec<Neighbor>,
    /// Ascending similarity, ties by ascending id. Disjoint from `nearest` when `2k <= count`.
    pub farthest: Vec<Neighbor>,
}

impl NeighborResult {
    /// Union of returned coordinates, nearest first.
    pub fn coordinates(&self) -> Vec<GpsCoordinate> {
        self.nearest.iter().chain(&self.farthest).map(|n| n.gps).collect()
    }
}

impl Database {
    pub fn new(visual_dim: usize, embed_dim: usize, mut records: Vec<DbRecord>) -> Result<Self, RetrievalError> {
        let width = visual_dim + 2 * embed_dim;
        let mut seen = BTreeSet::new();
        for r in &records {
            if r.v_db.len() != width {
                return Err(RetrievalError::DimensionMismatch {
                    expected: width,
                    got: r.v_db.len(),
                });
            }
            if !seen.insert(r.id.as_str()) {
                return Err(RetrievalError::DuplicateId(r.id.clone()));
            }
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let visual_norms = records
            .iter()
            .map(|r| r.v_db[..visual_dim].iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
            .collect();
        Ok(Self {
            visual_dim,
            embed_dim,
            records,
            visual_norms,
        })
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[DbRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&DbRecord> {
        self.records
            .binary_search_by(|r| r.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn visual_segment<'a>(&self, r: &'a DbRecord) -> &'a [f32] {
        &r.v_db[..self.visual_dim]
    }

    pub fn img_txt_segment<'a>(&self, r: &'a DbRecord) -> &'a [f32] {
        &r.v_db[self.visual_dim..self.visual_dim + self.embed_dim]
    }

    pub fn img_loc_segment<'a>(&self, r: &'a DbRecord) -> &'a [f32] {
        &r.v_db[self.visual_dim + self.embed_dim..]
    }

    /// Cosine similarity of the query to every record's visual segment, in record order.
    pub fn visual_similarities<T: Scalar>(&self, query: &[T]) -> Result<Vec<f64>, RetrievalError> {
        if query.len() != self.visual_dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.visual_dim,
                got: query.len(),
            });
        }
        let q: Vec<f64> = query.iter().map(|v| v.as_f64()).collect();
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !qn.is_finite() || qn == 0.0 {
            return Err(RetrievalError::DegenerateQuery);
        }
        let q: Vec<f64> = q.into_iter().map(|v| v / qn).collect();
        Ok(self
            .records
            .iter()
            .zip(&self.visual_norms)
            .map(|(r, &n)| {
                if n == 0.0 {
                    return 0.0;
                }
                let d: f64 = q.iter().zip(&r.v_db[..self.visual_dim]).map(|(a, &b)| a * b as f64).sum();
                // adding zero folds -0.0 into 0.0 so total ordering agrees with equality
                (d / n).clamp(-1.0, 1.0) + 0.0
            })
            .collect())
    }

    /// Exact top-`k` nearest and farthest neighbors by visual cosine similarity.
    pub fn query_neighbors<T: Scalar>(&self, query: &[T], k: usize) -> Result<NeighborResult, RetrievalError> {
        if self.records.is_empty() {
            return Err(RetrievalError::EmptyDatabase);
        }
        if k == 0 || k > self.records.len() {
            return Err(RetrievalError::KOutOfRange {
                k,
                count: self.records.len(),
            });
        }
        let sims = self.visual_similarities(query)?;
        // records are id-sorted, so a stable sort on similarity breaks ties by ascending id
        let mut order: Vec<usize> = (0..sims.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
        let neighbor = |i: usize| Neighbor {
            id: self.records[i].id.clone(),
            similarity: sims[i],
            gps: self.records[i].gps,
        };
        let mut taken = vec![false; sims.len()];
        let nearest = order[..k]
            .iter()
            .map(|&i| {
                taken[i] = true;
                neighbor(i)
            })
            .collect();
        // with enough records, ties never let a record appear in both lists
        let exclusive = 2 * k <= sims.len();
        order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
        let farthest = order
            .iter()
            .filter(|&&i| !(exclusive && taken[i]))
            .take(k)
            .map(|&i| neighbor(i))
            .collect();
        Ok(NeighborResult { nearest, farthest })
    }
}

/// Encodes every feature record into a database entry.
pub fn build_database<T: Scalar>(
    features: &[FeatureRecord<T>],
    heads: &ProjectionHeads<T>,
) -> Result<Database, RetrievalError> {
    let d_v = heads.visual_dim();
    let records = features
        .par_iter()
        .map(|f| {
            f.validate(d_v)?;
            let (et, el) = heads.project_image(&f.visual)?;
            let to32 = |v: &T| v.to_f32().unwrap_or(f32::NAN);
            let v_db = f.visual.iter().chain(&et).chain(&el).map(to32).collect();
            Ok(DbRecord {
                id: f.id.clone(),
                v_db,
                gps: f.gps,
                text: f.description.clone(),
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    Database::new(d_v, heads.embed_dim(), records)
}

/// Writes the `GSDB` binary format with a trailing CRC-32.
pub fn save_database(db: &Database, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DB_MAGIC);
    buf.write_u32::<LittleEndian>(DB_VERSION)?;
    buf.write_u32::<LittleEndian>(db.visual_dim as u32)?;
    buf.write_u32::<LittleEndian>(db.embed_dim as u32)?;
    buf.write_u64::<LittleEndian>(db.records.len() as u64)?;
    for r in &db.records {
        let id = r.id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| RetrievalError::Format(format!("id {:?} is too long", r.id)))?;
        buf.write_u16::<LittleEndian>(id_len)?;
        buf.extend_from_slice(id);
        buf.write_f64::<LittleEndian>(r.gps.lat())?;
        buf.write_f64::<LittleEndian>(r.gps.lon())?;
        match &r.text {
            Some(t) => {
                let len = u32::try_from(t.len())
                    .ok()
                    .filter(|&l| l != NO_TEXT)
                    .ok_or_else(|| RetrievalError::Format("text too long".into()))?;
                buf.write_u32::<LittleEndian>(len)?;
                buf.extend_from_slice(t.as_bytes());
            }
            None => buf.write_u32::<LittleEndian>(NO_TEXT)?,
        }
        for &v in &r.v_db {
            buf.write_f32::<LittleEndian>(v)?;
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.write_u32::<LittleEndian>(crc)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn eof(e: std::io::Error) -> RetrievalError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        RetrievalError::Truncated
    } else {
        RetrievalError::Io(e)
    }
}

pub fn load_database(path: impl AsRef<Path>) -> Result<Database, RetrievalError> {
    let bytes = std::fs::read(path)?;
    let mut r: &[u8] = &bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != DB_MAGIC {
        return Err(RetrievalError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != DB_VERSION {
        return Err(RetrievalError::VersionMismatch(version));
    }
    let d_v = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let d_e = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let count = r.read_u64::<LittleEndian>().map_err(eof)? as usize;
    let width = d_v + 2 * d_e;
    let mut records = Vec::with_capacity(count.min(bytes.len() / (width * 4).max(1)));
    for _ in 0..count {
        let id_len = r.read_u16::<LittleEndian>().map_err(eof)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(eof)?;
        let id = String::from_utf8(id).map_err(|_| RetrievalError::Format("id is not UTF-8".into()))?;
        let lat = r.read_f64::<LittleEndian>().map_err(eof)?;
        let lon = r.read_f64::<LittleEndian>().map_err(eof)?;
        let text_len = r.read_u32::<LittleEndian>().map_err(eof)?;
        let text = if text_len == NO_TEXT {
            None
        } else {
            let len = text_len as usize;
            if len > r.len() {
                return Err(RetrievalError::Truncated);
            }
            let mut t = vec![0u8; len];
            r.read_exact(&mut t).map_err(eof)?;
            Some(String::from_utf8(t).map_err(|_| RetrievalError::Format("text is not UTF-8".into()))?)
        };
        if width * 4 > r.len() {
            return Err(RetrievalError::Truncated);
        }
        let mut v_db = vec![0f32; width];
        r.read_f32_into::<LittleEndian>(&mut v_db).map_err(eof)?;
        let gps = GpsCoordinate::new(lat, lon).map_err(|e| RetrievalError::Format(format!("record {id}: {e}")))?;
        records.push(DbRecord { id, v_db, gps, text });
    }
    match r.len() {
        0..=3 => return Err(RetrievalError::Truncated),
        4 => {}
        _ => return Err(RetrievalError::Format("trailing bytes after checksum".into())),
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = r.read_u32::<LittleEndian>().map_err(eof)?;
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(RetrievalError::Checksum { stored, computed });
    }
    Database::new(d_v, d_e, records)
}
