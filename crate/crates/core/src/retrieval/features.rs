//! Feature-set ingestion.
//!
//! A feature set named by a path stem `S` is three files:
//!
//! * `S.ndjson`: one JSON object per record with `{"id", "lat", "lon", "text"}`
//!   (`lat`/`lon` may be absent for unlabeled queries; `image` optionally
//!   references the photo and `matches` a per-query match file).
//! * `S.f32`: raw little-endian `f32` blob; each record holds its visual
//!   feature followed by its text feature, `D_v` values each.
//! * `S.idx`: magic `GSFI`, `u32` version, `u32` `D_v`, `u64` count, then one
//!   `u64` byte offset into the blob per record, in NDJSON line order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::RetrievalError;
use crate::encoders::FeatureRecord;
use crate::geodesy::GpsCoordinate;
use crate::scalar::Scalar;

pub const INDEX_MAGIC: &[u8; 4] = b"GSFI";
pub const INDEX_VERSION: u32 = 1;

/// Paths of the three files making up a feature set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSetPaths {
    pub records: PathBuf,
    pub blob: PathBuf,
    pub index: PathBuf,
}

impl FeatureSetPaths {
    pub fn from_stem(stem: impl AsRef<Path>) -> Self {
        let s = stem.as_ref().as_os_str().to_owned();
        let with = |ext: &str| {
            let mut p = s.clone();
            p.push(ext);
            PathBuf::from(p)
        };
        Self {
            records: with(".ndjson"),
            blob: with(".f32"),
            index: with(".idx"),
        }
    }

    pub fn exists(&self) -> bool {
        self.records.is_file() && self.blob.is_file() && self.index.is_file()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    matches: Option<String>,
}

/// One ingested row before it is interpreted as a reference record or a query.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow<T> {
    pub id: String,
    pub gps: Option<GpsCoordinate>,
    pub text: Option<String>,
    /// Path or URL of the photo itself.
    pub image: Option<String>,
    pub matches: Option<String>,
    pub visual: Vec<T>,
    pub text_feature: Vec<T>,
}

impl<T: Scalar> FeatureRow<T> {
    pub fn into_record(self) -> Result<FeatureRecord<T>, RetrievalError> {
        let gps = self.gps.ok_or_else(|| RetrievalError::MissingGps(self.id.clone()))?;
        Ok(FeatureRecord {
            id: self.id,
            visual: self.visual,
            text_feature: self.text_feature,
            gps,
            description: self.text,
        })
    }
}

impl<T: Scalar> From<&FeatureRecord<T>> for FeatureRow<T> {
    fn from(r: &FeatureRecord<T>) -> Self {
        Self {
            id: r.id.clone(),
            gps: Some(r.gps),
            text: r.description.clone(),
            image: None,
            matches: None,
            visual: r.visual.clone(),
            text_feature: r.text_feature.clone(),
        }
    }
}

pub fn write_feature_rows<T: Scalar>(
    stem: impl AsRef<Path>,
    visual_dim: usize,
    rows: &[FeatureRow<T>],
) -> Result<(), RetrievalError> {
    let paths = FeatureSetPaths::from_stem(stem);
    let mut lines = BufWriter::new(File::create(&paths.records)?);
    let mut blob = BufWriter::new(File::create(&paths.blob)?);
    let mut index = BufWriter::new(File::create(&paths.index)?);
    index.write_all(INDEX_MAGIC)?;
    index.write_u32::<LittleEndian>(INDEX_VERSION)?;
    index.write_u32::<LittleEndian>(visual_dim as u32)?;
    index.write_u64::<LittleEndian>(rows.len() as u64)?;
    let mut offset = 0u64;
    for r in rows {
        for v in [&r.visual, &r.text_feature] {
            if v.len() != visual_dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: visual_dim,
                    got: v.len(),
                });
            }
        }
        let line = RecordLine {
            id: r.id.clone(),
            lat: r.gps.map(|g| g.lat()),
            lon: r.gps.map(|g| g.lon()),
            text: r.text.clone(),
            image: r.image.clone(),
            matches: r.matches.clone(),
        };
        serde_json::to_writer(&mut lines, &line)?;
        lines.write_all(b"\n")?;
        index.write_u64::<LittleEndian>(offset)?;
        for &v in r.visual.iter().chain(&r.text_feature) {
            blob.write_f32::<LittleEndian>(v.to_f32().unwrap_or(f32::NAN))?;
        }
        offset += (2 * visual_dim * 4) as u64;
    }
    lines.flush()?;
    blob.flush()?;
    index.flush()?;
    Ok(())
}

pub fn write_feature_set<T: Scalar>(
    stem: impl AsRef<Path>,
    visual_dim: usize,
    records: &[FeatureRecord<T>],
) -> Result<(), RetrievalError> {
    let rows: Vec<FeatureRow<T>> = records.iter().map(FeatureRow::from).collect();
    write_feature_rows(stem, visual_dim, &rows)
}

fn eof(e: std::io::Error) -> RetrievalError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        RetrievalError::Truncated
    } else {
        RetrievalError::Io(e)
    }
}

/// Reads every row of a feature set; returns `(D_v, rows)`.
pub fn read_feature_rows<T: Scalar>(stem: impl AsRef<Path>) -> Result<(usize, Vec<FeatureRow<T>>), RetrievalError> {
    let paths = FeatureSetPaths::from_stem(stem);
    let mut idx = BufReader::new(File::open(&paths.index)?);
    let mut magic = [0u8; 4];
    idx.read_exact(&mut magic).map_err(eof)?;
    if &magic != INDEX_MAGIC {
        return Err(RetrievalError::BadMagic);
    }
    let version = idx.read_u32::<LittleEndian>().map_err(eof)?;
    if version != INDEX_VERSION {
        return Err(RetrievalError::VersionMismatch(version));
    }
    let d_v = idx.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let count = idx.read_u64::<LittleEndian>().map_err(eof)? as usize;
    let mut offsets = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        offsets.push(idx.read_u64::<LittleEndian>().map_err(eof)?);
    }

    let blob = std::fs::read(&paths.blob)?;
    let record_bytes = 2 * d_v * 4;
    let lines = BufReader::new(File::open(&paths.records)?);
    let mut rows = Vec::with_capacity(count);
    for (n, line) in lines.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let meta: RecordLine = serde_json::from_str(&line)
            .map_err(|e| RetrievalError::Format(format!("{}:{}: {e}", paths.records.display(), n + 1)))?;
        let i = rows.len();
        let &off = offsets
            .get(i)
            .ok_or_else(|| RetrievalError::Format(format!("record {} has no index entry", meta.id)))?;
        let start = off as usize;
        let chunk = blob.get(start..start + record_bytes).ok_or(RetrievalError::Truncated)?;
        let mut values = vec![0f32; 2 * d_v];
        (&chunk[..]).read_f32_into::<LittleEndian>(&mut values).map_err(eof)?;
        let gps = match (meta.lat, meta.lon) {
            (Some(lat), Some(lon)) => Some(
                GpsCoordinate::new(lat, lon)
                    .map_err(|e| RetrievalError::Format(format!("record {}: {e}", meta.id)))?,
            ),
            (None, None) => None,
            _ => return Err(RetrievalError::Format(format!("record {}: lat and lon must both be set", meta.id))),
        };
        let to_t = |s: &[f32]| s.iter().map(|&v| T::of(v as f64)).collect::<Vec<T>>();
        rows.push(FeatureRow {
            id: meta.id,
            gps,
            text: meta.text,
            image: meta.image,
            matches: meta.matches,
            visual: to_t(&values[..d_v]),
            text_feature: to_t(&values[d_v..]),
        });
    }
    if rows.len() != count {
        return Err(RetrievalError::Format(format!(
            "index lists {count} records but {} were found",
            rows.len()
        )));
    }
    Ok((d_v, rows))
}

/// Reads a feature set whose rows all carry coordinates.
pub fn read_feature_set<T: Scalar>(stem: impl AsRef<Path>) -> Result<(usize, Vec<FeatureRecord<T>>), RetrievalError> {
    let (d_v, rows) = read_feature_rows(stem)?;
    let records = rows.into_iter().map(FeatureRow::into_record).collect::<Result<_, _>>()?;
    Ok((d_v, records))
}
