//! Keypoint match files: NDJSON, one line per (query, linked image) pair,
//! `{"query_id", "link_image_ref", "matches": [[x, y, x', y', confidence], ...], "image_w", "image_h"}`.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Correspondence, MatchInput, RefineError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchRecord {
    pub query_id: String,
    pub link_image_ref: String,
    pub matches: Vec<Vec<f64>>,
    #[serde(default)]
    pub image_w: Option<u32>,
    #[serde(default)]
    pub image_h: Option<u32>,
}

impl MatchRecord {
    pub fn to_input(&self) -> Result<MatchInput, String> {
        let matches = self
            .matches
            .iter()
            .enumerate()
            .map(|(i, m)| match m.as_slice() {
                [x, y, xp, yp] => Ok(Correspondence::new(*x, *y, *xp, *yp)),
                [x, y, xp, yp, c] => Ok(Correspondence {
                    confidence: Some(*c),
                    ..Correspondence::new(*x, *y, *xp, *yp)
                }),
                _ => Err(format!("match {i} has {} values, expected 4 or 5", m.len())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MatchInput {
            matches,
            image_size: self.image_w.zip(self.image_h),
        })
    }
}

pub fn read_match_file(path: impl AsRef<Path>) -> Result<Vec<MatchRecord>, RefineError> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| RefineError::MatchFile {
            path: path.display().to_string(),
            line: n + 1,
            msg,
        };
        let rec: MatchRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        rec.to_input().map_err(err)?;
        out.push(rec);
    }
    Ok(out)
}
