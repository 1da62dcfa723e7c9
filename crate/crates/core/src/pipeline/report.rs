use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{choice_counts, decision_error_km, PipelineError, QueryOutcome, QueryRecord, QueryTrace};
use crate::encoders::{LocationEncoder, ProjectionHeads};
use crate::geodesy::{accuracy_from_distances, geodesic_distance, DistanceThresholds, GeoError, GpsCoordinate};
use crate::refine::{argmax_first, Choice, DecidingLayer, Layer1Stats};
use crate::scalar::{cosine, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAccuracy {
    pub threshold_km: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub id: String,
    pub truth: GpsCoordinate,
    pub prediction: GpsCoordinate,
    pub chosen: Choice,
    pub layer: DecidingLayer,
    pub distance_km: f64,
    pub p_base: GpsCoordinate,
    pub p_search: Option<GpsCoordinate>,
    pub sigma: Option<f64>,
    pub layer1: Option<Layer1Stats>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub generation_calls: u64,
    /// Sum of the per-call estimate over every generation prompt.
    pub generation_estimate: u64,
    pub fallback_estimate: u64,
    pub total_estimate: u64,
    /// Counts reported by the model service, where available.
    pub reported_prompt_tokens: u64,
    pub reported_response_tokens: u64,
}

impl TokenTotals {
    pub fn from_traces(traces: &[QueryTrace]) -> Self {
        let mut t = TokenTotals::default();
        for q in traces {
            for g in q.generations() {
                for e in &g.exchanges {
                    t.generation_calls += 1;
                    t.generation_estimate += e.estimated_prompt_tokens;
                    t.reported_prompt_tokens += e.prompt_tokens;
                    t.reported_response_tokens += e.response_tokens;
                }
            }
            t.fallback_estimate += q.fallback_estimated_tokens();
        }
        t.total_estimate = t.generation_estimate + t.fallback_estimate;
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub accuracy: Vec<ThresholdAccuracy>,
    pub decisions: BTreeMap<String, usize>,
    pub failures: usize,
    pub tokens: TokenTotals,
    pub rows: Vec<QueryRow>,
}

impl EvalReport {
    /// Aggregates traces that all carry ground truth. Rows keep the traces' order.
    pub fn from_traces(traces: &[QueryTrace], thresholds: &DistanceThresholds) -> Result<Self, PipelineError> {
        if traces.is_empty() {
            return Err(PipelineError::EmptyDataset);
        }
        let rows = traces
            .iter()
            .map(|t| {
                let truth = t.truth.ok_or_else(|| PipelineError::MissingTruth(t.id.clone()))?;
                Ok(QueryRow {
                    id: t.id.clone(),
                    truth,
                    prediction: t.decision.gps,
                    chosen: t.decision.chosen,
                    layer: t.decision.layer,
                    distance_km: decision_error_km(t).unwrap_or_default(),
                    p_base: t.p_base(),
                    p_search: t.p_search(),
                    sigma: t.sigma(),
                    layer1: t.layer1_stats(),
                    failure: t.failure.clone(),
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let distances: Vec<f64> = rows.iter().map(|r| r.distance_km).collect();
        let accuracy = thresholds
            .as_slice()
            .iter()
            .zip(accuracy_from_distances(&distances, thresholds))
            .map(|(&threshold_km, accuracy)| ThresholdAccuracy { threshold_km, accuracy })
            .collect();
        Ok(Self {
            queries: rows.len(),
            accuracy,
            decisions: choice_counts(traces),
            failures: rows.iter().filter(|r| r.failure.is_some()).count(),
            tokens: TokenTotals::from_traces(traces),
            rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTiming {
    pub id: String,
    pub seconds: f64,
}

/// Wall-clock per query; kept apart from the report so reports stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_seconds: f64,
    pub total_seconds: f64,
    pub queries: Vec<QueryTiming>,
}

impl Timing {
    pub fn from_outcomes(outcomes: &[QueryOutcome]) -> Self {
        let queries: Vec<QueryTiming> = outcomes
            .iter()
            .map(|o| QueryTiming {
                id: o.trace.id.clone(),
                seconds: o.seconds,
            })
            .collect();
        let total_seconds: f64 = queries.iter().map(|q| q.seconds).sum();
        Self {
            mean_seconds: total_seconds / queries.len().max(1) as f64,
            total_seconds,
            queries,
        }
    }
}

fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes `report.json`, `accuracy.csv`, `trace/<id>.json` and `timing.json` under `dir`.
pub fn write_evaluation(
    dir: impl AsRef<Path>,
    report: &EvalReport,
    traces: &[QueryTrace],
    timing: Option<&Timing>,
) -> Result<(), PipelineError> {
    let dir = dir.as_ref();
    let trace_dir = dir.join("trace");
    std::fs::create_dir_all(&trace_dir)?;
    write_json(&dir.join("report.json"), report)?;
    let mut csv = csv::Writer::from_path(dir.join("accuracy.csv"))?;
    csv.write_record(["threshold_km", "accuracy"])?;
    for a in &report.accuracy {
        csv.write_record([a.threshold_km.to_string(), format!("{:.6}", a.accuracy)])?;
    }
    csv.flush()?;
    for t in traces {
        write_json(&trace_dir.join(format!("{}.json", file_stem_for(&t.id))), t)?;
    }
    if let Some(timing) = timing {
        write_json(&dir.join("timing.json"), timing)?;
    }
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport, PipelineError> {
    let f = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}

pub fn write_gallery(path: impl AsRef<Path>, gallery: &[GpsCoordinate]) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(File::create(path)?);
    for g in gallery {
        serde_json::to_writer(&mut w, g)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_gallery(path: impl AsRef<Path>) -> Result<Vec<GpsCoordinate>, PipelineError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEval {
    pub accuracy: Vec<ThresholdAccuracy>,
    /// Gallery index predicted for each query.
    pub predictions: Vec<usize>,
    pub distances_km: Vec<f64>,
}

/// Image-to-GPS retrieval: each query takes the gallery point whose location embedding is
/// most cosine-similar to its location-aligned image embedding. Ties go to the earlier point.
pub fn gallery_retrieval_eval<T: Scalar>(
    queries: &[QueryRecord<T>],
    gallery: &[GpsCoordinate],
    encoder: &LocationEncoder<T>,
    heads: &ProjectionHeads<T>,
    thresholds: &DistanceThresholds,
) -> Result<GalleryEval, PipelineError> {
    if gallery.is_empty() {
        return Err(GeoError::EmptyGallery.into());
    }
    if queries.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let embedded: Vec<Vec<T>> = gallery
        .par_iter()
        .map(|&g| encoder.encode(g))
        .collect::<Result<_, _>>()?;
    let results: Vec<(usize, f64)> = queries
        .par_iter()
        .map(|q| {
            let truth = q.truth.ok_or_else(|| PipelineError::MissingTruth(q.id.clone()))?;
            let e = heads.image_location_embedding(&q.visual)?;
            let scores: Vec<f64> = embedded.iter().map(|g| cosine(&e, g).as_f64()).collect();
            let best = argmax_first(&scores).expect("gallery is non-empty");
            Ok((best, geodesic_distance(gallery[best], truth)))
        })
        .collect::<Result<_, PipelineError>>()?;
    let distances_km: Vec<f64> = results.iter().map(|r| r.1).collect();
    let accuracy = thresholds
        .as_slice()
        .iter()
        .zip(accuracy_from_distances(&distances_km, thresholds))
        .map(|(&threshold_km, accuracy)| ThresholdAccuracy { threshold_km, accuracy })
        .collect();
    Ok(GalleryEval {
        accuracy,
        predictions: results.iter().map(|r| r.0).collect(),
        distances_km,
    })
}
