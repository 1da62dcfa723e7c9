//! Location refinement and the two-layer filter that chooses between the
//! search-augmented prediction and the closed-world baseline.

mod homography;
mod matches;
mod tuning;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{EncoderError, LocationEncoder};
use crate::geocoding::Candidate;
use crate::geodesy::{geodesic_distance, DistanceThresholds, GpsCoordinate};
use crate::scalar::{cosine, Scalar};

pub use homography::{
    estimate_homography_ransac, fit_homography, transfer_error, Correspondence, MatchInput, MatchReport,
    RansacConfig,
};
pub use matches::{read_match_file, MatchRecord};
pub use tuning::{
    tune_thresholds, write_alpha_curve_csv, write_layer1_grid_csv, AlphaPoint, LabeledCase, Layer1Point,
    Layer1Stats, TuningGrid, TuningResult,
};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("homography needs at least 4 correspondences, got {0}")]
    DegenerateInput(usize),
    #[error("every RANSAC sample was degenerate; no homography found")]
    NoModel,
    #[error("non-finite correspondence coordinate")]
    NonFinite,
    #[error("no labeled cases to tune on")]
    EmptyCases,
    #[error("invalid tuning grid: {0}")]
    InvalidGrid(String),
    #[error("match file {path}:{line}: {msg}")]
    MatchFile { path: String, line: usize, msg: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateThresholds {
    /// Reprojection error bound for RANSAC inliers, in pixels.
    pub tau_r: f64,
    /// Minimum match count.
    pub tau_m: usize,
    /// Minimum inlier ratio.
    pub tau_in: f64,
    /// Minimum candidate cosine score.
    pub alpha: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        Self {
            tau_r: 4.0,
            tau_m: 50,
            tau_in: 0.5,
            alpha: 0.21,
        }
    }
}

impl GateThresholds {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau_r.is_finite() && self.tau_r >= 0.0) {
            return Err(format!("tau_r must be a non-negative number, got {}", self.tau_r));
        }
        if !(0.0..=1.0).contains(&self.tau_in) {
            return Err(format!("tau_in must lie in [0, 1], got {}", self.tau_in));
        }
        if !(self.alpha.is_finite() && (-1.0..=1.0).contains(&self.alpha)) {
            return Err(format!("alpha must lie in [-1, 1], got {}", self.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate: Candidate,
    pub index: usize,
    pub score: f64,
}

/// Cosine score of every candidate's location embedding against the query's.
pub fn score_candidates<T: Scalar>(
    query_img_loc: &[T],
    candidates: &[Candidate],
    encoder: &LocationEncoder<T>,
) -> Result<Vec<f64>, RefineError> {
    candidates
        .iter()
        .map(|c| Ok(cosine(query_img_loc, &encoder.encode(c.gps)?).as_f64()))
        .collect()
}

/// Index of the largest score; the earliest wins ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b].partial_cmp(&s) != Some(Ordering::Less) => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn rank_candidates<T: Scalar>(
    query_img_loc: &[T],
    candidates: &[Candidate],
    encoder: &LocationEncoder<T>,
) -> Result<ScoredCandidate, RefineError> {
    let scores = score_candidates(query_img_loc, candidates, encoder)?;
    let index = argmax_first(&scores).ok_or(RefineError::EmptyCandidates)?;
    Ok(ScoredCandidate {
        candidate: candidates[index].clone(),
        index,
        score: scores[index],
    })
}

/// Geometric verification: passes only with a report meeting both the count and ratio bounds.
pub fn layer1_verify(report: Option<&Layer1Stats>, t: &GateThresholds) -> bool {
    report.is_some_and(|r| r.m >= t.tau_m && r.rho >= t.tau_in)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Search,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecidingLayer {
    Layer1,
    Layer2,
    /// No filter ran: baseline-only runs, empty candidate sets, or both layers disabled.
    Bypass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub chosen: Choice,
    pub layer: DecidingLayer,
    pub gps: GpsCoordinate,
}

pub fn layer2_gate(sigma: f64, alpha: f64, p_search: GpsCoordinate, p_base: GpsCoordinate) -> Decision {
    if sigma >= alpha {
        Decision {
            chosen: Choice::Search,
            layer: DecidingLayer::Layer2,
            gps: p_search,
        }
    } else {
        Decision {
            chosen: Choice::Baseline,
            layer: DecidingLayer::Layer2,
            gps: p_base,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterFlags {
    pub no_layer1: bool,
    pub no_layer2: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionInput {
    pub layer1_pass: bool,
    pub sigma: f64,
    pub p_search: GpsCoordinate,
    pub p_base: GpsCoordinate,
}

/// Two-layer filter. A disabled Layer 2 sends Layer-1 failures to the baseline;
/// with both layers disabled the search prediction is taken unconditionally.
pub fn decide(input: &DecisionInput, t: &GateThresholds, flags: FilterFlags) -> Decision {
    let search = |layer| Decision {
        chosen: Choice::Search,
        layer,
        gps: input.p_search,
    };
    match (flags.no_layer1, flags.no_layer2) {
        (true, true) => search(DecidingLayer::Bypass),
        (false, _) if input.layer1_pass => search(DecidingLayer::Layer1),
        (false, true) => Decision {
            chosen: Choice::Baseline,
            layer: DecidingLayer::Layer1,
            gps: input.p_base,
        },
        _ => layer2_gate(input.sigma, t.alpha, input.p_search, input.p_base),
    }
}

pub fn baseline_decision(p_base: GpsCoordinate) -> Decision {
    Decision {
        chosen: Choice::Baseline,
        layer: DecidingLayer::Bypass,
        gps: p_base,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    SearchPreferred,
    BaselinePreferred,
}

/// Search is preferred when its threshold hits beat the baseline's, finest threshold first,
/// or tie there with a strictly smaller error.
pub fn label_preference(
    p_search: GpsCoordinate,
    p_base: GpsCoordinate,
    truth: GpsCoordinate,
    thresholds: &DistanceThresholds,
) -> Preference {
    let ds = geodesic_distance(p_search, truth);
    let db = geodesic_distance(p_base, truth);
    match thresholds.hits(ds).cmp(&thresholds.hits(db)) {
        Ordering::Greater => Preference::SearchPreferred,
        Ordering::Equal if ds < db => Preference::SearchPreferred,
        _ => Preference::BaselinePreferred,
    }
}
