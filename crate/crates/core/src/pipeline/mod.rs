//! End-to-end inference: closed-world retrieval, open-world search, prompt
//! generation, geocoding, refinement and the two-layer filter, with an audit
//! trace per query and an evaluation harness.

mod config;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clients::FixtureStore;
use crate::encoders::{load_weights, EncoderError, LocationEncoder, ProjectionHeads};
use crate::geocoding::{
    assemble_candidates, candidates_from_coordinates, dedup_candidates, Candidate, CandidateSet, CandidateSource,
    Geocoder, NominatimClient, RecordingGeocoder, ReplayGeocoder,
};
use crate::geodesy::{geodesic_distance, DistanceThresholds, GeoError, GpsCoordinate};
use crate::refine::{
    argmax_first, baseline_decision, decide, estimate_homography_ransac, label_preference, layer1_verify,
    read_match_file, score_candidates, Choice, Decision, DecidingLayer, DecisionInput, LabeledCase, Layer1Stats,
    MatchReport, RansacConfig, RefineError,
};
use crate::retrieval::features::read_feature_rows;
use crate::retrieval::{load_database, Database, NeighborResult, RetrievalError};
use crate::scalar::Scalar;
use crate::websearch::{
    build_prompts, extract_contexts, first_link_image, generate_locations, GeminiClient, Generation,
    ImageSource, LensSearchClient, LmmClient, OutputKind, PromptMode, RecordingLmm, RecordingReverseSearch,
    RenderedPrompt, ReplayLmm, ReplayReverseSearch, ReverseImageSearch, ReverseSearchRequest, SearchHit,
    WebContext, WebSearchError,
};

pub use config::{AblationFlags, ClientMode, ClientsConfig, PipelineConfig, PipelinePaths, RansacSettings};
pub use report::{
    gallery_retrieval_eval, read_gallery, read_report, write_evaluation, write_gallery, EvalReport, GalleryEval,
    QueryRow, ThresholdAccuracy, Timing, TokenTotals,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("query {0:?} has no ground-truth coordinates")]
    MissingTruth(String),
    #[error("query {id:?}: visual feature has {got} values, expected {expected}")]
    QueryDimension { id: String, expected: usize, got: usize },
    #[error("weights and database disagree on dimensions ({weights:?} vs {database:?})")]
    ArtifactMismatch { weights: (usize, usize), database: (usize, usize) },
    #[error("baseline file {path}:{line}: {msg}")]
    Baselines { path: String, line: usize, msg: String },
    #[error("missing credential: set {0}")]
    MissingCredential(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    WebSearch(#[from] WebSearchError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// A photo to geolocate.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord<T> {
    pub id: String,
    pub visual: Vec<T>,
    pub truth: Option<GpsCoordinate>,
    pub image_ref: String,
    pub matches: Option<PathBuf>,
}

/// Loads queries from a feature-set stem. Relative match references resolve against
/// `match_dir`, or the feature set's directory when none is given.
pub fn load_queries<T: Scalar>(
    stem: impl AsRef<Path>,
    match_dir: Option<&Path>,
) -> Result<Vec<QueryRecord<T>>, PipelineError> {
    let stem = stem.as_ref();
    let base = match_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| stem.parent().unwrap_or(Path::new(".")).to_path_buf());
    let (_, rows) = read_feature_rows::<T>(stem)?;
    Ok(rows
        .into_iter()
        .map(|r| QueryRecord {
            image_ref: r.image.unwrap_or_else(|| r.id.clone()),
            matches: r.matches.map(|m| base.join(m)),
            id: r.id,
            visual: r.visual,
            truth: r.gps,
        })
        .collect())
}

/// The three external services the pipeline talks to.
#[derive(Clone, Copy)]
pub struct Clients<'a> {
    pub search: &'a dyn ReverseImageSearch,
    pub lmm: &'a dyn LmmClient,
    pub geocoder: &'a dyn Geocoder,
}

/// Owned client implementations chosen by configuration.
pub struct ClientSet {
    pub search: Box<dyn ReverseImageSearch>,
    pub lmm: Box<dyn LmmClient>,
    pub geocoder: Box<dyn Geocoder>,
}

impl ClientSet {
    pub fn replay(fixtures: impl Into<PathBuf>) -> Self {
        let store = FixtureStore::open(fixtures);
        Self {
            search: Box::new(ReplayReverseSearch::new(store.clone())),
            lmm: Box::new(ReplayLmm::new(store.clone())),
            geocoder: Box::new(ReplayGeocoder::new(store)),
        }
    }

    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let c = &cfg.clients;
        let fixtures = || {
            cfg.paths
                .fixtures
                .clone()
                .ok_or_else(|| PipelineError::Config("paths.fixtures: required for fixture replay or recording".into()))
        };
        if c.mode == ClientMode::Replay {
            return Ok(Self::replay(fixtures()?));
        }
        let key = |var: &str| std::env::var(var).map_err(|_| PipelineError::MissingCredential(var.to_string()));
        let lmm = GeminiClient::new(&c.gemini_endpoint, key(&c.gemini_key_env)?);
        let search = LensSearchClient::new(&c.lens_endpoint, key(&c.lens_key_env)?, c.lens_max_hits);
        let geocoder = NominatimClient::new(&c.nominatim_url, &c.user_agent);
        if c.mode == ClientMode::Record {
            let store = FixtureStore::open(fixtures()?);
            return Ok(Self {
                search: Box::new(RecordingReverseSearch::new(search, store.clone())),
                lmm: Box::new(RecordingLmm::new(lmm, store.clone())),
                geocoder: Box::new(RecordingGeocoder::new(geocoder, store)),
            });
        }
        Ok(Self {
            search: Box::new(search),
            lmm: Box::new(lmm),
            geocoder: Box::new(geocoder),
        })
    }

    pub fn as_clients(&self) -> Clients<'_> {
        Clients {
            search: self.search.as_ref(),
            lmm: self.lmm.as_ref(),
            geocoder: self.geocoder.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineSource {
    Imported,
    Pipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTrace {
    pub source: BaselineSource,
    pub prompts: Vec<RenderedPrompt>,
    pub generation: Option<Generation>,
    pub candidates: Vec<Candidate>,
    pub scores: Vec<f64>,
    pub prediction: GpsCoordinate,
    /// Estimated prompt tokens of geocoding fallbacks on this path.
    pub fallback_tokens: u64,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer1Trace {
    pub link_image_ref: Option<String>,
    pub report: Option<MatchReport>,
    pub error: Option<String>,
    pub pass: bool,
}

impl Layer1Trace {
    pub fn stats(&self) -> Option<Layer1Stats> {
        self.report.as_ref().map(MatchReport::stats)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub hits: Vec<SearchHit>,
    pub contexts: Vec<WebContext>,
    pub prompts: Vec<RenderedPrompt>,
    pub generation: Option<Generation>,
    pub candidates: Option<CandidateSet>,
    pub scores: Vec<f64>,
    pub p_search: Option<Candidate>,
    pub sigma: Option<f64>,
    pub layer1: Option<Layer1Trace>,
}

/// Everything one query saw and decided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub id: String,
    pub image_ref: String,
    pub truth: Option<GpsCoordinate>,
    pub neighbors: NeighborResult,
    pub baseline: BaselineTrace,
    pub search: Option<SearchTrace>,
    pub decision: Decision,
    pub failure: Option<String>,
}

impl QueryTrace {
    pub fn p_base(&self) -> GpsCoordinate {
        self.baseline.prediction
    }

    pub fn p_search(&self) -> Option<GpsCoordinate> {
        self.search.as_ref().and_then(|s| s.p_search.as_ref()).map(|c| c.gps)
    }

    pub fn sigma(&self) -> Option<f64> {
        self.search.as_ref().and_then(|s| s.sigma)
    }

    pub fn layer1_stats(&self) -> Option<Layer1Stats> {
        self.search.as_ref().and_then(|s| s.layer1.as_ref()).and_then(Layer1Trace::stats)
    }

    pub fn generations(&self) -> impl Iterator<Item = &Generation> {
        self.baseline
            .generation
            .iter()
            .chain(self.search.as_ref().and_then(|s| s.generation.as_ref()))
    }

    pub fn fallback_estimated_tokens(&self) -> u64 {
        self.search
            .as_ref()
            .and_then(|s| s.candidates.as_ref())
            .map_or(0, CandidateSet::fallback_tokens)
            + self.baseline.fallback_tokens
    }
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub trace: QueryTrace,
    pub seconds: f64,
}

/// Loaded artifacts plus configuration.
pub struct Pipeline<T> {
    pub config: PipelineConfig,
    pub encoder: LocationEncoder<T>,
    pub heads: ProjectionHeads<T>,
    pub database: Database,
    pub baselines: BTreeMap<String, GpsCoordinate>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BaselineLine {
    id: String,
    lat: f64,
    lon: f64,
}

pub fn read_baselines(path: impl AsRef<Path>) -> Result<BTreeMap<String, GpsCoordinate>, PipelineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| PipelineError::Baselines {
            path: path.display().to_string(),
            line: n + 1,
            msg,
        };
        let b: BaselineLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let gps = GpsCoordinate::strict(b.lat, b.lon).map_err(|e| err(e.to_string()))?;
        out.insert(b.id, gps);
    }
    Ok(out)
}

/// Stable per-query RANSAC seed.
fn query_seed(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

impl<T: Scalar> Pipeline<T> {
    pub fn new(
        config: PipelineConfig,
        encoder: LocationEncoder<T>,
        heads: ProjectionHeads<T>,
        database: Database,
    ) -> Result<Self, PipelineError> {
        config.validate_values()?;
        let weights = (heads.visual_dim(), heads.embed_dim());
        let db = (database.visual_dim(), database.embed_dim());
        if weights != db {
            return Err(PipelineError::ArtifactMismatch { weights, database: db });
        }
        if database.is_empty() {
            return Err(RetrievalError::EmptyDatabase.into());
        }
        Ok(Self {
            config,
            encoder,
            heads,
            database,
            baselines: BTreeMap::new(),
        })
    }

    /// Loads weights, database and optional imported baselines named by `config`.
    pub fn load(config: PipelineConfig) -> Result<Self, PipelineError> {
        let (encoder, heads) = load_weights::<T>(&config.paths.weights)?;
        let database = load_database(&config.paths.database)?;
        let baselines = match &config.paths.baselines {
            Some(p) => read_baselines(p)?,
            None => BTreeMap::new(),
        };
        let mut p = Self::new(config, encoder, heads, database)?;
        p.baselines = baselines;
        Ok(p)
    }

    fn neighbor_candidates(neighbors: &NeighborResult) -> Vec<Candidate> {
        neighbors
            .nearest
            .iter()
            .map(|n| Candidate {
                gps: n.gps,
                variant: 0,
                description: n.id.clone(),
                source: CandidateSource::Retrieval,
            })
            .collect()
    }

    fn generated_candidates(
        &self,
        prompts: &[RenderedPrompt],
        generation: &Generation,
        clients: Clients<'_>,
    ) -> (Option<CandidateSet>, Option<String>) {
        let assembled = match prompts.first().map(|p| p.output) {
            Some(OutputKind::Coordinates) => candidates_from_coordinates(&generation.locations),
            _ => assemble_candidates(&generation.locations, clients.geocoder, clients.lmm, &self.config.generation),
        };
        match assembled {
            Ok(set) => (Some(set), None),
            Err((e, partial)) => (Some(partial), Some(e.to_string())),
        }
    }

    /// The closed-world prediction: the best of the model's no-web answers and the
    /// retrieved neighbors' coordinates, unless an imported baseline exists.
    fn baseline(
        &self,
        id: &str,
        e_img_loc: &[T],
        neighbors: &NeighborResult,
        clients: Clients<'_>,
        image: &str,
    ) -> Result<BaselineTrace, PipelineError> {
        if let Some(&p) = self.baselines.get(id) {
            return Ok(BaselineTrace {
                source: BaselineSource::Imported,
                prompts: Vec::new(),
                generation: None,
                candidates: Vec::new(),
                scores: Vec::new(),
                prediction: p,
                fallback_tokens: 0,
                notes: Vec::new(),
            });
        }
        let mut notes = Vec::new();
        let mode = PromptMode {
            output: if self.config.ablations.no_geocoding {
                OutputKind::Coordinates
            } else {
                OutputKind::Description
            },
            ..PromptMode::baseline()
        };
        let prompts = build_prompts(neighbors, &[], &self.config.prompts, mode)?;
        let mut pool = Vec::new();
        let mut fallback_tokens = 0;
        let generation = match generate_locations(&prompts, Some(image), clients.lmm, &self.config.generation) {
            Ok(g) => {
                let (set, err) = self.generated_candidates(&prompts, &g, clients);
                if let Some(set) = set {
                    fallback_tokens = set.fallback_tokens();
                    pool.extend(set.candidates);
                }
                notes.extend(err);
                Some(g)
            }
            Err(e) => {
                notes.push(format!("baseline generation failed: {e}"));
                None
            }
        };
        pool.extend(Self::neighbor_candidates(neighbors));
        let candidates = dedup_candidates(pool);
        let scores = score_candidates(e_img_loc, &candidates, &self.encoder)?;
        let best = argmax_first(&scores).ok_or(RefineError::EmptyCandidates)?;
        Ok(BaselineTrace {
            source: BaselineSource::Pipeline,
            prompts,
            generation,
            prediction: candidates[best].gps,
            candidates,
            scores,
            fallback_tokens,
            notes,
        })
    }

    fn layer1(&self, query: &QueryRecord<T>, hits: &[SearchHit]) -> Layer1Trace {
        let t = &self.config.thresholds;
        let mut trace = Layer1Trace {
            link_image_ref: None,
            report: None,
            error: None,
            pass: false,
        };
        let Some(link) = first_link_image(hits) else {
            trace.error = Some("no search hit links a matched image".into());
            return trace;
        };
        let link_ref = link.link_image_ref.clone().unwrap_or_default();
        trace.link_image_ref = Some(link_ref.clone());
        let Some(path) = &query.matches else {
            trace.error = Some("query has no match file".into());
            return trace;
        };
        let records = match read_match_file(path) {
            Ok(r) => r,
            Err(e) => {
                trace.error = Some(e.to_string());
                return trace;
            }
        };
        let Some(rec) = records.iter().find(|r| r.query_id == query.id && r.link_image_ref == link_ref) else {
            trace.error = Some(format!("no matches recorded for linked image {link_ref}"));
            return trace;
        };
        let input = match rec.to_input() {
            Ok(i) => i,
            Err(e) => {
                trace.error = Some(e);
                return trace;
            }
        };
        let cfg = RansacConfig {
            tau_r: t.tau_r,
            max_iters: self.config.ransac.max_iters,
            confidence: self.config.ransac.confidence,
            seed: query_seed(self.config.seed, &query.id),
        };
        match estimate_homography_ransac(&input, &cfg) {
            Ok(report) => {
                trace.pass = layer1_verify(Some(&report.stats()), t);
                trace.report = Some(report);
            }
            Err(e) => trace.error = Some(e.to_string()),
        }
        trace
    }

    /// Runs the full flow for one query. Client failures on the search path are recorded
    /// and the query falls back to the baseline prediction.
    pub fn infer(&self, query: &QueryRecord<T>, clients: Clients<'_>) -> Result<QueryOutcome, PipelineError> {
        let start = Instant::now();
        let d_v = self.heads.visual_dim();
        if query.visual.len() != d_v {
            return Err(PipelineError::QueryDimension {
                id: query.id.clone(),
                expected: d_v,
                got: query.visual.len(),
            });
        }
        let (_, e_img_loc) = self.heads.project_image(&query.visual)?;
        let k = self.config.retrieval_k.min(self.database.len());
        let neighbors = self.database.query_neighbors(&query.visual, k)?;
        let baseline = self.baseline(&query.id, &e_img_loc, &neighbors, clients, &query.image_ref)?;
        let p_base = baseline.prediction;

        let mut trace = QueryTrace {
            id: query.id.clone(),
            image_ref: query.image_ref.clone(),
            truth: query.truth,
            neighbors,
            baseline,
            search: None,
            decision: baseline_decision(p_base),
            failure: None,
        };
        if !self.config.ablations.baseline_only {
            let (search, decision, failure) = self.search_path(query, &e_img_loc, &trace.neighbors, p_base, clients)?;
            trace.search = Some(search);
            trace.decision = decision;
            trace.failure = failure;
        }
        Ok(QueryOutcome {
            trace,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn search_path(
        &self,
        query: &QueryRecord<T>,
        e_img_loc: &[T],
        neighbors: &NeighborResult,
        p_base: GpsCoordinate,
        clients: Clients<'_>,
    ) -> Result<(SearchTrace, Decision, Option<String>), PipelineError> {
        let cfg = &self.config;
        let mut s = SearchTrace {
            hits: Vec::new(),
            contexts: Vec::new(),
            prompts: Vec::new(),
            generation: None,
            candidates: None,
            scores: Vec::new(),
            p_search: None,
            sigma: None,
            layer1: None,
        };
        let fallback = baseline_decision(p_base);
        let fail = |s: SearchTrace, e: &dyn std::fmt::Display| Ok((s, fallback, Some(e.to_string())));

        let req = ReverseSearchRequest {
            image: ImageSource::parse(&query.image_ref),
        };
        match cfg.generation.retry.run(|| clients.search.search(&req)) {
            Ok(hits) => s.hits = hits,
            Err(e) => return fail(s, &format!("reverse image search failed: {e}")),
        }
        for h in &s.hits {
            if let Err(e) = h.validate() {
                return fail(s, &e);
            }
        }
        s.contexts = extract_contexts(&s.hits, cfg.prompts.m);
        let mode = PromptMode {
            coordinates: !cfg.ablations.no_closed_world,
            contexts: true,
            output: if cfg.ablations.no_geocoding {
                OutputKind::Coordinates
            } else {
                OutputKind::Description
            },
        };
        s.prompts = build_prompts(neighbors, &s.contexts, &cfg.prompts, mode)?;
        let generation = match generate_locations(&s.prompts, Some(&query.image_ref), clients.lmm, &cfg.generation) {
            Ok(g) => g,
            Err(e) => return fail(s, &format!("location generation failed: {e}")),
        };
        let (set, err) = self.generated_candidates(&s.prompts, &generation, clients);
        s.generation = Some(generation);
        s.candidates = set;
        if let Some(e) = err {
            log::info!("query {}: {e}; using the baseline", query.id);
            return Ok((s, fallback, None));
        }
        let candidates = &s.candidates.as_ref().expect("set present on success").candidates;
        s.scores = score_candidates(e_img_loc, candidates, &self.encoder)?;
        let best = argmax_first(&s.scores).ok_or(RefineError::EmptyCandidates)?;
        let p_search = candidates[best].clone();
        let sigma = s.scores[best];

        let layer1 = if cfg.ablations.no_layer1 {
            None
        } else {
            Some(self.layer1(query, &s.hits))
        };
        let decision = decide(
            &DecisionInput {
                layer1_pass: layer1.as_ref().is_some_and(|l| l.pass),
                sigma,
                p_search: p_search.gps,
                p_base,
            },
            &cfg.thresholds,
            cfg.ablations.filter_flags(),
        );
        s.p_search = Some(p_search);
        s.sigma = Some(sigma);
        s.layer1 = layer1;
        Ok((s, decision, None))
    }

    /// Runs every query with bounded parallelism and aggregates the report. Output order is by query id.
    pub fn evaluate(
        &self,
        queries: &[QueryRecord<T>],
        clients: Clients<'_>,
    ) -> Result<(EvalReport, Vec<QueryTrace>, Timing), PipelineError> {
        if queries.is_empty() {
            return Err(PipelineError::EmptyDataset);
        }
        if let Some(q) = queries.iter().find(|q| q.truth.is_none()) {
            return Err(PipelineError::MissingTruth(q.id.clone()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.parallelism)
            .build()
            .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
        let mut outcomes = pool.install(|| {
            queries
                .par_iter()
                .map(|q| self.infer(q, clients))
                .collect::<Result<Vec<_>, _>>()
        })?;
        outcomes.sort_by(|a, b| a.trace.id.cmp(&b.trace.id));
        let timing = Timing::from_outcomes(&outcomes);
        let traces: Vec<QueryTrace> = outcomes.into_iter().map(|o| o.trace).collect();
        let report = EvalReport::from_traces(&traces, &self.config.distance_thresholds_km)?;
        Ok((report, traces, timing))
    }
}

/// Distance from a decision to the truth, if known.
pub fn decision_error_km(trace: &QueryTrace) -> Option<f64> {
    trace.truth.map(|t| geodesic_distance(trace.decision.gps, t))
}

/// Tuning cases from report rows that reached a scored search prediction. Rows without one
/// (search failures, empty candidate sets, baseline-only runs) are skipped.
pub fn labeled_cases(rows: &[QueryRow], thresholds: &DistanceThresholds) -> Vec<LabeledCase> {
    rows.iter()
        .filter_map(|r| {
            Some(LabeledCase {
                layer1: r.layer1,
                sigma: r.sigma?,
                preference: label_preference(r.p_search?, r.p_base, r.truth, thresholds),
            })
        })
        .collect()
}

pub fn choice_counts(traces: &[QueryTrace]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for t in traces {
        let key = match (t.decision.chosen, t.decision.layer) {
            (Choice::Search, DecidingLayer::Layer1) => "search_layer1",
            (Choice::Search, DecidingLayer::Layer2) => "search_layer2",
            (Choice::Search, DecidingLayer::Bypass) => "search_unfiltered",
            (Choice::Baseline, DecidingLayer::Bypass) => "baseline_bypass",
            (Choice::Baseline, _) => "baseline_filtered",
        };
        *m.entry(key.to_string()).or_insert(0) += 1;
    }
    m
}
