//! Location descriptions to GPS candidates: a Nominatim-style geocoder with a
//! multimodal-model fallback, deduplicated into the candidate set.

use std::collections::HashSet;
use std::sync::LazyLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{http_agent, ClientError, FixtureStore, RateLimiter, RetryPolicy};
use crate::geodesy::GpsCoordinate;
use crate::websearch::{
    render_fallback_prompt, GeneratedLocation, GenerationOptions, LmmClient, LmmRequest,
};

pub const GEOCODE_FIXTURE_KIND: &str = "geocode";

/// Degrees per dedup cell.
pub const DEDUP_RESOLUTION_DEG: f64 = 1e-4;

/// Approximate prompt size of one fallback request.
pub const FALLBACK_PROMPT_TOKENS: u64 = 170;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeocodeError {
    #[error("empty location description")]
    EmptyDescription,
    #[error("could not resolve {description:?}: {reason}")]
    Unresolved { description: String, reason: String },
    #[error("no geocoding candidate survived")]
    NoCandidates,
}

/// One element of a Nominatim search response; coordinates arrive as strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeocoderHit {
    pub lat: String,
    pub lon: String,
    #[serde(default)]
    pub display_name: String,
}

pub trait Geocoder: Send + Sync {
    fn search(&self, query: &str) -> Result<Vec<GeocoderHit>, ClientError>;
}

#[derive(Serialize)]
struct GeocodeRequest<'a> {
    q: &'a str,
}

#[derive(Debug, Clone)]
pub struct ReplayGeocoder {
    store: FixtureStore,
}

impl ReplayGeocoder {
    pub fn new(store: FixtureStore) -> Self {
        Self { store }
    }
}

impl Geocoder for ReplayGeocoder {
    fn search(&self, query: &str) -> Result<Vec<GeocoderHit>, ClientError> {
        self.store.get(GEOCODE_FIXTURE_KIND, &GeocodeRequest { q: query })
    }
}

pub struct RecordingGeocoder<G> {
    inner: G,
    store: FixtureStore,
}

impl<G> RecordingGeocoder<G> {
    pub fn new(inner: G, store: FixtureStore) -> Self {
        Self { inner, store }
    }
}

impl<G: Geocoder> Geocoder for RecordingGeocoder<G> {
    fn search(&self, query: &str) -> Result<Vec<GeocoderHit>, ClientError> {
        let hits = self.inner.search(query)?;
        self.store.put(GEOCODE_FIXTURE_KIND, &GeocodeRequest { q: query }, &hits)?;
        Ok(hits)
    }
}

/// Stores a geocoder response so it replays for `query`.
pub fn record_geocode(store: &FixtureStore, query: &str, hits: &[GeocoderHit]) -> Result<(), ClientError> {
    store.put(GEOCODE_FIXTURE_KIND, &GeocodeRequest { q: query }, &hits)
}

/// Live Nominatim client. Calls are spaced at least one second apart.
pub struct NominatimClient {
    base_url: String,
    user_agent: String,
    agent: ureq::Agent,
    limiter: RateLimiter,
    retry: RetryPolicy,
}

impl NominatimClient {
    pub const DEFAULT_URL: &'static str = "https://nominatim.openstreetmap.org/search";

    pub fn new(base_url: impl Into<String>, user_agent: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            user_agent: user_agent.into(),
            agent: http_agent(Duration::from_secs(30)),
            limiter: RateLimiter::new(Duration::from_secs(1)),
            retry: RetryPolicy::default(),
        }
    }
}

impl Geocoder for NominatimClient {
    fn search(&self, query: &str) -> Result<Vec<GeocoderHit>, ClientError> {
        self.retry.run(|| {
            self.limiter.wait();
            self.agent
                .get(&self.base_url)
                .header("User-Agent", &self.user_agent)
                .query("q", query)
                .query("format", "jsonv2")
                .query("limit", "1")
                .call()?
                .body_mut()
                .read_json::<Vec<GeocoderHit>>()
                .map_err(|e| ClientError::Decode(e.to_string()))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    Geocoder,
    LmmFallback,
    /// Coordinates answered directly by the model, without geocoding.
    Direct,
    /// A closed-world neighbor's coordinates.
    Retrieval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackCost {
    pub estimated_prompt_tokens: u64,
    pub prompt_tokens: u64,
    pub response_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeocodeResult {
    pub coordinate: GpsCoordinate,
    pub source: CandidateSource,
    pub display_name: String,
}

/// Outcome of geocoding one description, with any fallback cost incurred either way.
#[derive(Debug, Clone, PartialEq)]
pub struct GeocodeAttempt {
    pub result: Result<GeocodeResult, GeocodeError>,
    pub fallback: Option<FallbackCost>,
}

static LAT_LON_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*([+-]?\d+(?:\.\d+)?)\s*,\s*([+-]?\d+(?:\.\d+)?)\s*$").unwrap());

/// Parses exactly `lat, lon` in decimal degrees and validates the range.
pub fn parse_lat_lon(text: &str) -> Option<GpsCoordinate> {
    let c = LAT_LON_RE.captures(text)?;
    let lat: f64 = c[1].parse().ok()?;
    let lon: f64 = c[2].parse().ok()?;
    GpsCoordinate::strict(lat, lon).ok()
}

fn first_hit(hits: &[GeocoderHit]) -> Result<GeocodeResult, String> {
    let hit = hits.first().ok_or_else(|| "geocoder returned no hits".to_string())?;
    let lat: f64 = hit.lat.trim().parse().map_err(|_| format!("bad latitude {:?}", hit.lat))?;
    let lon: f64 = hit.lon.trim().parse().map_err(|_| format!("bad longitude {:?}", hit.lon))?;
    let coordinate = GpsCoordinate::strict(lat, lon).map_err(|e| format!("geocoder coordinate rejected: {e}"))?;
    Ok(GeocodeResult {
        coordinate,
        source: CandidateSource::Geocoder,
        display_name: hit.display_name.clone(),
    })
}

/// Resolves a description with the geocoder's first hit, falling back to asking the model for coordinates.
pub fn geocode(
    description: &str,
    geocoder: &dyn Geocoder,
    lmm: &dyn LmmClient,
    opts: &GenerationOptions,
) -> GeocodeAttempt {
    let description = description.trim();
    if description.is_empty() {
        return GeocodeAttempt {
            result: Err(GeocodeError::EmptyDescription),
            fallback: None,
        };
    }
    let geocoder_failure = match geocoder.search(description) {
        Ok(hits) => match first_hit(&hits) {
            Ok(r) => {
                return GeocodeAttempt {
                    result: Ok(r),
                    fallback: None,
                }
            }
            Err(reason) => reason,
        },
        Err(e) => format!("geocoder failed: {e}"),
    };
    log::debug!("geocoder could not resolve {description:?} ({geocoder_failure}); asking the model");

    let req = LmmRequest {
        model: opts.model.clone(),
        text: render_fallback_prompt(description),
        image: None,
        temperature: opts.temperature,
    };
    let unresolved = |reason: String| GeocodeError::Unresolved {
        description: description.to_string(),
        reason,
    };
    match opts.retry.run(|| lmm.generate(&req)) {
        Err(e) => GeocodeAttempt {
            result: Err(unresolved(format!("{geocoder_failure}; fallback failed: {e}"))),
            fallback: None,
        },
        Ok(resp) => {
            let cost = FallbackCost {
                estimated_prompt_tokens: FALLBACK_PROMPT_TOKENS,
                prompt_tokens: resp.prompt_tokens,
                response_tokens: resp.response_tokens,
            };
            let result = match parse_lat_lon(&resp.text) {
                Some(coordinate) => Ok(GeocodeResult {
                    coordinate,
                    source: CandidateSource::LmmFallback,
                    display_name: String::new(),
                }),
                None => Err(unresolved(format!(
                    "{geocoder_failure}; fallback answer {:?} is not \"lat, lon\"",
                    resp.text.trim()
                ))),
            };
            GeocodeAttempt {
                result,
                fallback: Some(cost),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub gps: GpsCoordinate,
    pub variant: usize,
    pub description: String,
    pub source: CandidateSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedCandidate {
    pub variant: usize,
    pub description: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub dropped: Vec<DroppedCandidate>,
    pub fallback_costs: Vec<FallbackCost>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn coordinates(&self) -> Vec<GpsCoordinate> {
        self.candidates.iter().map(|c| c.gps).collect()
    }

    pub fn fallback_tokens(&self) -> u64 {
        self.fallback_costs.iter().map(|c| c.estimated_prompt_tokens).sum()
    }
}

pub fn dedup_key(c: GpsCoordinate) -> (i64, i64) {
    (
        (c.lat() / DEDUP_RESOLUTION_DEG).round() as i64,
        (c.lon() / DEDUP_RESOLUTION_DEG).round() as i64,
    )
}

/// Keeps the first candidate of every dedup cell, preserving order.
pub fn dedup_candidates(candidates: Vec<Candidate>) -> Vec<Candidate> {
    let mut seen = HashSet::new();
    candidates.into_iter().filter(|c| seen.insert(dedup_key(c.gps))).collect()
}

fn finish(set: CandidateSet) -> Result<CandidateSet, (GeocodeError, CandidateSet)> {
    if set.candidates.is_empty() {
        Err((GeocodeError::NoCandidates, set))
    } else {
        Ok(set)
    }
}

/// Geocodes every description in order. On failure the partial set is returned
/// alongside the error so its diagnostics and costs stay auditable.
pub fn assemble_candidates(
    descriptions: &[GeneratedLocation],
    geocoder: &dyn Geocoder,
    lmm: &dyn LmmClient,
    opts: &GenerationOptions,
) -> Result<CandidateSet, (GeocodeError, CandidateSet)> {
    let mut set = CandidateSet::default();
    let mut found = Vec::new();
    for d in descriptions {
        let attempt = geocode(&d.text, geocoder, lmm, opts);
        set.fallback_costs.extend(attempt.fallback);
        match attempt.result {
            Ok(r) => found.push(Candidate {
                gps: r.coordinate,
                variant: d.variant,
                description: d.text.clone(),
                source: r.source,
            }),
            Err(e) => {
                log::warn!("dropping candidate from prompt variant {}: {e}", d.variant);
                set.dropped.push(DroppedCandidate {
                    variant: d.variant,
                    description: d.text.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    set.candidates = dedup_candidates(found);
    finish(set)
}

/// Candidates from answers that are themselves coordinates; used when geocoding is disabled.
pub fn candidates_from_coordinates(
    answers: &[GeneratedLocation],
) -> Result<CandidateSet, (GeocodeError, CandidateSet)> {
    let mut set = CandidateSet::default();
    let mut found = Vec::new();
    for a in answers {
        match parse_lat_lon(&a.text) {
            Some(gps) => found.push(Candidate {
                gps,
                variant: a.variant,
                description: a.text.clone(),
                source: CandidateSource::Direct,
            }),
            None => set.dropped.push(DroppedCandidate {
                variant: a.variant,
                description: a.text.clone(),
                reason: "answer is not \"lat, lon\"".into(),
            }),
        }
    }
    set.candidates = dedup_candidates(found);
    finish(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::websearch::LmmResponse;
    use proptest::prelude::*;
    use std::collections::HashMap;

    struct MapGeocoder(HashMap<&'static str, Vec<GeocoderHit>>);

    impl Geocoder for MapGeocoder {
        fn search(&self, q: &str) -> Result<Vec<GeocoderHit>, ClientError> {
            Ok(self.0.get(q).cloned().unwrap_or_default())
        }
    }

    struct FallbackLmm(&'static str);

    impl LmmClient for FallbackLmm {
        fn generate(&self, _: &LmmRequest) -> Result<LmmResponse, ClientError> {
            Ok(LmmResponse {
                text: self.0.into(),
                prompt_tokens: 170,
                response_tokens: 8,
            })
        }
    }

    fn hit(lat: &str, lon: &str) -> Vec<GeocoderHit> {
        vec![GeocoderHit {
            lat: lat.into(),
            lon: lon.into(),
            display_name: "somewhere".into(),
        }]
    }

    fn gen(items: &[&str]) -> Vec<GeneratedLocation> {
        items
            .iter()
            .enumerate()
            .map(|(i, t)| GeneratedLocation {
                variant: i,
                text: t.to_string(),
            })
            .collect()
    }

    fn opts() -> GenerationOptions {
        GenerationOptions {
            retry: RetryPolicy::none(),
            ..GenerationOptions::default()
        }
    }

    #[test]
    fn parser_accepts_only_lat_lon() {
        let p = parse_lat_lon("35.68, 139.69").unwrap();
        assert_eq!((p.lat(), p.lon()), (35.68, 139.69));
        assert!(parse_lat_lon(" -33.9,18.4 ").is_some());
        for bad in ["unknown", "35.68 139.69", "lat: 35, lon: 139", "95, 10", "10, 190", "35.68, 139.69, 3", ""] {
            assert!(parse_lat_lon(bad).is_none(), "{bad}");
        }
    }

    #[test]
    fn geocoder_hit_wins() {
        let g = MapGeocoder([("Eiffel Tower, Paris", hit("48.8583", "2.2944"))].into());
        let a = geocode("Eiffel Tower, Paris", &g, &FallbackLmm("0, 0"), &opts());
        let r = a.result.unwrap();
        assert_eq!((r.coordinate.lat(), r.coordinate.lon()), (48.8583, 2.2944));
        assert_eq!(r.source, CandidateSource::Geocoder);
        assert!(a.fallback.is_none());
    }

    #[test]
    fn empty_geocoder_response_falls_back() {
        let g = MapGeocoder(HashMap::new());
        let a = geocode("Shinjuku, Tokyo", &g, &FallbackLmm("35.68, 139.69"), &opts());
        let r = a.result.unwrap();
        assert_eq!((r.coordinate.lat(), r.coordinate.lon()), (35.68, 139.69));
        assert_eq!(r.source, CandidateSource::LmmFallback);
        assert_eq!(a.fallback.unwrap().estimated_prompt_tokens, 170);
    }

    #[test]
    fn unparsable_fallback_drops() {
        let g = MapGeocoder(HashMap::new());
        let a = geocode("nowhere", &g, &FallbackLmm("unknown"), &opts());
        assert!(matches!(a.result, Err(GeocodeError::Unresolved { .. })));
        assert!(a.fallback.is_some());
    }

    #[test]
    fn out_of_range_geocoder_hit_rejected_not_clamped() {
        let g = MapGeocoder([("bad", hit("91.0", "10"))].into());
        let a = geocode("bad", &g, &FallbackLmm("unknown"), &opts());
        assert!(a.result.is_err());
    }

    #[test]
    fn dedup_and_order() {
        let g = MapGeocoder(
            [
                ("a", hit("10.00001", "20")),
                ("b", hit("-5", "7")),
                ("c", hit("10.00003", "20.00002")),
                ("d", hit("0", "0")),
            ]
            .into(),
        );
        let set = assemble_candidates(&gen(&["a", "b", "c", "d"]), &g, &FallbackLmm("unknown"), &opts()).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.candidates.iter().map(|c| c.variant).collect::<Vec<_>>(), vec![0, 1, 3]);
    }

    #[test]
    fn all_failures_is_error() {
        let g = MapGeocoder(HashMap::new());
        let (err, partial) = assemble_candidates(&gen(&["x", "y"]), &g, &FallbackLmm("unknown"), &opts()).unwrap_err();
        assert_eq!(err, GeocodeError::NoCandidates);
        assert_eq!(partial.dropped.len(), 2);
        assert_eq!(partial.fallback_tokens(), 340);
    }

    #[test]
    fn direct_answers() {
        let set = candidates_from_coordinates(&gen(&["1.5, 2.5", "no idea", "1.50001, 2.5"])).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.dropped.len(), 1);
        assert_eq!(set.candidates[0].source, CandidateSource::Direct);
    }

    #[test]
    fn replay_geocoder_reads_recordings() {
        let dir = tempfile::tempdir().unwrap();
        let store = FixtureStore::open(dir.path());
        record_geocode(&store, "q", &hit("1", "2")).unwrap();
        let r = ReplayGeocoder::new(store.clone());
        assert_eq!(r.search("q").unwrap(), hit("1", "2"));
        assert!(r.search("other").is_err());
    }

    fn cand(lat: f64, lon: f64, variant: usize) -> Candidate {
        Candidate {
            gps: GpsCoordinate::new(lat, lon).unwrap(),
            variant,
            description: String::new(),
            source: CandidateSource::Geocoder,
        }
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent(pts in proptest::collection::vec((-89.0f64..89.0, -179.0f64..179.0), 0..40)) {
            let c: Vec<Candidate> = pts.iter().enumerate().map(|(i, &(a, b))| cand(a, b, i)).collect();
            let once = dedup_candidates(c);
            let twice = dedup_candidates(once.clone());
            prop_assert_eq!(&once, &twice);
            let keys: HashSet<_> = once.iter().map(|c| dedup_key(c.gps)).collect();
            prop_assert_eq!(keys.len(), once.len());
        }
    }
}
