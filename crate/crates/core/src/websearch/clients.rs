use std::path::Path;
use std::sync::LazyLock;
use std::time::Duration;

use base64::Engine as _;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::SearchHit;
use crate::clients::{http_agent, ClientError, FixtureStore};

pub const LMM_FIXTURE_KIND: &str = "lmm";
pub const SEARCH_FIXTURE_KIND: &str = "reverse_search";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmRequest {
    pub model: String,
    pub text: String,
    /// Path or URL of the attached image.
    pub image: Option<String>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmmResponse {
    pub text: String,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub response_tokens: u64,
}

pub trait LmmClient: Send + Sync {
    fn generate(&self, request: &LmmRequest) -> Result<LmmResponse, ClientError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Url(String),
    Path(String),
}

impl ImageSource {
    pub fn parse(reference: &str) -> Self {
        if reference.starts_with("http://") || reference.starts_with("https://") {
            ImageSource::Url(reference.to_string())
        } else {
            ImageSource::Path(reference.to_string())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReverseSearchRequest {
    pub image: ImageSource,
}

pub trait ReverseImageSearch: Send + Sync {
    fn search(&self, request: &ReverseSearchRequest) -> Result<Vec<SearchHit>, ClientError>;
}

/// Answers from recorded fixtures; a request without a recording is an error.
#[derive(Debug, Clone)]
pub struct ReplayLmm {
    store: FixtureStore,
}

impl ReplayLmm {
    pub fn new(store: FixtureStore) -> Self {
        Self { store }
    }
}

impl LmmClient for ReplayLmm {
    fn generate(&self, request: &LmmRequest) -> Result<LmmResponse, ClientError> {
        self.store.get(LMM_FIXTURE_KIND, request)
    }
}

/// Forwards to `inner` and records every successful exchange.
pub struct RecordingLmm<C> {
    inner: C,
    store: FixtureStore,
}

impl<C> RecordingLmm<C> {
    pub fn new(inner: C, store: FixtureStore) -> Self {
        Self { inner, store }
    }
}

impl<C: LmmClient> LmmClient for RecordingLmm<C> {
    fn generate(&self, request: &LmmRequest) -> Result<LmmResponse, ClientError> {
        let resp = self.inner.generate(request)?;
        self.store.put(LMM_FIXTURE_KIND, request, &resp)?;
        Ok(resp)
    }
}

#[derive(Debug, Clone)]
pub struct ReplayReverseSearch {
    store: FixtureStore,
}

impl ReplayReverseSearch {
    pub fn new(store: FixtureStore) -> Self {
        Self { store }
    }
}

impl ReverseImageSearch for ReplayReverseSearch {
    fn search(&self, request: &ReverseSearchRequest) -> Result<Vec<SearchHit>, ClientError> {
        self.store.get(SEARCH_FIXTURE_KIND, request)
    }
}

pub struct RecordingReverseSearch<C> {
    inner: C,
    store: FixtureStore,
}

impl<C> RecordingReverseSearch<C> {
    pub fn new(inner: C, store: FixtureStore) -> Self {
        Self { inner, store }
    }
}

impl<C: ReverseImageSearch> ReverseImageSearch for RecordingReverseSearch<C> {
    fn search(&self, request: &ReverseSearchRequest) -> Result<Vec<SearchHit>, ClientError> {
        let hits = self.inner.search(request)?;
        self.store.put(SEARCH_FIXTURE_KIND, request, &hits)?;
        Ok(hits)
    }
}

fn mime_for(reference: &str) -> &'static str {
    let lower = reference.to_ascii_lowercase();
    if lower.ends_with(".png") {
        "image/png"
    } else if lower.ends_with(".webp") {
        "image/webp"
    } else {
        "image/jpeg"
    }
}

fn read_image(agent: &ureq::Agent, reference: &str) -> Result<Vec<u8>, ClientError> {
    match ImageSource::parse(reference) {
        ImageSource::Url(url) => {
            let mut resp = agent.get(&url).call()?;
            resp.body_mut()
                .with_config()
                .limit(20 * 1024 * 1024)
                .read_to_vec()
                .map_err(ClientError::from)
        }
        ImageSource::Path(p) => {
            std::fs::read(Path::new(&p)).map_err(|e| ClientError::Transport(format!("reading image {p}: {e}")))
        }
    }
}

/// Live adapter for the Gemini `generateContent` REST endpoint.
pub struct GeminiClient {
    endpoint: String,
    api_key: String,
    agent: ureq::Agent,
}

impl GeminiClient {
    pub const DEFAULT_ENDPOINT: &'static str = "https://generativelanguage.googleapis.com/v1beta";

    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            agent: http_agent(Duration::from_secs(120)),
        }
    }
}

impl LmmClient for GeminiClient {
    fn generate(&self, request: &LmmRequest) -> Result<LmmResponse, ClientError> {
        let mut parts = vec![json!({ "text": request.text })];
        if let Some(image) = &request.image {
            let bytes = read_image(&self.agent, image)?;
            parts.push(json!({
                "inline_data": {
                    "mime_type": mime_for(image),
                    "data": base64::engine::general_purpose::STANDARD.encode(bytes),
                }
            }));
        }
        let body = json!({
            "contents": [{ "role": "user", "parts": parts }],
            "generationConfig": { "temperature": request.temperature },
        });
        let url = format!("{}/models/{}:generateContent", self.endpoint, request.model);
        let v: Value = self
            .agent
            .post(&url)
            .header("x-goog-api-key", &self.api_key)
            .send_json(&body)?
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Decode(e.to_string()))?;

        let text = v["candidates"][0]["content"]["parts"]
            .as_array()
            .map(|parts| parts.iter().filter_map(|p| p["text"].as_str()).collect::<String>())
            .unwrap_or_default();
        Ok(LmmResponse {
            text,
            prompt_tokens: v["usageMetadata"]["promptTokenCount"].as_u64().unwrap_or(0),
            response_tokens: v["usageMetadata"]["candidatesTokenCount"].as_u64().unwrap_or(0),
        })
    }
}

static SCRIPT_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)<(script|style|noscript)\b.*?</(script|style|noscript)\s*>").unwrap());
static BLOCK_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)</?(p|div|br|li|h[1-6]|tr|section|article)\b[^>]*>").unwrap());
static TAG_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)<[^>]*>").unwrap());
static SPACE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[ \t\r\f\v]+").unwrap());
static BLANK_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\n\s*\n+").unwrap());

/// Plain-text rendering of an HTML page: drops scripts and tags, decodes common entities.
pub fn html_to_text(html: &str) -> String {
    let s = SCRIPT_RE.replace_all(html, " ");
    let s = BLOCK_RE.replace_all(&s, "\n");
    let s = TAG_RE.replace_all(&s, " ");
    let s = s
        .replace("&nbsp;", " ")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&amp;", "&");
    let s = SPACE_RE.replace_all(&s, " ");
    let s = BLANK_RE.replace_all(&s, "\n");
    s.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("\n")
}

/// Live reverse image search through a SerpAPI-compatible Google Lens endpoint.
/// Page text is fetched from each hit's URL.
pub struct LensSearchClient {
    endpoint: String,
    api_key: String,
    max_hits: usize,
    agent: ureq::Agent,
}

impl LensSearchClient {
    pub const DEFAULT_ENDPOINT: &'static str = "https://serpapi.com/search.json";

    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>, max_hits: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            max_hits,
            agent: http_agent(Duration::from_secs(30)),
        }
    }

    fn page_text(&self, url: &str) -> String {
        let fetched = self.agent.get(url).call().map_err(ClientError::from).and_then(|mut r| {
            r.body_mut()
                .with_config()
                .limit(5 * 1024 * 1024)
                .read_to_string()
                .map_err(ClientError::from)
        });
        match fetched {
            Ok(html) => html_to_text(&html),
            Err(e) => {
                log::warn!("could not fetch {url}: {e}");
                String::new()
            }
        }
    }
}

impl ReverseImageSearch for LensSearchClient {
    fn search(&self, request: &ReverseSearchRequest) -> Result<Vec<SearchHit>, ClientError> {
        let ImageSource::Url(image_url) = &request.image else {
            return Err(ClientError::Transport(
                "the Lens endpoint needs a publicly reachable image URL".into(),
            ));
        };
        let v: Value = self
            .agent
            .get(&self.endpoint)
            .query("engine", "google_lens")
            .query("url", image_url)
            .query("api_key", &self.api_key)
            .call()?
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Decode(e.to_string()))?;
        let matches = v["visual_matches"].as_array().cloned().unwrap_or_default();
        Ok(matches
            .iter()
            .filter_map(|m| {
                let url = m["link"].as_str()?.to_string();
                Some((url, m))
            })
            .take(self.max_hits)
            .enumerate()
            .map(|(rank, (url, m))| SearchHit {
                rank,
                raw_text: self.page_text(&url),
                page_url: url,
                title: m["title"].as_str().unwrap_or_default().to_string(),
                link_image_ref: m["image"].as_str().or_else(|| m["thumbnail"].as_str()).map(str::to_string),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn html_reduced_to_text() {
        let html = "<html><head><style>p{}</style><script>var x=1;</script></head>\
                    <body><h1>Tour Eiffel</h1><p>Champ de Mars &amp; 7e</p><div>  Paris </div></body></html>";
        assert_eq!(html_to_text(html), "Tour Eiffel\nChamp de Mars & 7e\nParis");
    }

    #[test]
    fn image_source_by_scheme() {
        assert_eq!(ImageSource::parse("https://x/y.jpg"), ImageSource::Url("https://x/y.jpg".into()));
        assert_eq!(ImageSource::parse("imgs/q.jpg"), ImageSource::Path("imgs/q.jpg".into()));
    }

    struct Fixed;

    impl LmmClient for Fixed {
        fn generate(&self, r: &LmmRequest) -> Result<LmmResponse, ClientError> {
            Ok(LmmResponse {
                text: format!("echo {}", r.text),
                prompt_tokens: 1,
                response_tokens: 1,
            })
        }
    }

    #[test]
    fn recorded_exchange_replays() {
        let dir = tempfile::tempdir().unwrap();
        let store = FixtureStore::open(dir.path());
        let req = LmmRequest {
            model: "m".into(),
            text: "where?".into(),
            image: Some("q.jpg".into()),
            temperature: 1.0,
        };
        let live = RecordingLmm::new(Fixed, store.clone()).generate(&req).unwrap();
        let replayed = ReplayLmm::new(store).generate(&req).unwrap();
        assert_eq!(live, replayed);
    }

    struct OneHit;

    impl ReverseImageSearch for OneHit {
        fn search(&self, _: &ReverseSearchRequest) -> Result<Vec<SearchHit>, ClientError> {
            Ok(vec![SearchHit {
                rank: 0,
                page_url: "https://example.org".into(),
                title: "t".into(),
                raw_text: "body".into(),
                link_image_ref: Some("https://example.org/a.jpg".into()),
            }])
        }
    }

    #[test]
    fn recorded_search_replays() {
        let dir = tempfile::tempdir().unwrap();
        let store = FixtureStore::open(dir.path());
        let req = ReverseSearchRequest {
            image: ImageSource::parse("q.jpg"),
        };
        let live = RecordingReverseSearch::new(OneHit, store.clone()).search(&req).unwrap();
        assert_eq!(ReplayReverseSearch::new(store).search(&req).unwrap(), live);
    }
}
