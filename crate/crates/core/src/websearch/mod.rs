//! Open-world evidence: reverse-image-search hits, web contexts, prompt
//! construction, location generation through a multimodal model, and token
//! accounting.

mod clients;
mod prompts;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, FixtureStore, RetryPolicy};

pub use clients::{
    html_to_text, GeminiClient, ImageSource, LensSearchClient, LmmClient, LmmRequest, LmmResponse,
    RecordingLmm, RecordingReverseSearch, ReplayLmm, ReplayReverseSearch, ReverseImageSearch,
    ReverseSearchRequest, LMM_FIXTURE_KIND, SEARCH_FIXTURE_KIND,
};
pub use prompts::{
    build_prompts, render_fallback_prompt, OutputKind, PromptMode, PromptSpec, RenderedPrompt, TEMPLATE_VERSION,
};

pub const MAX_CONTEXT_CHARS: usize = 2000;

/// Fixed prompt-plus-image cost of one generation call.
pub const TOKENS_BASE: u64 = 462;
pub const TOKENS_PER_COORDINATE: u64 = 19;
pub const TOKENS_PER_CONTEXT: u64 = 2070;

#[derive(Debug, Error)]
pub enum WebSearchError {
    #[error("prompt spec lists {n} variants but the schedule has {schedule} entries")]
    ScheduleMismatch { n: usize, schedule: usize },
    #[error("prompt spec needs at least one variant")]
    NoVariants,
    #[error("search hit {rank} has an empty page URL")]
    EmptyUrl { rank: usize },
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// One reverse-image-search result, in engine order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub rank: usize,
    pub page_url: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub raw_text: String,
    /// The matched web image, used for geometric verification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_image_ref: Option<String>,
}

impl SearchHit {
    pub fn validate(&self) -> Result<(), WebSearchError> {
        if self.page_url.trim().is_empty() {
            return Err(WebSearchError::EmptyUrl { rank: self.rank });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebContext {
    pub source: usize,
    pub title: String,
    pub text: String,
}

/// Cuts `text` to at most `max_chars` characters without splitting one.
pub fn truncate_chars(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((byte, _)) => &text[..byte],
        None => text,
    }
}

/// Keeps the first `m` hits whose text is non-blank, truncated to [`MAX_CONTEXT_CHARS`].
pub fn extract_contexts(hits: &[SearchHit], m: usize) -> Vec<WebContext> {
    hits.iter()
        .filter(|h| !h.raw_text.trim().is_empty())
        .take(m)
        .map(|h| WebContext {
            source: h.rank,
            title: h.title.clone(),
            text: truncate_chars(&h.raw_text, MAX_CONTEXT_CHARS).to_string(),
        })
        .collect()
}

/// The highest-ranked hit that links a matched image.
pub fn first_link_image(hits: &[SearchHit]) -> Option<&SearchHit> {
    hits.iter().find(|h| h.link_image_ref.is_some())
}

pub fn estimate_tokens(n_c: u64, n_l: u64) -> u64 {
    TOKENS_BASE + TOKENS_PER_COORDINATE * n_c + TOKENS_PER_CONTEXT * n_l
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationOptions {
    pub model: String,
    pub temperature: f64,
    pub retry: RetryPolicy,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            model: "gemini-2.0-flash".into(),
            temperature: 1.0,
            retry: RetryPolicy::default(),
        }
    }
}

/// Log entry for one model call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmExchange {
    pub variant: usize,
    pub template_version: String,
    pub request_digest: String,
    pub n_coords: usize,
    pub n_contexts: usize,
    pub estimated_prompt_tokens: u64,
    pub prompt_tokens: u64,
    pub response_tokens: u64,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedLocation {
    pub variant: usize,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub locations: Vec<GeneratedLocation>,
    pub exchanges: Vec<LmmExchange>,
    pub warnings: Vec<String>,
}

impl Generation {
    pub fn estimated_tokens(&self) -> u64 {
        self.exchanges.iter().map(|e| e.estimated_prompt_tokens).sum()
    }
}

pub fn lmm_request(prompt: &RenderedPrompt, image: Option<&str>, opts: &GenerationOptions) -> LmmRequest {
    LmmRequest {
        model: opts.model.clone(),
        text: prompt.text.clone(),
        image: image.map(str::to_string),
        temperature: opts.temperature,
    }
}

/// Sends every prompt, keeps non-empty answers in prompt order, and logs each exchange.
pub fn generate_locations(
    prompts: &[RenderedPrompt],
    image: Option<&str>,
    client: &dyn LmmClient,
    opts: &GenerationOptions,
) -> Result<Generation, WebSearchError> {
    let responses: Vec<Result<(LmmRequest, LmmResponse), ClientError>> = prompts
        .par_iter()
        .map(|p| {
            let req = lmm_request(p, image, opts);
            let resp = opts.retry.run(|| client.generate(&req))?;
            Ok((req, resp))
        })
        .collect();

    let mut out = Generation::default();
    for (prompt, r) in prompts.iter().zip(responses) {
        let (req, resp) = r?;
        out.exchanges.push(LmmExchange {
            variant: prompt.variant,
            template_version: prompt.template_version.clone(),
            request_digest: FixtureStore::digest(LMM_FIXTURE_KIND, &req),
            n_coords: prompt.n_coords(),
            n_contexts: prompt.n_contexts,
            estimated_prompt_tokens: prompt.estimated_tokens(),
            prompt_tokens: resp.prompt_tokens,
            response_tokens: resp.response_tokens,
            response: resp.text.clone(),
        });
        let text = resp.text.trim();
        if text.is_empty() {
            let msg = format!("prompt variant {} returned an empty response", prompt.variant);
            log::warn!("{msg}");
            out.warnings.push(msg);
        } else {
            out.locations.push(GeneratedLocation {
                variant: prompt.variant,
                text: text.to_string(),
            });
        }
    }
    Ok(out)
}
