use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::geodesy::DistanceThresholds;
use crate::refine::{FilterFlags, GateThresholds};
use crate::websearch::{GenerationOptions, PromptSpec};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelinePaths {
    pub weights: PathBuf,
    pub database: PathBuf,
    /// Recorded client exchanges; required in replay and record mode.
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    /// Feature-set stem of the query photos.
    #[serde(default)]
    pub queries: Option<PathBuf>,
    /// Directory that relative match-file references resolve against.
    #[serde(default)]
    pub matches: Option<PathBuf>,
    /// NDJSON of `{"id", "lat", "lon"}` baseline predictions from an external system.
    #[serde(default)]
    pub baselines: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub no_closed_world: bool,
    pub no_geocoding: bool,
    pub no_layer1: bool,
    pub no_layer2: bool,
    pub baseline_only: bool,
}

impl AblationFlags {
    pub fn filter_flags(&self) -> FilterFlags {
        FilterFlags {
            no_layer1: self.no_layer1,
            no_layer2: self.no_layer2,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.baseline_only && (self.no_closed_world || self.no_geocoding || self.no_layer1 || self.no_layer2) {
            return Err("baseline_only skips the search path, so it cannot be combined with other ablations".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientMode {
    #[default]
    Replay,
    Record,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientsConfig {
    pub mode: ClientMode,
    pub gemini_endpoint: String,
    pub gemini_key_env: String,
    pub lens_endpoint: String,
    pub lens_key_env: String,
    pub lens_max_hits: usize,
    pub nominatim_url: String,
    pub user_agent: String,
}

impl Default for ClientsConfig {
    fn default() -> Self {
        Self {
            mode: ClientMode::Replay,
            gemini_endpoint: crate::websearch::GeminiClient::DEFAULT_ENDPOINT.into(),
            gemini_key_env: "GEMINI_API_KEY".into(),
            lens_endpoint: crate::websearch::LensSearchClient::DEFAULT_ENDPOINT.into(),
            lens_key_env: "SERPAPI_KEY".into(),
            lens_max_hits: 10,
            nominatim_url: crate::geocoding::NominatimClient::DEFAULT_URL.into(),
            user_agent: format!("geosearch/{}", env!("CARGO_PKG_VERSION")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacSettings {
    pub max_iters: usize,
    pub confidence: f64,
}

impl Default for RansacSettings {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            confidence: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PipelinePaths,
    #[serde(default)]
    pub prompts: PromptSpec,
    #[serde(default)]
    pub thresholds: GateThresholds,
    #[serde(default = "default_k")]
    pub retrieval_k: usize,
    #[serde(default)]
    pub ablations: AblationFlags,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub generation: GenerationOptions,
    #[serde(default)]
    pub ransac: RansacSettings,
    #[serde(default)]
    pub clients: ClientsConfig,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub distance_thresholds_km: DistanceThresholds,
}

fn default_k() -> usize {
    15
}

fn default_parallelism() -> usize {
    4
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

impl PipelineConfig {
    pub fn new(paths: PipelinePaths) -> Self {
        Self {
            paths,
            prompts: PromptSpec::default(),
            thresholds: GateThresholds::default(),
            retrieval_k: default_k(),
            ablations: AblationFlags::default(),
            seed: 0,
            generation: GenerationOptions::default(),
            ransac: RansacSettings::default(),
            clients: ClientsConfig::default(),
            parallelism: default_parallelism(),
            distance_thresholds_km: DistanceThresholds::default(),
        }
    }

    /// Parses TOML; relative paths resolve against `base_dir`. Does not touch the filesystem.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate_values()?;
        Ok(cfg)
    }

    /// Reads, parses and fully validates a config file, including that referenced paths exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::from_toml_str(&text, base).map_err(|e| match e {
            PipelineError::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.validate_paths()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.weights);
        fix(&mut self.paths.database);
        for p in [
            &mut self.paths.fixtures,
            &mut self.paths.queries,
            &mut self.paths.matches,
            &mut self.paths.baselines,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate_values(&self) -> Result<(), PipelineError> {
        self.prompts.validate().map_err(|e| config_err(format!("prompts: {e}")))?;
        self.thresholds.validate().map_err(|e| config_err(format!("thresholds: {e}")))?;
        self.ablations.validate().map_err(|e| config_err(format!("ablations: {e}")))?;
        if self.retrieval_k == 0 {
            return Err(config_err("retrieval_k: must be at least 1"));
        }
        if self.parallelism == 0 {
            return Err(config_err("parallelism: must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.ransac.confidence) || self.ransac.max_iters == 0 {
            return Err(config_err("ransac: confidence must lie in [0, 1) and max_iters be positive"));
        }
        Ok(())
    }

    pub fn validate_paths(&self) -> Result<(), PipelineError> {
        let need_file = |key: &str, p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                Err(config_err(format!("paths.{key}: file not found: {}", p.display())))
            }
        };
        need_file("weights", &self.paths.weights)?;
        need_file("database", &self.paths.database)?;
        if let Some(b) = &self.paths.baselines {
            need_file("baselines", b)?;
        }
        if let Some(m) = &self.paths.matches {
            if !m.is_dir() {
                return Err(config_err(format!("paths.matches: directory not found: {}", m.display())));
            }
        }
        if let Some(q) = &self.paths.queries {
            if !crate::retrieval::features::FeatureSetPaths::from_stem(q).exists() {
                return Err(config_err(format!("paths.queries: feature set not found: {}", q.display())));
            }
        }
        match (&self.clients.mode, &self.paths.fixtures) {
            (ClientMode::Replay, None) => Err(config_err("paths.fixtures: required in replay mode")),
            (ClientMode::Replay, Some(f)) if !f.is_dir() => Err(config_err(format!(
                "paths.fixtures: directory not found: {}",
                f.display()
            ))),
            (ClientMode::Record, None) => Err(config_err("paths.fixtures: required in record mode")),
            _ => Ok(()),
        }
    }
}
