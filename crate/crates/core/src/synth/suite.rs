//! A self-contained fixture-mode evaluation suite built on the toy world: trained
//! weights, a reference database, query photos with match files, and recorded
//! client exchanges produced by scripted stand-ins for the web services.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{planted_homography, planted_matches, ToyWorld, ToyWorldConfig};
use crate::clients::{ClientError, FixtureStore};
use crate::encoders::{save_weights, EncoderConfig, GeoModel};
use crate::geocoding::{Geocoder, GeocoderHit, RecordingGeocoder};
use crate::geodesy::GpsCoordinate;
use crate::pipeline::{AblationFlags, Clients, Pipeline, PipelineConfig, PipelineError, PipelinePaths};
use crate::refine::MatchRecord;
use crate::retrieval::features::{write_feature_rows, write_feature_set, FeatureRow};
use crate::retrieval::{build_database, save_database};
use crate::training::{train, TrainConfig};
use crate::websearch::{
    LmmClient, LmmRequest, LmmResponse, RecordingLmm, RecordingReverseSearch, ReverseImageSearch,
    ReverseSearchRequest, SearchHit,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSpec {
    pub world: ToyWorldConfig,
    pub embed_dim: usize,
    pub train: TrainConfig,
    pub queries: usize,
    /// Queries whose keypoint matches are mostly outliers, so geometric verification fails.
    pub unverified: usize,
    /// Queries whose search hits link no matched image.
    pub unlinked: usize,
    /// Unverified queries whose web pages point at a distant site.
    pub misled: usize,
    /// Per-query RANSAC and sampling seed.
    pub seed: u64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            world: ToyWorldConfig {
                clusters: 16,
                per_cluster: 12,
                visual_dim: 16,
                ..ToyWorldConfig::default()
            },
            embed_dim: 8,
            train: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 16,
                epochs: 30,
                ..TrainConfig::default()
            },
            queries: 10,
            unverified: 2,
            unlinked: 1,
            misled: 1,
            seed: 11,
        }
    }
}

/// What the scripted services know about each query photo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedQuery {
    pub id: String,
    pub image: String,
    pub cluster: usize,
    pub linked: bool,
    /// Site the web pages name.
    pub web_cluster: usize,
}

/// The toy world's answers to every service call the pipeline can make.
#[derive(Debug, Clone)]
pub struct Script {
    pub centers: Vec<GpsCoordinate>,
    pub queries: BTreeMap<String, ScriptedQuery>,
}

fn link_ref(id: &str) -> String {
    format!("links/{id}.jpg")
}

fn coords(g: GpsCoordinate) -> String {
    format!("{:.6}, {:.6}", g.lat(), g.lon())
}

impl Script {
    fn cluster_of(name: &str) -> Option<usize> {
        name.trim().strip_prefix("Toy site ")?.parse().ok()
    }

    fn query(&self, image: &str) -> Option<&ScriptedQuery> {
        self.queries.values().find(|q| q.image == image)
    }

    /// Model behavior: with web text it names the true site, without it the next site over.
    /// The first prompt variant (no reference coordinates) adds a suffix the geocoder does not know.
    pub fn answer(&self, req: &LmmRequest) -> Result<String, ClientError> {
        if let Some(place) = req.text.lines().find_map(|l| l.strip_prefix("Place: ")) {
            return Ok(match Self::cluster_of(place).and_then(|c| self.centers.get(c)) {
                Some(&g) => coords(g),
                None => {
                    let site = place.split(',').next().unwrap_or_default();
                    Self::cluster_of(site)
                        .and_then(|c| self.centers.get(c))
                        .map_or_else(|| "unknown".to_string(), |&g| coords(g))
                }
            });
        }
        let image = req.image.as_deref().unwrap_or_default();
        let q = self
            .query(image)
            .ok_or_else(|| ClientError::Decode(format!("no scripted answer for image {image:?}")))?;
        let n = self.centers.len();
        let cluster = if req.text.contains("[web ") {
            q.web_cluster
        } else {
            (q.cluster + 1) % n
        };
        if req.text.contains("in the form \"lat, lon\"") {
            return Ok(coords(self.centers[cluster]));
        }
        let mut text = ToyWorld::site_name(cluster);
        if !req.text.contains("near: ") {
            text.push_str(", Toyland");
        }
        Ok(text)
    }

    pub fn hits(&self, req: &ReverseSearchRequest) -> Result<Vec<SearchHit>, ClientError> {
        let image = match &req.image {
            crate::websearch::ImageSource::Url(s) | crate::websearch::ImageSource::Path(s) => s,
        };
        let q = self
            .query(image)
            .ok_or_else(|| ClientError::Decode(format!("no scripted hits for image {image:?}")))?;
        let site = ToyWorld::site_name(q.web_cluster);
        Ok((1..=3)
            .map(|rank| SearchHit {
                rank,
                page_url: format!("https://pages.example/{}/{rank}", q.web_cluster),
                title: format!("{site} photo journal, part {rank}"),
                raw_text: format!("Visitors to {site} photographed this view.\nMore pictures from {site}."),
                link_image_ref: (q.linked && rank == 1).then(|| link_ref(&q.id)),
            })
            .collect())
    }

    pub fn geocode(&self, query: &str) -> Vec<GeocoderHit> {
        Self::cluster_of(query)
            .and_then(|c| self.centers.get(c))
            .map(|g| GeocoderHit {
                lat: g.lat().to_string(),
                lon: g.lon().to_string(),
                display_name: query.to_string(),
            })
            .into_iter()
            .collect()
    }
}

/// Counts tokens as whitespace-separated words.
fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

pub struct ScriptedLmm<'a>(pub &'a Script);
pub struct ScriptedSearch<'a>(pub &'a Script);
pub struct ScriptedGeocoder<'a>(pub &'a Script);

impl LmmClient for ScriptedLmm<'_> {
    fn generate(&self, request: &LmmRequest) -> Result<LmmResponse, ClientError> {
        let text = self.0.answer(request)?;
        Ok(LmmResponse {
            prompt_tokens: word_count(&request.text),
            response_tokens: word_count(&text),
            text,
        })
    }
}

impl ReverseImageSearch for ScriptedSearch<'_> {
    fn search(&self, request: &ReverseSearchRequest) -> Result<Vec<SearchHit>, ClientError> {
        self.0.hits(request)
    }
}

impl Geocoder for ScriptedGeocoder<'_> {
    fn search(&self, query: &str) -> Result<Vec<GeocoderHit>, ClientError> {
        Ok(self.0.geocode(query))
    }
}

/// The site whose location embedding is least similar to the photo's location-aligned embedding.
fn least_plausible_site(model: &GeoModel<f64>, visual: &[f64], centers: &[GpsCoordinate]) -> Result<usize, PipelineError> {
    let e = model.heads.image_location_embedding(visual)?;
    let mut scores = Vec::with_capacity(centers.len());
    for &c in centers {
        scores.push(-crate::scalar::cosine(&e, &model.encoder.encode(c)?));
    }
    Ok(crate::refine::argmax_first(&scores).expect("world has sites"))
}

/// A built suite on disk.
#[derive(Debug, Clone)]
pub struct FixtureSuite {
    pub dir: PathBuf,
    pub config_path: PathBuf,
    pub config: PipelineConfig,
    pub queries: Vec<ScriptedQuery>,
}

impl FixtureSuite {
    pub fn weights(&self) -> &Path {
        &self.config.paths.weights
    }

    pub fn fixtures(&self) -> &Path {
        self.config.paths.fixtures.as_deref().expect("suite config names a fixture directory")
    }

    pub fn queries_stem(&self) -> &Path {
        self.config.paths.queries.as_deref().expect("suite config names the queries")
    }

    /// Feature set of the reference photos the database was built from.
    pub fn reference_stem(&self) -> PathBuf {
        self.dir.join("reference")
    }
}

/// The ablation settings whose client exchanges a suite records.
pub fn recorded_ablations() -> Vec<AblationFlags> {
    vec![
        AblationFlags::default(),
        AblationFlags {
            no_closed_world: true,
            ..AblationFlags::default()
        },
        AblationFlags {
            no_geocoding: true,
            ..AblationFlags::default()
        },
        AblationFlags {
            baseline_only: true,
            ..AblationFlags::default()
        },
    ]
}

/// Builds the suite under `dir`: trains weights, builds the database, writes queries, match
/// files and `config.toml`, then runs the pipeline against the scripted services once per
/// recorded ablation so that every exchange lands in `fixtures/`.
pub fn build_fixture_suite(dir: impl AsRef<Path>, spec: &SuiteSpec) -> Result<FixtureSuite, PipelineError> {
    let dir = dir.as_ref().to_path_buf();
    if spec.queries == 0 || spec.unverified + spec.unlinked > spec.queries || spec.misled > spec.unverified {
        return Err(PipelineError::Config(
            "suite needs at least one query and no more special cases than queries".into(),
        ));
    }
    std::fs::create_dir_all(dir.join("matches"))?;
    std::fs::create_dir_all(dir.join("fixtures"))?;
    let world = ToyWorld::generate(spec.world.clone())?;
    let d_v = spec.world.visual_dim;

    let (reference, _) = world.dataset::<f64>("ref-", spec.seed);
    write_feature_set(dir.join("reference"), d_v, &reference)?;
    let model = GeoModel::<f64>::init(&EncoderConfig::toy(d_v, spec.embed_dim), spec.seed)?;
    let trained = train(&reference, model, &TrainConfig { seed: spec.seed, ..spec.train.clone() })
        .map_err(|e| PipelineError::Config(format!("suite training failed: {e}")))?;
    let weights = dir.join("weights.gswt");
    save_weights(&weights, &trained.model.encoder, &trained.model.heads)?;
    let db = build_database(&reference, &trained.model.heads)?;
    save_database(&db, dir.join("db.gsdb"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0073_7569_7465);
    let clusters = spec.world.clusters;
    let mut rows = Vec::with_capacity(spec.queries);
    let mut scripted = Vec::with_capacity(spec.queries);
    for i in 0..spec.queries {
        let id = format!("q{i:02}");
        let cluster = i * clusters / spec.queries;
        let linked = i >= spec.unlinked;
        let verified = i >= spec.unlinked + spec.unverified;
        let sample = world.sample::<f64>(cluster, id.clone(), &mut rng);
        let web_cluster = if i < spec.unlinked + spec.misled && i >= spec.unlinked {
            least_plausible_site(&trained.model, &sample.visual, &world.centers)?
        } else {
            cluster
        };
        let h = planted_homography(&mut rng);
        let outliers = if verified { 0.2 } else { 0.75 };
        let (input, _) = planted_matches(&h, 100, outliers, 0.5, 4.0, &mut rng);
        let record = MatchRecord {
            query_id: id.clone(),
            link_image_ref: link_ref(&id),
            matches: input
                .matches
                .iter()
                .map(|c| vec![c.x, c.y, c.xp, c.yp, 1.0])
                .collect(),
            image_w: Some(640),
            image_h: Some(480),
        };
        let match_name = format!("{id}.ndjson");
        std::fs::write(dir.join("matches").join(&match_name), serde_json::to_string(&record)? + "\n")?;
        let image = format!("photos/{id}.jpg");
        rows.push(FeatureRow {
            id: id.clone(),
            gps: Some(world.centers[cluster]),
            text: None,
            image: Some(image.clone()),
            matches: Some(match_name),
            visual: sample.visual,
            text_feature: sample.text_feature,
        });
        scripted.push(ScriptedQuery {
            id,
            image,
            cluster,
            linked,
            web_cluster,
        });
    }
    write_feature_rows(dir.join("queries"), d_v, &rows)?;

    let mut config = PipelineConfig::new(PipelinePaths {
        weights: "weights.gswt".into(),
        database: "db.gsdb".into(),
        fixtures: Some("fixtures".into()),
        queries: Some("queries".into()),
        matches: Some("matches".into()),
        baselines: None,
    });
    config.seed = spec.seed;
    config.generation.retry = crate::clients::RetryPolicy::none();
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, config.to_toml_string())?;
    let config = PipelineConfig::load(&config_path)?;

    let script = Script {
        centers: world.centers.clone(),
        queries: scripted.iter().map(|q| (q.id.clone(), q.clone())).collect(),
    };
    let store = FixtureStore::open(dir.join("fixtures"));
    let search = RecordingReverseSearch::new(ScriptedSearch(&script), store.clone());
    let lmm = RecordingLmm::new(ScriptedLmm(&script), store.clone());
    let geocoder = RecordingGeocoder::new(ScriptedGeocoder(&script), store);
    let clients = Clients {
        search: &search,
        lmm: &lmm,
        geocoder: &geocoder,
    };
    let queries = crate::pipeline::load_queries::<f64>(config.paths.queries.as_ref().expect("set above"), config.paths.matches.as_deref())?;
    for ablations in recorded_ablations() {
        let mut cfg = config.clone();
        cfg.ablations = ablations;
        let pipeline = Pipeline::<f64>::load(cfg)?;
        pipeline.evaluate(&queries, clients)?;
    }

    Ok(FixtureSuite {
        dir,
        config_path,
        config,
        queries: scripted,
    })
}
