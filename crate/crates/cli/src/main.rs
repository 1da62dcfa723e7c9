use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use geosearch::encoders::{load_weights, save_weights, EncoderConfig, GeoModel};
use geosearch::geodesy::{generate_uniform_gallery, DistanceThresholds};
use geosearch::pipeline::{
    gallery_retrieval_eval, labeled_cases, load_queries, read_gallery, read_report, write_evaluation, write_gallery,
    ClientMode, ClientSet, EvalReport, Pipeline, PipelineConfig, PipelineError, QueryRecord,
};
use geosearch::refine::{tune_thresholds, write_alpha_curve_csv, write_layer1_grid_csv, TuningGrid};
use geosearch::retrieval::features::read_feature_set;
use geosearch::retrieval::{build_database, save_database};
use geosearch::scalar::Scalar;
use geosearch::training::{train, write_loss_csv, TrainConfig};

#[derive(Parser)]
#[command(name = "geosearch", version, about = "Search-augmented worldwide image geolocalization")]
struct Cli {
    /// Log filter, e.g. `info` or `geosearch=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the location encoder and projection heads on a feature set.
    Train(TrainArgs),
    /// Encode a feature set into a retrieval database.
    BuildDb(BuildDbArgs),
    /// Geolocate query photos and print one decision per line.
    Infer(InferArgs),
    /// Run the pipeline over queries with ground truth and write reports.
    Evaluate(EvaluateArgs),
    /// Grid-search the filter thresholds from an evaluation report.
    Tune(TuneArgs),
    /// Image-to-GPS retrieval accuracy against a coordinate gallery.
    GalleryEval(GalleryEvalArgs),
    /// Write an area-uniform coordinate gallery.
    GenGallery(GenGalleryArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct TrainArgs {
    /// Feature-set stem of the training photos.
    #[arg(long)]
    features: PathBuf,
    /// Output weights file.
    #[arg(long)]
    out: PathBuf,
    /// TOML training settings; flags below override it.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// TOML encoder architecture. Defaults to the standard one for the feature width.
    #[arg(long, conflicts_with = "toy")]
    encoder: Option<PathBuf>,
    /// Use the small desk-scale architecture.
    #[arg(long)]
    toy: bool,
    #[arg(long, default_value_t = 512)]
    embed_dim: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-step loss curve here.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct BuildDbArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Query feature-set stem, overriding `paths.queries`.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau_m: Option<usize>,
    #[arg(long)]
    tau_in: Option<f64>,
    #[arg(long)]
    tau_r: Option<f64>,
    #[arg(long)]
    no_closed_world: bool,
    #[arg(long)]
    no_geocoding: bool,
    #[arg(long)]
    no_layer1: bool,
    #[arg(long)]
    no_layer2: bool,
    #[arg(long)]
    baseline_only: bool,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Replay,
    Record,
    Live,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Only these query ids (repeatable).
    #[arg(long = "id")]
    ids: Vec<String>,
    /// Write `<id>.json` audit traces here.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Output directory for report.json, accuracy.csv, trace/ and timing.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    /// report.json written by `evaluate`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Configuration supplying the base thresholds and distance thresholds.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GalleryEvalArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Feature-set stem of queries with ground truth.
    #[arg(long)]
    queries: PathBuf,
    /// NDJSON gallery of {"lat", "lon"}.
    #[arg(long)]
    gallery: PathBuf,
    /// Write per-query predictions here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenGalleryArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Bad invocation rather than a failed run.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report_error("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                report_error("usage", &message);
                ExitCode::from(2)
            } else if matches!(e.downcast_ref::<PipelineError>(), Some(PipelineError::Config(_))) {
                report_error("config", &message);
                ExitCode::from(2)
            } else {
                report_error("runtime", &message);
                ExitCode::FAILURE
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => match a.precision {
            Precision::F32 => train_cmd::<f32>(&a),
            Precision::F64 => train_cmd::<f64>(&a),
        },
        Command::BuildDb(a) => match a.precision {
            Precision::F32 => build_db::<f32>(&a),
            Precision::F64 => build_db::<f64>(&a),
        },
        Command::Infer(a) => match a.pipeline.precision {
            Precision::F32 => infer::<f32>(&a),
            Precision::F64 => infer::<f64>(&a),
        },
        Command::Evaluate(a) => match a.pipeline.precision {
            Precision::F32 => evaluate::<f32>(&a),
            Precision::F64 => evaluate::<f64>(&a),
        },
        Command::Tune(a) => tune(&a),
        Command::GalleryEval(a) => gallery_eval(&a),
        Command::GenGallery(a) => gen_gallery(&a),
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())).into())
}

fn train_cmd<T: Scalar>(a: &TrainArgs) -> Result<()> {
    let (d_v, records) = read_feature_set::<T>(&a.features)?;
    let mut cfg: TrainConfig = match &a.train_config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let arch = match (&a.encoder, a.toy) {
        (Some(p), _) => read_toml::<EncoderConfig>(p)?,
        (None, true) => EncoderConfig::toy(d_v, a.embed_dim),
        (None, false) => EncoderConfig::with_dims(d_v, a.embed_dim),
    };
    if arch.visual_dim != d_v {
        bail!(usage(format!(
            "encoder expects visual_dim {} but the feature set has {d_v}",
            arch.visual_dim
        )));
    }
    let model = GeoModel::<T>::init(&arch, cfg.seed)?;
    let outcome = train(&records, model, &cfg)?;
    save_weights(&a.out, &outcome.model.encoder, &outcome.model.heads)?;
    if let Some(p) = &a.loss_csv {
        write_loss_csv(BufWriter::new(File::create(p)?), &outcome.history)?;
    }
    print_json(&json!({
        "weights": a.out,
        "records": records.len(),
        "steps": outcome.history.len(),
        "epoch_mean_loss": outcome.epoch_means(),
    }))
}

fn build_db<T: Scalar>(a: &BuildDbArgs) -> Result<()> {
    let (_, heads) = load_weights::<T>(&a.weights)?;
    let (_, records) = read_feature_set::<T>(&a.features)?;
    let db = build_database(&records, &heads)?;
    save_database(&db, &a.out)?;
    print_json(&json!({ "database": a.out, "records": db.len() }))
}

fn pipeline_config(a: &PipelineArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    let flags = &mut cfg.ablations;
    flags.no_closed_world |= a.no_closed_world;
    flags.no_geocoding |= a.no_geocoding;
    flags.no_layer1 |= a.no_layer1;
    flags.no_layer2 |= a.no_layer2;
    flags.baseline_only |= a.baseline_only;
    if let Some(q) = &a.queries {
        cfg.paths.queries = Some(q.clone());
    }
    if let Some(f) = &a.fixtures {
        cfg.paths.fixtures = Some(f.clone());
    }
    if let Some(m) = a.mode {
        cfg.clients.mode = match m {
            Mode::Replay => ClientMode::Replay,
            Mode::Record => ClientMode::Record,
            Mode::Live => ClientMode::Live,
        };
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.k {
        cfg.retrieval_k = v;
    }
    if let Some(v) = a.parallelism {
        cfg.parallelism = v;
    }
    if let Some(v) = a.alpha {
        cfg.thresholds.alpha = v;
    }
    if let Some(v) = a.tau_m {
        cfg.thresholds.tau_m = v;
    }
    if let Some(v) = a.tau_in {
        cfg.thresholds.tau_in = v;
    }
    if let Some(v) = a.tau_r {
        cfg.thresholds.tau_r = v;
    }
    cfg.validate_values()?;
    cfg.validate_paths()?;
    Ok(cfg)
}

fn pipeline_queries<T: Scalar>(cfg: &PipelineConfig) -> Result<Vec<QueryRecord<T>>> {
    let stem = cfg
        .paths
        .queries
        .as_ref()
        .ok_or_else(|| usage("no queries: set paths.queries or pass --queries"))?;
    Ok(load_queries(stem, cfg.paths.matches.as_deref())?)
}

fn infer<T: Scalar>(a: &InferArgs) -> Result<()> {
    let cfg = pipeline_config(&a.pipeline)?;
    let mut queries = pipeline_queries::<T>(&cfg)?;
    if !a.ids.is_empty() {
        if let Some(missing) = a.ids.iter().find(|id| !queries.iter().any(|q| &q.id == *id)) {
            bail!(usage(format!("no query with id {missing:?}")));
        }
        queries.retain(|q| a.ids.contains(&q.id));
    }
    let clients = ClientSet::from_config(&cfg)?;
    let pipeline = Pipeline::<T>::load(cfg)?;
    if let Some(d) = &a.trace_dir {
        std::fs::create_dir_all(d)?;
    }
    for q in &queries {
        let outcome = pipeline.infer(q, clients.as_clients())?;
        let t = &outcome.trace;
        if let Some(d) = &a.trace_dir {
            let mut w = BufWriter::new(File::create(d.join(format!("{}.json", trace_stem(&t.id))))?);
            serde_json::to_writer_pretty(&mut w, t)?;
            writeln!(w)?;
        }
        print_json(&json!({
            "id": t.id,
            "lat": t.decision.gps.lat(),
            "lon": t.decision.gps.lon(),
            "chosen": t.decision.chosen,
            "layer": t.decision.layer,
            "sigma": t.sigma(),
            "failure": t.failure,
        }))?;
    }
    Ok(())
}

fn trace_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn summary(report: &EvalReport) -> serde_json::Value {
    json!({
        "queries": report.queries,
        "accuracy": report.accuracy,
        "decisions": report.decisions,
        "failures": report.failures,
        "tokens": report.tokens,
    })
}

fn evaluate<T: Scalar>(a: &EvaluateArgs) -> Result<()> {
    let cfg = pipeline_config(&a.pipeline)?;
    let queries = pipeline_queries::<T>(&cfg)?;
    if queries.is_empty() {
        bail!(usage("the query set is empty"));
    }
    if let Some(q) = queries.iter().find(|q| q.truth.is_none()) {
        bail!(usage(format!(
            "evaluate needs ground truth but query {:?} has none; use `infer` instead",
            q.id
        )));
    }
    let clients = ClientSet::from_config(&cfg)?;
    let pipeline = Pipeline::<T>::load(cfg)?;
    let (report, traces, timing) = pipeline.evaluate(&queries, clients.as_clients())?;
    write_evaluation(&a.out, &report, &traces, Some(&timing))?;
    print_json(&summary(&report))
}

fn tune(a: &TuneArgs) -> Result<()> {
    let report = read_report(&a.report)?;
    let (base, thresholds) = match &a.config {
        Some(p) => {
            let c = PipelineConfig::load(p)?;
            (c.thresholds, c.distance_thresholds_km)
        }
        None => (Default::default(), DistanceThresholds::default()),
    };
    let cases = labeled_cases(&report.rows, &thresholds);
    if cases.is_empty() {
        bail!(usage("the report has no rows with a scored search prediction to tune on"));
    }
    let result = tune_thresholds(&cases, &TuningGrid::default(), base)?;
    std::fs::create_dir_all(&a.out)?;
    let mut w = BufWriter::new(File::create(a.out.join("tuning.json"))?);
    serde_json::to_writer_pretty(&mut w, &result)?;
    writeln!(w)?;
    write_alpha_curve_csv(File::create(a.out.join("alpha_curve.csv"))?, &result.alpha_curve)?;
    write_layer1_grid_csv(File::create(a.out.join("layer1_grid.csv"))?, &result.layer1_curve)?;
    print_json(&json!({
        "thresholds": result.thresholds,
        "cases": result.cases,
        "layer2_cases": result.layer2_cases,
        "layer1_accuracy": result.layer1_accuracy,
        "alpha_f1": result.alpha_f1,
    }))
}

fn gallery_eval(a: &GalleryEvalArgs) -> Result<()> {
    let (encoder, heads) = load_weights::<f64>(&a.weights)?;
    let queries = load_queries::<f64>(&a.queries, None)?;
    if let Some(q) = queries.iter().find(|q| q.truth.is_none()) {
        bail!(usage(format!("gallery-eval needs ground truth but query {:?} has none", q.id)));
    }
    let gallery = read_gallery(&a.gallery)?;
    let eval = gallery_retrieval_eval(&queries, &gallery, &encoder, &heads, &DistanceThresholds::default())?;
    if let Some(p) = &a.out {
        let mut w = BufWriter::new(File::create(p)?);
        serde_json::to_writer_pretty(&mut w, &eval)?;
        writeln!(w)?;
    }
    print_json(&json!({ "queries": queries.len(), "gallery": gallery.len(), "accuracy": eval.accuracy }))
}

fn gen_gallery(a: &GenGalleryArgs) -> Result<()> {
    if a.count == 0 {
        bail!(usage("--count must be at least 1"));
    }
    let gallery = generate_uniform_gallery(a.count, a.seed)?;
    write_gallery(&a.out, &gallery)?;
    print_json(&json!({ "gallery": a.out, "count": gallery.len() }))
}
