//! Config-driven experiment orchestration: one TOML file describes the
//! dataset, paradigm, model, seeds, and client; a run trains or predicts per
//! seed, stores per-node predictions, and emits a JSON report plus a
//! Markdown rendering.
//!
//! Reports are byte-reproducible: anything time-dependent lives in the
//! `report.meta.json` sidecar, never in `report.json` or `report.md`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use mmgl_core::encoder::{
    fuse_features, train_clip_aligned_encoder, train_structure_aware_encoder, ContrastiveConfig,
    EncoderError, FusionMode, ProjectionHeads,
};
use mmgl_core::gnn::{self, Features, GnnConfig, ModelKind};
use mmgl_core::graph::{
    split_nodes, MultimodalGraph, SimilaritySource, SplitAssignment, StructureSelectSpec,
};
use mmgl_core::metrics::{accuracy, confusion, macro_f1, structure_gain, GainEntry};
use mmgl_core::prompt::{DatasetDomain, StructureMode};
use mmgl_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::aligner::{align_nodes, AlignOptions, ArtifactStore};
use crate::client::{CachedClient, ClientConfig, HttpClient, MockClient, VlmClient};
use crate::error::HarnessError;
use crate::formats::{load_graph, DatasetPaths, LoadReport};
use crate::predictor::{
    predict_nodes, NodePrediction, PredictOptions, PredictReport, OUTCOME_PARSED,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("--config is required for this command")]
    Missing,
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{what} file not found: {path}")]
    MissingFile { what: &'static str, path: PathBuf },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Encoder,
    Aligner,
    Predictor,
}

impl Paradigm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Paradigm::Encoder => "encoder",
            Paradigm::Aligner => "aligner",
            Paradigm::Predictor => "predictor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Structure,
    Clip,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub classes: PathBuf,
    #[serde(default)]
    pub domain: Option<String>,
    #[serde(default)]
    pub text_embeddings: Option<PathBuf>,
    #[serde(default)]
    pub image_embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub ratios: [f64; 3],
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            ratios: [0.6, 0.2, 0.2],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f32,
    pub epochs: usize,
    pub lr: f32,
    pub fusion: FusionMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Gcn,
            layers: 2,
            hidden: 64,
            dropout: 0.0,
            epochs: 200,
            lr: 1.0e-2,
            fusion: FusionMode::Concat,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub objective: Objective,
    pub tau: f32,
    pub m: usize,
    pub batch: usize,
    pub lr: f32,
    pub epochs: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = ContrastiveConfig::default();
        EncoderSection {
            objective: Objective::Structure,
            tau: d.tau,
            m: d.m,
            batch: d.batch_size,
            lr: d.lr,
            epochs: d.epochs,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignerSection {
    pub structural: bool,
    pub sample: usize,
}

impl Default for AlignerSection {
    fn default() -> Self {
        AlignerSection {
            structural: true,
            sample: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSection {
    pub structure: StructureMode,
    pub k: usize,
    pub hop: usize,
    pub source: SimilaritySource,
    /// In-context exemplar budget; 0 means zero-shot.
    pub icl: usize,
    pub retry_unparseable: bool,
}

impl Default for PredictorSection {
    fn default() -> Self {
        let spec = StructureSelectSpec::default();
        PredictorSection {
            structure: StructureMode::None,
            k: spec.k,
            hop: spec.hop,
            source: spec.source,
            icl: 0,
            retry_unparseable: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientSection {
    pub endpoint: String,
    pub model_name: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub concurrency: usize,
    /// Mock fallback answer for prompts without a rule.
    pub default_response: String,
    /// Optional JSON file mapping request digests to mock responses.
    pub rules: Option<PathBuf>,
}

impl Default for ClientSection {
    fn default() -> Self {
        ClientSection {
            endpoint: String::new(),
            model_name: "mock-vlm".to_string(),
            timeout_ms: 30_000,
            max_retries: 2,
            backoff_ms: 250,
            temperature: 0.0,
            max_tokens: 512,
            concurrency: 1,
            default_response: "unknown".to_string(),
            rules: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub models: Vec<ModelKind>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            models: vec![ModelKind::Mlp, ModelKind::Gcn, ModelKind::Sage],
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paradigm: Paradigm,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub aligner: AlignerSection,
    #[serde(default)]
    pub predictor: PredictorSection,
    #[serde(default)]
    pub client: ClientSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

impl ExperimentConfig {
    /// Parses, anchors relative paths at the config file's directory, and
    /// validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&raw).map_err(|e| ConfigError::Parse {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.anchor_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn anchor_paths(&mut self, base: &Path) {
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        anchor(&mut self.dataset.nodes);
        anchor(&mut self.dataset.edges);
        anchor(&mut self.dataset.classes);
        if let Some(p) = &mut self.dataset.text_embeddings {
            anchor(p);
        }
        if let Some(p) = &mut self.dataset.image_embeddings {
            anchor(p);
        }
        if let Some(p) = &mut self.client.rules {
            anchor(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must not be empty".to_string()));
        }
        let sum: f64 = self.split.ratios.iter().sum();
        if self.split.ratios.iter().any(|&r| !(r > 0.0)) || (sum - 1.0).abs() > 1.0e-9 {
            return Err(ConfigError::Invalid(format!(
                "split ratios {:?} must be positive and sum to 1",
                self.split.ratios
            )));
        }
        if let Some(domain) = &self.dataset.domain {
            if DatasetDomain::parse(domain).is_none() {
                return Err(ConfigError::Invalid(format!(
                    "unknown dataset domain {domain:?}"
                )));
            }
        }
        if self.client.concurrency == 0 {
            return Err(ConfigError::Invalid(
                "client concurrency must be at least 1".to_string(),
            ));
        }
        let exists = |what: &'static str, path: &Path| -> Result<(), ConfigError> {
            if path.is_file() {
                Ok(())
            } else {
                Err(ConfigError::MissingFile {
                    what,
                    path: path.to_path_buf(),
                })
            }
        };
        exists("node", &self.dataset.nodes)?;
        exists("edge", &self.dataset.edges)?;
        exists("class", &self.dataset.classes)?;
        if let Some(p) = &self.dataset.text_embeddings {
            exists("text embedding", p)?;
        }
        if let Some(p) = &self.dataset.image_embeddings {
            exists("image embedding", p)?;
        }
        if let Some(p) = &self.client.rules {
            exists("mock rules", p)?;
        }
        Ok(())
    }

    pub fn dataset_paths(&self) -> DatasetPaths {
        DatasetPaths {
            nodes: self.dataset.nodes.clone(),
            edges: self.dataset.edges.clone(),
            classes: self.dataset.classes.clone(),
            text_embeddings: self.dataset.text_embeddings.clone(),
            image_embeddings: self.dataset.image_embeddings.clone(),
        }
    }

    pub fn domain(&self) -> Option<DatasetDomain> {
        self.dataset.domain.as_deref().and_then(DatasetDomain::parse)
    }

    pub fn gnn_config(&self, seed: u64) -> GnnConfig {
        GnnConfig {
            model: self.model.kind,
            layers: self.model.layers,
            hidden: self.model.hidden,
            dropout: self.model.dropout,
            epochs: self.model.epochs,
            lr: self.model.lr,
            seed,
        }
    }

    pub fn contrastive_config(&self, seed: u64) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.encoder.tau,
            m: self.encoder.m,
            batch_size: self.encoder.batch,
            lr: self.encoder.lr,
            epochs: self.encoder.epochs,
            seed,
        }
    }

    pub fn align_options(&self, seed: u64) -> AlignOptions {
        AlignOptions {
            structural: self.aligner.structural,
            neighbor_sample: self.aligner.sample,
            seed,
        }
    }

    pub fn structure_select(&self) -> StructureSelectSpec {
        StructureSelectSpec {
            k: self.predictor.k,
            hop: self.predictor.hop,
            source: self.predictor.source,
        }
    }

    pub fn predict_options(&self) -> PredictOptions {
        PredictOptions {
            structure: self.predictor.structure,
            spec: self.structure_select(),
            icl: match self.predictor.icl {
                0 => None,
                n => Some(n),
            },
            retry_unparseable: self.predictor.retry_unparseable,
        }
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            endpoint: self.client.endpoint.clone(),
            model_name: self.client.model_name.clone(),
            timeout: Duration::from_millis(self.client.timeout_ms),
            max_retries: self.client.max_retries,
            backoff_base: Duration::from_millis(self.client.backoff_ms),
            temperature: self.client.temperature,
            max_tokens: self.client.max_tokens,
            concurrency_limit: self.client.concurrency,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientChoice {
    Mock,
    Http,
}

/// Builds the configured client, wrapped in the response cache when a cache
/// directory is given.
pub fn build_client(
    cfg: &ExperimentConfig,
    choice: ClientChoice,
    cache_dir: Option<&Path>,
) -> Result<Box<dyn VlmClient>, HarnessError> {
    let base: Box<dyn VlmClient> = match choice {
        ClientChoice::Mock => {
            let rules = match &cfg.client.rules {
                Some(path) => {
                    let raw = fs::read_to_string(path).map_err(HarnessError::io(format!(
                        "reading mock rules {}",
                        path.display()
                    )))?;
                    serde_json::from_str(&raw).map_err(|e| {
                        HarnessError::Config(ConfigError::Parse {
                            path: path.clone(),
                            reason: e.to_string(),
                        })
                    })?
                }
                None => Default::default(),
            };
            Box::new(MockClient::new(rules, cfg.client.default_response.clone()))
        }
        ClientChoice::Http => {
            if cfg.client.endpoint.is_empty() {
                return Err(ConfigError::Invalid(
                    "http client needs a client.endpoint".to_string(),
                )
                .into());
            }
            Box::new(HttpClient::new(cfg.client_config())?)
        }
    };
    Ok(match cache_dir {
        Some(dir) => Box::new(CachedClient::new(base, dir)?),
        None => base,
    })
}

// ---------------------------------------------------------------------------
// Reports.

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; absent for a single seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let std = if xs.len() < 2 {
        None
    } else {
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
            / (xs.len() - 1) as f64;
        Some(var.sqrt())
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unparseable_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine_after: Option<f64>,
    pub predictions_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unparseable_rate: Option<MeanStd>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine_after: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub paradigm: Paradigm,
    pub model: String,
    pub seeds: Vec<u64>,
    pub dataset: LoadReport,
    pub metrics: ReportMetrics,
    pub per_seed: Vec<SeedMetrics>,
    /// Gold x predicted counts over parsed predictions, summed across seeds.
    pub confusion: Vec<Vec<usize>>,
    /// Output-relative paths written during the run.
    pub artifacts: Vec<String>,
    /// Per-seed failures; a partial run still reports the seeds that worked.
    pub errors: Vec<String>,
    pub config: ExperimentConfig,
}

struct SeedOutcome {
    metrics: SeedMetrics,
    confusion: Vec<Vec<usize>>,
    predictions: Vec<NodePrediction>,
}

pub enum OwnedFeatures {
    Single(Tensor),
    Per { text: Tensor, image: Tensor },
}

impl OwnedFeatures {
    pub fn view(&self) -> Features<'_> {
        match self {
            OwnedFeatures::Single(x) => Features::Single(x),
            OwnedFeatures::Per { text, image } => Features::PerModality { text, image },
        }
    }
}

/// Branch models consume the two modalities separately; everything else gets
/// one fused matrix per the configured fusion mode.
pub fn gnn_features(
    graph: &MultimodalGraph,
    kind: ModelKind,
    heads: Option<&ProjectionHeads>,
    fusion: FusionMode,
) -> Result<OwnedFeatures, EncoderError> {
    if kind.is_multimodal() {
        Ok(OwnedFeatures::Per {
            text: fuse_features(graph, FusionMode::TextOnly, heads)?.features,
            image: fuse_features(graph, FusionMode::ImageOnly, heads)?.features,
        })
    } else {
        Ok(OwnedFeatures::Single(
            fuse_features(graph, fusion, heads)?.features,
        ))
    }
}

/// Per-node failures fold into outcomes so one flaky answer cannot abort a
/// long run, but a run where every node failed produced nothing; surface the
/// first error instead of reporting zero accuracy.
pub fn reject_total_failure(report: &PredictReport) -> Result<(), HarnessError> {
    if !report.predictions.is_empty() && report.failed == report.predictions.len() {
        let first = report
            .predictions
            .iter()
            .find_map(|p| p.error.as_deref())
            .unwrap_or("unknown error");
        return Err(HarnessError::Pipeline(format!(
            "every node failed; first error: {first}"
        )));
    }
    Ok(())
}

/// Similarity features for structure-aware prompting, on the configured
/// source; `None` when prompts are structure-free.
pub fn predictor_features(
    graph: &MultimodalGraph,
    cfg: &ExperimentConfig,
) -> Result<Option<Tensor>, HarnessError> {
    if cfg.predictor.structure == StructureMode::None {
        return Ok(None);
    }
    let mode = match cfg.predictor.source {
        SimilaritySource::Text => FusionMode::TextOnly,
        SimilaritySource::Image => FusionMode::ImageOnly,
        SimilaritySource::Fused => FusionMode::Concat,
    };
    Ok(Some(fuse_features(graph, mode, None)?.features))
}

fn gnn_seed_outcome(
    graph: &MultimodalGraph,
    features: Features<'_>,
    split: &SplitAssignment,
    cfg: &GnnConfig,
    seed: u64,
) -> Result<SeedOutcome, HarnessError> {
    let trained = gnn::train_node_classifier(graph, features, split, cfg)?;
    let out = gnn::predict(&trained, graph, features, &split.test)?;
    let gold: Vec<usize> = split.test.iter().map(|&v| graph.node(v).label).collect();
    let classes = graph.classes().len();
    let predictions: Vec<NodePrediction> = split
        .test
        .iter()
        .zip(&out.labels)
        .map(|(&v, &p)| NodePrediction {
            node: v,
            gold: graph.node(v).label,
            predicted: Some(p),
            outcome: OUTCOME_PARSED.to_string(),
            response: None,
            error: None,
        })
        .collect();
    Ok(SeedOutcome {
        metrics: SeedMetrics {
            seed,
            accuracy: accuracy(&out.labels, &gold)?,
            macro_f1: macro_f1(&out.labels, &gold, classes)?,
            unparseable_rate: None,
            best_epoch: trained.metrics.best_epoch,
            cosine_before: None,
            cosine_after: None,
            predictions_file: String::new(),
        },
        confusion: confusion(&out.labels, &gold, classes)?,
        predictions,
    })
}

fn empty_confusion(classes: usize) -> Vec<Vec<usize>> {
    vec![vec![0; classes]; classes]
}

fn run_seed(
    cfg: &ExperimentConfig,
    graph: &MultimodalGraph,
    client: &dyn VlmClient,
    seed: u64,
) -> Result<SeedOutcome, HarnessError> {
    let split = split_nodes(graph, cfg.split.ratios, seed)?;
    match cfg.paradigm {
        Paradigm::Encoder => {
            let ccfg = cfg.contrastive_config(seed);
            let (heads, enc_report) = match cfg.encoder.objective {
                Objective::Structure => train_structure_aware_encoder(graph, &ccfg)?,
                Objective::Clip => train_clip_aligned_encoder(graph, &ccfg)?,
            };
            let features = gnn_features(graph, cfg.model.kind, Some(&heads), cfg.model.fusion)?;
            let mut outcome =
                gnn_seed_outcome(graph, features.view(), &split, &cfg.gnn_config(seed), seed)?;
            outcome.metrics.cosine_before = Some(enc_report.cosine_before);
            outcome.metrics.cosine_after = Some(enc_report.cosine_after);
            Ok(outcome)
        }
        Paradigm::Aligner => {
            let features = gnn_features(graph, cfg.model.kind, None, FusionMode::Concat)?;
            gnn_seed_outcome(graph, features.view(), &split, &cfg.gnn_config(seed), seed)
        }
        Paradigm::Predictor => {
            let opts = cfg.predict_options();
            let features = predictor_features(graph, cfg)?;
            let report = predict_nodes(
                client,
                graph,
                &split.test,
                features.as_ref(),
                Some(&split),
                &opts,
            )?;
            reject_total_failure(&report)?;
            let classes = graph.classes().len();
            let parsed: Vec<(usize, usize)> = report
                .predictions
                .iter()
                .filter_map(|p| p.predicted.map(|pr| (pr, p.gold)))
                .collect();
            let (f1, conf) = if parsed.is_empty() {
                (0.0, empty_confusion(classes))
            } else {
                let preds: Vec<usize> = parsed.iter().map(|&(p, _)| p).collect();
                let gold: Vec<usize> = parsed.iter().map(|&(_, g)| g).collect();
                (
                    macro_f1(&preds, &gold, classes)?,
                    confusion(&preds, &gold, classes)?,
                )
            };
            let total = report.predictions.len();
            Ok(SeedOutcome {
                metrics: SeedMetrics {
                    seed,
                    accuracy: report.accuracy,
                    macro_f1: f1,
                    unparseable_rate: Some(report.unparseable as f64 / total as f64),
                    best_epoch: None,
                    cosine_before: None,
                    cosine_after: None,
                    predictions_file: String::new(),
                },
                confusion: conf,
                predictions: report.predictions,
            })
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("report values serialize");
    text.push('\n');
    fs::write(path, text).map_err(HarnessError::io(format!("writing {}", path.display())))
}

fn write_predictions(path: &Path, predictions: &[NodePrediction]) -> Result<(), HarnessError> {
    let mut text = String::new();
    for p in predictions {
        text.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(HarnessError::io(format!("writing {}", path.display())))
}

pub fn read_predictions(path: &Path) -> Result<Vec<NodePrediction>, HarnessError> {
    let raw = fs::read_to_string(path)
        .map_err(HarnessError::io(format!("reading {}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| {
            HarnessError::Pipeline(format!("{}:{}: bad prediction record: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

/// Metrics recomputed from stored prediction records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub total: usize,
    pub parsed: usize,
    pub unparseable: usize,
    pub ambiguous: usize,
    pub failed: usize,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Vec<Vec<usize>>>,
}

pub fn evaluate_predictions(
    predictions: &[NodePrediction],
    classes: Option<usize>,
) -> Result<Evaluation, HarnessError> {
    if predictions.is_empty() {
        return Err(HarnessError::Usage(
            "no prediction records to evaluate".to_string(),
        ));
    }
    let count = |outcome: &str| {
        predictions
            .iter()
            .filter(|p| p.outcome == outcome)
            .count()
    };
    let correct = predictions
        .iter()
        .filter(|p| p.predicted == Some(p.gold))
        .count();
    let parsed: Vec<(usize, usize)> = predictions
        .iter()
        .filter_map(|p| p.predicted.map(|pr| (pr, p.gold)))
        .collect();
    let (f1, conf) = match classes {
        Some(classes) if !parsed.is_empty() => {
            let preds: Vec<usize> = parsed.iter().map(|&(p, _)| p).collect();
            let gold: Vec<usize> = parsed.iter().map(|&(_, g)| g).collect();
            (
                Some(macro_f1(&preds, &gold, classes)?),
                Some(confusion(&preds, &gold, classes)?),
            )
        }
        _ => (None, None),
    };
    Ok(Evaluation {
        total: predictions.len(),
        parsed: count(OUTCOME_PARSED),
        unparseable: count(crate::predictor::OUTCOME_UNPARSEABLE),
        ambiguous: count(crate::predictor::OUTCOME_AMBIGUOUS),
        failed: count(crate::predictor::OUTCOME_FAILED),
        accuracy: correct as f64 / predictions.len() as f64,
        macro_f1: f1,
        confusion: conf,
    })
}

/// Runs the configured experiment and writes `report.json`, `report.md`,
/// per-seed prediction files, and the timing sidecar into `out_dir`.
///
/// A failing seed is recorded in the report's error list; the run only fails
/// outright when every seed does, or when setup (ingest, artifact
/// generation, IO) fails.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    client: &dyn VlmClient,
    out_dir: &Path,
) -> Result<ExperimentReport, HarnessError> {
    let started = std::time::Instant::now();
    fs::create_dir_all(out_dir)
        .map_err(HarnessError::io(format!("creating {}", out_dir.display())))?;
    let (graph, load_report) = load_graph(&cfg.dataset_paths(), cfg.domain())?;

    let mut artifacts = Vec::new();
    if cfg.paradigm == Paradigm::Aligner {
        let store = ArtifactStore::open(out_dir.join("artifacts"))?;
        let describable: Vec<usize> = (0..graph.node_count())
            .filter(|&v| graph.node(v).image_path.is_some())
            .collect();
        if !describable.is_empty() {
            align_nodes(
                client,
                &graph,
                &describable,
                &cfg.align_options(cfg.seeds[0]),
                &store,
            )?;
            artifacts.push("artifacts".to_string());
        }
    }

    let mut per_seed = Vec::new();
    let mut all_confusion = empty_confusion(graph.classes().len());
    let mut errors = Vec::new();
    for &seed in &cfg.seeds {
        match run_seed(cfg, &graph, client, seed) {
            Ok(mut outcome) => {
                let file = format!("predictions_seed{seed}.jsonl");
                write_predictions(&out_dir.join(&file), &outcome.predictions)?;
                outcome.metrics.predictions_file = file.clone();
                artifacts.push(file);
                for (acc_row, row) in all_confusion.iter_mut().zip(&outcome.confusion) {
                    for (a, &b) in acc_row.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                per_seed.push(outcome.metrics);
            }
            Err(e) => errors.push(format!("seed {seed}: {e}")),
        }
    }
    if per_seed.is_empty() {
        return Err(HarnessError::Pipeline(format!(
            "every seed failed: {}",
            errors.join("; ")
        )));
    }

    let collect = |f: fn(&SeedMetrics) -> f64| -> Vec<f64> { per_seed.iter().map(f).collect() };
    let maybe_mean = |xs: Vec<f64>| -> Option<f64> {
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    };
    let unparseable: Vec<f64> = per_seed.iter().filter_map(|m| m.unparseable_rate).collect();
    let metrics = ReportMetrics {
        accuracy: mean_std(&collect(|m| m.accuracy)),
        macro_f1: mean_std(&collect(|m| m.macro_f1)),
        unparseable_rate: if unparseable.is_empty() {
            None
        } else {
            Some(mean_std(&unparseable))
        },
        cosine_before: maybe_mean(per_seed.iter().filter_map(|m| m.cosine_before).collect()),
        cosine_after: maybe_mean(per_seed.iter().filter_map(|m| m.cosine_after).collect()),
    };

    let report = ExperimentReport {
        paradigm: cfg.paradigm,
        model: cfg.model.kind.as_str().to_string(),
        seeds: cfg.seeds.clone(),
        dataset: load_report,
        metrics,
        per_seed,
        confusion: all_confusion,
        artifacts,
        errors,
        config: cfg.clone(),
    };

    // Stored predictions must rescore to exactly the reported accuracy.
    for seed in &report.per_seed {
        let stored = read_predictions(&out_dir.join(&seed.predictions_file))?;
        let eval = evaluate_predictions(&stored, None)?;
        if eval.accuracy != seed.accuracy {
            return Err(HarnessError::Pipeline(format!(
                "seed {}: stored predictions rescore to {} but the report says {}",
                seed.seed, eval.accuracy, seed.accuracy
            )));
        }
    }

    write_json(&out_dir.join("report.json"), &report)?;
    fs::write(out_dir.join("report.md"), render_markdown(&report))
        .map_err(HarnessError::io("writing report.md"))?;
    write_json(
        &out_dir.join("report.meta.json"),
        &serde_json::json!({
            "created_at_unix": std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            "wall_clock_ms": started.elapsed().as_millis() as u64,
        }),
    )?;
    Ok(report)
}

fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

fn fmt_mean_std(m: &MeanStd) -> (String, String) {
    (
        fmt4(m.mean),
        m.std.map(fmt4).unwrap_or_else(|| "-".to_string()),
    )
}

pub fn render_markdown(report: &ExperimentReport) -> String {
    let mut md = String::new();
    md.push_str("# Experiment report\n\n");
    md.push_str(&format!("- paradigm: {}\n", report.paradigm.as_str()));
    md.push_str(&format!("- model: {}\n", report.model));
    md.push_str(&format!(
        "- seeds: {}\n",
        report
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    md.push_str(&format!(
        "- dataset: {} nodes, {} edges, {} classes\n\n",
        report.dataset.nodes, report.dataset.edges, report.dataset.classes
    ));

    md.push_str("| metric | mean | std |\n|---|---|---|\n");
    let mut metric_row = |name: &str, m: &MeanStd| {
        let (mean, std) = fmt_mean_std(m);
        md.push_str(&format!("| {name} | {mean} | {std} |\n"));
    };
    metric_row("accuracy", &report.metrics.accuracy);
    metric_row("macro_f1", &report.metrics.macro_f1);
    if let Some(u) = &report.metrics.unparseable_rate {
        metric_row("unparseable_rate", u);
    }
    for (name, value) in [
        ("cosine_before", report.metrics.cosine_before),
        ("cosine_after", report.metrics.cosine_after),
    ] {
        if let Some(v) = value {
            md.push_str(&format!("| {name} | {} | - |\n", fmt4(v)));
        }
    }

    md.push_str("\n## Per seed\n\n| seed | accuracy | macro_f1 | predictions |\n|---|---|---|---|\n");
    for m in &report.per_seed {
        md.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            m.seed,
            fmt4(m.accuracy),
            fmt4(m.macro_f1),
            m.predictions_file
        ));
    }

    md.push_str("\n## Confusion (gold x predicted, summed over seeds)\n\n");
    let classes = report.confusion.len();
    md.push_str("| gold\\pred |");
    for c in 0..classes {
        md.push_str(&format!(" {c} |"));
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(classes));
    md.push('\n');
    for (g, row) in report.confusion.iter().enumerate() {
        md.push_str(&format!("| {g} |"));
        for count in row {
            md.push_str(&format!(" {count} |"));
        }
        md.push('\n');
    }

    if !report.errors.is_empty() {
        md.push_str("\n## Errors\n\n");
        for e in &report.errors {
            md.push_str(&format!("- {e}\n"));
        }
    }

    md.push_str("\n## Artifacts\n\n");
    for a in &report.artifacts {
        md.push_str(&format!("- {a}\n"));
    }
    md
}

// ---------------------------------------------------------------------------
// Modality ablation and structure gain.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub text: MeanStd,
    pub image: MeanStd,
    pub concat: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Mean test accuracy per model kind and fusion mode over the given seeds.
/// Branch models bring their own per-modality fusion, so only single-matrix
/// kinds participate.
pub fn modality_ablation(
    graph: &MultimodalGraph,
    cfg: &ExperimentConfig,
) -> Result<AblationTable, HarnessError> {
    let mut rows = Vec::new();
    for &kind in &cfg.ablation.models {
        if kind.is_multimodal() {
            return Err(ConfigError::Invalid(format!(
                "modality ablation varies the fused input, which {} does not consume",
                kind.as_str()
            ))
            .into());
        }
        let cell = |mode: FusionMode| -> Result<MeanStd, HarnessError> {
            let mut accs = Vec::new();
            for &seed in &cfg.seeds {
                let split = split_nodes(graph, cfg.split.ratios, seed)?;
                let fused = fuse_features(graph, mode, None)?;
                let mut gcfg = cfg.gnn_config(seed);
                gcfg.model = kind;
                let trained = gnn::train_node_classifier(
                    graph,
                    Features::Single(&fused.features),
                    &split,
                    &gcfg,
                )?;
                accs.push(trained.metrics.test_accuracy);
            }
            Ok(mean_std(&accs))
        };
        rows.push(AblationRow {
            model: kind.as_str().to_string(),
            text: cell(FusionMode::TextOnly)?,
            image: cell(FusionMode::ImageOnly)?,
            concat: cell(FusionMode::Concat)?,
        });
    }
    Ok(AblationTable {
        seeds: cfg.seeds.clone(),
        rows,
    })
}

pub fn render_ablation_markdown(table: &AblationTable) -> String {
    let mut md = String::new();
    md.push_str("# Modality ablation\n\n");
    md.push_str(&format!(
        "- seeds: {}\n\n",
        table
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    md.push_str("| model | text | image | text+image |\n|---|---|---|---|\n");
    for row in &table.rows {
        let cell = |m: &MeanStd| match m.std {
            Some(std) => format!("{} ± {}", fmt4(m.mean), fmt4(std)),
            None => fmt4(m.mean),
        };
        md.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            row.model,
            cell(&row.text),
            cell(&row.image),
            cell(&row.concat)
        ));
    }
    md
}

/// Reads `[{"setting":…, "structure_aware":…, "accuracy":…}, …]` and returns
/// the gain: best aware accuracy minus best agnostic accuracy.
pub fn gain_from_results_file(path: &Path) -> Result<(f64, Vec<GainEntry>), HarnessError> {
    let raw = fs::read_to_string(path)
        .map_err(HarnessError::io(format!("reading {}", path.display())))?;
    let entries: Vec<GainEntry> = serde_json::from_str(&raw).map_err(|e| {
        HarnessError::Usage(format!("{}: bad results file: {e}", path.display()))
    })?;
    let gain = structure_gain(&entries)?;
    Ok((gain, entries))
}
