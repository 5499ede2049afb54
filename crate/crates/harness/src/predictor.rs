//! Predictor pipeline: category prompts (zero-shot, in-context, structural),
//! response parsing into class indices, per-node outcome bookkeeping, and
//! the fine-tuning dataset export.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mmgl_core::graph::{GraphError, MultimodalGraph, SplitAssignment, StructureSelectSpec};
use mmgl_core::prompt::{
    build_prediction_prompt, normalize_label, parse_label, ParseLabelError, PromptBundle,
    PromptError, PromptSegment, StructureMode,
};
use mmgl_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::client::{for_each_concurrent, ClientError, VlmClient};

#[derive(Debug, thiserror::Error)]
pub enum PredictError {
    #[error("no nodes to predict")]
    EmptyNodeSet,
    #[error("in-context exemplars need a split with a train set")]
    IclNeedsSplit,
    #[error("structure mode {0:?} needs node features for neighbor ranking")]
    MissingFeatures(&'static str),
    #[error("class names unusable for response parsing: {0}")]
    InvalidClasses(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    pub structure: StructureMode,
    pub spec: StructureSelectSpec,
    /// In-context exemplar budget: one train node per class, class-index
    /// order, up to this many. `None` is zero-shot.
    pub icl: Option<usize>,
    /// Retry an unparseable response once with an explicit answer-format
    /// instruction appended.
    pub retry_unparseable: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            structure: StructureMode::None,
            spec: StructureSelectSpec::default(),
            icl: None,
            retry_unparseable: false,
        }
    }
}

/// One node's outcome, flat enough for JSON-lines storage and independent
/// rescoring: `predicted` is present exactly when `outcome` is "parsed".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePrediction {
    pub node: usize,
    pub gold: usize,
    pub predicted: Option<usize>,
    pub outcome: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub const OUTCOME_PARSED: &str = "parsed";
pub const OUTCOME_UNPARSEABLE: &str = "unparseable";
pub const OUTCOME_AMBIGUOUS: &str = "ambiguous";
pub const OUTCOME_FAILED: &str = "failed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictReport {
    pub predictions: Vec<NodePrediction>,
    /// Correct over all requested nodes; anything unparsed counts as wrong.
    pub accuracy: f64,
    pub parsed: usize,
    pub unparseable: usize,
    pub ambiguous: usize,
    pub failed: usize,
}

fn class_names(graph: &MultimodalGraph) -> Result<Vec<String>, PredictError> {
    let names = graph.classes().to_vec();
    if names.is_empty() {
        return Err(PredictError::InvalidClasses(
            "empty class vocabulary".to_string(),
        ));
    }
    let mut seen = BTreeSet::new();
    for name in &names {
        let normalized = normalize_label(name);
        if normalized.is_empty() {
            return Err(PredictError::InvalidClasses(format!(
                "class {name:?} normalizes to nothing"
            )));
        }
        if !seen.insert(normalized) {
            return Err(PredictError::InvalidClasses(format!(
                "class {name:?} collides with another after normalization"
            )));
        }
    }
    Ok(names)
}

fn check_features(
    structure: StructureMode,
    features: Option<&Tensor>,
) -> Result<(), PredictError> {
    if structure != StructureMode::None && features.is_none() {
        return Err(PredictError::MissingFeatures(structure.as_str()));
    }
    Ok(())
}

/// One full prompt per class that has a train representative: the node's
/// prediction prompt with its gold label appended, lowest train id per
/// class, class-index order, capped at `budget`.
fn icl_exemplars(
    graph: &MultimodalGraph,
    split: &SplitAssignment,
    candidates: &[String],
    features: Option<&Tensor>,
    opts: &PredictOptions,
    budget: usize,
) -> Result<Vec<PromptBundle>, PredictError> {
    let mut exemplars = Vec::new();
    for (c, name) in candidates.iter().enumerate() {
        if exemplars.len() >= budget {
            break;
        }
        // Train ids are sorted, so the first hit is the lowest id.
        if let Some(&v) = split.train.iter().find(|&&v| graph.node(v).label == c) {
            let built = build_prediction_prompt(
                graph,
                v,
                candidates,
                opts.structure,
                &opts.spec,
                features,
                Some(name),
            )?;
            exemplars.push(built.bundle);
        }
    }
    Ok(exemplars)
}

fn failed(node: usize, gold: usize, error: String) -> NodePrediction {
    NodePrediction {
        node,
        gold,
        predicted: None,
        outcome: OUTCOME_FAILED.to_string(),
        response: None,
        error: Some(error),
    }
}

fn scored(node: usize, gold: usize, response: String, candidates: &[String]) -> NodePrediction {
    let (predicted, outcome) = match parse_label(&response, candidates) {
        Ok(i) => (Some(i), OUTCOME_PARSED),
        Err(ParseLabelError::Ambiguous(_)) => (None, OUTCOME_AMBIGUOUS),
        Err(_) => (None, OUTCOME_UNPARSEABLE),
    };
    NodePrediction {
        node,
        gold,
        predicted,
        outcome: outcome.to_string(),
        response: Some(response),
        error: None,
    }
}

/// Classifies `nodes` through the client. Per-node failures become recorded
/// outcomes, never aborts; every non-parsed outcome scores as incorrect.
pub fn predict_nodes<C: VlmClient + ?Sized>(
    client: &C,
    graph: &MultimodalGraph,
    nodes: &[usize],
    features: Option<&Tensor>,
    split: Option<&SplitAssignment>,
    opts: &PredictOptions,
) -> Result<PredictReport, PredictError> {
    if nodes.is_empty() {
        return Err(PredictError::EmptyNodeSet);
    }
    for &v in nodes {
        if v >= graph.node_count() {
            return Err(GraphError::NodeOutOfRange(v).into());
        }
    }
    let candidates = class_names(graph)?;
    check_features(opts.structure, features)?;
    let exemplars = match opts.icl {
        Some(budget) => {
            let split = split.ok_or(PredictError::IclNeedsSplit)?;
            icl_exemplars(graph, split, &candidates, features, opts, budget)?
        }
        None => Vec::new(),
    };
    let retry_instruction = format!(
        "\n\nAnswer with exactly one of: {}.",
        candidates.join(", ")
    );

    let predictions = for_each_concurrent(
        nodes.to_vec(),
        client.concurrency_limit(),
        |v: usize| -> NodePrediction {
            let gold = graph.node(v).label;
            let built = match build_prediction_prompt(
                graph,
                v,
                &candidates,
                opts.structure,
                &opts.spec,
                features,
                None,
            ) {
                Ok(b) => b,
                Err(e) => return failed(v, gold, e.to_string()),
            };
            let bundle = if exemplars.is_empty() {
                built.bundle
            } else {
                let mut parts = exemplars.clone();
                parts.push(built.bundle);
                PromptBundle::join(&parts, "\n\n")
            };
            let response = match client.complete(&bundle) {
                Ok(r) => r,
                Err(e) => return failed(v, gold, e.to_string()),
            };
            let mut prediction = scored(v, gold, response, &candidates);
            if prediction.outcome == OUTCOME_UNPARSEABLE && opts.retry_unparseable {
                let nudged = PromptBundle::join(
                    &[bundle, PromptBundle::text_only(&retry_instruction)],
                    "",
                );
                match client.complete(&nudged) {
                    Ok(r) => prediction = scored(v, gold, r, &candidates),
                    Err(e) => prediction = failed(v, gold, e.to_string()),
                }
            }
            prediction
        },
    );

    let count = |outcome: &str| predictions.iter().filter(|p| p.outcome == outcome).count();
    let correct = predictions
        .iter()
        .filter(|p| p.predicted == Some(p.gold))
        .count();
    Ok(PredictReport {
        accuracy: correct as f64 / predictions.len() as f64,
        parsed: count(OUTCOME_PARSED),
        unparseable: count(OUTCOME_UNPARSEABLE),
        ambiguous: count(OUTCOME_AMBIGUOUS),
        failed: count(OUTCOME_FAILED),
        predictions,
    })
}

/// Writes one fine-tuning record per train node (ascending id) as JSON
/// lines and returns the record count. The prompt omits the label; the
/// target carries it in the frozen "Assistant: <label>" form, so prompt +
/// "\n\n" + target reproduces the with-label rendering exactly.
pub fn export_sft_dataset(
    graph: &MultimodalGraph,
    split: &SplitAssignment,
    features: Option<&Tensor>,
    opts: &PredictOptions,
    out_path: &Path,
) -> Result<usize, PredictError> {
    let candidates = class_names(graph)?;
    check_features(opts.structure, features)?;
    let io = |source| PredictError::Io {
        path: out_path.to_path_buf(),
        source,
    };
    let mut w = std::io::BufWriter::new(fs::File::create(out_path).map_err(io)?);
    for &v in &split.train {
        let built = build_prediction_prompt(
            graph,
            v,
            &candidates,
            opts.structure,
            &opts.spec,
            features,
            None,
        )?;
        let content: Vec<serde_json::Value> = built
            .bundle
            .segments
            .iter()
            .map(|seg| match seg {
                PromptSegment::Text(t) => serde_json::json!({"type": "text", "text": t}),
                PromptSegment::Image(p) => serde_json::json!({"type": "image", "path": p}),
            })
            .collect();
        let record = serde_json::json!({
            "messages": [{"role": "user", "content": content}],
            "images": built.bundle.image_paths(),
            "target": format!("Assistant: {}", candidates[graph.node(v).label]),
            "node_id": v,
            "neighbors": built.neighbors,
        });
        writeln!(w, "{record}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(split.train.len())
}
