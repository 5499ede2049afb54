//! Aligner pipeline: per-node image descriptions, multimodal summaries, and
//! their structural variants, persisted as write-once artifact files.
//!
//! Each artifact is keyed by a digest of everything that went into it (model
//! fingerprint, node text, image bytes, neighbor draw), so reruns skip
//! finished nodes and a changed input surfaces as a stale-artifact error
//! instead of a silent overwrite.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;

use mmgl_core::graph::{GraphError, MultimodalGraph};
use mmgl_core::prompt::{
    build_aligner_prompt, build_image_description_prompt, fallback_sentence, DatasetDomain,
    PromptError, TemplateBindings,
};
use mmgl_core::rng::derive_seed;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{for_each_concurrent, ClientError, RequestFingerprint, VlmClient};

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error("node {node} has no image to describe")]
    NoImage { node: usize },
    #[error("node {node} has no image description to summarize")]
    MissingDescription { node: usize },
    #[error("artifact for node {node} was built from different inputs; remove {path} or use a fresh artifact directory")]
    StaleArtifact { node: usize, path: PathBuf },
    #[error("{path}: corrupt artifact: {reason}")]
    Corrupt { path: PathBuf, reason: String },
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignOptions {
    pub structural: bool,
    /// Neighbors drawn per node for the structural summary.
    pub neighbor_sample: usize,
    pub seed: u64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            structural: false,
            neighbor_sample: 5,
            seed: 0,
        }
    }
}

/// One aligned node: its image description, summary, and (for structural
/// runs) the structure-aware summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignerArtifact {
    pub node_id: usize,
    pub t_i: String,
    pub t_s: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_ss: Option<String>,
    pub input_digest: String,
}

/// Directory of `node_<id>.json` files, one per aligned node, write-once.
pub struct ArtifactStore {
    dir: PathBuf,
}

impl ArtifactStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, AlignError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| AlignError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(ArtifactStore { dir })
    }

    pub fn path_for(&self, node: usize) -> PathBuf {
        self.dir.join(format!("node_{node}.json"))
    }

    pub fn load(&self, node: usize) -> Result<Option<AlignerArtifact>, AlignError> {
        let path = self.path_for(node);
        let raw = match fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(AlignError::Io { path, source }),
        };
        let artifact: AlignerArtifact =
            serde_json::from_str(&raw).map_err(|e| AlignError::Corrupt {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        if artifact.node_id != node {
            return Err(AlignError::Corrupt {
                path,
                reason: format!("file claims node {}", artifact.node_id),
            });
        }
        Ok(Some(artifact))
    }

    /// Write-once: same-digest rewrites are no-ops, differing inputs error.
    pub fn store(&self, artifact: &AlignerArtifact) -> Result<(), AlignError> {
        let path = self.path_for(artifact.node_id);
        if let Some(existing) = self.load(artifact.node_id)? {
            if existing.input_digest == artifact.input_digest {
                return Ok(());
            }
            return Err(AlignError::StaleArtifact {
                node: artifact.node_id,
                path,
            });
        }
        let json = serde_json::to_string_pretty(artifact).expect("artifact serializes");
        let tmp = self.dir.join(format!(
            ".node_{}.tmp{}",
            artifact.node_id,
            std::process::id()
        ));
        let io = |path: PathBuf| move |source| AlignError::Io { path, source };
        fs::write(&tmp, json).map_err(io(tmp.clone()))?;
        fs::rename(&tmp, &path).map_err(io(path))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    /// Artifacts generated this run.
    pub aligned: usize,
    /// Targets whose stored artifact already matched its input digest.
    pub reused: usize,
    /// Image descriptions generated (targets plus their usable neighbors).
    pub descriptions: usize,
    /// Structural summaries that fell back to the no-neighbor sentence.
    pub fallbacks: usize,
}

fn domain_of(graph: &MultimodalGraph) -> Result<DatasetDomain, AlignError> {
    graph.domain().ok_or(PromptError::UnknownDomain.into())
}

fn sampled_neighbors(
    graph: &MultimodalGraph,
    v: usize,
    opts: &AlignOptions,
) -> Result<Vec<usize>, AlignError> {
    let mut ns = mmgl_core::graph::sample_neighbors(
        graph,
        v,
        opts.neighbor_sample,
        derive_seed(opts.seed, v as u64),
    )?;
    // Joins and digests want id order, not draw order.
    ns.sort_unstable();
    Ok(ns)
}

fn image_sha256(path: &str) -> Result<String, AlignError> {
    let bytes = fs::read(path).map_err(|source| AlignError::Io {
        path: PathBuf::from(path),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digest of every input that shapes a node's artifact. Image files enter by
/// content, so relocating a dataset does not invalidate its artifacts.
fn input_digest(
    fp: &RequestFingerprint,
    graph: &MultimodalGraph,
    v: usize,
    opts: &AlignOptions,
    neighbors: &[usize],
) -> Result<String, AlignError> {
    let node = graph.node(v);
    let image = match &node.image_path {
        Some(p) => Some(image_sha256(p)?),
        None => None,
    };
    let canonical = serde_json::json!({
        "model": fp.model_name,
        "temperature": fp.temperature,
        "max_tokens": fp.max_tokens,
        "node": v,
        "text": node.text,
        "image_sha256": image,
        "structural": opts.structural,
        "neighbor_sample": opts.neighbor_sample,
        "seed": opts.seed,
        "neighbors": neighbors,
    });
    let encoded = serde_json::to_vec(&canonical).expect("digest input serializes");
    Ok(hex::encode(Sha256::digest(&encoded)))
}

/// T^I: asks the client to describe the node's image.
pub fn generate_image_description<C: VlmClient + ?Sized>(
    client: &C,
    graph: &MultimodalGraph,
    v: usize,
) -> Result<String, AlignError> {
    if v >= graph.node_count() {
        return Err(GraphError::NodeOutOfRange(v).into());
    }
    if graph.node(v).image_path.is_none() {
        return Err(AlignError::NoImage { node: v });
    }
    let bundle = build_image_description_prompt(graph, v)?;
    Ok(client.complete(&bundle)?)
}

/// Neighbor slot strings for the structural template: texts and resolved
/// descriptions joined "; " in id order, or the domain fallback sentence for
/// whichever side has nothing.
fn structural_slots(
    graph: &MultimodalGraph,
    neighbors: &[usize],
    descriptions: &BTreeMap<usize, String>,
    domain: DatasetDomain,
) -> (String, String) {
    let fallback = fallback_sentence(domain);
    if neighbors.is_empty() {
        return (fallback.to_string(), fallback.to_string());
    }
    let texts: Vec<&str> = neighbors
        .iter()
        .map(|&u| graph.node(u).text.as_str())
        .collect();
    let described: Vec<&str> = neighbors
        .iter()
        .filter_map(|u| descriptions.get(u).map(|s| s.as_str()))
        .collect();
    let images = if described.is_empty() {
        fallback.to_string()
    } else {
        described.join("; ")
    };
    (texts.join("; "), images)
}

/// T^S (or T^SS when `structural`): renders the aligner template over the
/// node's text and stored description and asks the client for the summary.
pub fn summarize_node<C: VlmClient + ?Sized>(
    client: &C,
    graph: &MultimodalGraph,
    v: usize,
    structural: bool,
    opts: &AlignOptions,
    descriptions: &BTreeMap<usize, String>,
) -> Result<String, AlignError> {
    let domain = domain_of(graph)?;
    let t_i = descriptions
        .get(&v)
        .ok_or(AlignError::MissingDescription { node: v })?;
    let mut bindings = TemplateBindings {
        text_information: Some(graph.node(v).text.clone()),
        image_summary: Some(t_i.clone()),
        ..TemplateBindings::default()
    };
    if structural {
        let ns = sampled_neighbors(graph, v, opts)?;
        let (text, images) = structural_slots(graph, &ns, descriptions, domain);
        bindings.neighbor_text = Some(text);
        bindings.neighbor_image_summary = Some(images);
    }
    let bundle = build_aligner_prompt(domain, structural, &bindings)?;
    Ok(client.complete(&bundle)?)
}

/// Runs the aligner over `nodes`: image descriptions first (targets plus any
/// structural neighbors that have images), then summaries, then write-once
/// artifact persistence. Nodes whose stored artifact already matches its
/// input digest are skipped wholesale.
pub fn align_nodes<C: VlmClient + ?Sized>(
    client: &C,
    graph: &MultimodalGraph,
    nodes: &[usize],
    opts: &AlignOptions,
    store: &ArtifactStore,
) -> Result<AlignReport, AlignError> {
    domain_of(graph)?;
    for &v in nodes {
        if v >= graph.node_count() {
            return Err(GraphError::NodeOutOfRange(v).into());
        }
    }
    for &v in nodes {
        if graph.node(v).image_path.is_none() {
            return Err(AlignError::NoImage { node: v });
        }
    }

    let mut report = AlignReport::default();
    let mut pending: Vec<(usize, String)> = Vec::new();
    let mut neighbor_lists: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &v in nodes {
        let ns = if opts.structural {
            sampled_neighbors(graph, v, opts)?
        } else {
            Vec::new()
        };
        let digest = input_digest(client.fingerprint(), graph, v, opts, &ns)?;
        match store.load(v)? {
            Some(existing) if existing.input_digest == digest => report.reused += 1,
            Some(_) => {
                return Err(AlignError::StaleArtifact {
                    node: v,
                    path: store.path_for(v),
                })
            }
            None => {
                neighbor_lists.insert(v, ns);
                pending.push((v, digest));
            }
        }
    }

    let mut want: BTreeSet<usize> = pending.iter().map(|&(v, _)| v).collect();
    for ns in neighbor_lists.values() {
        want.extend(ns.iter().filter(|&&u| graph.node(u).image_path.is_some()));
    }
    let described = for_each_concurrent(
        want.into_iter().collect(),
        client.concurrency_limit(),
        |v: usize| generate_image_description(client, graph, v).map(|text| (v, text)),
    );
    let mut descriptions = BTreeMap::new();
    for result in described {
        let (v, text) = result?;
        descriptions.insert(v, text);
    }
    report.descriptions = descriptions.len();

    if opts.structural {
        for (v, _) in &pending {
            let ns = &neighbor_lists[v];
            if ns.iter().all(|u| !descriptions.contains_key(u)) {
                report.fallbacks += 1;
            }
        }
    }

    let summarized = for_each_concurrent(
        pending,
        client.concurrency_limit(),
        |(v, digest): (usize, String)| -> Result<AlignerArtifact, AlignError> {
            let t_s = summarize_node(client, graph, v, false, opts, &descriptions)?;
            let t_ss = if opts.structural {
                Some(summarize_node(client, graph, v, true, opts, &descriptions)?)
            } else {
                None
            };
            Ok(AlignerArtifact {
                node_id: v,
                t_i: descriptions[&v].clone(),
                t_s,
                t_ss,
                input_digest: digest,
            })
        },
    );
    for result in summarized {
        store.store(&result?)?;
        report.aligned += 1;
    }
    Ok(report)
}

/// Reads back the artifacts for `nodes`, erroring when one is missing.
pub fn load_artifacts(store: &ArtifactStore, nodes: &[usize]) -> Result<Vec<AlignerArtifact>, AlignError> {
    nodes
        .iter()
        .map(|&v| {
            store
                .load(v)?
                .ok_or(AlignError::MissingDescription { node: v })
        })
        .collect()
}
