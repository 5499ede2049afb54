//! Undirected multimodal graphs: node records, per-modality embedding tables,
//! deterministic splits, and neighbor selection.
//!
//! Node ids must form `0..n` and double as row indices into the text
//! embedding table and the feature matrices used elsewhere. Image embeddings
//! are stored compactly; a node points into that table via `image_row`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::prompt::DatasetDomain;
use crate::rng::{rng_from_seed, shuffle};
use crate::tensor::{cosine_similarity, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("node ids are not a permutation of 0..{expected} (saw id {saw})")]
    IdsNotContiguous { expected: usize, saw: usize },
    #[error("duplicate node id {0}")]
    DuplicateNodeId(usize),
    #[error("node {node}: label index {label} out of range for {classes} classes")]
    UnknownLabel {
        node: usize,
        label: usize,
        classes: usize,
    },
    #[error("node {node}: image row {row} out of range for image table with {rows} rows")]
    MissingEmbedding { node: usize, row: usize, rows: usize },
    #[error("node {node} has no text, image row, or image path")]
    AttributelessNode { node: usize },
    #[error("edge ({src}, {dst}) references a node outside 0..{nodes}")]
    EdgeOutOfRange { src: usize, dst: usize, nodes: usize },
    #[error("{modality} table has {rows} rows, expected {expected}")]
    TableSizeMismatch {
        modality: Modality,
        rows: usize,
        expected: usize,
    },
    #[error("embedding table dim must be positive")]
    ZeroDim,
    #[error("embedding data length {len} does not match {rows} x {dim}")]
    DataLengthMismatch { len: usize, rows: usize, dim: usize },
    #[error("split ratios {0:?} must be positive and sum to 1")]
    BadRatios([f64; 3]),
    #[error("node {0} out of range")]
    NodeOutOfRange(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Modality {
    Text,
    Image,
}

impl core::fmt::Display for Modality {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Image => "image",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NodeRecord {
    pub id: usize,
    pub text: String,
    pub label: usize,
    pub image_row: Option<usize>,
    pub image_path: Option<String>,
}

impl NodeRecord {
    pub fn has_image(&self) -> bool {
        self.image_row.is_some() || self.image_path.is_some()
    }
}

/// Frozen backbone embeddings for one modality, row-major f32.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub modality: Modality,
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(
        modality: Modality,
        rows: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self, GraphError> {
        if dim == 0 {
            return Err(GraphError::ZeroDim);
        }
        if data.len() != rows * dim {
            return Err(GraphError::DataLengthMismatch {
                len: data.len(),
                rows,
                dim,
            });
        }
        Ok(EmbeddingTable {
            modality,
            rows,
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Edge bookkeeping from graph assembly: inputs silently tolerated but worth
/// surfacing in load reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AssemblyCounts {
    pub self_loops_dropped: usize,
    pub duplicate_edges_dropped: usize,
}

#[derive(Debug, Clone)]
pub struct MultimodalGraph {
    nodes: Vec<NodeRecord>,
    classes: Vec<String>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    edge_count: usize,
    tables: BTreeMap<Modality, EmbeddingTable>,
    domain: Option<DatasetDomain>,
}

impl MultimodalGraph {
    /// Validates and indexes a graph. Node records may arrive in any order
    /// but their ids must cover `0..n` exactly. Self-loops and duplicate
    /// edges are dropped and counted. A text table must have one row per
    /// node; the image table is compact and indexed through `image_row`.
    pub fn assemble(
        mut nodes: Vec<NodeRecord>,
        edges: &[(usize, usize)],
        classes: Vec<String>,
        tables: Vec<EmbeddingTable>,
        domain: Option<DatasetDomain>,
    ) -> Result<(Self, AssemblyCounts), GraphError> {
        let n = nodes.len();
        nodes.sort_by_key(|r| r.id);
        for (i, rec) in nodes.iter().enumerate() {
            if rec.id >= n {
                return Err(GraphError::IdsNotContiguous {
                    expected: n,
                    saw: rec.id,
                });
            }
            if rec.id != i {
                return Err(GraphError::DuplicateNodeId(rec.id));
            }
            if rec.label >= classes.len() {
                return Err(GraphError::UnknownLabel {
                    node: rec.id,
                    label: rec.label,
                    classes: classes.len(),
                });
            }
            if rec.text.is_empty() && !rec.has_image() {
                return Err(GraphError::AttributelessNode { node: rec.id });
            }
        }

        let mut table_map = BTreeMap::new();
        for table in tables {
            if table.modality == Modality::Text && table.rows != n {
                return Err(GraphError::TableSizeMismatch {
                    modality: Modality::Text,
                    rows: table.rows,
                    expected: n,
                });
            }
            table_map.insert(table.modality, table);
        }
        if let Some(image) = table_map.get(&Modality::Image) {
            for rec in &nodes {
                if let Some(row) = rec.image_row {
                    if row >= image.rows {
                        return Err(GraphError::MissingEmbedding {
                            node: rec.id,
                            row,
                            rows: image.rows,
                        });
                    }
                }
            }
        }

        let mut counts = AssemblyCounts::default();
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(src, dst) in edges {
            if src >= n || dst >= n {
                return Err(GraphError::EdgeOutOfRange { src, dst, nodes: n });
            }
            if src == dst {
                counts.self_loops_dropped += 1;
                continue;
            }
            adjacency[src].push(dst);
            adjacency[dst].push(src);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        let mut edge_count = 0;
        for list in &mut adjacency {
            list.sort_unstable();
            let before = list.len();
            list.dedup();
            counts.duplicate_edges_dropped += before - list.len();
            edge_count += list.len();
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        // Each dropped duplicate was counted from both endpoints.
        counts.duplicate_edges_dropped /= 2;
        edge_count /= 2;

        Ok((
            MultimodalGraph {
                nodes,
                classes,
                offsets,
                neighbors,
                edge_count,
                tables: table_map,
                domain,
            },
            counts,
        ))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Unique undirected edges.
    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn node(&self, v: usize) -> &NodeRecord {
        &self.nodes[v]
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn table(&self, modality: Modality) -> Option<&EmbeddingTable> {
        self.tables.get(&modality)
    }

    pub fn domain(&self) -> Option<DatasetDomain> {
        self.domain
    }

    /// Iterates each undirected edge once, as `(u, v)` with `u < v`, in
    /// ascending order.
    pub fn undirected_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.node_count())
            .flat_map(move |u| self.neighbors(u).iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
    }

    /// The frozen backbone row for a node in one modality. Text rows are
    /// indexed by node id; image rows go through `image_row`. `None` when the
    /// table is absent or the node has no row in it.
    pub fn modality_row(&self, v: usize, modality: Modality) -> Option<&[f32]> {
        let table = self.tables.get(&modality)?;
        match modality {
            Modality::Text => Some(table.row(v)),
            Modality::Image => self.nodes[v].image_row.map(|r| table.row(r)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl SplitAssignment {
    pub fn contains_train(&self, v: usize) -> bool {
        self.train.binary_search(&v).is_ok()
    }

    pub fn contains_val(&self, v: usize) -> bool {
        self.val.binary_search(&v).is_ok()
    }

    pub fn contains_test(&self, v: usize) -> bool {
        self.test.binary_search(&v).is_ok()
    }
}

/// Seeded shuffle split. Validation and test sizes are `round(ratio * n)`
/// (clamped so they never exceed `n` combined); train takes the remainder.
/// The returned id sets are sorted.
pub fn split_nodes(
    graph: &MultimodalGraph,
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment, GraphError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) || libm::fabs(sum - 1.0) > 1.0e-9 {
        return Err(GraphError::BadRatios(ratios));
    }
    let n = graph.node_count();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(seed);
    shuffle(&mut rng, &mut order);

    let mut n_val = libm::round(ratios[1] * n as f64) as usize;
    n_val = n_val.min(n);
    let mut n_test = libm::round(ratios[2] * n as f64) as usize;
    n_test = n_test.min(n - n_val);
    let n_train = n - n_val - n_test;

    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut val: Vec<usize> = order[n_train..n_train + n_val].to_vec();
    let mut test: Vec<usize> = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitAssignment {
        train,
        val,
        test,
        seed,
        ratios,
    })
}

/// Up to `m` distinct neighbors of `v`, uniform without replacement, in an
/// order fixed by the seed.
pub fn sample_neighbors(
    graph: &MultimodalGraph,
    v: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<usize>, GraphError> {
    if v >= graph.node_count() {
        return Err(GraphError::NodeOutOfRange(v));
    }
    let mut pool: Vec<usize> = graph.neighbors(v).to_vec();
    let mut rng = rng_from_seed(seed);
    shuffle(&mut rng, &mut pool);
    pool.truncate(m);
    Ok(pool)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SimilaritySource {
    Text,
    Image,
    Fused,
}

/// How structure-aware prompt variants pick their neighbors.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StructureSelectSpec {
    pub k: usize,
    pub hop: usize,
    pub source: SimilaritySource,
}

impl Default for StructureSelectSpec {
    fn default() -> Self {
        StructureSelectSpec {
            k: 3,
            hop: 1,
            source: SimilaritySource::Fused,
        }
    }
}

/// The `k` nodes within `hop` hops of `v` (excluding `v`) whose feature rows
/// have the highest cosine similarity to `v`'s row. Ties break toward the
/// lower node id; fewer than `k` candidates returns them all.
pub fn top_k_similar_neighbors(
    graph: &MultimodalGraph,
    v: usize,
    spec: &StructureSelectSpec,
    features: &Tensor,
) -> Result<Vec<usize>, GraphError> {
    if v >= graph.node_count() {
        return Err(GraphError::NodeOutOfRange(v));
    }
    if features.rows() != graph.node_count() {
        return Err(GraphError::TableSizeMismatch {
            modality: Modality::Text,
            rows: features.rows(),
            expected: graph.node_count(),
        });
    }
    let mut visited = vec![false; graph.node_count()];
    visited[v] = true;
    let mut frontier = vec![v];
    let mut candidates: Vec<usize> = Vec::new();
    for _ in 0..spec.hop {
        let mut next = Vec::new();
        for &u in &frontier {
            for &w in graph.neighbors(u) {
                if !visited[w] {
                    visited[w] = true;
                    candidates.push(w);
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    let anchor = features.row(v);
    let mut scored: Vec<(f32, usize)> = candidates
        .into_iter()
        .map(|u| {
            // Rows of one matrix: lengths always agree.
            let sim = cosine_similarity(anchor, features.row(u)).unwrap();
            (sim, u)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(spec.k);
    Ok(scored.into_iter().map(|(_, u)| u).collect())
}
