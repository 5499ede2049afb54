//! Structure-aware token assembly: pooled neighbor tokens, projection into
//! a language model's token space, and per-node token blocks ordered by the
//! similarity ranking from graph-core.
//!
//! Raw patch/token embedding matrices arrive precomputed (one matrix per
//! node per modality); backbone execution is out of scope.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::encoder::{fuse_features, EncoderError, FusionMode, ProjectionHeads};
use crate::graph::{top_k_similar_neighbors, GraphError, Modality, MultimodalGraph, StructureSelectSpec};
use crate::optim::Parameter;
use crate::rng::SeedRng;
use crate::tensor::{NumericsError, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TokenError {
    #[error("no token source for {0} (node {1})")]
    ModalityUnavailable(Modality, usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Mean over patch rows: one compact visual token per image.
pub fn neighbor_visual_token(patch_embeddings: &Tensor) -> Result<Vec<f32>, NumericsError> {
    if patch_embeddings.rows() == 0 {
        return Err(NumericsError::EmptyInput {
            op: "neighbor_visual_token",
        });
    }
    patch_embeddings.mean_rows()
}

/// Mean over final-layer token rows: one textual token per node.
pub fn neighbor_text_token(token_embeddings: &Tensor) -> Result<Vec<f32>, NumericsError> {
    if token_embeddings.rows() == 0 {
        return Err(NumericsError::EmptyInput {
            op: "neighbor_text_token",
        });
    }
    token_embeddings.mean_rows()
}

/// Linear map from pooled-token space into the model's token embedding
/// space.
#[derive(Debug, Clone)]
pub struct TokenProjector {
    pub weight: Parameter,
}

impl TokenProjector {
    pub fn new(weight: Tensor) -> Self {
        TokenProjector {
            weight: Parameter::new("token_proj", weight),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(Tensor::from_fn(dim, dim, |r, c| if r == c { 1.0 } else { 0.0 }))
    }

    pub fn seeded(d_in: usize, d_llm: usize, rng: &mut SeedRng) -> Self {
        TokenProjector {
            weight: Parameter::fan_in_uniform("token_proj", d_in, d_llm, rng),
        }
    }

    pub fn d_llm(&self) -> usize {
        self.weight.value().cols()
    }
}

/// `z = h . W`, length `d_llm`.
pub fn project_to_token_space(h: &[f32], proj: &TokenProjector) -> Result<Vec<f32>, NumericsError> {
    let w = proj.weight.value();
    if h.len() != w.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "project_to_token_space",
            lhs: (1, h.len()),
            rhs: w.shape(),
        });
    }
    let mut z = Vec::with_capacity(w.cols());
    for c in 0..w.cols() {
        let mut acc = 0.0f64;
        for (r, &hv) in h.iter().enumerate() {
            acc += hv as f64 * w.get(r, c) as f64;
        }
        z.push(acc as f32);
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenModality {
    Text,
    Image,
    Both,
}

impl TokenModality {
    fn wants_text(&self) -> bool {
        matches!(self, TokenModality::Text | TokenModality::Both)
    }

    fn wants_image(&self) -> bool {
        matches!(self, TokenModality::Image | TokenModality::Both)
    }
}

/// Pool each neighbor's matrix into its own token (default), or pool the
/// stacked neighborhood into a single token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolingScope {
    #[default]
    PerNeighbor,
    AcrossNeighborhood,
}

/// Raw embedding matrices keyed by node id, one map per modality.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenSources<'a> {
    pub text: Option<&'a BTreeMap<usize, Tensor>>,
    pub image: Option<&'a BTreeMap<usize, Tensor>>,
}

/// Pooled neighbor tokens for one node. Token rows follow `neighbors`
/// (similarity rank order); with [`PoolingScope::AcrossNeighborhood`] each
/// present matrix has a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureTokenBlock {
    pub node: usize,
    pub neighbors: Vec<usize>,
    pub scope: PoolingScope,
    pub text_tokens: Option<Tensor>,
    pub visual_tokens: Option<Tensor>,
}

fn pool_neighbors(
    neighbors: &[usize],
    source: &BTreeMap<usize, Tensor>,
    modality: Modality,
    scope: PoolingScope,
    pool: fn(&Tensor) -> Result<Vec<f32>, NumericsError>,
) -> Result<Tensor, TokenError> {
    let matrices: Vec<&Tensor> = neighbors
        .iter()
        .map(|&u| {
            source
                .get(&u)
                .ok_or(TokenError::ModalityUnavailable(modality, u))
        })
        .collect::<Result<_, _>>()?;
    match scope {
        PoolingScope::PerNeighbor => {
            let mut rows: Vec<Vec<f32>> = Vec::with_capacity(matrices.len());
            for m in &matrices {
                rows.push(pool(m)?);
            }
            rows_to_tensor(rows)
        }
        PoolingScope::AcrossNeighborhood => {
            if matrices.is_empty() {
                return Ok(Tensor::zeros(0, 0));
            }
            let dim = matrices[0].cols();
            let total: usize = matrices.iter().map(|m| m.rows()).sum();
            let mut stacked = Tensor::zeros(total, dim);
            let mut at = 0;
            for m in &matrices {
                if m.cols() != dim {
                    return Err(NumericsError::ShapeMismatch {
                        op: "assemble_structure_tokens",
                        lhs: (m.rows(), m.cols()),
                        rhs: (m.rows(), dim),
                    }
                    .into());
                }
                for r in 0..m.rows() {
                    stacked.row_mut(at).copy_from_slice(m.row(r));
                    at += 1;
                }
            }
            rows_to_tensor(alloc::vec![pool(&stacked)?])
        }
    }
}

fn rows_to_tensor(rows: Vec<Vec<f32>>) -> Result<Tensor, TokenError> {
    if rows.is_empty() {
        return Ok(Tensor::zeros(0, 0));
    }
    let dim = rows[0].len();
    let mut out = Tensor::zeros(rows.len(), dim);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(NumericsError::ShapeMismatch {
                op: "assemble_structure_tokens",
                lhs: (1, row.len()),
                rhs: (1, dim),
            }
            .into());
        }
        out.row_mut(i).copy_from_slice(row);
    }
    Ok(out)
}

/// Select top-k similar neighbors and pool their raw matrices into token
/// blocks for the requested modalities.
pub fn assemble_structure_tokens(
    graph: &MultimodalGraph,
    v: usize,
    spec: &StructureSelectSpec,
    modality: TokenModality,
    sources: &TokenSources<'_>,
    features: &Tensor,
    scope: PoolingScope,
) -> Result<StructureTokenBlock, TokenError> {
    let neighbors = top_k_similar_neighbors(graph, v, spec, features)?;
    let text_tokens = if modality.wants_text() {
        let source = sources
            .text
            .ok_or(TokenError::ModalityUnavailable(Modality::Text, v))?;
        Some(pool_neighbors(
            &neighbors,
            source,
            Modality::Text,
            scope,
            neighbor_text_token,
        )?)
    } else {
        None
    };
    let visual_tokens = if modality.wants_image() {
        let source = sources
            .image
            .ok_or(TokenError::ModalityUnavailable(Modality::Image, v))?;
        Some(pool_neighbors(
            &neighbors,
            source,
            Modality::Image,
            scope,
            neighbor_visual_token,
        )?)
    } else {
        None
    };
    Ok(StructureTokenBlock {
        node: v,
        neighbors,
        scope,
        text_tokens,
        visual_tokens,
    })
}

/// Concatenated (optionally head-projected) multimodal node features,
/// usable as drop-in GNN inputs. Thin alias over the concat fusion path.
pub fn latent_align_features(
    graph: &MultimodalGraph,
    heads: Option<&ProjectionHeads>,
) -> Result<Tensor, EncoderError> {
    Ok(fuse_features(graph, FusionMode::Concat, heads)?.features)
}
