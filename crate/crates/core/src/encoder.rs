//! Modality fusion and contrastive fine-tuning of projection heads over
//! frozen backbone embeddings.
//!
//! Backbones stay fixed; what trains here is one linear head per modality
//! (output width min(d_text, d_image)). Two objectives are provided: a
//! symmetric InfoNCE over per-node (text, image) pairs, and a structure
//! contrastive loss whose positives are sampled hop-1 neighbors and whose
//! negatives are the other in-batch anchors (self term included in the
//! denominator; its raw gradient is exactly zero).

use alloc::vec::Vec;

use crate::graph::{sample_neighbors, Modality, MultimodalGraph};
use crate::optim::{adam_step, OptimConfig, Parameter};
use crate::rng::{derive_seed, rng_from_seed, shuffle};
use crate::tensor::{cosine_similarity, l2_norm, NumericsError, Tensor};
use rand::Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("{0} table unavailable")]
    ModalityUnavailable(Modality),
    #[error("batch of {0} rows cannot form in-batch contrast")]
    DegenerateBatch(usize),
    #[error("no anchors with at least one neighbor")]
    EmptyTrainSet,
    #[error("bad contrastive config: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FusionMode {
    TextOnly,
    ImageOnly,
    Concat,
}

impl FusionMode {
    pub fn parse(s: &str) -> Option<FusionMode> {
        match s {
            "text_only" | "text" => Some(FusionMode::TextOnly),
            "image_only" | "image" => Some(FusionMode::ImageOnly),
            "concat" => Some(FusionMode::Concat),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::TextOnly => "text_only",
            FusionMode::ImageOnly => "image_only",
            FusionMode::Concat => "concat",
        }
    }
}

/// Hyperparameters for contrastive head training. Defaults: lr 1e-5, m 5,
/// 1 epoch, batch 16, tau 0.5, Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ContrastiveConfig {
    pub tau: f32,
    pub m: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.5,
            m: 5,
            batch_size: 16,
            lr: 1.0e-5,
            epochs: 1,
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(EncoderError::BadConfig("tau must be positive"));
        }
        if self.m == 0 {
            return Err(EncoderError::BadConfig("m must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(EncoderError::BadConfig("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(EncoderError::BadConfig("lr must be positive"));
        }
        Ok(())
    }
}

/// One trainable linear map per modality, equal output widths.
#[derive(Debug, Clone)]
pub struct ProjectionHeads {
    pub text: Parameter,
    pub image: Parameter,
}

impl ProjectionHeads {
    pub fn init(d_text: usize, d_image: usize, d_proj: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        ProjectionHeads {
            text: Parameter::fan_in_uniform("head.text", d_text, d_proj, &mut rng),
            image: Parameter::fan_in_uniform("head.image", d_image, d_proj, &mut rng),
        }
    }

    /// Square identity maps; projection becomes a no-op.
    pub fn identity(d_text: usize, d_image: usize) -> Self {
        let eye = |n: usize| Tensor::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 });
        ProjectionHeads {
            text: Parameter::new("head.text", eye(d_text)),
            image: Parameter::new("head.image", eye(d_image)),
        }
    }

    pub fn projected_dim(&self) -> usize {
        self.text.value().cols()
    }
}

/// Head width used by the trainers: min of the two backbone dims.
pub fn default_projection_dim(graph: &MultimodalGraph) -> Result<usize, EncoderError> {
    let t = graph
        .table(Modality::Text)
        .ok_or(EncoderError::ModalityUnavailable(Modality::Text))?;
    let i = graph
        .table(Modality::Image)
        .ok_or(EncoderError::ModalityUnavailable(Modality::Image))?;
    Ok(t.dim().min(i.dim()))
}

/// A node-feature matrix assembled from modality tables, plus how many rows
/// had to be zero-filled for a missing image reference.
#[derive(Debug, Clone)]
pub struct Fused {
    pub features: Tensor,
    pub zero_filled_image_rows: usize,
}

/// Per-node raw modality matrix; image rows without a table entry are zeros.
fn raw_modality_matrix(
    graph: &MultimodalGraph,
    modality: Modality,
) -> Result<(Tensor, usize), EncoderError> {
    let table = graph
        .table(modality)
        .ok_or(EncoderError::ModalityUnavailable(modality))?;
    let n = graph.node_count();
    let mut out = Tensor::zeros(n, table.dim());
    let mut zero_filled = 0;
    for v in 0..n {
        match graph.modality_row(v, modality) {
            Some(row) => out.row_mut(v).copy_from_slice(row),
            None => zero_filled += 1,
        }
    }
    Ok((out, zero_filled))
}

/// Builds the `|V| x d` node feature matrix for one fusion mode, optionally
/// pushing each modality through its projection head first.
pub fn fuse_features(
    graph: &MultimodalGraph,
    mode: FusionMode,
    heads: Option<&ProjectionHeads>,
) -> Result<Fused, EncoderError> {
    let project = |raw: Tensor, head: Option<&Parameter>| -> Result<Tensor, EncoderError> {
        match head {
            Some(p) => Ok(raw.matmul(p.value())?),
            None => Ok(raw),
        }
    };
    match mode {
        FusionMode::TextOnly => {
            let (raw, _) = raw_modality_matrix(graph, Modality::Text)?;
            Ok(Fused {
                features: project(raw, heads.map(|h| &h.text))?,
                zero_filled_image_rows: 0,
            })
        }
        FusionMode::ImageOnly => {
            let (raw, zero_filled) = raw_modality_matrix(graph, Modality::Image)?;
            Ok(Fused {
                features: project(raw, heads.map(|h| &h.image))?,
                zero_filled_image_rows: zero_filled,
            })
        }
        FusionMode::Concat => {
            let (raw_t, _) = raw_modality_matrix(graph, Modality::Text)?;
            let (raw_i, zero_filled) = raw_modality_matrix(graph, Modality::Image)?;
            let t = project(raw_t, heads.map(|h| &h.text))?;
            let i = project(raw_i, heads.map(|h| &h.image))?;
            let n = graph.node_count();
            let mut features = Tensor::zeros(n, t.cols() + i.cols());
            for v in 0..n {
                features.row_mut(v)[..t.cols()].copy_from_slice(t.row(v));
                features.row_mut(v)[t.cols()..].copy_from_slice(i.row(v));
            }
            Ok(Fused {
                features,
                zero_filled_image_rows: zero_filled,
            })
        }
    }
}

fn normalize_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let n = l2_norm(x.row(r));
        norms.push(n);
        if n > 0.0 {
            for (o, &v) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                *o = (v as f64 / n) as f32;
            }
        }
    }
    (out, norms)
}

/// Backward of row normalization: projects the unit-row gradient onto the
/// tangent space and rescales. Zero rows get zero gradient, matching the
/// cosine zero-vector convention.
fn normalize_rows_backward(normalized: &Tensor, norms: &[f64], d_normalized: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(normalized.rows(), normalized.cols());
    for r in 0..normalized.rows() {
        if norms[r] == 0.0 {
            continue;
        }
        let hat = normalized.row(r);
        let d = d_normalized.row(r);
        let radial: f64 = hat
            .iter()
            .zip(d)
            .map(|(&h, &g)| h as f64 * g as f64)
            .sum();
        for (o, (&g, &h)) in out.row_mut(r).iter_mut().zip(d.iter().zip(hat)) {
            *o = ((g as f64 - radial * h as f64) / norms[r]) as f32;
        }
    }
    out
}

fn row_logsumexp(row: &[f32], scale: f64) -> f64 {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 * scale));
    let sum: f64 = row.iter().map(|&v| libm::exp(v as f64 * scale - max)).sum();
    max + libm::log(sum)
}

#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    pub loss: f64,
    pub d_lhs: Tensor,
    pub d_rhs: Tensor,
}

/// Symmetric InfoNCE over row-aligned (text, image) batches: rows are
/// normalized, `S_ij = t_i . v_j`, and the loss averages cross-entropy to the
/// diagonal over rows and columns of `S/tau`. Gradients are with respect to
/// the raw (unnormalized) inputs.
pub fn clip_align_loss(
    text_batch: &Tensor,
    image_batch: &Tensor,
    tau: f32,
) -> Result<ContrastiveLoss, EncoderError> {
    if text_batch.shape() != image_batch.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "clip_align_loss",
            lhs: text_batch.shape(),
            rhs: image_batch.shape(),
        }
        .into());
    }
    let n = text_batch.rows();
    if n < 2 {
        return Err(EncoderError::DegenerateBatch(n));
    }
    if !(tau > 0.0) {
        return Err(EncoderError::BadConfig("tau must be positive"));
    }
    let inv_tau = 1.0 / tau as f64;
    let (t_hat, t_norms) = normalize_rows(text_batch);
    let (v_hat, v_norms) = normalize_rows(image_batch);
    let s = t_hat.matmul(&v_hat.transpose())?;
    let s_t = s.transpose();

    let mut loss = 0.0f64;
    let mut d_s = Tensor::zeros(n, n);
    let half_inv = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        // Row direction: text i against all images.
        let lse = row_logsumexp(s.row(i), inv_tau);
        loss += (lse - s.get(i, i) as f64 * inv_tau) * half_inv;
        for j in 0..n {
            let p = libm::exp(s.get(i, j) as f64 * inv_tau - lse);
            let delta = if i == j { 1.0 } else { 0.0 };
            d_s.set(i, j, d_s.get(i, j) + ((p - delta) * inv_tau * half_inv) as f32);
        }
        // Column direction: image i against all texts.
        let lse = row_logsumexp(s_t.row(i), inv_tau);
        loss += (lse - s.get(i, i) as f64 * inv_tau) * half_inv;
        for j in 0..n {
            let q = libm::exp(s.get(j, i) as f64 * inv_tau - lse);
            let delta = if i == j { 1.0 } else { 0.0 };
            d_s.set(j, i, d_s.get(j, i) + ((q - delta) * inv_tau * half_inv) as f32);
        }
    }
    let d_t_hat = d_s.matmul(&v_hat)?;
    let d_v_hat = d_s.transpose().matmul(&t_hat)?;
    Ok(ContrastiveLoss {
        loss,
        d_lhs: normalize_rows_backward(&t_hat, &t_norms, &d_t_hat),
        d_rhs: normalize_rows_backward(&v_hat, &v_norms, &d_v_hat),
    })
}

/// Structure contrastive loss: anchor i's positive is `positives` row i, its
/// negatives are all in-batch anchors (self included; that term carries no
/// raw gradient). `loss = mean_i [ logsumexp_k s(a_i,a_k)/tau - s(a_i,p_i)/tau ]`
/// with cosine similarity throughout.
pub fn structure_contrastive_loss(
    anchors: &Tensor,
    positives: &Tensor,
    tau: f32,
) -> Result<ContrastiveLoss, EncoderError> {
    if anchors.shape() != positives.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "structure_contrastive_loss",
            lhs: anchors.shape(),
            rhs: positives.shape(),
        }
        .into());
    }
    let b = anchors.rows();
    if b == 0 {
        return Err(EncoderError::DegenerateBatch(0));
    }
    if !(tau > 0.0) {
        return Err(EncoderError::BadConfig("tau must be positive"));
    }
    let inv_tau = 1.0 / tau as f64;
    let inv_b = 1.0 / b as f64;
    let (a_hat, a_norms) = normalize_rows(anchors);
    let (p_hat, p_norms) = normalize_rows(positives);
    // Similarities stay in f64: the self-positive case then cancels exactly.
    let mut s_aa = alloc::vec![0.0f64; b * b];
    for i in 0..b {
        for k in 0..b {
            s_aa[i * b + k] = crate::tensor::dot(a_hat.row(i), a_hat.row(k));
        }
    }

    let mut loss = 0.0f64;
    let mut d_a_hat = Tensor::zeros(b, anchors.cols());
    let mut d_p_hat = Tensor::zeros(b, anchors.cols());
    for i in 0..b {
        let pair: f64 = crate::tensor::dot(a_hat.row(i), p_hat.row(i));
        let row = &s_aa[i * b..(i + 1) * b];
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |m, &s| m.max(s * inv_tau));
        let sum: f64 = row.iter().map(|&s| libm::exp(s * inv_tau - max)).sum();
        let lse = max + libm::log(sum);
        loss += (lse - pair * inv_tau) * inv_b;
        // Pair term.
        let w = -(inv_tau * inv_b) as f32;
        for (o, &p) in d_a_hat.row_mut(i).iter_mut().zip(p_hat.row(i)) {
            *o += w * p;
        }
        for (o, &a) in d_p_hat.row_mut(i).iter_mut().zip(a_hat.row(i)) {
            *o += w * a;
        }
        // Denominator: softmax weights over in-batch anchors. The k = i term
        // is accumulated too; normalization backward cancels it exactly.
        for k in 0..b {
            let sigma = libm::exp(row[k] * inv_tau - lse);
            let w = (sigma * inv_tau * inv_b) as f32;
            for (c, &ak) in a_hat.row(k).iter().enumerate() {
                d_a_hat.set(i, c, d_a_hat.get(i, c) + w * ak);
            }
            let ai: Vec<f32> = a_hat.row(i).to_vec();
            for (c, &aiv) in ai.iter().enumerate() {
                d_a_hat.set(k, c, d_a_hat.get(k, c) + w * aiv);
            }
        }
    }
    Ok(ContrastiveLoss {
        loss,
        d_lhs: normalize_rows_backward(&a_hat, &a_norms, &d_a_hat),
        d_rhs: normalize_rows_backward(&p_hat, &p_norms, &d_p_hat),
    })
}

/// What head training reports besides the heads themselves. The cosine pair
/// is the objective's own yardstick: mean anchor-neighbor cosine over edges
/// for the structure objective, mean diagonal-pair cosine for the pairwise
/// one, both measured in projected concat space before and after training.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderTrainReport {
    pub loss_curve: Vec<f64>,
    pub cosine_before: f64,
    pub cosine_after: f64,
    pub zero_filled_image_rows: usize,
}

struct RawPair {
    text: Tensor,
    image: Tensor,
    zero_filled: usize,
}

fn raw_pair(graph: &MultimodalGraph) -> Result<RawPair, EncoderError> {
    let (text, _) = raw_modality_matrix(graph, Modality::Text)?;
    let (image, zero_filled) = raw_modality_matrix(graph, Modality::Image)?;
    Ok(RawPair {
        text,
        image,
        zero_filled,
    })
}

fn gather_rows(src: &Tensor, rows: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(rows.len(), src.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(src.row(r));
    }
    out
}

/// Projected concat embedding for every node: `[t W_text || i W_image]`.
fn project_concat(raw: &RawPair, heads: &ProjectionHeads) -> Result<Tensor, EncoderError> {
    let t = raw.text.matmul(heads.text.value())?;
    let i = raw.image.matmul(heads.image.value())?;
    let d = t.cols();
    let mut out = Tensor::zeros(t.rows(), 2 * d);
    for v in 0..t.rows() {
        out.row_mut(v)[..d].copy_from_slice(t.row(v));
        out.row_mut(v)[d..].copy_from_slice(i.row(v));
    }
    Ok(out)
}

fn mean_edge_cosine(graph: &MultimodalGraph, embeddings: &Tensor) -> f64 {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (u, v) in graph.undirected_edges() {
        sum += cosine_similarity(embeddings.row(u), embeddings.row(v)).unwrap() as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn mean_pair_cosine(t: &Tensor, i: &Tensor) -> f64 {
    let mut sum = 0.0f64;
    for r in 0..t.rows() {
        sum += cosine_similarity(t.row(r), i.row(r)).unwrap() as f64;
    }
    sum / t.rows().max(1) as f64
}

/// Splits a concat-space gradient back into per-head weight gradients:
/// `dW_text += X_text^T dE[:, :d]`, `dW_image += X_image^T dE[:, d:]`.
fn accumulate_head_grads(
    heads: &mut ProjectionHeads,
    batch_text: &Tensor,
    batch_image: &Tensor,
    d_concat: &Tensor,
) -> Result<(), EncoderError> {
    let d = heads.projected_dim();
    let rows = d_concat.rows();
    let mut d_t = Tensor::zeros(rows, d);
    let mut d_i = Tensor::zeros(rows, d);
    for r in 0..rows {
        d_t.row_mut(r).copy_from_slice(&d_concat.row(r)[..d]);
        d_i.row_mut(r).copy_from_slice(&d_concat.row(r)[d..]);
    }
    heads
        .text
        .accumulate_grad(&batch_text.transpose().matmul(&d_t)?)?;
    heads
        .image
        .accumulate_grad(&batch_image.transpose().matmul(&d_i)?)?;
    Ok(())
}

/// Trains projection heads with the structure contrastive objective.
///
/// Anchors are all nodes with degree >= 1. Each epoch draws `m` neighbors per
/// anchor and picks one uniformly as its positive; batches walk a fresh
/// shuffle of the anchors. Returns the heads and a report whose cosine pair
/// is the mean anchor-neighbor cosine over all edges before and after.
pub fn train_structure_aware_encoder(
    graph: &MultimodalGraph,
    cfg: &ContrastiveConfig,
) -> Result<(ProjectionHeads, EncoderTrainReport), EncoderError> {
    cfg.validate()?;
    let d_proj = default_projection_dim(graph)?;
    let raw = raw_pair(graph)?;
    let anchors: Vec<usize> = (0..graph.node_count())
        .filter(|&v| graph.degree(v) > 0)
        .collect();
    if anchors.is_empty() {
        return Err(EncoderError::EmptyTrainSet);
    }
    let mut heads = ProjectionHeads::init(
        raw.text.cols(),
        raw.image.cols(),
        d_proj,
        derive_seed(cfg.seed, 0),
    );
    let optim = OptimConfig::with_lr(cfg.lr);
    let cosine_before = mean_edge_cosine(graph, &project_concat(&raw, &heads)?);

    let mut loss_curve = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order = anchors.clone();
        let mut epoch_rng = rng_from_seed(derive_seed(cfg.seed, 1 + epoch as u64));
        shuffle(&mut epoch_rng, &mut order);
        let mut positives = Vec::with_capacity(order.len());
        for &v in &order {
            let draw_seed = derive_seed(cfg.seed, ((1 + epoch as u64) << 32) ^ v as u64);
            let drawn = sample_neighbors(graph, v, cfg.m, draw_seed).expect("anchor in range");
            positives.push(drawn[epoch_rng.random_range(0..drawn.len())]);
        }
        for (batch, batch_pos) in order
            .chunks(cfg.batch_size)
            .zip(positives.chunks(cfg.batch_size))
        {
            let batch_text = gather_rows(&raw.text, batch);
            let batch_image = gather_rows(&raw.image, batch);
            let pos_text = gather_rows(&raw.text, batch_pos);
            let pos_image = gather_rows(&raw.image, batch_pos);
            let anchors_proj = project_concat(
                &RawPair {
                    text: batch_text.clone(),
                    image: batch_image.clone(),
                    zero_filled: 0,
                },
                &heads,
            )?;
            let pos_proj = project_concat(
                &RawPair {
                    text: pos_text.clone(),
                    image: pos_image.clone(),
                    zero_filled: 0,
                },
                &heads,
            )?;
            let out = structure_contrastive_loss(&anchors_proj, &pos_proj, cfg.tau)?;
            accumulate_head_grads(&mut heads, &batch_text, &batch_image, &out.d_lhs)?;
            accumulate_head_grads(&mut heads, &pos_text, &pos_image, &out.d_rhs)?;
            adam_step(&mut [&mut heads.text, &mut heads.image], &optim)?;
            loss_curve.push(out.loss);
        }
    }

    let cosine_after = mean_edge_cosine(graph, &project_concat(&raw, &heads)?);
    Ok((
        heads,
        EncoderTrainReport {
            loss_curve,
            cosine_before,
            cosine_after,
            zero_filled_image_rows: raw.zero_filled,
        },
    ))
}

/// Trains projection heads with the pairwise image-text objective
/// ([`clip_align_loss`]) over all nodes; graph structure is unused. A
/// trailing batch of one row is dropped rather than surfacing
/// DegenerateBatch mid-epoch; a configured batch_size of 1 still fails fast
/// on the first batch.
pub fn train_clip_aligned_encoder(
    graph: &MultimodalGraph,
    cfg: &ContrastiveConfig,
) -> Result<(ProjectionHeads, EncoderTrainReport), EncoderError> {
    cfg.validate()?;
    let d_proj = default_projection_dim(graph)?;
    let raw = raw_pair(graph)?;
    let n = graph.node_count();
    if n == 0 {
        return Err(EncoderError::EmptyTrainSet);
    }
    let mut heads = ProjectionHeads::init(
        raw.text.cols(),
        raw.image.cols(),
        d_proj,
        derive_seed(cfg.seed, 0),
    );
    let optim = OptimConfig::with_lr(cfg.lr);
    let proj_t = raw.text.matmul(heads.text.value())?;
    let proj_i = raw.image.matmul(heads.image.value())?;
    let cosine_before = mean_pair_cosine(&proj_t, &proj_i);

    let mut loss_curve = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_rng = rng_from_seed(derive_seed(cfg.seed, 1 + epoch as u64));
        shuffle(&mut epoch_rng, &mut order);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 && cfg.batch_size >= 2 {
                continue;
            }
            let batch_text = gather_rows(&raw.text, batch);
            let batch_image = gather_rows(&raw.image, batch);
            let t = batch_text.matmul(heads.text.value())?;
            let i = batch_image.matmul(heads.image.value())?;
            let out = clip_align_loss(&t, &i, cfg.tau)?;
            heads
                .text
                .accumulate_grad(&batch_text.transpose().matmul(&out.d_lhs)?)?;
            heads
                .image
                .accumulate_grad(&batch_image.transpose().matmul(&out.d_rhs)?)?;
            adam_step(&mut [&mut heads.text, &mut heads.image], &optim)?;
            loss_curve.push(out.loss);
        }
    }

    let proj_t = raw.text.matmul(heads.text.value())?;
    let proj_i = raw.image.matmul(heads.image.value())?;
    let cosine_after = mean_pair_cosine(&proj_t, &proj_i);
    Ok((
        heads,
        EncoderTrainReport {
            loss_curve,
            cosine_before,
            cosine_after,
            zero_filled_image_rows: raw.zero_filled,
        },
    ))
}
