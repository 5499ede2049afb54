//! Node classifiers over fused features: MLP, GCN, GraphSAGE, and two
//! multimodal variants with per-modality branches (mmgcn-lite: additive
//! fusion; mgat-lite: attention aggregation with a scalar sigmoid gate).
//!
//! Every linear map is bias-free. Each model carries a hand-assembled
//! backward pass over a per-forward tape; training is full-batch Adam on
//! softmax cross-entropy over the train split, keeping the parameters of the
//! best validation epoch.

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::{MultimodalGraph, SplitAssignment};
use crate::optim::{adam_step, OptimConfig, Parameter};
use crate::rng::{derive_seed, rng_from_seed, SeedRng};
use crate::tensor::{softmax_cross_entropy, softmax_rows, NumericsError, Tensor};
use rand::Rng;

const LEAKY_SLOPE: f32 = 0.2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GnnError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("per-modality features required and must be row-aligned")]
    ModalityUnavailable,
    #[error("bad model config: {0}")]
    BadConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ModelKind {
    Mlp,
    Gcn,
    Sage,
    Mmgcn,
    Mgat,
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "mlp" => Some(ModelKind::Mlp),
            "gcn" => Some(ModelKind::Gcn),
            "sage" => Some(ModelKind::Sage),
            "mmgcn" => Some(ModelKind::Mmgcn),
            "mgat" => Some(ModelKind::Mgat),
            _ => None,
        }
    }

    /// Report label; the multimodal variants are reduced re-implementations
    /// and are marked as such.
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Gcn => "gcn",
            ModelKind::Sage => "sage",
            ModelKind::Mmgcn => "mmgcn-lite",
            ModelKind::Mgat => "mgat-lite",
        }
    }

    pub fn is_multimodal(&self) -> bool {
        matches!(self, ModelKind::Mmgcn | ModelKind::Mgat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GnnConfig {
    pub model: ModelKind,
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f32,
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
}

impl GnnConfig {
    pub fn new(model: ModelKind) -> Self {
        GnnConfig {
            model,
            layers: 2,
            hidden: 64,
            dropout: 0.0,
            epochs: 200,
            lr: 1.0e-2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GnnError> {
        if self.layers == 0 {
            return Err(GnnError::BadConfig("layers must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(GnnError::BadConfig("hidden dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GnnError::BadConfig("dropout must be in [0, 1)"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(GnnError::BadConfig("lr must be positive"));
        }
        Ok(())
    }
}

/// Model inputs: one fused matrix, or aligned per-modality matrices for the
/// branch models.
#[derive(Debug, Clone, Copy)]
pub enum Features<'a> {
    Single(&'a Tensor),
    PerModality { text: &'a Tensor, image: &'a Tensor },
}

impl<'a> Features<'a> {
    fn rows(&self) -> usize {
        match self {
            Features::Single(x) => x.rows(),
            Features::PerModality { text, .. } => text.rows(),
        }
    }

    fn dims(&self) -> FeatureDims {
        match self {
            Features::Single(x) => FeatureDims::Single(x.cols()),
            Features::PerModality { text, image } => FeatureDims::PerModality {
                text: text.cols(),
                image: image.cols(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum FeatureDims {
    Single(usize),
    PerModality { text: usize, image: usize },
}

// ---------------------------------------------------------------------------
// Shared kernels.

/// Symmetric-normalized propagation with self-loops:
/// `out_v = sum_{u in N(v) + {v}} x_u / sqrt(d~_u d~_v)`, `d~ = deg + 1`.
/// The operator is symmetric, so it is its own transpose in backward passes.
fn gcn_propagate(graph: &MultimodalGraph, x: &Tensor) -> Tensor {
    let n = x.rows();
    let d = x.cols();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|v| 1.0 / libm::sqrt(graph.degree(v) as f64 + 1.0))
        .collect();
    let mut out = Tensor::zeros(n, d);
    let mut acc = vec![0.0f64; d];
    for v in 0..n {
        for a in acc.iter_mut() {
            *a = 0.0;
        }
        let self_coef = inv_sqrt[v] * inv_sqrt[v];
        for (a, &xv) in acc.iter_mut().zip(x.row(v)) {
            *a += self_coef * xv as f64;
        }
        for &u in graph.neighbors(v) {
            let coef = inv_sqrt[v] * inv_sqrt[u];
            for (a, &xu) in acc.iter_mut().zip(x.row(u)) {
                *a += coef * xu as f64;
            }
        }
        for (o, &a) in out.row_mut(v).iter_mut().zip(&acc) {
            *o = a as f32;
        }
    }
    out
}

/// Mean over neighbors; isolated nodes aggregate to zero.
fn sage_aggregate(graph: &MultimodalGraph, x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let mut acc = vec![0.0f64; x.cols()];
    for v in 0..x.rows() {
        let neigh = graph.neighbors(v);
        if neigh.is_empty() {
            continue;
        }
        for a in acc.iter_mut() {
            *a = 0.0;
        }
        for &u in neigh {
            for (a, &xu) in acc.iter_mut().zip(x.row(u)) {
                *a += xu as f64;
            }
        }
        let inv = 1.0 / neigh.len() as f64;
        for (o, &a) in out.row_mut(v).iter_mut().zip(&acc) {
            *o = (a * inv) as f32;
        }
    }
    out
}

/// Transpose of [`sage_aggregate`]: distributes each row's gradient evenly
/// back over the neighbors it averaged.
fn sage_aggregate_transpose(graph: &MultimodalGraph, d_agg: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(d_agg.rows(), d_agg.cols());
    for v in 0..d_agg.rows() {
        let neigh = graph.neighbors(v);
        if neigh.is_empty() {
            continue;
        }
        let inv = 1.0 / neigh.len() as f32;
        for &u in neigh {
            for (o, &g) in out.row_mut(u).iter_mut().zip(d_agg.row(v)) {
                *o += g * inv;
            }
        }
    }
    out
}

/// Multiplier mask for a ReLU taken at `z`: 1 where positive, else 0.
fn relu_mask(z: &Tensor) -> Vec<f32> {
    z.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()
}

fn apply_mask(t: &mut Tensor, mask: &[f32]) {
    for (v, &m) in t.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
}

/// Inverted dropout on a copy of `x`: zeroes entries with probability `p`,
/// scales survivors by 1/(1-p). Returns the dropped matrix and the
/// multiplier mask for the backward pass.
fn dropout(x: &Tensor, p: f32, rng: &mut SeedRng) -> (Tensor, Vec<f32>) {
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..x.data().len())
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { scale })
        .collect();
    let mut dropped = x.clone();
    apply_mask(&mut dropped, &mask);
    (dropped, mask)
}

// ---------------------------------------------------------------------------
// Public layer ops (inference form), used directly by oracle tests.

/// One GCN layer `relu?(propagate(x) @ w)`; pass `relu = false` on the final
/// (logit) layer.
pub fn gcn_layer(
    graph: &MultimodalGraph,
    x: &Tensor,
    w: &Tensor,
    relu: bool,
) -> Result<Tensor, GnnError> {
    if x.rows() != graph.node_count() {
        return Err(NumericsError::ShapeMismatch {
            op: "gcn_layer",
            lhs: x.shape(),
            rhs: (graph.node_count(), x.cols()),
        }
        .into());
    }
    let mut h = gcn_propagate(graph, x).matmul(w)?;
    if relu {
        let mask = relu_mask(&h);
        apply_mask(&mut h, &mask);
    }
    Ok(h)
}

/// One GraphSAGE layer `relu?(x @ w_self + mean_agg(x) @ w_neigh)`.
pub fn sage_layer(
    graph: &MultimodalGraph,
    x: &Tensor,
    w_self: &Tensor,
    w_neigh: &Tensor,
    relu: bool,
) -> Result<Tensor, GnnError> {
    if x.rows() != graph.node_count() {
        return Err(NumericsError::ShapeMismatch {
            op: "sage_layer",
            lhs: x.shape(),
            rhs: (graph.node_count(), x.cols()),
        }
        .into());
    }
    let mut h = x.matmul(w_self)?;
    h.add_scaled(&sage_aggregate(graph, x).matmul(w_neigh)?, 1.0)?;
    if relu {
        let mask = relu_mask(&h);
        apply_mask(&mut h, &mask);
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// Parameter containers.

#[derive(Debug, Clone)]
pub struct SageLayerParams {
    pub w_self: Parameter,
    pub w_neigh: Parameter,
}

#[derive(Debug, Clone)]
pub struct AttentionLayerParams {
    /// d_in × hidden.
    pub weight: Parameter,
    /// 1 × 2·hidden; first half scores the center node, second the neighbor.
    pub attn: Parameter,
}

#[derive(Debug, Clone)]
pub struct MmgcnParams {
    pub text_layers: Vec<Parameter>,
    pub image_layers: Vec<Parameter>,
    pub text_proj: Parameter,
    pub image_proj: Parameter,
    pub classifier: Parameter,
}

#[derive(Debug, Clone)]
pub struct MgatParams {
    pub text_layers: Vec<AttentionLayerParams>,
    pub image_layers: Vec<AttentionLayerParams>,
    /// 1 × 1 pre-sigmoid gate weight.
    pub gate: Parameter,
    pub classifier: Parameter,
}

#[derive(Debug, Clone)]
pub enum ModelParams {
    Mlp(Vec<Parameter>),
    Gcn(Vec<Parameter>),
    Sage(Vec<SageLayerParams>),
    Mmgcn(MmgcnParams),
    Mgat(MgatParams),
}

fn stack_dims(d_in: usize, hidden: usize, classes: usize, layers: usize) -> Vec<(usize, usize)> {
    (0..layers)
        .map(|l| {
            let i = if l == 0 { d_in } else { hidden };
            let o = if l == layers - 1 { classes } else { hidden };
            (i, o)
        })
        .collect()
}

/// Branch stacks keep hidden width on every layer (the classifier head maps
/// to classes afterwards).
fn branch_dims(d_in: usize, hidden: usize, layers: usize) -> Vec<(usize, usize)> {
    (0..layers)
        .map(|l| (if l == 0 { d_in } else { hidden }, hidden))
        .collect()
}

impl ModelParams {
    /// Fresh parameters for `cfg.model` drawn from `rng`. Also the entry
    /// point for gradient-check harnesses.
    pub fn seeded(
        cfg: &GnnConfig,
        dims: FeatureDims,
        classes: usize,
        rng: &mut SeedRng,
    ) -> Result<Self, GnnError> {
        Self::init(cfg, dims, classes, rng)
    }

    fn init(cfg: &GnnConfig, dims: FeatureDims, classes: usize, rng: &mut SeedRng) -> Result<Self, GnnError> {
        let single = |d: usize| -> Result<usize, GnnError> { Ok(d) };
        match cfg.model {
            ModelKind::Mlp | ModelKind::Gcn => {
                let d = match dims {
                    FeatureDims::Single(d) => single(d)?,
                    _ => return Err(GnnError::BadConfig("fused features expected")),
                };
                let layers = stack_dims(d, cfg.hidden, classes, cfg.layers)
                    .into_iter()
                    .enumerate()
                    .map(|(l, (i, o))| Parameter::fan_in_uniform(layer_name("w", l), i, o, rng))
                    .collect();
                Ok(match cfg.model {
                    ModelKind::Mlp => ModelParams::Mlp(layers),
                    _ => ModelParams::Gcn(layers),
                })
            }
            ModelKind::Sage => {
                let d = match dims {
                    FeatureDims::Single(d) => d,
                    _ => return Err(GnnError::BadConfig("fused features expected")),
                };
                let layers = stack_dims(d, cfg.hidden, classes, cfg.layers)
                    .into_iter()
                    .enumerate()
                    .map(|(l, (i, o))| SageLayerParams {
                        w_self: Parameter::fan_in_uniform(layer_name("w_self", l), i, o, rng),
                        w_neigh: Parameter::fan_in_uniform(layer_name("w_neigh", l), i, o, rng),
                    })
                    .collect();
                Ok(ModelParams::Sage(layers))
            }
            ModelKind::Mmgcn => {
                let (dt, di) = match dims {
                    FeatureDims::PerModality { text, image } => (text, image),
                    _ => return Err(GnnError::BadConfig("per-modality features expected")),
                };
                let branch = |tag: &str, d_in: usize, rng: &mut SeedRng| {
                    branch_dims(d_in, cfg.hidden, cfg.layers)
                        .into_iter()
                        .enumerate()
                        .map(|(l, (i, o))| {
                            Parameter::fan_in_uniform(branch_name(tag, "w", l), i, o, rng)
                        })
                        .collect::<Vec<_>>()
                };
                Ok(ModelParams::Mmgcn(MmgcnParams {
                    text_layers: branch("text", dt, rng),
                    image_layers: branch("image", di, rng),
                    text_proj: Parameter::fan_in_uniform("text.proj", cfg.hidden, cfg.hidden, rng),
                    image_proj: Parameter::fan_in_uniform("image.proj", cfg.hidden, cfg.hidden, rng),
                    classifier: Parameter::fan_in_uniform("classifier", cfg.hidden, classes, rng),
                }))
            }
            ModelKind::Mgat => {
                let (dt, di) = match dims {
                    FeatureDims::PerModality { text, image } => (text, image),
                    _ => return Err(GnnError::BadConfig("per-modality features expected")),
                };
                let branch = |tag: &str, d_in: usize, rng: &mut SeedRng| {
                    branch_dims(d_in, cfg.hidden, cfg.layers)
                        .into_iter()
                        .enumerate()
                        .map(|(l, (i, o))| AttentionLayerParams {
                            weight: Parameter::fan_in_uniform(branch_name(tag, "w", l), i, o, rng),
                            attn: Parameter::fan_in_uniform(branch_name(tag, "a", l), 1, 2 * o, rng),
                        })
                        .collect::<Vec<_>>()
                };
                Ok(ModelParams::Mgat(MgatParams {
                    text_layers: branch("text", dt, rng),
                    image_layers: branch("image", di, rng),
                    // Zero pre-sigmoid weight: the gate starts balanced.
                    gate: Parameter::new("gate", Tensor::zeros(1, 1)),
                    classifier: Parameter::fan_in_uniform("classifier", cfg.hidden, classes, rng),
                }))
            }
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            ModelParams::Mlp(ls) | ModelParams::Gcn(ls) => ls.iter_mut().collect(),
            ModelParams::Sage(ls) => ls
                .iter_mut()
                .flat_map(|l| [&mut l.w_self, &mut l.w_neigh])
                .collect(),
            ModelParams::Mmgcn(p) => {
                let mut out: Vec<&mut Parameter> = Vec::new();
                out.extend(p.text_layers.iter_mut());
                out.extend(p.image_layers.iter_mut());
                out.push(&mut p.text_proj);
                out.push(&mut p.image_proj);
                out.push(&mut p.classifier);
                out
            }
            ModelParams::Mgat(p) => {
                let mut out: Vec<&mut Parameter> = Vec::new();
                for l in p.text_layers.iter_mut().chain(p.image_layers.iter_mut()) {
                    out.push(&mut l.weight);
                    out.push(&mut l.attn);
                }
                out.push(&mut p.gate);
                out.push(&mut p.classifier);
                out
            }
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        match self {
            ModelParams::Mlp(ls) | ModelParams::Gcn(ls) => ls.iter().collect(),
            ModelParams::Sage(ls) => ls.iter().flat_map(|l| [&l.w_self, &l.w_neigh]).collect(),
            ModelParams::Mmgcn(p) => {
                let mut out: Vec<&Parameter> = Vec::new();
                out.extend(p.text_layers.iter());
                out.extend(p.image_layers.iter());
                out.push(&p.text_proj);
                out.push(&p.image_proj);
                out.push(&p.classifier);
                out
            }
            ModelParams::Mgat(p) => {
                let mut out: Vec<&Parameter> = Vec::new();
                for l in p.text_layers.iter().chain(p.image_layers.iter()) {
                    out.push(&l.weight);
                    out.push(&l.attn);
                }
                out.push(&p.gate);
                out.push(&p.classifier);
                out
            }
        }
    }
}

fn layer_name(prefix: &str, l: usize) -> alloc::string::String {
    alloc::format!("{prefix}{l}")
}

fn branch_name(tag: &str, prefix: &str, l: usize) -> alloc::string::String {
    alloc::format!("{tag}.{prefix}{l}")
}

// ---------------------------------------------------------------------------
// Tapes.

struct StackLayerTape {
    /// Input to the matmul (post-dropout, post-propagation where relevant).
    basis: Tensor,
    drop_mask: Option<Vec<f32>>,
    relu: Option<Vec<f32>>,
}

struct SageLayerTape {
    h_drop: Tensor,
    aggregated: Tensor,
    drop_mask: Option<Vec<f32>>,
    relu: Option<Vec<f32>>,
}

struct AttnLayerTape {
    x_drop: Tensor,
    xw: Tensor,
    /// Center and neighbor score halves: sl_v = a_left . xw_v, sr_u = a_right . xw_u.
    sl: Vec<f32>,
    sr: Vec<f32>,
    /// Attention weights in CSR neighbor order.
    alpha: Vec<f32>,
    drop_mask: Option<Vec<f32>>,
    relu: Vec<f32>,
}

enum Tape {
    Stack(Vec<StackLayerTape>),
    Sage(Vec<SageLayerTape>),
    Mmgcn {
        text: Vec<StackLayerTape>,
        image: Vec<StackLayerTape>,
        branch_text: Tensor,
        branch_image: Tensor,
        summed: Tensor,
    },
    Mgat {
        text: Vec<AttnLayerTape>,
        image: Vec<AttnLayerTape>,
        branch_text: Tensor,
        branch_image: Tensor,
        gate: f32,
        fused: Tensor,
    },
}

const PATTERN_SEED: u64 = 0xcbf2_9ce4_8422_2325;
const PATTERN_PRIME: u64 = 0x0000_0100_0000_01b3;

struct Pass<'a> {
    graph: &'a MultimodalGraph,
    dropout: f32,
    rng: Option<&'a mut SeedRng>,
    /// FNV digest of the sign of every ReLU/LeakyReLU pre-activation, in
    /// forward order. The loss is smooth in any single parameter as long as
    /// this pattern does not change, which is what finite difference checks
    /// need to know.
    pattern: u64,
}

impl<'a> Pass<'a> {
    fn eval(graph: &'a MultimodalGraph) -> Self {
        Pass {
            graph,
            dropout: 0.0,
            rng: None,
            pattern: PATTERN_SEED,
        }
    }

    fn train(graph: &'a MultimodalGraph, dropout: f32, rng: &'a mut SeedRng) -> Self {
        Pass {
            graph,
            dropout,
            rng: Some(rng),
            pattern: PATTERN_SEED,
        }
    }

    fn maybe_dropout(&mut self, x: &Tensor) -> (Tensor, Option<Vec<f32>>) {
        match (&mut self.rng, self.dropout > 0.0) {
            (Some(rng), true) => {
                let (dropped, mask) = dropout(x, self.dropout, rng);
                (dropped, Some(mask))
            }
            _ => (x.clone(), None),
        }
    }

    fn note_kinks(&mut self, z: &Tensor) {
        for &v in z.data() {
            self.note_kink(v);
        }
    }

    fn note_kink(&mut self, z: f32) {
        self.pattern = (self.pattern ^ u64::from(z > 0.0)).wrapping_mul(PATTERN_PRIME);
    }
}

// ---------------------------------------------------------------------------
// Forward/backward per architecture.

/// Shared by MLP (propagate = false) and GCN (propagate = true) stacks, and
/// by the mmgcn branches (always ReLU, always propagate).
fn stack_forward(
    pass: &mut Pass<'_>,
    layers: &[Parameter],
    x: &Tensor,
    propagate: bool,
    final_relu: bool,
) -> Result<(Tensor, Vec<StackLayerTape>), GnnError> {
    let mut h = x.clone();
    let mut tapes = Vec::with_capacity(layers.len());
    for (l, w) in layers.iter().enumerate() {
        let (dropped, drop_mask) = pass.maybe_dropout(&h);
        let basis = if propagate {
            gcn_propagate(pass.graph, &dropped)
        } else {
            dropped
        };
        let mut z = basis.matmul(w.value())?;
        let relu = if l < layers.len() - 1 || final_relu {
            pass.note_kinks(&z);
            let mask = relu_mask(&z);
            apply_mask(&mut z, &mask);
            Some(mask)
        } else {
            None
        };
        tapes.push(StackLayerTape {
            basis,
            drop_mask,
            relu,
        });
        h = z;
    }
    Ok((h, tapes))
}

fn stack_backward(
    graph: &MultimodalGraph,
    layers: &mut [Parameter],
    tapes: &[StackLayerTape],
    propagate: bool,
    d_out: &Tensor,
) -> Result<Tensor, GnnError> {
    let mut d = d_out.clone();
    for (w, tape) in layers.iter_mut().zip(tapes.iter()).rev() {
        if let Some(mask) = &tape.relu {
            apply_mask(&mut d, mask);
        }
        w.accumulate_grad(&tape.basis.transpose().matmul(&d)?)?;
        let mut d_basis = d.matmul(&w.value().transpose())?;
        if propagate {
            // The propagation operator is symmetric.
            d_basis = gcn_propagate(graph, &d_basis);
        }
        if let Some(mask) = &tape.drop_mask {
            apply_mask(&mut d_basis, mask);
        }
        d = d_basis;
    }
    Ok(d)
}

fn sage_forward(
    pass: &mut Pass<'_>,
    layers: &[SageLayerParams],
    x: &Tensor,
) -> Result<(Tensor, Vec<SageLayerTape>), GnnError> {
    let mut h = x.clone();
    let mut tapes = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let (h_drop, drop_mask) = pass.maybe_dropout(&h);
        let aggregated = sage_aggregate(pass.graph, &h_drop);
        let mut z = h_drop.matmul(layer.w_self.value())?;
        z.add_scaled(&aggregated.matmul(layer.w_neigh.value())?, 1.0)?;
        let relu = if l < layers.len() - 1 {
            pass.note_kinks(&z);
            let mask = relu_mask(&z);
            apply_mask(&mut z, &mask);
            Some(mask)
        } else {
            None
        };
        tapes.push(SageLayerTape {
            h_drop,
            aggregated,
            drop_mask,
            relu,
        });
        h = z;
    }
    Ok((h, tapes))
}

fn sage_backward(
    graph: &MultimodalGraph,
    layers: &mut [SageLayerParams],
    tapes: &[SageLayerTape],
    d_out: &Tensor,
) -> Result<(), GnnError> {
    let mut d = d_out.clone();
    for (layer, tape) in layers.iter_mut().zip(tapes.iter()).rev() {
        if let Some(mask) = &tape.relu {
            apply_mask(&mut d, mask);
        }
        layer
            .w_self
            .accumulate_grad(&tape.h_drop.transpose().matmul(&d)?)?;
        layer
            .w_neigh
            .accumulate_grad(&tape.aggregated.transpose().matmul(&d)?)?;
        let mut d_h = d.matmul(&layer.w_self.value().transpose())?;
        let d_agg = d.matmul(&layer.w_neigh.value().transpose())?;
        d_h.add_scaled(&sage_aggregate_transpose(graph, &d_agg), 1.0)?;
        if let Some(mask) = &tape.drop_mask {
            apply_mask(&mut d_h, mask);
        }
        d = d_h;
    }
    Ok(())
}

fn leaky(z: f32) -> f32 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

fn leaky_grad(z: f32) -> f32 {
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// One attention layer: scores e_vu = LeakyReLU(a . [xw_v || xw_u]) softmaxed
/// over N(v); output row v is the alpha-weighted sum of neighbor xw rows,
/// then ReLU. Isolated nodes aggregate to zero.
fn attn_layer_forward(
    pass: &mut Pass<'_>,
    layer: &AttentionLayerParams,
    x: &Tensor,
) -> Result<(Tensor, AttnLayerTape), GnnError> {
    let graph = pass.graph;
    let n = graph.node_count();
    let (x_drop, drop_mask) = pass.maybe_dropout(x);
    let xw = x_drop.matmul(layer.weight.value())?;
    let h = xw.cols();
    let a = layer.attn.value().row(0);
    let (a_left, a_right) = a.split_at(h);
    let score_half = |coeffs: &[f32]| -> Vec<f32> {
        (0..n)
            .map(|v| crate::tensor::dot(coeffs, xw.row(v)) as f32)
            .collect()
    };
    let sl = score_half(a_left);
    let sr = score_half(a_right);

    let mut alpha = Vec::with_capacity(graph.neighbors(0).len());
    let mut out = Tensor::zeros(n, h);
    for v in 0..n {
        let neigh = graph.neighbors(v);
        if neigh.is_empty() {
            continue;
        }
        for &u in neigh {
            pass.note_kink(sl[v] + sr[u]);
        }
        let scores: Vec<f64> = neigh
            .iter()
            .map(|&u| leaky(sl[v] + sr[u]) as f64)
            .collect();
        let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
        let exps: Vec<f64> = scores.iter().map(|&s| libm::exp(s - max)).collect();
        let denom: f64 = exps.iter().sum();
        for (&u, &e) in neigh.iter().zip(&exps) {
            let w = (e / denom) as f32;
            alpha.push(w);
            for (o, &m) in out.row_mut(v).iter_mut().zip(xw.row(u)) {
                *o += w * m;
            }
        }
    }
    pass.note_kinks(&out);
    let relu = relu_mask(&out);
    apply_mask(&mut out, &relu);
    Ok((
        out,
        AttnLayerTape {
            x_drop,
            xw,
            sl,
            sr,
            alpha,
            drop_mask,
            relu,
        },
    ))
}

fn attn_layer_backward(
    graph: &MultimodalGraph,
    layer: &mut AttentionLayerParams,
    tape: &AttnLayerTape,
    d_out: &Tensor,
) -> Result<Tensor, GnnError> {
    let n = graph.node_count();
    let h = tape.xw.cols();
    let mut d_agg = d_out.clone();
    apply_mask(&mut d_agg, &tape.relu);

    let a = layer.attn.value().row(0);
    let (a_left, a_right) = a.split_at(h);
    let mut d_xw = Tensor::zeros(n, h);
    let mut d_sl = vec![0.0f32; n];
    let mut d_sr = vec![0.0f32; n];
    let mut cursor = 0usize;
    for v in 0..n {
        let neigh = graph.neighbors(v);
        if neigh.is_empty() {
            continue;
        }
        let alphas = &tape.alpha[cursor..cursor + neigh.len()];
        cursor += neigh.len();
        // d_alpha from the message sum, then softmax backward to scores.
        let d_alpha: Vec<f64> = neigh
            .iter()
            .map(|&u| {
                crate::tensor::dot(d_agg.row(v), tape.xw.row(u))
            })
            .collect();
        let weighted: f64 = alphas
            .iter()
            .zip(&d_alpha)
            .map(|(&al, &da)| al as f64 * da)
            .sum();
        for ((&u, &al), &da) in neigh.iter().zip(alphas).zip(&d_alpha) {
            // Message path: d_xw_u += alpha * d_agg_v.
            for (o, &g) in d_xw.row_mut(u).iter_mut().zip(d_agg.row(v)) {
                *o += al * g;
            }
            let d_score = al as f64 * (da - weighted);
            let d_z = d_score as f32 * leaky_grad(tape.sl[v] + tape.sr[u]);
            d_sl[v] += d_z;
            d_sr[u] += d_z;
        }
    }

    // Score halves: sl_v = a_left . xw_v, sr_u = a_right . xw_u.
    let mut d_attn = Tensor::zeros(1, 2 * h);
    for v in 0..n {
        for c in 0..h {
            let xv = tape.xw.get(v, c);
            d_attn.set(0, c, d_attn.get(0, c) + d_sl[v] * xv);
            d_attn.set(0, h + c, d_attn.get(0, h + c) + d_sr[v] * xv);
            let extra = d_sl[v] * a_left[c] + d_sr[v] * a_right[c];
            d_xw.set(v, c, d_xw.get(v, c) + extra);
        }
    }
    layer.attn.accumulate_grad(&d_attn)?;
    layer
        .weight
        .accumulate_grad(&tape.x_drop.transpose().matmul(&d_xw)?)?;
    let mut d_x = d_xw.matmul(&layer.weight.value().transpose())?;
    if let Some(mask) = &tape.drop_mask {
        apply_mask(&mut d_x, mask);
    }
    Ok(d_x)
}

fn attn_branch_forward(
    pass: &mut Pass<'_>,
    layers: &[AttentionLayerParams],
    x: &Tensor,
) -> Result<(Tensor, Vec<AttnLayerTape>), GnnError> {
    let mut h = x.clone();
    let mut tapes = Vec::with_capacity(layers.len());
    for layer in layers {
        let (out, tape) = attn_layer_forward(pass, layer, &h)?;
        tapes.push(tape);
        h = out;
    }
    Ok((h, tapes))
}

fn attn_branch_backward(
    graph: &MultimodalGraph,
    layers: &mut [AttentionLayerParams],
    tapes: &[AttnLayerTape],
    d_out: &Tensor,
) -> Result<(), GnnError> {
    let mut d = d_out.clone();
    for (layer, tape) in layers.iter_mut().zip(tapes.iter()).rev() {
        d = attn_layer_backward(graph, layer, tape, &d)?;
    }
    Ok(())
}

fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + libm::exp(-x as f64))) as f32
}

impl ModelParams {
    fn forward(
        &self,
        pass: &mut Pass<'_>,
        features: &Features<'_>,
    ) -> Result<(Tensor, Tape), GnnError> {
        match (self, features) {
            (ModelParams::Mlp(layers), Features::Single(x)) => {
                let (out, tapes) = stack_forward(pass, layers, x, false, false)?;
                Ok((out, Tape::Stack(tapes)))
            }
            (ModelParams::Gcn(layers), Features::Single(x)) => {
                let (out, tapes) = stack_forward(pass, layers, x, true, false)?;
                Ok((out, Tape::Stack(tapes)))
            }
            (ModelParams::Sage(layers), Features::Single(x)) => {
                let (out, tapes) = sage_forward(pass, layers, x)?;
                Ok((out, Tape::Sage(tapes)))
            }
            (ModelParams::Mmgcn(p), Features::PerModality { text, image }) => {
                if text.rows() != image.rows() {
                    return Err(GnnError::ModalityUnavailable);
                }
                let (branch_text, text_tapes) =
                    stack_forward(pass, &p.text_layers, text, true, true)?;
                let (branch_image, image_tapes) =
                    stack_forward(pass, &p.image_layers, image, true, true)?;
                let mut summed = branch_text.matmul(p.text_proj.value())?;
                summed.add_scaled(&branch_image.matmul(p.image_proj.value())?, 1.0)?;
                let logits = summed.matmul(p.classifier.value())?;
                Ok((
                    logits,
                    Tape::Mmgcn {
                        text: text_tapes,
                        image: image_tapes,
                        branch_text,
                        branch_image,
                        summed,
                    },
                ))
            }
            (ModelParams::Mgat(p), Features::PerModality { text, image }) => {
                if text.rows() != image.rows() {
                    return Err(GnnError::ModalityUnavailable);
                }
                let (branch_text, text_tapes) = attn_branch_forward(pass, &p.text_layers, text)?;
                let (branch_image, image_tapes) =
                    attn_branch_forward(pass, &p.image_layers, image)?;
                let gate = sigmoid(p.gate.value().get(0, 0));
                let mut fused = branch_text.clone();
                fused.scale(gate);
                fused.add_scaled(&branch_image, 1.0 - gate)?;
                let logits = fused.matmul(p.classifier.value())?;
                Ok((
                    logits,
                    Tape::Mgat {
                        text: text_tapes,
                        image: image_tapes,
                        branch_text,
                        branch_image,
                        gate,
                        fused,
                    },
                ))
            }
            _ => Err(GnnError::ModalityUnavailable),
        }
    }

    fn backward(
        &mut self,
        graph: &MultimodalGraph,
        tape: &Tape,
        d_logits: &Tensor,
    ) -> Result<(), GnnError> {
        match (self, tape) {
            (ModelParams::Mlp(layers), Tape::Stack(tapes)) => {
                stack_backward(graph, layers, tapes, false, d_logits)?;
                Ok(())
            }
            (ModelParams::Gcn(layers), Tape::Stack(tapes)) => {
                stack_backward(graph, layers, tapes, true, d_logits)?;
                Ok(())
            }
            (ModelParams::Sage(layers), Tape::Sage(tapes)) => {
                sage_backward(graph, layers, tapes, d_logits)
            }
            (
                ModelParams::Mmgcn(p),
                Tape::Mmgcn {
                    text,
                    image,
                    branch_text,
                    branch_image,
                    summed,
                },
            ) => {
                p.classifier
                    .accumulate_grad(&summed.transpose().matmul(d_logits)?)?;
                let d_summed = d_logits.matmul(&p.classifier.value().transpose())?;
                p.text_proj
                    .accumulate_grad(&branch_text.transpose().matmul(&d_summed)?)?;
                p.image_proj
                    .accumulate_grad(&branch_image.transpose().matmul(&d_summed)?)?;
                let d_branch_text = d_summed.matmul(&p.text_proj.value().transpose())?;
                let d_branch_image = d_summed.matmul(&p.image_proj.value().transpose())?;
                stack_backward(graph, &mut p.text_layers, text, true, &d_branch_text)?;
                stack_backward(graph, &mut p.image_layers, image, true, &d_branch_image)?;
                Ok(())
            }
            (
                ModelParams::Mgat(p),
                Tape::Mgat {
                    text,
                    image,
                    branch_text,
                    branch_image,
                    gate,
                    fused,
                },
            ) => {
                p.classifier
                    .accumulate_grad(&fused.transpose().matmul(d_logits)?)?;
                let d_fused = d_logits.matmul(&p.classifier.value().transpose())?;
                let mut d_text = d_fused.clone();
                d_text.scale(*gate);
                let mut d_image = d_fused.clone();
                d_image.scale(1.0 - gate);
                // d_gate = sum(d_fused * (text - image)) * sigma'(gamma).
                let mut diff = 0.0f64;
                for i in 0..d_fused.data().len() {
                    diff += d_fused.data()[i] as f64
                        * (branch_text.data()[i] as f64 - branch_image.data()[i] as f64);
                }
                let d_gamma = diff * (*gate as f64) * (1.0 - *gate as f64);
                let g = Tensor::from_vec(1, 1, vec![d_gamma as f32])?;
                p.gate.accumulate_grad(&g)?;
                attn_branch_backward(graph, &mut p.text_layers, text, &d_text)?;
                attn_branch_backward(graph, &mut p.image_layers, image, &d_image)?;
                Ok(())
            }
            _ => Err(GnnError::BadConfig("tape does not match model")),
        }
    }
}

/// Logits of the additive-fusion multimodal model (inference form).
pub fn mmgcn_forward(
    graph: &MultimodalGraph,
    x_text: &Tensor,
    x_image: &Tensor,
    params: &MmgcnParams,
) -> Result<Tensor, GnnError> {
    let model = ModelParams::Mmgcn(params.clone());
    let mut pass = Pass::eval(graph);
    let (logits, _) = model.forward(
        &mut pass,
        &Features::PerModality {
            text: x_text,
            image: x_image,
        },
    )?;
    Ok(logits)
}

/// Logits of the gated attention multimodal model (inference form).
pub fn mgat_forward(
    graph: &MultimodalGraph,
    x_text: &Tensor,
    x_image: &Tensor,
    params: &MgatParams,
) -> Result<Tensor, GnnError> {
    let model = ModelParams::Mgat(params.clone());
    let mut pass = Pass::eval(graph);
    let (logits, _) = model.forward(
        &mut pass,
        &Features::PerModality {
            text: x_text,
            image: x_image,
        },
    )?;
    Ok(logits)
}

/// Attention weights of one layer over each node's neighbor list (CSR
/// order), exposed for oracle tests.
pub fn attention_weights(
    graph: &MultimodalGraph,
    layer: &AttentionLayerParams,
    x: &Tensor,
) -> Result<Vec<Vec<f32>>, GnnError> {
    let mut pass = Pass::eval(graph);
    let (_, tape) = attn_layer_forward(&mut pass, layer, x)?;
    let mut out = Vec::with_capacity(graph.node_count());
    let mut cursor = 0;
    for v in 0..graph.node_count() {
        let deg = graph.neighbors(v).len();
        out.push(tape.alpha[cursor..cursor + deg].to_vec());
        cursor += deg;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training and prediction.

fn subset_cross_entropy(
    graph: &MultimodalGraph,
    logits: &Tensor,
    nodes: &[usize],
) -> Result<(f64, Tensor), GnnError> {
    let classes = logits.cols();
    let mut subset = Tensor::zeros(nodes.len(), classes);
    for (i, &v) in nodes.iter().enumerate() {
        subset.row_mut(i).copy_from_slice(logits.row(v));
    }
    let labels = gather_labels(graph, nodes);
    let (loss, d_subset) = softmax_cross_entropy(&subset, &labels)?;
    let mut d_logits = Tensor::zeros(logits.rows(), classes);
    for (i, &v) in nodes.iter().enumerate() {
        d_logits.row_mut(v).copy_from_slice(d_subset.row(i));
    }
    Ok((loss, d_logits))
}

/// Eval-mode (no dropout) softmax-CE over `nodes`. Probe point for
/// finite-difference checks.
pub fn classification_loss(
    graph: &MultimodalGraph,
    features: Features<'_>,
    params: &ModelParams,
    nodes: &[usize],
) -> Result<f64, GnnError> {
    let mut pass = Pass::eval(graph);
    let (logits, _) = params.forward(&mut pass, &features)?;
    Ok(subset_cross_entropy(graph, &logits, nodes)?.0)
}

/// Digest of which side of zero every ReLU/LeakyReLU pre-activation falls on
/// during an eval-mode forward pass. A central difference through a single
/// parameter is only trustworthy when both probe points share the digest of
/// the center, so gradient checks skip components where it changes.
pub fn activation_pattern(
    graph: &MultimodalGraph,
    features: Features<'_>,
    params: &ModelParams,
) -> Result<u64, GnnError> {
    let mut pass = Pass::eval(graph);
    params.forward(&mut pass, &features)?;
    Ok(pass.pattern)
}

/// Same loss, but also accumulates parameter gradients in place.
pub fn classification_grads(
    graph: &MultimodalGraph,
    features: Features<'_>,
    params: &mut ModelParams,
    nodes: &[usize],
) -> Result<f64, GnnError> {
    let mut pass = Pass::eval(graph);
    let (logits, tape) = params.forward(&mut pass, &features)?;
    let (loss, d_logits) = subset_cross_entropy(graph, &logits, nodes)?;
    params.backward(graph, &tape, &d_logits)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainMetrics {
    pub loss_curve: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: GnnConfig,
    pub params: ModelParams,
    pub classes: usize,
    pub feature_dims: FeatureDims,
    pub metrics: TrainMetrics,
}

fn gather_labels(graph: &MultimodalGraph, nodes: &[usize]) -> Vec<usize> {
    nodes.iter().map(|&v| graph.node(v).label).collect()
}

fn subset_accuracy(logits: &Tensor, graph: &MultimodalGraph, nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for &v in nodes {
        if argmax(logits.row(v)) == graph.node(v).label {
            hits += 1;
        }
    }
    hits as f64 / nodes.len() as f64
}

/// Index of the row maximum; ties go to the lower index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Full-batch training with softmax-CE over the train split. Tracks
/// validation accuracy each epoch and returns the parameters of the best one
/// (earliest wins ties). `epochs = 0` returns the seeded initialization.
pub fn train_node_classifier(
    graph: &MultimodalGraph,
    features: Features<'_>,
    split: &SplitAssignment,
    cfg: &GnnConfig,
) -> Result<TrainedModel, GnnError> {
    cfg.validate()?;
    if features.rows() != graph.node_count() {
        return Err(NumericsError::ShapeMismatch {
            op: "train_node_classifier",
            lhs: (features.rows(), 0),
            rhs: (graph.node_count(), 0),
        }
        .into());
    }
    let classes = graph.classes().len();
    let mut init_rng = rng_from_seed(derive_seed(cfg.seed, 0));
    let mut params = ModelParams::init(cfg, features.dims(), classes, &mut init_rng)?;
    let optim = OptimConfig::with_lr(cfg.lr);

    let eval = |params: &ModelParams| -> Result<Tensor, GnnError> {
        let mut pass = Pass::eval(graph);
        Ok(params.forward(&mut pass, &features)?.0)
    };

    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    for epoch in 0..cfg.epochs {
        let mut epoch_rng = rng_from_seed(derive_seed(cfg.seed, 1 + epoch as u64));
        let mut pass = Pass::train(graph, cfg.dropout, &mut epoch_rng);
        let (logits, tape) = params.forward(&mut pass, &features)?;
        let (loss, d_logits) = subset_cross_entropy(graph, &logits, &split.train)?;
        loss_curve.push(loss);
        params.backward(graph, &tape, &d_logits)?;
        adam_step(&mut params.parameters_mut(), &optim)?;

        let val_acc = subset_accuracy(&eval(&params)?, graph, &split.val);
        if best.as_ref().map_or(true, |(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, params.clone()));
        }
    }

    let (best_epoch, val_accuracy, final_params) = match best {
        Some((e, a, p)) => (Some(e), a, p),
        None => {
            let acc = subset_accuracy(&eval(&params)?, graph, &split.val);
            (None, acc, params)
        }
    };
    let test_accuracy = subset_accuracy(&eval(&final_params)?, graph, &split.test);
    Ok(TrainedModel {
        config: *cfg,
        params: final_params,
        classes,
        feature_dims: features.dims(),
        metrics: TrainMetrics {
            loss_curve,
            best_epoch,
            val_accuracy,
            test_accuracy,
        },
    })
}

#[derive(Debug, Clone)]
pub struct Predictions {
    pub labels: Vec<usize>,
    /// Softmax probabilities, one row per requested node.
    pub scores: Tensor,
}

/// Deterministic inference for a node subset: argmax labels plus per-class
/// probabilities. Feature dims must match training.
pub fn predict(
    model: &TrainedModel,
    graph: &MultimodalGraph,
    features: Features<'_>,
    nodes: &[usize],
) -> Result<Predictions, GnnError> {
    if features.dims() != model.feature_dims || features.rows() != graph.node_count() {
        return Err(NumericsError::ShapeMismatch {
            op: "predict",
            lhs: (features.rows(), 0),
            rhs: (graph.node_count(), 0),
        }
        .into());
    }
    let mut pass = Pass::eval(graph);
    let (logits, _) = model.params.forward(&mut pass, &features)?;
    let mut subset = Tensor::zeros(nodes.len(), model.classes);
    for (i, &v) in nodes.iter().enumerate() {
        subset.row_mut(i).copy_from_slice(logits.row(v));
    }
    let labels = (0..subset.rows()).map(|i| argmax(subset.row(i))).collect();
    Ok(Predictions {
        labels,
        scores: softmax_rows(&subset),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{split_nodes, NodeRecord};
    use crate::rng::uniform;
    use alloc::format;
    use alloc::string::String;

    fn plain_graph(n: usize, edges: &[(usize, usize)], labels: &[usize], classes: usize) -> MultimodalGraph {
        let nodes: Vec<NodeRecord> = (0..n)
            .map(|id| NodeRecord {
                id,
                text: format!("n{id}"),
                label: labels[id],
                image_row: None,
                image_path: None,
            })
            .collect();
        let class_names: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
        MultimodalGraph::assemble(nodes, edges, class_names, vec![], None)
            .unwrap()
            .0
    }

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::from_fn(rows, cols, |_, _| uniform(&mut rng, -1.0, 1.0))
    }

    #[test]
    fn gcn_layer_isolated_identity() {
        // Isolated node with identity weight: self-loop coefficient is 1.
        let g = plain_graph(1, &[], &[0], 1);
        let x = Tensor::from_vec(1, 2, vec![0.7, -0.3]).unwrap();
        let w = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let h = gcn_layer(&g, &x, &w, false).unwrap();
        assert_eq!(h.row(0), x.row(0));
    }

    #[test]
    fn gcn_layer_matches_dense_oracle() {
        let g = plain_graph(2, &[(0, 1)], &[0, 1], 2);
        let x = random_tensor(2, 3, 4);
        let w = random_tensor(3, 2, 5);
        let got = gcn_layer(&g, &x, &w, false).unwrap();
        // Dense oracle: A+I = ones(2,2), d~ = [2,2], so every coefficient is 1/2.
        for v in 0..2 {
            for c in 0..2 {
                let mut want = 0.0f64;
                for u in 0..2 {
                    for k in 0..3 {
                        want += 0.5 * x.get(u, k) as f64 * w.get(k, c) as f64;
                    }
                }
                assert!((got.get(v, c) as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gcn_layer_rejects_row_mismatch() {
        let g = plain_graph(2, &[(0, 1)], &[0, 1], 2);
        let x = Tensor::zeros(3, 2);
        let w = Tensor::zeros(2, 2);
        assert!(matches!(
            gcn_layer(&g, &x, &w, false),
            Err(GnnError::Numerics(NumericsError::ShapeMismatch { .. }))
        ));
    }

    #[test]
    fn sage_layer_isolated_and_star() {
        let g = plain_graph(4, &[(0, 1), (0, 2), (0, 3)], &[0, 0, 0, 0], 1);
        let mut x = Tensor::zeros(4, 2);
        for leaf in 1..4 {
            x.row_mut(leaf).copy_from_slice(&[2.0, -4.0]);
        }
        x.row_mut(0).copy_from_slice(&[1.0, 1.0]);
        let eye = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let h = sage_layer(&g, &x, &eye, &eye, false).unwrap();
        // Center: self + mean of 3 identical leaves.
        assert_eq!(h.row(0), &[3.0, -3.0]);

        let isolated = plain_graph(1, &[], &[0], 1);
        let x1 = Tensor::from_vec(1, 2, vec![0.5, -0.5]).unwrap();
        let h1 = sage_layer(&isolated, &x1, &eye, &eye, true).unwrap();
        assert_eq!(h1.row(0), &[0.5, 0.0]); // ReLU clips the negative.
    }

    #[test]
    fn mmgcn_zeroed_image_branch_equals_text_path() {
        let g = plain_graph(3, &[(0, 1), (1, 2)], &[0, 1, 0], 2);
        let x_text = random_tensor(3, 4, 7);
        let x_image = Tensor::zeros(3, 4);
        let mut rng = rng_from_seed(9);
        let cfg = GnnConfig {
            hidden: 5,
            ..GnnConfig::new(ModelKind::Mmgcn)
        };
        let params = match ModelParams::init(
            &cfg,
            FeatureDims::PerModality { text: 4, image: 4 },
            2,
            &mut rng,
        )
        .unwrap()
        {
            ModelParams::Mmgcn(mut p) => {
                p.image_proj.value_mut().fill(0.0);
                p
            }
            _ => unreachable!(),
        };
        let logits = mmgcn_forward(&g, &x_text, &x_image, &params).unwrap();
        // Text-only path: branch stack, projection, classifier by hand.
        let mut h = x_text.clone();
        for w in &params.text_layers {
            h = gcn_layer(&g, &h, w.value(), true).unwrap();
        }
        let want = h
            .matmul(params.text_proj.value())
            .unwrap()
            .matmul(params.classifier.value())
            .unwrap();
        for i in 0..logits.data().len() {
            assert!((logits.data()[i] - want.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn mgat_attention_is_a_softmax() {
        // Node 0 with 4 neighbors and equal scores: alpha = 0.25 each.
        let g = plain_graph(5, &[(0, 1), (0, 2), (0, 3), (0, 4)], &[0; 5], 1);
        let x = Tensor::from_fn(5, 3, |r, c| if r == 0 { 0.1 } else { 0.5 + c as f32 * 0.0 });
        let layer = AttentionLayerParams {
            weight: Parameter::new("w", random_tensor(3, 4, 3)),
            attn: Parameter::new("a", random_tensor(1, 8, 4)),
        };
        let alphas = attention_weights(&g, &layer, &x).unwrap();
        assert_eq!(alphas[0].len(), 4);
        for &a in &alphas[0] {
            assert!((a - 0.25).abs() < 1e-6, "{a}");
        }
        // Leaves have a single neighbor: alpha = 1 regardless of scores.
        for v in 1..5 {
            assert_eq!(alphas[v].len(), 1);
            assert!((alphas[v][0] - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn mgat_attention_matches_direct_softmax() {
        let g = plain_graph(5, &[(0, 1), (0, 2), (1, 2), (2, 3), (3, 4)], &[0; 5], 1);
        let x = random_tensor(5, 3, 11);
        let layer = AttentionLayerParams {
            weight: Parameter::new("w", random_tensor(3, 4, 12)),
            attn: Parameter::new("a", random_tensor(1, 8, 13)),
        };
        let got = attention_weights(&g, &layer, &x).unwrap();
        let xw = x.matmul(layer.weight.value()).unwrap();
        let a = layer.attn.value().row(0);
        for v in 0..5 {
            let neigh = g.neighbors(v);
            let scores: Vec<f64> = neigh
                .iter()
                .map(|&u| {
                    let mut s = 0.0f64;
                    for c in 0..4 {
                        s += a[c] as f64 * xw.get(v, c) as f64;
                        s += a[4 + c] as f64 * xw.get(u, c) as f64;
                    }
                    if s > 0.0 {
                        s
                    } else {
                        s * LEAKY_SLOPE as f64
                    }
                })
                .collect();
            let denom: f64 = scores.iter().map(|&s| libm::exp(s)).sum();
            for (i, &s) in scores.iter().enumerate() {
                let want = libm::exp(s) / denom;
                assert!((got[v][i] as f64 - want).abs() < 1e-6);
            }
        }
    }

    fn two_cluster_graph(n_per: usize, seed: u64) -> (MultimodalGraph, Tensor) {
        let n = 2 * n_per;
        let mut edges = Vec::new();
        for b in 0..2 {
            let base = b * n_per;
            for i in 0..n_per {
                edges.push((base + i, base + (i + 1) % n_per));
                edges.push((base + i, base + (i + 2) % n_per));
            }
        }
        edges.push((0, n_per)); // one weak inter-cluster tie
        let labels: Vec<usize> = (0..n).map(|v| v / n_per).collect();
        let g = plain_graph(n, &edges, &labels, 2);
        let mut rng = rng_from_seed(seed);
        let x = Tensor::from_fn(n, 4, |r, c| {
            let center = if r < n_per { 1.0 } else { -1.0 };
            let base = if c == 0 { center } else { 0.0 };
            base + uniform(&mut rng, -0.3, 0.3)
        });
        (g, x)
    }

    #[test]
    fn gcn_separates_two_clusters() {
        let (g, x) = two_cluster_graph(20, 3);
        let split = split_nodes(&g, [0.6, 0.2, 0.2], 5).unwrap();
        let cfg = GnnConfig {
            hidden: 16,
            epochs: 120,
            lr: 0.05,
            seed: 1,
            ..GnnConfig::new(ModelKind::Gcn)
        };
        let model = train_node_classifier(&g, Features::Single(&x), &split, &cfg).unwrap();
        assert!(
            model.metrics.test_accuracy >= 0.95,
            "test acc {}",
            model.metrics.test_accuracy
        );
    }

    #[test]
    fn zero_epochs_is_chance_level() {
        // Labels independent of features, so an untrained model cannot
        // luck into structure; a large test split keeps accuracy near 1/C.
        let n = 200;
        let mut rng = rng_from_seed(8);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2usize)).collect();
        let edges: Vec<(usize, usize)> = (0..n).map(|v| (v, (v + 1) % n)).collect();
        let g = plain_graph(n, &edges, &labels, 2);
        let x = random_tensor(n, 6, 21);
        let split = split_nodes(&g, [0.4, 0.1, 0.5], 2).unwrap();
        let cfg = GnnConfig {
            epochs: 0,
            seed: 3,
            ..GnnConfig::new(ModelKind::Gcn)
        };
        let model = train_node_classifier(&g, Features::Single(&x), &split, &cfg).unwrap();
        assert!(model.metrics.best_epoch.is_none());
        assert!(model.metrics.loss_curve.is_empty());
        assert!(
            (model.metrics.test_accuracy - 0.5).abs() <= 0.15,
            "test acc {}",
            model.metrics.test_accuracy
        );
    }

    #[test]
    fn predict_is_deterministic_and_checks_dims() {
        let (g, x) = two_cluster_graph(10, 4);
        let split = split_nodes(&g, [0.6, 0.2, 0.2], 1).unwrap();
        let cfg = GnnConfig {
            epochs: 5,
            dropout: 0.4,
            seed: 2,
            ..GnnConfig::new(ModelKind::Sage)
        };
        let model = train_node_classifier(&g, Features::Single(&x), &split, &cfg).unwrap();
        let nodes: Vec<usize> = (0..g.node_count()).collect();
        let a = predict(&model, &g, Features::Single(&x), &nodes).unwrap();
        let b = predict(&model, &g, Features::Single(&x), &nodes).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.scores, b.scores);

        let wrong = Tensor::zeros(g.node_count(), 7);
        assert!(predict(&model, &g, Features::Single(&wrong), &nodes).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low_and_ignores_shift() {
        assert_eq!(argmax(&[0.1, 2.0, -1.0]), 1);
        assert_eq!(argmax(&[3.0, 3.0, 1.0]), 0);
        assert_eq!(argmax(&[1.0, 1.0, 1.0]), 0);
        let row = [0.4f32, -0.2, 0.9];
        let shifted: Vec<f32> = row.iter().map(|v| v + 5.0).collect();
        assert_eq!(argmax(&row), argmax(&shifted));
    }

    #[test]
    fn multimodal_models_train_end_to_end() {
        let (g, x_text) = two_cluster_graph(12, 6);
        // Image modality: same signal, different basis.
        let x_image = {
            let mut rng = rng_from_seed(14);
            let mix = Tensor::from_fn(4, 3, |_, _| uniform(&mut rng, -1.0, 1.0));
            x_text.matmul(&mix).unwrap()
        };
        let split = split_nodes(&g, [0.6, 0.2, 0.2], 9).unwrap();
        for kind in [ModelKind::Mmgcn, ModelKind::Mgat] {
            let cfg = GnnConfig {
                hidden: 8,
                epochs: 60,
                lr: 0.05,
                seed: 5,
                ..GnnConfig::new(kind)
            };
            let model = train_node_classifier(
                &g,
                Features::PerModality {
                    text: &x_text,
                    image: &x_image,
                },
                &split,
                &cfg,
            )
            .unwrap();
            assert!(
                model.metrics.test_accuracy >= 0.8,
                "{kind:?} acc {}",
                model.metrics.test_accuracy
            );
        }
    }

    #[test]
    fn modality_row_count_mismatch_is_rejected() {
        let (g, x_text) = two_cluster_graph(5, 2);
        let x_image = Tensor::zeros(3, 4);
        let split = split_nodes(&g, [0.6, 0.2, 0.2], 9).unwrap();
        let cfg = GnnConfig {
            epochs: 1,
            ..GnnConfig::new(ModelKind::Mmgcn)
        };
        let err = train_node_classifier(
            &g,
            Features::PerModality {
                text: &x_text,
                image: &x_image,
            },
            &split,
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, GnnError::ModalityUnavailable));
    }
}
