//! Acceptance gate: one test per release criterion, each self-contained and
//! printing a single PASS line with its measured evidence. Oracles here are
//! written directly from the documented formulas, independent of the library
//! code they check.

#[path = "../../core/tests/common/mod.rs"]
mod fd;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mmgl_core::encoder::{
    clip_align_loss, fuse_features, structure_contrastive_loss, train_structure_aware_encoder,
    ContrastiveConfig, FusionMode,
};
use mmgl_core::gnn::{
    activation_pattern, classification_grads, classification_loss, gcn_layer, sage_layer,
    train_node_classifier, FeatureDims, Features, GnnConfig, ModelKind, ModelParams,
};
use mmgl_core::graph::{
    split_nodes, top_k_similar_neighbors, EmbeddingTable, Modality, MultimodalGraph, NodeRecord,
    StructureSelectSpec,
};
use mmgl_core::metrics::{structure_gain, GainEntry};
use mmgl_core::prompt::{
    build_prediction_prompt, fallback_sentence, parse_label, render_template, DatasetDomain,
    ParseLabelError, PromptTemplate, StructureMode, TemplateBindings, TemplateKind,
};
use mmgl_core::rng::rng_from_seed;
use mmgl_core::tensor::{linear_backward, linear_forward, softmax_cross_entropy, Tensor};
use mmgl_harness::client::MockClient;
use mmgl_harness::formats::{read_emb1, write_emb1, DatasetPaths, Emb1Error};
use mmgl_harness::predictor::{predict_nodes, PredictOptions};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use tempfile::TempDir;

const GRAD_TOL: f64 = 1.0e-3;
const FD_H: f32 = 1.0e-3;

fn pass(criterion: u32, evidence: impl std::fmt::Display) {
    println!("criterion {criterion:02} PASS: {evidence}");
}

fn tensor_from(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn plain_nodes(n: usize, labels: &[usize]) -> Vec<NodeRecord> {
    (0..n)
        .map(|id| NodeRecord {
            id,
            text: format!("n{id}"),
            label: labels[id],
            image_row: None,
            image_path: None,
        })
        .collect()
}

fn bare_graph(n: usize, edges: &[(usize, usize)], classes: usize, rng: &mut StdRng) -> MultimodalGraph {
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let class_names: Vec<String> = (0..classes).map(|c| format!("class {c}")).collect();
    MultimodalGraph::assemble(plain_nodes(n, &labels), edges, class_names, vec![], None)
        .unwrap()
        .0
}

fn random_edges(rng: &mut StdRng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    edges
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness on every trainable path.

struct Pair {
    lhs: Tensor,
    rhs: Tensor,
}

impl Pair {
    fn len(&self) -> usize {
        self.lhs.data().len() + self.rhs.data().len()
    }
    fn read(&self, i: usize) -> f32 {
        let nl = self.lhs.data().len();
        if i < nl {
            self.lhs.data()[i]
        } else {
            self.rhs.data()[i - nl]
        }
    }
    fn write(&mut self, i: usize, v: f32) {
        let nl = self.lhs.data().len();
        if i < nl {
            self.lhs.data_mut()[i] = v;
        } else {
            self.rhs.data_mut()[i - nl] = v;
        }
    }
}

fn cat_grads(a: &Tensor, b: &Tensor) -> Vec<f64> {
    a.data()
        .iter()
        .chain(b.data().iter())
        .map(|&g| g as f64)
        .collect()
}

fn pair_fd<F>(lhs: Tensor, rhs: Tensor, analytic: Vec<f64>, loss: F) -> f64
where
    F: Fn(&Tensor, &Tensor) -> f64,
{
    let mut state = Pair { lhs, rhs };
    let n = state.len();
    fd::fd_max_rel(
        &mut state,
        n,
        &|s, i| s.read(i),
        &|s, i, v| s.write(i, v),
        &|s| loss(&s.lhs, &s.rhs),
        &analytic,
        FD_H,
    )
}

fn flat_len(params: &ModelParams) -> usize {
    params
        .parameters()
        .iter()
        .map(|p| p.value().data().len())
        .sum()
}

fn read_flat(params: &ModelParams, mut i: usize) -> f32 {
    for p in params.parameters() {
        let len = p.value().data().len();
        if i < len {
            return p.value().data()[i];
        }
        i -= len;
    }
    unreachable!()
}

fn write_flat(params: &mut ModelParams, mut i: usize, v: f32) {
    for p in params.parameters_mut() {
        let len = p.value().data().len();
        if i < len {
            p.value_mut().data_mut()[i] = v;
            return;
        }
        i -= len;
    }
    unreachable!()
}

/// Central differences over every model parameter. Probes whose activation
/// pattern differs from the center at either side straddle a ReLU kink and
/// are skipped; the analytic gradient is only defined on the center pattern.
fn model_fd_max_rel(
    graph: &MultimodalGraph,
    features: Features<'_>,
    params: &mut ModelParams,
    train: &[usize],
    analytic: &[f64],
) -> (f64, usize, usize) {
    let center = activation_pattern(graph, features, params).unwrap();
    let n = flat_len(params);
    let mut numeric = vec![f64::NAN; n];
    let mut skipped = 0usize;
    for i in 0..n {
        let orig = read_flat(params, i);
        write_flat(params, i, orig + FD_H);
        let plus = classification_loss(graph, features, params, train).unwrap();
        let plus_pat = activation_pattern(graph, features, params).unwrap();
        write_flat(params, i, orig - FD_H);
        let minus = classification_loss(graph, features, params, train).unwrap();
        let minus_pat = activation_pattern(graph, features, params).unwrap();
        write_flat(params, i, orig);
        if plus_pat != center || minus_pat != center {
            skipped += 1;
            continue;
        }
        numeric[i] = (plus - minus) / (2.0 * FD_H as f64);
    }
    let inf = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0f64, |m, x| m.max(x.abs()));
    let denom = inf(&mut analytic.iter().copied())
        .max(inf(&mut numeric.iter().copied().filter(|v| !v.is_nan())))
        .max(1.0e-6);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (a, v) in analytic.iter().zip(&numeric) {
        if v.is_nan() {
            continue;
        }
        checked += 1;
        max_rel = max_rel.max((a - v).abs() / denom);
    }
    (max_rel, checked, skipped)
}

#[test]
fn criterion_01_gradients_match_finite_differences_on_every_path() {
    let started = Instant::now();
    let instances = 20usize;
    let mut worst: Vec<(String, f64)> = Vec::new();

    // Linear layer, with and without bias.
    let mut path_max = 0.0f64;
    for seed in 0..instances as u64 {
        let mut rng = StdRng::seed_from_u64(100 + seed);
        let (r, k, c) = (
            rng.random_range(2..=5),
            rng.random_range(2..=4),
            rng.random_range(2..=4),
        );
        let x = tensor_from(&mut rng, r, k);
        let w = tensor_from(&mut rng, k, c);
        let probe = tensor_from(&mut rng, r, c);
        let with_bias = seed % 2 == 0;
        let bias: Vec<f32> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let grads = linear_backward(&x, &w, &probe, with_bias).unwrap();
        let mut analytic = cat_grads(&grads.d_x, &grads.d_w);
        if with_bias {
            analytic.extend(grads.d_bias.as_ref().unwrap().iter().map(|&g| g as f64));
        }
        // Probe-weighted sum turns the layer output into a scalar loss.
        struct St {
            x: Tensor,
            w: Tensor,
            b: Vec<f32>,
        }
        let mut st = St {
            x,
            w,
            b: bias.clone(),
        };
        let nx = st.x.data().len();
        let nw = st.w.data().len();
        let total = nx + nw + if with_bias { c } else { 0 };
        let rel = fd::fd_max_rel(
            &mut st,
            total,
            &move |s, i| {
                if i < nx {
                    s.x.data()[i]
                } else if i < nx + nw {
                    s.w.data()[i - nx]
                } else {
                    s.b[i - nx - nw]
                }
            },
            &move |s, i, v| {
                if i < nx {
                    s.x.data_mut()[i] = v;
                } else if i < nx + nw {
                    s.w.data_mut()[i - nx] = v;
                } else {
                    s.b[i - nx - nw] = v;
                }
            },
            &|s| {
                let out =
                    linear_forward(&s.x, &s.w, if with_bias { Some(&s.b) } else { None }).unwrap();
                out.data()
                    .iter()
                    .zip(probe.data())
                    .map(|(&o, &c)| o as f64 * c as f64)
                    .sum()
            },
            &analytic,
            FD_H,
        );
        assert!(rel < GRAD_TOL, "linear seed {seed}: rel {rel}");
        path_max = path_max.max(rel);
    }
    worst.push(("linear".into(), path_max));

    // Softmax cross-entropy.
    path_max = 0.0;
    for seed in 0..instances as u64 {
        let mut rng = StdRng::seed_from_u64(200 + seed);
        let (r, c) = (rng.random_range(2..=6), rng.random_range(2..=4));
        let logits = tensor_from(&mut rng, r, c);
        let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let analytic: Vec<f64> = grad.data().iter().map(|&g| g as f64).collect();
        let mut state = logits;
        let total = state.data().len();
        let rel = fd::fd_max_rel(
            &mut state,
            total,
            &|s, i| s.data()[i],
            &|s, i, v| s.data_mut()[i] = v,
            &|s| softmax_cross_entropy(s, &labels).unwrap().0,
            &analytic,
            FD_H,
        );
        assert!(rel < GRAD_TOL, "softmax-ce seed {seed}: rel {rel}");
        path_max = path_max.max(rel);
    }
    worst.push(("softmax_ce".into(), path_max));

    // Pairwise image-text contrastive loss.
    path_max = 0.0;
    for seed in 0..instances as u64 {
        let mut rng = StdRng::seed_from_u64(300 + seed);
        let (b, d) = (rng.random_range(2..=6), rng.random_range(2..=5));
        let text = tensor_from(&mut rng, b, d);
        let image = tensor_from(&mut rng, b, d);
        let out = clip_align_loss(&text, &image, 0.5).unwrap();
        let analytic = cat_grads(&out.d_lhs, &out.d_rhs);
        let rel = pair_fd(text, image, analytic, |t, i| {
            clip_align_loss(t, i, 0.5).unwrap().loss
        });
        assert!(rel < GRAD_TOL, "clip seed {seed}: rel {rel}");
        path_max = path_max.max(rel);
    }
    worst.push(("clip_align".into(), path_max));

    // Structure contrastive loss.
    path_max = 0.0;
    for seed in 0..instances as u64 {
        let mut rng = StdRng::seed_from_u64(400 + seed);
        let (b, d) = (rng.random_range(2..=6), rng.random_range(2..=5));
        let anchors = tensor_from(&mut rng, b, d);
        let positives = tensor_from(&mut rng, b, d);
        let out = structure_contrastive_loss(&anchors, &positives, 0.5).unwrap();
        let analytic = cat_grads(&out.d_lhs, &out.d_rhs);
        let rel = pair_fd(anchors, positives, analytic, |a, p| {
            structure_contrastive_loss(a, p, 0.5).unwrap().loss
        });
        assert!(rel < GRAD_TOL, "structure seed {seed}: rel {rel}");
        path_max = path_max.max(rel);
    }
    worst.push(("structure_contrastive".into(), path_max));

    // All five classifier architectures, end to end through softmax-CE.
    for kind in [
        ModelKind::Mlp,
        ModelKind::Gcn,
        ModelKind::Sage,
        ModelKind::Mmgcn,
        ModelKind::Mgat,
    ] {
        path_max = 0.0;
        let mut total_skipped = 0usize;
        let mut total_components = 0usize;
        for seed in 0..instances as u64 {
            let mut rng = StdRng::seed_from_u64(1000 + seed);
            let n = rng.random_range(6..=9);
            let edges = random_edges(&mut rng, n, 0.35);
            let graph = bare_graph(n, &edges, 3, &mut rng);
            let x_text = tensor_from(&mut rng, n, 3);
            let x_image = tensor_from(&mut rng, n, 4);
            let (features, dims) = if kind.is_multimodal() {
                (
                    Features::PerModality {
                        text: &x_text,
                        image: &x_image,
                    },
                    FeatureDims::PerModality { text: 3, image: 4 },
                )
            } else {
                (Features::Single(&x_text), FeatureDims::Single(3))
            };
            let train: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.6)).collect();
            let train = if train.is_empty() { vec![0] } else { train };
            let cfg = GnnConfig {
                hidden: rng.random_range(3..=4),
                seed,
                ..GnnConfig::new(kind)
            };
            let mut init_rng = rng_from_seed(2000 + seed);
            let mut params = ModelParams::seeded(&cfg, dims, 3, &mut init_rng).unwrap();
            let mut with_grads = params.clone();
            classification_grads(&graph, features, &mut with_grads, &train).unwrap();
            let analytic: Vec<f64> = with_grads
                .parameters()
                .iter()
                .flat_map(|p| p.grad().data().iter().map(|&g| g as f64))
                .collect();
            let (rel, checked, skipped) =
                model_fd_max_rel(&graph, features, &mut params, &train, &analytic);
            assert!(
                rel < GRAD_TOL,
                "{kind:?} seed {seed}: rel {rel} over {checked} components"
            );
            total_skipped += skipped;
            total_components += analytic.len();
            path_max = path_max.max(rel);
        }
        // Kink-straddling probes must stay rare or the check proves nothing.
        assert!(
            total_skipped * 5 <= total_components,
            "{kind:?}: {total_skipped} of {total_components} probes skipped"
        );
        worst.push((format!("{kind:?}").to_lowercase(), path_max));
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "gradient checks took {elapsed:?}, budget is 60 s"
    );
    let overall = worst.iter().map(|&(_, r)| r).fold(0.0f64, f64::max);
    pass(
        1,
        format!(
            "9 paths x {instances} instances, max rel {overall:.2e} (tol {GRAD_TOL:.0e}), {} ms",
            elapsed.as_millis()
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Structure contrastive loss equals a direct per-term evaluation.

#[test]
fn criterion_02_structure_loss_matches_direct_per_term_oracle() {
    let tau = 0.5f64;
    let mut max_diff = 0.0f64;
    for batch in 0..50u64 {
        let mut rng = StdRng::seed_from_u64(7000 + batch);
        let d = rng.random_range(3..=8);
        let anchors = tensor_from(&mut rng, 16, d);
        let positives = tensor_from(&mut rng, 16, d);
        let got = structure_contrastive_loss(&anchors, &positives, tau as f32)
            .unwrap()
            .loss;

        // Direct evaluation: for each anchor i the positive score is
        // cos(a_i, p_i), the partition runs over cos(a_i, a_k) for every
        // anchor k in the batch, self included.
        let cos = |u: &[f32], v: &[f32]| -> f64 {
            let dot: f64 = u.iter().zip(v).map(|(&x, &y)| x as f64 * y as f64).sum();
            let nu: f64 = u.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            dot / (nu * nv)
        };
        let b = 16usize;
        let mut want = 0.0f64;
        for i in 0..b {
            let pair = cos(anchors.row(i), positives.row(i));
            let partition: f64 = (0..b)
                .map(|k| ((cos(anchors.row(i), anchors.row(k))) / tau).exp())
                .sum();
            want += partition.ln() - pair / tau;
        }
        want /= b as f64;

        let diff = (got - want).abs();
        assert!(diff <= 1.0e-6, "batch {batch}: |{got} - {want}| = {diff}");
        max_diff = max_diff.max(diff);
    }
    pass(
        2,
        format!("50 batches (B=16, tau=0.5), max |loss - oracle| {max_diff:.2e} <= 1e-6"),
    );
}

// ---------------------------------------------------------------------------
// 3. GCN and SAGE layers against dense/per-node oracles.

#[test]
fn criterion_03_layer_outputs_match_dense_and_per_node_oracles() {
    let mut max_diff = 0.0f64;
    for case in 0..100u64 {
        let mut rng = StdRng::seed_from_u64(9000 + case);
        let n = rng.random_range(2..=50);
        let edges = random_edges(&mut rng, n, (2.0 / n as f64).min(0.2).max(0.05));
        let graph = bare_graph(n, &edges, 2, &mut rng);
        let d_in = rng.random_range(1..=5);
        let d_out = rng.random_range(1..=4);
        let x = tensor_from(&mut rng, n, d_in);
        let relu = case % 2 == 0;

        // Dense normalized adjacency, all in f64.
        let mut adj = vec![vec![0.0f64; n]; n];
        for v in 0..n {
            adj[v][v] = 1.0;
        }
        for &(u, v) in &edges {
            adj[u][v] = 1.0;
            adj[v][u] = 1.0;
        }
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|v| 1.0 / (adj[v].iter().sum::<f64>()).sqrt())
            .collect();

        let w = tensor_from(&mut rng, d_in, d_out);
        let got = gcn_layer(&graph, &x, &w, relu).unwrap();
        for v in 0..n {
            for j in 0..d_out {
                let mut acc = 0.0f64;
                for u in 0..n {
                    if adj[v][u] == 0.0 {
                        continue;
                    }
                    let coef = inv_sqrt[v] * inv_sqrt[u];
                    let mut xw = 0.0f64;
                    for i in 0..d_in {
                        xw += x.row(u)[i] as f64 * w.row(i)[j] as f64;
                    }
                    acc += coef * xw;
                }
                if relu && acc < 0.0 {
                    acc = 0.0;
                }
                let diff = (got.row(v)[j] as f64 - acc).abs();
                assert!(diff <= 1.0e-5, "gcn case {case} node {v} col {j}: {diff}");
                max_diff = max_diff.max(diff);
            }
        }

        // SAGE: explicit per-node self + mean-neighbor terms.
        let w_self = tensor_from(&mut rng, d_in, d_out);
        let w_neigh = tensor_from(&mut rng, d_in, d_out);
        let got = sage_layer(&graph, &x, &w_self, &w_neigh, relu).unwrap();
        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for v in 0..n {
            for j in 0..d_out {
                let mut acc = 0.0f64;
                for i in 0..d_in {
                    acc += x.row(v)[i] as f64 * w_self.row(i)[j] as f64;
                }
                if !neighbors[v].is_empty() {
                    for i in 0..d_in {
                        let mean: f64 = neighbors[v]
                            .iter()
                            .map(|&u| x.row(u)[i] as f64)
                            .sum::<f64>()
                            / neighbors[v].len() as f64;
                        acc += mean * w_neigh.row(i)[j] as f64;
                    }
                }
                if relu && acc < 0.0 {
                    acc = 0.0;
                }
                let diff = (got.row(v)[j] as f64 - acc).abs();
                assert!(diff <= 1.0e-5, "sage case {case} node {v} col {j}: {diff}");
                max_diff = max_diff.max(diff);
            }
        }
    }
    pass(
        3,
        format!("100 graphs (<= 50 nodes), max |layer - oracle| {max_diff:.2e} <= 1e-5"),
    );
}

// ---------------------------------------------------------------------------
// 4. Top-k similar neighbors against exhaustive ranking.

#[test]
fn criterion_04_top_k_matches_exhaustive_ranking_with_ties() {
    let spec = StructureSelectSpec::default();
    assert_eq!((spec.k, spec.hop), (3, 1));
    let mut ties_seen = 0usize;
    for case in 0..100u64 {
        let mut rng = StdRng::seed_from_u64(11_000 + case);
        let n = rng.random_range(5..=40);
        let edges = random_edges(&mut rng, n, 0.25);
        let graph = bare_graph(n, &edges, 2, &mut rng);

        // Continuous features keep distinct cosines apart by far more than
        // either precision's rounding; byte-identical row copies are the
        // only ties, and those tie exactly in f32 and f64 alike.
        let mut features = Tensor::zeros(n, 3);
        for v in 0..n {
            if v > 0 && rng.random_bool(0.3) {
                let src = rng.random_range(0..v);
                let row: Vec<f32> = features.row(src).to_vec();
                features.row_mut(v).copy_from_slice(&row);
                continue;
            }
            for x in features.row_mut(v) {
                *x = rng.random_range(-1.0..1.0);
            }
        }

        let mut adjacency = vec![BTreeSet::new(); n];
        for &(u, v) in &edges {
            adjacency[u].insert(v);
            adjacency[v].insert(u);
        }
        let cos = |u: &[f32], v: &[f32]| -> f64 {
            let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
            let nu = u.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>().sqrt();
            let nv = v.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>().sqrt();
            dot / (nu * nv)
        };
        for v in 0..n {
            let got = top_k_similar_neighbors(&graph, v, &spec, &features).unwrap();
            let mut scored: Vec<(f64, usize)> = adjacency[v]
                .iter()
                .map(|&u| (cos(features.row(v), features.row(u)), u))
                .collect();
            for w in scored.windows(2) {
                if w[0].0 == w[1].0 {
                    ties_seen += 1;
                }
            }
            // Highest similarity first; equal similarity toward lower id.
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = scored.iter().take(spec.k).map(|&(_, u)| u).collect();
            assert_eq!(got, want, "case {case} node {v}");
        }
    }
    assert!(ties_seen > 0, "fixtures produced no exact similarity ties");
    pass(
        4,
        format!("100 graphs, exhaustive ranking agreed everywhere, {ties_seen} tie pairs exercised"),
    );
}

// ---------------------------------------------------------------------------
// 5. Multimodal > unimodal on the XOR dataset.

/// Two independent bits, one per modality; the label is their XOR, so either
/// modality alone is uninformative.
fn xor_graph(n: usize, seed: u64) -> MultimodalGraph {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(n);
    let mut text = Vec::with_capacity(n * 2);
    let mut image = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let a = rng.random_bool(0.5);
        let b = rng.random_bool(0.5);
        labels.push((a ^ b) as usize);
        let noise = |rng: &mut StdRng| rng.random_range(-0.2..0.2);
        text.push(if a { 1.0 } else { -1.0 } + noise(&mut rng));
        text.push(noise(&mut rng));
        image.push(if b { 1.0 } else { -1.0 } + noise(&mut rng));
        image.push(noise(&mut rng));
    }
    let nodes: Vec<NodeRecord> = (0..n)
        .map(|id| NodeRecord {
            id,
            text: format!("n{id}"),
            label: labels[id],
            image_row: Some(id),
            image_path: None,
        })
        .collect();
    let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    let tables = vec![
        EmbeddingTable::new(Modality::Text, n, 2, text).unwrap(),
        EmbeddingTable::new(Modality::Image, n, 2, image).unwrap(),
    ];
    MultimodalGraph::assemble(
        nodes,
        &edges,
        vec!["even".to_string(), "odd".to_string()],
        tables,
        None,
    )
    .unwrap()
    .0
}

#[test]
fn criterion_05_concat_beats_unimodal_on_xor_by_twenty_points() {
    let started = Instant::now();
    let graph = xor_graph(400, 31);
    let mut means = BTreeMap::new();
    for mode in [FusionMode::TextOnly, FusionMode::ImageOnly, FusionMode::Concat] {
        let mut accs = Vec::new();
        for seed in 0..5u64 {
            let split = split_nodes(&graph, [0.6, 0.2, 0.2], seed).unwrap();
            let fused = fuse_features(&graph, mode, None).unwrap();
            let cfg = GnnConfig {
                hidden: 8,
                epochs: 120,
                lr: 0.05,
                seed,
                ..GnnConfig::new(ModelKind::Mlp)
            };
            let trained =
                train_node_classifier(&graph, Features::Single(&fused.features), &split, &cfg)
                    .unwrap();
            accs.push(trained.metrics.test_accuracy);
        }
        means.insert(mode.as_str(), accs.iter().sum::<f64>() / accs.len() as f64);
    }
    let concat = means["concat"];
    let best_unimodal = means["text_only"].max(means["image_only"]);
    let margin = concat - best_unimodal;
    assert!(
        margin >= 0.20,
        "concat {concat:.4} vs best unimodal {best_unimodal:.4}: margin {margin:.4} < 0.20"
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}, budget 2 min");
    pass(
        5,
        format!(
            "MLP over 5 seeds: text {:.3}, image {:.3}, concat {:.3} (+{:.1} points), {} ms",
            means["text_only"],
            means["image_only"],
            concat,
            margin * 100.0,
            elapsed.as_millis()
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Structure encoder improves edge cosine with stock hyperparameters.

/// Two feature blocks with heavy within-block noise; edges stay within a
/// block, so pulling edge endpoints together has room to work.
fn two_block_graph(n: usize, seed: u64) -> MultimodalGraph {
    let mut rng = StdRng::seed_from_u64(seed);
    let d = 4usize;
    let half = n / 2;
    let mut text = Vec::with_capacity(n * d);
    let mut image = Vec::with_capacity(n * d);
    for v in 0..n {
        let sign = if v < half { 1.0f32 } else { -1.0 };
        for j in 0..d {
            let center = if j % 2 == 0 { sign } else { -sign };
            text.push(center + rng.random_range(-0.8..0.8));
            image.push(-center + rng.random_range(-0.8..0.8));
        }
    }
    let nodes: Vec<NodeRecord> = (0..n)
        .map(|id| NodeRecord {
            id,
            text: format!("n{id}"),
            label: (id >= half) as usize,
            image_row: Some(id),
            image_path: None,
        })
        .collect();
    let mut edges = Vec::with_capacity(n);
    for block in [0..half, half..n] {
        let ids: Vec<usize> = block.collect();
        for w in ids.windows(2) {
            edges.push((w[0], w[1]));
        }
        edges.push((ids[0], *ids.last().unwrap()));
    }
    let tables = vec![
        EmbeddingTable::new(Modality::Text, n, d, text).unwrap(),
        EmbeddingTable::new(Modality::Image, n, d, image).unwrap(),
    ];
    MultimodalGraph::assemble(
        nodes,
        &edges,
        vec!["a".to_string(), "b".to_string()],
        tables,
        None,
    )
    .unwrap()
    .0
}

#[test]
fn criterion_06_structure_encoder_raises_edge_cosine_with_defaults() {
    let graph = two_block_graph(16_384, 17);
    let defaults = ContrastiveConfig::default();
    assert_eq!(
        (defaults.tau, defaults.m, defaults.batch_size, defaults.epochs),
        (0.5, 5, 16, 1)
    );
    assert!((defaults.lr - 1.0e-5).abs() < 1e-12);
    let mut gains = Vec::new();
    for seed in 0..3u64 {
        let cfg = ContrastiveConfig {
            seed,
            ..ContrastiveConfig::default()
        };
        let (_, report) = train_structure_aware_encoder(&graph, &cfg).unwrap();
        gains.push(report.cosine_after - report.cosine_before);
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    assert!(
        mean_gain >= 0.01,
        "mean cosine gain {mean_gain:.5} < 0.01 (per-seed {gains:?})"
    );
    pass(
        6,
        format!("stock hyperparameters, mean edge-cosine gain {mean_gain:.4} >= 0.01 over 3 seeds"),
    );
}

// ---------------------------------------------------------------------------
// 7. Prompt templates byte-equal to the golden fixtures.

#[test]
fn criterion_07_templates_match_golden_fixtures_byte_for_byte() {
    let fixture_dir =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/prompts");
    let suffix = |kind: TemplateKind| match kind {
        TemplateKind::ImageDescription => "image_description",
        TemplateKind::AlignerSummary => "aligner",
        TemplateKind::AlignerSummaryStructural => "aligner_structural",
        TemplateKind::Predictor => "predictor",
        TemplateKind::PredictorStructural => "predictor_structural",
    };
    let bindings = TemplateBindings::placeholders();
    let mut compared = 0usize;
    for domain in DatasetDomain::ALL {
        for kind in TemplateKind::ALL {
            let path = fixture_dir.join(format!("{}_{}.txt", domain, suffix(kind)));
            let want = fs::read(&path)
                .unwrap_or_else(|e| panic!("missing fixture {}: {e}", path.display()));
            let got = render_template(&PromptTemplate::new(domain, kind), &bindings).unwrap();
            assert_eq!(
                got.as_bytes(),
                &want[..],
                "{domain}/{} diverges from fixture",
                kind.as_str()
            );
            compared += 1;
        }
        // The structural fixture must carry the no-neighbor fallback.
        let structural = fs::read_to_string(
            fixture_dir.join(format!("{}_aligner_structural.txt", domain)),
        )
        .unwrap();
        assert!(structural.contains(fallback_sentence(domain)), "{domain}");
    }
    assert_eq!(compared, 30, "expected 6 domains x 5 kinds");

    // The rendered SFT form must end in the answered suffix.
    let dir = TempDir::new().unwrap();
    let graph = movie_fixture(dir.path(), 4);
    let classes = graph.classes().to_vec();
    let built = build_prediction_prompt(
        &graph,
        0,
        &classes,
        StructureMode::None,
        &StructureSelectSpec::default(),
        None,
        Some("Western"),
    )
    .unwrap();
    assert!(
        built.bundle.canonical_text().ends_with("\n\nAssistant: Western"),
        "SFT suffix missing"
    );
    pass(7, "30 fixtures byte-identical; fallback sentence and SFT suffix verified");
}

// ---------------------------------------------------------------------------
// 8. Mock end-to-end prediction accuracy.

/// Movie-domain fixture on a path graph; every node gets an image file.
fn movie_fixture(dir: &Path, n: usize) -> MultimodalGraph {
    let nodes: Vec<NodeRecord> = (0..n)
        .map(|id| {
            let image = dir.join(format!("img_{id}.png"));
            fs::write(&image, [id as u8, 7]).unwrap();
            NodeRecord {
                id,
                text: format!("movie number {id}"),
                label: id % 2,
                image_row: None,
                image_path: Some(image.to_string_lossy().into_owned()),
            }
        })
        .collect();
    let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    MultimodalGraph::assemble(
        nodes,
        &edges,
        vec!["Western".to_string(), "Thriller".to_string()],
        vec![],
        Some(DatasetDomain::Movies),
    )
    .unwrap()
    .0
}

#[test]
fn criterion_08_mock_scores_exactly_as_seeded() {
    let dir = TempDir::new().unwrap();
    let graph = movie_fixture(dir.path(), 50);
    let classes = graph.classes().to_vec();
    let nodes: Vec<usize> = (0..50).collect();
    let opts = PredictOptions::default();
    let spec = StructureSelectSpec::default();

    let bundle_for = |v: usize| {
        build_prediction_prompt(&graph, v, &classes, StructureMode::None, &spec, None, None)
            .unwrap()
            .bundle
    };

    // Gold mock: every node answers its own label name.
    let mut gold = MockClient::new(BTreeMap::new(), "no idea");
    for &v in &nodes {
        gold.respond_to(&bundle_for(v), classes[graph.node(v).label].clone());
    }
    let report = predict_nodes(&gold, &graph, &nodes, None, None, &opts).unwrap();
    assert_eq!(report.accuracy, 1.0, "gold mock must score 1.0 exactly");
    assert_eq!(report.parsed, 50);

    // Half mock: odd nodes answer the other class, still parseable.
    let mut half = MockClient::new(BTreeMap::new(), "no idea");
    for &v in &nodes {
        let label = graph.node(v).label;
        let answer = if v % 2 == 0 { label } else { 1 - label };
        half.respond_to(&bundle_for(v), classes[answer].clone());
    }
    let report = predict_nodes(&half, &graph, &nodes, None, None, &opts).unwrap();
    assert_eq!(report.accuracy, 0.5, "half-gold mock must score 0.5 exactly");

    // parse_label cascade: exact, normalized substring, ambiguous, none.
    assert_eq!(parse_label("Western", &classes).unwrap(), 0);
    assert_eq!(
        parse_label("I'd call it a THRILLER, overall.", &classes).unwrap(),
        1
    );
    assert!(matches!(
        parse_label("a western thriller", &classes),
        Err(ParseLabelError::Ambiguous(_))
    ));
    assert!(matches!(
        parse_label("romance", &classes),
        Err(ParseLabelError::Unparseable)
    ));
    pass(8, "gold mock 1.0, half mock 0.5 exactly; parse cascade behaves per contract");
}

// ---------------------------------------------------------------------------
// 9. Full-run determinism through the command line.

fn write_cli_fixture(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    fs::create_dir_all(&data).unwrap();
    let mut nodes = fs::File::create(data.join("nodes.jsonl")).unwrap();
    for id in 0..40 {
        let image = data.join(format!("img_{id}.png"));
        fs::write(&image, [id as u8, 3, 9]).unwrap();
        writeln!(
            nodes,
            "{}",
            serde_json::json!({
                "id": id,
                "text": format!("movie number {id}"),
                "label": id % 2,
                "image_path": image.to_string_lossy(),
            })
        )
        .unwrap();
    }
    let edges: String = (1..40).map(|i| format!("{},{}\n", i - 1, i)).collect();
    fs::write(data.join("edges.txt"), edges).unwrap();
    fs::write(data.join("classes.txt"), "Western\nThriller\n").unwrap();
    let config = dir.join("experiment.toml");
    fs::write(
        &config,
        r#"paradigm = "predictor"
seeds = [0, 1]

[dataset]
nodes = "data/nodes.jsonl"
edges = "data/edges.txt"
classes = "data/classes.txt"
domain = "movies"

[client]
default_response = "most likely a Western"
"#,
    )
    .unwrap();
    config
}

#[test]
fn criterion_09_two_cli_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let config = write_cli_fixture(dir.path());
    let run = |out: &Path, subcommand: &str| {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_mmgl"))
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(out)
            .arg(subcommand)
            .status()
            .unwrap();
        assert!(status.success(), "{subcommand} into {} failed", out.display());
    };
    let (out1, out2) = (dir.path().join("run1"), dir.path().join("run2"));
    for out in [&out1, &out2] {
        run(out, "report");
        run(out, "export-sft");
    }
    for file in [
        "report.json",
        "report.md",
        "predictions_seed0.jsonl",
        "predictions_seed1.jsonl",
        "sft.jsonl",
    ] {
        let a = fs::read(out1.join(file)).unwrap();
        let b = fs::read(out2.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between runs");
        assert!(!a.is_empty(), "{file} is empty");
    }
    // Timing lives only in the sidecar, which is excluded from comparison.
    assert!(out1.join("report.meta.json").is_file());
    assert!(out2.join("report.meta.json").is_file());
    pass(9, "report.json, report.md, predictions, sft.jsonl byte-identical across runs");
}

// ---------------------------------------------------------------------------
// 10. Split ratios and structure gain.

#[test]
fn criterion_10_split_sizes_and_structure_gain_are_exact() {
    let mut rng = StdRng::seed_from_u64(13_000);
    for case in 0..50 {
        let n = rng.random_range(10..=500);
        let seed = rng.random::<u64>();
        let graph = bare_graph(n, &[], 1, &mut rng);
        let split = split_nodes(&graph, [0.6, 0.2, 0.2], seed).unwrap();
        let round = |r: f64| (r * n as f64).round() as i64;
        for (name, part, want) in [
            ("train", split.train.len(), round(0.6)),
            ("val", split.val.len(), round(0.2)),
            ("test", split.test.len(), round(0.2)),
        ] {
            assert!(
                (part as i64 - want).abs() <= 1,
                "case {case}: {name} {part} not within 1 of {want} (n={n})"
            );
        }
        let mut all: Vec<usize> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>(), "case {case}: not a partition");
    }

    for case in 0..20 {
        let aware = rng.random_range(1..=5);
        let agnostic = rng.random_range(1..=5);
        let mut entries = Vec::new();
        for i in 0..aware {
            entries.push(GainEntry {
                setting: format!("aware {i}"),
                structure_aware: true,
                accuracy: rng.random_range(0.0..1.0),
            });
        }
        for i in 0..agnostic {
            entries.push(GainEntry {
                setting: format!("agnostic {i}"),
                structure_aware: false,
                accuracy: rng.random_range(0.0..1.0),
            });
        }
        let mut best_aware = f64::NEG_INFINITY;
        let mut best_agnostic = f64::NEG_INFINITY;
        for e in &entries {
            if e.structure_aware {
                best_aware = best_aware.max(e.accuracy);
            } else {
                best_agnostic = best_agnostic.max(e.accuracy);
            }
        }
        let want = best_aware - best_agnostic;
        let got = structure_gain(&entries).unwrap();
        assert_eq!(got, want, "case {case}: gain mismatch");
    }
    pass(10, "50 splits within rounding of 60/20/20; 20 gain maps reproduced exactly");
}

// ---------------------------------------------------------------------------
// 11. Movies-shaped ingestion fidelity.

#[test]
fn criterion_11_movies_shaped_fixture_round_trips_and_truncation_is_precise() {
    const NODES: usize = 16_672;
    const EDGES: usize = 218_390;
    const CLASSES: usize = 19;
    const DIM: usize = 8;

    let dir = TempDir::new().unwrap();
    let mut rng = StdRng::seed_from_u64(15_000);

    let mut nodes = String::with_capacity(NODES * 64);
    for id in 0..NODES {
        nodes.push_str(&format!(
            r#"{{"id":{id},"text":"item {id}","label":{},"image_row":{id}}}"#,
            id % CLASSES
        ));
        nodes.push('\n');
    }
    fs::write(dir.path().join("nodes.jsonl"), nodes).unwrap();

    // A ring guarantees connectivity; random extra pairs are deduplicated up
    // front so the unique count is exact.
    let mut pairs: BTreeSet<(usize, usize)> = (0..NODES)
        .map(|i| {
            let j = (i + 1) % NODES;
            (i.min(j), i.max(j))
        })
        .collect();
    while pairs.len() < EDGES {
        let u = rng.random_range(0..NODES);
        let v = rng.random_range(0..NODES);
        if u != v {
            pairs.insert((u.min(v), u.max(v)));
        }
    }
    let mut edges = String::with_capacity(EDGES * 12);
    for &(u, v) in &pairs {
        edges.push_str(&format!("{u},{v}\n"));
    }
    // Noise the loader must drop without changing the unique count.
    for _ in 0..100 {
        edges.push_str("0,1\n");
    }
    for v in 0..10 {
        edges.push_str(&format!("{v},{v}\n"));
    }
    fs::write(dir.path().join("edges.txt"), edges).unwrap();

    let classes: String = (0..CLASSES).map(|c| format!("genre {c}\n")).collect();
    fs::write(dir.path().join("classes.txt"), classes).unwrap();

    for name in ["text.emb1", "image.emb1"] {
        let data: Vec<f32> = (0..NODES * DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        write_emb1(&dir.path().join(name), NODES, DIM, &data).unwrap();
    }

    let paths = DatasetPaths {
        nodes: dir.path().join("nodes.jsonl"),
        edges: dir.path().join("edges.txt"),
        classes: dir.path().join("classes.txt"),
        text_embeddings: Some(dir.path().join("text.emb1")),
        image_embeddings: Some(dir.path().join("image.emb1")),
    };
    let (graph, report) = mmgl_harness::formats::load_graph(&paths, None).unwrap();
    assert_eq!(report.nodes, NODES);
    assert_eq!(report.edges, EDGES);
    assert_eq!(report.classes, CLASSES);
    assert_eq!(report.duplicate_edges_dropped, 100);
    assert_eq!(report.self_loops_dropped, 10);
    assert_eq!(report.text_dim, Some(DIM));
    assert_eq!(report.image_dim, Some(DIM));
    assert_eq!(graph.node_count(), NODES);

    // Truncation must be rejected with the exact byte arithmetic.
    let full = fs::read(dir.path().join("text.emb1")).unwrap();
    let cut = dir.path().join("cut.emb1");
    fs::write(&cut, &full[..12 + full.len() / 2]).unwrap();
    match read_emb1(&cut) {
        Err(Emb1Error::TruncatedData {
            rows,
            dim,
            expected,
            got,
            ..
        }) => {
            assert_eq!((rows as usize, dim as usize), (NODES, DIM));
            assert_eq!(expected, (NODES * DIM * 4) as u64);
            assert_eq!(got, (12 + full.len() / 2 - 12) as u64);
            let message = read_emb1(&cut).unwrap_err().to_string();
            assert!(
                message.contains(&expected.to_string()) && message.contains(&got.to_string()),
                "error message lacks byte counts: {message}"
            );
        }
        other => panic!("expected TruncatedData, got {other:?}"),
    }
    pass(
        11,
        format!("{NODES} nodes / {EDGES} edges / {CLASSES} classes round-tripped; truncation named the byte counts"),
    );
}
