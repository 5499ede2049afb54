//! Randomized invariants: splits partition, neighbor selection agrees with
//! an exhaustive oracle, softmax rows are distributions, the structure loss
//! only sees directions, label parsing round-trips, argmax ignores shifts.

use mmgl_core::encoder::structure_contrastive_loss;
use mmgl_core::gnn::argmax;
use mmgl_core::graph::{
    sample_neighbors, split_nodes, top_k_similar_neighbors, MultimodalGraph, NodeRecord,
    SimilaritySource, StructureSelectSpec,
};
use mmgl_core::prompt::{normalize_label, parse_label};
use mmgl_core::tensor::{cosine_similarity, softmax_rows, Tensor};
use proptest::prelude::*;

fn build_graph(n: usize, edges: &[(usize, usize)]) -> MultimodalGraph {
    let nodes = (0..n)
        .map(|id| NodeRecord {
            id,
            text: format!("node {id}"),
            label: 0,
            image_row: None,
            image_path: None,
        })
        .collect();
    let (graph, _) =
        MultimodalGraph::assemble(nodes, edges, vec!["only".to_string()], Vec::new(), None)
            .unwrap();
    graph
}

prop_compose! {
    fn graph_with_edges(max_n: usize, max_e: usize)
        (n in 1..max_n)
        (n in Just(n), edges in prop::collection::vec((0..n, 0..n), 0..max_e))
        -> (usize, Vec<(usize, usize)>)
    {
        (n, edges)
    }
}

/// Queue BFS plus a full sort, written independently of the frontier walk
/// in the library.
fn exhaustive_top_k(
    graph: &MultimodalGraph,
    v: usize,
    k: usize,
    hop: usize,
    features: &Tensor,
) -> Vec<usize> {
    let n = graph.node_count();
    let mut dist = vec![usize::MAX; n];
    dist[v] = 0;
    let mut queue = std::collections::VecDeque::from([v]);
    while let Some(u) = queue.pop_front() {
        if dist[u] == hop {
            continue;
        }
        for &w in graph.neighbors(u) {
            if dist[w] == usize::MAX {
                dist[w] = dist[u] + 1;
                queue.push_back(w);
            }
        }
    }
    let mut scored: Vec<(f32, usize)> = (0..n)
        .filter(|&u| u != v && dist[u] != usize::MAX)
        .map(|u| {
            (
                cosine_similarity(features.row(v), features.row(u)).unwrap(),
                u,
            )
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, u)| u).collect()
}

/// Values on a coarse power-of-two lattice; cosine ties happen often and
/// float operations on them are exact.
fn lattice_tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-16i32..=16, rows * cols)
        .prop_map(move |v| Tensor::from_vec(rows, cols, v.into_iter().map(|x| x as f32 / 8.0).collect()).unwrap())
}

proptest! {
    #[test]
    fn split_partitions_and_is_deterministic(
        n in 1usize..400,
        seed in any::<u64>(),
        (a, b) in (0.05f64..0.45, 0.05f64..0.45),
    ) {
        let ratios = [1.0 - a - b, a, b];
        let graph = build_graph(n, &[]);
        let split = split_nodes(&graph, ratios, seed).unwrap();

        let mut all: Vec<usize> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());

        prop_assert!((split.val.len() as f64 - a * n as f64).abs() <= 0.5 + 1e-9);
        // Test may give one up to the clamp when both roundings land high.
        prop_assert!((split.test.len() as f64 - b * n as f64).abs() <= 1.5 + 1e-9);

        let again = split_nodes(&graph, ratios, seed).unwrap();
        prop_assert_eq!(split.train, again.train);
        prop_assert_eq!(split.val, again.val);
        prop_assert_eq!(split.test, again.test);
    }

    #[test]
    fn sampled_neighbors_are_real_and_deterministic(
        (n, edges) in graph_with_edges(40, 80),
        v_pick in any::<prop::sample::Index>(),
        m in 0usize..6,
        seed in any::<u64>(),
    ) {
        let graph = build_graph(n, &edges);
        let v = v_pick.index(n);
        let sampled = sample_neighbors(&graph, v, m, seed).unwrap();
        prop_assert!(sampled.len() <= m.min(graph.degree(v)));
        if m >= graph.degree(v) {
            prop_assert_eq!(sampled.len(), graph.degree(v));
        }
        for &u in &sampled {
            prop_assert!(graph.neighbors(v).contains(&u));
        }
        let mut dedup = sampled.clone();
        dedup.sort_unstable();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), sampled.len());
        prop_assert_eq!(sampled, sample_neighbors(&graph, v, m, seed).unwrap());
    }

    #[test]
    fn top_k_matches_exhaustive_oracle(
        (n, edges) in graph_with_edges(30, 60),
        v_pick in any::<prop::sample::Index>(),
        k in 1usize..5,
        hop in 1usize..4,
        cols in 1usize..4,
        raw in prop::collection::vec(-2i32..=2, 30 * 3),
    ) {
        let graph = build_graph(n, &edges);
        let v = v_pick.index(n);
        let features = Tensor::from_vec(
            n,
            cols,
            raw.iter().take(n * cols).map(|&x| x as f32).collect(),
        )
        .unwrap();
        let spec = StructureSelectSpec { k, hop, source: SimilaritySource::Fused };
        let got = top_k_similar_neighbors(&graph, v, &spec, &features).unwrap();
        prop_assert_eq!(got, exhaustive_top_k(&graph, v, k, hop, &features));
    }

    #[test]
    fn softmax_rows_are_shift_invariant_distributions(
        rows in 1usize..6,
        cols in 1usize..6,
        raw in prop::collection::vec(-160i32..=160, 36),
        shift in -64i32..=64,
    ) {
        let logits = Tensor::from_vec(
            rows,
            cols,
            raw.iter().take(rows * cols).map(|&x| x as f32 / 8.0).collect(),
        )
        .unwrap();
        let probs = softmax_rows(&logits);
        for r in 0..rows {
            let sum: f64 = probs.row(r).iter().map(|&p| p as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
            prop_assert!(probs.row(r).iter().all(|&p| p > 0.0 && p <= 1.0));
        }
        let shifted = Tensor::from_fn(rows, cols, |r, c| {
            logits.get(r, c) + shift as f32 / 8.0
        });
        let probs_shifted = softmax_rows(&shifted);
        for (a, b) in probs.data().iter().zip(probs_shifted.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn structure_loss_sees_only_directions(
        b in 1usize..6,
        cols in 1usize..5,
        anchors in lattice_tensor(5, 4),
        positives in lattice_tensor(5, 4),
        scale_exp in prop::collection::vec(-2i32..=2, 10),
    ) {
        let take = |t: &Tensor| {
            Tensor::from_fn(b, cols, |r, c| t.get(r, c))
        };
        let anchors = take(&anchors);
        let positives = take(&positives);
        let base = structure_contrastive_loss(&anchors, &positives, 0.5).unwrap();

        // Power-of-two row scales are exact in floats, so invariance holds
        // bit for bit, not just approximately.
        let rescale = |t: &Tensor, off: usize| {
            Tensor::from_fn(b, cols, |r, c| {
                t.get(r, c) * (scale_exp[off + r] as f32).exp2()
            })
        };
        let scaled = structure_contrastive_loss(
            &rescale(&anchors, 0),
            &rescale(&positives, 5),
            0.5,
        )
        .unwrap();
        prop_assert_eq!(base.loss, scaled.loss);

        if b == 1 {
            let self_pair = structure_contrastive_loss(&anchors, &anchors, 0.5).unwrap();
            prop_assert_eq!(self_pair.loss, 0.0);
        }
    }

    #[test]
    fn normalize_label_is_idempotent(s in "[ -~]{0,60}") {
        let once = normalize_label(&s);
        prop_assert_eq!(normalize_label(&once), once);
    }

    #[test]
    fn parse_label_round_trips_through_decoration(
        subset in prop::sample::subsequence(
            vec!["western", "musical", "thriller", "animation", "biography", "sports"],
            2..6,
        ),
        pick in any::<prop::sample::Index>(),
        prefix in prop::sample::select(vec!["", "the answer is ", "Category: ", "it should be "]),
        suffix in prop::sample::select(vec!["", ".", "!", ", probably"]),
        shout in any::<bool>(),
    ) {
        let candidates: Vec<String> = subset.iter().map(|s| s.to_string()).collect();
        let i = pick.index(candidates.len());
        let mut response = format!("{prefix}{}{suffix}", candidates[i]);
        if shout {
            response = response.to_uppercase();
        }
        prop_assert_eq!(parse_label(&response, &candidates), Ok(i));
    }

    #[test]
    fn argmax_ignores_common_shifts(
        raw in prop::collection::vec(-64i32..=64, 1..12),
        shift in -512i32..=512,
    ) {
        let row: Vec<f32> = raw.iter().map(|&x| x as f32 / 8.0).collect();
        let shifted: Vec<f32> = row.iter().map(|&x| x + shift as f32 / 8.0).collect();
        prop_assert_eq!(argmax(&row), argmax(&shifted));

        let best = argmax(&row);
        for (j, &x) in row.iter().enumerate() {
            prop_assert!(x <= row[best]);
            if x == row[best] {
                prop_assert!(best <= j);
            }
        }
    }
}
