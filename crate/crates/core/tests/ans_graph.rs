//! Node selection and graph construction against scalar and brute-force
//! oracles.

use dyngraph::ans::{self, Level, NodeLayout, Selection};
use dyngraph::diff::{ParameterStore, Prng, Tape, Tensor};
use dyngraph::graph::{build_intra, DynamicGraph, EdgeKind, Metric, NodeRef};
use dyngraph::Modality;
use proptest::prelude::*;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Selection by repeatedly taking the largest remaining value, scanning in
/// row-major order so the first maximum wins.
fn selection_oracle(values: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; values.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..values.len() {
            if !taken[i] && best.map_or(true, |b| values[i] > values[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

fn nearest_sub_oracle(layout: &NodeLayout, leaf: usize) -> usize {
    let subs: Vec<usize> = (0..layout.k()).filter(|&r| layout.levels[r] == Level::SubCentral).collect();
    let d2 = |a: (usize, usize), b: (usize, usize)| {
        let (dr, dc) = (a.0 as i64 - b.0 as i64, a.1 as i64 - b.1 as i64);
        dr * dr + dc * dc
    };
    let best = subs.iter().map(|&s| d2(layout.positions[leaf], layout.positions[s])).min().unwrap();
    *subs.iter().find(|&&s| d2(layout.positions[leaf], layout.positions[s]) == best).unwrap()
}

fn random_layout(rng: &mut Prng, h: usize, w: usize, sel: Selection) -> NodeLayout {
    let values: Vec<f64> = (0..h * w).map(|_| rng.uniform(0.0, 1.0)).collect();
    let cells = ans::top_k(&values, sel.k);
    let positions: Vec<(usize, usize)> = cells.iter().map(|&c| (c / w, c % w)).collect();
    NodeLayout::from_positions(&positions, w, sel)
}

#[test]
fn attention_map_matches_scalar_loops() {
    let mut rng = Prng::new(3);
    let (bs, c, h, w, ks) = (2, 5, 6, 7, 7);
    let f = Tensor::from_fn(&[bs, c, h, w], |_| rng.normal());
    let kernel = Tensor::from_fn(&[1, 2, ks, ks], |_| 0.2 * rng.normal());
    let bias = 0.1;
    let mut store = ParameterStore::new();
    store.insert(ans::conv_weight_name(Modality::Depth), kernel.clone());
    store.insert(ans::conv_bias_name(Modality::Depth), Tensor::full(&[1], bias));

    let mut tape = Tape::new();
    let fv = tape.input(f.clone());
    let sa = ans::attention_map(&mut tape, fv, &store, Modality::Depth).unwrap();
    let got = tape.value(sa);
    assert_eq!(got.shape(), [bs, 1, h, w]);

    let at = |b: usize, ch: usize, y: usize, x: usize| f.data()[((b * c + ch) * h + y) * w + x];
    for b in 0..bs {
        let mut pooled = vec![[0.0f64; 2]; h * w];
        for y in 0..h {
            for x in 0..w {
                let vals: Vec<f64> = (0..c).map(|ch| at(b, ch, y, x)).collect();
                pooled[y * w + x] = [vals.iter().sum::<f64>() / c as f64, vals.iter().cloned().fold(f64::MIN, f64::max)];
            }
        }
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = bias;
                for p in 0..2 {
                    for dy in -3..=3i64 {
                        for dx in -3..=3i64 {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                                continue;
                            }
                            let kv = kernel.data()[(p * ks + (dy + 3) as usize) * ks + (dx + 3) as usize];
                            acc += kv * pooled[yy as usize * w + xx as usize][p];
                        }
                    }
                }
                let want = sigmoid(acc);
                let have = got.data()[(b * h + y as usize) * w + x as usize];
                assert!((want - have).abs() < 1e-12, "({b},{y},{x}): {have} vs {want}");
            }
        }
    }
}

#[test]
fn enhance_identity_and_scaling() {
    let mut rng = Prng::new(11);
    let f = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.normal());
    let sa = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.uniform(0.0, 1.0));
    let mut tape = Tape::new();
    let fv = tape.input(f.clone());
    let zero = tape.input(Tensor::zeros(&[2, 1, 4, 4]));
    let same = ans::enhance(&mut tape, fv, zero).unwrap();
    assert_eq!(tape.value(same).data(), f.data());
    let sv = tape.input(sa.clone());
    let e = ans::enhance(&mut tape, fv, sv).unwrap();
    for (i, v) in tape.value(e).data().iter().enumerate() {
        let (b, cell) = (i / 48, i % 16);
        let want = f.data()[i] * (1.0 + sa.data()[b * 16 + cell]);
        assert!((v - want).abs() < 1e-12);
    }
}

#[test]
fn enhance_rejects_mismatched_maps() {
    let mut tape = Tape::new();
    let f = tape.input(Tensor::zeros(&[1, 2, 4, 4]));
    let sa = tape.input(Tensor::zeros(&[1, 1, 4, 3]));
    assert!(ans::enhance(&mut tape, f, sa).is_err());
}

#[test]
fn selected_rows_are_enhanced_cells() {
    let mut rng = Prng::new(5);
    let (c, h, w) = (3, 4, 5);
    let f = Tensor::from_fn(&[2, c, h, w], |_| rng.normal());
    let sa = Tensor::from_fn(&[2, 1, h, w], |_| rng.uniform(0.0, 1.0));
    let sel = Selection::new(6, 1, 2);
    let mut tape = Tape::new();
    let (fv, sv) = (tape.input(f.clone()), tape.input(sa.clone()));
    let e = ans::enhance(&mut tape, fv, sv).unwrap();
    let nodes = ans::select_nodes(&mut tape, e, sv, sel, Modality::Rgb).unwrap();
    assert_eq!(tape.shape(nodes.features), [2, 6, c]);
    let feats = tape.value(nodes.features).data().to_vec();
    for (b, layout) in nodes.layouts.iter().enumerate() {
        assert_eq!(layout.count(Level::MainCentral), 1);
        assert_eq!(layout.count(Level::SubCentral), 2);
        assert_eq!(layout.count(Level::Leaf), 3);
        for (r, &cell) in layout.cells.iter().enumerate() {
            assert_eq!(layout.positions[r], (cell / w, cell % w));
            let s = sa.data()[b * h * w + cell];
            assert_eq!(layout.attention[r], s);
            for ch in 0..c {
                let want = f.data()[(b * c + ch) * h * w + cell] * (1.0 + s);
                assert!((feats[(b * 6 + r) * c + ch] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_parameters_receive_gradient_through_the_product() {
    let mut rng = Prng::new(2);
    let mut store = ParameterStore::new();
    ans::register_params(&mut store, Modality::Rgb, 7, &mut rng);
    let f = Tensor::from_fn(&[1, 4, 4, 4], |_| rng.normal());
    let mut tape = Tape::new();
    let fv = tape.input(f);
    let sa = ans::attention_map(&mut tape, fv, &store, Modality::Rgb).unwrap();
    let e = ans::enhance(&mut tape, fv, sa).unwrap();
    let nodes = ans::select_nodes(&mut tape, e, sa, Selection::new(4, 1, 1), Modality::Rgb).unwrap();
    let loss = tape.sum(nodes.features).unwrap();
    tape.backward_into(loss, &mut store).unwrap();
    let g = store.grad(&ans::conv_weight_name(Modality::Rgb)).unwrap();
    assert!(g.data().iter().any(|v| *v != 0.0));
}

#[test]
fn selection_validation() {
    assert!(Selection::new(16, 1, 3).validate(64).is_ok());
    assert!(Selection::new(16, 0, 3).validate(64).is_err());
    assert!(Selection::new(16, 1, 0).validate(64).is_err());
    assert!(Selection::new(3, 2, 2).validate(64).is_err());
    assert!(Selection::new(65, 1, 3).validate(64).is_err());
}

#[test]
fn all_ties_select_row_major_prefix() {
    for v in [0.0, 0.5, 1.0] {
        let values = vec![v; 64];
        assert_eq!(ans::top_k(&values, 16), (0..16).collect::<Vec<_>>());
    }
}

#[test]
fn intra_example_leaf_goes_to_closest_sub() {
    let sel = Selection::new(5, 1, 3);
    let layout = NodeLayout::from_positions(&[(0, 0), (0, 1), (3, 3), (7, 7), (0, 2)], 8, sel);
    let edges = build_intra(&layout, Modality::Rgb, &Metric::Grid);
    let leaf = edges.iter().find(|e| e.src == NodeRef::new(Modality::Rgb, 5)).unwrap();
    assert_eq!(leaf.dst, NodeRef::new(Modality::Rgb, 2));
}

#[test]
fn feature_metric_uses_node_features() {
    let sel = Selection::new(4, 1, 2);
    // Grid-nearest sub of the leaf is rank 2, feature-nearest is rank 3.
    let layout = NodeLayout::from_positions(&[(0, 0), (5, 5), (0, 7), (5, 6)], 8, sel);
    let feats = [0.0, 0.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.2];
    let grid = build_intra(&layout, Modality::Depth, &Metric::Grid);
    let feat = build_intra(&layout, Modality::Depth, &Metric::Feature { features: &feats, dim: 2 });
    let leaf_dst = |edges: &[dyngraph::graph::Edge]| edges.iter().find(|e| e.src.rank == 4).unwrap().dst.rank;
    assert_eq!(leaf_dst(&grid), 2);
    assert_eq!(leaf_dst(&feat), 3);
}

#[test]
fn inter_edges_need_matching_layouts() {
    let a = NodeLayout::from_positions(&[(0, 0), (0, 1), (0, 2), (0, 3)], 8, Selection::new(4, 1, 2));
    let b = NodeLayout::from_positions(&[(0, 0), (0, 1), (0, 2)], 8, Selection::new(3, 1, 1));
    assert!(dyngraph::graph::build_inter(&a, &b, 1, 2).is_err());
}

#[test]
fn dump_lists_every_edge() {
    let sel = Selection::new(5, 1, 2);
    let l = NodeLayout::from_positions(&[(0, 0), (0, 1), (4, 4), (0, 2), (5, 5)], 8, sel);
    let g = DynamicGraph::assemble(&[(Modality::Rgb, &l, Metric::Grid), (Modality::Depth, &l, Metric::Grid)], sel).unwrap();
    let dump = g.dump();
    let lines: Vec<&str> = dump.lines().collect();
    assert_eq!(lines.len(), g.edges.len());
    assert!(lines.contains(&"rgb:2 -- rgb:1 intra-rgb"));
    assert!(lines.contains(&"rgb:4 -- rgb:2 intra-rgb"));
    assert!(lines.contains(&"rgb:5 -- rgb:3 intra-rgb"));
    assert!(lines.contains(&"rgb:3 -- depth:3 inter"));
    assert!(!dump.contains("rgb:4 -- depth:4"));
}

fn check_topology(g: &DynamicGraph, sel: Selection) {
    let intra = sel.m * sel.n + sel.leaves();
    assert_eq!(g.count(EdgeKind::IntraRgb), intra);
    assert_eq!(g.count(EdgeKind::IntraDepth), intra);
    assert_eq!(g.count(EdgeKind::Inter), sel.m + sel.n);
    assert!(g.is_symmetric());
    for m in Modality::BOTH {
        assert!(g.intra_connected(m));
        for r in sel.m + sel.n + 1..=sel.k {
            let i = g.index_of(NodeRef::new(m, r)).unwrap();
            assert_eq!(g.degree(i, EdgeKind::is_intra), 1);
            assert_eq!(g.degree(i, |k| k == EdgeKind::Inter), 0);
        }
        for r in 1..=sel.m + sel.n {
            let i = g.index_of(NodeRef::new(m, r)).unwrap();
            assert_eq!(g.degree(i, |k| k == EdgeKind::Inter), 1);
        }
    }
    for e in &g.edges {
        assert_ne!(e.src, e.dst);
        match e.kind {
            EdgeKind::Inter => assert_ne!(e.src.modality, e.dst.modality),
            k => {
                assert_eq!(e.src.modality, e.dst.modality);
                assert_eq!(EdgeKind::intra(e.src.modality), k);
            }
        }
    }
}

#[test]
fn sweep_counts_follow_the_formula() {
    let mut rng = Prng::new(9);
    for k in [4, 9, 16, 25, 36] {
        let sel = Selection::new(k, 1, 3);
        for _ in 0..20 {
            let (a, b) = (random_layout(&mut rng, 8, 8, sel), random_layout(&mut rng, 8, 8, sel));
            let g = DynamicGraph::assemble(&[(Modality::Rgb, &a, Metric::Grid), (Modality::Depth, &b, Metric::Grid)], sel)
                .unwrap();
            check_topology(&g, sel);
        }
    }
}

#[test]
fn single_modality_graph_has_no_inter_edges() {
    let sel = Selection::new(16, 1, 3);
    let l = random_layout(&mut Prng::new(1), 8, 8, sel);
    let g = DynamicGraph::assemble(&[(Modality::Depth, &l, Metric::Grid)], sel).unwrap();
    assert_eq!(g.node_count(), 16);
    assert_eq!(g.count(EdgeKind::Inter), 0);
    assert_eq!(g.count(EdgeKind::IntraDepth), 15);
    assert!(g.intra_connected(Modality::Depth));
}

fn tie_heavy_map() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u8..6, 64).prop_map(|v| v.into_iter().map(|x| x as f64 / 5.0).collect())
}

proptest! {
    #[test]
    fn top_k_matches_oracle(values in prop::collection::vec(-1.0f64..1.0, 64), k in 1usize..=64) {
        prop_assert_eq!(ans::top_k(&values, k), selection_oracle(&values, k));
    }

    #[test]
    fn top_k_matches_oracle_with_ties(values in tie_heavy_map(), k in 1usize..=64) {
        prop_assert_eq!(ans::top_k(&values, k), selection_oracle(&values, k));
    }

    #[test]
    fn leaves_attach_to_nearest_sub(seed in any::<u64>(), k in 5usize..=36, n in 1usize..=4) {
        let sel = Selection::new(k, 1, n);
        let layout = random_layout(&mut Prng::new(seed), 8, 8, sel);
        let edges = build_intra(&layout, Modality::Rgb, &Metric::Grid);
        for leaf in 1 + n..k {
            let e = edges.iter().filter(|e| e.src.rank == leaf + 1).collect::<Vec<_>>();
            prop_assert_eq!(e.len(), 1);
            prop_assert_eq!(e[0].dst.rank, nearest_sub_oracle(&layout, leaf) + 1);
        }
    }

    #[test]
    fn topology_invariants(seed in any::<u64>(), m in 1usize..=3, n in 1usize..=4, extra in 0usize..=20) {
        let sel = Selection::new(m + n + extra, m, n);
        let mut rng = Prng::new(seed);
        let (a, b) = (random_layout(&mut rng, 8, 8, sel), random_layout(&mut rng, 8, 8, sel));
        let g = DynamicGraph::assemble(&[(Modality::Rgb, &a, Metric::Grid), (Modality::Depth, &b, Metric::Grid)], sel).unwrap();
        check_topology(&g, sel);
    }

    #[test]
    fn enhance_scales_by_one_plus_attention(seed in any::<u64>()) {
        let mut rng = Prng::new(seed);
        let f = Tensor::from_fn(&[1, 2, 3, 3], |_| rng.normal() * 10.0);
        let sa = Tensor::from_fn(&[1, 1, 3, 3], |_| rng.uniform(0.0, 1.0));
        let mut tape = Tape::new();
        let (fv, sv) = (tape.input(f.clone()), tape.input(sa.clone()));
        let e = ans::enhance(&mut tape, fv, sv).unwrap();
        for (i, v) in tape.value(e).data().iter().enumerate() {
            prop_assert!((v - f.data()[i] * (1.0 + sa.data()[i % 9])).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }
}
