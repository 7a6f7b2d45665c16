mod common;

use std::collections::BTreeSet;

use common::{iraq, monocacy, oracle_edges, random_example, EdgeKey};
use grasame::hiergraph::{build_graph, edge_counts, reconstruction_targets, HierGraph, RelationType};
use grasame::ingest::{build_vocabulary, linearize, Example, DEFAULT_PROMPT};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn built(ex: &Example, prompt: &str, bidirectional: bool) -> HierGraph {
    let vocab = build_vocabulary(std::slice::from_ref(ex), prompt, 1).unwrap();
    let input = linearize(ex, prompt, &vocab, 10_000).unwrap();
    build_graph(&input, bidirectional).unwrap()
}

fn keys(g: &HierGraph) -> (BTreeSet<EdgeKey>, BTreeSet<EdgeKey>) {
    let all = g.edges.iter().map(|e| (e.src, e.dst, e.rel.name(), e.dir.name())).collect();
    let fwd = g.forward_edges().iter().map(|e| (e.src, e.dst, e.rel.name(), e.dir.name())).collect();
    (all, fwd)
}

#[test]
fn matches_brute_force_on_200_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..200 {
        let ex = random_example(&mut rng, 7);
        for bidir in [true, false] {
            let g = built(&ex, DEFAULT_PROMPT, bidir);
            assert_eq!(keys(&g), oracle_edges(&ex, DEFAULT_PROMPT, bidir), "set {i}, bidirectional={bidir}: {ex:?}");
        }
    }
}

#[test]
fn iraq_has_eight_forward_edges() {
    let g = built(&iraq(), DEFAULT_PROMPT, true);
    assert_eq!(g.forward_edges().len(), 8);
    assert_eq!(oracle_edges(&iraq(), DEFAULT_PROMPT, true).1.len(), 8);
}

#[test]
fn monocacy_r5_count() {
    let g = built(&monocacy(), DEFAULT_PROMPT, true);
    assert_eq!(edge_counts(&g).forward[&RelationType::R5], 11);
    let (_, fwd) = oracle_edges(&monocacy(), DEFAULT_PROMPT, true);
    assert_eq!(fwd.iter().filter(|e| e.2 == "R5").count(), 11);
}

#[test]
fn unidirectional_halves_directed_edges() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let ex = random_example(&mut rng, 5);
        let b = edge_counts(&built(&ex, DEFAULT_PROMPT, true));
        let u = edge_counts(&built(&ex, DEFAULT_PROMPT, false));
        assert_eq!(b.directed_non_self(), 2 * u.directed_non_self());
        assert_eq!(
            reconstruction_targets(&built(&ex, DEFAULT_PROMPT, true)),
            reconstruction_targets(&built(&ex, DEFAULT_PROMPT, false))
        );
    }
}

fn shuffled(ex: &Example, perm: &[usize]) -> Example {
    Example {
        triples: perm.iter().map(|&i| ex.triples[i].clone()).collect(),
        target_text: ex.target_text.clone(),
    }
}

/// Relation type multiset of the edges touching each triple's tokens,
/// keyed by the triple's content. Position-free, so it survives reordering.
fn per_triple_signature(ex: &Example, g: &HierGraph, prompt_len: usize) -> BTreeSet<(String, Vec<&'static str>)> {
    let mut owner = vec![usize::MAX; g.num_nodes];
    let mut pos = prompt_len + 1;
    for (t, tr) in ex.triples.iter().enumerate() {
        for f in [&tr.head, &tr.relation, &tr.tail] {
            let n = 1 + grasame::ingest::tokenize(&grasame::ingest::normalize_field(f)).len();
            for o in owner.iter_mut().skip(pos).take(n) {
                *o = t;
            }
            pos += n;
        }
    }
    ex.triples
        .iter()
        .enumerate()
        .map(|(t, tr)| {
            let mut rels: Vec<&'static str> = g
                .forward_edges()
                .iter()
                .filter(|e| owner[e.src] == t && owner[e.dst] == t)
                .map(|e| e.rel.name())
                .collect();
            rels.sort();
            (format!("{}|{}|{}", tr.head, tr.relation, tr.tail), rels)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triple_order_keeps_within_triple_structure(seed in any::<u64>(), rot in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ex = random_example(&mut rng, 6);
        let n = ex.triples.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let ex2 = shuffled(&ex, &perm);
        let p = grasame::ingest::tokenize(DEFAULT_PROMPT).len();
        let g1 = built(&ex, DEFAULT_PROMPT, true);
        let g2 = built(&ex2, DEFAULT_PROMPT, true);
        prop_assert_eq!(per_triple_signature(&ex, &g1, p), per_triple_signature(&ex2, &g2, p));
        let c1 = edge_counts(&g1);
        let c2 = edge_counts(&g2);
        prop_assert_eq!(c1.forward, c2.forward);
    }

    #[test]
    fn every_node_has_exactly_one_self_loop(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = built(&random_example(&mut rng, 7), DEFAULT_PROMPT, true);
        let mut seen = vec![0; g.num_nodes];
        for e in g.self_loops() {
            prop_assert_eq!(e.src, e.dst);
            seen[e.src] += 1;
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn prompt_tokens_only_self(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = built(&random_example(&mut rng, 4), DEFAULT_PROMPT, true);
        let p = grasame::ingest::tokenize(DEFAULT_PROMPT).len();
        for e in &g.edges {
            if e.src < p || e.dst < p {
                prop_assert_eq!(e.rel, RelationType::SelfLoop);
            }
        }
    }
}
