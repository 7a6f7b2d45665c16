//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeSet;

use grasame::decode::StepScorer;
use grasame::ingest::{normalize_field, tokenize, Example, Triple};
use grasame::model::Model;
use grasame::tensor::{Graph, NodeId, Tensor};
use grasame::training::{compute_loss, PreparedExample, TrainConfig};
use std::rc::Rc;

use grasame::tensor::SparseMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(src, dst, relation name, direction name)`
pub type EdgeKey = (usize, usize, &'static str, &'static str);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Slot {
    Prompt,
    Graph,
    Special(usize, u8),
    Member(usize, u8),
}

/// Brute-force hierarchy: lay out the tokens from scratch, then test every
/// ordered pair of positions against each rule.
pub fn oracle_edges(ex: &Example, prompt: &str, bidirectional: bool) -> (BTreeSet<EdgeKey>, BTreeSet<EdgeKey>) {
    let mut slots = Vec::new();
    let mut words: Vec<Vec<String>> = Vec::new();
    for _ in tokenize(prompt) {
        slots.push(Slot::Prompt);
        words.push(Vec::new());
    }
    slots.push(Slot::Graph);
    words.push(Vec::new());
    for (t, tr) in ex.triples.iter().enumerate() {
        for (role, field) in [(0u8, &tr.head), (1, &tr.relation), (2, &tr.tail)] {
            let toks = tokenize(&normalize_field(field));
            slots.push(Slot::Special(t, role));
            words.push(toks.clone());
            for _ in &toks {
                slots.push(Slot::Member(t, role));
                words.push(Vec::new());
            }
        }
    }
    let n = slots.len();
    let mut fwd = BTreeSet::new();
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let rel = match (slots[a], slots[b]) {
                (Slot::Graph, Slot::Special(..)) => Some("R1"),
                (Slot::Special(t1, 0), Slot::Special(t2, 1)) if t1 == t2 => Some("R2"),
                (Slot::Special(t1, 1), Slot::Special(t2, 2)) if t1 == t2 => Some("R2"),
                (Slot::Special(t1, r1), Slot::Member(t2, r2)) if t1 == t2 && r1 == r2 => Some("R3"),
                (Slot::Member(t1, r1), Slot::Member(t2, r2)) if t1 == t2 && r1 == r2 && b == a + 1 => Some("R4"),
                (Slot::Special(_, r1), Slot::Special(_, r2))
                    if r1 != 1 && r2 != 1 && a < b && words[a] == words[b] =>
                {
                    Some("R5")
                }
                _ => None,
            };
            if let Some(r) = rel {
                fwd.insert((a, b, r, "FWD"));
            }
        }
    }
    let mut all = BTreeSet::new();
    for i in 0..n {
        all.insert((i, i, "SELF", "FWD"));
    }
    for &(a, b, r, _) in &fwd {
        if bidirectional {
            all.insert((a, b, r, "FWD"));
        }
        all.insert((b, a, r, "REV"));
    }
    (all, fwd)
}

const WORDS: &[&str] = &[
    "alpha", "beta", "gamma", "delta", "river", "city", "north", "old", "New", "\"1907\"", "(band)",
    "Lake", "x", "y", "z",
];
const RELS: &[&str] = &["capital", "leader_name", "country", "birth place", "is part of"];

fn random_entity(rng: &mut impl Rng) -> String {
    let len = rng.gen_range(1..=4);
    (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn pick_entity(rng: &mut impl Rng, pool: &mut Vec<String>) -> String {
    if !pool.is_empty() && rng.gen_bool(0.5) {
        pool.choose(rng).unwrap().clone()
    } else {
        let e = random_entity(rng);
        pool.push(e.clone());
        e
    }
}

/// 1–`max_triples` triples, entity lengths 1–4, frequent entity reuse.
pub fn random_example(rng: &mut impl Rng, max_triples: usize) -> Example {
    let n = rng.gen_range(1..=max_triples);
    let mut pool: Vec<String> = Vec::new();
    let triples = (0..n)
        .map(|_| {
            let h = pick_entity(rng, &mut pool);
            let r = RELS.choose(rng).unwrap().to_string();
            let t = pick_entity(rng, &mut pool);
            Triple { head: h, relation: r, tail: t }
        })
        .collect();
    Example {
        triples,
        target_text: "some text .".into(),
    }
}

pub fn monocacy() -> Example {
    let m = "14th New Jersey Volunteer Infantry Monument";
    let b = "Monocacy National Battlefield";
    Example {
        triples: vec![
            Triple::new(b, "location", "Frederick County, Maryland"),
            Triple::new(m, "established", "\"1907-07-11\""),
            Triple::new(m, "country", "\"United States\""),
            Triple::new(m, "category", "Historic districts in the United States"),
            Triple::new(m, "district", b),
            Triple::new(m, "state", "\"Maryland\""),
        ],
        target_text: String::new(),
    }
}

pub fn iraq() -> Example {
    Example {
        triples: vec![Triple::new("Iraq", "language", "Arabic")],
        target_text: "Iraq language is Arabic .".into(),
    }
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

pub const FD_STEP: f64 = 1e-5;
/// Below this magnitude a gradient is compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

/// Max relative error between tape gradients and central differences of
/// the scalar built by `f` over `inputs`.
pub fn fd_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> grasame::Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &ids).unwrap();
    let grads = g.gradients(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::inference();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let l = f(&mut g, &ids).unwrap();
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Gradient check of the full multi-task loss against the model parameters.
/// Every element of the parameters selected by `full` is checked; the rest
/// are sampled (`per_tensor` elements each). Returns the worst error and the
/// number of checked elements.
pub fn fd_check_model(
    model: &Model,
    batch: &[&PreparedExample],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    per_tensor: usize,
    full: impl Fn(&str) -> bool,
) -> (f64, usize) {
    let mut m = model.clone();
    m.unfreeze_all();
    m.store.zero_grads();
    let mut g = Graph::new();
    let (loss, _) = compute_loss(&mut g, &m, batch, cfg, None).unwrap();
    // Roundoff in the numeric derivative scales with |L| / step, so the
    // absolute floor does too.
    let floor = FD_FLOOR * g.value(loss).item().abs().max(1.0);
    g.backward(loss, &mut m.store).unwrap();
    let names: Vec<String> = m.store.names().map(String::from).collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for name in names {
        let p = m.store.get(&name).unwrap();
        let len = p.value.len();
        let analytic = p.grad.clone();
        let base = p.value.clone();
        let idx: Vec<usize> = if full(&name) {
            (0..len).collect()
        } else {
            (0..per_tensor.min(len)).map(|_| rng.gen_range(0..len)).collect()
        };
        for j in idx {
            let eval = |delta: f64| {
                let mut t = base.clone();
                t.data_mut()[j] += delta;
                let mut probe = m.clone();
                probe.store.set_value(&name, t).unwrap();
                let mut g = Graph::inference();
                let (l, _) = compute_loss(&mut g, &probe, batch, cfg, None).unwrap();
                g.value(l).item()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Toy next-token model over a 5-token vocabulary whose distribution
/// depends on the whole prefix.
pub struct ToyLm;

impl StepScorer for ToyLm {
    fn next_log_probs(&self, prefix: &[u32]) -> grasame::Result<Vec<f64>> {
        let h: u32 = prefix.iter().enumerate().map(|(i, &t)| (t + 1) * (i as u32 + 3)).sum();
        let raw: Vec<f64> = (0..5u32).map(|k| 1.0 + ((h * 7 + k * 13) % 11) as f64).collect();
        let z: f64 = raw.iter().sum();
        Ok(raw.iter().map(|r| (r / z).ln()).collect())
    }
}

/// Every sequence over `vocab` of length 1..=max_len that ends in EOS or
/// reaches the cap, ranked by `log_prob / len^alpha` then by tokens.
pub fn exhaustive_best<S: StepScorer>(s: &S, vocab: u32, eos: u32, max_len: usize, alpha: f64) -> (Vec<u32>, f64) {
    fn rec<S: StepScorer>(
        s: &S,
        prefix: &mut Vec<u32>,
        lp: f64,
        vocab: u32,
        eos: u32,
        max_len: usize,
        out: &mut Vec<(Vec<u32>, f64)>,
    ) {
        let mut full = vec![grasame::ingest::BOS_ID];
        full.extend_from_slice(prefix);
        let dist = s.next_log_probs(&full).unwrap();
        for tok in 0..vocab {
            let l = lp + dist[tok as usize];
            prefix.push(tok);
            if tok == eos || prefix.len() == max_len {
                out.push((prefix.clone(), l));
            } else {
                rec(s, prefix, l, vocab, eos, max_len, out);
            }
            prefix.pop();
        }
    }
    let mut all = Vec::new();
    rec(s, &mut Vec::new(), 0.0, vocab, eos, max_len, &mut all);
    all.into_iter()
        .map(|(t, l)| {
            let score = l / (t.len() as f64).powf(alpha);
            (t, score)
        })
        .min_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)))
        .unwrap()
}

/// Gradient check of `f` with respect to every element of every parameter
/// in `store`.
pub fn fd_check_params<F>(store: &grasame::tensor::ParameterStore, f: F) -> f64
where
    F: Fn(&mut Graph, &grasame::tensor::ParameterStore) -> grasame::Result<NodeId>,
{
    let mut s = store.clone();
    s.set_trainable_by(|_| true);
    s.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, &s).unwrap();
    g.backward(loss, &mut s).unwrap();
    let names: Vec<String> = s.names().map(String::from).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let p = s.get(&name).unwrap();
        let analytic = p.grad.clone();
        let base = p.value.clone();
        for j in 0..base.len() {
            let eval = |delta: f64| {
                let mut t = base.clone();
                t.data_mut()[j] += delta;
                let mut probe = s.clone();
                probe.set_value(&name, t).unwrap();
                let mut g = Graph::inference();
                let l = f(&mut g, &probe).unwrap();
                g.value(l).item()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// `Σ x ⊙ w` for a fixed random `w`, so every output element gets a
/// distinct upstream gradient.
pub fn probe(g: &mut Graph, x: NodeId, seed: u64) -> grasame::Result<NodeId> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, g.shape(x));
    let w = g.constant(w);
    let m = g.mul(x, w)?;
    g.sum(m)
}

/// Worst finite-difference error of every tape op on small random inputs.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    linear_ops(&mut out);
    norm_ops(&mut out);
    sparse_ops(&mut out);
    out
}

fn linear_ops(out: &mut Vec<(&'static str, f64)>) {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let a = random_tensor(&mut r, &[3, 4]);
    let b = random_tensor(&mut r, &[3, 4]);
    let w = random_tensor(&mut r, &[4, 5]);
    let bias = random_tensor(&mut r, &[4]);
    out.push(("matmul", fd_check(&[a.clone(), w], |g, x| {
        let y = g.matmul(x[0], x[1])?;
        probe(g, y, 1)
    })));
    out.push(("matmul_nt", fd_check(&[a.clone(), b.clone()], |g, x| {
        let y = g.matmul_nt(x[0], x[1])?;
        probe(g, y, 2)
    })));
    out.push(("add", fd_check(&[a.clone(), b.clone()], |g, x| {
        let y = g.add(x[0], x[1])?;
        probe(g, y, 3)
    })));
    out.push(("add_bias", fd_check(&[a.clone(), bias], |g, x| {
        let y = g.add_bias(x[0], x[1])?;
        probe(g, y, 4)
    })));
    out.push(("mul", fd_check(&[a.clone(), b.clone()], |g, x| {
        let y = g.mul(x[0], x[1])?;
        probe(g, y, 5)
    })));
    out.push(("scale", fd_check(&[a.clone()], |g, x| {
        let y = g.scale(x[0], -1.7)?;
        probe(g, y, 6)
    })));
    out.push(("concat_cols", fd_check(&[a.clone(), b.clone()], |g, x| {
        let y = g.concat_cols(&[x[0], x[1], x[0]])?;
        probe(g, y, 7)
    })));
    out.push(("slice_cols", fd_check(&[a.clone()], |g, x| {
        let y = g.slice_cols(x[0], 1, 2)?;
        probe(g, y, 8)
    })));
    out.push(("gather_rows", fd_check(&[a.clone()], |g, x| {
        let y = g.gather_rows(x[0], &[2, 0, 2, 1])?;
        probe(g, y, 9)
    })));
    out.push(("relu", fd_check(&[a.clone()], |g, x| {
        let y = g.relu(x[0])?;
        probe(g, y, 10)
    })));
    out.push(("leaky_relu", fd_check(&[a.clone()], |g, x| {
        let y = g.leaky_relu(x[0], 0.2)?;
        probe(g, y, 11)
    })));
    out.push(("dropout", fd_check(&[a.clone()], |g, x| {
        let y = g.dropout(x[0], 0.3, 99)?;
        probe(g, y, 12)
    })));
    out.push(("sum", fd_check(&[a], |g, x| {
        let s = g.sum(x[0])?;
        let s2 = g.mul(s, s)?;
        g.sum(s2)
    })));
}

fn norm_ops(out: &mut Vec<(&'static str, f64)>) {
    let mut r = ChaCha8Rng::seed_from_u64(2025);
    let a = random_tensor(&mut r, &[3, 4]);
    let gamma = random_tensor(&mut r, &[4]);
    let beta = random_tensor(&mut r, &[4]);
    out.push(("softmax", fd_check(&[a.clone()], |g, x| {
        let y = g.softmax_last_dim(x[0], None)?;
        probe(g, y, 20)
    })));
    let mask = vec![false, true, false, false, true, false, false, true, false, false, false, false];
    out.push(("masked softmax", fd_check(&[a.clone()], |g, x| {
        let y = g.softmax_last_dim(x[0], Some(&mask))?;
        probe(g, y, 21)
    })));
    out.push(("layer_norm", fd_check(&[a.clone(), gamma, beta], |g, x| {
        let y = g.layer_norm(x[0], x[1], x[2], 1e-6)?;
        probe(g, y, 22)
    })));
    out.push(("cross_entropy", fd_check(&[a.clone()], |g, x| g.cross_entropy(x[0], &[1, 3, 0], 99))));
    out.push(("cross_entropy ignore", fd_check(&[a], |g, x| g.cross_entropy(x[0], &[1, 99, 0], 99))));
}

fn sparse_ops(out: &mut Vec<(&'static str, f64)>) {
    let mut r = ChaCha8Rng::seed_from_u64(2026);
    let x = random_tensor(&mut r, &[3, 4]);
    let mut adj = SparseMatrix::new(3, 3);
    for (d, s, w) in [(0, 0, 0.5), (0, 2, 0.5), (1, 0, 1.0), (1, 1, 2.0), (2, 2, 0.3)] {
        adj.push(d, s, w);
    }
    let adj = Rc::new(adj);
    out.push(("spmm", fd_check(&[x.clone()], |g, v| {
        let y = g.spmm(v[0], adj.clone())?;
        probe(g, y, 30)
    })));
    out.push(("segment_max", fd_check(&[x.clone()], |g, v| {
        let y = g.segment_max(v[0], &adj)?;
        probe(g, y, 31)
    })));
    let logits = random_tensor(&mut r, &[5, 2]);
    out.push(("segment_softmax", fd_check(&[logits], |g, v| {
        let y = g.segment_softmax(v[0], &[0, 0, 1, 1, 1])?;
        probe(g, y, 32)
    })));
    let alpha = random_tensor(&mut r, &[5, 1]);
    out.push(("edge_weighted_sum", fd_check(&[x, alpha], |g, v| {
        let y = g.edge_weighted_sum(v[0], v[1], &[0, 2, 0, 1, 2], &[0, 0, 1, 1, 2], 3)?;
        probe(g, y, 33)
    })));
}

/// Five tokens (EOS = 3). The greedy first step (token 4) leads to a flat
/// distribution, while the runner-up (token 1) almost surely ends next.
pub struct HandLm;

impl StepScorer for HandLm {
    fn next_log_probs(&self, prefix: &[u32]) -> grasame::Result<Vec<f64>> {
        let p: [f64; 5] = match &prefix[1..] {
            [] => [0.1, 0.3, 0.05, 0.05, 0.5],
            [1] => [0.025, 0.025, 0.025, 0.9, 0.025],
            [0] => [0.6, 0.1, 0.1, 0.1, 0.1],
            [4, 0] => [0.1, 0.1, 0.1, 0.3, 0.4],
            _ => [0.2; 5],
        };
        Ok(p.iter().map(|v| v.ln()).collect())
    }
}

/// (candidate, reference, BLEU, chrF++) worked out by hand from n-gram
/// counts; see the metrics oracle suite for the counts.
pub const METRIC_CASES: [(&str, &str, f64, f64); 3] = [
    ("the cat sat on the mat", "the cat sat on a mat", 53.7285, 72.0304),
    ("the cat sat on the mat", "the cat sat on the mat again today", 71.6531, 67.6062),
    ("the the the cat sat down", "the cat sat down on the floor", 45.4802, 58.8588),
];
/// Same three pairs pooled as one corpus.
pub const METRIC_CORPUS: (f64, f64) = (59.3354, 65.5381);
