//! Token-level hierarchical graph over a linearized triple set.
//!
//! Every token is a node. Five typed relations give the hierarchy:
//!
//! | type | canonical direction |
//! |------|---------------------|
//! | R1 | `<Graph>` → each special token |
//! | R2 | `<H>` → `<R>` and `<R>` → `<T>` inside a triple |
//! | R3 | special token → every token of its own span |
//! | R4 | consecutive tokens of one span, left to right |
//! | R5 | between `<H>`/`<T>` tokens whose entities are equal, earlier → later |
//!
//! Each node also carries a SELF loop, which is the only edge a prompt token
//! has. In bidirectional mode every canonical edge gets a reverse twin with
//! the same relation type. In unidirectional mode only the reverse
//! (bottom-to-top) edges are kept for message passing. The canonical edge
//! list is kept in both modes as the label set for graph reconstruction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Role, TokenKind, TokenizedGraphInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationType {
    R1,
    R2,
    R3,
    R4,
    R5,
    #[serde(rename = "SELF")]
    SelfLoop,
}

impl RelationType {
    pub const ALL: [RelationType; 6] = [
        RelationType::R1,
        RelationType::R2,
        RelationType::R3,
        RelationType::R4,
        RelationType::R5,
        RelationType::SelfLoop,
    ];

    /// The five reconstruction labels.
    pub const LABELS: [RelationType; 5] = [
        RelationType::R1,
        RelationType::R2,
        RelationType::R3,
        RelationType::R4,
        RelationType::R5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Reconstruction label index, `None` for SELF.
    pub fn label(self) -> Option<usize> {
        match self {
            RelationType::SelfLoop => None,
            r => Some(r as usize),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationType::R1 => "R1",
            RelationType::R2 => "R2",
            RelationType::R3 => "R3",
            RelationType::R4 => "R4",
            RelationType::R5 => "R5",
            RelationType::SelfLoop => "SELF",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "FWD")]
    Forward,
    #[serde(rename = "REV")]
    Reverse,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "FWD",
            Direction::Reverse => "REV",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub rel: RelationType,
    pub dir: Direction,
}

impl Edge {
    /// Relation bucket for typed layers: 6 base types × 2 directions.
    pub fn bucket(&self) -> usize {
        self.rel.index() * 2 + usize::from(self.dir == Direction::Reverse)
    }
}

pub const NUM_BUCKETS: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierGraph {
    pub num_nodes: usize,
    /// Message-passing edges, sorted.
    pub edges: Vec<Edge>,
    canonical: Vec<Edge>,
    pub bidirectional: bool,
}

/// One reconstruction target: predict `label` (0..5 for R1..R5) from the
/// states at `u` and `v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ReconstructionTarget {
    pub u: usize,
    pub v: usize,
    pub label: RelationType,
}

impl HierGraph {
    /// Canonical non-SELF edges, sorted by `(src, dst, rel)`.
    pub fn forward_edges(&self) -> &[Edge] {
        &self.canonical
    }

    pub fn self_loops(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.rel == RelationType::SelfLoop)
    }

    /// Source/destination lists for message passing.
    pub fn edge_index(&self) -> (Vec<usize>, Vec<usize>) {
        self.edges.iter().map(|e| (e.src, e.dst)).unzip()
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_nodes];
        for e in &self.edges {
            d[e.dst] += 1;
        }
        d
    }

    /// A graph over `num_nodes` positions where every node has only its
    /// self-loop. Used for padding positions.
    pub fn self_loops_only(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            edges: (0..num_nodes).map(self_loop).collect(),
            canonical: Vec::new(),
            bidirectional: true,
        }
    }

    /// Appends `extra` isolated nodes carrying only self-loops.
    pub fn pad_to(&self, num_nodes: usize) -> Self {
        let mut g = self.clone();
        for i in self.num_nodes..num_nodes {
            g.edges.push(self_loop(i));
        }
        g.num_nodes = num_nodes.max(self.num_nodes);
        g.edges.sort();
        g
    }

    pub fn to_json(&self) -> serde_json::Value {
        let edges: Vec<serde_json::Value> = self
            .edges
            .iter()
            .map(|e| serde_json::json!([e.src, e.dst, e.rel.name(), e.dir.name()]))
            .collect();
        serde_json::json!({ "num_nodes": self.num_nodes, "edges": edges })
    }
}

fn self_loop(i: usize) -> Edge {
    Edge {
        src: i,
        dst: i,
        rel: RelationType::SelfLoop,
        dir: Direction::Forward,
    }
}

/// Build the hierarchical graph for `input`.
pub fn build_graph(input: &TokenizedGraphInput, bidirectional: bool) -> Result<HierGraph> {
    input.validate()?;
    let n = input.len();
    let global = input
        .kinds
        .iter()
        .position(|k| *k == TokenKind::Global)
        .expect("validated");

    // special token position of every (triple, role)
    let mut special: BTreeMap<(usize, Role), usize> = BTreeMap::new();
    for i in 0..n {
        let role = match input.kinds[i] {
            TokenKind::SpecialH => Role::Head,
            TokenKind::SpecialR => Role::Relation,
            TokenKind::SpecialT => Role::Tail,
            _ => continue,
        };
        let t = input.triple_index[i].expect("validated");
        if special.insert((t, role), i).is_some() {
            return Err(Error::data(format!("triple {t} has two {role:?} markers")));
        }
    }
    // token positions of every span, in sequence order
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); input.spans.len()];
    for i in 0..n {
        if let Some(s) = input.entity_span_id[i] {
            members[s].push(i);
        }
    }

    let mut fwd: Vec<Edge> = Vec::new();
    let mut push = |src: usize, dst: usize, rel: RelationType| {
        fwd.push(Edge {
            src,
            dst,
            rel,
            dir: Direction::Forward,
        });
    };

    for &pos in special.values() {
        push(global, pos, RelationType::R1);
    }
    let triples: std::collections::BTreeSet<usize> = special.keys().map(|(t, _)| *t).collect();
    for &t in &triples {
        let h = special.get(&(t, Role::Head));
        let r = special.get(&(t, Role::Relation));
        let tl = special.get(&(t, Role::Tail));
        if let (Some(&h), Some(&r)) = (h, r) {
            push(h, r, RelationType::R2);
        }
        if let (Some(&r), Some(&tl)) = (r, tl) {
            push(r, tl, RelationType::R2);
        }
    }
    for (sid, span) in input.spans.iter().enumerate() {
        let owner = *special
            .get(&(span.triple_index, span.role))
            .ok_or_else(|| Error::data(format!("span {sid} has no marker token")))?;
        for &m in &members[sid] {
            push(owner, m, RelationType::R3);
        }
        for w in members[sid].windows(2) {
            push(w[0], w[1], RelationType::R4);
        }
    }
    let keyed: Vec<(usize, u32)> = input
        .spans
        .iter()
        .filter_map(|s| {
            let key = s.entity_key?;
            special.get(&(s.triple_index, s.role)).map(|&p| (p, key))
        })
        .collect();
    for (a, &(pa, ka)) in keyed.iter().enumerate() {
        for &(pb, kb) in &keyed[a + 1..] {
            if ka == kb && pa != pb {
                push(pa.min(pb), pa.max(pb), RelationType::R5);
            }
        }
    }

    fwd.sort();
    fwd.dedup();
    let mut edges: Vec<Edge> = (0..n).map(self_loop).collect();
    for e in &fwd {
        if bidirectional {
            edges.push(*e);
        }
        edges.push(Edge {
            src: e.dst,
            dst: e.src,
            rel: e.rel,
            dir: Direction::Reverse,
        });
    }
    edges.sort();
    edges.dedup();
    Ok(HierGraph {
        num_nodes: n,
        edges,
        canonical: fwd,
        bidirectional,
    })
}

/// Edge statistics per relation type.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EdgeCounts {
    pub total: BTreeMap<RelationType, usize>,
    pub forward: BTreeMap<RelationType, usize>,
    pub reverse: BTreeMap<RelationType, usize>,
}

impl EdgeCounts {
    pub fn forward_non_self(&self) -> usize {
        RelationType::LABELS.iter().map(|r| self.forward.get(r).copied().unwrap_or(0)).sum()
    }

    pub fn directed_non_self(&self) -> usize {
        RelationType::LABELS.iter().map(|r| self.total.get(r).copied().unwrap_or(0)).sum()
    }

    pub fn get(&self, rel: RelationType) -> usize {
        self.total.get(&rel).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &EdgeCounts) {
        for (dst, src) in [
            (&mut self.total, &other.total),
            (&mut self.forward, &other.forward),
            (&mut self.reverse, &other.reverse),
        ] {
            for (k, v) in src {
                *dst.entry(*k).or_default() += v;
            }
        }
    }
}

/// Counts over the message-passing edges. `forward` counts canonical edges
/// whether or not they are used for message passing.
pub fn edge_counts(graph: &HierGraph) -> EdgeCounts {
    let mut c = EdgeCounts::default();
    for r in RelationType::ALL {
        c.total.insert(r, 0);
        c.forward.insert(r, 0);
        c.reverse.insert(r, 0);
    }
    for e in &graph.edges {
        *c.total.get_mut(&e.rel).unwrap() += 1;
        if e.dir == Direction::Reverse {
            *c.reverse.get_mut(&e.rel).unwrap() += 1;
        }
    }
    for e in &graph.canonical {
        *c.forward.get_mut(&e.rel).unwrap() += 1;
    }
    *c.forward.get_mut(&RelationType::SelfLoop).unwrap() = c.total[&RelationType::SelfLoop];
    c
}

/// Canonical non-SELF edges with their labels, sorted by `(u, v, label)`.
pub fn reconstruction_targets(graph: &HierGraph) -> Vec<ReconstructionTarget> {
    let mut out: Vec<ReconstructionTarget> = graph
        .canonical
        .iter()
        .map(|e| ReconstructionTarget {
            u: e.src,
            v: e.dst,
            label: e.rel,
        })
        .collect();
    out.sort();
    out
}
