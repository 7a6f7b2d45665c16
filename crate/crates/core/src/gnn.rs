//! Single-layer GNNs under a shared AGGREGATE / COMBINE contract.
//!
//! * SAGE: mean (or max / sum) over in-neighbours, then
//!   `act(h·W_self + a·W_neigh + b)`.
//! * GAT: per-head attention over in-neighbours of the transformed states,
//!   heads averaged, plus the node's own state as a residual.
//! * RGCN: per-bucket linear maps of in-degree-normalised neighbour sums,
//!   plus a root map, then `act`.
//!
//! In-neighbourhoods include the SELF loop, so no node aggregates over an
//! empty set. Parameters for a layer live under a caller-chosen prefix,
//! conventionally `enc.{layer}.gnn`.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hiergraph::{HierGraph, NUM_BUCKETS};
use crate::tensor::{Graph, NodeId, ParameterStore, SparseMatrix, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnFamily {
    Sage,
    Gat,
    Rgcn,
}

impl std::str::FromStr for GnnFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sage" => Ok(GnnFamily::Sage),
            "gat" => Ok(GnnFamily::Gat),
            "rgcn" => Ok(GnnFamily::Rgcn),
            other => Err(Error::Config(format!("unknown GNN family `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SageAggregator {
    Mean,
    Max,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnConfig {
    pub family: GnnFamily,
    pub in_dim: usize,
    pub out_dim: usize,
    pub num_relation_buckets: usize,
    pub gat_heads: usize,
    pub gat_negative_slope: f64,
    pub aggregator: SageAggregator,
    pub activation: Activation,
    /// Output equals input exactly; weights are bypassed.
    pub identity_mode: bool,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            family: GnnFamily::Sage,
            in_dim: 64,
            out_dim: 64,
            num_relation_buckets: NUM_BUCKETS,
            gat_heads: 4,
            gat_negative_slope: 0.2,
            aggregator: SageAggregator::Mean,
            activation: Activation::Relu,
            identity_mode: false,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("GNN dimensions must be positive".into()));
        }
        if self.family == GnnFamily::Gat && self.gat_heads == 0 {
            return Err(Error::Config("gat_heads must be ≥ 1".into()));
        }
        if self.family == GnnFamily::Gat && self.in_dim != self.out_dim {
            return Err(Error::Config("GAT residual needs in_dim == out_dim".into()));
        }
        if self.family == GnnFamily::Rgcn && self.num_relation_buckets < NUM_BUCKETS {
            return Err(Error::Config(format!(
                "RGCN needs at least {NUM_BUCKETS} relation buckets"
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes under `prefix`.
    pub fn parameter_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>, usize)> {
        let (i, o) = (self.in_dim, self.out_dim);
        let mut v = Vec::new();
        match self.family {
            GnnFamily::Sage => {
                v.push((format!("{prefix}.w_self"), vec![i, o], i));
                v.push((format!("{prefix}.w_neigh"), vec![i, o], i));
            }
            GnnFamily::Gat => {
                for h in 0..self.gat_heads {
                    v.push((format!("{prefix}.w.{h}"), vec![i, o], i));
                }
                v.push((format!("{prefix}.att_src"), vec![o, self.gat_heads], o));
                v.push((format!("{prefix}.att_dst"), vec![o, self.gat_heads], o));
            }
            GnnFamily::Rgcn => {
                v.push((format!("{prefix}.w_root"), vec![i, o], i));
                for b in 0..self.num_relation_buckets {
                    v.push((format!("{prefix}.w_rel.{b}"), vec![i, o], i));
                }
            }
        }
        v.push((format!("{prefix}.bias"), vec![o], 0));
        v
    }

    /// Registers freshly initialised parameters (biases zero).
    pub fn init_params<R: Rng>(&self, prefix: &str, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.validate()?;
        for (name, shape, fan_in) in self.parameter_shapes(prefix) {
            if fan_in == 0 {
                store.insert(name, Tensor::zeros(&shape))?;
            } else {
                store.insert_uniform(name, &shape, fan_in, rng)?;
            }
        }
        Ok(())
    }
}

/// Precomputed sparse operators for one graph.
#[derive(Clone, Debug)]
pub struct GraphOperators {
    pub num_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub mean: Rc<SparseMatrix>,
    pub sum: Rc<SparseMatrix>,
    /// Per bucket, rows normalised by that bucket's in-degree. `None` when
    /// the bucket has no edges.
    pub buckets: Vec<Option<Rc<SparseMatrix>>>,
}

impl GraphOperators {
    pub fn new(graph: &HierGraph) -> Result<Self> {
        let n = graph.num_nodes;
        for e in &graph.edges {
            if e.src >= n || e.dst >= n {
                return Err(Error::OutOfRange {
                    what: "graph edge endpoint",
                    index: e.src.max(e.dst),
                    size: n,
                });
            }
        }
        let deg = graph.in_degrees();
        if let Some(i) = deg.iter().position(|&d| d == 0) {
            return Err(Error::data(format!("node {i} has no incoming edges")));
        }
        let (src, dst) = graph.edge_index();
        let mut mean = SparseMatrix::new(n, n);
        let mut sum = SparseMatrix::new(n, n);
        for e in &graph.edges {
            mean.push(e.dst, e.src, 1.0 / deg[e.dst] as f64);
            sum.push(e.dst, e.src, 1.0);
        }
        let mut bucket_deg = vec![vec![0usize; n]; NUM_BUCKETS];
        for e in &graph.edges {
            bucket_deg[e.bucket()][e.dst] += 1;
        }
        let mut buckets: Vec<Option<SparseMatrix>> = vec![None; NUM_BUCKETS];
        for e in &graph.edges {
            let b = e.bucket();
            buckets[b]
                .get_or_insert_with(|| SparseMatrix::new(n, n))
                .push(e.dst, e.src, 1.0 / bucket_deg[b][e.dst] as f64);
        }
        Ok(Self {
            num_nodes: n,
            src,
            dst,
            mean: Rc::new(mean),
            sum: Rc::new(sum),
            buckets: buckets.into_iter().map(|b| b.map(Rc::new)).collect(),
        })
    }
}

fn check_rows(g: &Graph, states: NodeId, ops: &GraphOperators) -> Result<()> {
    let rows = g.value(states).rows();
    if rows != ops.num_nodes {
        return Err(Error::Shape {
            op: "gnn",
            left: vec![rows, g.value(states).cols()],
            right: vec![ops.num_nodes],
        });
    }
    Ok(())
}

/// Per-head transformed states and attention coefficients of a GAT layer.
/// `alpha` is `E × 1`, ordered like `ops.src` / `ops.dst`.
pub struct GatHead {
    pub transformed: NodeId,
    pub alpha: NodeId,
}

pub fn gat_heads(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    cfg: &GnnConfig,
    states: NodeId,
    ops: &GraphOperators,
) -> Result<Vec<GatHead>> {
    check_rows(g, states, ops)?;
    let att_src = g.param(store, &format!("{prefix}.att_src"))?;
    let att_dst = g.param(store, &format!("{prefix}.att_dst"))?;
    let mut heads = Vec::with_capacity(cfg.gat_heads);
    for h in 0..cfg.gat_heads {
        let w = g.param(store, &format!("{prefix}.w.{h}"))?;
        let z = g.matmul(states, w)?;
        let a_s = g.slice_cols(att_src, h, 1)?;
        let a_d = g.slice_cols(att_dst, h, 1)?;
        let s_src = g.matmul(z, a_s)?;
        let s_dst = g.matmul(z, a_d)?;
        let e_src = g.gather_rows(s_src, &ops.src)?;
        let e_dst = g.gather_rows(s_dst, &ops.dst)?;
        let logits = g.add(e_src, e_dst)?;
        let logits = g.leaky_relu(logits, cfg.gat_negative_slope)?;
        let alpha = g.segment_softmax(logits, &ops.dst)?;
        heads.push(GatHead { transformed: z, alpha });
    }
    Ok(heads)
}

/// AGGREGATE: one message row per node.
pub fn aggregate(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    cfg: &GnnConfig,
    states: NodeId,
    ops: &GraphOperators,
) -> Result<NodeId> {
    check_rows(g, states, ops)?;
    match cfg.family {
        GnnFamily::Sage => match cfg.aggregator {
            SageAggregator::Mean => g.spmm(states, ops.mean.clone()),
            SageAggregator::Sum => g.spmm(states, ops.sum.clone()),
            SageAggregator::Max => g.segment_max(states, &ops.sum),
        },
        GnnFamily::Gat => {
            let heads = gat_heads(g, store, prefix, cfg, states, ops)?;
            let mut acc: Option<NodeId> = None;
            for head in &heads {
                let m = g.edge_weighted_sum(head.transformed, head.alpha, &ops.src, &ops.dst, ops.num_nodes)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, m)?,
                    None => m,
                });
            }
            let total = acc.expect("at least one head");
            g.scale(total, 1.0 / heads.len() as f64)
        }
        GnnFamily::Rgcn => {
            let mut acc: Option<NodeId> = None;
            for (b, adj) in ops.buckets.iter().enumerate() {
                let Some(adj) = adj else { continue };
                let w = g.param(store, &format!("{prefix}.w_rel.{b}"))?;
                let pooled = g.spmm(states, adj.clone())?;
                let m = g.matmul(pooled, w)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, m)?,
                    None => m,
                });
            }
            acc.ok_or_else(|| Error::data("graph has no edges"))
        }
    }
}

fn activate(g: &mut Graph, cfg: &GnnConfig, x: NodeId) -> Result<NodeId> {
    match cfg.activation {
        Activation::Relu => g.relu(x),
        Activation::Identity => Ok(x),
    }
}

/// COMBINE: merge the messages into each node's own state.
pub fn combine(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    cfg: &GnnConfig,
    states: NodeId,
    messages: NodeId,
) -> Result<NodeId> {
    if cfg.identity_mode {
        return Ok(states);
    }
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    match cfg.family {
        GnnFamily::Sage => {
            let ws = g.param(store, &format!("{prefix}.w_self"))?;
            let wn = g.param(store, &format!("{prefix}.w_neigh"))?;
            let a = g.matmul(states, ws)?;
            let b = g.matmul(messages, wn)?;
            let s = g.add(a, b)?;
            let s = g.add_bias(s, bias)?;
            activate(g, cfg, s)
        }
        GnnFamily::Gat => {
            let s = g.add(messages, states)?;
            g.add_bias(s, bias)
        }
        GnnFamily::Rgcn => {
            let wr = g.param(store, &format!("{prefix}.w_root"))?;
            let root = g.matmul(states, wr)?;
            let s = g.add(root, messages)?;
            let s = g.add_bias(s, bias)?;
            activate(g, cfg, s)
        }
    }
}

/// One GNN layer: `combine(states, aggregate(states))`, or `states` itself
/// in identity mode.
pub fn gnn_forward(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    cfg: &GnnConfig,
    states: NodeId,
    ops: &GraphOperators,
) -> Result<NodeId> {
    check_rows(g, states, ops)?;
    if cfg.identity_mode {
        return Ok(states);
    }
    let messages = aggregate(g, store, prefix, cfg, states, ops)?;
    combine(g, store, prefix, cfg, states, messages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hiergraph::{Direction, Edge, RelationType};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_node_graph() -> HierGraph {
        let mut g = HierGraph::self_loops_only(2);
        g.edges.push(Edge {
            src: 0,
            dst: 1,
            rel: RelationType::R1,
            dir: Direction::Forward,
        });
        g.edges.push(Edge {
            src: 1,
            dst: 0,
            rel: RelationType::R1,
            dir: Direction::Reverse,
        });
        g
    }

    fn cfg(family: GnnFamily, dim: usize) -> GnnConfig {
        GnnConfig {
            family,
            in_dim: dim,
            out_dim: dim,
            ..GnnConfig::default()
        }
    }

    #[test]
    fn sage_mean_of_two() {
        let ops = GraphOperators::new(&two_node_graph()).unwrap();
        let store = ParameterStore::new();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap());
        let m = aggregate(&mut g, &store, "gnn", &cfg(GnnFamily::Sage, 1), x, &ops).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 3.0]);
    }

    #[test]
    fn sage_max_and_sum() {
        let ops = GraphOperators::new(&two_node_graph()).unwrap();
        let store = ParameterStore::new();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap());
        let mut c = cfg(GnnFamily::Sage, 1);
        c.aggregator = SageAggregator::Max;
        let m = aggregate(&mut g, &store, "gnn", &c, x, &ops).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, 4.0]);
        c.aggregator = SageAggregator::Sum;
        let m = aggregate(&mut g, &store, "gnn", &c, x, &ops).unwrap();
        assert_eq!(g.value(m).data(), &[6.0, 6.0]);
    }

    #[test]
    fn identity_mode_is_exact() {
        let ops = GraphOperators::new(&two_node_graph()).unwrap();
        let mut store = ParameterStore::new();
        let mut c = cfg(GnnFamily::Rgcn, 3);
        c.init_params("gnn", &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        c.identity_mode = true;
        let mut g = Graph::new();
        let t = Tensor::from_rows(&[vec![0.1, -2.0, 3.3], vec![1e-9, 5.0, -0.25]]).unwrap();
        let x = g.constant(t.clone());
        let y = gnn_forward(&mut g, &store, "gnn", &c, x, &ops).unwrap();
        assert_eq!(g.value(y), &t);
    }

    #[test]
    fn sage_identity_weights_pass_through() {
        let ops = GraphOperators::new(&two_node_graph()).unwrap();
        let mut store = ParameterStore::new();
        let mut c = cfg(GnnFamily::Sage, 2);
        c.activation = Activation::Identity;
        c.init_params("gnn", &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        store.set_value("gnn.w_self", Tensor::identity(2)).unwrap();
        store.set_value("gnn.w_neigh", Tensor::zeros(&[2, 2])).unwrap();
        let mut g = Graph::new();
        let t = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
        let x = g.constant(t.clone());
        let y = gnn_forward(&mut g, &store, "gnn", &c, x, &ops).unwrap();
        assert_eq!(g.value(y), &t);
    }

    #[test]
    fn gat_uniform_logits_is_mean() {
        let ops = GraphOperators::new(&two_node_graph()).unwrap();
        let mut store = ParameterStore::new();
        let c = cfg(GnnFamily::Gat, 2);
        c.init_params("gnn", &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for h in 0..c.gat_heads {
            store.set_value(&format!("gnn.w.{h}"), Tensor::identity(2)).unwrap();
        }
        store.set_value("gnn.att_src", Tensor::zeros(&[2, 4])).unwrap();
        store.set_value("gnn.att_dst", Tensor::zeros(&[2, 4])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![4.0, 1.0]]).unwrap());
        let m = aggregate(&mut g, &store, "gnn", &c, x, &ops).unwrap();
        let got = g.value(m).data().to_vec();
        for (a, b) in got.iter().zip([3.0, 0.5, 3.0, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_in_edges_rejected() {
        let mut g = HierGraph::self_loops_only(3);
        g.edges.retain(|e| e.dst != 1);
        assert!(GraphOperators::new(&g).is_err());
    }
}
