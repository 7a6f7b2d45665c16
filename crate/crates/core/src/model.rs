//! Encoder-decoder transformer whose encoder self-attention is graph guided.
//!
//! Each encoder layer runs a single GNN layer over the layer-normed token
//! states and uses its output `x̃` in the attention projections:
//!
//! | variation | queries from | keys/values from |
//! |-----------|--------------|------------------|
//! | `Base`    | `x`          | `x`              |
//! | `Grasame` | `x̃`          | `x`              |
//! | `Var1`    | `x`          | `x̃`              |
//! | `Var2`    | `x̃`          | `x̃`              |
//!
//! The layout is pre-norm with learned absolute positions. The decoder is a
//! plain transformer decoder. The language-model head is tied to the token
//! embeddings unless configured otherwise. A linear head over
//! `[h_u; h_v]` predicts the relation type of graph edges from the final
//! encoder states.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{gnn_forward, GnnConfig, GraphOperators};
use crate::hiergraph::ReconstructionTarget;
use crate::ingest::DEFAULT_MAX_SEQUENCE_LENGTH;
use crate::ingest::DEFAULT_MAX_TARGET_LENGTH;
use crate::tensor::{Graph, NodeId, ParameterStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variation {
    Base,
    Grasame,
    Var1,
    Var2,
}

impl std::str::FromStr for Variation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Variation::Base),
            "grasame" => Ok(Variation::Grasame),
            "var1" => Ok(Variation::Var1),
            "var2" => Ok(Variation::Var2),
            other => Err(Error::Config(format!("unknown variation `{other}`"))),
        }
    }
}

impl Variation {
    pub fn uses_gnn(self) -> bool {
        self != Variation::Base
    }
}

pub const NUM_RELATION_LABELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub feedforward_dim: usize,
    /// Filled from the vocabulary when zero.
    pub vocab_size: usize,
    pub gnn: GnnConfig,
    pub variation: Variation,
    pub max_sequence_length: usize,
    pub max_target_length: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_heads: 4,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            feedforward_dim: 128,
            vocab_size: 0,
            gnn: GnnConfig::default(),
            variation: Variation::Grasame,
            max_sequence_length: DEFAULT_MAX_SEQUENCE_LENGTH,
            max_target_length: DEFAULT_MAX_TARGET_LENGTH,
            dropout: 0.0,
            tie_embeddings: true,
            layer_norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.variation.uses_gnn() {
            if self.gnn.in_dim != self.d_model || self.gnn.out_dim != self.d_model {
                return Err(Error::Config("GNN dimensions must equal d_model".into()));
            }
            self.gnn.validate()?;
        }
        Ok(())
    }

    /// Copies `d_model` into the GNN dimensions.
    pub fn sync_gnn_dims(&mut self) {
        self.gnn.in_dim = self.d_model;
        self.gnn.out_dim = self.d_model;
    }

    pub fn num_positions(&self) -> usize {
        self.max_sequence_length.max(self.max_target_length + 1)
    }
}

/// Parameters under FREEZE_BASE: the GNN layers and the reconstruction head.
pub fn is_graph_parameter(name: &str) -> bool {
    name.starts_with("gr_head.") || (name.starts_with("enc.") && name.contains(".gnn."))
}

/// Dropout applied to sublayer outputs during training.
#[derive(Clone, Copy, Debug)]
pub struct DropoutSeed(pub u64);

pub struct AttentionOutput {
    pub values: NodeId,
    /// Per head, `n_q × n_k`, when requested.
    pub weights: Option<Vec<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
}

impl Model {
    /// Fresh model with deterministic initialisation from `seed`.
    pub fn new(mut config: ModelConfig, seed: u64) -> Result<Self> {
        config.sync_gnn_dims();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        let d = config.d_model;
        let f = config.feedforward_dim;
        let v = config.vocab_size;

        s.insert_uniform("emb.tok", &[v, d], d, &mut rng)?;
        s.insert_uniform("emb.pos", &[config.num_positions(), d], d, &mut rng)?;

        let ln = |s: &mut ParameterStore, p: &str| -> Result<()> {
            s.insert(format!("{p}.g"), Tensor::full(&[d], 1.0))?;
            s.insert(format!("{p}.b"), Tensor::zeros(&[d]))
        };
        let ff = |s: &mut ParameterStore, p: &str, rng: &mut ChaCha8Rng| -> Result<()> {
            s.insert_uniform(format!("{p}.w1"), &[d, f], d, rng)?;
            s.insert(format!("{p}.b1"), Tensor::zeros(&[f]))?;
            s.insert_uniform(format!("{p}.w2"), &[f, d], f, rng)?;
            s.insert(format!("{p}.b2"), Tensor::zeros(&[d]))
        };
        let attn = |s: &mut ParameterStore, p: &str, rng: &mut ChaCha8Rng| -> Result<()> {
            for m in ["q", "k", "v", "o"] {
                s.insert_uniform(format!("{p}.{m}"), &[d, d], d, rng)?;
            }
            Ok(())
        };

        for i in 0..config.num_encoder_layers {
            ln(&mut s, &format!("enc.{i}.ln1"))?;
            attn(&mut s, &format!("enc.{i}.attn"), &mut rng)?;
            if config.variation.uses_gnn() {
                config.gnn.init_params(&format!("enc.{i}.gnn"), &mut s, &mut rng)?;
            }
            ln(&mut s, &format!("enc.{i}.ln2"))?;
            ff(&mut s, &format!("enc.{i}.ff"), &mut rng)?;
        }
        ln(&mut s, "enc.ln")?;
        for i in 0..config.num_decoder_layers {
            ln(&mut s, &format!("dec.{i}.ln1"))?;
            attn(&mut s, &format!("dec.{i}.self_attn"), &mut rng)?;
            ln(&mut s, &format!("dec.{i}.ln2"))?;
            attn(&mut s, &format!("dec.{i}.cross_attn"), &mut rng)?;
            ln(&mut s, &format!("dec.{i}.ln3"))?;
            ff(&mut s, &format!("dec.{i}.ff"), &mut rng)?;
        }
        ln(&mut s, "dec.ln")?;
        if !config.tie_embeddings {
            s.insert_uniform("lm_head", &[v, d], d, &mut rng)?;
        }
        s.insert_uniform("gr_head.W", &[2 * d, NUM_RELATION_LABELS], 2 * d, &mut rng)?;
        s.insert("gr_head.b", Tensor::zeros(&[NUM_RELATION_LABELS]))?;
        Ok(Self { config, store: s })
    }

    /// Freeze everything except the GNN layers and the reconstruction head.
    pub fn freeze_base(&mut self) {
        self.store.set_trainable_by(is_graph_parameter);
    }

    pub fn unfreeze_all(&mut self) {
        self.store.set_trainable_by(|_| true);
    }

    fn layer_norm(&self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = g.param(&self.store, &format!("{prefix}.g"))?;
        let beta = g.param(&self.store, &format!("{prefix}.b"))?;
        g.layer_norm(x, gamma, beta, self.config.layer_norm_eps)
    }

    fn feed_forward(&self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w1 = g.param(&self.store, &format!("{prefix}.w1"))?;
        let b1 = g.param(&self.store, &format!("{prefix}.b1"))?;
        let w2 = g.param(&self.store, &format!("{prefix}.w2"))?;
        let b2 = g.param(&self.store, &format!("{prefix}.b2"))?;
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.relu(h)?;
        let h = g.matmul(h, w2)?;
        g.add_bias(h, b2)
    }

    fn dropout(&self, g: &mut Graph, x: NodeId, seed: Option<DropoutSeed>, site: u64) -> Result<NodeId> {
        match seed {
            Some(DropoutSeed(s)) if self.config.dropout > 0.0 => {
                g.dropout(x, self.config.dropout, s.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ site)
            }
            _ => Ok(x),
        }
    }

    fn embed(&self, g: &mut Graph, tokens: &[u32]) -> Result<NodeId> {
        if tokens.len() > self.config.num_positions() {
            return Err(Error::TooLong {
                len: tokens.len(),
                max: self.config.num_positions(),
            });
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = g.param(&self.store, "emb.tok")?;
        let pos = g.param(&self.store, "emb.pos")?;
        let e = g.embedding_lookup(tok, &ids)?;
        let p = g.embedding_lookup(pos, &positions)?;
        g.add(e, p)
    }

    /// Multi-head scaled dot-product attention. Queries come from `q_in`,
    /// keys from `k_in`, values from `v_in`. `mask[i * n_k + j]` excludes
    /// key `j` for query `i`.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_head_attention(
        &self,
        g: &mut Graph,
        prefix: &str,
        q_in: NodeId,
        k_in: NodeId,
        v_in: NodeId,
        mask: Option<&[bool]>,
        keep_weights: bool,
    ) -> Result<AttentionOutput> {
        let h = self.config.num_heads;
        let dk = self.config.d_k();
        let wq = g.param(&self.store, &format!("{prefix}.q"))?;
        let wk = g.param(&self.store, &format!("{prefix}.k"))?;
        let wv = g.param(&self.store, &format!("{prefix}.v"))?;
        let wo = g.param(&self.store, &format!("{prefix}.o"))?;
        if g.value(k_in).rows() != g.value(v_in).rows() {
            return Err(Error::Shape {
                op: "attention keys/values",
                left: g.shape(k_in).to_vec(),
                right: g.shape(v_in).to_vec(),
            });
        }
        let q = g.matmul(q_in, wq)?;
        let k = g.matmul(k_in, wk)?;
        let v = g.matmul(v_in, wv)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(h);
        let mut weights = keep_weights.then(Vec::new);
        for head in 0..h {
            let qh = g.slice_cols(q, head * dk, dk)?;
            let kh = g.slice_cols(k, head * dk, dk)?;
            let vh = g.slice_cols(v, head * dk, dk)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax_last_dim(scores, mask)?;
            if let Some(w) = weights.as_mut() {
                w.push(g.value(attn).clone());
            }
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let values = g.matmul(cat, wo)?;
        Ok(AttentionOutput { values, weights })
    }

    /// Graph-guided self-attention for encoder layer `layer` over
    /// (layer-normed) token states `x`.
    pub fn grasame_attention(
        &self,
        g: &mut Graph,
        layer: usize,
        x: NodeId,
        graph: Option<&GraphOperators>,
        mask: Option<&[bool]>,
        keep_weights: bool,
    ) -> Result<AttentionOutput> {
        let prefix = format!("enc.{layer}.attn");
        let variation = self.config.variation;
        if !variation.uses_gnn() {
            return self.multi_head_attention(g, &prefix, x, x, x, mask, keep_weights);
        }
        let ops = graph.ok_or_else(|| Error::Config(format!("variation {variation:?} needs a graph")))?;
        let xg = gnn_forward(g, &self.store, &format!("enc.{layer}.gnn"), &self.config.gnn, x, ops)?;
        let (q, kv) = match variation {
            Variation::Grasame => (xg, x),
            Variation::Var1 => (x, xg),
            Variation::Var2 => (xg, xg),
            Variation::Base => unreachable!(),
        };
        self.multi_head_attention(g, &prefix, q, kv, kv, mask, keep_weights)
    }

    /// Encoder over `tokens`. `padding[j]` marks padding positions, which
    /// are masked out as attention keys. The graph must cover every
    /// position; padding nodes should carry only self-loops.
    pub fn encoder_forward(
        &self,
        g: &mut Graph,
        tokens: &[u32],
        graph: Option<&GraphOperators>,
        padding: Option<&[bool]>,
        dropout: Option<DropoutSeed>,
    ) -> Result<NodeId> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::data("empty encoder input"));
        }
        let mask = padding.map(|p| key_mask(n, p));
        let mut x = self.embed(g, tokens)?;
        for i in 0..self.config.num_encoder_layers {
            let h = self.layer_norm(g, x, &format!("enc.{i}.ln1"))?;
            let a = self.grasame_attention(g, i, h, graph, mask.as_deref(), false)?;
            let a = self.dropout(g, a.values, dropout, (i as u64) << 4)?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, x, &format!("enc.{i}.ln2"))?;
            let f = self.feed_forward(g, h, &format!("enc.{i}.ff"))?;
            let f = self.dropout(g, f, dropout, ((i as u64) << 4) | 1)?;
            x = g.add(x, f)?;
        }
        self.layer_norm(g, x, "enc.ln")
    }

    /// Decoder hidden states (after the final layer norm) for `prefix`.
    pub fn decoder_states(
        &self,
        g: &mut Graph,
        prefix: &[u32],
        encoder_states: NodeId,
        encoder_padding: Option<&[bool]>,
        dropout: Option<DropoutSeed>,
    ) -> Result<NodeId> {
        let t = prefix.len();
        if t == 0 {
            return Err(Error::data("empty decoder prefix"));
        }
        if t > self.config.max_target_length {
            return Err(Error::TooLong {
                len: t,
                max: self.config.max_target_length,
            });
        }
        let n_enc = g.value(encoder_states).rows();
        let causal: Vec<bool> = (0..t * t).map(|i| i % t > i / t).collect();
        let cross = encoder_padding.map(|p| key_mask(t, p));
        if let Some(p) = encoder_padding {
            if p.len() != n_enc {
                return Err(Error::Shape {
                    op: "encoder padding",
                    left: vec![n_enc],
                    right: vec![p.len()],
                });
            }
        }
        let mut x = self.embed(g, prefix)?;
        for i in 0..self.config.num_decoder_layers {
            let site = 0x100 | ((i as u64) << 4);
            let h = self.layer_norm(g, x, &format!("dec.{i}.ln1"))?;
            let a = self.multi_head_attention(g, &format!("dec.{i}.self_attn"), h, h, h, Some(&causal), false)?;
            let a = self.dropout(g, a.values, dropout, site)?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, x, &format!("dec.{i}.ln2"))?;
            let c = self.multi_head_attention(
                g,
                &format!("dec.{i}.cross_attn"),
                h,
                encoder_states,
                encoder_states,
                cross.as_deref(),
                false,
            )?;
            let c = self.dropout(g, c.values, dropout, site | 1)?;
            x = g.add(x, c)?;
            let h = self.layer_norm(g, x, &format!("dec.{i}.ln3"))?;
            let f = self.feed_forward(g, h, &format!("dec.{i}.ff"))?;
            let f = self.dropout(g, f, dropout, site | 2)?;
            x = g.add(x, f)?;
        }
        self.layer_norm(g, x, "dec.ln")
    }

    /// Vocabulary logits, `prefix.len() × vocab_size`.
    pub fn decoder_forward(
        &self,
        g: &mut Graph,
        prefix: &[u32],
        encoder_states: NodeId,
        encoder_padding: Option<&[bool]>,
        dropout: Option<DropoutSeed>,
    ) -> Result<NodeId> {
        let h = self.decoder_states(g, prefix, encoder_states, encoder_padding, dropout)?;
        let head = if self.config.tie_embeddings {
            g.param(&self.store, "emb.tok")?
        } else {
            g.param(&self.store, "lm_head")?
        };
        g.matmul_nt(h, head)
    }

    /// Relation logits (`targets.len() × 5`) from `W·[h_u; h_v] + b`.
    pub fn reconstruct_relations(
        &self,
        g: &mut Graph,
        encoder_states: NodeId,
        targets: &[ReconstructionTarget],
    ) -> Result<NodeId> {
        let n = g.value(encoder_states).rows();
        for t in targets {
            if t.u >= n || t.v >= n {
                return Err(Error::OutOfRange {
                    what: "reconstruction pair",
                    index: t.u.max(t.v),
                    size: n,
                });
            }
        }
        let us: Vec<usize> = targets.iter().map(|t| t.u).collect();
        let vs: Vec<usize> = targets.iter().map(|t| t.v).collect();
        let hu = g.gather_rows(encoder_states, &us)?;
        let hv = g.gather_rows(encoder_states, &vs)?;
        let pair = g.concat_cols(&[hu, hv])?;
        let w = g.param(&self.store, "gr_head.W")?;
        let b = g.param(&self.store, "gr_head.b")?;
        let logits = g.matmul(pair, w)?;
        g.add_bias(logits, b)
    }

    /// Final encoder states as a plain tensor, with no gradient tracking.
    pub fn encode(&self, tokens: &[u32], graph: Option<&GraphOperators>) -> Result<Tensor> {
        let mut g = Graph::inference();
        let out = self.encoder_forward(&mut g, tokens, graph, None, None)?;
        Ok(g.value(out).clone())
    }

    /// Log-probabilities of the next token after `prefix`.
    pub fn next_log_probs(&self, encoder_states: &Tensor, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let enc = g.constant(encoder_states.clone());
        let logits = self.decoder_forward(&mut g, prefix, enc, None, None)?;
        let row = g.value(logits).row(prefix.len() - 1);
        Ok(log_softmax(row))
    }
}

fn key_mask(n_queries: usize, padding: &[bool]) -> Vec<bool> {
    let n_keys = padding.len();
    (0..n_queries * n_keys).map(|i| padding[i % n_keys]).collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}
