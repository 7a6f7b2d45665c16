//! Multi-task training: text generation plus graph reconstruction.
//!
//! The batch objective is `l_total = l_tg + λ · l_gr`, where `l_tg` is the
//! token-mean cross-entropy of the teacher-forced decoder and `l_gr` the
//! edge-mean cross-entropy of the relation classifier over canonical graph
//! edges. Examples in a batch are recorded on one tape without padding;
//! per-example means are reweighted by their token / edge counts, which is
//! the same quantity a padded, masked batch would give.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::gnn::GraphOperators;
use crate::hiergraph::{build_graph, reconstruction_targets, HierGraph, ReconstructionTarget};
use crate::ingest::{encode_target, linearize, tokenize, Example, TokenizedGraphInput, Vocabulary, BOS_ID, EOS_ID, PAD_ID};
use crate::metrics::corpus_bleu;
use crate::model::{DropoutSeed, Model};
use crate::tensor::{AdamConfig, Graph, NodeId, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    None,
    FreezeBase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_gr: f64,
    pub freeze_mode: FreezeMode,
    pub seed: u64,
    pub unidirectional_edges: bool,
    pub disable_gr_loss: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Validation BLEU is computed every this many epochs and after the
    /// last epoch.
    pub eval_every: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 10,
            epochs: 50,
            lambda_gr: 0.08,
            freeze_mode: FreezeMode::None,
            seed: 123,
            unidirectional_edges: false,
            disable_gr_loss: false,
            grad_clip: 1.0,
            eval_every: 1,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_gr.is_nan() || self.lambda_gr < 0.0 {
            return Err(Error::Config(format!("lambda_gr must be ≥ 0, got {}", self.lambda_gr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// The λ that actually multiplies `l_gr`.
    pub fn effective_lambda(&self) -> f64 {
        if self.disable_gr_loss {
            0.0
        } else {
            self.lambda_gr
        }
    }
}

/// An example with everything the model needs precomputed.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub input: TokenizedGraphInput,
    pub graph: HierGraph,
    pub ops: GraphOperators,
    pub targets: Vec<ReconstructionTarget>,
    /// `BOS y`
    pub decoder_input: Vec<u32>,
    /// `y EOS`
    pub labels: Vec<u32>,
    pub reference: Vec<String>,
}

impl PreparedExample {
    pub fn new(
        example: &Example,
        vocab: &Vocabulary,
        prompt: &str,
        max_sequence_length: usize,
        max_target_length: usize,
        bidirectional: bool,
    ) -> Result<Self> {
        let input = linearize(example, prompt, vocab, max_sequence_length)?;
        let graph = build_graph(&input, bidirectional)?;
        let ops = GraphOperators::new(&graph)?;
        let targets = reconstruction_targets(&graph);
        let y = encode_target(&example.target_text, vocab, max_target_length)?;
        let mut decoder_input = vec![BOS_ID];
        decoder_input.extend_from_slice(&y);
        let mut labels = y;
        labels.push(EOS_ID);
        Ok(Self {
            input,
            graph,
            ops,
            targets,
            decoder_input,
            labels,
            reference: tokenize(&example.target_text),
        })
    }
}

pub fn prepare_all(
    examples: &[Example],
    vocab: &Vocabulary,
    prompt: &str,
    model: &Model,
    bidirectional: bool,
) -> Result<Vec<PreparedExample>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            PreparedExample::new(
                ex,
                vocab,
                prompt,
                model.config.max_sequence_length,
                model.config.max_target_length,
                bidirectional,
            )
            .map_err(|e| Error::data(format!("example {i}: {e}")))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_tg: f64,
    pub l_gr: f64,
    pub l_total: f64,
    pub lambda: f64,
    pub token_accuracy: f64,
    pub gr_accuracy: f64,
    pub num_tokens: usize,
    pub num_edges: usize,
}

/// Batch loss recorded on `g`. Returns the `l_total` node and the
/// breakdown.
pub fn compute_loss(
    g: &mut Graph,
    model: &Model,
    batch: &[&PreparedExample],
    cfg: &TrainConfig,
    dropout_seeds: Option<&[u64]>,
) -> Result<(NodeId, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let num_tokens: usize = batch.iter().map(|e| e.labels.len()).sum();
    let num_edges: usize = batch.iter().map(|e| e.targets.len()).sum();
    let mut tg: Option<NodeId> = None;
    let mut gr: Option<NodeId> = None;
    let mut tok_correct = 0usize;
    let mut gr_correct = 0usize;
    let use_gnn = model.config.variation.uses_gnn();
    for (i, ex) in batch.iter().enumerate() {
        let seed = dropout_seeds.map(|s| DropoutSeed(s[i]));
        let enc = model.encoder_forward(g, &ex.input.tokens, use_gnn.then_some(&ex.ops), None, seed)?;
        let logits = model.decoder_forward(g, &ex.decoder_input, enc, None, seed)?;
        let ids: Vec<usize> = ex.labels.iter().map(|&t| t as usize).collect();
        tok_correct += count_correct(g, logits, &ids, PAD_ID as usize);
        let ce = g.cross_entropy(logits, &ids, PAD_ID as usize)?;
        let ce = g.scale(ce, ex.labels.len() as f64 / num_tokens as f64)?;
        tg = Some(match tg {
            Some(a) => g.add(a, ce)?,
            None => ce,
        });
        if !ex.targets.is_empty() {
            let rl = model.reconstruct_relations(g, enc, &ex.targets)?;
            let labels: Vec<usize> = ex.targets.iter().map(|t| t.label.label().expect("non-self")).collect();
            gr_correct += count_correct(g, rl, &labels, usize::MAX);
            let ce = g.cross_entropy(rl, &labels, usize::MAX)?;
            let ce = g.scale(ce, ex.targets.len() as f64 / num_edges as f64)?;
            gr = Some(match gr {
                Some(a) => g.add(a, ce)?,
                None => ce,
            });
        }
    }
    let tg = tg.expect("non-empty batch");
    let lambda = cfg.effective_lambda();
    let total = match gr {
        Some(gr) if !cfg.disable_gr_loss => {
            let w = g.scale(gr, lambda)?;
            g.add(tg, w)?
        }
        _ => tg,
    };
    let l_tg = g.value(tg).item();
    let l_gr = gr.map_or(0.0, |n| g.value(n).item());
    let breakdown = LossBreakdown {
        l_tg,
        l_gr,
        l_total: g.value(total).item(),
        lambda,
        token_accuracy: tok_correct as f64 / num_tokens.max(1) as f64,
        gr_accuracy: if num_edges == 0 { 1.0 } else { gr_correct as f64 / num_edges as f64 },
        num_tokens,
        num_edges,
    };
    Ok((total, breakdown))
}

fn count_correct(g: &Graph, logits: NodeId, targets: &[usize], ignore: usize) -> usize {
    let t = g.value(logits);
    targets
        .iter()
        .enumerate()
        .filter(|(r, &y)| {
            y != ignore && {
                let row = t.row(*r);
                let arg = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(&a.0)))
                    .map(|(i, _)| i);
                arg == Some(y)
            }
        })
        .count()
}

/// Loss and accuracies over a whole set without updating anything.
pub fn evaluate_loss(model: &Model, data: &[PreparedExample], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    let mut tok_correct = 0.0;
    let mut gr_correct = 0.0;
    let mut tg = 0.0;
    let mut gr = 0.0;
    for chunk in data.chunks(cfg.batch_size.max(1)) {
        let batch: Vec<&PreparedExample> = chunk.iter().collect();
        let mut g = Graph::inference();
        let (_, b) = compute_loss(&mut g, model, &batch, cfg, None)?;
        tg += b.l_tg * b.num_tokens as f64;
        gr += b.l_gr * b.num_edges as f64;
        tok_correct += b.token_accuracy * b.num_tokens as f64;
        gr_correct += b.gr_accuracy * b.num_edges as f64;
        acc.num_tokens += b.num_tokens;
        acc.num_edges += b.num_edges;
    }
    acc.lambda = cfg.effective_lambda();
    acc.l_tg = tg / acc.num_tokens.max(1) as f64;
    acc.l_gr = if acc.num_edges == 0 { 0.0 } else { gr / acc.num_edges as f64 };
    acc.l_total = acc.l_tg + acc.lambda * acc.l_gr;
    acc.token_accuracy = tok_correct / acc.num_tokens.max(1) as f64;
    acc.gr_accuracy = if acc.num_edges == 0 { 1.0 } else { gr_correct / acc.num_edges as f64 };
    Ok(acc)
}

/// Decoded token strings for every example.
pub fn generate_all(model: &Model, vocab: &Vocabulary, data: &[PreparedExample], cfg: &DecodeConfig) -> Result<Vec<Vec<String>>> {
    data.iter()
        .map(|ex| {
            let ops = model.config.variation.uses_gnn().then_some(&ex.ops);
            let h = decode(model, &ex.input.tokens, ops, cfg)?;
            Ok(vocab.decode(h.content()))
        })
        .collect()
}

/// Corpus BLEU of greedy decodes against the tokenized references.
pub fn greedy_bleu(model: &Model, vocab: &Vocabulary, data: &[PreparedExample]) -> Result<f64> {
    let hyps = generate_all(model, vocab, data, &DecodeConfig::greedy(model.config.max_target_length))?;
    let refs: Vec<Vec<String>> = data.iter().map(|e| e.reference.clone()).collect();
    corpus_bleu(&hyps, &refs)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_tg: f64,
    pub l_gr: f64,
    pub l_total: f64,
    pub val_bleu: Option<f64>,
    pub token_accuracy: f64,
    pub gr_accuracy: f64,
    pub steps: u64,
    pub trainable_params: usize,
    pub total_params: usize,
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation BLEU (later epochs
    /// win ties).
    pub best: ParameterStore,
    pub best_epoch: usize,
    pub best_val_bleu: f64,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn write_log(&self, path: &Path) -> Result<()> {
        write_metrics_log(&self.log, path)
    }
}

pub fn write_metrics_log(log: &[EpochRecord], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in log {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Train `model` in place. `valid` drives checkpoint selection; when it is
/// empty the training set is used. On return `model.store` holds the final
/// parameters and the outcome holds the best ones.
pub fn train(
    model: &mut Model,
    vocab: &Vocabulary,
    train_set: &[PreparedExample],
    valid: &[PreparedExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("empty training set"));
    }
    match cfg.freeze_mode {
        FreezeMode::None => model.unfreeze_all(),
        FreezeMode::FreezeBase => model.freeze_base(),
    }
    let valid = if valid.is_empty() { train_set } else { valid };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = cfg.adam();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParameterStore)> = None;
    let use_dropout = model.config.dropout > 0.0;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut tg = 0.0;
        let mut gr = 0.0;
        let mut tok_correct = 0.0;
        let mut gr_correct = 0.0;
        let mut tokens = 0usize;
        let mut edges = 0usize;
        let mut stop = false;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Option<Vec<u64>> = use_dropout.then(|| batch.iter().map(|_| rng.gen()).collect());
            let mut g = Graph::new();
            let (loss, b) = compute_loss(&mut g, model, &batch, cfg, seeds.as_deref())?;
            if !b.l_total.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, batch {bi} (l_tg={}, l_gr={})",
                    b.l_tg, b.l_gr
                )));
            }
            g.backward(loss, &mut model.store)?;
            if cfg.grad_clip > 0.0 {
                model.store.clip_grad_norm(cfg.grad_clip);
            }
            model.store.adam_step(&adam);
            tg += b.l_tg * b.num_tokens as f64;
            gr += b.l_gr * b.num_edges as f64;
            tok_correct += b.token_accuracy * b.num_tokens as f64;
            gr_correct += b.gr_accuracy * b.num_edges as f64;
            tokens += b.num_tokens;
            edges += b.num_edges;
            if cfg.max_steps > 0 && model.store.steps_taken() as usize >= cfg.max_steps {
                stop = true;
                break;
            }
        }
        let last = epoch == cfg.epochs || stop;
        let val_bleu = if epoch % cfg.eval_every == 0 || last {
            Some(greedy_bleu(model, vocab, valid)?)
        } else {
            None
        };
        let l_tg = tg / tokens.max(1) as f64;
        let l_gr = if edges == 0 { 0.0 } else { gr / edges as f64 };
        let rec = EpochRecord {
            epoch,
            l_tg,
            l_gr,
            l_total: l_tg + cfg.effective_lambda() * l_gr,
            val_bleu,
            token_accuracy: tok_correct / tokens.max(1) as f64,
            gr_accuracy: if edges == 0 { 1.0 } else { gr_correct / edges as f64 },
            steps: model.store.steps_taken(),
            trainable_params: model.store.num_trainable_elements(),
            total_params: model.store.num_elements(),
        };
        on_epoch(&rec);
        if let Some(v) = val_bleu {
            if best.as_ref().is_none_or(|(_, b, _)| v >= *b) {
                best = Some((epoch, v, model.store.clone()));
            }
        }
        log.push(rec);
        if stop {
            break 'epochs;
        }
    }
    let (best_epoch, best_val_bleu, best) = match best {
        Some(b) => b,
        None => (0, 0.0, model.store.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_bleu,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub val_bleu: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Per λ, the validation BLEU curve over epochs (evaluated epochs only).
    pub curves: Vec<(f64, Vec<(usize, f64)>)>,
}

impl SweepResult {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("lambda\tval_bleu\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\n", r.lambda, r.val_bleu));
        }
        s
    }

    pub fn plot_data(&self) -> serde_json::Value {
        serde_json::json!({
            "x_label": "lambda",
            "y_label": "val_bleu",
            "points": self.rows.iter().map(|r| serde_json::json!([r.lambda, r.val_bleu])).collect::<Vec<_>>(),
            "curves": self.curves.iter().map(|(l, c)| serde_json::json!({
                "lambda": l,
                "epochs": c.iter().map(|(e, _)| *e).collect::<Vec<_>>(),
                "val_bleu": c.iter().map(|(_, b)| *b).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Train one model per λ from identical initialisation and seed.
pub fn sweep_lambda(
    init: &Model,
    vocab: &Vocabulary,
    train_set: &[PreparedExample],
    valid: &[PreparedExample],
    cfg: &TrainConfig,
    values: &[f64],
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Config("no λ values to sweep".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    let mut curves = Vec::with_capacity(values.len());
    for &lambda in values {
        let mut model = init.clone();
        let run_cfg = TrainConfig {
            lambda_gr: lambda,
            ..cfg.clone()
        };
        let out = train(&mut model, vocab, train_set, valid, &run_cfg, |_| {})?;
        rows.push(SweepRow {
            lambda,
            val_bleu: out.best_val_bleu,
            best_epoch: out.best_epoch,
        });
        curves.push((
            lambda,
            out.log.iter().filter_map(|r| r.val_bleu.map(|b| (r.epoch, b))).collect(),
        ));
    }
    Ok(SweepResult { rows, curves })
}
