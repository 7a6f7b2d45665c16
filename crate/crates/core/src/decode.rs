//! Greedy and beam-search decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::GraphOperators;
use crate::ingest::{BOS_ID, EOS_ID};
use crate::model::Model;
use crate::tensor::Tensor;

/// Anything that can score the next token given a prefix (which starts with
/// BOS).
pub trait StepScorer {
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_target_length: usize,
    /// Finished hypotheses are ranked by `log_prob / len^length_penalty`.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Beam,
            beam_size: 3,
            max_target_length: crate::ingest::DEFAULT_MAX_TARGET_LENGTH,
            length_penalty: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_target_length: usize) -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_size: 1,
            max_target_length,
            length_penalty: 1.0,
        }
    }

    pub fn effective_beam(&self) -> usize {
        match self.mode {
            DecodeMode::Greedy => 1,
            DecodeMode::Beam => self.beam_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, without BOS. Ends with EOS when finished early.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, length_penalty: f64) -> f64 {
        let len = self.tokens.len().max(1) as f64;
        self.log_prob / len.powf(length_penalty)
    }

    /// Tokens with the trailing EOS removed.
    pub fn content(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS_ID) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn prefix_of(tokens: &[u32]) -> Vec<u32> {
    let mut p = Vec::with_capacity(tokens.len() + 1);
    p.push(BOS_ID);
    p.extend_from_slice(tokens);
    p
}

/// Beam search. At every step the `beam_size` best expansions (by
/// cumulative log-probability, ties broken by the lower token sequence)
/// are kept; those ending in EOS are finished and leave the beam. The best
/// finished hypothesis under the length penalty wins. Beam size 1 is
/// greedy decoding.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, cfg: &DecodeConfig) -> Result<Hypothesis> {
    let k = cfg.effective_beam();
    if k == 0 {
        return Err(Error::Config("beam_size must be ≥ 1".into()));
    }
    if cfg.max_target_length == 0 {
        return Err(Error::Config("max_target_length must be ≥ 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for h in &live {
            let lp = scorer.next_log_probs(&prefix_of(&h.tokens))?;
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok as u32);
                let done = tok as u32 == EOS_ID || tokens.len() >= cfg.max_target_length;
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + l,
                    finished: done,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .total_cmp(&a.log_prob)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(k);
        live.clear();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    finished
        .into_iter()
        .min_by(|a, b| {
            b.score(cfg.length_penalty)
                .total_cmp(&a.score(cfg.length_penalty))
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .ok_or_else(|| Error::data("decoding produced no hypothesis"))
}

/// Token-by-token argmax, lowest id on ties.
pub fn greedy<S: StepScorer + ?Sized>(scorer: &S, max_target_length: usize) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    loop {
        let lp = scorer.next_log_probs(&prefix_of(&tokens))?;
        let (best, &l) = lp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(&a.0)))
            .ok_or_else(|| Error::data("empty distribution"))?;
        tokens.push(best as u32);
        log_prob += l;
        if best as u32 == EOS_ID || tokens.len() >= max_target_length {
            return Ok(Hypothesis {
                tokens,
                log_prob,
                finished: true,
            });
        }
    }
}

/// Scorer backed by a model and one encoded input.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub encoder_states: Tensor,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, tokens: &[u32], graph: Option<&GraphOperators>) -> Result<Self> {
        Ok(Self {
            model,
            encoder_states: model.encode(tokens, graph)?,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        self.model.next_log_probs(&self.encoder_states, prefix)
    }
}

/// Decode one input with `model`.
pub fn decode(model: &Model, tokens: &[u32], graph: Option<&GraphOperators>, cfg: &DecodeConfig) -> Result<Hypothesis> {
    let scorer = ModelScorer::new(model, tokens, graph)?;
    let cfg = DecodeConfig {
        max_target_length: cfg.max_target_length.min(model.config.max_target_length),
        ..cfg.clone()
    };
    match cfg.mode {
        DecodeMode::Greedy => greedy(&scorer, cfg.max_target_length),
        DecodeMode::Beam => beam_search(&scorer, &cfg),
    }
}
