//! Dataset parsing, tokenization, linearization and vocabulary.
//!
//! A set of triples becomes one token sequence:
//!
//! ```text
//! <prompt tokens> <Graph> <H> head <R> relation <T> tail <H> ...
//! ```
//!
//! Every position carries a [`TokenKind`], the index of the triple that owns
//! it and, for entity and relation tokens, the span it belongs to. The graph
//! builder works from these labels alone.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PROMPT: &str = "translate graph to English: ";
pub const DEFAULT_MAX_SEQUENCE_LENGTH: usize = 187;
pub const DEFAULT_MAX_TARGET_LENGTH: usize = 120;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const GRAPH: &str = "<Graph>";
pub const HEAD: &str = "<H>";
pub const REL: &str = "<R>";
pub const TAIL: &str = "<T>";

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 8] = [PAD, UNK, BOS, EOS, GRAPH, HEAD, REL, TAIL];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const GRAPH_ID: u32 = 4;
pub const HEAD_ID: u32 = 5;
pub const REL_ID: u32 = 6;
pub const TAIL_ID: u32 = 7;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Self {
            head: head.to_string(),
            relation: relation.to_string(),
            tail: tail.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub triples: Vec<Triple>,
    pub target_text: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    triples: Vec<Vec<String>>,
    #[serde(default)]
    text: Option<String>,
}

#[derive(Serialize)]
struct RawRecordOut<'a> {
    triples: Vec<[&'a str; 3]>,
    text: &'a str,
}

/// Replaces underscores with spaces and collapses runs of whitespace.
pub fn normalize_field(s: &str) -> String {
    s.replace('_', " ").split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parse one JSON-lines record. `line_no` is 1-based and only used for
/// messages.
pub fn parse_record(line: &str, line_no: usize) -> Result<Example> {
    let raw: RawRecord = serde_json::from_str(line)
        .map_err(|e| Error::data(format!("malformed record at line {line_no}: {e}")))?;
    if raw.triples.is_empty() {
        return Err(Error::data(format!("empty triple list at line {line_no}")));
    }
    let mut triples = Vec::with_capacity(raw.triples.len());
    for (i, t) in raw.triples.iter().enumerate() {
        if t.len() != 3 {
            return Err(Error::data(format!(
                "triple {i} at line {line_no} has {} fields, expected 3",
                t.len()
            )));
        }
        let fields = ["head", "relation", "tail"];
        for (f, v) in fields.iter().zip(t) {
            if tokenize(&normalize_field(v)).is_empty() {
                return Err(Error::data(format!(
                    "empty {f} in triple {i} at line {line_no}"
                )));
            }
        }
        triples.push(Triple::new(&t[0], &t[1], &t[2]));
    }
    Ok(Example {
        triples,
        target_text: raw.text.unwrap_or_default(),
    })
}

/// Read a JSON-lines dataset. Blank lines are skipped; line numbers in
/// errors refer to the physical file line.
pub fn parse_dataset(path: &Path) -> Result<Vec<Example>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1)?);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for ex in examples {
        let rec = RawRecordOut {
            triples: ex
                .triples
                .iter()
                .map(|t| [t.head.as_str(), t.relation.as_str(), t.tail.as_str()])
                .collect(),
            text: &ex.target_text,
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

const PUNCT: &[char] = &['.', ',', ';', ':', '!', '?', '(', ')', '[', ']', '"', '\''];

/// Deterministic word-level tokenizer.
///
/// Splits on whitespace, detaches the characters `. , ; : ! ? ( ) [ ] " '`
/// as single-character tokens, keeps hyphens inside words, and strips
/// double quotes that enclose the whole (trimmed) string.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut s = text.trim();
    while s.len() >= 2 && s.starts_with('"') && s.ends_with('"') {
        s = s[1..s.len() - 1].trim();
    }
    let mut out = Vec::new();
    for word in s.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    Prompt,
    Global,
    SpecialH,
    SpecialR,
    SpecialT,
    Entity,
}

impl TokenKind {
    pub fn is_special(self) -> bool {
        matches!(self, TokenKind::SpecialH | TokenKind::SpecialR | TokenKind::SpecialT)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Head,
    Relation,
    Tail,
}

impl Role {
    pub fn special_kind(self) -> TokenKind {
        match self {
            Role::Head => TokenKind::SpecialH,
            Role::Relation => TokenKind::SpecialR,
            Role::Tail => TokenKind::SpecialT,
        }
    }
}

/// One head, relation or tail occurrence in the linearized sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanInfo {
    pub triple_index: usize,
    pub role: Role,
    /// Entity identity for heads and tails: spans with equal keys name the
    /// same entity. Relations carry no key.
    pub entity_key: Option<u32>,
}

/// Linearized sequence with surface strings and per-token labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearizedGraph {
    pub surface: Vec<String>,
    pub kinds: Vec<TokenKind>,
    pub triple_index: Vec<Option<usize>>,
    pub entity_span_id: Vec<Option<usize>>,
    pub spans: Vec<SpanInfo>,
}

impl LinearizedGraph {
    pub fn len(&self) -> usize {
        self.surface.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surface.is_empty()
    }

    pub fn text(&self) -> String {
        self.surface.join(" ")
    }
}

/// Linearized sequence mapped to vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedGraphInput {
    pub tokens: Vec<u32>,
    pub kinds: Vec<TokenKind>,
    pub triple_index: Vec<Option<usize>>,
    pub entity_span_id: Vec<Option<usize>>,
    pub spans: Vec<SpanInfo>,
}

impl TokenizedGraphInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks the structural invariants of a linearization.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if self.kinds.len() != n || self.triple_index.len() != n || self.entity_span_id.len() != n {
            return Err(Error::data("parallel label arrays differ in length"));
        }
        let globals = self.kinds.iter().filter(|k| **k == TokenKind::Global).count();
        if globals != 1 {
            return Err(Error::data(format!("expected exactly one <Graph> token, found {globals}")));
        }
        for i in 0..n {
            match self.kinds[i] {
                TokenKind::Entity => {
                    let span = self.entity_span_id[i]
                        .ok_or_else(|| Error::data(format!("entity token {i} has no span")))?;
                    let info = self
                        .spans
                        .get(span)
                        .ok_or_else(|| Error::data(format!("entity token {i} names unknown span {span}")))?;
                    if self.triple_index[i] != Some(info.triple_index) {
                        return Err(Error::data(format!("entity token {i} disagrees with its span's triple")));
                    }
                }
                TokenKind::Prompt | TokenKind::Global => {
                    if self.triple_index[i].is_some() || self.entity_span_id[i].is_some() {
                        return Err(Error::data(format!("token {i} is outside the graph but carries a triple")));
                    }
                }
                _ => {
                    if self.triple_index[i].is_none() {
                        return Err(Error::data(format!("special token {i} has no triple")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Produce the surface linearization of `example`.
///
/// Head and tail strings that are equal after normalization and
/// tokenization receive the same entity key.
pub fn linearize_surface(example: &Example, prompt: &str) -> Result<LinearizedGraph> {
    if example.triples.is_empty() {
        return Err(Error::data("example has no triples"));
    }
    let mut g = LinearizedGraph {
        surface: Vec::new(),
        kinds: Vec::new(),
        triple_index: Vec::new(),
        entity_span_id: Vec::new(),
        spans: Vec::new(),
    };
    for tok in tokenize(prompt) {
        g.surface.push(tok);
        g.kinds.push(TokenKind::Prompt);
        g.triple_index.push(None);
        g.entity_span_id.push(None);
    }
    g.surface.push(GRAPH.to_string());
    g.kinds.push(TokenKind::Global);
    g.triple_index.push(None);
    g.entity_span_id.push(None);

    let mut keys: HashMap<Vec<String>, u32> = HashMap::new();
    for (ti, triple) in example.triples.iter().enumerate() {
        let parts = [
            (Role::Head, HEAD, &triple.head),
            (Role::Relation, REL, &triple.relation),
            (Role::Tail, TAIL, &triple.tail),
        ];
        for (role, marker, value) in parts {
            let toks = tokenize(&normalize_field(value));
            if toks.is_empty() {
                return Err(Error::data(format!("empty {role:?} in triple {ti}")));
            }
            let entity_key = match role {
                Role::Relation => None,
                _ => {
                    let next = keys.len() as u32;
                    Some(*keys.entry(toks.clone()).or_insert(next))
                }
            };
            let span_id = g.spans.len();
            g.spans.push(SpanInfo {
                triple_index: ti,
                role,
                entity_key,
            });
            g.surface.push(marker.to_string());
            g.kinds.push(role.special_kind());
            g.triple_index.push(Some(ti));
            g.entity_span_id.push(None);
            for t in toks {
                g.surface.push(t);
                g.kinds.push(TokenKind::Entity);
                g.triple_index.push(Some(ti));
                g.entity_span_id.push(Some(span_id));
            }
        }
    }
    Ok(g)
}

/// Inverse of [`linearize_surface`] on whitespace-joined text: returns the
/// prompt tokens and the triples (fields are the space-joined span tokens).
pub fn parse_linearization(text: &str) -> Result<(Vec<String>, Vec<Triple>)> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let g = toks
        .iter()
        .position(|t| *t == GRAPH)
        .ok_or_else(|| Error::data("no <Graph> marker"))?;
    let prompt = toks[..g].iter().map(|s| s.to_string()).collect();
    let mut triples = Vec::new();
    let mut fields: Vec<Vec<&str>> = Vec::new();
    let flush = |fields: &mut Vec<Vec<&str>>, triples: &mut Vec<Triple>| -> Result<()> {
        if fields.is_empty() {
            return Ok(());
        }
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::data(format!("malformed triple {}", triples.len())));
        }
        triples.push(Triple::new(&fields[0].join(" "), &fields[1].join(" "), &fields[2].join(" ")));
        fields.clear();
        Ok(())
    };
    for &t in &toks[g + 1..] {
        match t {
            HEAD => {
                flush(&mut fields, &mut triples)?;
                fields.push(Vec::new());
            }
            REL | TAIL => {
                let expect = if t == REL { 1 } else { 2 };
                if fields.len() != expect {
                    return Err(Error::data(format!("unexpected {t} in triple {}", triples.len())));
                }
                fields.push(Vec::new());
            }
            _ => fields
                .last_mut()
                .ok_or_else(|| Error::data(format!("token {t:?} before the first <H>")))?
                .push(t),
        }
    }
    flush(&mut fields, &mut triples)?;
    if triples.is_empty() {
        return Err(Error::data("no triples after <Graph>"));
    }
    Ok((prompt, triples))
}

/// Linearize and map to ids. Sequences longer than `max_len` are an error,
/// never silently truncated.
pub fn linearize(example: &Example, prompt: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenizedGraphInput> {
    let g = linearize_surface(example, prompt)?;
    if g.len() > max_len {
        return Err(Error::TooLong {
            len: g.len(),
            max: max_len,
        });
    }
    Ok(TokenizedGraphInput {
        tokens: g.surface.iter().map(|t| vocab.id(t)).collect(),
        kinds: g.kinds,
        triple_index: g.triple_index,
        entity_span_id: g.entity_span_id,
        spans: g.spans,
    })
}

/// Target ids without BOS/EOS. Longer than `max_len` (counting the EOS that
/// training appends) is an error.
pub fn encode_target(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<u32>> {
    let ids: Vec<u32> = tokenize(text).iter().map(|t| vocab.id(t)).collect();
    if ids.len() + 1 > max_len {
        return Err(Error::TooLong {
            len: ids.len() + 1,
            max: max_len,
        });
    }
    Ok(ids)
}

/// Bijective token/id map with reserved ids 0..8 (see [`RESERVED`]).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, ids }
    }

    /// Adds `token` if absent and returns its id.
    pub fn add(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Surface strings for `ids`, stopping at EOS and dropping PAD/BOS.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS_ID)
            .filter(|&&i| i != PAD_ID && i != BOS_ID)
            .map(|&i| self.token(i).unwrap_or(UNK).to_string())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(text.lines())
    }

    pub fn from_lines<'a>(lines: impl Iterator<Item = &'a str>) -> Result<Self> {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for (i, line) in lines.enumerate() {
            if i < RESERVED.len() && line != RESERVED[i] {
                return Err(Error::data(format!(
                    "vocabulary line {} must be `{}`, found `{line}`",
                    i + 1,
                    RESERVED[i]
                )));
            }
            if v.ids.contains_key(line) {
                return Err(Error::data(format!("duplicate vocabulary entry `{line}`")));
            }
            v.add(line);
        }
        if v.tokens.len() < RESERVED.len() {
            return Err(Error::data("vocabulary is missing reserved tokens"));
        }
        Ok(v)
    }
}

/// Build a vocabulary from the linearized inputs (with `prompt`) and the
/// target texts of `corpus`. Tokens seen fewer than `min_count` times are
/// left out and map to UNK. Ordering: descending count, then lexicographic.
pub fn build_vocabulary(corpus: &[Example], prompt: &str, min_count: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::data("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for ex in corpus {
        let lin = linearize_surface(ex, prompt)?;
        for t in lin.surface.into_iter().chain(tokenize(&ex.target_text)) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut v = Vocabulary::reserved_only();
    for (t, _) in entries {
        v.add(&t);
    }
    Ok(v)
}
