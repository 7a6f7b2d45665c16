//! Corpus BLEU and chrF++ over tokenized text.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// (clipped matches, candidate total, reference total)
fn match_stats<T: Eq + Hash + Clone>(cand: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matches = c
        .iter()
        .map(|(g, &cnt)| cnt.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, cand.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

fn check_corpus<T>(candidates: &[T], references: &[T]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::data("empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::data(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

/// Corpus BLEU-4 in [0, 100], single reference, no smoothing.
///
/// Modified n-gram precisions are pooled over the corpus before taking the
/// geometric mean; the brevity penalty uses total candidate and reference
/// lengths. An order with no matches (or no candidate n-grams at all)
/// makes the score 0.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut cand_len = 0;
    let mut ref_len = 0;
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=4 {
            let (m, t, _) = match_stats(c, r, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        if matches[n] == 0 || totals[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln();
    }
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

pub const CHRF_CHAR_ORDER: usize = 6;
pub const CHRF_WORD_ORDER: usize = 2;
pub const CHRF_BETA: f64 = 2.0;

/// Corpus chrF++ in [0, 100]: character 1–6-grams (whitespace removed) and
/// word 1–2-grams, β = 2.
///
/// Match, candidate and reference counts are pooled over the corpus per
/// order. Precision and recall are averaged over the orders that have
/// n-grams on both sides, then combined into an F_β score.
pub fn chrf_pp(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let orders = CHRF_CHAR_ORDER + CHRF_WORD_ORDER;
    let mut stats = vec![(0usize, 0usize, 0usize); orders];
    for (c, r) in candidates.iter().zip(references) {
        let cc: Vec<char> = c.iter().flat_map(|w| w.chars()).filter(|ch| !ch.is_whitespace()).collect();
        let rc: Vec<char> = r.iter().flat_map(|w| w.chars()).filter(|ch| !ch.is_whitespace()).collect();
        for n in 1..=CHRF_CHAR_ORDER {
            let (m, h, rt) = match_stats(&cc, &rc, n);
            let s = &mut stats[n - 1];
            s.0 += m;
            s.1 += h;
            s.2 += rt;
        }
        for n in 1..=CHRF_WORD_ORDER {
            let (m, h, rt) = match_stats(c, r, n);
            let s = &mut stats[CHRF_CHAR_ORDER + n - 1];
            s.0 += m;
            s.1 += h;
            s.2 += rt;
        }
    }
    let mut p = 0.0;
    let mut r = 0.0;
    let mut effective = 0;
    for &(m, h, rt) in &stats {
        if h == 0 || rt == 0 {
            continue;
        }
        p += m as f64 / h as f64;
        r += m as f64 / rt as f64;
        effective += 1;
    }
    if effective == 0 {
        return Ok(0.0);
    }
    p /= effective as f64;
    r /= effective as f64;
    let b2 = CHRF_BETA * CHRF_BETA;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * (1.0 + b2) * p * r / (b2 * p + r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::tokenize;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn identical_is_100() {
        let c = vec![toks("the cat sat on the mat ."), toks("Iraq language is Arabic .")];
        assert!((corpus_bleu(&c, &c).unwrap() - 100.0).abs() < 1e-9);
        assert!((chrf_pp(&c, &c).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_is_zero() {
        let c = vec![toks("aaa bbb")];
        let r = vec![toks("xyz qqq")];
        assert_eq!(corpus_bleu(&c, &r).unwrap(), 0.0);
        assert_eq!(chrf_pp(&c, &r).unwrap(), 0.0);
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(corpus_bleu(&[], &[]).is_err());
        assert!(chrf_pp(&[], &[]).is_err());
        assert!(corpus_bleu(&[toks("a")], &[]).is_err());
    }
}
