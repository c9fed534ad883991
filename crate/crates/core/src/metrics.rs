//! ROUGE-1/2/L F1 on raw tokens, rep-w, and summary length.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BOS, EOS, PAD};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_REP_WINDOW: usize = 16;

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ngram_counts<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_default() += 1;
        }
    }
    m
}

/// Clipped n-gram overlap F1; 0 when either side has no n-grams.
pub fn rouge_n<T: Eq + std::hash::Hash>(candidate: &[T], reference: &[T], n: usize) -> f64 {
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let (tc, tr) = (c.values().sum::<usize>(), r.values().sum::<usize>());
    if tc == 0 || tr == 0 {
        return 0.0;
    }
    let hits: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    f1(hits as f64 / tc as f64, hits as f64 / tr as f64)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Summary-level LCS F1.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    f1(l / candidate.len() as f64, l / reference.len() as f64)
}

/// Multi-reference score: the best single-reference score. 0 with no references.
pub fn max_over_references<T, F: Fn(&[T]) -> f64>(references: &[Vec<T>], score: F) -> f64 {
    references.iter().map(|r| score(r)).fold(0.0, f64::max)
}

/// Share of positions `t ≥ 2` whose token occurred in the previous `w` tokens,
/// normalized by the full sequence length.
pub fn rep_w<T: Eq>(tokens: &[T], w: usize) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let w = w.max(1);
    let hits = (1..tokens.len())
        .filter(|&t| tokens[t.saturating_sub(w)..t].contains(&tokens[t]))
        .count();
    hits as f64 / tokens.len() as f64
}

/// Mean count of non-special tokens (pad, bos, eos excluded).
pub fn avg_length(summaries: &[Vec<usize>]) -> Result<f64> {
    if summaries.is_empty() {
        return Err(Error::EmptyInput("no summaries to measure".into()));
    }
    let total: usize = summaries
        .iter()
        .map(|s| s.iter().filter(|&&t| !matches!(t, PAD | BOS | EOS)).count())
        .sum();
    Ok(total as f64 / summaries.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub id: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub rep_w: f64,
    pub length: usize,
    /// Candidate or reference had no tokens.
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub rep_w: f64,
    pub rep_window: usize,
    pub avg_length: f64,
    pub tokenization: String,
    pub examples: Vec<ExampleScores>,
}

pub fn score_example(id: usize, candidate: &[String], reference: &[String], rep_window: usize) -> ExampleScores {
    ExampleScores {
        id,
        rouge1: rouge_n(candidate, reference, 1),
        rouge2: rouge_n(candidate, reference, 2),
        rouge_l: rouge_l(candidate, reference),
        rep_w: rep_w(candidate, rep_window),
        length: candidate.len(),
        empty: candidate.is_empty() || reference.is_empty(),
    }
}

impl EvalReport {
    /// Unweighted means over token-level pairs `(candidate, reference)`.
    pub fn from_pairs(pairs: &[(Vec<String>, Vec<String>)], rep_window: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("no examples to score".into()));
        }
        let examples: Vec<ExampleScores> = pairs
            .iter()
            .enumerate()
            .map(|(i, (c, r))| score_example(i, c, r, rep_window))
            .collect();
        let n = examples.len() as f64;
        let mean = |f: fn(&ExampleScores) -> f64| examples.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            rouge1: mean(|e| e.rouge1),
            rouge2: mean(|e| e.rouge2),
            rouge_l: mean(|e| e.rouge_l),
            rep_w: mean(|e| e.rep_w),
            rep_window,
            avg_length: mean(|e| e.length as f64),
            tokenization: "lowercase whitespace tokens, no stemming or stopword removal".into(),
            examples,
        })
    }
}
