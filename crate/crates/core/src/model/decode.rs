use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Next-token log-probabilities given a prefix that starts with `BOS`.
pub trait StepScorer {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub length_penalty: f64,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 4,
            length_penalty: 2.0,
            max_len: 16,
        }
    }
}

/// A finished or truncated decode. `tokens` excludes `BOS` and `EOS`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
    /// Hit `max_len` without emitting `EOS`.
    pub truncated: bool,
}

/// `log_prob / len^penalty`, where `len` counts generated tokens including `EOS`.
pub fn length_normalized(log_prob: f64, len: usize, penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(penalty)
}

fn desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Keeps the `beam_size` best raw-log-prob expansions per step; hypotheses are
/// ranked by length-normalized score at the end. `PAD` and `BOS` are never emitted.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.beam_size == 0 || cfg.max_len == 0 {
        return Err(Error::Config("beam_size and max_len must be positive".into()));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    for step in 0..cfg.max_len {
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (b, (prefix, lp)) in live.iter().enumerate() {
            let next = scorer.log_probs(prefix)?;
            for (tok, &l) in next.iter().enumerate() {
                if tok != PAD && tok != BOS && l.is_finite() {
                    cands.push((b, tok, lp + l));
                }
            }
        }
        cands.sort_by(|x, y| desc(x.2, y.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
        cands.truncate(cfg.beam_size);
        let last = step + 1 == cfg.max_len;
        let mut next_live = Vec::with_capacity(cands.len());
        for (b, tok, lp) in cands {
            let len = live[b].0.len();
            if tok == EOS {
                done.push(Hypothesis {
                    tokens: live[b].0[1..].to_vec(),
                    log_prob: lp,
                    score: length_normalized(lp, len, cfg.length_penalty),
                    truncated: false,
                });
            } else if last {
                let mut tokens = live[b].0[1..].to_vec();
                tokens.push(tok);
                done.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    score: length_normalized(lp, len, cfg.length_penalty),
                    truncated: true,
                });
            } else {
                let mut p = live[b].0.clone();
                p.push(tok);
                next_live.push((p, lp));
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }
    done.into_iter()
        .min_by(|a, b| desc(a.score, b.score))
        .ok_or_else(|| Error::Contract("beam search produced no hypotheses".into()))
}

/// Argmax decoding; identical to `beam_search` with one beam.
pub fn greedy<S: StepScorer + ?Sized>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    let mut prefix = vec![BOS];
    let mut lp = 0.0;
    for _ in 0..max_len {
        let next = scorer.log_probs(&prefix)?;
        let (tok, l) = next
            .iter()
            .enumerate()
            .filter(|(t, l)| *t != PAD && *t != BOS && l.is_finite())
            .min_by(|a, b| desc(*a.1, *b.1).then(a.0.cmp(&b.0)))
            .map(|(t, &l)| (t, l))
            .ok_or_else(|| Error::Contract("scorer returned no usable tokens".into()))?;
        lp += l;
        if tok == EOS {
            return Ok(Hypothesis {
                tokens: prefix[1..].to_vec(),
                log_prob: lp,
                score: length_normalized(lp, prefix.len(), 0.0),
                truncated: false,
            });
        }
        prefix.push(tok);
    }
    Ok(Hypothesis {
        tokens: prefix[1..].to_vec(),
        log_prob: lp,
        score: lp,
        truncated: true,
    })
}
