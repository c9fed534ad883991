use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub document: String,
    pub summary: String,
}

/// Where each example came from: `(file, 1-based line)`, or a generator seed.
#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Files(Vec<(PathBuf, usize)>),
    Synthetic { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub examples: Vec<Pair>,
    pub split: Split,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Tokenize every pair; a document with no tokens fails with its origin.
    pub fn encode(&self, vocab: &Vocab, m_max: usize, n_max: usize) -> Result<Vec<Example>> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Example::new(vocab, &p.document, &p.summary, m_max, n_max).map_err(|e| match &self.provenance {
                    Provenance::Files(lines) => Error::Parse {
                        path: lines[i].0.clone(),
                        line: lines[i].1,
                        message: e.to_string(),
                    },
                    Provenance::Synthetic { .. } => e,
                })
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in &self.examples {
            serde_json::to_writer(&mut f, p)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

fn parse_line(path: &Path, line: usize, text: &str) -> Result<Pair> {
    let err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| err(format!("malformed JSON: {e}")))?;
    let obj = v.as_object().ok_or_else(|| err("expected a JSON object".into()))?;
    let field = |k: &str| -> Result<String> {
        match obj.get(k) {
            Some(serde_json::Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(err(format!("key {k:?} must be a string"))),
            None => Err(err(format!("missing key {k:?}"))),
        }
    };
    let pair = Pair {
        document: field("document")?,
        summary: field("summary")?,
    };
    if pair.document.trim().is_empty() {
        return Err(err("empty document".into()));
    }
    Ok(pair)
}

/// Reads JSONL files in order and concatenates them. Blank lines are skipped.
pub fn load_corpus<P: AsRef<Path>>(paths: &[P], split: Split) -> Result<Corpus> {
    let mut examples = Vec::new();
    let mut origin = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let reader = BufReader::new(std::fs::File::open(path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            examples.push(parse_line(path, i + 1, &line)?);
            origin.push((path.to_path_buf(), i + 1));
        }
    }
    Ok(Corpus {
        examples,
        split,
        provenance: Provenance::Files(origin),
    })
}

/// Synthetic summarization task settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Total vocabulary including the four reserved ids and the marker.
    pub vocab: usize,
    pub doc_max: usize,
    pub summary_max: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab: 200,
            doc_max: 64,
            summary_max: 16,
            train: 1000,
            val: 100,
            test: 100,
        }
    }
}

/// Token that flags the following word as salient.
pub const MARKER: &str = "mark";

fn word(i: usize) -> String {
    format!("w{i}")
}

/// One document. Salient words are distinct, each is marked once and also
/// recurs one or two more times unmarked, the way key entities recur in news
/// text. Everything else is uniform filler. The summary lists the marked
/// words in document order.
fn synth_pair(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Pair {
    let words = cfg.vocab.saturating_sub(5).max(2);
    let max_salient = cfg.summary_max.min(cfg.doc_max / 4).min(words).max(1);
    let salient = rng.random_range(1..=max_salient);
    let chosen = rand::seq::index::sample(rng, words, salient).into_vec();
    let mut budget = cfg.doc_max.saturating_sub(2 * salient);
    let mut body: Vec<String> = Vec::new();
    for &w in &chosen {
        let extra = rng.random_range(1..=2).min(budget);
        budget -= extra;
        body.extend(std::iter::repeat_n(word(w), extra));
    }
    let filler = rng.random_range(budget.min(2)..=budget);
    body.extend((0..filler).map(|_| word(rng.random_range(0..words))));
    body.shuffle(rng);
    // Marked pairs go into distinct gaps, in the order of `chosen`.
    let mut gaps: Vec<usize> = (0..salient).map(|_| rng.random_range(0..=body.len())).collect();
    gaps.sort_unstable();
    let mut doc = Vec::with_capacity(body.len() + 2 * salient);
    let mut next = 0;
    for (i, tok) in body.into_iter().enumerate() {
        while next < salient && gaps[next] == i {
            doc.push(MARKER.to_string());
            doc.push(word(chosen[next]));
            next += 1;
        }
        doc.push(tok);
    }
    while next < salient {
        doc.push(MARKER.to_string());
        doc.push(word(chosen[next]));
        next += 1;
    }
    let summary: Vec<String> = chosen.iter().map(|&w| word(w)).collect();
    Pair {
        document: doc.join(" "),
        summary: summary.join(" "),
    }
}

/// Deterministic train/val/test corpora for `seed`.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> (Corpus, Corpus, Corpus) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize, split: Split| Corpus {
        examples: (0..n).map(|_| synth_pair(cfg, &mut rng)).collect(),
        split,
        provenance: Provenance::Synthetic { seed },
    };
    let train = make(cfg.train, Split::Train);
    let val = make(cfg.val, Split::Val);
    let test = make(cfg.test, Split::Test);
    (train, val, test)
}
