use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercase whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn is_special(id: usize) -> bool {
    id < RESERVED.len()
}

/// Fixed token list. Ids 0..4 are pad, bos, eos, unk.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Config(format!(
                "vocabulary must start with {RESERVED:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Most frequent tokens first, ties broken lexicographically.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I, max_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for t in tokenize(text) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<_> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let room = max_size.saturating_sub(tokens.len());
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
        Vocab::from_tokens(tokens).expect("reserved prefix is always valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens, dropping pad/bos/eos.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One tokenized training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Source ids, truncated to `m_max`.
    pub source: Vec<usize>,
    /// Target ids without bos/eos, truncated to `n_max - 1`.
    pub target: Vec<usize>,
    /// Sparse bag-of-words counts over the untruncated source, sorted by id.
    pub bow: Vec<(usize, f64)>,
}

impl Example {
    pub fn new(vocab: &Vocab, document: &str, summary: &str, m_max: usize, n_max: usize) -> Result<Self> {
        let full = vocab.encode(document);
        if full.is_empty() {
            return Err(Error::EmptyInput("document has no tokens".into()));
        }
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for &t in &full {
            *counts.entry(t).or_default() += 1.0;
        }
        let mut target = vocab.encode(summary);
        target.truncate(n_max.saturating_sub(1));
        let mut source = full;
        source.truncate(m_max.max(1));
        Ok(Example {
            source,
            target,
            bow: counts.into_iter().collect(),
        })
    }

    /// `[bos, y_1 .. y_n]`, the teacher-forced decoder input.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.target.len() + 1);
        v.push(BOS);
        v.extend_from_slice(&self.target);
        v
    }

    /// `[y_1 .. y_n, eos]`, the prediction targets.
    pub fn labels(&self) -> Vec<usize> {
        let mut v = self.target.clone();
        v.push(EOS);
        v
    }

    pub fn bow_total(&self) -> f64 {
        self.bow.iter().map(|(_, c)| c).sum()
    }

    pub fn bow_dense(&self, vocab_size: usize) -> Vec<f64> {
        let mut v = vec![0.0; vocab_size];
        for &(i, c) in &self.bow {
            v[i] += c;
        }
        v
    }
}

/// Padded view of several examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub examples: Vec<Example>,
    /// `[B][m]` source ids padded with `PAD`.
    pub source: Vec<Vec<usize>>,
    pub source_mask: Vec<Vec<bool>>,
    /// `[B][n]` decoder inputs and labels padded with `PAD`.
    pub decoder_input: Vec<Vec<usize>>,
    pub labels: Vec<Vec<usize>>,
    pub label_mask: Vec<Vec<bool>>,
}

fn pad(rows: Vec<Vec<usize>>) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let masks = rows
        .iter()
        .map(|r| (0..width).map(|i| i < r.len()).collect())
        .collect();
    let padded = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, PAD);
            r
        })
        .collect();
    (padded, masks)
}

impl Batch {
    pub fn new(examples: Vec<Example>) -> Self {
        let (source, source_mask) = pad(examples.iter().map(|e| e.source.clone()).collect());
        let (decoder_input, _) = pad(examples.iter().map(Example::decoder_input).collect());
        let (labels, label_mask) = pad(examples.iter().map(Example::labels).collect());
        Batch {
            examples,
            source,
            source_mask,
            decoder_input,
            labels,
            label_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["the cat sat", "the dog"], 100)
    }

    #[test]
    fn reserved_ids() {
        let v = vocab();
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.id("the"), 4);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.encode("The CAT"), vec![4, v.id("cat")]);
    }

    #[test]
    fn bow_counts_untruncated_source() {
        let v = vocab();
        let ex = Example::new(&v, "the cat the dog the", "cat", 2, 8).unwrap();
        assert_eq!(ex.source.len(), 2);
        assert_eq!(ex.bow_total(), 5.0);
        assert!(ex.bow_total() >= ex.source.len() as f64);
        assert_eq!(ex.labels(), vec![v.id("cat"), EOS]);
        assert_eq!(ex.decoder_input(), vec![BOS, v.id("cat")]);
    }

    #[test]
    fn batch_padding() {
        let v = vocab();
        let a = Example::new(&v, "the cat sat", "cat", 16, 8).unwrap();
        let b = Example::new(&v, "dog", "the dog", 16, 8).unwrap();
        let batch = Batch::new(vec![a, b]);
        assert_eq!(batch.source[1], vec![v.id("dog"), PAD, PAD]);
        assert_eq!(batch.source_mask[1], vec![true, false, false]);
        assert_eq!(batch.label_mask[0], vec![true, true, false]);
    }

    #[test]
    fn empty_document_rejected() {
        assert!(matches!(
            Example::new(&vocab(), "   ", "x", 4, 4),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn bad_vocab_prefix() {
        assert!(Vocab::from_tokens(vec!["a".into()]).is_err());
    }
}
