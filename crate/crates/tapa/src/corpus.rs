//! Question-pair loading, tokenization, vocabularies and padded batches.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TapaError};

pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    QuoraTsv,
    PawsTsv,
    Semeval,
}

impl FromStr for DataFormat {
    type Err = TapaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quora_tsv" => Ok(DataFormat::QuoraTsv),
            "paws_tsv" => Ok(DataFormat::PawsTsv),
            "semeval" => Ok(DataFormat::Semeval),
            other => Err(TapaError::Config(format!("unknown data format {:?}", other))),
        }
    }
}

/// Two tokenized questions with a binary paraphrase label.
#[derive(Debug, Clone)]
pub struct QuestionPair {
    pub id: String,
    pub q1_tokens: Vec<String>,
    pub q2_tokens: Vec<String>,
    pub label: u8,
    pub split: Split,
}

/// Lowercase, split punctuation into standalone tokens, then split on
/// whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if c.is_alphanumeric() {
            current.push(c);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn parse_label(raw: &str, format: DataFormat, line: usize) -> Result<u8> {
    match format {
        DataFormat::QuoraTsv | DataFormat::PawsTsv => match raw {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(TapaError::Parse(format!(
                "line {}: label {:?} is not 0 or 1",
                line, other
            ))),
        },
        // SemEval relevancy labels binarized: PerfectMatch/Relevant -> 1,
        // Irrelevant -> 0.
        DataFormat::Semeval => match raw {
            "PerfectMatch" | "Relevant" | "1" => Ok(1),
            "Irrelevant" | "0" => Ok(0),
            other => Err(TapaError::Parse(format!(
                "line {}: unknown relevancy label {:?}",
                line, other
            ))),
        },
    }
}

/// Load a TSV file with schema `id<TAB>question1<TAB>question2<TAB>label`.
/// An optional header row matching the schema is skipped.
pub fn load_pairs(path: &Path, format: DataFormat) -> Result<Vec<QuestionPair>> {
    let file = std::fs::File::open(path)
        .map_err(|e| TapaError::Io(std::io::Error::new(e.kind(), format!("{}: {}", path.display(), e))))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        if i == 0 && line == "id\tquestion1\tquestion2\tlabel" {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(TapaError::Parse(format!(
                "{} line {}: expected 4 tab-separated columns, got {}",
                path.display(),
                lineno,
                cols.len()
            )));
        }
        pairs.push(QuestionPair {
            id: cols[0].to_string(),
            q1_tokens: tokenize(cols[1]),
            q2_tokens: tokenize(cols[2]),
            label: parse_label(cols[3], format, lineno)?,
            split: Split::Train,
        });
    }
    Ok(pairs)
}

/// Word-to-index map. Index 0 is padding, index 1 is unknown; real words
/// start at index 2 in first-seen order.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    words: Vec<String>,
    pub min_count: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_INDEX)
    }

    /// Reverse lookup; padding and unknown have no word.
    pub fn word(&self, idx: usize) -> Option<&str> {
        if idx < 2 {
            None
        } else {
            self.words.get(idx - 2).map(String::as_str)
        }
    }

    /// Real words in index order (excluding pad/unk).
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Plain-text persistence: a `min_count` header line, then one word
    /// per line in index order.
    pub fn save(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "min_count={}", self.min_count)?;
        for word in &self.words {
            writeln!(w, "{}", word)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| TapaError::Parse("vocabulary file is empty".into()))?;
        let min_count = header
            .strip_prefix("min_count=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TapaError::Parse("vocabulary file: bad header".into()))?;
        let mut index = HashMap::new();
        let mut words = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            index.insert(line.to_string(), words.len() + 2);
            words.push(line.to_string());
        }
        Ok(Vocabulary {
            index,
            words,
            min_count,
        })
    }
}

/// Build a vocabulary from training pairs, keeping words with frequency
/// at least `min_count`.
pub fn build_vocab(pairs: &[QuestionPair], min_count: usize) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for pair in pairs {
        for tok in pair.q1_tokens.iter().chain(&pair.q2_tokens) {
            let entry = counts.entry(tok.as_str()).or_insert(0);
            if *entry == 0 {
                order.push(tok.as_str());
            }
            *entry += 1;
        }
    }
    let mut index = HashMap::new();
    let mut words = Vec::new();
    for word in order {
        if counts[word] >= min_count {
            index.insert(word.to_string(), words.len() + 2);
            words.push(word.to_string());
        }
    }
    Vocabulary {
        index,
        words,
        min_count,
    }
}

/// A zero-padded, masked batch of question pairs.
#[derive(Debug, Clone)]
pub struct Batch {
    pub q1_ids: Vec<Vec<usize>>,
    pub q2_ids: Vec<Vec<usize>>,
    pub q1_mask: Vec<Vec<bool>>,
    pub q2_mask: Vec<Vec<bool>>,
    pub labels: Vec<u8>,
    pub pair_ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Shuffle deterministically, truncate to `max_len`, pad to the per-batch
/// maximum. The final partial batch is kept.
pub fn make_batches(
    pairs: &[QuestionPair],
    vocab: &Vocabulary,
    batch_size: usize,
    max_len: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(TapaError::Contract("make_batches: batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);

    let encode_side = |tokens: &[String]| -> (Vec<usize>, usize) {
        let len = tokens.len().min(max_len);
        let ids: Vec<usize> = tokens[..len].iter().map(|t| vocab.lookup(t)).collect();
        (ids, len)
    };

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let rows: Vec<(&QuestionPair, (Vec<usize>, usize), (Vec<usize>, usize))> = chunk
            .iter()
            .map(|&i| {
                let p = &pairs[i];
                (p, encode_side(&p.q1_tokens), encode_side(&p.q2_tokens))
            })
            .collect();
        let w1 = rows.iter().map(|(_, (_, l), _)| *l).max().unwrap_or(0);
        let w2 = rows.iter().map(|(_, _, (_, l))| *l).max().unwrap_or(0);
        let mut batch = Batch {
            q1_ids: Vec::new(),
            q2_ids: Vec::new(),
            q1_mask: Vec::new(),
            q2_mask: Vec::new(),
            labels: Vec::new(),
            pair_ids: Vec::new(),
        };
        for (p, (ids1, l1), (ids2, l2)) in rows {
            let mut row1 = ids1;
            row1.resize(w1, PAD_INDEX);
            let mut row2 = ids2;
            row2.resize(w2, PAD_INDEX);
            let mut m1 = vec![true; l1];
            m1.resize(w1, false);
            let mut m2 = vec![true; l2];
            m2.resize(w2, false);
            batch.q1_ids.push(row1);
            batch.q2_ids.push(row2);
            batch.q1_mask.push(m1);
            batch.q2_mask.push(m2);
            batch.labels.push(p.label);
            batch.pair_ids.push(p.id.clone());
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Optional per-token contextual vectors (the precomputed replacement for
/// a contextual embedder), loaded from a sidecar file with lines
/// `pair_id<TAB>side<TAB>token_index<TAB>v1 ... v_c`.
#[derive(Debug, Clone, Default)]
pub struct ContextualVectors {
    /// (pair_id, side) -> token_index -> vector
    map: HashMap<(String, u8), HashMap<usize, Vec<f64>>>,
    pub dim: usize,
}

impl ContextualVectors {
    pub fn load(path: &Path, dim: usize) -> Result<ContextualVectors> {
        let file = std::fs::File::open(path)?;
        let mut map: HashMap<(String, u8), HashMap<usize, Vec<f64>>> = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(TapaError::Parse(format!(
                    "contextual vectors line {}: expected 4 columns, got {}",
                    i + 1,
                    cols.len()
                )));
            }
            let side: u8 = cols[1].parse().map_err(|_| {
                TapaError::Parse(format!("contextual vectors line {}: bad side", i + 1))
            })?;
            if side != 1 && side != 2 {
                return Err(TapaError::Parse(format!(
                    "contextual vectors line {}: side must be 1 or 2",
                    i + 1
                )));
            }
            let token_index: usize = cols[2].parse().map_err(|_| {
                TapaError::Parse(format!("contextual vectors line {}: bad token index", i + 1))
            })?;
            let vec: Vec<f64> = cols[3]
                .split_whitespace()
                .map(|s| {
                    s.parse().map_err(|_| {
                        TapaError::Parse(format!("contextual vectors line {}: bad float", i + 1))
                    })
                })
                .collect::<Result<_>>()?;
            if vec.len() != dim {
                return Err(TapaError::Parse(format!(
                    "contextual vectors line {}: expected {} dims, got {}",
                    i + 1,
                    dim,
                    vec.len()
                )));
            }
            map.entry((cols[0].to_string(), side))
                .or_default()
                .insert(token_index, vec);
        }
        Ok(ContextualVectors { map, dim })
    }

    pub fn get(&self, pair_id: &str, side: u8, token_index: usize) -> Option<&Vec<f64>> {
        self.map
            .get(&(pair_id.to_string(), side))
            .and_then(|m| m.get(&token_index))
    }
}
