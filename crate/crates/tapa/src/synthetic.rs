//! Deterministic synthetic pair generators for self-contained
//! experiments and tests.
//!
//! `lexical`: positives are synonym-substituted rewrites of the same
//! sentence, negatives draw their words from a different topic block.
//! Solvable from word embeddings alone.
//!
//! `topical`: each question samples its words from one of several
//! disjoint topic vocabularies and the label says whether the two sides
//! share a topic. With zero-width embeddings this is solvable only
//! through the topic features.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{QuestionPair, Split};
use crate::error::{Result, TapaError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Lexical,
    Topical,
}

impl FromStr for SyntheticKind {
    type Err = TapaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lexical" => Ok(SyntheticKind::Lexical),
            "topical" => Ok(SyntheticKind::Topical),
            other => Err(TapaError::Parse(format!(
                "unknown synthetic kind {:?} (expected lexical or topical)",
                other
            ))),
        }
    }
}

const NUM_BLOCKS: usize = 6;
const WORDS_PER_BLOCK: usize = 30;
const SENT_MIN: usize = 5;
const SENT_MAX: usize = 8;
/// Positive rate for the topical generator; kept below 0.5 so a
/// constant all-positive classifier stays under F1 0.6.
const TOPICAL_POS_RATE: f64 = 0.4;

fn block_word(block: usize, i: usize) -> String {
    format!("w{}x{}", block, i)
}

fn block_synonym(block: usize, i: usize) -> String {
    format!("s{}x{}", block, i)
}

fn sample_sentence(rng: &mut ChaCha8Rng, block: usize) -> Vec<usize> {
    let len = rng.gen_range(SENT_MIN..=SENT_MAX);
    let mut idx: Vec<usize> = (0..WORDS_PER_BLOCK).collect();
    idx.shuffle(rng);
    idx.truncate(len);
    let _ = block;
    idx
}

fn lexical_pair(rng: &mut ChaCha8Rng, id: usize, split: Split) -> QuestionPair {
    let block = rng.gen_range(0..NUM_BLOCKS);
    let word_ids = sample_sentence(rng, block);
    let q1: Vec<String> = word_ids.iter().map(|&i| block_word(block, i)).collect();
    let label: u8 = rng.gen_range(0..2);
    let q2: Vec<String> = if label == 1 {
        // paraphrase: keep or synonym-swap each word, lightly reorder
        let mut words: Vec<String> = word_ids
            .iter()
            .map(|&i| {
                if rng.gen_bool(0.5) {
                    block_synonym(block, i)
                } else {
                    block_word(block, i)
                }
            })
            .collect();
        if words.len() > 2 && rng.gen_bool(0.5) {
            let j = rng.gen_range(0..words.len() - 1);
            words.swap(j, j + 1);
        }
        words
    } else {
        let other = (block + 1 + rng.gen_range(0..NUM_BLOCKS - 1)) % NUM_BLOCKS;
        sample_sentence(rng, other)
            .iter()
            .map(|&i| block_word(other, i))
            .collect()
    };
    QuestionPair {
        id: format!("lex-{}", id),
        q1_tokens: q1,
        q2_tokens: q2,
        label,
        split,
    }
}

fn topical_pair(rng: &mut ChaCha8Rng, id: usize, split: Split) -> QuestionPair {
    let block = rng.gen_range(0..NUM_BLOCKS);
    let label: u8 = if rng.gen_bool(TOPICAL_POS_RATE) { 1 } else { 0 };
    let other = if label == 1 {
        block
    } else {
        (block + 1 + rng.gen_range(0..NUM_BLOCKS - 1)) % NUM_BLOCKS
    };
    let q1: Vec<String> = sample_sentence(rng, block)
        .iter()
        .map(|&i| block_word(block, i))
        .collect();
    let q2: Vec<String> = sample_sentence(rng, other)
        .iter()
        .map(|&i| block_word(other, i))
        .collect();
    QuestionPair {
        id: format!("top-{}", id),
        q1_tokens: q1,
        q2_tokens: q2,
        label,
        split,
    }
}

/// Generate train/dev/test splits deterministically under `seed`.
pub fn make_synthetic(
    kind: SyntheticKind,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    seed: u64,
) -> (Vec<QuestionPair>, Vec<QuestionPair>, Vec<QuestionPair>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut id = 0usize;
    let mut gen = |n: usize, split: Split, rng: &mut ChaCha8Rng| {
        (0..n)
            .map(|_| {
                id += 1;
                match kind {
                    SyntheticKind::Lexical => lexical_pair(rng, id, split),
                    SyntheticKind::Topical => topical_pair(rng, id, split),
                }
            })
            .collect::<Vec<_>>()
    };
    let train = gen(n_train, Split::Train, &mut rng);
    let dev = gen(n_dev, Split::Dev, &mut rng);
    let test = gen(n_test, Split::Test, &mut rng);
    (train, dev, test)
}

/// Write pairs in the plain 4-column TSV layout the loaders read back.
pub fn write_pairs(path: &Path, pairs: &[QuestionPair]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "id\tquestion1\tquestion2\tlabel")?;
    for p in pairs {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            p.id,
            p.q1_tokens.join(" "),
            p.q2_tokens.join(" "),
            p.label
        )?;
    }
    Ok(())
}

/// Token-overlap (Jaccard) baseline used as a sanity check that the
/// lexical task carries learnable surface signal.
pub fn overlap_baseline_f1(pairs: &[QuestionPair], threshold: f64) -> Result<f64> {
    let mut preds = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for p in pairs {
        let a: std::collections::HashSet<&str> =
            p.q1_tokens.iter().map(|s| s.as_str()).collect();
        let b: std::collections::HashSet<&str> =
            p.q2_tokens.iter().map(|s| s.as_str()).collect();
        let inter = a.intersection(&b).count() as f64;
        let union = a.union(&b).count() as f64;
        let jaccard = if union > 0.0 { inter / union } else { 0.0 };
        preds.push(if jaccard > threshold { 1 } else { 0 });
        labels.push(p.label);
    }
    Ok(crate::evaluate::f1_score(&preds, &labels)?.f1)
}
