//! LDA topic model trained by collapsed Gibbs sampling.
//!
//! Produces the per-word topic vectors and per-question document topic
//! vectors consumed by the encoder. The Dirichlet document prior follows
//! the mallet convention: `alpha_total` is the total concentration, so the
//! per-topic prior is `alpha_total / K`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TapaError};

/// Fold-in schedule for document inference: burn-in sweeps discarded,
/// then this many sweeps averaged.
pub const DEFAULT_BURNIN: usize = 20;
pub const DEFAULT_SAMPLES: usize = 10;

/// Which topic vector feeds the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopicSetting {
    /// Word-level topics only.
    Word,
    /// Elementwise product of word-level and document-level topics.
    WordDoc,
}

impl FromStr for TopicSetting {
    type Err = TapaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TopicSetting::Word),
            "word+doc" => Ok(TopicSetting::WordDoc),
            other => Err(TapaError::Config(format!(
                "unknown topic setting {:?} (expected word or word+doc)",
                other
            ))),
        }
    }
}

impl std::fmt::Display for TopicSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopicSetting::Word => write!(f, "word"),
            TopicSetting::WordDoc => write!(f, "word+doc"),
        }
    }
}

/// A length-K distribution over topics.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicVector {
    pub probs: Vec<f64>,
}

impl TopicVector {
    pub fn uniform(k: usize) -> TopicVector {
        TopicVector {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// A fitted topic model: K topics over a V-word vocabulary.
#[derive(Debug, Clone)]
pub struct TopicModel {
    pub num_topics: usize,
    /// K rows of V probabilities, each row summing to 1.
    pub topic_word: Vec<Vec<f64>>,
    pub alpha_total: f64,
    pub beta: f64,
    pub vocab: Vec<String>,
    pub vocab_index: HashMap<String, usize>,
    pub seed: u64,
}

fn sample_discrete(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0 && total.is_finite());
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Train a topic model on tokenized documents with collapsed Gibbs
/// sampling. Deterministic given `seed`.
pub fn fit_gibbs(
    corpus: &[Vec<String>],
    num_topics: usize,
    alpha_total: f64,
    beta: f64,
    iterations: usize,
    seed: u64,
) -> Result<TopicModel> {
    if corpus.is_empty() {
        return Err(TapaError::Data("fit_gibbs: empty corpus".into()));
    }
    if num_topics == 0 {
        return Err(TapaError::Config("fit_gibbs: num_topics must be >= 1".into()));
    }
    if iterations == 0 {
        return Err(TapaError::Contract("fit_gibbs: iterations must be >= 1".into()));
    }

    // Vocabulary in first-seen order keeps the sampler deterministic.
    let mut vocab = Vec::new();
    let mut vocab_index: HashMap<String, usize> = HashMap::new();
    let mut docs: Vec<Vec<usize>> = Vec::with_capacity(corpus.len());
    for tokens in corpus {
        let mut ids = Vec::with_capacity(tokens.len());
        for tok in tokens {
            let id = *vocab_index.entry(tok.clone()).or_insert_with(|| {
                vocab.push(tok.clone());
                vocab.len() - 1
            });
            ids.push(id);
        }
        docs.push(ids);
    }
    let v = vocab.len();
    if v == 0 {
        return Err(TapaError::Data("fit_gibbs: empty vocabulary".into()));
    }

    let k = num_topics;
    let alpha = alpha_total / k as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut n_kw = vec![vec![0i64; v]; k];
    let mut n_k = vec![0i64; k];
    let mut n_dk = vec![vec![0i64; k]; docs.len()];
    let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(docs.len());
    let total_tokens: i64 = docs.iter().map(|d| d.len() as i64).sum();

    for (d, doc) in docs.iter().enumerate() {
        let mut z = Vec::with_capacity(doc.len());
        for &wid in doc {
            let topic = rng.gen_range(0..k);
            n_kw[topic][wid] += 1;
            n_k[topic] += 1;
            n_dk[d][topic] += 1;
            z.push(topic);
        }
        assignments.push(z);
    }

    let vbeta = v as f64 * beta;
    let mut weights = vec![0.0; k];
    for _sweep in 0..iterations {
        for (d, doc) in docs.iter().enumerate() {
            for (pos, &wid) in doc.iter().enumerate() {
                let old = assignments[d][pos];
                n_kw[old][wid] -= 1;
                n_k[old] -= 1;
                n_dk[d][old] -= 1;
                for t in 0..k {
                    weights[t] = (n_dk[d][t] as f64 + alpha) * (n_kw[t][wid] as f64 + beta)
                        / (n_k[t] as f64 + vbeta);
                }
                let new = sample_discrete(&mut rng, &weights);
                n_kw[new][wid] += 1;
                n_k[new] += 1;
                n_dk[d][new] += 1;
                assignments[d][pos] = new;
            }
        }
        debug_assert_eq!(n_k.iter().sum::<i64>(), total_tokens);
    }
    assert_eq!(
        n_k.iter().sum::<i64>(),
        total_tokens,
        "Gibbs sweep lost tokens"
    );

    let topic_word: Vec<Vec<f64>> = (0..k)
        .map(|t| {
            let denom = n_k[t] as f64 + vbeta;
            (0..v).map(|w| (n_kw[t][w] as f64 + beta) / denom).collect()
        })
        .collect();

    Ok(TopicModel {
        num_topics: k,
        topic_word,
        alpha_total,
        beta,
        vocab,
        vocab_index,
        seed,
    })
}

impl TopicModel {
    /// Document-level topic distribution `t_D` by fold-in Gibbs sampling
    /// with the topic-word matrix frozen. Unknown words are skipped;
    /// degenerate inputs fall back to the uniform vector.
    pub fn infer_doc(&self, tokens: &[String]) -> TopicVector {
        self.infer_doc_with(tokens, DEFAULT_BURNIN, DEFAULT_SAMPLES)
    }

    pub fn infer_doc_with(&self, tokens: &[String], burnin: usize, samples: usize) -> TopicVector {
        let ids: Vec<usize> = tokens
            .iter()
            .filter_map(|t| self.vocab_index.get(t).copied())
            .collect();
        let k = self.num_topics;
        if ids.is_empty() || samples == 0 {
            return TopicVector::uniform(k);
        }
        let alpha = self.alpha_total / k as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut counts = vec![0i64; k];
        let mut z: Vec<usize> = ids
            .iter()
            .map(|_| {
                let t = rng.gen_range(0..k);
                counts[t] += 1;
                t
            })
            .collect();

        let n = ids.len() as f64;
        let mut weights = vec![0.0; k];
        let mut avg = vec![0.0; k];
        for sweep in 0..(burnin + samples) {
            for (pos, &wid) in ids.iter().enumerate() {
                let old = z[pos];
                counts[old] -= 1;
                for t in 0..k {
                    weights[t] = (counts[t] as f64 + alpha) * self.topic_word[t][wid];
                }
                let new = sample_discrete(&mut rng, &weights);
                counts[new] += 1;
                z[pos] = new;
            }
            if sweep >= burnin {
                for t in 0..k {
                    avg[t] += (counts[t] as f64 + alpha) / (n + self.alpha_total);
                }
            }
        }
        let total: f64 = avg.iter().sum();
        TopicVector {
            probs: avg.into_iter().map(|p| p / total).collect(),
        }
    }

    /// Word-level topic vector `t'_i`: the normalized topic-word column
    /// for the word. Out-of-vocabulary words get the uniform vector.
    pub fn word_topics(&self, word: &str) -> TopicVector {
        match self.vocab_index.get(word) {
            None => TopicVector::uniform(self.num_topics),
            Some(&wid) => {
                let col: Vec<f64> = self.topic_word.iter().map(|row| row[wid]).collect();
                let total: f64 = col.iter().sum();
                TopicVector {
                    probs: col.into_iter().map(|p| p / total).collect(),
                }
            }
        }
    }

    /// Persist as the documented flat text format: a `K V alpha_total
    /// beta seed` header, then one `word p_1 ... p_K` line per word.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(
            w,
            "{} {} {:.17e} {:.17e} {}",
            self.num_topics,
            self.vocab.len(),
            self.alpha_total,
            self.beta,
            self.seed
        )?;
        for (wid, word) in self.vocab.iter().enumerate() {
            write!(w, "{}", word)?;
            for t in 0..self.num_topics {
                write!(w, " {:.17e}", self.topic_word[t][wid])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TopicModel> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| TapaError::Parse("topic model file is empty".into()))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(TapaError::Parse(format!(
                "topic model header needs 5 fields, got {}",
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| TapaError::Parse(format!("bad {} in topic model header: {:?}", what, s)))
        };
        let k: usize = fields[0]
            .parse()
            .map_err(|_| TapaError::Parse(format!("bad K: {:?}", fields[0])))?;
        let v: usize = fields[1]
            .parse()
            .map_err(|_| TapaError::Parse(format!("bad V: {:?}", fields[1])))?;
        let alpha_total = parse(fields[2], "alpha_total")?;
        let beta = parse(fields[3], "beta")?;
        let seed: u64 = fields[4]
            .parse()
            .map_err(|_| TapaError::Parse(format!("bad seed: {:?}", fields[4])))?;

        let mut vocab = Vec::with_capacity(v);
        let mut vocab_index = HashMap::with_capacity(v);
        let mut topic_word = vec![vec![0.0; v]; k];
        for (i, line) in lines.enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let word = parts
                .next()
                .ok_or_else(|| TapaError::Parse(format!("empty line {} in topic model", i + 2)))?
                .to_string();
            let probs: Vec<f64> = parts
                .map(|s| parse(s, "probability"))
                .collect::<Result<_>>()?;
            if probs.len() != k {
                return Err(TapaError::Parse(format!(
                    "line {}: expected {} probabilities, got {}",
                    i + 2,
                    k,
                    probs.len()
                )));
            }
            let wid = vocab.len();
            vocab_index.insert(word.clone(), wid);
            vocab.push(word);
            for (t, p) in probs.into_iter().enumerate() {
                topic_word[t][wid] = p;
            }
        }
        if vocab.len() != v {
            return Err(TapaError::Parse(format!(
                "topic model declares {} words, found {}",
                v,
                vocab.len()
            )));
        }
        // Renormalize rows to absorb textual rounding.
        for row in topic_word.iter_mut() {
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return Err(TapaError::Parse("topic row with nonpositive mass".into()));
            }
            for p in row.iter_mut() {
                *p /= total;
            }
        }
        Ok(TopicModel {
            num_topics: k,
            topic_word,
            alpha_total,
            beta,
            vocab,
            vocab_index,
            seed,
        })
    }
}

/// Combine word-level and document-level topic vectors per the configured
/// setting. The `word+doc` product is deliberately not renormalized.
pub fn fuse_topics(
    word_vec: &TopicVector,
    doc_vec: &TopicVector,
    setting: TopicSetting,
) -> Result<TopicVector> {
    match setting {
        TopicSetting::Word => Ok(word_vec.clone()),
        TopicSetting::WordDoc => {
            if word_vec.len() != doc_vec.len() {
                return Err(TapaError::Dimension(format!(
                    "fuse_topics: {} vs {} topics",
                    word_vec.len(),
                    doc_vec.len()
                )));
            }
            Ok(TopicVector {
                probs: word_vec
                    .probs
                    .iter()
                    .zip(&doc_vec.probs)
                    .map(|(a, b)| a * b)
                    .collect(),
            })
        }
    }
}
