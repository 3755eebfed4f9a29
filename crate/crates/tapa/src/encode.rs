//! Encoding layer: embedding lookup, optional contextual channel, topic
//! lookup, topic fusion and the Siamese BiLSTM.

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ContextualVectors, PAD_INDEX, UNK_INDEX, Vocabulary};
use crate::error::{Result, TapaError};
use crate::lda::{TopicModel, TopicSetting, TopicVector};
use crate::tensor::{
    add, add_n, concat, hadamard, matvec, row, sigmoid, slice1d, stack, tanh, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Early,
    Late,
}

impl std::str::FromStr for Fusion {
    type Err = TapaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(Fusion::Early),
            "late" => Ok(Fusion::Late),
            other => Err(TapaError::Config(format!(
                "unknown fusion mode {:?} (expected early or late)",
                other
            ))),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Fusion::Early => write!(f, "early"),
            Fusion::Late => write!(f, "late"),
        }
    }
}

pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Load a text embedding file (`word v1 ... v_dim` per line) into a map
/// restricted to the given vocabulary.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts
            .next()
            .ok_or_else(|| TapaError::Parse(format!("embedding file line {}: empty", i + 1)))?;
        let idx = vocab.lookup(word);
        if idx == UNK_INDEX {
            continue;
        }
        let values: Vec<f64> = parts
            .map(|s| {
                s.parse().map_err(|_| {
                    TapaError::Parse(format!("embedding file line {}: bad float", i + 1))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(TapaError::Parse(format!(
                "embedding file line {}: expected {} dims, got {}",
                i + 1,
                dim,
                values.len()
            )));
        }
        rows.push((idx, values));
    }
    Ok(rows)
}

/// Trainable word embeddings with an optional precomputed contextual
/// channel. The padding row is all zeros and never updated.
pub struct EmbeddingTable {
    pub weights: Tensor, // [V, dim]
    pub dim: usize,
    pub contextual_dim: usize,
    pub pretrained_mask: Vec<bool>,
}

impl EmbeddingTable {
    pub fn new(
        vocab_size: usize,
        dim: usize,
        contextual_dim: usize,
        pretrained: &[(usize, Vec<f64>)],
        rng: &mut ChaCha8Rng,
    ) -> Result<EmbeddingTable> {
        let mut data: Vec<f64> = (0..vocab_size * dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
        if dim > 0 {
            for v in data[..dim].iter_mut() {
                *v = 0.0; // pad row frozen at zero
            }
        }
        let mut pretrained_mask = vec![false; vocab_size];
        for (idx, values) in pretrained {
            if *idx == PAD_INDEX {
                continue;
            }
            if values.len() != dim {
                return Err(TapaError::Dimension(format!(
                    "pretrained row has {} dims, table has {}",
                    values.len(),
                    dim
                )));
            }
            data[idx * dim..(idx + 1) * dim].copy_from_slice(values);
            pretrained_mask[*idx] = true;
        }
        Ok(EmbeddingTable {
            weights: Tensor::param(vec![vocab_size, dim], data)?,
            dim,
            contextual_dim,
            pretrained_mask,
        })
    }

    /// Combined embedding dimension `f`.
    pub fn combined_dim(&self) -> usize {
        self.dim + self.contextual_dim
    }

    /// Map token ids to a sequence of f-dim vectors `x_i`, concatenating
    /// the contextual channel when enabled. Padding positions map to
    /// constant zero vectors outside the gradient graph.
    pub fn embed(
        &self,
        ids: &[usize],
        mask: &[bool],
        contextual: Option<(&ContextualVectors, &str, u8)>,
        pair_id: &str,
    ) -> Result<Vec<Tensor>> {
        let f = self.combined_dim();
        let mut out = Vec::with_capacity(ids.len());
        for (t, (&id, &live)) in ids.iter().zip(mask).enumerate() {
            if !live {
                out.push(Tensor::zeros(vec![f]));
                continue;
            }
            let word_part = if self.dim > 0 {
                row(&self.weights, id)?
            } else {
                Tensor::zeros(vec![0])
            };
            let x = if self.contextual_dim > 0 {
                let (ctx, ctx_pair, side) = contextual.ok_or_else(|| {
                    TapaError::Data(format!(
                        "contextual channel enabled but no vectors for pair {}",
                        pair_id
                    ))
                })?;
                let vec = ctx.get(ctx_pair, side, t).ok_or_else(|| {
                    TapaError::Data(format!(
                        "missing contextual vector for pair {} side {} token {}",
                        ctx_pair, side, t
                    ))
                })?;
                concat(&word_part, &Tensor::new(vec![self.contextual_dim], vec.clone())?, 0)?
            } else {
                word_part
            };
            out.push(x);
        }
        Ok(out)
    }
}

/// Per-word topic vectors, optionally trainable ("topic update").
pub struct TopicLookup {
    pub table: Tensor, // [V, K]
    pub trainable: bool,
    pub num_topics: usize,
}

impl TopicLookup {
    /// Initialize from a fitted topic model: one simplex row per vocab
    /// word, uniform row for unknown, zero row for padding.
    pub fn from_model(vocab: &Vocabulary, model: &TopicModel, trainable: bool) -> Result<TopicLookup> {
        let k = model.num_topics;
        let v = vocab.len();
        let mut data = vec![0.0; v * k];
        for t in 0..k {
            data[UNK_INDEX * k + t] = 1.0 / k as f64;
        }
        for (i, word) in vocab.words().iter().enumerate() {
            let idx = i + 2;
            let tv = model.word_topics(word);
            data[idx * k..(idx + 1) * k].copy_from_slice(&tv.probs);
        }
        let table = if trainable {
            Tensor::param(vec![v, k], data)?
        } else {
            Tensor::new(vec![v, k], data)?
        };
        Ok(TopicLookup {
            table,
            trainable,
            num_topics: k,
        })
    }

    /// Topic vector `t_i` for one position, fused with the cached
    /// document vector per the configured setting. Masked positions give
    /// constant zero vectors.
    pub fn topic_vec(
        &self,
        id: usize,
        live: bool,
        setting: TopicSetting,
        doc: Option<&TopicVector>,
    ) -> Result<Tensor> {
        let k = self.num_topics;
        if !live {
            return Ok(Tensor::zeros(vec![k]));
        }
        let word_vec = row(&self.table, id)?;
        match setting {
            TopicSetting::Word => Ok(word_vec),
            TopicSetting::WordDoc => {
                let doc = doc.ok_or_else(|| {
                    TapaError::Contract("word+doc setting requires a cached document vector".into())
                })?;
                if doc.len() != k {
                    return Err(TapaError::Dimension(format!(
                        "document topic vector has {} topics, lookup has {}",
                        doc.len(),
                        k
                    )));
                }
                // t_D is a constant factor; only the word row trains.
                hadamard(&word_vec, &Tensor::new(vec![k], doc.probs.clone())?)
            }
        }
    }
}

/// Early fusion: per-position concatenation of embeddings and topic
/// vectors.
pub fn fuse_early(xs: &[Tensor], ts: &[Tensor]) -> Result<Vec<Tensor>> {
    if xs.len() != ts.len() {
        return Err(TapaError::Dimension(format!(
            "fuse_early: {} embedding positions vs {} topic positions",
            xs.len(),
            ts.len()
        )));
    }
    xs.iter().zip(ts).map(|(x, t)| concat(x, t, 0)).collect()
}

/// Late fusion: stack per-token topic vectors into the TL/TR matrices.
pub fn topic_matrices(
    t1: &[Tensor],
    t2: &[Tensor],
    fusion: Fusion,
) -> Result<(Tensor, Tensor)> {
    if fusion != Fusion::Late {
        return Err(TapaError::Contract(
            "topic_matrices is only valid in late-fusion mode".into(),
        ));
    }
    Ok((stack(t1)?, stack(t2)?))
}

/// One direction of LSTM weights: gates ordered input, forget, cell,
/// output in a single `[4h, *]` block.
pub struct LstmDirection {
    pub w: Tensor, // [4h, input_dim]
    pub u: Tensor, // [4h, h]
    pub b: Tensor, // [4h]
}

impl LstmDirection {
    fn new(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<LstmDirection> {
        let w = Tensor::param(
            vec![4 * hidden, input_dim],
            xavier_uniform(rng, input_dim, hidden, 4 * hidden * input_dim),
        )?;
        let u = Tensor::param(
            vec![4 * hidden, hidden],
            xavier_uniform(rng, hidden, hidden, 4 * hidden * hidden),
        )?;
        // forget-gate bias +1.0
        let mut bias = vec![0.0; 4 * hidden];
        for v in bias[hidden..2 * hidden].iter_mut() {
            *v = 1.0;
        }
        let b = Tensor::param(vec![4 * hidden], bias)?;
        Ok(LstmDirection { w, u, b })
    }
}

/// Shared-weight bidirectional LSTM; the same parameter set encodes both
/// questions (Siamese).
pub struct BiLstm {
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
    pub input_dim: usize,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<BiLstm> {
        Ok(BiLstm {
            fwd: LstmDirection::new(input_dim, hidden, rng)?,
            bwd: LstmDirection::new(input_dim, hidden, rng)?,
            input_dim,
            hidden,
        })
    }

    /// Output dimension d = 2h.
    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    fn run_direction(
        &self,
        dir: &LstmDirection,
        xs: &[Tensor],
        mask: &[bool],
        reverse: bool,
    ) -> Result<Vec<Tensor>> {
        let h = self.hidden;
        let mut hidden_state = Tensor::zeros(vec![h]);
        let mut cell = Tensor::zeros(vec![h]);
        let mut out: Vec<Option<Tensor>> = vec![None; xs.len()];
        let order: Vec<usize> = if reverse {
            (0..xs.len()).rev().collect()
        } else {
            (0..xs.len()).collect()
        };
        for t in order {
            if !mask[t] {
                // state carries over unchanged through masked positions
                out[t] = Some(Tensor::zeros(vec![h]));
                continue;
            }
            let gates = add_n(&[
                matvec(&dir.w, &xs[t])?,
                matvec(&dir.u, &hidden_state)?,
                dir.b.clone(),
            ])?;
            let i = sigmoid(&slice1d(&gates, 0, h)?);
            let f = sigmoid(&slice1d(&gates, h, h)?);
            let g = tanh(&slice1d(&gates, 2 * h, h)?);
            let o = sigmoid(&slice1d(&gates, 3 * h, h)?);
            cell = add(&hadamard(&f, &cell)?, &hadamard(&i, &g)?)?;
            hidden_state = hadamard(&o, &tanh(&cell))?;
            out[t] = Some(hidden_state.clone());
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }

    /// Encode a sequence; masked positions yield zero vectors and do not
    /// advance the recurrent state.
    pub fn encode(&self, xs: &[Tensor], mask: &[bool]) -> Result<Vec<Tensor>> {
        if xs.len() != mask.len() {
            return Err(TapaError::Contract(format!(
                "bilstm_encode: {} inputs vs {} mask entries",
                xs.len(),
                mask.len()
            )));
        }
        for x in xs {
            if x.shape() != vec![self.input_dim] {
                return Err(TapaError::Dimension(format!(
                    "bilstm_encode: input shape {:?}, expected [{}]",
                    x.shape(),
                    self.input_dim
                )));
            }
        }
        let forward = self.run_direction(&self.fwd, xs, mask, false)?;
        let backward = self.run_direction(&self.bwd, xs, mask, true)?;
        forward
            .iter()
            .zip(&backward)
            .zip(mask)
            .map(|((f, b), &live)| {
                if live {
                    concat(f, b, 0)
                } else {
                    Ok(Tensor::zeros(vec![2 * self.hidden]))
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, tokenize, QuestionPair, Split};
    use crate::lda::fit_gibbs;
    use crate::tensor::sum;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_vocab() -> Vocabulary {
        let pair = QuestionPair {
            id: "p".into(),
            q1_tokens: tokenize("alpha beta gamma delta"),
            q2_tokens: tokenize("beta epsilon"),
            label: 0,
            split: Split::Train,
        };
        build_vocab(&[pair], 1)
    }

    #[test]
    fn embed_dims_and_padding() {
        let vocab = small_vocab();
        let table = EmbeddingTable::new(vocab.len(), 5, 0, &[], &mut rng(1)).unwrap();
        assert_eq!(table.combined_dim(), 5);
        let xs = table
            .embed(&[2, 3, 0], &[true, true, false], None, "p")
            .unwrap();
        assert_eq!(xs[0].shape(), vec![5]);
        assert_eq!(xs[2].data(), vec![0.0; 5]);
        assert!(!xs[2].requires_grad());
    }

    #[test]
    fn combined_dim_with_contextual_channel() {
        let vocab = small_vocab();
        let table = EmbeddingTable::new(vocab.len(), 300, 1024, &[], &mut rng(1)).unwrap();
        assert_eq!(table.combined_dim(), 1324);
        let zero_dim = EmbeddingTable::new(vocab.len(), 4, 0, &[], &mut rng(1)).unwrap();
        assert_eq!(zero_dim.combined_dim(), 4);
    }

    #[test]
    fn missing_contextual_vector_names_pair_and_token() {
        let vocab = small_vocab();
        let table = EmbeddingTable::new(vocab.len(), 3, 2, &[], &mut rng(1)).unwrap();
        let ctx = ContextualVectors::default();
        let err = table
            .embed(&[2, 3], &[true, true], Some((&ctx, "pair7", 1)), "pair7")
            .unwrap_err();
        match err {
            TapaError::Data(msg) => {
                assert!(msg.contains("pair7") && msg.contains("token 0"), "{msg}")
            }
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn pad_row_is_zero() {
        let vocab = small_vocab();
        let table = EmbeddingTable::new(vocab.len(), 4, 0, &[], &mut rng(3)).unwrap();
        assert_eq!(table.weights.data()[..4], [0.0; 4]);
    }

    #[test]
    fn pretrained_rows_marked() {
        let vocab = small_vocab();
        let pre = vec![(2usize, vec![9.0, 8.0, 7.0])];
        let table = EmbeddingTable::new(vocab.len(), 3, 0, &pre, &mut rng(3)).unwrap();
        assert!(table.pretrained_mask[2]);
        assert!(!table.pretrained_mask[3]);
        assert_eq!(table.weights.data()[6..9], [9.0, 8.0, 7.0]);
    }

    fn toy_model(vocab: &Vocabulary) -> crate::lda::TopicModel {
        let docs: Vec<Vec<String>> = vocab
            .words()
            .iter()
            .map(|w| vec![w.clone(), w.clone()])
            .collect();
        fit_gibbs(&docs, 3, 1.0, 0.01, 10, 0).unwrap()
    }

    #[test]
    fn topic_lookup_rows_initialized_on_simplex() {
        let vocab = small_vocab();
        let model = toy_model(&vocab);
        let lookup = TopicLookup::from_model(&vocab, &model, true).unwrap();
        let data = lookup.table.data();
        let k = lookup.num_topics;
        // pad row zero
        assert_eq!(&data[..k], &vec![0.0; k][..]);
        // unk row uniform
        for t in 0..k {
            assert!((data[k + t] - 1.0 / k as f64).abs() < 1e-12);
        }
        // word rows on the simplex
        for idx in 2..vocab.len() {
            let s: f64 = data[idx * k..(idx + 1) * k].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn static_lookup_takes_no_gradient() {
        let vocab = small_vocab();
        let model = toy_model(&vocab);
        let lookup = TopicLookup::from_model(&vocab, &model, false).unwrap();
        let t = lookup
            .topic_vec(2, true, TopicSetting::Word, None)
            .unwrap();
        assert!(!t.requires_grad());
        let trainable = TopicLookup::from_model(&vocab, &model, true).unwrap();
        let t = trainable
            .topic_vec(2, true, TopicSetting::Word, None)
            .unwrap();
        assert!(t.requires_grad());
    }

    #[test]
    fn fuse_early_widths() {
        let xs = vec![Tensor::zeros(vec![4]), Tensor::zeros(vec![4])];
        let ts = vec![Tensor::zeros(vec![3]), Tensor::zeros(vec![3])];
        let e = fuse_early(&xs, &ts).unwrap();
        assert_eq!(e[0].shape(), vec![7]);
        assert!(matches!(
            fuse_early(&xs, &ts[..1]),
            Err(TapaError::Dimension(_))
        ));
    }

    #[test]
    fn topic_matrices_mode_contract() {
        let t1 = vec![Tensor::zeros(vec![5]); 3];
        let t2 = vec![Tensor::zeros(vec![5]); 2];
        let (tl, tr) = topic_matrices(&t1, &t2, Fusion::Late).unwrap();
        assert_eq!(tl.shape(), vec![3, 5]);
        assert_eq!(tr.shape(), vec![2, 5]);
        assert!(matches!(
            topic_matrices(&t1, &t2, Fusion::Early),
            Err(TapaError::Contract(_))
        ));
    }

    #[test]
    fn bilstm_zero_input_zero_bias_is_zero() {
        let mut r = rng(5);
        let lstm = BiLstm::new(3, 4, &mut r).unwrap();
        // zero out biases (forget bias is +1 by default)
        lstm.fwd.b.set_data(vec![0.0; 16]);
        lstm.bwd.b.set_data(vec![0.0; 16]);
        let xs = vec![Tensor::zeros(vec![3]); 2];
        let hs = lstm.encode(&xs, &[true, true]).unwrap();
        for h in hs {
            assert_eq!(h.data(), vec![0.0; 8]);
        }
    }

    #[test]
    fn bilstm_output_shape() {
        let mut r = rng(6);
        let lstm = BiLstm::new(5, 4, &mut r).unwrap();
        let xs: Vec<Tensor> = (0..3)
            .map(|i| Tensor::new(vec![5], vec![0.1 * i as f64; 5]).unwrap())
            .collect();
        let hs = lstm.encode(&xs, &[true; 3]).unwrap();
        assert_eq!(hs.len(), 3);
        assert_eq!(hs[0].shape(), vec![8]);
    }

    /// Step-by-step scalar LSTM oracle for one direction.
    fn scalar_lstm_oracle(
        w: &[f64],
        u: &[f64],
        b: &[f64],
        xs: &[Vec<f64>],
        input_dim: usize,
        h: usize,
    ) -> Vec<Vec<f64>> {
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        let mut out = Vec::new();
        for x in xs {
            let mut gates = vec![0.0; 4 * h];
            for r_ in 0..4 * h {
                let mut acc = b[r_];
                for c in 0..input_dim {
                    acc += w[r_ * input_dim + c] * x[c];
                }
                for c in 0..h {
                    acc += u[r_ * h + c] * hs[c];
                }
                gates[r_] = acc;
            }
            let mut new_h = vec![0.0; h];
            let mut new_c = vec![0.0; h];
            for j in 0..h {
                let i = sig(gates[j]);
                let f = sig(gates[h + j]);
                let g = gates[2 * h + j].tanh();
                let o = sig(gates[3 * h + j]);
                new_c[j] = f * cs[j] + i * g;
                new_h[j] = o * new_c[j].tanh();
            }
            hs = new_h;
            cs = new_c;
            out.push(hs.clone());
        }
        out
    }

    #[test]
    fn bilstm_matches_scalar_oracle() {
        let mut r = rng(7);
        let (input_dim, h) = (3, 4);
        let lstm = BiLstm::new(input_dim, h, &mut r).unwrap();
        let xs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..input_dim).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let tensors: Vec<Tensor> = xs
            .iter()
            .map(|v| Tensor::new(vec![input_dim], v.clone()).unwrap())
            .collect();
        let got = lstm.encode(&tensors, &[true; 3]).unwrap();

        let fwd = scalar_lstm_oracle(
            &lstm.fwd.w.data(),
            &lstm.fwd.u.data(),
            &lstm.fwd.b.data(),
            &xs,
            input_dim,
            h,
        );
        let rev_inputs: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let bwd_rev = scalar_lstm_oracle(
            &lstm.bwd.w.data(),
            &lstm.bwd.u.data(),
            &lstm.bwd.b.data(),
            &rev_inputs,
            input_dim,
            h,
        );
        for t in 0..3 {
            let want: Vec<f64> = fwd[t]
                .iter()
                .chain(&bwd_rev[2 - t])
                .cloned()
                .collect();
            for (a, b) in got[t].data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn siamese_encoding_is_identical_across_slots() {
        let mut r = rng(8);
        let lstm = BiLstm::new(4, 3, &mut r).unwrap();
        let xs: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::new(vec![4], (0..4).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let h1 = lstm.encode(&xs, &[true; 3]).unwrap();
        let h2 = lstm.encode(&xs, &[true; 3]).unwrap();
        for (a, b) in h1.iter().zip(&h2) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn masked_positions_are_zero_and_state_carries_over() {
        let mut r = rng(9);
        let lstm = BiLstm::new(2, 3, &mut r).unwrap();
        let x0 = Tensor::new(vec![2], vec![0.5, -0.3]).unwrap();
        let x1 = Tensor::new(vec![2], vec![0.2, 0.9]).unwrap();
        // padded version: extra trailing masked position
        let short = lstm.encode(&[x0.clone(), x1.clone()], &[true, true]).unwrap();
        let long = lstm
            .encode(
                &[x0, x1, Tensor::zeros(vec![2])],
                &[true, true, false],
            )
            .unwrap();
        assert_eq!(long[2].data(), vec![0.0; 6]);
        for t in 0..2 {
            for (a, b) in short[t].data().iter().zip(long[t].data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_weights_sum_gradients_from_both_branches() {
        let mut r = rng(10);
        let lstm = BiLstm::new(2, 2, &mut r).unwrap();
        let xa = Tensor::new(vec![2], vec![0.4, -0.6]).unwrap();
        let xb = Tensor::new(vec![2], vec![-0.2, 0.8]).unwrap();
        let run_pair = || {
            let ha = lstm.encode(std::slice::from_ref(&xa), &[true]).unwrap();
            let hb = lstm.encode(std::slice::from_ref(&xb), &[true]).unwrap();
            sum(&add(&sum(&ha[0]), &sum(&hb[0])).unwrap())
        };
        lstm.fwd.w.zero_grad();
        let loss = run_pair();
        loss.backward().unwrap();
        let both = lstm.fwd.w.grad().unwrap();

        lstm.fwd.w.zero_grad();
        let la = sum(&lstm.encode(std::slice::from_ref(&xa), &[true]).unwrap()[0]);
        la.backward().unwrap();
        let ga = lstm.fwd.w.grad().unwrap();
        lstm.fwd.w.zero_grad();
        let lb = sum(&lstm.encode(std::slice::from_ref(&xb), &[true]).unwrap()[0]);
        lb.backward().unwrap();
        let gb = lstm.fwd.w.grad().unwrap();
        for ((s, a), b) in both.iter().zip(&ga).zip(&gb) {
            assert!((s - (a + b)).abs() < 1e-12);
        }
    }
}
