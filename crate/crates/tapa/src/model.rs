//! Full model assembly: embeddings, topic fusion, Siamese BiLSTM,
//! affinity stack and CNN aggregation into two class logits.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::corpus::{ContextualVectors, Vocabulary};
use crate::encode::{fuse_early, topic_matrices, BiLstm, EmbeddingTable, Fusion, TopicLookup};
use crate::error::{Result, TapaError};
use crate::lda::{TopicModel, TopicVector};
use crate::matching::{affinity, stack_channels, topic_affinity, Aggregator, AffinityStack};
use crate::tensor::{softmax_crossentropy, stack, Tensor};

/// Per-pair document topic vectors (`t_D` for each side), cached at
/// preprocessing time and treated as constants during training.
pub type DocTopicCache = HashMap<String, (TopicVector, TopicVector)>;

/// One padded example handed to the model.
pub struct PairInput<'a> {
    pub pair_id: &'a str,
    pub q1_ids: &'a [usize],
    pub q1_mask: &'a [bool],
    pub q2_ids: &'a [usize],
    pub q2_mask: &'a [bool],
    pub doc_topics: Option<&'a (TopicVector, TopicVector)>,
    pub contextual: Option<&'a ContextualVectors>,
}

pub struct TapaModel {
    pub config: ExperimentConfig,
    pub embeddings: EmbeddingTable,
    pub topics: Option<TopicLookup>,
    pub encoder: BiLstm,
    pub aggregator: Aggregator,
}

impl TapaModel {
    /// Build a freshly initialized model. `topic_model` is required when
    /// the config uses topics.
    pub fn new(
        config: &ExperimentConfig,
        vocab: &Vocabulary,
        topic_model: Option<&TopicModel>,
        pretrained: &[(usize, Vec<f64>)],
    ) -> Result<TapaModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed_init);
        let embeddings = EmbeddingTable::new(
            vocab.len(),
            config.embedding_dim,
            config.contextual_dim,
            pretrained,
            &mut rng,
        )?;
        let topics = if config.use_topics {
            let model = topic_model.ok_or_else(|| {
                TapaError::Contract("config uses topics but no topic model was provided".into())
            })?;
            if model.num_topics != config.num_topics {
                return Err(TapaError::Config(format!(
                    "config expects {} topics, topic model has {}",
                    config.num_topics, model.num_topics
                )));
            }
            Some(TopicLookup::from_model(vocab, model, config.topic_update)?)
        } else {
            None
        };
        // early fusion widens the encoder input by K; late fusion keeps
        // it at f and adds a second affinity channel instead
        let f = embeddings.combined_dim();
        let encoder_input = match (config.fusion, config.use_topics) {
            (Fusion::Early, true) => f + config.num_topics,
            _ => f,
        };
        let encoder = BiLstm::new(encoder_input, config.hidden_size, &mut rng)?;
        let in_channels = if config.fusion == Fusion::Late && config.use_topics {
            2
        } else {
            1
        };
        let aggregator = Aggregator::new(
            in_channels,
            config.max_len,
            config.filters,
            config.kernels,
            &config.hidden_widths,
            &mut rng,
        )?;
        Ok(TapaModel {
            config: config.clone(),
            embeddings,
            topics,
            encoder,
            aggregator,
        })
    }

    /// Encoder input width (f for late fusion, f + f' for early fusion
    /// with topics).
    pub fn encoder_input_dim(&self) -> usize {
        self.encoder.input_dim
    }

    fn topic_sequence(
        &self,
        ids: &[usize],
        mask: &[bool],
        doc: Option<&TopicVector>,
    ) -> Result<Vec<Tensor>> {
        let lookup = self.topics.as_ref().expect("topic_sequence without topics");
        ids.iter()
            .zip(mask)
            .map(|(&id, &live)| lookup.topic_vec(id, live, self.config.topic_setting, doc))
            .collect()
    }

    /// Forward pass to the affinity stack, exposed for inspection dumps.
    pub fn affinity_stack(&self, input: &PairInput) -> Result<AffinityStack> {
        let ctx1 = input.contextual.map(|c| (c, input.pair_id, 1u8));
        let ctx2 = input.contextual.map(|c| (c, input.pair_id, 2u8));
        let x1 = self
            .embeddings
            .embed(input.q1_ids, input.q1_mask, ctx1, input.pair_id)?;
        let x2 = self
            .embeddings
            .embed(input.q2_ids, input.q2_mask, ctx2, input.pair_id)?;

        let (doc1, doc2) = match input.doc_topics {
            Some((d1, d2)) => (Some(d1), Some(d2)),
            None => (None, None),
        };
        let topics1 = if self.topics.is_some() {
            Some(self.topic_sequence(input.q1_ids, input.q1_mask, doc1)?)
        } else {
            None
        };
        let topics2 = if self.topics.is_some() {
            Some(self.topic_sequence(input.q2_ids, input.q2_mask, doc2)?)
        } else {
            None
        };

        let (e1, e2) = match (self.config.fusion, &topics1, &topics2) {
            (Fusion::Early, Some(t1), Some(t2)) => (fuse_early(&x1, t1)?, fuse_early(&x2, t2)?),
            _ => (x1, x2),
        };

        let h1 = self.encoder.encode(&e1, input.q1_mask)?;
        let h2 = self.encoder.encode(&e2, input.q2_mask)?;
        let l = stack(&h1)?;
        let r = stack(&h2)?;
        let a_emb = affinity(&l, &r, input.q1_mask, input.q2_mask)?;

        let a_topic = match (self.config.fusion, &topics1, &topics2) {
            (Fusion::Late, Some(t1), Some(t2)) => {
                let (tl, tr) = topic_matrices(t1, t2, Fusion::Late)?;
                Some(topic_affinity(
                    &tl,
                    &tr,
                    input.q1_mask,
                    input.q2_mask,
                    Fusion::Late,
                )?)
            }
            _ => None,
        };
        stack_channels(&a_emb, a_topic.as_ref(), self.config.max_len)
    }

    pub fn forward(&self, input: &PairInput) -> Result<Tensor> {
        let stack_in = self.affinity_stack(input)?;
        self.aggregator.aggregate(&stack_in)
    }

    pub fn loss(&self, input: &PairInput, label: u8) -> Result<Tensor> {
        softmax_crossentropy(&self.forward(input)?, label)
    }

    /// Trainable parameters in a fixed, deterministic order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut params = Vec::new();
        if self.embeddings.dim > 0 {
            params.push(("embeddings".to_string(), self.embeddings.weights.clone()));
        }
        if let Some(topics) = &self.topics {
            if topics.trainable {
                params.push(("topic_lookup".to_string(), topics.table.clone()));
            }
        }
        for (prefix, dir) in [("lstm_fwd", &self.encoder.fwd), ("lstm_bwd", &self.encoder.bwd)] {
            params.push((format!("{prefix}.w"), dir.w.clone()));
            params.push((format!("{prefix}.u"), dir.u.clone()));
            params.push((format!("{prefix}.b"), dir.b.clone()));
        }
        for (name, conv) in [("conv1", &self.aggregator.conv1), ("conv2", &self.aggregator.conv2)]
        {
            if let Some(layer) = conv {
                params.push((format!("{name}.filters"), layer.filters.clone()));
                params.push((format!("{name}.bias"), layer.bias.clone()));
            }
        }
        for (i, layer) in self.aggregator.hidden.iter().enumerate() {
            params.push((format!("hidden{}.w", i), layer.w.clone()));
            params.push((format!("hidden{}.b", i), layer.b.clone()));
        }
        params.push(("out.w".to_string(), self.aggregator.out.w.clone()));
        params.push(("out.b".to_string(), self.aggregator.out.b.clone()));
        params
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }
}

/// Numeric-contract check on a small fixed model: 8-dim embeddings,
/// 4 topics, hidden size 6, filters (2,3), 2x2 kernels, one pair with
/// sequence lengths 4 and 5. Compares analytic gradients of the loss
/// against central finite differences over every trainable parameter.
pub fn toy_gradcheck(fusion: Fusion, epsilon: f64) -> Result<crate::tensor::GradCheckReport> {
    use crate::corpus::{build_vocab, tokenize, QuestionPair, Split};
    use crate::lda::fit_gibbs;

    let q1 = tokenize("red green blue amber");
    let q2 = tokenize("green blue amber red violet");
    let pair = QuestionPair {
        id: "toy-0".into(),
        q1_tokens: q1.clone(),
        q2_tokens: q2.clone(),
        label: 1,
        split: Split::Train,
    };
    let vocab = build_vocab(std::slice::from_ref(&pair), 1);
    let docs = vec![q1.clone(), q2.clone()];
    let tm = fit_gibbs(&docs, 4, 2.0, 0.01, 30, 11)?;
    let config = ExperimentConfig {
        embedding_dim: 8,
        num_topics: 4,
        alpha_total: 2.0,
        hidden_size: 6,
        filters: (2, 3),
        kernels: (2, 2),
        hidden_layers: 2,
        hidden_widths: vec![8, 4],
        max_len: 12,
        fusion,
        seed_init: 5,
        seed_lda: 11,
        ..ExperimentConfig::default()
    };
    let model = TapaModel::new(&config, &vocab, Some(&tm), &[])?;
    let q1_ids: Vec<usize> = q1.iter().map(|t| vocab.lookup(t)).collect();
    let q2_ids: Vec<usize> = q2.iter().map(|t| vocab.lookup(t)).collect();
    let q1_mask = vec![true; q1_ids.len()];
    let q2_mask = vec![true; q2_ids.len()];
    let params = model.named_params();
    crate::tensor::grad_check(
        || {
            model.loss(
                &PairInput {
                    pair_id: "toy-0",
                    q1_ids: &q1_ids,
                    q1_mask: &q1_mask,
                    q2_ids: &q2_ids,
                    q2_mask: &q2_mask,
                    doc_topics: None,
                    contextual: None,
                },
                1,
            )
        },
        &params,
        epsilon,
    )
}
