//! Cross-entropy training with Adadelta, plus a seeded random
//! hyperparameter search.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::corpus::{make_batches, build_vocab, Batch, ContextualVectors, QuestionPair, Vocabulary};
use crate::encode::Fusion;
use crate::error::{Result, TapaError};
use crate::evaluate::f1_score;
use crate::lda::{fit_gibbs, TopicModel, TopicSetting};
use crate::model::{DocTopicCache, PairInput, TapaModel};
use crate::tensor::{add_n, scale, Tensor};

pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPS: f64 = 1e-6;

/// Adadelta accumulators: running averages of squared gradients and
/// squared updates per parameter.
pub struct AdadeltaState {
    pub rho: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    acc_grad: Vec<Vec<f64>>,
    acc_update: Vec<Vec<f64>>,
}

impl AdadeltaState {
    pub fn new(params: &[(String, Tensor)], learning_rate: f64) -> AdadeltaState {
        AdadeltaState {
            rho: ADADELTA_RHO,
            epsilon: ADADELTA_EPS,
            learning_rate,
            acc_grad: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            acc_update: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Apply one Adadelta update from the gradients currently stored on
    /// the parameters. A parameter with any non-finite gradient is
    /// skipped with a warning; a missing gradient leaves it unchanged.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        if params.len() != self.acc_grad.len() {
            return Err(TapaError::Dimension(format!(
                "adadelta_step: {} parameters, state tracks {}",
                params.len(),
                self.acc_grad.len()
            )));
        }
        for (i, (name, p)) in params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            if grad.len() != self.acc_grad[i].len() {
                return Err(TapaError::Dimension(format!(
                    "adadelta_step: gradient of {} has {} elements, state has {}",
                    name,
                    grad.len(),
                    self.acc_grad[i].len()
                )));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                eprintln!("warning: non-finite gradient for {}, skipping update", name);
                continue;
            }
            let mut data = p.data();
            for (j, &g) in grad.iter().enumerate() {
                let eg = &mut self.acc_grad[i][j];
                *eg = self.rho * *eg + (1.0 - self.rho) * g * g;
                let delta =
                    -((self.acc_update[i][j] + self.epsilon).sqrt() / (*eg + self.epsilon).sqrt())
                        * g;
                let eu = &mut self.acc_update[i][j];
                *eu = self.rho * *eu + (1.0 - self.rho) * delta * delta;
                data[j] += self.learning_rate * delta;
            }
            p.set_data(data);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub train_loss: f64,
    pub dev_f1: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub final_test_f1: Option<f64>,
}

pub struct TrainOutcome {
    pub model: TapaModel,
    pub vocab: Vocabulary,
    pub topic_model: Option<TopicModel>,
    pub doc_cache: DocTopicCache,
    pub history: TrainingHistory,
}

/// Mean cross-entropy over a batch.
pub fn loss_batch(
    model: &TapaModel,
    batch: &Batch,
    doc_cache: &DocTopicCache,
    contextual: Option<&ContextualVectors>,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(TapaError::Contract("loss_batch: empty batch".into()));
    }
    let mut losses = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let input = PairInput {
            pair_id: &batch.pair_ids[i],
            q1_ids: &batch.q1_ids[i],
            q1_mask: &batch.q1_mask[i],
            q2_ids: &batch.q2_ids[i],
            q2_mask: &batch.q2_mask[i],
            doc_topics: doc_cache.get(&batch.pair_ids[i]),
            contextual,
        };
        losses.push(model.loss(&input, batch.labels[i])?);
    }
    Ok(scale(&add_n(&losses)?, 1.0 / losses.len() as f64))
}

/// Predicted labels for a set of pairs, in pair order.
pub fn predict_pairs(
    model: &TapaModel,
    pairs: &[QuestionPair],
    vocab: &Vocabulary,
    doc_cache: &DocTopicCache,
    contextual: Option<&ContextualVectors>,
) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut preds = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    let batches = make_batches(pairs, vocab, model.config.batch_size, model.config.max_len, 0)?;
    let mut by_id: HashMap<String, (u8, u8)> = HashMap::new();
    for batch in &batches {
        for i in 0..batch.len() {
            let input = PairInput {
                pair_id: &batch.pair_ids[i],
                q1_ids: &batch.q1_ids[i],
                q1_mask: &batch.q1_mask[i],
                q2_ids: &batch.q2_ids[i],
                q2_mask: &batch.q2_mask[i],
                doc_topics: doc_cache.get(&batch.pair_ids[i]),
                contextual,
            };
            let logits = model.forward(&input)?;
            by_id.insert(
                batch.pair_ids[i].clone(),
                (crate::matching::predict(&logits), batch.labels[i]),
            );
        }
    }
    for pair in pairs {
        let (p, l) = by_id
            .get(pair.id.as_str())
            .copied()
            .ok_or_else(|| TapaError::Contract(format!("no prediction for pair {}", pair.id)))?;
        preds.push(p);
        labels.push(l);
    }
    Ok((preds, labels))
}

/// Compute and cache document topic vectors for every pair (both sides).
pub fn build_doc_cache(
    topic_model: &TopicModel,
    pair_sets: &[&[QuestionPair]],
) -> DocTopicCache {
    let mut cache = DocTopicCache::new();
    for pairs in pair_sets {
        for pair in *pairs {
            cache.insert(
                pair.id.clone(),
                (
                    topic_model.infer_doc(&pair.q1_tokens),
                    topic_model.infer_doc(&pair.q2_tokens),
                ),
            );
        }
    }
    cache
}

/// Fit the LDA topic model on the training questions (each question is
/// one document).
pub fn fit_topic_model(config: &ExperimentConfig, train: &[QuestionPair]) -> Result<TopicModel> {
    let docs: Vec<Vec<String>> = train
        .iter()
        .flat_map(|p| [p.q1_tokens.clone(), p.q2_tokens.clone()])
        .collect();
    fit_gibbs(
        &docs,
        config.num_topics,
        config.alpha_total,
        config.lda_beta,
        config.lda_iterations,
        config.seed_lda,
    )
}

/// Full training loop: epoch-shuffled batches, per-epoch dev F1, early
/// stopping on patience, best-dev parameters restored at the end.
pub fn train(
    config: &ExperimentConfig,
    train_pairs: &[QuestionPair],
    dev_pairs: &[QuestionPair],
    contextual: Option<&ContextualVectors>,
    pretrained: &[(usize, Vec<f64>)],
    topic_model: Option<TopicModel>,
    quiet: bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_pairs.is_empty() {
        return Err(TapaError::Data("train: empty training set".into()));
    }
    let vocab = build_vocab(train_pairs, config.min_count);
    let topic_model = if config.use_topics {
        Some(match topic_model {
            Some(m) => m,
            None => fit_topic_model(config, train_pairs)?,
        })
    } else {
        None
    };
    let doc_cache = match (&topic_model, config.topic_setting) {
        (Some(tm), TopicSetting::WordDoc) => build_doc_cache(tm, &[train_pairs, dev_pairs]),
        _ => DocTopicCache::new(),
    };
    let model = TapaModel::new(config, &vocab, topic_model.as_ref(), pretrained)?;
    let params = model.named_params();
    let topic_snapshot_before = model.topics.as_ref().map(|t| t.table.data());
    let mut optimizer = AdadeltaState::new(&params, config.learning_rate);

    let mut history = TrainingHistory::default();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_snapshot: Option<Vec<Vec<f64>>> = None;
    let mut since_best = 0usize;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let batches = make_batches(
            train_pairs,
            &vocab,
            config.batch_size,
            config.max_len,
            config.seed_shuffle.wrapping_add(epoch as u64),
        )?;
        let mut loss_sum = 0.0;
        let mut example_count = 0usize;
        for batch in &batches {
            model.zero_grads();
            let loss = loss_batch(&model, batch, &doc_cache, contextual)?;
            loss.backward()?;
            optimizer.step(&params)?;
            loss_sum += loss.item() * batch.len() as f64;
            example_count += batch.len();
        }
        let train_loss = loss_sum / example_count as f64;

        let dev_f1 = if dev_pairs.is_empty() {
            f64::NAN
        } else {
            let (preds, labels) = predict_pairs(&model, dev_pairs, &vocab, &doc_cache, contextual)?;
            f1_score(&preds, &labels)?.f1
        };
        let stats = EpochStats {
            train_loss,
            dev_f1,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        if !quiet {
            eprintln!(
                "epoch {:>3}  train_loss {:.6}  dev_f1 {:.4}  ({:.1}s)",
                epoch + 1,
                stats.train_loss,
                stats.dev_f1,
                stats.wall_secs
            );
        }
        history.epochs.push(stats);

        if dev_pairs.is_empty() {
            history.best_epoch = epoch;
            continue;
        }
        if dev_f1 > best_f1 {
            best_f1 = dev_f1;
            history.best_epoch = epoch;
            best_snapshot = Some(params.iter().map(|(_, p)| p.data()).collect());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    if let Some(snapshot) = best_snapshot {
        for ((_, p), data) in params.iter().zip(snapshot) {
            p.set_data(data);
        }
    }
    if let (Some(before), Some(topics)) = (topic_snapshot_before, model.topics.as_ref()) {
        if !config.topic_update {
            debug_assert_eq!(before, topics.table.data());
        }
    }

    Ok(TrainOutcome {
        model,
        vocab,
        topic_model,
        doc_cache,
        history,
    })
}

/// Candidate values for the seeded random hyperparameter search.
#[derive(Debug, Clone)]
pub struct SearchSpace {
    pub num_topics: (usize, usize),
    pub alpha_total: (f64, f64),
    pub fusion: Vec<Fusion>,
    pub topic_setting: Vec<TopicSetting>,
    pub topic_update: Vec<bool>,
    pub learning_rate: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            num_topics: (10, 100),
            alpha_total: (0.1, 50.0),
            fusion: vec![Fusion::Early, Fusion::Late],
            topic_setting: vec![TopicSetting::Word, TopicSetting::WordDoc],
            topic_update: vec![true, false],
            learning_rate: vec![0.05, 0.1],
        }
    }
}

impl SearchSpace {
    fn validate(&self) -> Result<()> {
        if self.fusion.is_empty()
            || self.topic_setting.is_empty()
            || self.topic_update.is_empty()
            || self.learning_rate.is_empty()
            || self.num_topics.0 > self.num_topics.1
            || self.alpha_total.0 > self.alpha_total.1
        {
            return Err(TapaError::Config("random_search: empty search space".into()));
        }
        Ok(())
    }

    pub fn sample(&self, base: &ExperimentConfig, rng: &mut ChaCha8Rng) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.num_topics = rng.gen_range(self.num_topics.0..=self.num_topics.1);
        cfg.alpha_total = if self.alpha_total.0 == self.alpha_total.1 {
            self.alpha_total.0
        } else {
            rng.gen_range(self.alpha_total.0..self.alpha_total.1)
        };
        cfg.fusion = self.fusion[rng.gen_range(0..self.fusion.len())];
        cfg.topic_setting = self.topic_setting[rng.gen_range(0..self.topic_setting.len())];
        cfg.topic_update = self.topic_update[rng.gen_range(0..self.topic_update.len())];
        cfg.learning_rate = self.learning_rate[rng.gen_range(0..self.learning_rate.len())];
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: usize,
    pub config: ExperimentConfig,
    pub dev_f1: f64,
}

/// Sample `trials` configurations uniformly from the space, train each,
/// and return the configuration with the best dev F1 (ties go to the
/// earlier trial).
pub fn random_search(
    space: &SearchSpace,
    base: &ExperimentConfig,
    trials: usize,
    seed: u64,
    train_pairs: &[QuestionPair],
    dev_pairs: &[QuestionPair],
    quiet: bool,
) -> Result<(ExperimentConfig, Vec<TrialResult>)> {
    space.validate()?;
    if trials == 0 {
        return Err(TapaError::Contract("random_search: trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::with_capacity(trials);
    let mut best: Option<usize> = None;
    for trial in 0..trials {
        let cfg = space.sample(base, &mut rng);
        let outcome = train(&cfg, train_pairs, dev_pairs, None, &[], None, quiet)?;
        let dev_f1 = outcome
            .history
            .epochs
            .get(outcome.history.best_epoch)
            .map(|e| e.dev_f1)
            .unwrap_or(f64::NAN);
        if !quiet {
            eprintln!("trial {:>2}  dev_f1 {:.4}", trial, dev_f1);
        }
        results.push(TrialResult {
            trial,
            config: cfg,
            dev_f1,
        });
        let better = match best {
            None => true,
            Some(b) => dev_f1 > results[b].dev_f1,
        };
        if better {
            best = Some(trial);
        }
    }
    let best = best.unwrap();
    Ok((results[best].config.clone(), results))
}
