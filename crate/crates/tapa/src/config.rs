//! Experiment configuration: a flat `key=value` file covering every
//! hyperparameter, round-trippable byte-for-byte through
//! serialize-then-parse.

use std::path::Path;

use crate::encode::Fusion;
use crate::error::{Result, TapaError};
use crate::lda::TopicSetting;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub fusion: Fusion,
    pub topic_setting: TopicSetting,
    pub use_topics: bool,
    pub num_topics: usize,
    pub alpha_total: f64,
    pub topic_update: bool,
    pub filters: (usize, usize),
    pub kernels: (usize, usize),
    pub hidden_layers: usize,
    pub hidden_widths: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: String,
    pub embedding: String,
    pub embedding_dim: usize,
    pub contextual_dim: usize,
    pub hidden_size: usize,
    pub max_len: usize,
    pub seed_init: u64,
    pub seed_shuffle: u64,
    pub seed_lda: u64,
    pub epochs: usize,
    pub patience: usize,
    pub lda_beta: f64,
    pub lda_iterations: usize,
    pub min_count: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            fusion: Fusion::Early,
            topic_setting: TopicSetting::Word,
            use_topics: true,
            num_topics: 70,
            alpha_total: 50.0,
            topic_update: true,
            filters: (4, 12),
            kernels: (2, 2),
            hidden_layers: 2,
            hidden_widths: vec![100, 50],
            batch_size: 64,
            learning_rate: 0.05,
            optimizer: "adadelta".into(),
            embedding: "random".into(),
            embedding_dim: 300,
            contextual_dim: 0,
            hidden_size: 100,
            max_len: 60,
            seed_init: 1,
            seed_shuffle: 2,
            seed_lda: 3,
            epochs: 50,
            patience: 5,
            lda_beta: 0.01,
            lda_iterations: 200,
            min_count: 1,
        }
    }
}

fn fmt_float(v: f64) -> String {
    // shortest representation that round-trips
    let s = format!("{}", v);
    if s.parse::<f64>() == Ok(v) {
        s
    } else {
        format!("{:e}", v)
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optimizer != "adadelta" {
            return Err(TapaError::Config(format!(
                "unsupported optimizer {:?}",
                self.optimizer
            )));
        }
        if self.hidden_widths.len() != self.hidden_layers {
            return Err(TapaError::Config(format!(
                "hidden_layers={} but hidden_widths has {} entries",
                self.hidden_layers,
                self.hidden_widths.len()
            )));
        }
        if (self.filters.0 == 0) != (self.filters.1 == 0) {
            return Err(TapaError::Config(format!(
                "filter counts must be both zero or both nonzero, got {:?}",
                self.filters
            )));
        }
        if self.num_topics == 0 {
            return Err(TapaError::Config("num_topics must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TapaError::Config("batch_size must be >= 1".into()));
        }
        if self.max_len == 0 {
            return Err(TapaError::Config("max_len must be >= 1".into()));
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("fusion", self.fusion.to_string());
        kv("topic_setting", self.topic_setting.to_string());
        kv("use_topics", self.use_topics.to_string());
        kv("num_topics", self.num_topics.to_string());
        kv("alpha_total", fmt_float(self.alpha_total));
        kv("topic_update", self.topic_update.to_string());
        kv("filters", format!("{},{}", self.filters.0, self.filters.1));
        kv("kernels", format!("{},{}", self.kernels.0, self.kernels.1));
        kv("hidden_layers", self.hidden_layers.to_string());
        kv(
            "hidden_widths",
            self.hidden_widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", fmt_float(self.learning_rate));
        kv("optimizer", self.optimizer.clone());
        kv("embedding", self.embedding.clone());
        kv("embedding_dim", self.embedding_dim.to_string());
        kv("contextual_dim", self.contextual_dim.to_string());
        kv("hidden_size", self.hidden_size.to_string());
        kv("max_len", self.max_len.to_string());
        kv("seed_init", self.seed_init.to_string());
        kv("seed_shuffle", self.seed_shuffle.to_string());
        kv("seed_lda", self.seed_lda.to_string());
        kv("epochs", self.epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("lda_beta", fmt_float(self.lda_beta));
        kv("lda_iterations", self.lda_iterations.to_string());
        kv("min_count", self.min_count.to_string());
        out
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TapaError::Config(format!("config line {}: expected key=value", i + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                TapaError::Config(format!("config line {}: bad {} value {:?}", i + 1, what, value))
            };
            let parse_pair = |value: &str, what: &str| -> Result<(usize, usize)> {
                let (a, b) = value
                    .split_once(',')
                    .ok_or_else(|| bad(what))?;
                Ok((
                    a.trim().parse().map_err(|_| bad(what))?,
                    b.trim().parse().map_err(|_| bad(what))?,
                ))
            };
            match key {
                "fusion" => cfg.fusion = value.parse()?,
                "topic_setting" => cfg.topic_setting = value.parse()?,
                "use_topics" => cfg.use_topics = value.parse().map_err(|_| bad(key))?,
                "num_topics" => cfg.num_topics = value.parse().map_err(|_| bad(key))?,
                "alpha_total" => cfg.alpha_total = value.parse().map_err(|_| bad(key))?,
                "topic_update" => cfg.topic_update = value.parse().map_err(|_| bad(key))?,
                "filters" => cfg.filters = parse_pair(value, key)?,
                "kernels" => cfg.kernels = parse_pair(value, key)?,
                "hidden_layers" => cfg.hidden_layers = value.parse().map_err(|_| bad(key))?,
                "hidden_widths" => {
                    cfg.hidden_widths = value
                        .split(',')
                        .map(|s| s.trim().parse().map_err(|_| bad(key)))
                        .collect::<Result<_>>()?
                }
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad(key))?,
                "learning_rate" => cfg.learning_rate = value.parse().map_err(|_| bad(key))?,
                "optimizer" => cfg.optimizer = value.to_string(),
                "embedding" => cfg.embedding = value.to_string(),
                "embedding_dim" => cfg.embedding_dim = value.parse().map_err(|_| bad(key))?,
                "contextual_dim" => cfg.contextual_dim = value.parse().map_err(|_| bad(key))?,
                "hidden_size" => cfg.hidden_size = value.parse().map_err(|_| bad(key))?,
                "max_len" => cfg.max_len = value.parse().map_err(|_| bad(key))?,
                "seed_init" => cfg.seed_init = value.parse().map_err(|_| bad(key))?,
                "seed_shuffle" => cfg.seed_shuffle = value.parse().map_err(|_| bad(key))?,
                "seed_lda" => cfg.seed_lda = value.parse().map_err(|_| bad(key))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad(key))?,
                "patience" => cfg.patience = value.parse().map_err(|_| bad(key))?,
                "lda_beta" => cfg.lda_beta = value.parse().map_err(|_| bad(key))?,
                "lda_iterations" => cfg.lda_iterations = value.parse().map_err(|_| bad(key))?,
                "min_count" => cfg.min_count = value.parse().map_err(|_| bad(key))?,
                other => {
                    return Err(TapaError::Config(format!(
                        "config line {}: unknown key {:?}",
                        i + 1,
                        other
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TapaError::Io(std::io::Error::new(e.kind(), format!("{}: {}", path.display(), e))))?;
        ExperimentConfig::parse(&text)
    }

    /// FNV-1a hash of the serialized config, for report provenance.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.serialize().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{:016x}", h)
    }
}
