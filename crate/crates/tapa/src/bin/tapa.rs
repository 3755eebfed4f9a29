//! Command-line driver: LDA fitting/inference, training, evaluation,
//! ablation, hyperparameter search, gradient checking and synthetic data
//! generation.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 failed
//! numeric contract.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tapa::checkpoint;
use tapa::config::ExperimentConfig;
use tapa::corpus::{load_pairs, ContextualVectors, DataFormat, QuestionPair, Vocabulary};
use tapa::encode::{load_embeddings, Fusion};
use tapa::evaluate::{ablation_tsv, report_json, run_ablation};
use tapa::lda::{fit_gibbs, TopicModel, TopicSetting};
use tapa::matching::dump_affinity;
use tapa::model::{toy_gradcheck, PairInput, TapaModel};
use tapa::synthetic::{make_synthetic, write_pairs, SyntheticKind};
use tapa::train::{build_doc_cache, predict_pairs, random_search, train, SearchSpace};
use tapa::{Result, TapaError};

const TOY_GRADCHECK_EPSILON: f64 = 1e-4;
const TOY_GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "tapa", version, about = "Topic-aware question paraphrase identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an LDA topic model on the questions of a pair file
    LdaFit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "quora_tsv")]
        format: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Infer the topic distribution of a piece of text
    LdaInfer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text: String,
    },
    /// Train a model and write checkpoint + artifacts to a directory
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long, default_value = "quora_tsv")]
        format: String,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        contextual: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a trained model directory on a pair file
    Eval {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "quora_tsv")]
        format: String,
        #[arg(long)]
        contextual: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        /// Dump per-pair affinity channel TSVs into this directory
        #[arg(long)]
        dump_affinity: Option<PathBuf>,
    },
    /// Run the four-row ablation (full, -topics, -contextual, late fusion)
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "quora_tsv")]
        format: String,
        #[arg(long)]
        contextual: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Random hyperparameter search over topics/fusion/learning rate
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long, default_value = "quora_tsv")]
        format: String,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Verify analytic gradients against finite differences
    Gradcheck {
        /// Run the built-in small model in both fusion modes
        #[arg(long)]
        toy: bool,
        #[arg(long)]
        json: bool,
    },
    /// Generate a deterministic synthetic dataset
    MakeSynthetic {
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 400)]
        dev: usize,
        #[arg(long, default_value_t = 400)]
        test: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_split(path: &Path, format: &str) -> Result<Vec<QuestionPair>> {
    load_pairs(path, format.parse::<DataFormat>()?)
}

fn load_context(
    path: &Option<PathBuf>,
    config: &ExperimentConfig,
) -> Result<Option<ContextualVectors>> {
    match path {
        None => Ok(None),
        Some(p) => {
            if config.contextual_dim == 0 {
                return Err(TapaError::Config(
                    "--contextual given but contextual_dim is 0".into(),
                ));
            }
            Ok(Some(ContextualVectors::load(p, config.contextual_dim)?))
        }
    }
}

fn write_manifest(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    let manifest = format!(
        "tapa_version={}\nconfig_fingerprint={}\n\n{}",
        env!("CARGO_PKG_VERSION"),
        config.fingerprint(),
        config.serialize()
    );
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Reload the artifacts written by `train` into a usable model.
fn load_model_dir(
    dir: &Path,
) -> Result<(ExperimentConfig, Vocabulary, Option<TopicModel>, TapaModel)> {
    let config = ExperimentConfig::load(&dir.join("config.cfg"))?;
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    let topic_model = if config.use_topics {
        Some(TopicModel::load(&dir.join("topics.lda"))?)
    } else {
        None
    };
    let model = TapaModel::new(&config, &vocab, topic_model.as_ref(), &[])?;
    checkpoint::restore(&dir.join("model.ckpt"), &model.named_params())?;
    Ok((config, vocab, topic_model, model))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::LdaFit {
            data,
            format,
            config,
            out,
        } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let pairs = load_split(&data, &format)?;
            let docs: Vec<Vec<String>> = pairs
                .iter()
                .flat_map(|p| [p.q1_tokens.clone(), p.q2_tokens.clone()])
                .collect();
            let model = fit_gibbs(
                &docs,
                cfg.num_topics,
                cfg.alpha_total,
                cfg.lda_beta,
                cfg.lda_iterations,
                cfg.seed_lda,
            )?;
            model.save(&out)?;
            println!(
                "fit {} topics over {} documents, saved to {}",
                cfg.num_topics,
                docs.len(),
                out.display()
            );
        }
        Command::LdaInfer { model, text } => {
            let model = TopicModel::load(&model)?;
            let tokens = tapa::corpus::tokenize(&text);
            let dist = model.infer_doc(&tokens);
            let line: Vec<String> = dist.probs.iter().map(|p| format!("{:.6}", p)).collect();
            println!("{}", line.join("\t"));
        }
        Command::Train {
            config,
            train: train_path,
            dev,
            format,
            embeddings,
            contextual,
            out,
            quiet,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let train_pairs = load_split(&train_path, &format)?;
            let dev_pairs = load_split(&dev, &format)?;
            let ctx = load_context(&contextual, &cfg)?;
            std::fs::create_dir_all(&out)?;
            // embeddings file needs the vocab, which train builds again;
            // build it once here for the pretrained rows
            let vocab = tapa::corpus::build_vocab(&train_pairs, cfg.min_count);
            let pretrained = match &embeddings {
                Some(p) => load_embeddings(p, &vocab, cfg.embedding_dim)?,
                None => Vec::new(),
            };
            let outcome = train(
                &cfg,
                &train_pairs,
                &dev_pairs,
                ctx.as_ref(),
                &pretrained,
                None,
                quiet,
            )?;
            std::fs::write(out.join("config.cfg"), cfg.serialize())?;
            outcome.vocab.save(&out.join("vocab.txt"))?;
            if let Some(tm) = &outcome.topic_model {
                tm.save(&out.join("topics.lda"))?;
            }
            checkpoint::save(&out.join("model.ckpt"), &outcome.model.named_params())?;
            write_manifest(&out, &cfg)?;
            let mut history = String::from("epoch\ttrain_loss\tdev_f1\twall_secs\n");
            for (i, e) in outcome.history.epochs.iter().enumerate() {
                history.push_str(&format!(
                    "{}\t{:.6}\t{:.4}\t{:.2}\n",
                    i + 1,
                    e.train_loss,
                    e.dev_f1,
                    e.wall_secs
                ));
            }
            std::fs::write(out.join("history.tsv"), history)?;
            let best = &outcome.history.epochs[outcome.history.best_epoch];
            println!(
                "trained {} epochs, best dev F1 {:.4} at epoch {}, artifacts in {}",
                outcome.history.epochs.len(),
                best.dev_f1,
                outcome.history.best_epoch + 1,
                out.display()
            );
        }
        Command::Eval {
            model_dir,
            data,
            format,
            contextual,
            json,
            dump_affinity: dump_dir,
        } => {
            let (cfg, vocab, topic_model, model) = load_model_dir(&model_dir)?;
            let pairs = load_split(&data, &format)?;
            let ctx = load_context(&contextual, &cfg)?;
            let doc_cache = match (&topic_model, cfg.topic_setting) {
                (Some(tm), TopicSetting::WordDoc) => build_doc_cache(tm, &[&pairs]),
                _ => Default::default(),
            };
            if let Some(dir) = &dump_dir {
                let batches =
                    tapa::corpus::make_batches(&pairs, &vocab, cfg.batch_size, cfg.max_len, 0)?;
                for batch in &batches {
                    for i in 0..batch.len() {
                        let input = PairInput {
                            pair_id: &batch.pair_ids[i],
                            q1_ids: &batch.q1_ids[i],
                            q1_mask: &batch.q1_mask[i],
                            q2_ids: &batch.q2_ids[i],
                            q2_mask: &batch.q2_mask[i],
                            doc_topics: doc_cache.get(&batch.pair_ids[i]),
                            contextual: ctx.as_ref(),
                        };
                        let stack = model.affinity_stack(&input)?;
                        dump_affinity(&stack, dir, &batch.pair_ids[i])?;
                    }
                }
            }
            let (preds, labels) = predict_pairs(&model, &pairs, &vocab, &doc_cache, ctx.as_ref())?;
            let report = tapa::evaluate::f1_score(&preds, &labels)?;
            if json {
                print!("{}", report_json(&report, &cfg));
            } else {
                println!(
                    "P {:.4}  R {:.4}  F1 {:.4}  acc {:.4}  (tp {} fp {} tn {} fn {})",
                    report.precision,
                    report.recall,
                    report.f1,
                    report.accuracy,
                    report.true_positives,
                    report.false_positives,
                    report.true_negatives,
                    report.false_negatives
                );
            }
        }
        Command::Ablate {
            config,
            train: train_path,
            dev,
            test,
            format,
            contextual,
            embeddings,
            out,
            quiet,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let train_pairs = load_split(&train_path, &format)?;
            let dev_pairs = load_split(&dev, &format)?;
            let test_pairs = load_split(&test, &format)?;
            let ctx = load_context(&contextual, &cfg)?;
            let vocab = tapa::corpus::build_vocab(&train_pairs, cfg.min_count);
            let pretrained = match &embeddings {
                Some(p) => load_embeddings(p, &vocab, cfg.embedding_dim)?,
                None => Vec::new(),
            };
            let rows = run_ablation(
                &cfg,
                &train_pairs,
                &dev_pairs,
                &test_pairs,
                ctx.as_ref(),
                &pretrained,
                quiet,
            )?;
            let table = ablation_tsv(&rows);
            match out {
                Some(p) => std::fs::write(p, &table)?,
                None => print!("{}", table),
            }
        }
        Command::Search {
            config,
            train: train_path,
            dev,
            format,
            trials,
            seed,
            out,
            quiet,
        } => {
            let base = ExperimentConfig::load(&config)?;
            let train_pairs = load_split(&train_path, &format)?;
            let dev_pairs = load_split(&dev, &format)?;
            let (best, results) = random_search(
                &SearchSpace::default(),
                &base,
                trials,
                seed,
                &train_pairs,
                &dev_pairs,
                quiet,
            )?;
            for r in &results {
                println!(
                    "trial {:>2}  topics {:>3}  alpha {:>7.3}  {}  {}  update {}  lr {:.3}  dev_f1 {:.4}",
                    r.trial,
                    r.config.num_topics,
                    r.config.alpha_total,
                    r.config.fusion,
                    r.config.topic_setting,
                    r.config.topic_update,
                    r.config.learning_rate,
                    r.dev_f1
                );
            }
            match out {
                Some(p) => std::fs::write(p, best.serialize())?,
                None => print!("{}", best.serialize()),
            }
        }
        Command::Gradcheck { toy, json } => {
            if !toy {
                return Err(TapaError::Config(
                    "gradcheck currently only supports --toy".into(),
                ));
            }
            let mut entries = Vec::new();
            for fusion in [Fusion::Early, Fusion::Late] {
                let report = toy_gradcheck(fusion, TOY_GRADCHECK_EPSILON)?;
                if report.max_relative_error >= TOY_GRADCHECK_TOLERANCE {
                    return Err(TapaError::GradCheck {
                        max: report.max_relative_error,
                        param: report.worst_parameter,
                        tol: TOY_GRADCHECK_TOLERANCE,
                    });
                }
                entries.push((fusion, report));
            }
            if json {
                println!("{{");
                for (i, (fusion, r)) in entries.iter().enumerate() {
                    println!(
                        "  \"{}\": {{\"max_relative_error\": {:.3e}, \"worst_parameter\": \"{}\"}}{}",
                        fusion,
                        r.max_relative_error,
                        r.worst_parameter,
                        if i + 1 < entries.len() { "," } else { "" }
                    );
                }
                println!("}}");
            } else {
                for (fusion, r) in &entries {
                    println!(
                        "{} fusion: max relative error {:.3e} ({}) -- ok",
                        fusion, r.max_relative_error, r.worst_parameter
                    );
                }
            }
        }
        Command::MakeSynthetic {
            kind,
            train,
            dev,
            test,
            seed,
            out,
        } => {
            let kind: SyntheticKind = kind.parse()?;
            std::fs::create_dir_all(&out)?;
            let (tr, dv, te) = make_synthetic(kind, train, dev, test, seed);
            write_pairs(&out.join("train.tsv"), &tr)?;
            write_pairs(&out.join("dev.tsv"), &dv)?;
            write_pairs(&out.join("test.tsv"), &te)?;
            println!(
                "wrote {}/{}/{} pairs to {}",
                tr.len(),
                dv.len(),
                te.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path with exit 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            let code = match e {
                TapaError::Config(_) => 1,
                TapaError::GradCheck { .. } => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
