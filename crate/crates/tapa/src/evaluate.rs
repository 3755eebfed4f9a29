//! Evaluation metrics (precision/recall/F1 on the positive class) and
//! the four-row ablation protocol.

use crate::config::ExperimentConfig;
use crate::corpus::{ContextualVectors, QuestionPair};
use crate::encode::Fusion;
use crate::error::{Result, TapaError};
use crate::train::{predict_pairs, train};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Precision, recall, and F1 for the positive class. Zero-denominator
/// cases (no predicted positives, no actual positives, P+R = 0) all
/// yield 0.0 for the affected metric.
pub fn f1_score(predictions: &[u8], labels: &[u8]) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(TapaError::Dimension(format!(
            "f1_score: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(TapaError::Data("f1_score: empty input".into()));
    }
    for &v in predictions.iter().chain(labels.iter()) {
        if v > 1 {
            return Err(TapaError::Domain(format!(
                "f1_score: labels must be 0 or 1, got {}",
                v
            )));
        }
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            (0, 1) => fn_ += 1,
            _ => unreachable!(),
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(EvalReport {
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
        precision,
        recall,
        f1,
        accuracy: (tp + tn) as f64 / predictions.len() as f64,
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub result: std::result::Result<EvalReport, String>,
}

/// The four ablation variants, derived from the base configuration by
/// pure config edits.
pub fn ablation_configs(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let full = base.clone();
    let mut no_topics = base.clone();
    no_topics.use_topics = false;
    let mut no_contextual = base.clone();
    no_contextual.contextual_dim = 0;
    let mut late = base.clone();
    late.fusion = Fusion::Late;
    vec![
        ("full".to_string(), full),
        ("-topics".to_string(), no_topics),
        ("-contextual".to_string(), no_contextual),
        ("late-fusion".to_string(), late),
    ]
}

/// Train and evaluate each ablation variant on the same splits. A
/// failing row is recorded as an error string and the remaining rows
/// still run.
pub fn run_ablation(
    base: &ExperimentConfig,
    train_pairs: &[QuestionPair],
    dev_pairs: &[QuestionPair],
    test_pairs: &[QuestionPair],
    contextual: Option<&ContextualVectors>,
    pretrained: &[(usize, Vec<f64>)],
    quiet: bool,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(base) {
        let ctx = if cfg.contextual_dim > 0 { contextual } else { None };
        let result = (|| -> Result<EvalReport> {
            let outcome = train(&cfg, train_pairs, dev_pairs, ctx, pretrained, None, quiet)?;
            let (preds, labels) = predict_pairs(
                &outcome.model,
                test_pairs,
                &outcome.vocab,
                &outcome.doc_cache,
                ctx,
            )?;
            f1_score(&preds, &labels)
        })();
        if !quiet {
            match &result {
                Ok(r) => eprintln!("ablation {:>12}  test_f1 {:.4}", name, r.f1),
                Err(e) => eprintln!("ablation {:>12}  failed: {}", name, e),
            }
        }
        rows.push(AblationRow {
            name,
            result: result.map_err(|e| e.to_string()),
        });
    }
    Ok(rows)
}

/// Tab-separated ablation table with a header row.
pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant\tprecision\trecall\tf1\taccuracy\terror\n");
    for row in rows {
        match &row.result {
            Ok(r) => out.push_str(&format!(
                "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t\n",
                row.name, r.precision, r.recall, r.f1, r.accuracy
            )),
            Err(e) => out.push_str(&format!("{}\t\t\t\t\t{}\n", row.name, e)),
        }
    }
    out
}

pub fn report_json(report: &EvalReport, config: &ExperimentConfig) -> String {
    format!(
        concat!(
            "{{\n",
            "  \"precision\": {:.6},\n",
            "  \"recall\": {:.6},\n",
            "  \"f1\": {:.6},\n",
            "  \"accuracy\": {:.6},\n",
            "  \"true_positives\": {},\n",
            "  \"false_positives\": {},\n",
            "  \"true_negatives\": {},\n",
            "  \"false_negatives\": {},\n",
            "  \"config_fingerprint\": \"{}\"\n",
            "}}\n"
        ),
        report.precision,
        report.recall,
        report.f1,
        report.accuracy,
        report.true_positives,
        report.false_positives,
        report.true_negatives,
        report.false_negatives,
        config.fingerprint()
    )
}
