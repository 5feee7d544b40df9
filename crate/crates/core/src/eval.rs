//! Exact-match scoring and rationale-classification metrics.

use serde::{Deserialize, Serialize};

use crate::data::{normalize_answer, QAExample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, TokenizedExample};

/// True iff the normalized prediction equals some normalized gold answer.
pub fn exact_match(prediction: &str, golds: &[String]) -> bool {
    let p = normalize_answer(prediction);
    golds.iter().any(|g| normalize_answer(g) == p)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub prediction: String,
    pub em: bool,
    /// Predicted rationale label per passage.
    pub preds: Vec<usize>,
    /// Gold rationale label per passage.
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub exact_match: f64,
    pub ratn_accuracy: f64,
    pub ratn_precision: f64,
    pub ratn_recall: f64,
    pub n_questions: usize,
    pub per_example: Vec<ExampleRecord>,
}

impl EvalReport {
    /// Recompute accuracy from the per-example records; the report must be
    /// internally consistent.
    pub fn recomputed_accuracy(&self) -> f64 {
        let mut correct = 0usize;
        let mut total = 0usize;
        for r in &self.per_example {
            for (&p, &b) in r.preds.iter().zip(&r.labels) {
                total += 1;
                if (p == 1) == b {
                    correct += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}

/// Greedy-decode every question, score EM and per-passage rationale
/// predictions. Pure given (corpus, model parameters).
pub fn evaluate(corpus: &[QAExample], model: &Model, vocab: &Vocabulary) -> Result<EvalReport> {
    if model.cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint vocab_size {} does not match vocabulary of {} tokens",
            model.cfg.vocab_size,
            vocab.len()
        )));
    }
    let mut records = Vec::with_capacity(corpus.len());
    let (mut em_hits, mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for ex in corpus {
        let tex = TokenizedExample::from_example(ex, vocab, &model.cfg)?;
        let (prediction, _, mem) = model.generate(&tex.inputs, vocab, false);
        let em = exact_match(&prediction, &ex.answers);
        em_hits += em as usize;
        for (&p, &b) in mem.preds.iter().zip(&ex.labels) {
            match (p == 1, b) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
            }
        }
        records.push(ExampleRecord {
            id: ex.id.clone(),
            prediction,
            em,
            preds: mem.preds,
            labels: ex.labels.clone(),
        });
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let n = corpus.len();
    let pairs = tp + tn + fp + fneg;
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(EvalReport {
        exact_match: ratio(em_hits, n),
        ratn_accuracy: ratio(tp + tn, pairs),
        ratn_precision: ratio(tp, tp + fp),
        ratn_recall: ratio(tp, tp + fneg),
        n_questions: n,
        per_example: records,
    })
}
