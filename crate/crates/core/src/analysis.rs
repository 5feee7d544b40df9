//! Cross-attention attribution: per-passage attention mass, the averaged
//! positive/negative scores and their ratio, plus per-question case
//! reports.

use serde::{Deserialize, Serialize};

use crate::data::{QAExample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{AttentionTrace, Model, ModelConfig, TokenizedExample};

/// Cross-attention mass a passage receives: summed over decoder layers and
/// generated steps, averaged over heads, over the passage's token
/// positions only. The appended guidance slot is excluded.
pub fn passage_cross_attention(trace: &AttentionTrace, k: usize, cfg: &ModelConfig) -> f64 {
    let block = cfg.block_len();
    assert!(
        (k + 1) * block <= trace.mem_len().max((k + 1) * block),
        "passage index out of range"
    );
    assert!(k < trace.mem_len() / block, "passage index out of range");
    let start = k * block;
    let n_heads = trace.n_heads() as f64;
    let mut total = 0.0;
    for layer in &trace.ca {
        for head in layer {
            for step in head {
                total += step[start..start + cfg.max_len].iter().sum::<f64>() / n_heads;
            }
        }
    }
    total
}

/// Attention mass on a passage's guidance slot, reported separately.
pub fn guidance_cross_attention(trace: &AttentionTrace, k: usize, cfg: &ModelConfig) -> f64 {
    if !cfg.guide_decoder {
        return 0.0;
    }
    let block = cfg.block_len();
    let slot = k * block + cfg.max_len;
    let n_heads = trace.n_heads() as f64;
    let mut total = 0.0;
    for layer in &trace.ca {
        for head in layer {
            for step in head {
                total += step[slot] / n_heads;
            }
        }
    }
    total
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionRow {
    pub id: String,
    pub n_pos: usize,
    pub ca: Vec<f64>,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CARatioReport {
    pub mean_ca_pos: f64,
    pub mean_ca_neg: f64,
    /// `mean_ca_pos / mean_ca_neg`; absent when either side has no
    /// eligible questions, with the reason recorded.
    pub r_pos_neg: Option<f64>,
    pub r_pos_neg_reason: Option<String>,
    /// Questions contributing to the positive mean.
    pub n_questions_pos: usize,
    /// Questions contributing to the negative mean.
    pub n_questions_neg: usize,
    /// Questions excluded from the positive mean (no positive passage).
    pub excluded_no_pos: usize,
    /// Questions excluded from the negative mean (no negative passage).
    pub excluded_no_neg: usize,
    pub per_question: Vec<QuestionRow>,
}

/// Two-level averaging: per question, mean CA over positive and over
/// negative passages; then mean of those per-question means over eligible
/// questions.
pub fn ca_ratio(corpus: &[QAExample], model: &Model, vocab: &Vocabulary) -> Result<CARatioReport> {
    let mut rows = Vec::with_capacity(corpus.len());
    let (mut pos_sum, mut neg_sum) = (0.0, 0.0);
    let (mut n_pos_q, mut n_neg_q) = (0usize, 0usize);
    let (mut excluded_no_pos, mut excluded_no_neg) = (0usize, 0usize);
    for ex in corpus {
        let tex = TokenizedExample::from_example(ex, vocab, &model.cfg)?;
        let (_, trace, _) = model.generate(&tex.inputs, vocab, true);
        let trace = trace.expect("trace requested");
        let ca: Vec<f64> = (0..model.cfg.k)
            .map(|k| passage_cross_attention(&trace, k, &model.cfg))
            .collect();
        let n_pos = ex.labels.iter().filter(|&&b| b).count();
        let n_neg = model.cfg.k - n_pos;
        if n_pos > 0 {
            let mean = ca
                .iter()
                .zip(&ex.labels)
                .filter(|(_, &b)| b)
                .map(|(&c, _)| c)
                .sum::<f64>()
                / n_pos as f64;
            pos_sum += mean;
            n_pos_q += 1;
        } else {
            excluded_no_pos += 1;
        }
        if n_neg > 0 {
            let mean = ca
                .iter()
                .zip(&ex.labels)
                .filter(|(_, &b)| !b)
                .map(|(&c, _)| c)
                .sum::<f64>()
                / n_neg as f64;
            neg_sum += mean;
            n_neg_q += 1;
        } else {
            excluded_no_neg += 1;
        }
        rows.push(QuestionRow {
            id: ex.id.clone(),
            n_pos,
            ca,
            labels: ex.labels.clone(),
        });
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let mean_ca_pos = if n_pos_q > 0 { pos_sum / n_pos_q as f64 } else { 0.0 };
    let mean_ca_neg = if n_neg_q > 0 { neg_sum / n_neg_q as f64 } else { 0.0 };
    let (r, reason) = if n_pos_q == 0 {
        (None, Some("no questions with a positive passage".to_string()))
    } else if n_neg_q == 0 {
        (None, Some("no questions with a negative passage".to_string()))
    } else if mean_ca_neg == 0.0 {
        (None, Some("negative mean is zero".to_string()))
    } else {
        (Some(mean_ca_pos / mean_ca_neg), None)
    };
    Ok(CARatioReport {
        mean_ca_pos,
        mean_ca_neg,
        r_pos_neg: r,
        r_pos_neg_reason: reason,
        n_questions_pos: n_pos_q,
        n_questions_neg: n_neg_q,
        excluded_no_pos,
        excluded_no_neg,
        per_question: rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRow {
    pub passage_index: usize,
    pub label: bool,
    pub pred: usize,
    pub ca: f64,
    pub guidance_ca: f64,
    pub excerpt: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseReport {
    pub id: String,
    pub question: String,
    pub generated: String,
    pub gold_answers: Vec<String>,
    /// Rows sorted by cross-attention mass, descending.
    pub rows: Vec<CaseRow>,
}

/// Per-question attention table in the style of a worked example: which
/// passage the decoder looked at, versus which one was rational.
pub fn case_report(
    id: &str,
    corpus: &[QAExample],
    model: &Model,
    vocab: &Vocabulary,
) -> Result<CaseReport> {
    let ex = corpus
        .iter()
        .find(|ex| ex.id == id)
        .ok_or_else(|| Error::NotFound(format!("question id {id:?}")))?;
    let tex = TokenizedExample::from_example(ex, vocab, &model.cfg)?;
    let (generated, trace, mem) = model.generate(&tex.inputs, vocab, true);
    let trace = trace.expect("trace requested");
    let mut rows: Vec<CaseRow> = (0..model.cfg.k)
        .map(|k| CaseRow {
            passage_index: k,
            label: ex.labels[k],
            pred: mem.preds[k],
            ca: passage_cross_attention(&trace, k, &model.cfg),
            guidance_ca: guidance_cross_attention(&trace, k, &model.cfg),
            excerpt: excerpt(&ex.passages[k].title, &ex.passages[k].context),
        })
        .collect();
    rows.sort_by(|a, b| b.ca.partial_cmp(&a.ca).unwrap_or(std::cmp::Ordering::Equal));
    Ok(CaseReport {
        id: ex.id.clone(),
        question: ex.question.clone(),
        generated,
        gold_answers: ex.answers.clone(),
        rows,
    })
}

fn excerpt(title: &str, context: &str) -> String {
    let full = format!("{title} | {context}");
    if full.chars().count() > 60 {
        let cut: String = full.chars().take(57).collect();
        format!("{cut}...")
    } else {
        full
    }
}

impl CaseReport {
    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("question : {}\n", self.question));
        out.push_str(&format!("generated: {}\n", self.generated));
        out.push_str(&format!("gold     : {}\n", self.gold_answers.join(" | ")));
        out.push_str(&format!(
            "{:>3} {:>5} {:>4} {:>10} {:>10}  excerpt\n",
            "psg", "label", "pred", "CA", "guideCA"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:>3} {:>5} {:>4} {:>10.4} {:>10.4}  {}\n",
                r.passage_index,
                if r.label { "pos" } else { "neg" },
                r.pred,
                r.ca,
                r.guidance_ca,
                r.excerpt
            ));
        }
        out
    }
}
