//! Corpus types, JSONL ingestion, answer normalization, rationale labeling,
//! input formatting and whitespace tokenization.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A retrieved passage: title plus context text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub title: String,
    #[serde(rename = "text")]
    pub context: String,
}

/// One multi-passage QA example with derived per-passage rationale labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub passages: Vec<Passage>,
    /// `labels[k]` is true iff passage `k` contains a gold answer span.
    pub labels: Vec<bool>,
}

/// How answer spans are matched inside a passage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchPolicy {
    /// Answer tokens must appear as a contiguous token run in the
    /// normalized passage text.
    #[default]
    TokenBoundary,
    /// Plain substring containment on normalized strings.
    RawSubstring,
}

/// Lowercase, strip punctuation, drop English articles, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let depunct: String = lowered
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    depunct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// True iff any gold answer occurs in the passage (title + context) under
/// the given matching policy. Answers that normalize to the empty string
/// never match.
pub fn label_rationale(passage: &Passage, answers: &[String], policy: MatchPolicy) -> bool {
    let text = normalize_answer(&format!("{} {}", passage.title, passage.context));
    match policy {
        MatchPolicy::RawSubstring => answers.iter().any(|a| {
            let a = normalize_answer(a);
            !a.is_empty() && text.contains(&a)
        }),
        MatchPolicy::TokenBoundary => {
            let tokens: Vec<&str> = text.split_whitespace().collect();
            answers.iter().any(|a| {
                let a = normalize_answer(a);
                if a.is_empty() {
                    return false;
                }
                let needle: Vec<&str> = a.split_whitespace().collect();
                tokens
                    .windows(needle.len())
                    .any(|w| w == needle.as_slice())
            })
        }
    }
}

/// Question/passage concatenation fed to each encoder.
pub fn format_input(question: &str, passage: &Passage) -> String {
    format!(
        "Question : {} ; Title : {} ; Context : {}",
        question, passage.title, passage.context
    )
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Whitespace token vocabulary with fixed reserved ids 0..=3.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from an iterator of tokens; non-reserved ids are assigned in
    /// sorted token order so construction is deterministic.
    pub fn build<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set: std::collections::BTreeSet<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_string())
            .collect();
        for r in RESERVED {
            set.remove(r);
        }
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(set);
        Self::from_tokens(all)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Build the vocabulary covering a corpus: every token of every
    /// formatted encoder input plus every answer token.
    pub fn from_corpus(examples: &[QAExample]) -> Self {
        let mut toks: Vec<String> = Vec::new();
        for ex in examples {
            for p in &ex.passages {
                toks.extend(
                    format_input(&ex.question, p)
                        .split_whitespace()
                        .map(String::from),
                );
            }
            for a in &ex.answers {
                toks.extend(a.split_whitespace().map(String::from));
            }
        }
        Self::build(toks)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = content.lines().map(String::from).collect();
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()] != RESERVED.map(String::from)
        {
            return Err(Error::Data(format!(
                "vocabulary {} missing reserved header",
                path.display()
            )));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// A fixed-length id sequence with its attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPair {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Whitespace tokenization, truncated or right-padded to exactly `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenizedPair {
    let mut ids: Vec<usize> = text
        .split_whitespace()
        .take(max_len)
        .map(|t| vocab.id(t))
        .collect();
    let n = ids.len();
    ids.resize(max_len, PAD);
    let mut mask = vec![true; n];
    mask.resize(max_len, false);
    TokenizedPair { ids, mask }
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    question: String,
    answers: Vec<String>,
    ctxs: Vec<Passage>,
}

#[derive(Serialize)]
struct RawRecordOut<'a> {
    id: &'a str,
    question: &'a str,
    answers: &'a [String],
    ctxs: &'a [Passage],
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    id: String,
    labels: Vec<bool>,
}

/// Load a JSONL corpus, keep the first `k` contexts per record in retriever
/// order, and recompute rationale labels. Labels in any sidecar file are
/// never trusted.
pub fn load_corpus(path: &Path, k: usize, policy: MatchPolicy) -> Result<Vec<QAExample>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(f);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if raw.answers.is_empty() {
            return Err(Error::Record {
                line: i + 1,
                reason: "record has no answers".into(),
            });
        }
        if raw.ctxs.len() < k {
            return Err(Error::Record {
                line: i + 1,
                reason: format!("record has {} contexts, need {k}", raw.ctxs.len()),
            });
        }
        let passages: Vec<Passage> = raw.ctxs.into_iter().take(k).collect();
        let labels = passages
            .iter()
            .map(|p| label_rationale(p, &raw.answers, policy))
            .collect();
        out.push(QAExample {
            id: raw.id,
            question: raw.question,
            answers: raw.answers,
            passages,
            labels,
        });
    }
    Ok(out)
}

/// Write a corpus as JSONL plus a `<stem>.labels.jsonl` sidecar for auditing.
pub fn write_corpus(path: &Path, examples: &[QAExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        let rec = RawRecordOut {
            id: &ex.id,
            question: &ex.question,
            answers: &ex.answers,
            ctxs: &ex.passages,
        };
        serde_json::to_writer(&mut f, &rec)?;
        writeln!(f)?;
    }
    f.flush()?;

    let sidecar = labels_sidecar_path(path);
    let mut f = std::io::BufWriter::new(std::fs::File::create(sidecar)?);
    for ex in examples {
        let rec = LabelRecord {
            id: ex.id.clone(),
            labels: ex.labels.clone(),
        };
        serde_json::to_writer(&mut f, &rec)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

pub fn labels_sidecar_path(corpus_path: &Path) -> std::path::PathBuf {
    let stem = corpus_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("corpus");
    corpus_path.with_file_name(format!("{stem}.labels.jsonl"))
}
