//! Synthetic multi-passage QA generation with near-duplicate distractors.
//!
//! Every example asks for the value of a unique (entity, attribute) pair.
//! Rational passages state the correct value; distractors are passages
//! about a confusable entity (sharing a configurable fraction of surface
//! tokens) that state a wrong value. Ground-truth labels are recorded and
//! must agree with [`crate::data::label_rationale`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{label_rationale, MatchPolicy, Passage, QAExample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Passages per question.
    pub k: usize,
    /// Inclusive range for the number of rational passages per question.
    pub num_rational_range: (usize, usize),
    /// Fraction of entity surface tokens a distractor shares with the
    /// rational entity.
    pub distractor_confusability: f64,
    /// Tokens per entity name.
    pub entity_len: usize,
    /// Pool sizes.
    pub n_entity_tokens: usize,
    pub n_distractor_tokens: usize,
    pub n_attributes: usize,
    pub n_values: usize,
    /// Split sizes; generation is one pass so entity/attribute pairs never
    /// repeat across splits.
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            k: 4,
            num_rational_range: (1, 1),
            distractor_confusability: 0.7,
            entity_len: 4,
            n_entity_tokens: 160,
            n_distractor_tokens: 60,
            n_attributes: 16,
            n_values: 60,
            n_train: 4000,
            n_dev: 250,
            n_test: 250,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn total(&self) -> usize {
        self.n_train + self.n_dev + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.num_rational_range;
        if self.k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if lo > hi || hi > self.k {
            return Err(Error::Config(format!(
                "num_rational_range ({lo},{hi}) must satisfy lo <= hi <= K"
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_confusability) {
            return Err(Error::Config(
                "distractor_confusability must lie in [0,1]".into(),
            ));
        }
        if self.entity_len == 0 || self.entity_len > self.n_entity_tokens {
            return Err(Error::Config(
                "entity_len must be >= 1 and <= n_entity_tokens".into(),
            ));
        }
        if self.n_values < 2 {
            return Err(Error::Config(
                "n_values must be >= 2 so a wrong value always exists".into(),
            ));
        }
        if self.n_attributes == 0 || self.n_distractor_tokens == 0 {
            return Err(Error::Config("pool sizes must be >= 1".into()));
        }
        if self.total() == 0 {
            return Err(Error::Config("corpus size must be >= 1".into()));
        }
        Ok(())
    }
}

const CONSONANTS: &[char] = &[
    'b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

/// Template words that appear in questions and contexts.
const TEMPLATE_WORDS: &[&str] = &["what", "is", "the", "of"];

fn make_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())]);
        w.push(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    w
}

fn make_pool(
    rng: &mut ChaCha8Rng,
    n: usize,
    syllables: usize,
    used: &mut std::collections::HashSet<String>,
) -> Result<Vec<String>> {
    let mut pool = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while pool.len() < n {
        let w = make_word(rng, syllables);
        if used.insert(w.clone()) {
            pool.push(w);
        } else {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Config(
                    "word pool exhausted; reduce pool sizes".into(),
                ));
            }
        }
    }
    Ok(pool)
}

/// Generate the full corpus (train + dev + test concatenated, in order).
/// Identical config (including seed) yields a byte-identical corpus.
pub fn generate_synthetic_corpus(cfg: &SynthesisConfig) -> Result<Vec<QAExample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut used: std::collections::HashSet<String> =
        TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
    let entity_pool = make_pool(&mut rng, cfg.n_entity_tokens, 2, &mut used)?;
    let distractor_pool = make_pool(&mut rng, cfg.n_distractor_tokens, 2, &mut used)?;
    let attribute_pool = make_pool(&mut rng, cfg.n_attributes, 3, &mut used)?;
    let value_pool = make_pool(&mut rng, cfg.n_values, 3, &mut used)?;

    let mut seen_pairs: std::collections::HashSet<(Vec<usize>, usize)> =
        std::collections::HashSet::new();
    let (lo, hi) = cfg.num_rational_range;
    let mut out = Vec::with_capacity(cfg.total());

    for i in 0..cfg.total() {
        // unique (entity, attribute) pair, so dev/test answers are never
        // memorizable from training questions
        let (entity_ids, attr_id) = {
            let mut attempt = 0;
            loop {
                let mut ids: Vec<usize> = rand::seq::index::sample(
                    &mut rng,
                    cfg.n_entity_tokens,
                    cfg.entity_len,
                )
                .into_vec();
                ids.sort_unstable();
                let attr = rng.gen_range(0..cfg.n_attributes);
                if seen_pairs.insert((ids.clone(), attr)) {
                    break (ids, attr);
                }
                attempt += 1;
                if attempt > 10_000 {
                    return Err(Error::Config(format!(
                        "cannot draw {} unique entity/attribute pairs from the \
                         configured pools",
                        cfg.total()
                    )));
                }
            }
        };
        let entity: Vec<&str> = entity_ids.iter().map(|&i| entity_pool[i].as_str()).collect();
        let attr = attribute_pool[attr_id].as_str();
        let value = value_pool[rng.gen_range(0..cfg.n_values)].as_str();
        // one wrong value shared by all distractors of this question: the
        // spurious passages form a majority that agrees on a wrong answer
        let wrong = loop {
            let w = value_pool[rng.gen_range(0..cfg.n_values)].as_str();
            if w != value {
                break w;
            }
        };

        let entity_str = entity.join(" ");
        let question = format!("what is the {attr} of {entity_str}");
        let r = rng.gen_range(lo..=hi);

        let mut passages = Vec::with_capacity(cfg.k);
        let mut labels = Vec::with_capacity(cfg.k);
        for _ in 0..r {
            passages.push(Passage {
                title: entity_str.clone(),
                context: format!("the {attr} of {entity_str} is {value}"),
            });
            labels.push(true);
        }
        let keep_n = ((cfg.distractor_confusability * cfg.entity_len as f64).round()
            as usize)
            .min(cfg.entity_len - 1);
        for _ in r..cfg.k {
            let keep: Vec<usize> =
                rand::seq::index::sample(&mut rng, cfg.entity_len, keep_n).into_vec();
            let mut confusable: Vec<String> = Vec::with_capacity(cfg.entity_len);
            for (pos, tok) in entity.iter().enumerate() {
                if keep.contains(&pos) {
                    confusable.push(tok.to_string());
                } else {
                    confusable.push(
                        distractor_pool[rng.gen_range(0..cfg.n_distractor_tokens)].clone(),
                    );
                }
            }
            let confusable_str = confusable.join(" ");
            passages.push(Passage {
                title: confusable_str.clone(),
                context: format!("the {attr} of {confusable_str} is {wrong}"),
            });
            labels.push(false);
        }

        // shuffle passage order together with labels
        let mut order: Vec<usize> = (0..cfg.k).collect();
        order.shuffle(&mut rng);
        let passages: Vec<Passage> = order.iter().map(|&j| passages[j].clone()).collect();
        let labels: Vec<bool> = order.iter().map(|&j| labels[j]).collect();

        debug_assert!(passages.iter().zip(&labels).all(|(p, &b)| {
            label_rationale(p, &[value.to_string()], MatchPolicy::TokenBoundary) == b
        }));

        out.push(QAExample {
            id: format!("q{i:06}"),
            question,
            answers: vec![value.to_string()],
            passages,
            labels,
        });
    }
    Ok(out)
}

/// Split a generated corpus into (train, dev, test) slices per the config.
pub fn split_corpus(
    corpus: &[QAExample],
    cfg: &SynthesisConfig,
) -> (Vec<QAExample>, Vec<QAExample>, Vec<QAExample>) {
    let train = corpus[..cfg.n_train].to_vec();
    let dev = corpus[cfg.n_train..cfg.n_train + cfg.n_dev].to_vec();
    let test = corpus[cfg.n_train + cfg.n_dev..].to_vec();
    (train, dev, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_cfg() -> SynthesisConfig {
        SynthesisConfig {
            n_train: 40,
            n_dev: 5,
            n_test: 5,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_synthetic_corpus(&cfg).unwrap();
        let b = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 1;
        let c = generate_synthetic_corpus(&cfg2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rational_count_follows_range() {
        let mut cfg = small_cfg();
        cfg.num_rational_range = (1, 1);
        for ex in generate_synthetic_corpus(&cfg).unwrap() {
            assert_eq!(ex.labels.iter().filter(|&&b| b).count(), 1);
            assert_eq!(ex.passages.len(), cfg.k);
        }
        cfg.num_rational_range = (0, 4);
        let corpus = generate_synthetic_corpus(&cfg).unwrap();
        let counts: HashSet<usize> = corpus
            .iter()
            .map(|ex| ex.labels.iter().filter(|&&b| b).count())
            .collect();
        assert!(counts.len() > 1, "range should produce varying counts");
    }

    #[test]
    fn labels_agree_with_label_rationale() {
        let corpus = generate_synthetic_corpus(&small_cfg()).unwrap();
        for ex in &corpus {
            for (p, &b) in ex.passages.iter().zip(&ex.labels) {
                // independent substring scan, not the generator's bookkeeping
                assert_eq!(
                    label_rationale(p, &ex.answers, MatchPolicy::TokenBoundary),
                    b,
                    "label mismatch on {}",
                    ex.id
                );
            }
        }
    }

    #[test]
    fn zero_confusability_shares_no_content_tokens() {
        let mut cfg = small_cfg();
        cfg.distractor_confusability = 0.0;
        let corpus = generate_synthetic_corpus(&cfg).unwrap();
        for ex in &corpus {
            let question_tokens: HashSet<&str> = ex.question.split_whitespace().collect();
            let rational_content: HashSet<&str> = ex
                .passages
                .iter()
                .zip(&ex.labels)
                .filter(|(_, &b)| b)
                .flat_map(|(p, _)| {
                    p.title
                        .split_whitespace()
                        .chain(p.context.split_whitespace())
                })
                .filter(|t| !question_tokens.contains(t) && *t != "is")
                .collect();
            for (p, &b) in ex.passages.iter().zip(&ex.labels) {
                if b {
                    continue;
                }
                for t in p
                    .title
                    .split_whitespace()
                    .chain(p.context.split_whitespace())
                {
                    assert!(
                        !rational_content.contains(t),
                        "distractor shares content token {t:?} in {}",
                        ex.id
                    );
                }
            }
        }
    }

    #[test]
    fn infeasible_config_is_rejected() {
        let mut cfg = small_cfg();
        cfg.num_rational_range = (3, 2);
        assert!(generate_synthetic_corpus(&cfg).is_err());
        let mut cfg = small_cfg();
        cfg.n_values = 1;
        assert!(generate_synthetic_corpus(&cfg).is_err());
        let mut cfg = small_cfg();
        cfg.entity_len = 2;
        cfg.n_entity_tokens = 2;
        cfg.n_attributes = 1;
        cfg.n_train = 50; // only one possible (entity, attribute) pair
        assert!(generate_synthetic_corpus(&cfg).is_err());
    }

    #[test]
    fn answer_survives_tokenization_at_template_length() {
        let corpus = generate_synthetic_corpus(&small_cfg()).unwrap();
        for ex in corpus.iter().take(10) {
            for (p, &b) in ex.passages.iter().zip(&ex.labels) {
                if !b {
                    continue;
                }
                let formatted = crate::data::format_input(&ex.question, p);
                let n_tokens = formatted.split_whitespace().count();
                let tokens: Vec<&str> =
                    formatted.split_whitespace().take(n_tokens).collect();
                assert!(tokens.contains(&ex.answers[0].as_str()));
            }
        }
    }
}
