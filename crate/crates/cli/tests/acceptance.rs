//! End-to-end acceptance checks. Each numbered check prints one PASS/FAIL
//! line; the test fails if any check fails. Run with
//! `cargo test --test acceptance -- --nocapture` to watch progress.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfid_core::analysis::{ca_ratio, passage_cross_attention};
use rfid_core::data::{label_rationale, MatchPolicy, Passage, QAExample, Vocabulary};
use rfid_core::eval::evaluate;
use rfid_core::model::{AttentionTrace, Model, ModelConfig, RATIONALE_TENSORS};
use rfid_core::synth::{generate_synthetic_corpus, split_corpus, SynthesisConfig};
use rfid_core::training::{
    gradient_check, train, TrainConfig, TrainSink, Variant,
};

/// Budget for the trained-model checks (7–9): must stay within 5k steps.
/// The copy circuit forms through an abrupt late transition, so the runs
/// need an aggressive learning rate, a larger batch, and enough data for
/// the transition to land inside the step budget on every seed.
const RUN_STEPS: usize = 5000;
const RUN_LR: f64 = 3e-3;
const RUN_BATCH: usize = 16;
const RUN_N_TRAIN: usize = 4000;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    label: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(label: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { label, pass, detail }
}

#[test]
fn acceptance() {
    let mut results: Vec<Outcome> = Vec::new();

    results.push(criterion_1_gradients());
    results.push(criterion_2_shapes());
    results.push(criterion_3_loss_ledger());
    results.push(criterion_4_attention_oracle());
    results.push(criterion_5_labeling());
    results.push(criterion_6_untrained_ratio());
    let (c7, c8, c9) = criteria_7_8_9_experiment();
    results.push(c7);
    results.push(c8);
    results.push(c9);
    results.push(criterion_10_reproducibility());

    // Write straight to stderr so the summary shows up even without
    // --nocapture (libtest only captures the print macros).
    use std::io::Write;
    let stderr = std::io::stderr();
    let mut out = stderr.lock();
    let mut all_pass = true;
    for r in &results {
        let tag = if r.pass { "PASS" } else { "FAIL" };
        writeln!(out, "{tag}  {} — {}", r.label, r.detail).unwrap();
        all_pass &= r.pass;
    }
    drop(out);
    assert!(all_pass, "one or more acceptance checks failed");
}

// --- 1: gradient correctness -----------------------------------------------

fn criterion_1_gradients() -> Outcome {
    let cfg = ModelConfig {
        k: 2,
        max_len: 8,
        d_model: 16,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        vocab_size: 24,
        max_target_len: 4,
        guide_decoder: true,
        seed: 0,
    };
    let t0 = Instant::now();
    let report = match gradient_check(&cfg, Variant::Rfid, 1e-4, 200, 0) {
        Ok(r) => r,
        Err(e) => return outcome("criterion 1 (gradient check)", false, format!("error: {e}")),
    };
    let elapsed = t0.elapsed();
    let has = |name: &str| report.tensors.iter().any(|t| t.name == name && t.n_checked > 0);
    let covers_rationale = has("ratn_emb") && has("ratn.w") && has("ratn.b");
    let pass = report.passed() && covers_rationale && elapsed.as_secs() < 60;
    outcome(
        "criterion 1 (gradient check)",
        pass,
        format!(
            "max rel err {:.3e} over {} tensors (tolerance 1e-4), rationale tensors covered: {}, {:.1}s",
            report.max_rel_err,
            report.tensors.len(),
            covers_rationale,
            elapsed.as_secs_f64()
        ),
    )
}

// --- 2: shape / normalization invariants ------------------------------------

fn criterion_2_shapes() -> Outcome {
    let base = ModelConfig {
        k: 3,
        max_len: 6,
        d_model: 16,
        n_enc_layers: 1,
        n_dec_layers: 2,
        n_heads: 2,
        vocab_size: 30,
        max_target_len: 4,
        guide_decoder: true,
        seed: 7,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ex = rfid_core::training::random_example(&base, &mut rng);

    let guided = Model::init(base.clone()).unwrap();
    let mem_g = guided.encode_memory(&ex.inputs).memory.nrows();
    let mut ucfg = base.clone();
    ucfg.guide_decoder = false;
    let unguided = Model::init(ucfg).unwrap();
    let mem_u = unguided.encode_memory(&ex.inputs).memory.nrows();
    let lens_ok = mem_g == base.k * (base.max_len + 1) && mem_u == base.k * base.max_len;

    let fwd = guided.forward(&ex, true);
    let trace = fwd.trace.as_ref().unwrap();
    let mut max_row_dev = 0.0f64;
    for layer in &trace.ca {
        for head in layer {
            for row in head {
                max_row_dev = max_row_dev.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let rows_ok = max_row_dev <= 1e-6;

    let mut k2 = base.clone();
    k2.k = 2;
    let mut k8 = base.clone();
    k8.k = 8;
    let n2 = Model::init(k2).unwrap().params.n_scalars();
    let n8 = Model::init(k8).unwrap().params.n_scalars();
    let count_ok = n2 == n8;

    outcome(
        "criterion 2 (shape/normalization invariants)",
        lens_ok && rows_ok && count_ok,
        format!(
            "memory {mem_g}/{mem_u} rows (guided/unguided), max softmax row deviation {max_row_dev:.2e}, params K=2 {n2} vs K=8 {n8}"
        ),
    )
}

// --- 3: loss ledger + frozen rationale tensors -------------------------------

fn criterion_3_loss_ledger() -> Outcome {
    let scfg = SynthesisConfig {
        n_train: 96,
        n_dev: 8,
        n_test: 8,
        ..Default::default()
    };
    let corpus = generate_synthetic_corpus(&scfg).unwrap();
    let (train_set, dev, _) = split_corpus(&corpus, &scfg);
    let vocab = Vocabulary::from_corpus(&corpus);
    let mcfg = ModelConfig {
        d_model: 16,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        vocab_size: vocab.len(),
        ..Default::default()
    };
    let tcfg = TrainConfig {
        total_steps: 100,
        eval_interval: 50,
        ..Default::default()
    };

    // ledger exactness for a variant that carries both losses
    let out = train(&train_set, &dev, &vocab, mcfg.clone(), &tcfg, &TrainSink::none()).unwrap();
    let ledger_ok = out.history.len() == 100
        && out
            .history
            .iter()
            .all(|b| b.total - (b.ratn + b.fid) == 0.0);

    // the plain fusion variant must never touch the rationale tensors
    let mut fid_cfg = tcfg.clone();
    fid_cfg.variant = Variant::Fid;
    let before = Model::init({
        let mut c = mcfg.clone();
        c.guide_decoder = false;
        c
    })
    .unwrap();
    let out_fid = train(&train_set, &dev, &vocab, mcfg, &fid_cfg, &TrainSink::none()).unwrap();
    let frozen_ok = RATIONALE_TENSORS.iter().all(|name| {
        let a = before.params.get(name);
        let b = out_fid.model.params.get(name);
        a.iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    });

    outcome(
        "criterion 3 (loss ledger)",
        ledger_ok && frozen_ok,
        format!(
            "total-(ratn+fid)=0 at all {} steps: {ledger_ok}; rationale tensors bitwise frozen under fid: {frozen_ok}",
            out.history.len()
        ),
    )
}

// --- 4: attention-mass oracle ------------------------------------------------

fn criterion_4_attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut max_dev = 0.0f64;
    for _ in 0..100 {
        let k = rng.gen_range(1..=3usize);
        let l = rng.gen_range(1..=4usize);
        let n_ly = rng.gen_range(1..=2usize);
        let heads = rng.gen_range(1..=2usize);
        let steps = rng.gen_range(1..=3usize);
        let guide = rng.gen_bool(0.5);
        let cfg = ModelConfig {
            k,
            max_len: l,
            n_dec_layers: n_ly,
            n_heads: heads,
            guide_decoder: guide,
            vocab_size: 10,
            ..Default::default()
        };
        let block = cfg.block_len();
        let mem = k * block;
        let ca: Vec<Vec<Vec<Vec<f64>>>> = (0..n_ly)
            .map(|_| {
                (0..heads)
                    .map(|_| {
                        (0..steps)
                            .map(|_| (0..mem).map(|_| rng.gen::<f64>()).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let trace = AttentionTrace { ca: ca.clone() };
        for p in 0..k {
            let mut reference = 0.0;
            for layer in &ca {
                for head in layer {
                    for step in head {
                        for j in 0..l {
                            reference += step[p * block + j] / heads as f64;
                        }
                    }
                }
            }
            let got = passage_cross_attention(&trace, p, &cfg);
            max_dev = max_dev.max((got - reference).abs());
        }
    }
    outcome(
        "criterion 4 (attention oracle)",
        max_dev <= 1e-6,
        format!("max |computed - nested-loop reference| = {max_dev:.2e} over 100 traces"),
    )
}

// --- 5: labeling properties ---------------------------------------------------

fn criterion_5_labeling() -> Outcome {
    let p = |text: &str| Passage {
        title: String::new(),
        context: text.to_string(),
    };
    let answers = |s: &str| vec![s.to_string()];

    // a passage that only has the short form is not rational for the full
    // name under token-boundary matching
    let case_a = !label_rationale(
        &p("messi scored twice"),
        &answers("Lionel Messi"),
        MatchPolicy::TokenBoundary,
    );
    let case_b = label_rationale(
        &p("they won 2 games"),
        &answers("2"),
        MatchPolicy::TokenBoundary,
    );
    let case_c = label_rationale(
        &p("the capital of france is paris"),
        &answers("Paris"),
        MatchPolicy::TokenBoundary,
    );
    // monotonicity: extending a passage never flips true -> false
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let words = ["alpha", "brav", "cedo", "dil", "2", "paris", "messi", "of"];
    let mut monotone = true;
    for _ in 0..1000 {
        let len = rng.gen_range(1..8);
        let base: Vec<&str> = (0..len).map(|_| words[rng.gen_range(0..words.len())]).collect();
        let ans = words[rng.gen_range(0..words.len())];
        let extra: Vec<&str> = (0..rng.gen_range(1..4))
            .map(|_| words[rng.gen_range(0..words.len())])
            .collect();
        let short = p(&base.join(" "));
        let long = p(&format!("{} {}", base.join(" "), extra.join(" ")));
        let before = label_rationale(&short, &answers(ans), MatchPolicy::TokenBoundary);
        let after = label_rationale(&long, &answers(ans), MatchPolicy::TokenBoundary);
        if before && !after {
            monotone = false;
        }
    }

    outcome(
        "criterion 5 (labeling properties)",
        case_a && case_b && case_c && monotone,
        format!(
            "short-form-only passage vs long answer: {case_a}, common span '2': {case_b}, exact span: {case_c}, monotone over 1000 cases: {monotone}"
        ),
    )
}

// --- 6: untrained ratio sanity -------------------------------------------------

fn criterion_6_untrained_ratio() -> Outcome {
    let scfg = SynthesisConfig {
        n_train: 0,
        n_dev: 0,
        n_test: 250,
        ..Default::default()
    };
    let corpus = generate_synthetic_corpus(&scfg).unwrap();
    let vocab = Vocabulary::from_corpus(&corpus);
    let mcfg = ModelConfig {
        vocab_size: vocab.len(),
        ..Default::default()
    };
    let model = Model::init(mcfg).unwrap();
    let report = ca_ratio(&corpus, &model, &vocab).unwrap();
    let r = report.r_pos_neg.unwrap_or(f64::NAN);
    outcome(
        "criterion 6 (untrained ratio sanity)",
        (0.85..=1.15).contains(&r),
        format!(
            "r_pos/neg = {r:.4} over {} questions (target 0.85..1.15)",
            report.n_questions_pos
        ),
    )
}

// --- 7–9: the paired experiment -------------------------------------------------

fn criteria_7_8_9_experiment() -> (Outcome, Outcome, Outcome) {
    let scfg = SynthesisConfig {
        n_train: RUN_N_TRAIN,
        ..Default::default()
    };
    let corpus = generate_synthetic_corpus(&scfg).unwrap();
    let (train_set, dev, test) = split_corpus(&corpus, &scfg);
    let vocab = Vocabulary::from_corpus(&corpus);

    // probe oracle first: labels must be linearly separable from raw token
    // counts, otherwise the 0.9 rationale-accuracy bar is not meaningful
    let probe_acc = bow_probe_accuracy(&train_set, &dev, &vocab);

    let mcfg = ModelConfig {
        vocab_size: vocab.len(),
        ..Default::default()
    };
    let variants = [Variant::Fid, Variant::RfidNoGuide, Variant::Rfid];
    let mut mean_em = HashMap::new();
    let mut mean_r = HashMap::new();
    let mut rfid_dev_acc = Vec::new();
    for &variant in &variants {
        let (mut em_sum, mut r_sum) = (0.0, 0.0);
        for &seed in &SEEDS {
            let mut m = mcfg.clone();
            m.seed = seed;
            let tcfg = TrainConfig {
                learning_rate: RUN_LR,
                batch_size: RUN_BATCH,
                total_steps: RUN_STEPS,
                eval_interval: 500,
                seed,
                variant,
                ..Default::default()
            };
            let out = train(&train_set, &dev, &vocab, m, &tcfg, &TrainSink::none()).unwrap();
            let test_report = evaluate(&test, &out.model, &vocab).unwrap();
            let ratio = ca_ratio(&test, &out.model, &vocab).unwrap();
            em_sum += test_report.exact_match;
            r_sum += ratio.r_pos_neg.unwrap_or(f64::NAN);
            if variant == Variant::Rfid {
                let dev_report = evaluate(&dev, &out.model, &vocab).unwrap();
                rfid_dev_acc.push(dev_report.ratn_accuracy);
            }
            eprintln!(
                "  [experiment] {} seed {}: test EM {:.4}, r {:.4}",
                variant.as_str(),
                seed,
                test_report.exact_match,
                ratio.r_pos_neg.unwrap_or(f64::NAN)
            );
        }
        mean_em.insert(variant.as_str(), em_sum / SEEDS.len() as f64);
        mean_r.insert(variant.as_str(), r_sum / SEEDS.len() as f64);
    }

    let (em_f, em_n, em_r) = (mean_em["fid"], mean_em["rfid-noguide"], mean_em["rfid"]);
    let c7 = outcome(
        "criterion 7 (directional EM)",
        em_r > em_f && em_n > em_f,
        format!("mean test EM: rfid {em_r:.4}, rfid-noguide {em_n:.4}, fid {em_f:.4}"),
    );
    let (r_f, r_n, r_r) = (mean_r["fid"], mean_r["rfid-noguide"], mean_r["rfid"]);
    let c8 = outcome(
        "criterion 8 (directional attention ratio)",
        r_r > r_n && r_n > r_f,
        format!("mean r_pos/neg: rfid {r_r:.4}, rfid-noguide {r_n:.4}, fid {r_f:.4}"),
    );
    let min_acc = rfid_dev_acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let c9 = outcome(
        "criterion 9 (rationale-head quality)",
        probe_acc >= 0.95 && min_acc >= 0.9,
        format!("bag-of-words probe oracle {probe_acc:.4} (needs ≥0.95), min rfid dev rationale accuracy {min_acc:.4} (needs ≥0.9)"),
    );
    (c7, c8, c9)
}

/// Logistic regression on per-passage token counts, split by whether the
/// token also occurs in the question (rationality is question-relative, so
/// an unconditioned count vector carries no signal). Returns dev accuracy.
fn bow_probe_accuracy(train_set: &[QAExample], dev: &[QAExample], vocab: &Vocabulary) -> f64 {
    let featurize = |ex: &QAExample| -> Vec<(Vec<f64>, f64)> {
        let q: HashSet<&str> = ex.question.split_whitespace().collect();
        ex.passages
            .iter()
            .zip(&ex.labels)
            .map(|(p, &b)| {
                let mut f = vec![0.0; 2 * vocab.len()];
                for tok in p.context.split_whitespace() {
                    let block = if q.contains(tok) { 0 } else { vocab.len() };
                    f[block + vocab.id(tok)] += 1.0;
                }
                (f, b as usize as f64)
            })
            .collect()
    };
    let train_rows: Vec<(Vec<f64>, f64)> = train_set.iter().flat_map(&featurize).collect();
    let dev_rows: Vec<(Vec<f64>, f64)> = dev.iter().flat_map(&featurize).collect();

    let dim = 2 * vocab.len();
    let mut w = Array2::<f64>::zeros((dim, 1));
    let mut b = 0.0;
    let lr = 2.0;
    let n = train_rows.len() as f64;
    for _ in 0..400 {
        let mut gw = Array2::<f64>::zeros((dim, 1));
        let mut gb = 0.0;
        for (f, y) in &train_rows {
            let z: f64 = f.iter().zip(w.iter()).map(|(a, c)| a * c).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - y;
            for (i, &x) in f.iter().enumerate() {
                if x != 0.0 {
                    gw[[i, 0]] += err * x;
                }
            }
            gb += err;
        }
        w = &w - &(gw * (lr / n));
        b -= lr * gb / n;
    }
    let correct = dev_rows
        .iter()
        .filter(|(f, y)| {
            let z: f64 = f.iter().zip(w.iter()).map(|(a, c)| a * c).sum::<f64>() + b;
            (z > 0.0) == (*y > 0.5)
        })
        .count();
    correct as f64 / dev_rows.len() as f64
}

// --- 10: byte-identical reruns ----------------------------------------------------

fn criterion_10_reproducibility() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_rfid");
    let tmp = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "command {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let path = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();

    let mut details = Vec::new();
    let mut all_ok = true;
    for round in ["a", "b"] {
        let data = path(&format!("data-{round}"));
        run(&[
            "gen-data",
            "--out-dir",
            &data,
            "--n-train",
            "64",
            "--n-dev",
            "16",
            "--n-test",
            "16",
        ]);
        let out = path(&format!("run-{round}"));
        run(&[
            "train",
            "--data-dir",
            &data,
            "--out-dir",
            &out,
            "--d-model",
            "16",
            "--n-enc-layers",
            "1",
            "--n-dec-layers",
            "1",
            "--n-heads",
            "2",
            "--steps",
            "30",
            "--eval-interval",
            "15",
        ]);
        run(&[
            "eval",
            "--checkpoint",
            &path(&format!("run-{round}/model.ckpt")),
            "--data",
            &path(&format!("data-{round}/dev.jsonl")),
            "--vocab",
            &path(&format!("data-{round}/vocab.txt")),
            "--json",
            &path(&format!("eval-{round}.json")),
        ]);
        run(&[
            "analyze",
            "--checkpoint",
            &path(&format!("run-{round}/model.ckpt")),
            "--data",
            &path(&format!("data-{round}/dev.jsonl")),
            "--vocab",
            &path(&format!("data-{round}/vocab.txt")),
            "--json",
            &path(&format!("analyze-{round}.json")),
        ]);
    }

    let byte_eq = |a: &str, b: &str| -> bool {
        std::fs::read(tmp.path().join(a)).unwrap() == std::fs::read(tmp.path().join(b)).unwrap()
    };
    for f in [
        "train.jsonl",
        "train.labels.jsonl",
        "dev.jsonl",
        "test.jsonl",
        "vocab.txt",
    ] {
        let ok = byte_eq(&format!("data-a/{f}"), &format!("data-b/{f}"));
        all_ok &= ok;
        if !ok {
            details.push(format!("gen-data {f} differs"));
        }
    }
    let ckpt_ok = byte_eq("run-a/model.ckpt", "run-b/model.ckpt");
    all_ok &= ckpt_ok;
    if !ckpt_ok {
        details.push("checkpoints differ".into());
    }
    // metrics match once the wall-clock column is dropped
    let strip = |p: &Path| -> String {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_default())
            .collect::<Vec<_>>()
            .join("\n")
    };
    let csv_ok = strip(&tmp.path().join("run-a/metrics.csv"))
        == strip(&tmp.path().join("run-b/metrics.csv"));
    all_ok &= csv_ok;
    if !csv_ok {
        details.push("metrics (minus wall clock) differ".into());
    }
    for f in ["eval", "analyze"] {
        let ok = byte_eq(&format!("{f}-a.json"), &format!("{f}-b.json"));
        all_ok &= ok;
        if !ok {
            details.push(format!("{f} reports differ"));
        }
    }

    outcome(
        "criterion 10 (reproducibility)",
        all_ok,
        if details.is_empty() {
            "gen-data/train/eval/analyze artifacts byte-identical across reruns".into()
        } else {
            details.join("; ")
        },
    )
}
