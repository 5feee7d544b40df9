use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rfid_core::data::{load_corpus, write_corpus, MatchPolicy, Vocabulary};
use rfid_core::model::{Model, ModelConfig};
use rfid_core::synth::{generate_synthetic_corpus, split_corpus, SynthesisConfig};
use rfid_core::training::{gradient_check, train, TrainConfig, TrainSink, Variant};
use rfid_core::{Error, Result};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "rfid", version, about = "Fusion reader with passage rationalization")]
struct Cli {
    /// Worker threads. Compute is currently single-threaded; the flag is
    /// accepted so callers can pass it unconditionally. RFID_THREADS works
    /// the same way.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: train/dev/test JSONL plus vocabulary.
    GenData(GenDataArgs),
    /// Train one variant and write a checkpoint plus a metrics CSV.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus file.
    Eval(EvalArgs),
    /// Cross-attention positive/negative ratio over a corpus file.
    Analyze(AnalyzeArgs),
    /// Per-question attention table for a single question id.
    Case(CaseArgs),
    /// Verify analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Train fid, rfid and rfid-noguide across seeds and compare them.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON file deserialized into the synthesis config; any omitted field
    /// takes its default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for train.jsonl, dev.jsonl, test.jsonl and vocab.txt.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_dev: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    distractor_confusability: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory produced by gen-data.
    #[arg(long)]
    data_dir: PathBuf,
    /// Where the checkpoint and metrics CSV go.
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON file with optional "model" and "train" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    ratn_weight: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    n_enc_layers: Option<usize>,
    #[arg(long)]
    n_dec_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    max_target_len: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus JSONL file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Answer-matching rule used when (re)labeling passages.
    #[arg(long, default_value = "token-boundary")]
    match_policy: PolicyArg,
    /// Also write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write per-example records as JSONL.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value = "token-boundary")]
    match_policy: PolicyArg,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct CaseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Question id to inspect.
    #[arg(long)]
    id: String,
    #[arg(long, default_value = "token-boundary")]
    match_policy: PolicyArg,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    n_heads: usize,
    #[arg(long, default_value_t = 24)]
    vocab_size: usize,
    #[arg(long, default_value = "rfid")]
    variant: Variant,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 8)]
    samples_per_tensor: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PolicyArg {
    TokenBoundary,
    RawSubstring,
}

impl From<PolicyArg> for MatchPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::TokenBoundary => MatchPolicy::TokenBoundary,
            PolicyArg::RawSubstring => MatchPolicy::RawSubstring,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Case(a) => run_case(a),
        Command::GradCheck(a) => run_grad_check(a),
        Command::Experiment(a) => run_experiment(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg: SynthesisConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => SynthesisConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.k {
        cfg.k = v;
    }
    if let Some(v) = a.n_train {
        cfg.n_train = v;
    }
    if let Some(v) = a.n_dev {
        cfg.n_dev = v;
    }
    if let Some(v) = a.n_test {
        cfg.n_test = v;
    }
    if let Some(v) = a.distractor_confusability {
        cfg.distractor_confusability = v;
    }
    let corpus = generate_synthetic_corpus(&cfg)?;
    let vocab = Vocabulary::from_corpus(&corpus);
    let (train_set, dev, test) = split_corpus(&corpus, &cfg);
    std::fs::create_dir_all(&a.out_dir)?;
    write_corpus(&a.out_dir.join("train.jsonl"), &train_set)?;
    write_corpus(&a.out_dir.join("dev.jsonl"), &dev)?;
    write_corpus(&a.out_dir.join("test.jsonl"), &test)?;
    vocab.save(&a.out_dir.join("vocab.txt"))?;
    println!(
        "wrote {} train / {} dev / {} test questions, vocab {} to {}",
        train_set.len(),
        dev.len(),
        test.len(),
        vocab.len(),
        a.out_dir.display()
    );
    let mut hist = vec![0usize; cfg.k + 1];
    for ex in &corpus {
        hist[ex.labels.iter().filter(|&&b| b).count()] += 1;
    }
    for (n, count) in hist.iter().enumerate() {
        if *count > 0 {
            println!("questions with {n} rational passages: {count}");
        }
    }
    Ok(())
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn resolve_train_configs(a: &TrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let file: TrainFileConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainFileConfig::default(),
    };
    let mut mcfg = file.model.unwrap_or_default();
    let mut tcfg = file.train.unwrap_or_default();
    if let Some(v) = a.variant {
        tcfg.variant = v;
    }
    if let Some(v) = a.seed {
        tcfg.seed = v;
        mcfg.seed = v;
    }
    if let Some(v) = a.learning_rate {
        tcfg.learning_rate = v;
    }
    if let Some(v) = a.weight_decay {
        tcfg.weight_decay = v;
    }
    if let Some(v) = a.batch_size {
        tcfg.batch_size = v;
    }
    if let Some(v) = a.steps {
        tcfg.total_steps = v;
    }
    if let Some(v) = a.eval_interval {
        tcfg.eval_interval = v;
    }
    if let Some(v) = a.ratn_weight {
        tcfg.ratn_weight = v;
    }
    if let Some(v) = a.d_model {
        mcfg.d_model = v;
    }
    if let Some(v) = a.k {
        mcfg.k = v;
    }
    if let Some(v) = a.max_len {
        mcfg.max_len = v;
    }
    if let Some(v) = a.n_enc_layers {
        mcfg.n_enc_layers = v;
    }
    if let Some(v) = a.n_dec_layers {
        mcfg.n_dec_layers = v;
    }
    if let Some(v) = a.n_heads {
        mcfg.n_heads = v;
    }
    if let Some(v) = a.max_target_len {
        mcfg.max_target_len = v;
    }
    Ok((mcfg, tcfg))
}

fn load_split(dir: &Path, name: &str, k: usize) -> Result<Vec<rfid_core::data::QAExample>> {
    load_corpus(&dir.join(name), k, MatchPolicy::TokenBoundary)
}

fn run_train(a: TrainArgs) -> Result<()> {
    let (mut mcfg, tcfg) = resolve_train_configs(&a)?;
    let vocab = Vocabulary::load(&a.data_dir.join("vocab.txt"))?;
    mcfg.vocab_size = vocab.len();
    let train_set = load_split(&a.data_dir, "train.jsonl", mcfg.k)?;
    let dev = load_split(&a.data_dir, "dev.jsonl", mcfg.k)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let ckpt = a.out_dir.join("model.ckpt");
    let csv = a.out_dir.join("metrics.csv");
    let sink = TrainSink {
        checkpoint: Some(&ckpt),
        metrics_csv: Some(&csv),
    };
    let out = train(&train_set, &dev, &vocab, mcfg, &tcfg, &sink)?;
    if let Some(last) = out.rows.last() {
        println!(
            "final dev EM {:.4}  dev rationale accuracy {:.4}",
            last.dev_em, last.dev_ratn_acc
        );
    }
    println!(
        "{}: best dev EM {:.4} at step {}; checkpoint {}",
        tcfg.variant.as_str(),
        out.best_dev_em,
        out.best_step,
        ckpt.display()
    );
    Ok(())
}

fn load_model_and_data(
    checkpoint: &Path,
    data: &Path,
    vocab_path: &Path,
    policy: MatchPolicy,
) -> Result<(Model, Vec<rfid_core::data::QAExample>, Vocabulary)> {
    let model = Model::load(checkpoint)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let corpus = load_corpus(data, model.cfg.k, policy)?;
    Ok((model, corpus, vocab))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let (model, corpus, vocab) =
        load_model_and_data(&a.checkpoint, &a.data, &a.vocab, a.match_policy.into())?;
    let report = rfid_core::eval::evaluate(&corpus, &model, &vocab)?;
    println!(
        "questions {}  EM {:.4}  ratn_acc {:.4}  ratn_p {:.4}  ratn_r {:.4}",
        report.n_questions,
        report.exact_match,
        report.ratn_accuracy,
        report.ratn_precision,
        report.ratn_recall
    );
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    if let Some(p) = &a.records {
        let mut text = String::new();
        for r in &report.per_example {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn run_analyze(a: AnalyzeArgs) -> Result<()> {
    let (model, corpus, vocab) =
        load_model_and_data(&a.checkpoint, &a.data, &a.vocab, a.match_policy.into())?;
    let report = rfid_core::analysis::ca_ratio(&corpus, &model, &vocab)?;
    match report.r_pos_neg {
        Some(r) => println!(
            "CA_pos {:.4}  CA_neg {:.4}  r_pos/neg {:.4}  ({} pos / {} neg questions)",
            report.mean_ca_pos, report.mean_ca_neg, r, report.n_questions_pos, report.n_questions_neg
        ),
        None => println!(
            "r_pos/neg undefined: {}",
            report.r_pos_neg_reason.as_deref().unwrap_or("unknown")
        ),
    }
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn run_case(a: CaseArgs) -> Result<()> {
    let (model, corpus, vocab) =
        load_model_and_data(&a.checkpoint, &a.data, &a.vocab, a.match_policy.into())?;
    let report = rfid_core::analysis::case_report(&a.id, &corpus, &model, &vocab)?;
    print!("{}", report.to_table());
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn run_grad_check(a: GradCheckArgs) -> Result<()> {
    let cfg = ModelConfig {
        k: a.k,
        max_len: a.max_len,
        d_model: a.d_model,
        n_heads: a.n_heads,
        vocab_size: a.vocab_size,
        max_target_len: 4,
        ..Default::default()
    };
    let report = gradient_check(&cfg, a.variant, a.tolerance, a.samples_per_tensor, a.seed)?;
    println!(
        "{} tensors checked, max relative error {:.3e} (tolerance {:.1e})",
        report.tensors.len(),
        report.max_rel_err,
        report.tolerance
    );
    for f in &report.failures {
        println!("FAIL {f}");
    }
    if report.passed() {
        println!("gradient check passed");
        Ok(())
    } else {
        Err(Error::Numeric("gradient check failed".into()))
    }
}

fn run_experiment(a: ExperimentArgs) -> Result<()> {
    let ta = TrainArgs {
        data_dir: a.data_dir.clone(),
        out_dir: a.out_dir.clone(),
        config: a.config.clone(),
        variant: None,
        seed: None,
        learning_rate: None,
        weight_decay: None,
        batch_size: None,
        steps: a.steps,
        eval_interval: None,
        ratn_weight: None,
        d_model: None,
        k: None,
        max_len: None,
        n_enc_layers: None,
        n_dec_layers: None,
        n_heads: None,
        max_target_len: None,
    };
    let (mut mcfg, base_tcfg) = resolve_train_configs(&ta)?;
    let vocab = Vocabulary::load(&a.data_dir.join("vocab.txt"))?;
    mcfg.vocab_size = vocab.len();
    let train_set = load_split(&a.data_dir, "train.jsonl", mcfg.k)?;
    let dev = load_split(&a.data_dir, "dev.jsonl", mcfg.k)?;
    let test = load_split(&a.data_dir, "test.jsonl", mcfg.k)?;
    if a.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    std::fs::create_dir_all(&a.out_dir)?;

    let variants = [Variant::Fid, Variant::RfidNoGuide, Variant::Rfid];
    let mut csv = String::from("variant,seed,test_em,test_ratn_acc,r_pos_neg,best_dev_em\n");
    let mut mean_em = Vec::new();
    let mut mean_r = Vec::new();
    for &variant in &variants {
        let (mut em_sum, mut r_sum, mut acc_sum) = (0.0, 0.0, 0.0);
        for &seed in &a.seeds {
            let mut m = mcfg.clone();
            m.seed = seed;
            let mut t = base_tcfg.clone();
            t.seed = seed;
            t.variant = variant;
            let run_dir = a.out_dir.join(format!("{}-seed{}", variant.as_str(), seed));
            std::fs::create_dir_all(&run_dir)?;
            let ckpt = run_dir.join("model.ckpt");
            let csv_path = run_dir.join("metrics.csv");
            let sink = TrainSink {
                checkpoint: Some(&ckpt),
                metrics_csv: Some(&csv_path),
            };
            let out = train(&train_set, &dev, &vocab, m, &t, &sink)?;
            let report = rfid_core::eval::evaluate(&test, &out.model, &vocab)?;
            let ratio = rfid_core::analysis::ca_ratio(&test, &out.model, &vocab)?;
            let r = ratio.r_pos_neg.unwrap_or(f64::NAN);
            let acc_field = if variant == Variant::Fid {
                String::new()
            } else {
                format!("{:.6}", report.ratn_accuracy)
            };
            csv.push_str(&format!(
                "{},{},{:.6},{},{:.6},{:.6}\n",
                variant.as_str(),
                seed,
                report.exact_match,
                acc_field,
                r,
                out.best_dev_em
            ));
            println!(
                "{} seed {}: test EM {:.4}  r_pos/neg {:.4}",
                variant.as_str(),
                seed,
                report.exact_match,
                r
            );
            em_sum += report.exact_match;
            r_sum += r;
            acc_sum += report.ratn_accuracy;
        }
        let n = a.seeds.len() as f64;
        let acc_field = if variant == Variant::Fid {
            String::new()
        } else {
            format!("{:.6}", acc_sum / n)
        };
        csv.push_str(&format!(
            "{},mean,{:.6},{},{:.6},\n",
            variant.as_str(),
            em_sum / n,
            acc_field,
            r_sum / n
        ));
        mean_em.push(em_sum / n);
        mean_r.push(r_sum / n);
    }
    let csv_path = a.out_dir.join("results.csv");
    std::fs::write(&csv_path, &csv)?;
    println!("wrote {}", csv_path.display());

    // variants order: fid, rfid-noguide, rfid
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "mean EM: fid {:.4}  rfid-noguide {:.4}  rfid {:.4}",
        mean_em[0], mean_em[1], mean_em[2]
    );
    println!("EM rfid > fid: {}", verdict(mean_em[2] > mean_em[0]));
    println!("EM rfid-noguide > fid: {}", verdict(mean_em[1] > mean_em[0]));
    println!(
        "mean r_pos/neg: fid {:.4}  rfid-noguide {:.4}  rfid {:.4}",
        mean_r[0], mean_r[1], mean_r[2]
    );
    println!(
        "ratio rfid > rfid-noguide > fid: {}",
        verdict(mean_r[2] > mean_r[1] && mean_r[1] > mean_r[0])
    );
    Ok(())
}
