//! Losses, the AdamW loop, checkpointing and gradient verification.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{QAExample, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::graph::{NodeId, Tape};
use crate::model::{Model, ModelConfig, Parameters, TokenizedExample, RATIONALE_TENSORS};

/// Which training objective and decoder wiring to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Plain fusion reader: no rationale loss, no guidance.
    Fid,
    /// Rationale loss plus decoder guidance embeddings.
    Rfid,
    /// Rationale loss only; the decoder memory is unguided.
    RfidNoGuide,
}

impl Variant {
    pub fn guide_decoder(self) -> bool {
        matches!(self, Variant::Rfid)
    }

    pub fn uses_rationale_loss(self) -> bool {
        !matches!(self, Variant::Fid)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Fid => "fid",
            Variant::Rfid => "rfid",
            Variant::RfidNoGuide => "rfid-noguide",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fid" => Ok(Variant::Fid),
            "rfid" => Ok(Variant::Rfid),
            "rfid-noguide" => Ok(Variant::RfidNoGuide),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected fid, rfid or rfid-noguide"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Weight on the rationale loss in the total; unit by default.
    pub ratn_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            weight_decay: 0.01,
            batch_size: 16,
            total_steps: 5000,
            eval_interval: 200,
            seed: 0,
            variant: Variant::Rfid,
            ratn_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("batch_size and eval_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// The per-step loss ledger. `total` is exactly `ratn + fid`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ratn: f64,
    pub fid: f64,
    pub total: f64,
}

/// Combine the two losses per the variant. The FiD variant carries no
/// rationale term at all.
pub fn total_loss(ratn: f64, fid: f64, variant: Variant) -> Result<LossBreakdown> {
    if !ratn.is_finite() || !fid.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss: ratn={ratn}, fid={fid}"
        )));
    }
    let ratn = if variant.uses_rationale_loss() { ratn } else { 0.0 };
    Ok(LossBreakdown {
        ratn,
        fid,
        total: ratn + fid,
    })
}

/// Tape node for the rationale loss: softmax cross-entropy of the K
/// per-passage logit pairs against the gold labels, averaged over K.
pub fn rationale_loss_node(t: &mut Tape, logit_nodes: &[NodeId], labels: &[bool]) -> NodeId {
    assert_eq!(logit_nodes.len(), labels.len());
    let cat = t.concat_rows(logit_nodes);
    let targets: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let active = vec![true; labels.len()];
    t.cross_entropy(cat, &targets, &active)
}

/// Plain-value rationale loss for direct use in tests and reports.
pub fn rationale_loss(logits: &[Array2<f64>], labels: &[bool]) -> f64 {
    let mut t = Tape::new();
    let nodes: Vec<NodeId> = logits.iter().map(|l| t.constant(l.clone())).collect();
    let n = rationale_loss_node(&mut t, &nodes, labels);
    t.scalar(n)
}

/// Tape node for the sequence loss: token-level cross-entropy averaged over
/// non-PAD target positions.
pub fn seq2seq_loss_node(
    t: &mut Tape,
    target_logits: NodeId,
    target_ids: &[usize],
    target_mask: &[bool],
) -> NodeId {
    t.cross_entropy(target_logits, target_ids, target_mask)
}

pub fn seq2seq_loss(logits: &Array2<f64>, target_ids: &[usize], target_mask: &[bool]) -> f64 {
    let mut t = Tape::new();
    let n = t.constant(logits.clone());
    let l = seq2seq_loss_node(&mut t, n, target_ids, target_mask);
    t.scalar(l)
}

/// Gradients keyed by parameter name. Missing entries mean zero.
pub type GradMap = IndexMap<String, Array2<f64>>;

/// Run one example through the model, build the variant's loss, and return
/// (breakdown, gradients). `forced_preds` pins the embedding lookup for
/// finite-difference checks.
pub fn example_grads(
    model: &Model,
    ex: &TokenizedExample,
    variant: Variant,
    ratn_weight: f64,
    forced_preds: Option<&[usize]>,
) -> (LossBreakdown, GradMap) {
    let mut fwd = model.forward_with(ex, false, forced_preds);
    let ratn_node = rationale_loss_node(&mut fwd.tape, &fwd.rationale_logits, &ex.labels);
    let fid_node = seq2seq_loss_node(&mut fwd.tape, fwd.target_logits, &ex.target_ids, &ex.target_mask);
    let (loss_node, ratn_val) = if variant.uses_rationale_loss() {
        let scaled = fwd.tape.scale(ratn_node, ratn_weight);
        let total = fwd.tape.add(scaled, fid_node);
        (total, fwd.tape.scalar(ratn_node))
    } else {
        (fid_node, 0.0)
    };
    let fid_val = fwd.tape.scalar(fid_node);
    let grads = fwd.tape.backward(loss_node);
    let mut map = GradMap::new();
    for (name, node) in fwd.param_nodes.iter() {
        if let Some(g) = &grads[node] {
            map.insert(name.to_string(), g.clone());
        }
    }
    let breakdown = LossBreakdown {
        ratn: ratn_val,
        fid: fid_val,
        total: if variant.uses_rationale_loss() {
            ratn_weight * ratn_val + fid_val
        } else {
            fid_val
        },
    };
    (breakdown, map)
}

/// Forward-only loss of one example, used by the finite-difference probe.
pub fn example_loss(
    model: &Model,
    ex: &TokenizedExample,
    variant: Variant,
    ratn_weight: f64,
    forced_preds: Option<&[usize]>,
) -> LossBreakdown {
    let mut fwd = model.forward_with(ex, false, forced_preds);
    let ratn_node = rationale_loss_node(&mut fwd.tape, &fwd.rationale_logits, &ex.labels);
    let fid_node =
        seq2seq_loss_node(&mut fwd.tape, fwd.target_logits, &ex.target_ids, &ex.target_mask);
    let ratn = if variant.uses_rationale_loss() {
        fwd.tape.scalar(ratn_node)
    } else {
        0.0
    };
    let fid = fwd.tape.scalar(fid_node);
    LossBreakdown {
        ratn,
        fid,
        total: if variant.uses_rationale_loss() {
            ratn_weight * ratn + fid
        } else {
            fid
        },
    }
}

/// AdamW with decoupled weight decay. Frozen tensors are skipped entirely.
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: IndexMap<String, Array2<f64>>,
    v: IndexMap<String, Array2<f64>>,
    pub frozen: HashSet<String>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, frozen: HashSet<String>) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
            frozen,
        }
    }

    pub fn update(&mut self, params: &mut Parameters, grads: &GradMap) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let zero_like = |p: &Array2<f64>| Array2::<f64>::zeros(p.raw_dim());
        for (name, p) in params.iter_mut() {
            if self.frozen.contains(name) {
                continue;
            }
            let g = grads.get(name);
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| zero_like(p));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| zero_like(p));
            // decoupled decay first, then the adaptive step
            p.mapv_inplace(|x| x * (1.0 - self.lr * self.weight_decay));
            for idx in 0..p.len() {
                let (r, c) = (idx / p.ncols(), idx % p.ncols());
                let gi = g.map_or(0.0, |g| g[[r, c]]);
                m[[r, c]] = self.beta1 * m[[r, c]] + (1.0 - self.beta1) * gi;
                v[[r, c]] = self.beta2 * v[[r, c]] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[[r, c]] / bc1;
                let vhat = v[[r, c]] / bc2;
                p[[r, c]] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Frozen-tensor set for a variant: FiD never touches the rationale head
/// or the guidance table.
pub fn frozen_tensors(variant: Variant) -> HashSet<String> {
    if variant.uses_rationale_loss() {
        HashSet::new()
    } else {
        RATIONALE_TENSORS.iter().map(|s| s.to_string()).collect()
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub l_ratn: f64,
    pub l_fid: f64,
    pub l_total: f64,
    pub dev_em: f64,
    pub dev_ratn_acc: f64,
    pub wall_clock_s: f64,
}

pub struct TrainOutcome {
    /// Best-dev model (selected on dev EM; earliest step wins ties).
    pub model: Model,
    pub best_dev_em: f64,
    pub best_step: usize,
    /// Loss ledger for every optimizer step, step 1..=total_steps.
    pub history: Vec<LossBreakdown>,
    pub rows: Vec<MetricsRow>,
}

pub struct TrainSink<'a> {
    pub checkpoint: Option<&'a Path>,
    pub metrics_csv: Option<&'a Path>,
}

impl TrainSink<'_> {
    pub fn none() -> Self {
        TrainSink {
            checkpoint: None,
            metrics_csv: None,
        }
    }
}

const METRICS_HEADER: &str = "step,L_ratn,L_FiD,L_total,dev_EM,dev_ratn_acc,wall_clock_s";

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
            r.step, r.l_ratn, r.l_fid, r.l_total, r.dev_em, r.dev_ratn_acc, r.wall_clock_s
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Minibatch training of the variant's total loss, with dev evaluation
/// every `eval_interval` steps and best-dev checkpoint selection. Fully
/// seed-deterministic: batch order flows from `cfg.seed` alone.
pub fn train(
    train_set: &[QAExample],
    dev_set: &[QAExample],
    vocab: &Vocabulary,
    mut mcfg: ModelConfig,
    cfg: &TrainConfig,
    sink: &TrainSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    mcfg.guide_decoder = cfg.variant.guide_decoder();
    let mut model = Model::init(mcfg)?;

    let train_tok: Vec<TokenizedExample> = train_set
        .iter()
        .map(|ex| TokenizedExample::from_example(ex, vocab, &model.cfg))
        .collect::<Result<_>>()?;

    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(0x62617463); // "batc"
    let mut order: Vec<usize> = (0..train_tok.len()).collect();
    order.shuffle(&mut batch_rng);
    let mut cursor = 0usize;

    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, frozen_tensors(cfg.variant));
    let started = Instant::now();
    let mut history: Vec<LossBreakdown> = Vec::with_capacity(cfg.total_steps);
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, model.params.clone());

    let eval_dev = |model: &Model| -> Result<(f64, f64)> {
        let report = evaluate(dev_set, model, vocab)?;
        Ok((report.exact_match, report.ratn_accuracy))
    };

    // step-0 row: losses on the first batch before any update
    {
        let first: Vec<usize> = (0..cfg.batch_size.min(train_tok.len()))
            .map(|i| order[i % order.len()])
            .collect();
        let (breakdown, _) = batch_grads(&model, &train_tok, &first, cfg)?;
        let (dev_em, dev_acc) = if dev_set.is_empty() {
            (0.0, 0.0)
        } else {
            eval_dev(&model)?
        };
        if dev_em > best.0 {
            best = (dev_em, 0, model.params.clone());
        }
        rows.push(MetricsRow {
            step: 0,
            l_ratn: breakdown.ratn,
            l_fid: breakdown.fid,
            l_total: breakdown.total,
            dev_em,
            dev_ratn_acc: dev_acc,
            wall_clock_s: started.elapsed().as_secs_f64(),
        });
    }

    for step in 1..=cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (breakdown, grads) = match batch_grads(&model, &train_tok, &batch, cfg) {
            Ok(v) => v,
            Err(e) => {
                // retain the last-good parameters before reporting failure
                if let Some(path) = sink.checkpoint {
                    model.save(path)?;
                }
                if let Some(path) = sink.metrics_csv {
                    write_metrics(path, &rows)?;
                }
                return Err(e);
            }
        };
        opt.update(&mut model.params, &grads);
        history.push(breakdown);

        if step % cfg.eval_interval == 0 || step == cfg.total_steps {
            let (dev_em, dev_acc) = if dev_set.is_empty() {
                (0.0, 0.0)
            } else {
                eval_dev(&model)?
            };
            if dev_em > best.0 {
                best = (dev_em, step, model.params.clone());
            }
            rows.push(MetricsRow {
                step,
                l_ratn: breakdown.ratn,
                l_fid: breakdown.fid,
                l_total: breakdown.total,
                dev_em,
                dev_ratn_acc: dev_acc,
                wall_clock_s: started.elapsed().as_secs_f64(),
            });
        }
    }

    let best_model = Model {
        cfg: model.cfg.clone(),
        params: best.2,
    };
    if let Some(path) = sink.checkpoint {
        best_model.save(path)?;
    }
    if let Some(path) = sink.metrics_csv {
        write_metrics(path, &rows)?;
    }
    Ok(TrainOutcome {
        model: best_model,
        best_dev_em: best.0.max(0.0),
        best_step: best.1,
        history,
        rows,
    })
}

/// Mean loss and gradients over a batch; gradients are reduced in batch
/// order so results are independent of any internal parallelism.
fn batch_grads(
    model: &Model,
    pool: &[TokenizedExample],
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, GradMap)> {
    let per_example: Vec<(LossBreakdown, GradMap)> = batch
        .iter()
        .map(|&i| example_grads(model, &pool[i], cfg.variant, cfg.ratn_weight, None))
        .collect();
    let n = batch.len() as f64;
    let mut grads = GradMap::new();
    let (mut ratn, mut fid) = (0.0, 0.0);
    for (b, g) in per_example {
        ratn += b.ratn / n;
        fid += b.fid / n;
        for (name, grad) in g {
            match grads.get_mut(&name) {
                Some(acc) => *acc += &(grad / n),
                None => {
                    grads.insert(name, grad / n);
                }
            }
        }
    }
    let breakdown = total_loss(ratn, fid, cfg.variant)?;
    Ok((breakdown, grads))
}

// ---------------------------------------------------------------------------
// Gradient verification against central finite differences.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub n_checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub tensors: Vec<TensorCheck>,
    /// Tensors whose max relative error exceeded the tolerance.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

// Small enough that central differences almost never straddle a relu
// kink; f64 keeps the roundoff noise near 1e-11.
const FD_STEP: f64 = 1e-5;

/// Compare analytic gradients of the variant's total loss (with `pred_k`
/// pinned, keeping the loss smooth) against central finite differences on
/// a random subset of up to `samples_per_tensor` entries per tensor.
pub fn gradient_check(
    mcfg: &ModelConfig,
    variant: Variant,
    tolerance: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut cfg = mcfg.clone();
    cfg.guide_decoder = variant.guide_decoder();
    let mut model = Model::init(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x67636b); // "gck"
    let ex = random_example(&model.cfg, &mut rng);

    // pin the embedding lookup so the loss is differentiable everywhere
    let preds: Vec<usize> = {
        let fwd = model.forward(&ex, false);
        fwd.preds
    };
    let (_, analytic) = example_grads(&model, &ex, variant, 1.0, Some(&preds));
    let frozen = frozen_tensors(variant);

    let loss_at =
        |model: &Model| -> f64 { example_loss(model, &ex, variant, 1.0, Some(&preds)).total };

    let names: Vec<String> = model.params.names().map(String::from).collect();
    let mut tensors = Vec::new();
    let mut failures = Vec::new();
    let mut overall: f64 = 0.0;
    for name in names {
        if frozen.contains(&name) {
            continue;
        }
        let len = model.params.get(&name).len();
        let ncols = model.params.get(&name).ncols();
        let indices: Vec<usize> = if len <= samples_per_tensor {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, samples_per_tensor).into_vec()
        };
        let mut max_rel: f64 = 0.0;
        for idx in indices.iter() {
            let (r, c) = (idx / ncols, idx % ncols);
            let orig = model.params.get(&name)[[r, c]];
            model.params.get_mut(&name)[[r, c]] = orig + FD_STEP;
            let fp = loss_at(&model);
            model.params.get_mut(&name)[[r, c]] = orig - FD_STEP;
            let fm = loss_at(&model);
            model.params.get_mut(&name)[[r, c]] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.get(&name).map_or(0.0, |g| g[[r, c]]);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
        overall = overall.max(max_rel);
        if max_rel > tolerance {
            failures.push(name.clone());
        }
        tensors.push(TensorCheck {
            name,
            n_checked: indices.len(),
            max_rel_err: max_rel,
        });
    }
    Ok(GradCheckReport {
        tolerance,
        max_rel_err: overall,
        tensors,
        failures,
    })
}

/// Random tokenized example for verification harnesses.
pub fn random_example(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> TokenizedExample {
    let vocab_lo = crate::data::UNK + 1;
    let mut inputs = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let n = rng.gen_range(1..=cfg.max_len);
        let mut ids: Vec<usize> = (0..n).map(|_| rng.gen_range(vocab_lo..cfg.vocab_size)).collect();
        ids.resize(cfg.max_len, crate::data::PAD);
        let mut mask = vec![true; n];
        mask.resize(cfg.max_len, false);
        inputs.push(crate::data::TokenizedPair { ids, mask });
    }
    let labels: Vec<bool> = (0..cfg.k).map(|_| rng.gen_bool(0.5)).collect();
    let n_target = rng.gen_range(1..cfg.max_target_len);
    let mut target_ids: Vec<usize> = (0..n_target)
        .map(|_| rng.gen_range(vocab_lo..cfg.vocab_size))
        .collect();
    target_ids.push(EOS);
    let n = target_ids.len();
    target_ids.resize(cfg.max_target_len, crate::data::PAD);
    let mut target_mask = vec![true; n];
    target_mask.resize(cfg.max_target_len, false);
    TokenizedExample {
        inputs,
        labels,
        target_ids,
        target_mask,
    }
}
