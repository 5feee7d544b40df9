//! The fusion reader: K shared-parameter encoders, a rationale classifier
//! on each encoder's first hidden state, a two-row rationale embedding
//! table, decoder-memory assembly with optional guidance, and a pre-norm
//! transformer decoder with cross-attention tracing.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{tokenize, QAExample, TokenizedPair, Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Passages per question.
    pub k: usize,
    /// Maximum encoder input length L.
    pub max_len: usize,
    /// Hidden width d.
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Maximum decoder target length (answer tokens + EOS).
    pub max_target_len: usize,
    /// When false the rationale embedding is never appended to memory.
    pub guide_decoder: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 4,
            max_len: 32,
            d_model: 32,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 2,
            vocab_size: 0,
            max_target_len: 6,
            guide_decoder: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.k == 0
            || self.max_len == 0
            || self.n_enc_layers == 0
            || self.n_dec_layers == 0
            || self.max_target_len == 0
        {
            return Err(Error::Config("all model counts must be >= 1".into()));
        }
        if self.vocab_size <= crate::data::UNK {
            return Err(Error::Config("vocab_size must cover reserved ids".into()));
        }
        Ok(())
    }

    /// Memory rows contributed by one passage.
    pub fn block_len(&self) -> usize {
        if self.guide_decoder {
            self.max_len + 1
        } else {
            self.max_len
        }
    }
}

/// All learnable tensors, addressable by stable names. Iteration order is
/// insertion order and identical across runs with the same config.
#[derive(Debug, Clone)]
pub struct Parameters {
    tensors: IndexMap<String, Array2<f64>>,
}

impl Parameters {
    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.tensors.get_mut(name).expect("unknown parameter")
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Names of the tensors owned by the rationale task: the classifier and
/// the guidance embedding table.
pub const RATIONALE_TENSORS: [&str; 3] = ["ratn.w", "ratn.b", "ratn_emb"];

pub struct Model {
    pub cfg: ModelConfig,
    pub params: Parameters,
}

fn linear_names(prefix: &str) -> [String; 2] {
    [format!("{prefix}.w"), format!("{prefix}.b")]
}

fn attn_prefixes(prefix: &str) -> [String; 4] {
    ["q", "k", "v", "o"].map(|p| format!("{prefix}.{p}"))
}

/// Weight-init standard deviation. Deliberately large for a desk-scale
/// model: small-variance starts keep the tied logits near zero and push
/// the answer-copy transition thousands of steps out.
const INIT_STD: f64 = 0.15;

impl Model {
    /// Fresh model with seed-deterministic initialization.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0x696e6974); // "init"
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let d = cfg.d_model;
        let ff = 4 * d;
        let v = cfg.vocab_size;

        let mut tensors: IndexMap<String, Array2<f64>> = IndexMap::new();
        let randn = |shape: (usize, usize), rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn(shape, |_| normal.sample(rng))
        };

        let add_linear =
            |tensors: &mut IndexMap<String, Array2<f64>>,
             prefix: &str,
             shape: (usize, usize),
             rng: &mut ChaCha8Rng| {
                let [w, b] = linear_names(prefix);
                tensors.insert(w, Array2::from_shape_fn(shape, |_| normal.sample(rng)));
                tensors.insert(b, Array2::zeros((1, shape.1)));
            };
        let add_ln = |tensors: &mut IndexMap<String, Array2<f64>>, prefix: &str, d: usize| {
            tensors.insert(format!("{prefix}.g"), Array2::ones((1, d)));
            tensors.insert(format!("{prefix}.b"), Array2::zeros((1, d)));
        };

        tensors.insert("enc.tok_emb".into(), randn((v, d), &mut rng));
        for i in 0..cfg.n_enc_layers {
            add_ln(&mut tensors, &format!("enc.{i}.ln1"), d);
            for p in attn_prefixes(&format!("enc.{i}.attn")) {
                add_linear(&mut tensors, &p, (d, d), &mut rng);
            }
            add_ln(&mut tensors, &format!("enc.{i}.ln2"), d);
            add_linear(&mut tensors, &format!("enc.{i}.ffn.1"), (d, ff), &mut rng);
            add_linear(&mut tensors, &format!("enc.{i}.ffn.2"), (ff, d), &mut rng);
        }
        add_ln(&mut tensors, "enc.ln_f", d);

        tensors.insert("dec.tok_emb".into(), randn((v, d), &mut rng));
        for i in 0..cfg.n_dec_layers {
            add_ln(&mut tensors, &format!("dec.{i}.ln1"), d);
            for p in attn_prefixes(&format!("dec.{i}.self")) {
                add_linear(&mut tensors, &p, (d, d), &mut rng);
            }
            add_ln(&mut tensors, &format!("dec.{i}.ln2"), d);
            for p in attn_prefixes(&format!("dec.{i}.cross")) {
                add_linear(&mut tensors, &p, (d, d), &mut rng);
            }
            add_ln(&mut tensors, &format!("dec.{i}.ln3"), d);
            add_linear(&mut tensors, &format!("dec.{i}.ffn.1"), (d, ff), &mut rng);
            add_linear(&mut tensors, &format!("dec.{i}.ffn.2"), (ff, d), &mut rng);
        }
        add_ln(&mut tensors, "dec.ln_f", d);
        // output projection is tied to the decoder token embedding; only a
        // per-vocabulary bias is a separate parameter
        tensors.insert("out.b".into(), Array2::zeros((1, v)));
        add_linear(&mut tensors, "ratn", (d, 2), &mut rng);
        tensors.insert("ratn_emb".into(), randn((2, d), &mut rng));

        Ok(Self {
            cfg,
            params: Parameters { tensors },
        })
    }

    /// Push every parameter onto a tape; returns name -> leaf node id.
    pub fn stage(&self, tape: &mut Tape) -> ParamNodes {
        let mut ids = IndexMap::new();
        for (name, tensor) in self.params.iter() {
            ids.insert(name.to_string(), tape.constant(tensor.clone()));
        }
        ParamNodes { ids }
    }
}

pub struct ParamNodes {
    ids: IndexMap<String, NodeId>,
}

impl ParamNodes {
    pub fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> + '_ {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Positional amplitude relative to the 0.15-std token embeddings.
/// Unit-amplitude sinusoids drown token identity entirely, and very
/// strong ones make answer extraction a fixed-position lookup that needs
/// no content discrimination. 0.08 keeps positions usable without handing
/// the decoder a position-only shortcut.
const PE_SCALE: f64 = 0.08;

/// Sinusoidal position encodings, rows 0..len.
pub fn positional_encoding(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, j)| {
        let i = j / 2;
        let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
        let raw = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        PE_SCALE * raw
    })
}

fn linear(t: &mut Tape, pn: &ParamNodes, prefix: &str, x: NodeId) -> NodeId {
    let y = t.matmul(x, pn.id(&format!("{prefix}.w")));
    t.add_bias(y, pn.id(&format!("{prefix}.b")))
}

fn layer_norm(t: &mut Tape, pn: &ParamNodes, prefix: &str, x: NodeId) -> NodeId {
    t.layer_norm(x, pn.id(&format!("{prefix}.g")), pn.id(&format!("{prefix}.b")))
}

/// Multi-head attention. `mask[r][c]` marks which key positions row `r`
/// may attend to. Returns the output and, per head, the post-softmax
/// attention node.
fn multi_head_attention(
    t: &mut Tape,
    pn: &ParamNodes,
    prefix: &str,
    queries: NodeId,
    keys: NodeId,
    mask: &[Vec<bool>],
    n_heads: usize,
) -> (NodeId, Vec<NodeId>) {
    let d = t.value(queries).ncols();
    let dh = d / n_heads;
    let q = linear(t, pn, &format!("{prefix}.q"), queries);
    let k = linear(t, pn, &format!("{prefix}.k"), keys);
    let v = linear(t, pn, &format!("{prefix}.v"), keys);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = t.slice_cols(q, h * dh, dh);
        let kh = t.slice_cols(k, h * dh, dh);
        let vh = t.slice_cols(v, h * dh, dh);
        let scores = t.matmul_t(qh, kh);
        let scaled = t.scale(scores, scale);
        let p = t.masked_softmax(scaled, mask);
        let ctx = t.matmul(p, vh);
        heads.push(ctx);
        probs.push(p);
    }
    let cat = t.concat_cols(&heads);
    let out = linear(t, pn, &format!("{prefix}.o"), cat);
    (out, probs)
}

fn ffn(t: &mut Tape, pn: &ParamNodes, prefix: &str, x: NodeId) -> NodeId {
    let h = linear(t, pn, &format!("{prefix}.1"), x);
    let h = t.relu(h);
    linear(t, pn, &format!("{prefix}.2"), h)
}

/// One shared-parameter encoder pass over a single question+passage pair.
/// Output is the LxD hidden-state matrix.
pub fn encode(t: &mut Tape, pn: &ParamNodes, cfg: &ModelConfig, pair: &TokenizedPair) -> NodeId {
    debug_assert_eq!(pair.ids.len(), cfg.max_len);
    let emb = t.gather(pn.id("enc.tok_emb"), &pair.ids);
    let pe = t.constant(positional_encoding(cfg.max_len, cfg.d_model));
    let mut x = t.add(emb, pe);
    // every query row may attend to all non-PAD keys
    let mask: Vec<Vec<bool>> = (0..cfg.max_len).map(|_| pair.mask.clone()).collect();
    for i in 0..cfg.n_enc_layers {
        let h = layer_norm(t, pn, &format!("enc.{i}.ln1"), x);
        let (attn, _) = multi_head_attention(
            t,
            pn,
            &format!("enc.{i}.attn"),
            h,
            h,
            &mask,
            cfg.n_heads,
        );
        x = t.add(x, attn);
        let h = layer_norm(t, pn, &format!("enc.{i}.ln2"), x);
        let f = ffn(t, pn, &format!("enc.{i}.ffn"), h);
        x = t.add(x, f);
    }
    layer_norm(t, pn, "enc.ln_f", x)
}

/// Binary rationale logits from the first hidden state of one encoder.
pub fn classify_rationale(t: &mut Tape, pn: &ParamNodes, states: NodeId) -> NodeId {
    let first = t.gather(states, &[0]);
    linear(t, pn, "ratn", first)
}

/// Argmax with ties resolving to 0 (spurious).
pub fn predict_label(logits: &Array2<f64>) -> usize {
    usize::from(logits[[0, 1]] > logits[[0, 0]])
}

/// Concatenate per-passage blocks into the decoder memory. When guiding,
/// each block is extended with the rationale embedding row selected by the
/// predicted label; that position is always attendable.
pub fn assemble_decoder_memory(
    t: &mut Tape,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    states: &[NodeId],
    masks: &[Vec<bool>],
    preds: &[usize],
    guide: bool,
) -> (NodeId, Vec<bool>) {
    assert_eq!(states.len(), preds.len());
    assert_eq!(states.len(), masks.len());
    assert!(preds.iter().all(|&p| p <= 1), "preds must be 0 or 1");
    let mut blocks = Vec::with_capacity(states.len());
    let mut mem_mask = Vec::new();
    for ((&s, m), &p) in states.iter().zip(masks).zip(preds) {
        if guide {
            let ratn = t.gather(pn.id("ratn_emb"), &[p]);
            blocks.push(t.concat_rows(&[s, ratn]));
            mem_mask.extend_from_slice(m);
            mem_mask.push(true);
        } else {
            blocks.push(s);
            mem_mask.extend_from_slice(m);
        }
    }
    let _ = cfg;
    (t.concat_rows(&blocks), mem_mask)
}

/// Decoder pass over a teacher-forced prefix. Returns vocabulary logits per
/// position and, when tracing, the post-softmax cross-attention nodes
/// indexed `[layer][head]`.
pub fn decode(
    t: &mut Tape,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    prefix_ids: &[usize],
    memory: NodeId,
    mem_mask: &[bool],
    trace: bool,
) -> (NodeId, Option<Vec<Vec<NodeId>>>) {
    assert_eq!(prefix_ids.first(), Some(&BOS), "prefix must begin with BOS");
    assert!(
        prefix_ids.len() <= cfg.max_target_len,
        "prefix exceeds max target length"
    );
    let n = prefix_ids.len();
    let emb = t.gather(pn.id("dec.tok_emb"), prefix_ids);
    let pe = t.constant(positional_encoding(n, cfg.d_model));
    let mut x = t.add(emb, pe);
    let causal: Vec<Vec<bool>> = (0..n).map(|r| (0..n).map(|c| c <= r).collect()).collect();
    let cross_mask: Vec<Vec<bool>> = (0..n).map(|_| mem_mask.to_vec()).collect();
    let mut traces = Vec::with_capacity(cfg.n_dec_layers);
    for i in 0..cfg.n_dec_layers {
        let h = layer_norm(t, pn, &format!("dec.{i}.ln1"), x);
        let (attn, _) = multi_head_attention(
            t,
            pn,
            &format!("dec.{i}.self"),
            h,
            h,
            &causal,
            cfg.n_heads,
        );
        x = t.add(x, attn);
        let h = layer_norm(t, pn, &format!("dec.{i}.ln2"), x);
        let (cross, probs) = multi_head_attention(
            t,
            pn,
            &format!("dec.{i}.cross"),
            h,
            memory,
            &cross_mask,
            cfg.n_heads,
        );
        x = t.add(x, cross);
        let h = layer_norm(t, pn, &format!("dec.{i}.ln3"), x);
        let f = ffn(t, pn, &format!("dec.{i}.ffn"), h);
        x = t.add(x, f);
        traces.push(probs);
    }
    let x = layer_norm(t, pn, "dec.ln_f", x);
    // tied output head: logits against the decoder embedding table, plus a
    // vocabulary bias. Tying collapses the long plateau where the copy
    // circuit has to relearn a value->logit map the embedding already has.
    let z = t.matmul_t(x, pn.id("dec.tok_emb"));
    let logits = t.add_bias(z, pn.id("out.b"));
    (logits, trace.then_some(traces))
}

/// Decoder cross-attention values, post-softmax, indexed by
/// `[layer][head][step][memory position]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub ca: Vec<Vec<Vec<Vec<f64>>>>,
}

impl AttentionTrace {
    pub fn n_layers(&self) -> usize {
        self.ca.len()
    }
    pub fn n_heads(&self) -> usize {
        self.ca.first().map_or(0, |l| l.len())
    }
    pub fn n_steps(&self) -> usize {
        self.ca.first().and_then(|l| l.first()).map_or(0, |h| h.len())
    }
    pub fn mem_len(&self) -> usize {
        self.ca
            .first()
            .and_then(|l| l.first())
            .and_then(|h| h.first())
            .map_or(0, |s| s.len())
    }

    fn from_nodes(tape: &Tape, nodes: &[Vec<NodeId>], rows: std::ops::Range<usize>) -> Self {
        let ca = nodes
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|&p| {
                        let v = tape.value(p);
                        rows.clone().map(|r| v.row(r).to_vec()).collect()
                    })
                    .collect()
            })
            .collect();
        Self { ca }
    }
}

/// A QA example tokenized under a model config.
#[derive(Debug, Clone)]
pub struct TokenizedExample {
    pub inputs: Vec<TokenizedPair>,
    pub labels: Vec<bool>,
    /// Gold target ids: answer tokens then EOS, right-padded.
    pub target_ids: Vec<usize>,
    pub target_mask: Vec<bool>,
}

impl TokenizedExample {
    pub fn from_example(ex: &QAExample, vocab: &Vocabulary, cfg: &ModelConfig) -> Result<Self> {
        if ex.passages.len() != cfg.k {
            return Err(Error::Data(format!(
                "example {} has {} passages, model expects K={}",
                ex.id,
                ex.passages.len(),
                cfg.k
            )));
        }
        let inputs = ex
            .passages
            .iter()
            .map(|p| tokenize(&crate::data::format_input(&ex.question, p), vocab, cfg.max_len))
            .collect();
        let mut target_ids: Vec<usize> = ex.answers[0]
            .split_whitespace()
            .take(cfg.max_target_len - 1)
            .map(|t| vocab.id(t))
            .collect();
        target_ids.push(EOS);
        let n = target_ids.len();
        target_ids.resize(cfg.max_target_len, PAD);
        let mut target_mask = vec![true; n];
        target_mask.resize(cfg.max_target_len, false);
        Ok(Self {
            inputs,
            labels: ex.labels.clone(),
            target_ids,
            target_mask,
        })
    }

    /// Teacher-forcing prefix: BOS followed by the shifted target.
    pub fn prefix_ids(&self) -> Vec<usize> {
        let mut p = Vec::with_capacity(self.target_ids.len());
        p.push(BOS);
        p.extend_from_slice(&self.target_ids[..self.target_ids.len() - 1]);
        p
    }
}

/// Everything a full forward pass produces, with the tape retained so the
/// caller can run backward.
pub struct ForwardPass {
    pub tape: Tape,
    pub param_nodes: ParamNodes,
    /// Per-passage 1x2 rationale logit nodes.
    pub rationale_logits: Vec<NodeId>,
    pub preds: Vec<usize>,
    pub target_logits: NodeId,
    pub trace: Option<AttentionTrace>,
}

impl Model {
    /// Compose encode -> classify -> assemble -> teacher-forced decode.
    /// The embedding lookup uses the classifier's own `pred_k`.
    pub fn forward(&self, ex: &TokenizedExample, trace: bool) -> ForwardPass {
        self.forward_with(ex, trace, None)
    }

    /// Like [`Model::forward`] but with the rationale predictions pinned,
    /// which keeps the loss smooth for finite-difference checks.
    pub fn forward_with(
        &self,
        ex: &TokenizedExample,
        trace: bool,
        forced_preds: Option<&[usize]>,
    ) -> ForwardPass {
        let mut tape = Tape::new();
        let pn = self.stage(&mut tape);
        let mut states = Vec::with_capacity(self.cfg.k);
        let mut masks = Vec::with_capacity(self.cfg.k);
        let mut logits = Vec::with_capacity(self.cfg.k);
        let mut preds = Vec::with_capacity(self.cfg.k);
        for (idx, pair) in ex.inputs.iter().enumerate() {
            let h = encode(&mut tape, &pn, &self.cfg, pair);
            let l = classify_rationale(&mut tape, &pn, h);
            preds.push(match forced_preds {
                Some(f) => f[idx],
                None => predict_label(tape.value(l)),
            });
            states.push(h);
            masks.push(pair.mask.clone());
            logits.push(l);
        }
        let (memory, mem_mask) = assemble_decoder_memory(
            &mut tape,
            &pn,
            &self.cfg,
            &states,
            &masks,
            &preds,
            self.cfg.guide_decoder,
        );
        let prefix = ex.prefix_ids();
        let (target_logits, trace_nodes) =
            decode(&mut tape, &pn, &self.cfg, &prefix, memory, &mem_mask, trace);
        let trace = trace_nodes
            .map(|nodes| AttentionTrace::from_nodes(&tape, &nodes, 0..prefix.len()));
        ForwardPass {
            tape,
            param_nodes: pn,
            rationale_logits: logits,
            preds,
            target_logits,
            trace,
        }
    }

    /// Encode a question's passages once for incremental decoding.
    pub fn encode_memory(&self, inputs: &[TokenizedPair]) -> EncodedMemory {
        let mut tape = Tape::new();
        let pn = self.stage(&mut tape);
        let mut states = Vec::new();
        let mut masks = Vec::new();
        let mut logits = Vec::new();
        let mut preds = Vec::new();
        for pair in inputs {
            let h = encode(&mut tape, &pn, &self.cfg, pair);
            let l = classify_rationale(&mut tape, &pn, h);
            preds.push(predict_label(tape.value(l)));
            states.push(h);
            masks.push(pair.mask.clone());
            logits.push(tape.value(l).clone());
        }
        let (memory, mem_mask) = assemble_decoder_memory(
            &mut tape,
            &pn,
            &self.cfg,
            &states,
            &masks,
            &preds,
            self.cfg.guide_decoder,
        );
        EncodedMemory {
            memory: tape.value(memory).clone(),
            mask: mem_mask,
            rationale_logits: logits,
            preds,
        }
    }

    /// Greedy decoding from BOS until EOS or the configured target length.
    /// Ties break toward the lowest token id. Returns the detokenized
    /// answer and, when requested, the cross-attention trace over the
    /// generated steps.
    pub fn generate(
        &self,
        inputs: &[TokenizedPair],
        vocab: &Vocabulary,
        want_trace: bool,
    ) -> (String, Option<AttentionTrace>, EncodedMemory) {
        let mem = self.encode_memory(inputs);
        let mut prefix = vec![BOS];
        let mut emitted: Vec<usize> = Vec::new();
        let mut steps: Vec<Vec<Vec<Vec<f64>>>> = Vec::new(); // [step][layer][head][mem]
        while prefix.len() <= self.cfg.max_target_len {
            let mut tape = Tape::new();
            let pn = self.stage(&mut tape);
            let mem_node = tape.constant(mem.memory.clone());
            let (logits, trace_nodes) = decode(
                &mut tape,
                &pn,
                &self.cfg,
                &prefix,
                mem_node,
                &mem.mask,
                want_trace,
            );
            let last = tape.value(logits).nrows() - 1;
            let row = tape.value(logits).row(last);
            let mut best = 0usize;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            if want_trace {
                let nodes = trace_nodes.unwrap();
                steps.push(
                    nodes
                        .iter()
                        .map(|heads| {
                            heads
                                .iter()
                                .map(|&p| tape.value(p).row(last).to_vec())
                                .collect()
                        })
                        .collect(),
                );
            }
            if best == EOS {
                break;
            }
            emitted.push(best);
            prefix.push(best);
            if prefix.len() > self.cfg.max_target_len {
                break;
            }
        }
        let text = emitted
            .iter()
            .map(|&id| vocab.token(id))
            .collect::<Vec<_>>()
            .join(" ");
        let trace = want_trace.then(|| {
            let n_layers = self.cfg.n_dec_layers;
            let n_heads = self.cfg.n_heads;
            let ca = (0..n_layers)
                .map(|l| {
                    (0..n_heads)
                        .map(|h| steps.iter().map(|s| s[l][h].clone()).collect())
                        .collect()
                })
                .collect();
            AttentionTrace { ca }
        });
        (text, trace, mem)
    }
}

/// Encoder outputs fused for decoding, with per-passage rationale results.
pub struct EncodedMemory {
    pub memory: Array2<f64>,
    pub mask: Vec<bool>,
    pub rationale_logits: Vec<Array2<f64>>,
    pub preds: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: JSON header + named little-endian f32 tensors.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"RFIDCKP1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: [usize; 2],
}

impl Model {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let header = CheckpointHeader {
            config: self.cfg.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorMeta {
                    name: n.to_string(),
                    shape: [t.nrows(), t.ncols()],
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for (_, t) in self.params.iter() {
            f.write_all(&(t.nrows() as u32).to_le_bytes())?;
            f.write_all(&(t.ncols() as u32).to_le_bytes())?;
            for &x in t.iter() {
                f.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        use std::io::Read;
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let mut len = [0u8; 4];
        f.read_exact(&mut len)?;
        let mut header_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
        f.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
        // shapes are validated against a freshly initialized model so a
        // corrupt header cannot smuggle mismatched tensors in
        let mut model = Model::init(header.config.clone())?;
        let expected: Vec<(String, [usize; 2])> = model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), [t.nrows(), t.ncols()]))
            .collect();
        if header.tensors.len() != expected.len() {
            return Err(Error::Data(format!(
                "checkpoint lists {} tensors, config implies {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for (meta, (name, shape)) in header.tensors.iter().zip(&expected) {
            if &meta.name != name || &meta.shape != shape {
                return Err(Error::Data(format!(
                    "checkpoint tensor {} {:?} does not match expected {} {:?}",
                    meta.name, meta.shape, name, shape
                )));
            }
        }
        for (name, shape) in &expected {
            let mut dims = [0u8; 8];
            f.read_exact(&mut dims)?;
            let rows = u32::from_le_bytes(dims[..4].try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(dims[4..].try_into().unwrap()) as usize;
            if [rows, cols] != *shape {
                return Err(Error::Data(format!(
                    "tensor {name} has shape [{rows}, {cols}], expected {shape:?}"
                )));
            }
            let mut buf = vec![0u8; rows * cols * 4];
            f.read_exact(&mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            *model.params.get_mut(name) =
                Array2::from_shape_vec((rows, cols), data).expect("shape checked above");
        }
        Ok(model)
    }
}
