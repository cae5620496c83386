//! Pinyin-augmented encoder–decoder transformer.
//!
//! The encoder input is a fusion embedding: per-token romanization sequences
//! are embedded symbol-wise, passed through a width-2 convolution with
//! max-pooling, and attended (as queries) over the token embeddings (keys and
//! values). The decoder consumes plain token embeddings. Sinusoidal
//! positional encodings are added to both encoder and decoder inputs.

pub mod checkpoint;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::autodiff::{concat_cols, Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::pinyin::{PinyinLexicon, PinyinSequence, ALPHABET_SIZE, DEFAULT_PINYIN_LEN};
use crate::tokenizer::{Tokenizer, EOS_ID, PAD_ID, SENTINEL_BASE, SPACE_ID, UNK_ID};

/// Hyperparameters of a [`FusionModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_size: usize,
    pub pinyin_alphabet_size: usize,
    /// Per-token romanization length.
    pub pinyin_len: usize,
    /// Convolution window over romanization symbols; fixed at 2.
    pub conv_kernel: usize,
    /// Convolution output channels; equals `d_model`.
    pub conv_filters: usize,
    pub d_ff: usize,
    pub max_gen_len: usize,
}

impl FusionModelConfig {
    /// A small configuration suitable for desk-scale experiments.
    pub fn desk(vocab_size: usize) -> Self {
        FusionModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            vocab_size,
            pinyin_alphabet_size: ALPHABET_SIZE,
            pinyin_len: DEFAULT_PINYIN_LEN,
            conv_kernel: 2,
            conv_filters: 64,
            d_ff: 256,
            max_gen_len: 32,
        }
    }

    /// A minimal configuration for gradient checks and unit tests.
    pub fn tiny(vocab_size: usize) -> Self {
        FusionModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            vocab_size,
            pinyin_alphabet_size: ALPHABET_SIZE,
            pinyin_len: DEFAULT_PINYIN_LEN,
            conv_kernel: 2,
            conv_filters: 8,
            d_ff: 32,
            max_gen_len: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.conv_kernel != 2 {
            return Err(Error::Config("conv_kernel is fixed at 2".into()));
        }
        if self.conv_filters != self.d_model {
            return Err(Error::Config("conv_filters must equal d_model".into()));
        }
        if self.pinyin_len < 2 {
            return Err(Error::Config("pinyin_len must be at least 2".into()));
        }
        if self.vocab_size == 0 || self.pinyin_alphabet_size == 0 || self.max_gen_len == 0 {
            return Err(Error::Config("sizes must be positive".into()));
        }
        Ok(())
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
}

/// Decoding strategies for [`FusionModel::generate`].
#[derive(Debug, Clone)]
pub enum Decoding {
    Greedy,
    Sampling { temperature: f64, seed: u64 },
}

/// A sentence prepared for the model: subword ids plus aligned romanization
/// symbol ids (each inner vector has length `pinyin_len`).
#[derive(Debug, Clone)]
pub struct EncodedSentence {
    pub token_ids: Vec<usize>,
    pub token_texts: Vec<String>,
    pub pinyin_ids: Vec<Vec<usize>>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Tokenize and romanize a sentence for the encoder.
pub fn prepare_sentence(
    text: &str,
    tokenizer: &dyn Tokenizer,
    lexicon: &PinyinLexicon,
    pinyin_len: usize,
) -> Result<EncodedSentence> {
    if text.trim().is_empty() {
        return Err(Error::InvalidInput("input text is empty".into()));
    }
    let tokens = tokenizer.encode(text);
    let token_ids: Vec<usize> = tokens.iter().map(|t| t.id).collect();
    let token_texts: Vec<String> = tokens.iter().map(|t| t.text.clone()).collect();
    let sequences = lexicon.align(&token_ids, &token_texts, text, pinyin_len)?;
    let pinyin_ids = sequences.iter().map(|s| s.ids()).collect();
    Ok(EncodedSentence {
        token_ids,
        token_texts,
        pinyin_ids,
    })
}

struct AttentionParams {
    wq: Param,
    wk: Param,
    wv: Param,
    wo: Param,
}

struct LayerNormParams {
    gamma: Param,
    beta: Param,
}

struct FeedForwardParams {
    w1: Param,
    b1: Param,
    w2: Param,
    b2: Param,
}

struct EncoderLayer {
    ln1: LayerNormParams,
    attn: AttentionParams,
    ln2: LayerNormParams,
    ffn: FeedForwardParams,
}

struct DecoderLayer {
    ln1: LayerNormParams,
    self_attn: AttentionParams,
    ln2: LayerNormParams,
    cross_attn: AttentionParams,
    ln3: LayerNormParams,
    ffn: FeedForwardParams,
}

/// The Pinyin-augmented encoder–decoder model.
pub struct FusionModel {
    config: FusionModelConfig,
    token_embedding: Param,
    pinyin_symbol: Param,
    pinyin_conv_w: Param,
    pinyin_conv_b: Param,
    fusion: AttentionParams,
    enc_layers: Vec<EncoderLayer>,
    enc_final_ln: LayerNormParams,
    dec_layers: Vec<DecoderLayer>,
    dec_final_ln: LayerNormParams,
    output_w: Param,
}

/// Model parameters bound onto a tape for one forward/backward pass.
pub struct Bound<'t> {
    vars: HashMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Gradients keyed by parameter name.
    pub fn grad_map(&self, grads: &Grads) -> HashMap<String, Array2<f64>> {
        let mut out = HashMap::new();
        for (name, var) in &self.vars {
            if let Some(g) = grads.get(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    // Box-Muller
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
    })
}

fn param(name: impl Into<String>, value: Array2<f64>) -> Param {
    Param {
        name: name.into(),
        value,
    }
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;
const NEG_INF: f64 = -1e9;

impl FusionModel {
    pub fn new(config: FusionModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mk_attn = |rng: &mut ChaCha8Rng, prefix: &str| AttentionParams {
            wq: param(format!("{prefix}.wq"), normal(rng, d, d, INIT_STD)),
            wk: param(format!("{prefix}.wk"), normal(rng, d, d, INIT_STD)),
            wv: param(format!("{prefix}.wv"), normal(rng, d, d, INIT_STD)),
            wo: param(format!("{prefix}.wo"), normal(rng, d, d, INIT_STD)),
        };
        let mk_ln = |prefix: &str| LayerNormParams {
            gamma: param(format!("{prefix}.gamma"), Array2::ones((1, d))),
            beta: param(format!("{prefix}.beta"), Array2::zeros((1, d))),
        };
        let mk_ffn = |rng: &mut ChaCha8Rng, prefix: &str| FeedForwardParams {
            w1: param(format!("{prefix}.w1"), normal(rng, d, config.d_ff, INIT_STD)),
            b1: param(format!("{prefix}.b1"), Array2::zeros((1, config.d_ff))),
            w2: param(format!("{prefix}.w2"), normal(rng, config.d_ff, d, INIT_STD)),
            b2: param(format!("{prefix}.b2"), Array2::zeros((1, d))),
        };

        let token_embedding = param(
            "token_embedding",
            normal(&mut rng, config.vocab_size, d, INIT_STD),
        );
        let pinyin_symbol = param(
            "pinyin.symbol_embedding",
            normal(&mut rng, config.pinyin_alphabet_size, d, INIT_STD),
        );
        let pinyin_conv_w = param("pinyin.conv.weight", normal(&mut rng, 2 * d, d, INIT_STD));
        let pinyin_conv_b = param("pinyin.conv.bias", Array2::zeros((1, d)));
        let fusion = mk_attn(&mut rng, "fusion");

        let enc_layers = (0..config.n_enc_layers)
            .map(|i| EncoderLayer {
                ln1: mk_ln(&format!("enc.{i}.ln1")),
                attn: mk_attn(&mut rng, &format!("enc.{i}.attn")),
                ln2: mk_ln(&format!("enc.{i}.ln2")),
                ffn: mk_ffn(&mut rng, &format!("enc.{i}.ffn")),
            })
            .collect();
        let enc_final_ln = mk_ln("enc.final_ln");
        let dec_layers = (0..config.n_dec_layers)
            .map(|i| DecoderLayer {
                ln1: mk_ln(&format!("dec.{i}.ln1")),
                self_attn: mk_attn(&mut rng, &format!("dec.{i}.self_attn")),
                ln2: mk_ln(&format!("dec.{i}.ln2")),
                cross_attn: mk_attn(&mut rng, &format!("dec.{i}.cross_attn")),
                ln3: mk_ln(&format!("dec.{i}.ln3")),
                ffn: mk_ffn(&mut rng, &format!("dec.{i}.ffn")),
            })
            .collect();
        let dec_final_ln = mk_ln("dec.final_ln");
        let output_w = param(
            "output.weight",
            normal(&mut rng, d, config.vocab_size, INIT_STD),
        );

        Ok(FusionModel {
            config,
            token_embedding,
            pinyin_symbol,
            pinyin_conv_w,
            pinyin_conv_b,
            fusion,
            enc_layers,
            enc_final_ln,
            dec_layers,
            dec_final_ln,
            output_w,
        })
    }

    pub fn config(&self) -> &FusionModelConfig {
        &self.config
    }

    /// All parameters, in a stable order.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![
            &self.token_embedding,
            &self.pinyin_symbol,
            &self.pinyin_conv_w,
            &self.pinyin_conv_b,
        ];
        for a in [&self.fusion] {
            out.extend([&a.wq, &a.wk, &a.wv, &a.wo]);
        }
        for l in &self.enc_layers {
            out.extend([&l.ln1.gamma, &l.ln1.beta]);
            out.extend([&l.attn.wq, &l.attn.wk, &l.attn.wv, &l.attn.wo]);
            out.extend([&l.ln2.gamma, &l.ln2.beta]);
            out.extend([&l.ffn.w1, &l.ffn.b1, &l.ffn.w2, &l.ffn.b2]);
        }
        out.extend([&self.enc_final_ln.gamma, &self.enc_final_ln.beta]);
        for l in &self.dec_layers {
            out.extend([&l.ln1.gamma, &l.ln1.beta]);
            out.extend([&l.self_attn.wq, &l.self_attn.wk, &l.self_attn.wv, &l.self_attn.wo]);
            out.extend([&l.ln2.gamma, &l.ln2.beta]);
            out.extend([&l.cross_attn.wq, &l.cross_attn.wk, &l.cross_attn.wv, &l.cross_attn.wo]);
            out.extend([&l.ln3.gamma, &l.ln3.beta]);
            out.extend([&l.ffn.w1, &l.ffn.b1, &l.ffn.w2, &l.ffn.b2]);
        }
        out.extend([&self.dec_final_ln.gamma, &self.dec_final_ln.beta]);
        out.push(&self.output_w);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.pinyin_symbol,
            &mut self.pinyin_conv_w,
            &mut self.pinyin_conv_b,
        ];
        {
            let a = &mut self.fusion;
            out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
        }
        for l in &mut self.enc_layers {
            out.extend([&mut l.ln1.gamma, &mut l.ln1.beta]);
            out.extend([&mut l.attn.wq, &mut l.attn.wk, &mut l.attn.wv, &mut l.attn.wo]);
            out.extend([&mut l.ln2.gamma, &mut l.ln2.beta]);
            out.extend([&mut l.ffn.w1, &mut l.ffn.b1, &mut l.ffn.w2, &mut l.ffn.b2]);
        }
        out.extend([&mut self.enc_final_ln.gamma, &mut self.enc_final_ln.beta]);
        for l in &mut self.dec_layers {
            out.extend([&mut l.ln1.gamma, &mut l.ln1.beta]);
            out.extend([
                &mut l.self_attn.wq,
                &mut l.self_attn.wk,
                &mut l.self_attn.wv,
                &mut l.self_attn.wo,
            ]);
            out.extend([&mut l.ln2.gamma, &mut l.ln2.beta]);
            out.extend([
                &mut l.cross_attn.wq,
                &mut l.cross_attn.wk,
                &mut l.cross_attn.wv,
                &mut l.cross_attn.wo,
            ]);
            out.extend([&mut l.ln3.gamma, &mut l.ln3.beta]);
            out.extend([&mut l.ffn.w1, &mut l.ffn.b1, &mut l.ffn.w2, &mut l.ffn.b2]);
        }
        out.extend([&mut self.dec_final_ln.gamma, &mut self.dec_final_ln.beta]);
        out.push(&mut self.output_w);
        out
    }

    /// Names of parameters used by the decoder side only (frozen during the
    /// contrastive stage).
    pub fn decoder_param_names(&self) -> Vec<String> {
        self.params()
            .iter()
            .map(|p| p.name.clone())
            .filter(|n| n.starts_with("dec.") || n.starts_with("output."))
            .collect()
    }

    /// Bind parameters onto a tape; `trainable` decides which participate in
    /// gradient computation.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: &dyn Fn(&str) -> bool) -> Bound<'t> {
        let mut vars = HashMap::new();
        for p in self.params() {
            let var = if trainable(&p.name) {
                tape.param(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            };
            vars.insert(p.name.clone(), var);
        }
        Bound { vars }
    }

    /// Bind everything as constants (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind(tape, &|_| false)
    }

    // ---- graph builders ----

    /// Romanization embedding for one sentence: symbol embedding, width-2
    /// convolution over positions, max-pool per token. `[S, d_model]`.
    pub fn pinyin_embed_graph<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        pinyin_ids: &[Vec<usize>],
    ) -> Result<Var<'t>> {
        let l = self.config.pinyin_len;
        let mut flat = Vec::with_capacity(pinyin_ids.len() * l);
        for seq in pinyin_ids {
            if seq.len() != l {
                return Err(Error::Shape(format!(
                    "romanization sequence must have length {l}, got {}",
                    seq.len()
                )));
            }
            for &id in seq {
                if id >= self.config.pinyin_alphabet_size {
                    return Err(Error::InvalidInput(format!(
                        "romanization symbol id {id} outside alphabet"
                    )));
                }
            }
            flat.extend_from_slice(seq);
        }
        let table = bound.var("pinyin.symbol_embedding");
        let embedded = table.select_rows(&flat); // [S*l, d]
        // window pairs within each token: rows t*l+k and t*l+k+1
        let mut left = Vec::with_capacity(pinyin_ids.len() * (l - 1));
        let mut right = Vec::with_capacity(pinyin_ids.len() * (l - 1));
        for t in 0..pinyin_ids.len() {
            for k in 0..l - 1 {
                left.push(t * l + k);
                right.push(t * l + k + 1);
            }
        }
        let windows = concat_cols(tape, &[embedded.select_rows(&left), embedded.select_rows(&right)]);
        let conv = windows
            .matmul(bound.var("pinyin.conv.weight"))
            .add_row(bound.var("pinyin.conv.bias")); // [S*(l-1), d]
        let segments: Vec<(usize, usize)> = (0..pinyin_ids.len())
            .map(|t| (t * (l - 1), (t + 1) * (l - 1)))
            .collect();
        Ok(conv.segment_max_rows(&segments))
    }

    /// Multi-head attention. `q_input` provides queries; `kv_input` provides
    /// keys and values. `causal` masks future positions.
    fn attention_graph<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        prefix: &str,
        q_input: Var<'t>,
        kv_input: Var<'t>,
        causal: bool,
    ) -> Var<'t> {
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = d / h;
        let q = q_input.matmul(bound.var(&format!("{prefix}.wq")));
        let k = kv_input.matmul(bound.var(&format!("{prefix}.wk")));
        let v = kv_input.matmul(bound.var(&format!("{prefix}.wv")));
        let mask = if causal {
            let (t, _) = q.dim();
            let mut m = Array2::zeros((t, t));
            for i in 0..t {
                for j in i + 1..t {
                    m[[i, j]] = NEG_INF;
                }
            }
            Some(tape.constant(m))
        } else {
            None
        };
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let qh = q.slice_cols(i * dh, (i + 1) * dh);
            let kh = k.slice_cols(i * dh, (i + 1) * dh);
            let vh = v.slice_cols(i * dh, (i + 1) * dh);
            let mut scores = qh.matmul(kh.t()).scale(1.0 / (dh as f64).sqrt());
            if let Some(m) = mask {
                scores = scores.add(m);
            }
            heads.push(scores.softmax_rows().matmul(vh));
        }
        concat_cols(tape, &heads).matmul(bound.var(&format!("{prefix}.wo")))
    }

    /// Fusion of romanization and token embeddings: multi-head attention with
    /// the romanization embedding as query and the token embedding as key and
    /// value.
    pub fn fuse_graph<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        e_pinyin: Var<'t>,
        e_token: Var<'t>,
    ) -> Var<'t> {
        self.attention_graph(tape, bound, "fusion", e_pinyin, e_token, false)
    }

    fn ln<'t>(&self, bound: &Bound<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
        x.layer_norm_rows(LN_EPS)
            .mul_row(bound.var(&format!("{prefix}.gamma")))
            .add_row(bound.var(&format!("{prefix}.beta")))
    }

    fn ffn<'t>(&self, bound: &Bound<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
        x.matmul(bound.var(&format!("{prefix}.w1")))
            .add_row(bound.var(&format!("{prefix}.b1")))
            .relu()
            .matmul(bound.var(&format!("{prefix}.w2")))
            .add_row(bound.var(&format!("{prefix}.b2")))
    }

    /// Encoder forward for one sentence: fusion embedding plus positional
    /// encoding through the encoder stack. `[S, d_model]`.
    pub fn encoder_graph<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        sentence: &EncodedSentence,
    ) -> Result<Var<'t>> {
        if sentence.is_empty() {
            return Err(Error::InvalidInput("cannot encode an empty sentence".into()));
        }
        if sentence.token_ids.len() != sentence.pinyin_ids.len() {
            return Err(Error::Shape(format!(
                "token/pinyin misalignment: {} vs {}",
                sentence.token_ids.len(),
                sentence.pinyin_ids.len()
            )));
        }
        for &id in &sentence.token_ids {
            if id >= self.config.vocab_size {
                return Err(Error::InvalidInput(format!("token id {id} outside vocabulary")));
            }
        }
        let e_token = bound.var("token_embedding").select_rows(&sentence.token_ids);
        let e_pinyin = self.pinyin_embed_graph(tape, bound, &sentence.pinyin_ids)?;
        let fused = self.fuse_graph(tape, bound, e_pinyin, e_token);
        let pe = tape.constant(sinusoidal_encoding(sentence.len(), self.config.d_model));
        let mut x = fused.add(pe);
        for i in 0..self.enc_layers.len() {
            let attn_in = self.ln(bound, &format!("enc.{i}.ln1"), x);
            let attn = self.attention_graph(tape, bound, &format!("enc.{i}.attn"), attn_in, attn_in, false);
            x = x.add(attn);
            let ffn_in = self.ln(bound, &format!("enc.{i}.ln2"), x);
            let ffn = self.ffn(bound, &format!("enc.{i}.ffn"), ffn_in);
            x = x.add(ffn);
        }
        Ok(self.ln(bound, "enc.final_ln", x))
    }

    /// Decoder forward over a target prefix given encoder output. Returns
    /// next-token logits, one row per prefix position. `[T, vocab]`.
    pub fn decoder_graph<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        enc_hidden: Var<'t>,
        decoder_input_ids: &[usize],
    ) -> Result<Var<'t>> {
        if decoder_input_ids.is_empty() {
            return Err(Error::InvalidInput("decoder input is empty".into()));
        }
        for &id in decoder_input_ids {
            if id >= self.config.vocab_size {
                return Err(Error::InvalidInput(format!("token id {id} outside vocabulary")));
            }
        }
        let emb = bound.var("token_embedding").select_rows(decoder_input_ids);
        let pe = tape.constant(sinusoidal_encoding(decoder_input_ids.len(), self.config.d_model));
        let mut x = emb.add(pe);
        for i in 0..self.dec_layers.len() {
            let sa_in = self.ln(bound, &format!("dec.{i}.ln1"), x);
            let sa = self.attention_graph(tape, bound, &format!("dec.{i}.self_attn"), sa_in, sa_in, true);
            x = x.add(sa);
            let ca_in = self.ln(bound, &format!("dec.{i}.ln2"), x);
            let ca = self.attention_graph(tape, bound, &format!("dec.{i}.cross_attn"), ca_in, enc_hidden, false);
            x = x.add(ca);
            let ffn_in = self.ln(bound, &format!("dec.{i}.ln3"), x);
            let ffn = self.ffn(bound, &format!("dec.{i}.ffn"), ffn_in);
            x = x.add(ffn);
        }
        let x = self.ln(bound, "dec.final_ln", x);
        Ok(x.matmul(bound.var("output.weight")))
    }

    /// Teacher-forced sequence loss for one (source, target) pair.
    pub fn seq2seq_loss_graph<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        source: &EncodedSentence,
        target_ids: &[usize],
    ) -> Result<Var<'t>> {
        if target_ids.is_empty() {
            return Err(Error::InvalidInput("target is empty".into()));
        }
        let enc = self.encoder_graph(tape, bound, source)?;
        let mut decoder_input = Vec::with_capacity(target_ids.len() + 1);
        decoder_input.push(PAD_ID); // decoder start symbol
        decoder_input.extend_from_slice(target_ids);
        let mut ce_targets = target_ids.to_vec();
        ce_targets.push(EOS_ID);
        let logits = self.decoder_graph(tape, bound, enc, &decoder_input)?;
        Ok(logits.cross_entropy_rows(&ce_targets))
    }

    // ---- public inference operations ----

    /// Romanization embeddings for a batch of sentences, padded to the
    /// longest sentence: `[batch, seq, d_model]`. Padding positions are zero.
    pub fn pinyin_embed(&self, batch: &[Vec<PinyinSequence>]) -> Result<Array3<f64>> {
        let s_max = batch.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut out = Array3::zeros((batch.len(), s_max, self.config.d_model));
        for (b, sentence) in batch.iter().enumerate() {
            if sentence.is_empty() {
                continue;
            }
            let ids: Vec<Vec<usize>> = sentence.iter().map(|s| s.ids()).collect();
            let tape = Tape::new();
            let bound = self.bind_frozen(&tape);
            let var = self.pinyin_embed_graph(&tape, &bound, &ids)?;
            let value = tape.value(var);
            for (t, row) in value.rows().into_iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    out[[b, t, j]] = v;
                }
            }
        }
        Ok(out)
    }

    /// Fusion of precomputed romanization and token embeddings. `lens` gives
    /// the true (unpadded) length of each sentence; attention never crosses
    /// into padding, and padded positions stay zero.
    pub fn fuse(
        &self,
        e_pinyin: &Array3<f64>,
        e_token: &Array3<f64>,
        lens: &[usize],
    ) -> Result<Array3<f64>> {
        if e_pinyin.dim() != e_token.dim() {
            return Err(Error::Shape(format!(
                "fusion inputs differ: {:?} vs {:?}",
                e_pinyin.dim(),
                e_token.dim()
            )));
        }
        let (b, s, d) = e_pinyin.dim();
        if d != self.config.d_model {
            return Err(Error::Shape(format!(
                "fusion width {d} does not match d_model {}",
                self.config.d_model
            )));
        }
        if lens.len() != b {
            return Err(Error::Shape("one length per sentence required".into()));
        }
        let mut out = Array3::zeros((b, s, d));
        for i in 0..b {
            let len = lens[i];
            if len == 0 {
                continue;
            }
            if len > s {
                return Err(Error::Shape(format!("length {len} exceeds padded size {s}")));
            }
            let tape = Tape::new();
            let bound = self.bind_frozen(&tape);
            let ep = tape.constant(
                e_pinyin
                    .index_axis(ndarray::Axis(0), i)
                    .slice(ndarray::s![..len, ..])
                    .to_owned(),
            );
            let et = tape.constant(
                e_token
                    .index_axis(ndarray::Axis(0), i)
                    .slice(ndarray::s![..len, ..])
                    .to_owned(),
            );
            let fused = self.fuse_graph(&tape, &bound, ep, et);
            let value = tape.value(fused);
            for (t, row) in value.rows().into_iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    out[[i, t, j]] = v;
                }
            }
        }
        Ok(out)
    }

    /// Encode a batch of sentences; returns hidden states padded to the
    /// longest sentence plus the padding mask (`true` = real token).
    pub fn encode(
        &self,
        sentences: &[EncodedSentence],
    ) -> Result<(Array3<f64>, Vec<Vec<bool>>)> {
        let s_max = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut out = Array3::zeros((sentences.len(), s_max, self.config.d_model));
        let mut mask = Vec::with_capacity(sentences.len());
        for (b, sentence) in sentences.iter().enumerate() {
            let hidden = self.encode_one(sentence)?;
            for (t, row) in hidden.rows().into_iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    out[[b, t, j]] = v;
                }
            }
            let mut m = vec![true; sentence.len()];
            m.resize(s_max, false);
            mask.push(m);
        }
        Ok((out, mask))
    }

    /// Encoder hidden states for one sentence, `[S, d_model]`.
    pub fn encode_one(&self, sentence: &EncodedSentence) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let var = self.encoder_graph(&tape, &bound, sentence)?;
        Ok(tape.value(var))
    }

    /// Next-token logits for a decoder prefix, `[T, vocab]`.
    pub fn decode_logits(
        &self,
        source: &EncodedSentence,
        decoder_input_ids: &[usize],
    ) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let enc = self.encoder_graph(&tape, &bound, source)?;
        let logits = self.decoder_graph(&tape, &bound, enc, decoder_input_ids)?;
        Ok(tape.value(logits))
    }

    /// Autoregressive generation from input text. Greedy decoding is
    /// deterministic; sampling uses a seeded RNG.
    pub fn generate(
        &self,
        tokenizer: &dyn Tokenizer,
        lexicon: &PinyinLexicon,
        text: &str,
        decoding: &Decoding,
    ) -> Result<String> {
        let source = prepare_sentence(text, tokenizer, lexicon, self.config.pinyin_len)?;
        let ids = self.generate_ids(&source, decoding, tokenizer.sentinel_count())?;
        Ok(tokenizer.decode(&ids))
    }

    /// Generation over prepared inputs; returns generated ids without EOS.
    pub fn generate_ids(
        &self,
        source: &EncodedSentence,
        decoding: &Decoding,
        sentinel_count: usize,
    ) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let enc = self.encoder_graph(&tape, &bound, source)?;
        let mut rng = match decoding {
            Decoding::Greedy => None,
            Decoding::Sampling { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        };
        let mut generated: Vec<usize> = Vec::new();
        for _ in 0..self.config.max_gen_len {
            let mut decoder_input = Vec::with_capacity(generated.len() + 1);
            decoder_input.push(PAD_ID);
            decoder_input.extend_from_slice(&generated);
            let logits = self.decoder_graph(&tape, &bound, enc, &decoder_input)?;
            let row = tape.value(logits);
            let last = row.row(row.nrows() - 1).to_owned();
            let next = match decoding {
                Decoding::Greedy => pick_greedy(&last, sentinel_count),
                Decoding::Sampling { temperature, .. } => pick_sample(
                    &last,
                    *temperature,
                    sentinel_count,
                    rng.as_mut().expect("sampling rng"),
                ),
            };
            if next == EOS_ID {
                break;
            }
            generated.push(next);
        }
        Ok(generated)
    }

    /// Import parameters by name from another parameter list; tensors whose
    /// name or shape does not match stay at their current initialization.
    /// Returns the names actually imported.
    pub fn import_params(&mut self, source: &HashMap<String, Array2<f64>>) -> Vec<String> {
        let mut imported = Vec::new();
        for p in self.params_mut() {
            if let Some(v) = source.get(&p.name) {
                if v.dim() == p.value.dim() {
                    p.value = v.clone();
                    imported.push(p.name.clone());
                }
            }
        }
        imported
    }
}

/// Suppress structurally invalid ids during generation: padding, unknown,
/// space and sentinel symbols are never produced.
fn blocked(id: usize, sentinel_count: usize) -> bool {
    id == PAD_ID || id == UNK_ID || id == SPACE_ID || (SENTINEL_BASE..SENTINEL_BASE + sentinel_count).contains(&id)
}

fn pick_greedy(logits: &Array1<f64>, sentinel_count: usize) -> usize {
    let mut best = EOS_ID;
    let mut best_score = f64::NEG_INFINITY;
    for (id, &score) in logits.iter().enumerate() {
        if blocked(id, sentinel_count) {
            continue;
        }
        if score > best_score {
            best_score = score;
            best = id;
        }
    }
    best
}

fn pick_sample(
    logits: &Array1<f64>,
    temperature: f64,
    sentinel_count: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    if temperature <= 0.0 {
        return pick_greedy(logits, sentinel_count);
    }
    let scaled: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|(id, _)| !blocked(*id, sentinel_count))
        .map(|(id, &v)| (id, v / temperature))
        .collect();
    let max = scaled.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|(_, v)| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    for ((id, _), w) in scaled.iter().zip(&weights) {
        if draw < *w {
            return *id;
        }
        draw -= w;
    }
    scaled.last().map(|(id, _)| *id).unwrap_or(EOS_ID)
}

/// Mask-aware mean over non-pad positions of `[S, d]` hidden states.
pub fn pool(hidden: ArrayView2<'_, f64>, mask: &[bool]) -> Result<Array1<f64>> {
    if hidden.nrows() != mask.len() {
        return Err(Error::Shape(format!(
            "pool mask length {} does not match rows {}",
            mask.len(),
            hidden.nrows()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidInput("cannot pool an all-padding sentence".into()));
    }
    let mut sum = Array1::zeros(hidden.ncols());
    for (row, &keep) in hidden.rows().into_iter().zip(mask) {
        if keep {
            sum += &row;
        }
    }
    Ok(sum / count as f64)
}

/// Masked mean pooling on a tape: `weights · hidden / count`.
pub fn pool_graph<'t>(tape: &'t Tape, hidden: Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
    let (rows, _) = hidden.dim();
    if rows != mask.len() {
        return Err(Error::Shape("pool mask length mismatch".into()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidInput("cannot pool an all-padding sentence".into()));
    }
    let weights = Array2::from_shape_fn((1, rows), |(_, j)| {
        if mask[j] {
            1.0 / count as f64
        } else {
            0.0
        }
    });
    Ok(tape.constant(weights).matmul(hidden))
}

/// Fixed sinusoidal positional encoding, `[len, d]`.
pub fn sinusoidal_encoding(len: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((len, d));
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[pos, 2 * i]] = angle.sin();
            pe[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    pe
}
