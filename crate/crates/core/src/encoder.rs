//! Pre-layer-norm Transformer encoder with EOS-position embedding extraction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{AttentionLayout, Tape, Var};
use crate::tensor::{norm, Tensor};
use crate::tokenizer::{Side, TokenSequence, Tokenizer, Vocabulary};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub attention_mode: AttentionMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_seq_len: crate::tokenizer::DEFAULT_MAX_SEQ_LEN,
            vocab_size: Vocabulary::byte_level().size as usize,
            attention_mode: AttentionMode::Causal,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff < self.d_model {
            return Err(Error::Config(format!(
                "d_ff {} smaller than d_model {}",
                self.d_ff, self.d_model
            )));
        }
        Ok(())
    }
}

const PER_LAYER: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

/// Canonical parameter names and shapes, in storage order.
pub fn parameter_layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut out = vec![
        ("tok_emb".to_string(), vec![cfg.vocab_size, d]),
        ("pos_emb".to_string(), vec![cfg.max_seq_len, d]),
    ];
    for l in 0..cfg.n_layers {
        for name in PER_LAYER {
            let shape = match name {
                "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => vec![d, d],
                "ffn.w1" => vec![d, f],
                "ffn.b1" => vec![f],
                "ffn.w2" => vec![f, d],
                _ => vec![d],
            };
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("ln_f.gain".into(), vec![d]));
    out.push(("ln_f.bias".into(), vec![d]));
    out
}

/// All encoder parameters in the order given by [`parameter_layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl EncoderWeights {
    /// Normal(0, 0.02) embeddings and projections, zero biases, unit gains.
    pub fn random(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in parameter_layout(cfg) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            tensors.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        Ok(EncoderWeights { names, tensors })
    }

    /// Import hook: builds weights from named tensors (e.g. converted from an
    /// external checkpoint). Every parameter must be present with the right shape.
    pub fn from_named(cfg: &EncoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let layout = parameter_layout(cfg);
        let mut map: std::collections::HashMap<String, Tensor> = named.into_iter().collect();
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let t = map
                .remove(&name)
                .ok_or_else(|| Error::Encoder(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "import weights",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(Error::Encoder(format!("parameter {name} has non-finite values")));
            }
            names.push(name);
            tensors.push(t);
        }
        if let Some(extra) = map.keys().min() {
            return Err(Error::Encoder(format!("unexpected parameter {extra}")));
        }
        Ok(EncoderWeights { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` and returns their handles.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect()
    }
}

/// A unit-L2-norm embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalises `values`; zero or non-finite vectors are rejected.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid(format!("cannot normalise vector with norm {n}")));
        }
        Ok(Embedding(values.into_iter().map(|v| v / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Token and position ids for a right-padded batch.
struct PaddedBatch {
    flat_ids: Vec<usize>,
    positions: Vec<usize>,
    layout: AttentionLayout,
}

/// Runs the encoder over `seqs` on `tape`, returning final hidden states as a
/// `[batch * padded_len, d_model]` matrix plus the padded length.
pub fn hidden_on_tape(
    tape: &mut Tape,
    params: &[Var],
    cfg: &EncoderConfig,
    vocab: &Vocabulary,
    seqs: &[TokenSequence],
) -> Result<(Var, usize)> {
    let batch = pad_batch(cfg, vocab, seqs)?;
    let l = batch.layout.seq_len;
    let tok = tape.gather_rows(params[0], &batch.flat_ids)?;
    let pos = tape.gather_rows(params[1], &batch.positions)?;
    let mut h = tape.add(tok, pos)?;
    for layer in 0..cfg.n_layers {
        let p = &params[2 + layer * PER_LAYER.len()..2 + (layer + 1) * PER_LAYER.len()];
        let a = affine_norm(tape, h, p[0], p[1])?;
        let q = linear(tape, a, p[2], p[3])?;
        let k = linear(tape, a, p[4], p[5])?;
        let v = linear(tape, a, p[6], p[7])?;
        let att = tape.attention(q, k, v, &batch.layout)?;
        let o = linear(tape, att, p[8], p[9])?;
        h = tape.add(h, o)?;
        let f = affine_norm(tape, h, p[10], p[11])?;
        let f = linear(tape, f, p[12], p[13])?;
        let f = tape.gelu(f);
        let f = linear(tape, f, p[14], p[15])?;
        h = tape.add(h, f)?;
    }
    let n = params.len();
    let out = affine_norm(tape, h, params[n - 2], params[n - 1])?;
    Ok((out, l))
}

/// Unit-norm EOS-position embeddings of `seqs`, as a `[batch, d_model]` matrix.
pub fn embed_on_tape(
    tape: &mut Tape,
    params: &[Var],
    cfg: &EncoderConfig,
    vocab: &Vocabulary,
    seqs: &[TokenSequence],
) -> Result<Var> {
    for (i, s) in seqs.iter().enumerate() {
        if s.ids.last() != Some(&vocab.eos(s.side)) {
            return Err(Error::Encoder(format!("sequence {i} does not end with its EOS token")));
        }
    }
    let (hidden, l) = hidden_on_tape(tape, params, cfg, vocab, seqs)?;
    let eos_rows: Vec<usize> = seqs
        .iter()
        .enumerate()
        .map(|(b, s)| b * l + s.len() - 1)
        .collect();
    let picked = tape.gather_rows(hidden, &eos_rows)?;
    tape.l2_normalize_rows(picked)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn affine_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm(x, LAYER_NORM_EPS)?;
    let n = tape.mul_row(n, gain)?;
    tape.add_row(n, bias)
}

fn pad_batch(cfg: &EncoderConfig, vocab: &Vocabulary, seqs: &[TokenSequence]) -> Result<PaddedBatch> {
    if seqs.is_empty() {
        return Err(Error::Encoder("empty batch".into()));
    }
    let mut max_len = 0;
    for (i, s) in seqs.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::Encoder(format!("sequence {i} is empty")));
        }
        if s.len() > cfg.max_seq_len {
            return Err(Error::Encoder(format!(
                "sequence {i} has {} tokens, limit is {}",
                s.len(),
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = s.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Encoder(format!(
                "token id {bad} in sequence {i} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        max_len = max_len.max(s.len());
    }
    let pad = vocab.pad as usize;
    let mut flat_ids = Vec::with_capacity(seqs.len() * max_len);
    for s in seqs {
        flat_ids.extend(s.ids.iter().map(|&id| id as usize));
        flat_ids.extend(std::iter::repeat_n(pad, max_len - s.len()));
    }
    let positions = (0..seqs.len()).flat_map(|_| 0..max_len).collect();
    Ok(PaddedBatch {
        flat_ids,
        positions,
        layout: AttentionLayout {
            seq_len: max_len,
            lens: seqs.iter().map(TokenSequence::len).collect(),
            n_heads: cfg.n_heads,
            causal: cfg.attention_mode == AttentionMode::Causal,
        },
    })
}

/// The encoder together with its tokenizer and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    tokenizer: Tokenizer,
    weights: EncoderWeights,
}

impl Encoder {
    pub fn new(config: EncoderConfig, vocab: Vocabulary, weights: EncoderWeights) -> Result<Self> {
        config.validate()?;
        if vocab.size as usize != config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} ids but encoder expects {}",
                vocab.size, config.vocab_size
            )));
        }
        if weights.tensors.len() != parameter_layout(&config).len() {
            return Err(Error::Encoder("weights do not match config".into()));
        }
        let tokenizer = Tokenizer::new(vocab, config.max_seq_len)?;
        Ok(Encoder {
            config,
            tokenizer,
            weights,
        })
    }

    pub fn random(config: EncoderConfig, seed: u64) -> Result<Self> {
        let weights = EncoderWeights::random(&config, seed)?;
        Encoder::new(config, Vocabulary::byte_level(), weights)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.tokenizer.vocab()
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn weights(&self) -> &EncoderWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut EncoderWeights {
        &mut self.weights
    }

    pub fn dim(&self) -> usize {
        self.config.d_model
    }

    pub fn tokenize(&self, text: &[u8], side: Side) -> Result<TokenSequence> {
        self.tokenizer.encode(text, side)
    }

    /// Last-layer hidden states, `[len, d_model]`.
    pub fn forward(&self, seq: &TokenSequence) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.weights.bind(&mut tape, false);
        let (h, _) = hidden_on_tape(
            &mut tape,
            &params,
            &self.config,
            self.vocab(),
            std::slice::from_ref(seq),
        )?;
        Ok(tape.value(h).clone())
    }

    pub fn embed(&self, seq: &TokenSequence) -> Result<Embedding> {
        let m = self.embed_batch(std::slice::from_ref(seq))?;
        Ok(Embedding(m.into_data()))
    }

    /// `[M, d_model]` matrix whose row `i` is the embedding of `seqs[i]`.
    pub fn embed_batch(&self, seqs: &[TokenSequence]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.weights.bind(&mut tape, false);
        let e = embed_on_tape(&mut tape, &params, &self.config, self.vocab(), seqs)?;
        Ok(tape.value(e).clone())
    }

    /// Tokenises and embeds texts in fixed-size chunks.
    pub fn embed_texts<T: AsRef<[u8]>>(&self, texts: &[T], side: Side, chunk: usize) -> Result<Vec<Embedding>> {
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(texts.len());
        for group in texts.chunks(chunk) {
            let seqs = group
                .iter()
                .map(|t| self.tokenize(t.as_ref(), side))
                .collect::<Result<Vec<_>>>()?;
            let m = self.embed_batch(&seqs)?;
            let d = self.dim();
            out.extend(m.data().chunks(d).map(|r| Embedding(r.to_vec())));
        }
        Ok(out)
    }
}
