//! Small BERT-style transformer encoder.
//!
//! Input embedding is the sum of token, learned absolute position and segment
//! embeddings, followed by layer norm. Each layer applies multi-head
//! self-attention (padding keys masked out, no key bias), residual + layer norm, a GELU
//! feed-forward block, and residual + layer norm again (post-norm, as in BERT).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::packing::PackedSequence;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults: 2 layers, 2 heads, d = 32, ffn = 64.
    pub fn desk(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            hidden_dim: 32,
            ffn_dim: 64,
            max_seq_len,
            vocab_size,
            dropout_rate: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.n_heads,
            self.hidden_dim,
            self.ffn_dim,
            self.max_seq_len,
            self.vocab_size,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("encoder dimensions must be ≥ 1: {self:?}")));
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout_rate)));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }
}

/// Outputs of one encoder pass, as handles on the tape that ran it.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Final hidden state of every position, `[seq_len, d]`.
    pub token_embeddings: Var,
    /// Rows at the `[ENT]` positions, `[k, d]`; `None` when the packing has no `[ENT]`.
    pub entity_embeddings: Option<Var>,
    /// Final hidden state of `[CLS]`, `[d]`.
    pub cls_embedding: Var,
    /// Attention probabilities per layer and head, each `[seq_len, seq_len]`.
    pub attention: Vec<Vec<Var>>,
}

mod names {
    pub const TOKEN: &str = "encoder.embeddings.token";
    pub const POSITION: &str = "encoder.embeddings.position";
    pub const SEGMENT: &str = "encoder.embeddings.segment";
    pub const EMB_LN: &str = "encoder.embeddings.ln";

    pub fn layer(i: usize, part: &str) -> String {
        format!("encoder.layer{i}.{part}")
    }
}

fn normal(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn insert_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    store.insert(format!("{name}.weight"), normal(vec![fan_in, fan_out], rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(vec![fan_out]).expect("positive"));
}

fn insert_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.gamma"), Tensor::filled(vec![d], 1.0).expect("positive"));
    store.insert(format!("{name}.beta"), Tensor::zeros(vec![d]).expect("positive"));
}

/// Encoder weights: N(0, 0.02) matrices, zero biases, unit layer-norm gains.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.hidden_dim;
    let mut store = ParamStore::new();
    store.insert(names::TOKEN, normal(vec![config.vocab_size, d], &mut rng));
    store.insert(names::POSITION, normal(vec![config.max_seq_len, d], &mut rng));
    store.insert(names::SEGMENT, normal(vec![2, d], &mut rng));
    insert_layer_norm(&mut store, names::EMB_LN, d);
    for i in 0..config.n_layers {
        for part in ["attn.query", "attn.value", "attn.output"] {
            insert_linear(&mut store, &names::layer(i, part), d, d, &mut rng);
        }
        // A key bias shifts every score in a row equally, so softmax cancels it.
        store.insert(names::layer(i, "attn.key.weight"), normal(vec![d, d], &mut rng));
        insert_layer_norm(&mut store, &names::layer(i, "attn.ln"), d);
        insert_linear(&mut store, &names::layer(i, "ffn.input"), d, config.ffn_dim, &mut rng);
        insert_linear(&mut store, &names::layer(i, "ffn.output"), config.ffn_dim, d, &mut rng);
        insert_layer_norm(&mut store, &names::layer(i, "ffn.ln"), d);
    }
    Ok(store)
}

pub(crate) fn linear(tape: &mut Tape, params: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = params.get(&format!("{name}.weight"))?;
    let b = params.get(&format!("{name}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn layer_norm(tape: &mut Tape, params: &BoundParams, name: &str, x: Var, eps: f64) -> Result<Var> {
    let g = params.get(&format!("{name}.gamma"))?;
    let b = params.get(&format!("{name}.beta"))?;
    tape.layer_norm(x, g, b, eps)
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let factors = (0..tape.value(x).numel())
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect();
            tape.scale_by(x, factors)
        }
        _ => Ok(x),
    }
}

/// Runs the encoder. Dropout is active iff `dropout_rng` is given (training mode).
pub fn encode(
    tape: &mut Tape,
    params: &BoundParams,
    packed: &PackedSequence,
    config: &EncoderConfig,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<EncoderOutput> {
    let n = packed.len();
    if n > config.max_seq_len {
        return Err(Error::Capacity(format!(
            "sequence of {n} tokens exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    if let Some(&bad) = packed.ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::Index(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    let eps = config.layer_norm_eps;
    let rate = config.dropout_rate;
    let keep = packed.attention_mask();

    let tok = tape.gather_rows(params.get(names::TOKEN)?, &packed.ids)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.gather_rows(params.get(names::POSITION)?, &positions)?;
    let segments: Vec<usize> = packed.segments.iter().map(|s| s.index()).collect();
    let seg = tape.gather_rows(params.get(names::SEGMENT)?, &segments)?;
    let h = tape.add(tok, pos)?;
    let h = tape.add(h, seg)?;
    let h = layer_norm(tape, params, names::EMB_LN, h, eps)?;
    let mut h = dropout(tape, h, rate, &mut dropout_rng)?;

    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attention = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let q = linear(tape, params, &names::layer(i, "attn.query"), h)?;
        let k = tape.matmul(h, params.get(&names::layer(i, "attn.key.weight"))?)?;
        let v = linear(tape, params, &names::layer(i, "attn.value"), h)?;
        let mut heads = Vec::with_capacity(config.n_heads);
        let mut probs_per_head = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let qh = tape.narrow_last(q, head * dh, dh)?;
            let kh = tape.narrow_last(k, head * dh, dh)?;
            let vh = tape.narrow_last(v, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.masked_softmax(scores, &keep)?;
            probs_per_head.push(probs);
            let probs = dropout(tape, probs, rate, &mut dropout_rng)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        attention.push(probs_per_head);
        let ctx = tape.concat_last(&heads)?;
        let out = linear(tape, params, &names::layer(i, "attn.output"), ctx)?;
        let out = dropout(tape, out, rate, &mut dropout_rng)?;
        let res = tape.add(h, out)?;
        h = layer_norm(tape, params, &names::layer(i, "attn.ln"), res, eps)?;

        let f = linear(tape, params, &names::layer(i, "ffn.input"), h)?;
        let f = tape.gelu(f);
        let f = linear(tape, params, &names::layer(i, "ffn.output"), f)?;
        let f = dropout(tape, f, rate, &mut dropout_rng)?;
        let res = tape.add(h, f)?;
        h = layer_norm(tape, params, &names::layer(i, "ffn.ln"), res, eps)?;
    }

    let entity_embeddings = if packed.ent_positions.is_empty() {
        None
    } else {
        Some(tape.gather_rows(h, &packed.ent_positions)?)
    };
    let cls = tape.gather_rows(h, &[PackedSequence::CLS_INDEX])?;
    let cls_embedding = tape.reshape(cls, vec![config.hidden_dim])?;
    Ok(EncoderOutput {
        token_embeddings: h,
        entity_embeddings,
        cls_embedding,
        attention,
    })
}
