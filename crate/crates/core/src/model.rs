//! Encoder plus head, in either the multi-question or single-question mode, and
//! on-disk checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::evaluation::answer_spans;
use crate::heads::{self, BioLabel, HeadKind, InteractionKind};
use crate::kv::KvMap;
use crate::numerics::{BoundParams, ParamStore, Tape, Var};
use crate::packing::{pack_mqmrc, pack_sqmrc, PackedSequence, QueryMap, Sample, Span};
use crate::tokenizer::Vocab;

/// Multi-question (all entities in one pass) or single-question (one pass per entity).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Mqmrc,
    Sqmrc,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Mqmrc => "mqmrc",
            Mode::Sqmrc => "sqmrc",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mqmrc" => Ok(Mode::Mqmrc),
            "sqmrc" => Ok(Mode::Sqmrc),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub mode: Mode,
    pub head: HeadKind,
    /// Ignored in single-question mode.
    pub interaction: InteractionKind,
}

const CONFIG_KEYS: [&str; 11] = [
    "mode",
    "head",
    "interaction",
    "n_layers",
    "n_heads",
    "hidden_dim",
    "ffn_dim",
    "max_seq_len",
    "vocab_size",
    "dropout_rate",
    "layer_norm_eps",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let e = &self.encoder;
        let mut m = KvMap::new();
        m.insert("mode", self.mode);
        m.insert("head", self.head);
        m.insert("interaction", self.interaction);
        m.insert("n_layers", e.n_layers);
        m.insert("n_heads", e.n_heads);
        m.insert("hidden_dim", e.hidden_dim);
        m.insert("ffn_dim", e.ffn_dim);
        m.insert("max_seq_len", e.max_seq_len);
        m.insert("vocab_size", e.vocab_size);
        m.insert("dropout_rate", e.dropout_rate);
        m.insert("layer_norm_eps", e.layer_norm_eps);
        m
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        m.check_keys(&CONFIG_KEYS)?;
        let config = Self {
            encoder: EncoderConfig {
                n_layers: m.require("n_layers")?,
                n_heads: m.require("n_heads")?,
                hidden_dim: m.require("hidden_dim")?,
                ffn_dim: m.require("ffn_dim")?,
                max_seq_len: m.require("max_seq_len")?,
                vocab_size: m.require("vocab_size")?,
                dropout_rate: m.require("dropout_rate")?,
                layer_norm_eps: m.require("layer_norm_eps")?,
            },
            mode: m.require("mode")?,
            head: m.require("head")?,
            interaction: m.require("interaction")?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Head outputs for the `k` questions of one packed sequence (`k = 1` for a
/// single-question packing).
#[derive(Clone, Copy, Debug)]
pub enum HeadLogits {
    /// `[k, n_ctx + 1, 3]`
    Bio(Var),
    /// Start and end logits, `[k, n_ctx + 1]` each.
    Span(Var, Var),
}

/// Predicted spans for one entity, in context token coordinates. Empty means no answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityPrediction {
    pub entity: String,
    pub spans: Vec<Span>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = encoder::init_params(&config.encoder, seed)?;
        let interaction = (config.mode == Mode::Mqmrc).then_some(config.interaction);
        heads::init_params(
            &mut params,
            config.encoder.hidden_dim,
            config.head,
            interaction,
            seed.wrapping_add(1),
        )?;
        Ok(Self { config, params })
    }

    /// Packs `sample` for this model's mode. Single-question mode yields one
    /// sequence per entity, in the sample's entity order.
    pub fn pack(
        &self,
        sample: &Sample,
        vocab: &Vocab,
        query_map: Option<&QueryMap>,
    ) -> Result<Vec<PackedSequence>> {
        let max = self.config.encoder.max_seq_len;
        match self.config.mode {
            Mode::Mqmrc => Ok(vec![pack_mqmrc(sample, vocab, query_map, max)?]),
            Mode::Sqmrc => sample
                .entity_names()
                .map(|e| pack_sqmrc(sample, e, vocab, query_map, max))
                .collect(),
        }
    }

    pub fn logits(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        packed: &PackedSequence,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<HeadLogits> {
        let enc = encoder::encode(tape, params, packed, &self.config.encoder, dropout_rng)?;
        let kind = self.config.interaction;
        match (self.config.mode, self.config.head) {
            (Mode::Mqmrc, HeadKind::Bio) => Ok(HeadLogits::Bio(heads::mqmrc_logits(
                tape, params, &enc, packed, kind,
            )?)),
            (Mode::Mqmrc, HeadKind::Span) => {
                let (s, e) = heads::mqmrc_span_logits(tape, params, &enc, packed, kind)?;
                Ok(HeadLogits::Span(s, e))
            }
            (Mode::Sqmrc, head) => {
                let rows = heads::answer_rows(tape, &enc, packed)?;
                match head {
                    HeadKind::Bio => {
                        let logits = heads::bio_forward(tape, params, rows)?;
                        let logits = tape.reshape(logits, vec![1, packed.n_ctx() + 1, 3])?;
                        Ok(HeadLogits::Bio(logits))
                    }
                    HeadKind::Span => {
                        let (s, e) = heads::span_logits(tape, params, rows, 1)?;
                        Ok(HeadLogits::Span(s, e))
                    }
                }
            }
        }
    }

    /// Training loss for one packed sequence. `gold[i]` are the context spans of
    /// the packing's `i`-th question; they must lie inside the packed context.
    pub fn loss(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        packed: &PackedSequence,
        gold: &[Vec<Span>],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let n_ctx = packed.n_ctx();
        match self.logits(tape, params, packed, dropout_rng)? {
            HeadLogits::Bio(logits) => {
                let labels = gold
                    .iter()
                    .map(|spans| gold_bio(spans, n_ctx))
                    .collect::<Result<Vec<_>>>()?;
                heads::mqmrc_loss(tape, logits, &labels)
            }
            HeadLogits::Span(start, end) => {
                let targets: Vec<(usize, usize)> = gold
                    .iter()
                    .map(|spans| spans.iter().min().map_or((0, 0), |&(s, e)| (s + 1, e + 1)))
                    .collect();
                heads::span_loss(tape, start, end, &targets)
            }
        }
    }

    /// Predicted spans for every question of one packed sequence.
    pub fn predict_packed(&self, packed: &PackedSequence) -> Result<Vec<Vec<Span>>> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        match self.logits(&mut tape, &params, packed, None)? {
            HeadLogits::Bio(logits) => Ok(heads::split_labels(tape.value(logits))
                .iter()
                .map(|row| answer_spans(row))
                .collect()),
            HeadLogits::Span(start, end) => {
                let (s, e) = (tape.value(start), tape.value(end));
                Ok((0..s.rows())
                    .map(|i| heads::decode_span_logits(s.row(i), e.row(i)).into_iter().collect())
                    .collect())
            }
        }
    }

    /// Predictions for every entity question of `sample`, plus the number of
    /// encoder passes spent.
    pub fn predict(
        &self,
        sample: &Sample,
        vocab: &Vocab,
        query_map: Option<&QueryMap>,
    ) -> Result<(Vec<EntityPrediction>, usize)> {
        let packings = self.pack(sample, vocab, query_map)?;
        let mut out = Vec::with_capacity(sample.k());
        for packed in &packings {
            let spans = self.predict_packed(packed)?;
            for (entity, spans) in packed.entity_order.iter().zip(spans) {
                out.push(EntityPrediction {
                    entity: entity.clone(),
                    spans,
                });
            }
        }
        Ok((out, packings.len()))
    }
}

/// Gold spans of one entity clipped to the first `n_ctx` context tokens.
/// Spans that do not fit entirely are dropped.
pub fn clip_spans(spans: &[Span], n_ctx: usize) -> Vec<Span> {
    spans.iter().copied().filter(|&(_, e)| e < n_ctx).collect()
}

/// Gold label row over the answer positions: `B` at the `[CLS]` slot when
/// there are no spans, otherwise `B`/`I` over each span and `O` elsewhere.
pub fn gold_bio(spans: &[Span], n_ctx: usize) -> Result<Vec<BioLabel>> {
    let mut row = vec![BioLabel::O; n_ctx + 1];
    if spans.is_empty() {
        row[0] = BioLabel::B;
        return Ok(row);
    }
    for &(s, e) in spans {
        if s > e || e >= n_ctx {
            return Err(Error::Data(format!("span ({s}, {e}) outside {n_ctx} context tokens")));
        }
        if row[s + 1..=e + 1].iter().any(|&l| l != BioLabel::O) {
            return Err(Error::Data(format!("span ({s}, {e}) overlaps another span")));
        }
        row[s + 1] = BioLabel::B;
        row[s + 2..=e + 1].fill(BioLabel::I);
    }
    Ok(row)
}

const PARAMS_FILE: &str = "params.bin";
const CONFIG_FILE: &str = "config.txt";
const VOCAB_FILE: &str = "vocab.txt";
const ENTITIES_FILE: &str = "entities.txt";
const QUERY_MAP_FILE: &str = "query_map.tsv";

/// Everything needed to run a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    /// Entity types the model was trained to ask about, sorted.
    pub entity_set: Vec<String>,
    pub query_map: Option<QueryMap>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.params.save(&dir.join(PARAMS_FILE))?;
        write(&dir.join(CONFIG_FILE), &self.model.config.to_kv().to_text())?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        write(&dir.join(ENTITIES_FILE), &(self.entity_set.join("\n") + "\n"))?;
        let qm_path = dir.join(QUERY_MAP_FILE);
        match &self.query_map {
            Some(qm) => write(&qm_path, &qm.to_tsv())?,
            None if qm_path.exists() => {
                std::fs::remove_file(&qm_path).map_err(|e| Error::io(&qm_path, e))?
            }
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = ModelConfig::from_kv(&KvMap::load(&dir.join(CONFIG_FILE))?)?;
        let params = ParamStore::load(&dir.join(PARAMS_FILE))?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        if vocab.len() != config.encoder.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                config.encoder.vocab_size
            )));
        }
        let entities_path = dir.join(ENTITIES_FILE);
        let entity_set = std::fs::read_to_string(&entities_path)
            .map_err(|e| Error::io(&entities_path, e))?
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        let qm_path = dir.join(QUERY_MAP_FILE);
        let query_map = qm_path.exists().then(|| QueryMap::load(&qm_path)).transpose()?;
        Ok(Self {
            model: Model { config, params },
            vocab,
            entity_set,
            query_map,
        })
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
