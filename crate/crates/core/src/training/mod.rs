//! Mini-batch Adam training with entity-order shuffling and no-answer sampling.

mod adam;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use adam::{Adam, BETA1, BETA2, EPSILON};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation;
use crate::heads::{BioLabel, HeadKind, InteractionKind};
use crate::model::{clip_spans, gold_bio, Mode, Model, ModelConfig};
use crate::numerics::Tape;
use crate::packing::{permute_entities, EntityAnnotation, PackedSequence, QueryMap, Sample, Span};
use crate::tokenizer::Vocab;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Re-permute each sample's entity order every epoch.
    pub shuffle_entities: bool,
    /// Probability of asking about each entity type a training sample lacks.
    pub no_answer_rate: f64,
    pub seed: u64,
    pub mode: Mode,
    pub head: HeadKind,
    pub interaction: InteractionKind,
    /// Compute per-instance gradients of a batch on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-5,
            epochs: 20,
            shuffle_entities: false,
            no_answer_rate: 1.0,
            seed: 0,
            mode: Mode::Mqmrc,
            head: HeadKind::Bio,
            interaction: InteractionKind::ElementwiseProduct,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.no_answer_rate) {
            return Err(Error::Config(format!(
                "no_answer_rate {} outside [0, 1]",
                self.no_answer_rate
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }

    pub fn model_config(&self, encoder: EncoderConfig) -> ModelConfig {
        ModelConfig {
            encoder,
            mode: self.mode,
            head: self.head,
            interaction: self.interaction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when no dev set was given.
    pub dev_f1: Option<f64>,
    pub forward_passes: usize,
    /// Wall-clock seconds of the parameter-update loop (dev scoring excluded).
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainReport {
    /// The report with every timing zeroed; fixed seeds reproduce it bit for bit.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for e in &mut r.epochs {
            e.seconds = 0.0;
        }
        r
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            #[serde(flatten)]
            record: &'a EpochRecord,
            best: bool,
        }
        let mut out = String::new();
        for record in &self.epochs {
            let line = Line {
                record,
                best: record.epoch == self.best_epoch,
            };
            let _ = writeln!(out, "{}", serde_json::to_string(&line).expect("record serializes"));
        }
        out
    }
}

/// Sorted union of entity names over `samples`.
pub fn entity_set(samples: &[Sample]) -> BTreeSet<String> {
    samples
        .iter()
        .flat_map(|s| s.entity_names().map(str::to_owned))
        .collect()
}

/// Adds absent entity types from `entity_set` as no-answer questions: every one
/// when `rate` is 1, otherwise each independently with probability `rate`.
/// Entities end up sorted by name.
pub fn add_no_answers(
    samples: &[Sample],
    rate: f64,
    seed: u64,
    entity_set: &BTreeSet<String>,
) -> Result<Vec<Sample>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("no-answer rate {rate} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            for name in entity_set {
                if s.entity(name).is_none() && (rate >= 1.0 || rng.random::<f64>() < rate) {
                    out.entities.push(EntityAnnotation::new(name.clone(), Vec::new()));
                }
            }
            out.entities.sort_by(|a, b| a.name.cmp(&b.name));
            out
        })
        .collect())
}

/// Gold context spans for each question of `packed`, with spans cut by
/// truncation dropped.
pub fn gold_spans(sample: &Sample, packed: &PackedSequence) -> Result<Vec<Vec<Span>>> {
    packed
        .entity_order
        .iter()
        .map(|name| {
            sample
                .entity(name)
                .map(|e| clip_spans(&e.spans, packed.n_ctx()))
                .ok_or_else(|| Error::Contract(format!("packing asks about unknown entity `{name}`")))
        })
        .collect()
}

/// Gold label matrix `[k, n_ctx + 1]`; column 0 is the `[CLS]` slot.
pub fn make_gold_bio(sample: &Sample, packed: &PackedSequence) -> Result<Vec<Vec<BioLabel>>> {
    gold_spans(sample, packed)?
        .iter()
        .map(|spans| gold_bio(spans, packed.n_ctx()))
        .collect()
}

/// One encoder input with its targets.
#[derive(Clone, Debug)]
pub struct Instance {
    /// Index of the originating sample.
    pub sample: usize,
    pub packed: PackedSequence,
    pub gold: Vec<Vec<Span>>,
}

/// Packs `samples` for `model`'s mode. With `shuffle_rng`, each sample's
/// entity order is permuted uniformly before packing.
pub fn build_instances(
    model: &Model,
    samples: &[Sample],
    vocab: &Vocab,
    query_map: Option<&QueryMap>,
    mut shuffle_rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let view = match shuffle_rng.as_deref_mut() {
            Some(rng) => {
                let mut perm: Vec<usize> = (0..sample.k()).collect();
                perm.shuffle(rng);
                permute_entities(sample, &perm)?
            }
            None => sample.clone(),
        };
        let packings = model.pack(&view, vocab, query_map).map_err(|e| e.in_sample(i))?;
        for packed in packings {
            let gold = gold_spans(&view, &packed).map_err(|e| e.in_sample(i))?;
            out.push(Instance {
                sample: i,
                packed,
                gold,
            });
        }
    }
    Ok(out)
}

/// Loss and parameter gradients (store order) for one instance. Dropout runs
/// iff `dropout_rng` is given.
pub fn instance_gradients(
    model: &Model,
    instance: &Instance,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape, true);
    let loss = model.loss(&mut tape, &params, &instance.packed, &instance.gold, dropout_rng)?;
    tape.backward(loss)?;
    Ok((tape.value(loss).data()[0], params.grads(&tape)))
}

/// Mean loss over `instances` without dropout and without gradients.
pub fn mean_loss(model: &Model, instances: &[Instance]) -> Result<f64> {
    let mut total = 0.0;
    for inst in instances {
        let mut tape = Tape::new();
        let params = model.params.bind(&mut tape, false);
        let loss = model.loss(&mut tape, &params, &inst.packed, &inst.gold, None)?;
        total += tape.value(loss).data()[0];
    }
    Ok(total / instances.len() as f64)
}

fn rng_for(seed: u64, epoch: usize, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    for (chunk, word) in bytes
        .chunks_exact_mut(8)
        .zip([seed, epoch as u64, index as u64, purpose])
    {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

const SHUFFLE_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

/// Summed loss and gradients over a batch, accumulated in instance order.
fn batch_gradients(
    model: &Model,
    batch: &[Instance],
    cfg: &TrainConfig,
    epoch: usize,
    offset: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let one = |(j, inst): (usize, &Instance)| {
        let mut rng = rng_for(cfg.seed, epoch, offset + j, DROPOUT_STREAM);
        instance_gradients(model, inst, Some(&mut rng)).map_err(|e| e.in_sample(inst.sample))
    };
    let results: Vec<(f64, Vec<Vec<f64>>)> = if cfg.parallel {
        batch.par_iter().enumerate().map(one).collect::<Result<_>>()?
    } else {
        batch.iter().enumerate().map(one).collect::<Result<_>>()?
    };
    let mut iter = results.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, g) in grads.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Ok((loss, grads))
}

/// Trains `model` in place of a copy and returns the best-epoch model.
///
/// Training samples gain no-answer questions per `cfg.no_answer_rate`; dev
/// samples are asked about every entity type seen in training. The best epoch
/// has the highest dev F1 (earliest on ties), or is the last epoch without a
/// dev set.
pub fn train(
    model: Model,
    train_set: &[Sample],
    dev_set: &[Sample],
    vocab: &Vocab,
    query_map: Option<&QueryMap>,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let entities = entity_set(train_set);
    if let Some(qm) = query_map {
        qm.check_covers(entities.iter().map(String::as_str))?;
    }
    let samples = add_no_answers(train_set, cfg.no_answer_rate, cfg.seed, &entities)?;
    let dev = add_no_answers(dev_set, 1.0, cfg.seed, &entities)?;

    let mut model = model;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let fixed = if cfg.shuffle_entities {
        None
    } else {
        Some(build_instances(&model, &samples, vocab, query_map, None)?)
    };

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut instances = match &fixed {
            Some(v) => v.clone(),
            None => {
                let mut rng = rng_for(cfg.seed, epoch, 0, SHUFFLE_STREAM);
                build_instances(&model, &samples, vocab, query_map, Some(&mut rng))?
            }
        };
        instances.shuffle(&mut rng_for(cfg.seed, epoch, 0, ORDER_STREAM));

        let mut total_loss = 0.0;
        for (b, batch) in instances.chunks(cfg.batch_size).enumerate() {
            let (loss, mut grads) = batch_gradients(&model, batch, cfg, epoch, b * cfg.batch_size)?;
            total_loss += loss;
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            adam.step(&mut model.params, &grads)?;
        }
        let seconds = started.elapsed().as_secs_f64();

        let dev_f1 = if dev.is_empty() {
            None
        } else {
            Some(evaluation::evaluate(&model, &dev, vocab, query_map)?.f1)
        };
        let score = dev_f1.unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s || dev_f1.is_none()) {
            best = Some((score, epoch, model.clone()));
        }
        records.push(EpochRecord {
            epoch,
            train_loss: total_loss / instances.len() as f64,
            dev_f1,
            forward_passes: instances.len(),
            seconds,
        });
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok((
        best_model,
        TrainReport {
            epochs: records,
            best_epoch,
        },
    ))
}
