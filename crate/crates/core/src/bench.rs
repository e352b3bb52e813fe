//! Multi-question vs single-question throughput: exact encoder-pass accounting
//! plus measured wall clock for a training epoch and an inference sweep.

use std::time::Instant;

use serde::Serialize;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::{HeadKind, InteractionKind};
use crate::model::{Mode, Model};
use crate::packing::{QueryMap, Sample};
use crate::tokenizer::Vocab;
use crate::training::{self, TrainConfig};

/// Encoder passes needed to ask every question of every sample once.
pub fn count_passes(samples: &[Sample], mode: Mode) -> usize {
    match mode {
        Mode::Mqmrc => samples.len(),
        Mode::Sqmrc => samples.iter().map(Sample::k).sum(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub encoder: EncoderConfig,
    pub head: HeadKind,
    pub interaction: InteractionKind,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub repetitions: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            head: HeadKind::Bio,
            interaction: InteractionKind::ElementwiseProduct,
            batch_size: 32,
            learning_rate: 1e-3,
            repetitions: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeBench {
    pub forward_passes: usize,
    /// Median over repetitions.
    pub train_epoch_seconds: f64,
    /// Median over repetitions.
    pub inference_seconds: f64,
    pub peak_seq_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub texts: usize,
    pub questions: usize,
    pub repetitions: usize,
    pub mqmrc: ModeBench,
    pub sqmrc: ModeBench,
    /// sqmrc / mqmrc train-epoch time.
    pub speedup_train: f64,
    /// sqmrc / mqmrc inference time.
    pub speedup_infer: f64,
    /// sqmrc / mqmrc forward passes; equals questions / texts.
    pub pass_ratio: f64,
}

impl BenchReport {
    /// `passes_sqmrc * texts == passes_mqmrc * questions`, in integers.
    pub fn pass_identity_holds(&self) -> bool {
        self.sqmrc.forward_passes * self.texts == self.mqmrc.forward_passes * self.questions
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let row = |name: &str, m: &ModeBench| {
            format!(
                "{name:<6}  {:>8}  {:>11.4}  {:>11.4}  {:>8}\n",
                m.forward_passes, m.train_epoch_seconds, m.inference_seconds, m.peak_seq_len
            )
        };
        format!(
            "{:<6}  {:>8}  {:>11}  {:>11}  {:>8}\n{}{}speedup train {:.3}x, inference {:.3}x, pass ratio {:.4} ({} questions / {} texts)\n",
            "mode",
            "passes",
            "train_s",
            "infer_s",
            "peak_len",
            row("mqmrc", &self.mqmrc),
            row("sqmrc", &self.sqmrc),
            self.speedup_train,
            self.speedup_infer,
            self.pass_ratio,
            self.questions,
            self.texts,
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

struct Runner<'a> {
    samples: &'a [Sample],
    vocab: &'a Vocab,
    query_map: Option<&'a QueryMap>,
    cfg: &'a BenchConfig,
}

impl Runner<'_> {
    fn train_config(&self, mode: Mode) -> TrainConfig {
        TrainConfig {
            batch_size: self.cfg.batch_size,
            learning_rate: self.cfg.learning_rate,
            epochs: 1,
            shuffle_entities: false,
            no_answer_rate: 0.0,
            seed: self.cfg.seed,
            mode,
            head: self.cfg.head,
            interaction: self.cfg.interaction,
            parallel: false,
        }
    }

    fn model(&self, mode: Mode) -> Result<Model> {
        Model::new(self.train_config(mode).model_config(self.cfg.encoder.clone()), self.cfg.seed)
    }

    fn train_epoch(&self, mode: Mode, samples: &[Sample]) -> Result<f64> {
        let (_, report) = training::train(
            self.model(mode)?,
            samples,
            &[],
            self.vocab,
            self.query_map,
            &self.train_config(mode),
        )?;
        Ok(report.epochs[0].seconds)
    }

    fn infer(&self, model: &Model, samples: &[Sample]) -> Result<f64> {
        let started = Instant::now();
        for (i, s) in samples.iter().enumerate() {
            model.predict(s, self.vocab, self.query_map).map_err(|e| e.in_sample(i))?;
        }
        Ok(started.elapsed().as_secs_f64())
    }

    fn peak_len(&self, model: &Model) -> Result<usize> {
        let mut peak = 0;
        for (i, s) in self.samples.iter().enumerate() {
            for p in model.pack(s, self.vocab, self.query_map).map_err(|e| e.in_sample(i))? {
                peak = peak.max(p.len());
            }
        }
        Ok(peak)
    }
}

/// Measures both modes on `samples`, asking each sample's listed entities.
/// Repetitions interleave the modes; a short untimed warmup runs first.
pub fn run_bench(
    samples: &[Sample],
    vocab: &Vocab,
    query_map: Option<&QueryMap>,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if samples.is_empty() || cfg.repetitions == 0 {
        return Err(Error::Contract("bench needs samples and at least one repetition".into()));
    }
    if let Some(i) = samples.iter().position(|s| s.k() == 0) {
        return Err(Error::Contract("sample asks about no entities".into()).in_sample(i));
    }
    let runner = Runner {
        samples,
        vocab,
        query_map,
        cfg,
    };
    const MODES: [Mode; 2] = [Mode::Mqmrc, Mode::Sqmrc];
    let models = [runner.model(Mode::Mqmrc)?, runner.model(Mode::Sqmrc)?];

    let warm = &samples[..samples.len().min(cfg.batch_size)];
    for (mode, model) in MODES.iter().zip(&models) {
        runner.train_epoch(*mode, warm)?;
        runner.infer(model, warm)?;
    }

    let mut train = [Vec::new(), Vec::new()];
    let mut infer = [Vec::new(), Vec::new()];
    for _ in 0..cfg.repetitions {
        for (i, mode) in MODES.iter().enumerate() {
            train[i].push(runner.train_epoch(*mode, samples)?);
        }
        for (i, model) in models.iter().enumerate() {
            infer[i].push(runner.infer(model, samples)?);
        }
    }

    let mut measured = Vec::with_capacity(2);
    for (i, (mode, model)) in MODES.iter().zip(&models).enumerate() {
        measured.push(ModeBench {
            forward_passes: count_passes(samples, *mode),
            train_epoch_seconds: median(std::mem::take(&mut train[i])),
            inference_seconds: median(std::mem::take(&mut infer[i])),
            peak_seq_len: runner.peak_len(model)?,
        });
    }
    let sqmrc = measured.pop().expect("two modes");
    let mqmrc = measured.pop().expect("two modes");
    Ok(BenchReport {
        texts: samples.len(),
        questions: count_passes(samples, Mode::Sqmrc),
        repetitions: cfg.repetitions,
        speedup_train: sqmrc.train_epoch_seconds / mqmrc.train_epoch_seconds,
        speedup_infer: sqmrc.inference_seconds / mqmrc.inference_seconds,
        pass_ratio: sqmrc.forward_passes as f64 / mqmrc.forward_passes as f64,
        mqmrc,
        sqmrc,
    })
}
