use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use mqner_core::bench::{run_bench, BenchConfig};
use mqner_core::dataops::{
    build_gazetteer, entities_per_text_stats, generate_synthetic, load_samples, read_mqmrc,
    read_sqmrc, reduction_pct, tag_texts, to_mqmrc, to_sqmrc, value_frequencies, write_mqmrc,
    write_sqmrc, Gazetteer, Grouping, Heuristics, MqmrcRecord, Preset, SyntheticSpec,
};
use mqner_core::evaluation::{
    exact_match_score, gold_texts, predict_corpus, read_predictions, write_predictions,
};
use mqner_core::tokenizer::build_vocab;
use mqner_core::training::{self, add_no_answers, TrainConfig};
use mqner_core::{
    Checkpoint, EncoderConfig, Error, EvalReport, Mode, Model, QueryMap, Result, Sample, Vocab,
};

use crate::args::{
    BenchArgs, EvalArgs, ModelArgs, ReportFormat, StatsArgs, Switch, SynthArgs, TagArgs,
    TrainArgs, TransformArgs,
};
use crate::settings::Settings;

const DEFAULT_MAX_SEQ_LEN: usize = 128;
const REPORT_FILE: &str = "train_report.jsonl";

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

pub fn synth(s: &Settings, a: SynthArgs) -> Result<()> {
    let preset = s.or(a.preset, "preset", Preset::Retail)?;
    let n = s.or(a.samples, "samples", 200)?;
    let seed = s.or(a.seed, "seed", 0)?;
    let mode = s.or(a.mode, "mode", Mode::Mqmrc)?;
    let output = s.path(a.output, "output")?;
    let records = generate_synthetic(&SyntheticSpec::preset(preset, n, seed))?;
    let questions: usize = records.iter().map(|r| r.entities.len()).sum();
    match mode {
        Mode::Mqmrc => write_mqmrc(&output, &records)?,
        Mode::Sqmrc => write_sqmrc(&output, &to_sqmrc(&records))?,
    }
    println!("wrote {} texts, {questions} questions ({mode}) to {}", records.len(), output.display());
    Ok(())
}

fn print_reduction(single: usize, multi: usize) {
    match reduction_pct(single, multi) {
        Ok(pct) => println!("reduction {pct:.2}%"),
        Err(_) => println!("reduction undefined"),
    }
}

pub fn transform(s: &Settings, a: TransformArgs) -> Result<()> {
    let input = s.path(a.input, "input")?;
    let output = s.path(a.output, "output")?;
    let to = s.required(a.to, "to")?;
    let grouping = s.or(a.grouping, "grouping", Grouping::ExactText)?;
    let (single, multi) = match to {
        Mode::Mqmrc => {
            let rows = read_sqmrc(&input)?;
            let grouped = to_mqmrc(&rows, grouping);
            write_mqmrc(&output, &grouped)?;
            (rows.len(), grouped.len())
        }
        Mode::Sqmrc => {
            let records = read_mqmrc(&input)?;
            let rows = to_sqmrc(&records);
            write_sqmrc(&output, &rows)?;
            (rows.len(), records.len())
        }
    };
    println!("{single} single-question rows, {multi} multi-question rows");
    print_reduction(single, multi);
    Ok(())
}

pub fn stats(s: &Settings, a: StatsArgs) -> Result<()> {
    let input = s.path(a.input, "input")?;
    let mode = s.or(a.mode, "mode", Mode::Mqmrc)?;
    let grouping = s.or(a.grouping, "grouping", Grouping::ExactText)?;
    let format = s.or(a.format, "format", ReportFormat::Table)?;
    let (records, single_rows) = match mode {
        Mode::Mqmrc => (read_mqmrc(&input)?, None),
        Mode::Sqmrc => {
            let rows = read_sqmrc(&input)?;
            (to_mqmrc(&rows, grouping), Some(rows.len()))
        }
    };
    let st = entities_per_text_stats(&records);
    if format == ReportFormat::Json {
        println!("{}", serde_json::to_string(&st).expect("stats serialize"));
        return Ok(());
    }
    let (num, den) = st.mean_k();
    let mut out = format!("texts {}\nquestions {}\n", st.records, st.total_questions);
    if den > 0 {
        let _ = writeln!(out, "mean k {num}/{den} = {:.4}", num as f64 / den as f64);
    }
    if let Some(m) = st.median {
        let _ = writeln!(out, "median k {m}");
    }
    out.push_str("k  texts\n");
    for (k, count) in &st.histogram {
        let _ = writeln!(out, "{k}  {count}");
    }
    print!("{out}");
    if let Some(single) = single_rows {
        print_reduction(single, records.len());
    }
    Ok(())
}

pub fn tag(s: &Settings, a: TagArgs) -> Result<()> {
    let input = s.path(a.input, "input")?;
    let output = s.path(a.output, "output")?;
    let heuristics = s.or(a.heuristics, "heuristics", Heuristics::all())?;
    let frequencies = match (
        s.opt(a.gazetteer, "gazetteer")?,
        s.opt(a.labelled, "labelled")?,
    ) {
        (Some(path), None) => Gazetteer::parse_frequencies(&read_file(&path)?, &path)?,
        (None, Some(path)) => value_frequencies(&read_mqmrc(&path)?)?,
        _ => {
            return Err(Error::Config(
                "give exactly one of --gazetteer or --labelled".into(),
            ))
        }
    };
    let gazetteer = build_gazetteer(&frequencies);
    if let Some(path) = s.opt(a.gazetteer_out, "gazetteer-out")? {
        write_file(&path, &gazetteer.to_tsv())?;
    }
    let texts: Vec<String> = read_file(&input)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect();
    let records = tag_texts(&texts, &gazetteer, heuristics);
    write_mqmrc(&output, &records)?;
    let spans: usize = records.iter().flat_map(|r| r.entities.values()).map(Vec::len).sum();
    let values: usize = gazetteer.attributes.values().map(Vec::len).sum();
    println!(
        "tagged {} texts with {spans} spans from {} attributes ({values} values kept)",
        records.len(),
        gazetteer.attributes.len()
    );
    Ok(())
}

fn load_query_map(s: &Settings, m: &ModelArgs) -> Result<Option<QueryMap>> {
    s.opt(m.query_map.clone(), "query-map")?
        .map(|p| QueryMap::load(&p))
        .transpose()
}

/// Vocabulary over context texts, entity names and query texts.
fn corpus_vocab(samples: &[Sample], query_map: Option<&QueryMap>) -> Result<Vocab> {
    let mut texts: Vec<String> = samples.iter().map(|x| x.context_tokens.join(" ")).collect();
    texts.extend(training::entity_set(samples));
    if let Some(qm) = query_map {
        texts.extend(qm.iter().map(|(_, q)| q.to_owned()));
    }
    build_vocab(texts.iter().map(String::as_str), 1, false)
}

fn encoder_config(s: &Settings, m: &ModelArgs, vocab_size: usize) -> Result<EncoderConfig> {
    let mut e = EncoderConfig::desk(vocab_size, s.or(m.max_seq_len, "max-seq-len", DEFAULT_MAX_SEQ_LEN)?);
    e.n_layers = s.or(m.layers, "layers", e.n_layers)?;
    e.n_heads = s.or(m.attention_heads, "attention-heads", e.n_heads)?;
    e.hidden_dim = s.or(m.hidden_dim, "hidden-dim", e.hidden_dim)?;
    e.ffn_dim = s.or(m.ffn_dim, "ffn-dim", e.ffn_dim)?;
    e.dropout_rate = s.or(m.dropout, "dropout", e.dropout_rate)?;
    e.validate()?;
    Ok(e)
}

fn train_config(s: &Settings, m: &ModelArgs) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        batch_size: s.or(m.batch_size, "batch-size", d.batch_size)?,
        learning_rate: s.or(m.lr, "lr", d.learning_rate)?,
        epochs: s.or(m.epochs, "epochs", d.epochs)?,
        shuffle_entities: s.or(m.shuffle_entities, "shuffle-entities", Switch::Off)? == Switch::On,
        no_answer_rate: s.or(m.no_answer_rate, "no-answer-rate", d.no_answer_rate)?,
        seed: s.or(m.seed, "seed", d.seed)?,
        mode: s.or(m.mode, "mode", d.mode)?,
        head: s.or(m.head, "head", d.head)?,
        interaction: s.or(m.op, "op", d.interaction)?,
        parallel: true,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(s: &Settings, a: TrainArgs) -> Result<()> {
    let input = s.path(a.input, "input")?;
    let output = s.path(a.output, "output")?;
    let train_set = load_samples(&input)?;
    let dev_set = match s.opt(a.dev, "dev")? {
        Some(p) => load_samples(&p)?,
        None => Vec::new(),
    };
    let query_map = load_query_map(s, &a.model)?;
    let entities = training::entity_set(&train_set);
    if let Some(qm) = &query_map {
        qm.check_covers(entities.iter().map(String::as_str))?;
    }
    let vocab = corpus_vocab(&train_set, query_map.as_ref())?;
    let cfg = train_config(s, &a.model)?;
    let model = Model::new(cfg.model_config(encoder_config(s, &a.model, vocab.len())?), cfg.seed)?;
    let (model, report) =
        training::train(model, &train_set, &dev_set, &vocab, query_map.as_ref(), &cfg)?;

    for e in &report.epochs {
        let dev = e.dev_f1.map_or_else(|| "-".to_owned(), |f| format!("{f:.4}"));
        let best = if e.epoch == report.best_epoch { "  *" } else { "" };
        println!(
            "epoch {:>3}  loss {:.4}  dev_f1 {dev}  passes {}  {:.2}s{best}",
            e.epoch, e.train_loss, e.forward_passes, e.seconds
        );
    }
    Checkpoint {
        model,
        vocab,
        entity_set: entities.into_iter().collect(),
        query_map,
    }
    .save(&output)?;
    write_file(&output.join(REPORT_FILE), &report.to_jsonl())?;
    println!("best epoch {}; checkpoint written to {}", report.best_epoch, output.display());
    Ok(())
}

fn print_report(report: &EvalReport, format: ReportFormat) {
    match format {
        ReportFormat::Json => println!("{}", report.to_json()),
        ReportFormat::Table => {
            print!("{}", report.to_table());
            println!(
                "F1 {:.4}  precision {:.4}  recall {:.4}",
                report.f1, report.precision, report.recall
            );
        }
    }
}

pub fn eval(s: &Settings, a: EvalArgs) -> Result<()> {
    let input = s.path(a.input, "input")?;
    let format = s.or(a.format, "format", ReportFormat::Table)?;
    let gold_samples = load_samples(&input)?;
    let gold = gold_samples.iter().map(gold_texts).collect::<Result<Vec<_>>>()?;

    let pred = match (s.opt(a.model, "model")?, s.opt(a.predictions, "predictions")?) {
        (Some(dir), None) => {
            let ckpt = Checkpoint::load(&dir)?;
            let asked: BTreeSet<String> = ckpt.entity_set.iter().cloned().collect();
            let samples = add_no_answers(&gold_samples, 1.0, 0, &asked)?;
            let (pred, passes) =
                predict_corpus(&ckpt.model, &samples, &ckpt.vocab, ckpt.query_map.as_ref())?;
            if let Some(out) = s.opt(a.output, "output")? {
                write_predictions(&out, &pred)?;
            }
            if format == ReportFormat::Table {
                println!("{} texts, {passes} encoder passes", samples.len());
            }
            pred
        }
        (None, Some(path)) => {
            let pred = read_predictions(&path)?;
            if pred.len() > gold.len() {
                return Err(Error::Contract(format!(
                    "predictions mention id {} but the gold corpus has {} texts",
                    pred.len() - 1,
                    gold.len()
                )));
            }
            pred
        }
        _ => {
            return Err(Error::Config(
                "give exactly one of --model or --predictions".into(),
            ))
        }
    };
    print_report(&exact_match_score(&gold, &pred), format);
    Ok(())
}

pub fn bench(s: &Settings, a: BenchArgs) -> Result<()> {
    let query_map = load_query_map(s, &a.model)?;
    let samples = match s.opt(a.input, "input")? {
        Some(p) => load_samples(&p)?,
        None => {
            let spec = SyntheticSpec::preset(
                s.or(a.preset, "preset", Preset::K3)?,
                s.or(a.samples, "samples", 200)?,
                s.or(a.model.seed, "seed", 0)?,
            );
            generate_synthetic(&spec)?
                .iter()
                .map(MqmrcRecord::to_sample)
                .collect::<Result<_>>()?
        }
    };
    let vocab = corpus_vocab(&samples, query_map.as_ref())?;
    let train = train_config(s, &a.model)?;
    let mut cfg = BenchConfig::new(encoder_config(s, &a.model, vocab.len())?);
    cfg.head = train.head;
    cfg.interaction = train.interaction;
    cfg.batch_size = train.batch_size;
    cfg.learning_rate = s.or(a.model.lr, "lr", cfg.learning_rate)?;
    cfg.seed = train.seed;
    cfg.repetitions = s.or(a.repetitions, "repetitions", cfg.repetitions)?;
    let report = run_bench(&samples, &vocab, query_map.as_ref(), &cfg)?;
    print!("{}", report.to_table());
    if let Some(out) = s.opt(a.output, "output")? {
        write_file(&out, &(report.to_json() + "\n"))?;
    }
    Ok(())
}
