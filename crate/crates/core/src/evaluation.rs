//! BIO decoding and exact-match micro precision/recall/F1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::BioLabel;
use crate::model::{EntityPrediction, Model};
use crate::packing::{QueryMap, Sample, Span};
use crate::tokenizer::{decode_span, Vocab};

/// Entity name → set of surface span texts, for one sample.
pub type EntityTexts = BTreeMap<String, BTreeSet<String>>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedBio {
    /// Context spans, sorted and disjoint.
    pub spans: Vec<Span>,
    /// The `[CLS]` slot carries `B`.
    pub no_answer: bool,
}

/// Decodes a label row whose first entry is the `[CLS]` slot. Runs `B I*`
/// become spans; an `I` that does not continue a span is ignored.
pub fn decode_bio(labels: &[BioLabel]) -> DecodedBio {
    let no_answer = labels.first() == Some(&BioLabel::B);
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    let ctx = labels.get(1..).unwrap_or_default();
    for (j, &label) in ctx.iter().enumerate() {
        match label {
            BioLabel::B => {
                if let Some(s) = open.replace(j) {
                    spans.push((s, j - 1));
                }
            }
            BioLabel::I => {}
            BioLabel::O => {
                if let Some(s) = open.take() {
                    spans.push((s, j - 1));
                }
            }
        }
    }
    if let Some(s) = open {
        spans.push((s, ctx.len() - 1));
    }
    DecodedBio { spans, no_answer }
}

/// Spans an entity is predicted to have: none when the `[CLS]` slot fires.
pub fn answer_spans(labels: &[BioLabel]) -> Vec<Span> {
    let d = decode_bio(labels);
    if d.no_answer {
        Vec::new()
    } else {
        d.spans
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_entity: BTreeMap<String, EvalReport>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
            per_entity: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Aligned text table: one row per entity, then the micro total.
    pub fn to_table(&self) -> String {
        let width = self
            .per_entity
            .keys()
            .map(|k| k.chars().count())
            .chain([6])
            .max()
            .unwrap_or(6);
        let mut out = format!(
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>9}  {:>7}  {:>7}\n",
            "entity", "tp", "fp", "fn", "precision", "recall", "f1"
        );
        let rows = self.per_entity.iter().map(|(k, r)| (k.as_str(), r));
        for (name, r) in rows.chain([("micro", self)]) {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>7}  {:>7}  {:>7}  {:>9.4}  {:>7.4}  {:>7.4}",
                r.tp, r.fp, r.fn_, r.precision, r.recall, r.f1
            );
        }
        out
    }
}

/// Micro-averaged exact-match scores over aligned per-sample gold and predicted
/// texts. A missing sample on either side counts as empty.
pub fn exact_match_score(gold: &[EntityTexts], pred: &[EntityTexts]) -> EvalReport {
    let empty = EntityTexts::new();
    let mut counts: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
    for i in 0..gold.len().max(pred.len()) {
        let g = gold.get(i).unwrap_or(&empty);
        let p = pred.get(i).unwrap_or(&empty);
        for (entity, texts) in g {
            let other = p.get(entity);
            let c = counts.entry(entity).or_default();
            for t in texts {
                if other.is_some_and(|o| o.contains(t)) {
                    c[0] += 1;
                } else {
                    c[2] += 1;
                }
            }
        }
        for (entity, texts) in p {
            let other = g.get(entity);
            let c = counts.entry(entity).or_default();
            c[1] += texts.iter().filter(|t| !other.is_some_and(|o| o.contains(*t))).count();
        }
    }
    let [tp, fp, fn_] = counts.values().fold([0; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]);
    let mut report = EvalReport::from_counts(tp, fp, fn_);
    report.per_entity = counts
        .into_iter()
        .map(|(k, [tp, fp, fn_])| (k.to_owned(), EvalReport::from_counts(tp, fp, fn_)))
        .collect();
    report
}

fn texts_of<'a>(
    tokens: &[String],
    entries: impl IntoIterator<Item = (&'a str, &'a [Span])>,
) -> Result<EntityTexts> {
    let mut out = EntityTexts::new();
    for (entity, spans) in entries {
        let set = out.entry(entity.to_owned()).or_default();
        for &(s, e) in spans {
            set.insert(decode_span(tokens, s, e)?);
        }
    }
    Ok(out)
}

/// Gold span texts of a sample; entities without spans map to empty sets.
pub fn gold_texts(sample: &Sample) -> Result<EntityTexts> {
    texts_of(
        &sample.context_tokens,
        sample.entities.iter().map(|e| (e.name.as_str(), e.spans.as_slice())),
    )
}

pub fn prediction_texts(sample: &Sample, preds: &[EntityPrediction]) -> Result<EntityTexts> {
    texts_of(
        &sample.context_tokens,
        preds.iter().map(|p| (p.entity.as_str(), p.spans.as_slice())),
    )
}

/// Predicted texts for every sample plus the total number of encoder passes.
/// Samples are scored in parallel; results keep corpus order.
pub fn predict_corpus(
    model: &Model,
    samples: &[Sample],
    vocab: &Vocab,
    query_map: Option<&QueryMap>,
) -> Result<(Vec<EntityTexts>, usize)> {
    let per_sample: Vec<(EntityTexts, usize)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (preds, passes) = model.predict(s, vocab, query_map).map_err(|e| e.in_sample(i))?;
            Ok((prediction_texts(s, &preds).map_err(|e| e.in_sample(i))?, passes))
        })
        .collect::<Result<_>>()?;
    let passes = per_sample.iter().map(|p| p.1).sum();
    Ok((per_sample.into_iter().map(|p| p.0).collect(), passes))
}

/// Scores `model` on `samples`, asking about each sample's listed entities.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    vocab: &Vocab,
    query_map: Option<&QueryMap>,
) -> Result<EvalReport> {
    let (pred, _) = predict_corpus(model, samples, vocab, query_map)?;
    let gold = samples.iter().map(gold_texts).collect::<Result<Vec<_>>>()?;
    Ok(exact_match_score(&gold, &pred))
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    id: usize,
    entities: BTreeMap<String, Vec<String>>,
}

/// Writes one JSON line per sample: `{"id": index, "entities": {name: [texts]}}`.
pub fn write_predictions(path: &Path, preds: &[EntityTexts]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (id, p) in preds.iter().enumerate() {
        let line = PredictionLine {
            id,
            entities: p.iter().map(|(k, v)| (k.clone(), v.iter().cloned().collect())).collect(),
        };
        let json = serde_json::to_string(&line).expect("prediction serializes");
        writeln!(w, "{json}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a predictions file into a vector indexed by sample id. Ids absent
/// from the file yield empty predictions.
pub fn read_predictions(path: &Path) -> Result<Vec<EntityTexts>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<EntityTexts> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            message,
        };
        let p: PredictionLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(p.id) {
            return Err(parse_err(format!("duplicate id {}", p.id)));
        }
        if out.len() <= p.id {
            out.resize(p.id + 1, EntityTexts::new());
        }
        out[p.id] = p.entities.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use BioLabel::*;

    fn texts(entries: &[(&str, &[&str])]) -> EntityTexts {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_bio(&[O, O, B, I, O]).spans, vec![(1, 2)]);
        assert_eq!(decode_bio(&[O, B, B, O]).spans, vec![(0, 0), (1, 1)]);
        assert_eq!(decode_bio(&[O, O, I, I]).spans, vec![]);
        assert_eq!(decode_bio(&[O, B, I, I]).spans, vec![(0, 2)]);
        assert_eq!(decode_bio(&[O]).spans, vec![]);
    }

    #[test]
    fn cls_b_suppresses_context_spans() {
        let d = decode_bio(&[B, O, O, O]);
        assert!(d.no_answer && d.spans.is_empty());
        let d = decode_bio(&[B, B, I, O]);
        assert!(d.no_answer);
        assert_eq!(d.spans, vec![(0, 1)]);
        assert_eq!(answer_spans(&[B, B, I, O]), vec![]);
        assert_eq!(answer_spans(&[O, B, I, O]), vec![(0, 1)]);
    }

    #[test]
    fn score_examples() {
        let r = exact_match_score(&[texts(&[("color", &["red"])])], &[texts(&[("color", &["red"])])]);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        let r = exact_match_score(&[texts(&[("color", &["red"])])], &[texts(&[("color", &["red wine"])])]);
        assert_eq!((r.tp, r.fp, r.fn_, r.f1), (0, 1, 1, 0.0));

        let r = exact_match_score(&[texts(&[("color", &["red", "blue"])])], &[texts(&[("color", &["red"])])]);
        assert_eq!((r.precision, r.recall), (1.0, 0.5));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);

        let r = exact_match_score(&[texts(&[("color", &["red"])])], &[EntityTexts::new()]);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn entity_mismatch_is_not_a_match() {
        let r = exact_match_score(&[texts(&[("color", &["red"])])], &[texts(&[("material", &["red"])])]);
        assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 1));
        assert_eq!(r.per_entity["material"].fp, 1);
        assert_eq!(r.per_entity["color"].fn_, 1);
    }

    #[test]
    fn table_and_json() {
        let r = exact_match_score(&[texts(&[("color", &["red"])])], &[texts(&[("color", &["red"])])]);
        let table = r.to_table();
        assert!(table.lines().last().unwrap().ends_with("1.0000"));
        assert!(table.contains("color"));
        let json = r.to_json();
        assert!(json.contains("\"fn\":0"));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn predictions_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let preds = vec![texts(&[("color", &["red", "blue"])]), EntityTexts::new()];
        write_predictions(&path, &preds).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), preds);
    }

    fn arb_labels() -> impl Strategy<Value = Vec<BioLabel>> {
        proptest::collection::vec(prop_oneof![Just(O), Just(B), Just(I)], 1..20)
    }

    fn arb_corpus() -> impl Strategy<Value = Vec<EntityTexts>> {
        let entity = prop_oneof![Just("a"), Just("b"), Just("c")];
        let text = prop_oneof![Just("x"), Just("y"), Just("x y"), Just("z")];
        let sample = proptest::collection::btree_map(
            entity.prop_map(String::from),
            proptest::collection::btree_set(text.prop_map(String::from), 0..3),
            0..3,
        );
        proptest::collection::vec(sample, 0..6)
    }

    proptest! {
        #[test]
        fn decoded_spans_are_sorted_disjoint_in_bounds(labels in arb_labels()) {
            let d = decode_bio(&labels);
            let n_ctx = labels.len() - 1;
            for &(s, e) in &d.spans {
                prop_assert!(s <= e && e < n_ctx);
                prop_assert_eq!(labels[s + 1], B);
            }
            for w in d.spans.windows(2) {
                prop_assert!(w[0].1 < w[1].0);
            }
        }

        #[test]
        fn score_is_order_symmetric_and_bounded(gold in arb_corpus(), pred in arb_corpus()) {
            let n = gold.len().max(pred.len());
            let pad = |mut v: Vec<EntityTexts>| { v.resize(n, EntityTexts::new()); v };
            let (gold, pred) = (pad(gold), pad(pred));
            let r = exact_match_score(&gold, &pred);
            let mut rg = gold.clone();
            let mut rp = pred.clone();
            rg.reverse();
            rp.reverse();
            prop_assert_eq!(&exact_match_score(&rg, &rp), &r);
            prop_assert!((0.0..=1.0).contains(&r.f1));
            let gold_total: usize = gold.iter().flat_map(|g| g.values()).map(BTreeSet::len).sum();
            let pred_total: usize = pred.iter().flat_map(|g| g.values()).map(BTreeSet::len).sum();
            prop_assert_eq!(r.tp + r.fn_, gold_total);
            prop_assert_eq!(r.tp + r.fp, pred_total);
        }

        #[test]
        fn grouped_and_per_entity_scoring_agree(gold in arb_corpus(), pred in arb_corpus()) {
            let n = gold.len().max(pred.len());
            let pad = |mut v: Vec<EntityTexts>| { v.resize(n, EntityTexts::new()); v };
            let (gold, pred) = (pad(gold), pad(pred));
            // One row per (sample, entity), as single-question evaluation enumerates them.
            let mut g_rows = Vec::new();
            let mut p_rows = Vec::new();
            for (g, p) in gold.iter().zip(&pred) {
                let names: BTreeSet<&String> = g.keys().chain(p.keys()).collect();
                for name in names {
                    let one = |m: &EntityTexts| m.get(name).map(|t| EntityTexts::from([(name.clone(), t.clone())])).unwrap_or_default();
                    g_rows.push(one(g));
                    p_rows.push(one(p));
                }
            }
            let grouped = exact_match_score(&gold, &pred);
            let flat = exact_match_score(&g_rows, &p_rows);
            prop_assert_eq!((grouped.tp, grouped.fp, grouped.fn_), (flat.tp, flat.fp, flat.fn_));
        }
    }
}
